#pragma once

#include <vector>

#include "bt/core.h"
#include "bt/seq.h"

namespace bt {

// Per-point magnetization, stored as the formal complex 3-vector written in
// the transverse combinations M+ = m_x + i m_y, M- = m_x - i m_y together
// with m_z. For real-valued initial data and real R2* this reduces to the
// physical state with M- = conj(M+) and m_z real; a complex R2* acts directly
// as the transverse damping rate on both combinations.
struct MagState {
    double t = 0.0;
    VecXcd Mperp;  // M+ per grid point
    VecXcd Mminus; // M- per grid point
    VecXcd mz;

    static MagState equilibrium(const CoeffFields& c, double t = 0.0);
    static MagState zero(int n, double t = 0.0);
    VecXd Mz_phys() const { return mz.real(); }
};

// Exact solution operator of the 3x3 pulse system over a step dt:
// m(t0+dt) = P m(t0) + q, with generator
//   d/dt m = -A m + (0,0,f),  A = [[a2, 0, -by], [0, a2, bx], [by, -bx, a1]].
struct PulsePropagator {
    Eigen::Matrix3cd P;
    Eigen::Vector3cd q;
    cd alpha1, alpha2, b;
    double dt = 0.0;
    cd lambda0, lambda_plus, lambda_minus; // spectrum of A
};

// b packs the real envelope pair (bx, by) = (Re b, Im b); alpha1/alpha2/f may
// be complex (frequency-domain use). Requires |b|^2 + a1*a2 != 0 when b != 0.
PulsePropagator pulse_propagator(cd alpha1, cd alpha2, cd b, cd f, double dt);

// apply a propagator to one (M+, M-, mz) triple (spatial point or mode)
void apply_propagator(const PulsePropagator& pp, cd& Mp, cd& Mm, cd& mz);

// Apply a pulse segment of height amp over [t0, t0+dt] to every grid point:
// per point a1 = R1, a2 = R2*, b = gamma*cplus(r)*amp, f = R1*Meq.
MagState apply_pulse(const MagState& s, const CoeffFields& c, const VecXcd& cplus,
                     double gamma, cd amp, double dt);

// Closed-form free evolution: M+ <- exp(-(R2* dt + 2 pi i (k_end-k_start).r)) M+,
// M- with the opposite phase, m_z <- Meq + exp(-R1 dt)(m_z - Meq).
MagState free_precession(const MagState& s, const CoeffFields& c,
                         const Vec3& k_start, const Vec3& k_end, const Grid& g,
                         double dt);

enum class BlochMode { ExactPiecewise, Numeric };

struct BlochOptions {
    BlochMode mode = BlochMode::ExactPiecewise;
    // fixed RK4 steps: fraction of a pulse / free segment per step
    double dt_pulse_frac = 1.0 / 50.0;
    double dt_free_frac = 1.0 / 1000.0;
};

// Integrate the sequence and return states at the requested sample times
// (sorted, within [0, T]). Initial state defaults to equilibrium.
std::vector<MagState> solve_bloch(const PulseSequence& seq, const CoeffFields& c,
                                  const VecXcd& cplus, const Grid& g, double gamma,
                                  const BlochOptions& opt,
                                  const std::vector<double>& sample_times,
                                  const MagState* init = nullptr);

// Closed-form approximate transverse state (taup -> 0 model):
//   Ninety:            -i exp(-(R2*(t-taup) + 2 pi i k(t).r)) Meq
//   OneEightyTauNinety: same with prefactor (1 - 2 exp(-R1 tau)) Meq and
//                       phase k(t) - k(tau+2 taup), valid for t past the pulses.
VecXcd explicit_state(const PulseSequence& seq, const CoeffFields& c, const Grid& g,
                      double gamma, double t);

// Directional derivative of solve_bloch(ExactPiecewise) with respect to the
// coefficients, evaluated at coeffs_ref in direction dc. Returns the
// derivative trajectory at the sample times (same layout as solve_bloch).
std::vector<MagState> solve_bloch_linearized(const PulseSequence& seq,
                                             const CoeffFields& coeffs_ref,
                                             const CoeffFields& dc,
                                             const VecXcd& cplus, const Grid& g,
                                             double gamma,
                                             const std::vector<double>& sample_times);

} // namespace bt
