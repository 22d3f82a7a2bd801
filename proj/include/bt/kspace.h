#pragma once

#include <vector>

#include "bt/bloch.h"
#include "bt/core.h"
#include "bt/seq.h"

namespace bt {

// spatially constant coefficient set for the frequency-domain solver
struct ConstCoeffs {
    double R10 = 1.0;
    cd R20star = cd(1.0, 0.0);
    Mat3 D0 = Mat3::Zero();
    Vec3 v0 = Vec3::Zero();
    cd cplus0 = cd(1.0, 0.0);

    void validate() const;
};

// extract constant values from grid fields; throws if any field varies
ConstCoeffs const_coeffs_from(const CoeffFields& c, const ModelParams& m,
                              const Grid& g);

// forward DFT with the e^{-2pi i xi.r} convention, scaled by cell volume;
// idft_grid is its exact inverse
VecXcd dft_grid(const VecXcd& x, const Grid& g);
VecXcd dft_grid(const VecXd& x, const Grid& g);
VecXcd idft_grid(const VecXcd& xhat, const Grid& g);

// direct-summation evaluation at an arbitrary (off-lattice) frequency; this
// is the band-limited interpolation consistent with extension by zero
cd dft_at(const VecXcd& x, const Grid& g, const Vec3& xi);

// diffusion + advection symbol: 4pi^2 xi.D0 xi + 2pi i v0.xi
cd q_symbol(const Vec3& xi, const Mat3& D0, const Vec3& v0);

// int_0^Delta q(w - s*delta) d delta in closed form (polynomial integrand)
cd dephase_integral(const Vec3& w, const Vec3& s, double Delta, const Mat3& D0,
                    const Vec3& v0);

// longitudinal recovery symbol applied after an inversion of duration tau:
// (R10/lambda)(1 - e^{-lambda tau}) - e^{-lambda tau}
cd Ltau_symbol(cd lambda, double R10, double tau);

// spectral state on the DFT lattice of a grid
struct KState {
    double t = 0.0;
    VecXcd Mphat, Mmhat, mzhat;

    static KState equilibrium(const VecXcd& Meq_hat, double t);
};

// method-of-characteristics transport on free segments, mode-wise 3x3
// propagators on pulses; all coefficients spatially constant
std::vector<KState> solve_kspace(const PulseSequence& seq, const ConstCoeffs& cc,
                                 const VecXcd& Meq_hat, const Grid& g, double gamma,
                                 const std::vector<double>& sample_times,
                                 const KState* init = nullptr);

// closed-form transverse spectrum for the two sequence kinds at time t,
// evaluated on the lattice (thin-pulse idealization)
VecXcd kspace_explicit_state(const PulseSequence& seq, const ConstCoeffs& cc,
                             const VecXd& Meq, const Grid& g, double gamma,
                             double t);

// spatial view of a spectral state (inverse transform of all components)
MagState kstate_to_magstate(const KState& ks, const Grid& g);

// derivative of the idealized constant-reference measurement with respect to
// (dMeq, dR1, dR2star), per coil, at the given sample times; coil0 holds the
// constant sensitivity values, weighted by their conjugates as in observe
Eigen::MatrixXcd kspace_jacobian(const PulseSequence& seq, const ConstCoeffs& cc,
                                 const VecXd& Meq_ref, const CoeffFields& dx,
                                 const Grid& g, double gamma, const VecXcd& coil0,
                                 const std::vector<double>& times);

} // namespace bt
