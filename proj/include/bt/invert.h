#pragma once

#include <array>
#include <string>
#include <vector>

#include "bt/bloch.h"
#include "bt/core.h"
#include "bt/kspace.h"
#include "bt/measure.h"
#include "bt/recon.h"
#include "bt/seq.h"
#include "bt/torrey.h"

namespace bt {

enum class Engine { BlochExact, BlochNumeric, TorreyFD, KspaceConst, ExplicitForm };

std::string engine_name(Engine e);
Engine engine_from_name(const std::string& s);

// Acquisition stack: one 90-degree sequence and two inversion-recovery
// sequences with intermissions tau1 < tau2, a shared sample clock, and the
// solver used to realize the forward map.
struct ForwardConfig {
    Grid grid;
    std::array<PulseSequence, 3> seqs; // I: 90, II: 180-tau1-90, III: 180-tau2-90
    Engine engine = Engine::BlochExact;
    CoilSet coils;
    std::vector<double> clock;
    ModelParams model;
    double gamma = consts::gamma_proton;

    // reduced operator over (M^eq, R1): R2* held at this field
    bool reduced = false;
    VecXcd frozen_R2star;

    BlochOptions bloch;
    double torrey_dt = 1e-3;
    BoundarySpec bc;

    double tau1() const { return seqs[1].tau; }
    double tau2() const { return seqs[2].tau; }
    void validate() const;
};

// Per-sequence sampled coil series on the shared clock.
struct StackedSeries {
    std::vector<double> clock;
    std::array<Eigen::MatrixXcd, 3> y; // each T x J

    VecXcd flat() const;
    double norm() const { return flat().norm(); }
    StackedSeries operator-(const StackedSeries& o) const;
};

// Run the configured engine for all three sequences and observe with the coils.
StackedSeries forward_F(const CoeffFields& x, const ForwardConfig& cfg);

// Directional derivative of forward_F at x_ref in direction dx. The
// explicit-form engine differentiates its closed formulas; the PDE engines
// solve their linearized systems.
StackedSeries jacobian_apply(const CoeffFields& x_ref, const CoeffFields& dx,
                             const ForwardConfig& cfg);

struct EliminatedSeries {
    Eigen::MatrixXcd FdR2Meq; // F[conj(c) dR2* M^eq_ref] along k(t)
    Eigen::MatrixXcd FdR1Meq; // F[conj(c) dR1  M^eq_ref] along k(t)
    Eigen::MatrixXcd FdMeq;   // F[conj(c) dM^eq]         along k(t)
};

// Decouple the linearized three-sequence data into the three sampled Fourier
// series above, using constant reference rates. The tau-combination weight is
//   comb(tau) = exp(R1ref tau) (1 - 2 exp(-R1ref tau)) (1 + taup/tau);
// comb(tau2) = comb(tau1) makes the system singular.
EliminatedSeries eliminate_linear(const Eigen::MatrixXcd& dyI,
                                  const Eigen::MatrixXcd& dyII,
                                  const Eigen::MatrixXcd& dyIII,
                                  const std::vector<double>& clock, cd R2ref,
                                  double R1ref, double tau1, double tau2,
                                  double taup);

enum class NewtonVariant { Full, Frozen };

struct NewtonOptions {
    double tol = 1e-10; // relative residual
    int max_iter = 20;
    double ansatz_tol = -1.0; // <= 0: half the dual-lattice spacing
    bool force_dense = false; // skip elimination, invert by dense least squares
    const CoeffFields* truth = nullptr; // for error-to-truth reporting
};

struct NewtonIterate {
    int n = 0;
    double residual = 0.0;
    double error_to_truth = -1.0;
    double step_norm = 0.0;
};

struct NewtonResult {
    CoeffFields x;
    bool converged = false;
    std::vector<NewtonIterate> history;
};

NewtonResult newton_solve(const StackedSeries& ydata, const CoeffFields& x0,
                          const ForwardConfig& cfg, NewtonVariant variant,
                          const NewtonOptions& opts = {});

// least-squares slope of log e_{n+1} against log e_n
double fit_order(const std::vector<double>& errors);

} // namespace bt
