#pragma once

#include <array>
#include <functional>
#include <vector>

#include <Eigen/Sparse>

#include "bt/bloch.h"
#include "bt/core.h"
#include "bt/seq.h"

namespace bt {

enum class BCKind { Dirichlet, Impedance };

// per-face boundary data, faces ordered x-,x+,y-,y+,z-,z+; impedance means
// D dnu(u) + beta u = 0 with separate beta for transverse and longitudinal
struct BoundarySpec {
    std::array<BCKind, 6> kind{BCKind::Dirichlet, BCKind::Dirichlet,
                               BCKind::Dirichlet, BCKind::Dirichlet,
                               BCKind::Dirichlet, BCKind::Dirichlet};
    std::array<double, 6> beta_perp{0, 0, 0, 0, 0, 0};
    std::array<double, 6> beta_z{0, 0, 0, 0, 0, 0};

    void validate() const;
};

// optional inhomogeneous sources; f_plus drives M+, f_minus the counter
// combination (defaults to the conjugate when omitted), f_z the longitudinal
struct TorreySource {
    std::function<VecXcd(double)> f_plus;
    std::function<VecXcd(double)> f_minus;
    std::function<VecXcd(double)> f_z;

    bool empty() const { return !f_plus && !f_minus && !f_z; }
};

// sparse building blocks shared by the stepper, the energy diagnostics, and
// the eigenstructure analysis: -div(D grad .) with boundary terms folded in
// by ghost elimination, plus first-order upwind advection
struct TorreyOperators {
    Eigen::SparseMatrix<double> K_perp, K_z;
    Eigen::SparseMatrix<double> Adv;
    VecXcd r2; // transverse reaction diagonal
    VecXd r1;  // longitudinal reaction diagonal

    VecXcd apply_Aperp(const VecXcd& u) const;
    VecXcd apply_Az(const VecXcd& u) const;
    VecXcd apply_Adv(const VecXcd& u) const;
    // quadratic form of the diffusion part alone, Re <K u, u> * cellvol
    double dform_perp(const VecXcd& u, double cellvol) const;
    double dform_z(const VecXcd& u, double cellvol) const;
};

TorreyOperators assemble_operators(const Grid& g, const CoeffFields& c,
                                   const ModelParams& m, const BoundarySpec& bc);

struct TorreyResult {
    double dt = 0.0;
    std::vector<MagState> states; // every step, including t = 0
    std::vector<double> energy;   // matching states
    bool divv_warning = false;
    // per-step averaged sources in the (mx, my, mz) basis, forcing included
    std::vector<VecXcd> fbar_x, fbar_y, fbar_z;
};

// Strang-split stepper: exact pointwise rotations for the gradient phase and
// the pulse coupling around a Crank-Nicolson core for diffusion + reaction,
// with upwind advection on the explicit side
TorreyResult solve_bt(const PulseSequence& seq, const CoeffFields& c,
                      const ModelParams& m, const BoundarySpec& bc,
                      const TorreySource& f, const Grid& g, double gamma,
                      double dt, double T, const MagState* init = nullptr);

// defect of the discrete energy balance per step
VecXd energy_residual(const TorreyResult& R, const Grid& g, const CoeffFields& c,
                      const ModelParams& m, const BoundarySpec& bc);

// solution-space norm: max of L-infinity-in-time L2 and L2-in-time H1_D
double vnorm(const TorreyResult& R, const Grid& g, const TorreyOperators& ops);

struct LipschitzProbe {
    double ratio = 0.0;
    double num = 0.0;
    double den = 0.0;
    TorreyResult diff;
};

// solves the difference system with coefficients xt and the difference
// source built from the x-run, then reports |S(x)-S(xt)|_V / |x-xt|_X
LipschitzProbe lipschitz_probe(const CoeffFields& x, const CoeffFields& xt,
                               const ModelParams& m, const PulseSequence& seq,
                               const BoundarySpec& bc, const Grid& g, double gamma,
                               double dt, double T);

// directional-derivative source for increments (dMeq, dR1, dR2star) around a
// reference trajectory; pair with initial data dmz(0) = dMeq
TorreySource frechet_source(const TorreyResult& ref, const CoeffFields& cref,
                            const CoeffFields& dx);

} // namespace bt
