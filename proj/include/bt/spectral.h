#pragma once

#include <functional>
#include <vector>

#include "bt/core.h"
#include "bt/measure.h"
#include "bt/recon.h"
#include "bt/torrey.h"

namespace bt {

// Dense generators of the longitudinal and transverse relaxation-diffusion
// flows under a constant gradient: Az = K + R1, the real 2n block form of the
// transverse generator, and its complex n x n version used for eigenanalysis.
struct GeneratorPair {
    Eigen::MatrixXd Az;
    Eigen::MatrixXd Aperp;  // [[K + Re R2*, -W], [W, K + Re R2*]],
                            // W = diag(Im R2* + gamma G0.r)
    Eigen::MatrixXcd Lperp; // K + R2* + i gamma G0.r
    BoundarySpec bc;
};

GeneratorPair assemble_generators(const Grid& g, const CoeffFields& cref,
                                  const ModelParams& m, const Vec3& G0,
                                  const BoundarySpec& bc,
                                  double gamma = consts::gamma_proton);

// Eigenvalues clustered to tolerance with spectral projectors built from
// right/left eigenvectors; equivalent to the resolvent contour integral for
// simple eigenvalues.
struct EigenSystem {
    VecXcd values;                   // one per cluster, sorted by |Re| ascending
    std::vector<Eigen::MatrixXcd> P; // projector per cluster
    std::vector<int> multiplicity;
};

EigenSystem eigen_projectors(const Eigen::MatrixXcd& A, int count);

// 2x2 recovery coefficients for one longitudinal mode:
//   A = exp(-lambda tau) - (R10/lambda)(1 - exp(-lambda tau)) + mu_bar
//   B = integral_0^tau mz_ref(s) exp(-lambda (tau - s)) ds
struct ABCoeffs {
    double A = 0.0;
    double B = 0.0;
};

// quadrature form for an arbitrary longitudinal reference profile
ABCoeffs coeffs_AB(double lambda_z, double tauJ, double R10, double mu_barJ,
                   const std::function<double(double)>& mz_ref);

// closed form for mz_ref(s) = -2 exp(-R1tilde0 s); the removable singularity
// at lambda = R1tilde0 is series-handled
ABCoeffs coeffs_AB_exp(double lambda_z, double tauJ, double R10, double mu_barJ,
                       double R1tilde0);

// Per-mode determinants A(tau1) B(tau2) - A(tau2) B(tau1) with reference
// weights mu_bar(tau) = 1 - 2 exp(-R1tilde0 tau), evaluated both directly and
// through the factored closed form; |det| < 1e-12 * row-norm scale is flagged.
struct DetReport {
    std::vector<double> det_direct;
    std::vector<double> det_closed;
    std::vector<double> scale;
    bool all_nonzero = true;
};

DetReport det_condition(const std::vector<double>& lambda_z, double tau1,
                        double tau2, double R10, double R1tilde0);

// Longitudinal semigroup maps used by the linearized-mode assembly:
//   E^tau     = -exp(-Az tau) + (I - exp(-Az tau)) Az^{-1} [R1 .]
//   Etilde^tau = integral_0^tau (-2 exp(-R1tilde0 s)) exp(-Az (tau - s)) ds
Eigen::MatrixXd semigroup_E(const Eigen::MatrixXd& Az, const VecXd& R1field,
                            double tau);
Eigen::MatrixXd semigroup_Etilde(const Eigen::MatrixXd& Az, double R1tilde0,
                                 double tau);

// mu-profiles of the transverse reference decay entering the rank test:
//   mu_I(r)  = -i Meq_ref(r) / (R2tilde0* + i gamma G0.r + lambda_perp)
//   mu_J(r)  = exp(lambda_perp tauJ) mu_barJ mu_I(r)
VecXcd mu_I_profile(const Grid& g, const VecXd& Meq_ref, cd R2tilde0,
                    const Vec3& G0, cd lambda_perp,
                    double gamma = consts::gamma_proton);

struct RankTestResult {
    double sigma_min = -1.0;
    int rows = 0;
    int cols = 0;
};

// Smallest singular value of the discretized all-at-once linearization
// (dMeq, dR1, dR2*) restricted to X, observed through the coils, assembled
// by eigen-expansion over the first `count` transverse modes.
RankTestResult uniqueness_rank_test(const Grid& g, const CoeffFields& x_ref,
                                    const ModelParams& m, const Vec3& G0,
                                    const BoundarySpec& bc,
                                    const AnsatzSpace& X, const CoilSet& coils,
                                    double tau1, double tau2, int count,
                                    double gamma = consts::gamma_proton);

struct SpectralCertificate {
    std::vector<cd> lambda_perp;
    std::vector<double> lambda_z;
    std::vector<double> det_values;
    double sigma_min = -1.0;
    bool spacetime_sep = false;
    bool assmperp = false;
    bool det_ell = false;
    bool muIell = false;
    bool pass = false;
};

SpectralCertificate certify_uniqueness(const Grid& g, const CoeffFields& x_ref,
                                       const ModelParams& m, const Vec3& G0,
                                       const BoundarySpec& bc,
                                       const AnsatzSpace& X,
                                       const CoilSet& coils, double tau1,
                                       double tau2, int count,
                                       double gamma = consts::gamma_proton);

} // namespace bt
