#pragma once

#include <array>
#include <vector>

#include "bt/core.h"
#include "bt/measure.h"

namespace bt {

// Subspace X of grid functions spanned by dual-lattice Fourier modes that lie
// close to a sampled k-space trajectory. Inversion of the sampled transform is
// well posed on X; C_I = 1/sigma_min of the sampling matrix quantifies how well.
struct AnsatzSpace {
    Grid grid;
    std::vector<std::array<int, 3>> modes; // integer dual-lattice indices
    std::vector<Vec3> k_samples;           // trajectory the space was built from
    double sigma_min = 0.0;
    double C_I = 0.0;

    int nmodes() const { return static_cast<int>(modes.size()); }
    Vec3 mode_freq(int m) const;      // physical frequency of basis mode m
    VecXcd basis_field(int m) const;  // exp(+2 pi i xi_m . r) on the grid
    VecXcd synth(const VecXcd& coeffs) const;
};

// Select lattice frequencies within tol (Euclidean, 1/m) of any sample and
// check the trig sampling matrix is invertible on the selection.
AnsatzSpace build_ansatz(const std::vector<Vec3>& k_samples, const Grid& g,
                         double tol);

struct InterpResult {
    VecXcd x;       // reconstructed grid function (lies in X)
    VecXcd coeffs;  // its coefficients on the basis of X
    double residual = 0.0;      // || A*coeffs - y ||_2
    double rel_residual = 0.0;  // residual / ||y||_2 (0 when y = 0)
    double sigma_min = 0.0;
};

// Least-squares solve of F[conj(c_j) x](k(t_i)) = y(i, j) over x in X.
// Row i of y pairs with k_samples[i].
InterpResult interp_inverse(const Eigen::MatrixXcd& y,
                            const std::vector<Vec3>& k_samples,
                            const CoilSet& coils, const AnsatzSpace& X);

// M^eq from a 90-degree acquisition: demodulate at the pulse end with the
// reference transverse rate, then invert the sampled transform on X.
InterpResult recon_Meq(const Measurement& y90, cd R2ref, const AnsatzSpace& X,
                       const CoilSet& coils);

// psi(x) = (1 - 2 exp(tau1 x)) / (1 - 2 exp(tau2 x)) on x <= 0, the ratio
// profile behind the two-intermission R1 recovery. Undefined at the
// denominator zero x = -ln2/tau2; callers stay on one side of it.
double psi(double x, double tau1, double tau2);
double psi_prime(double x, double tau1, double tau2);

// Solve psi(x) = val for x in [-R1_max, 0] by safeguarded Newton/bisection.
// val >= 1 picks the branch right of the pole, val < 1 the branch left of it;
// |psi(x) - val| <= 1e-12 on return.
double invert_psi(double val, double tau1, double tau2, double R1_max);

struct R1Result {
    VecXd R1;
    std::vector<int> masked; // magnitude floor tripped; R1 is NaN there
};

// R1 = (1/tau) (ln 2 - ln(1 - s)), s = Re(Phi_tau / Meq). Signed s keeps the
// identity exact on both sides of the Phi zero-crossing at R1 tau = ln 2.
R1Result recon_R1_known_meq(const VecXcd& Phi_tau, const VecXcd& Meq,
                            double tau);

// R1 = -invert_psi(Re(Phi_tau1 / Phi_tau2)); independent of M^eq, exactly
// invariant under common rescaling of the two fields.
R1Result recon_R1_two_tau(const VecXcd& Phi_tau1, const VecXcd& Phi_tau2,
                          double tau1, double tau2, double R1_max = 50.0);

struct R2starResult {
    VecXcd R2star;
    cd R2star0{0.0, 0.0}; // fitted constant part
    std::vector<int> masked;
    std::vector<double> gn_history; // Gauss-Newton residual norms per iterate
    double interp_residual = 0.0;
};

// Three-step R2* recovery from a 90-degree acquisition: differentiate the
// series in time, fit the constant decay rate by Gauss-Newton, then assemble
// F[R2* conj(c) M^eq] along k(t), invert it on X and divide by M^eq.
R2starResult recon_R2star(const Measurement& y90, const VecXcd& Meq,
                          const PiecewiseConstant& G, const AnsatzSpace& X,
                          const CoilSet& coils,
                          double gamma = consts::gamma_proton);

} // namespace bt
