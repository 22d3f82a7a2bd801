#pragma once

#include <array>
#include <complex>
#include <vector>

#include <Eigen/Dense>

#include "bt/errors.h"

namespace bt {

using cd = std::complex<double>;
using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using VecXd = Eigen::VectorXd;
using VecXcd = Eigen::VectorXcd;

namespace consts {
// proton gyromagnetic ratio [rad/s/T]
inline constexpr double gamma_proton = 2.6752218744e8;
inline constexpr double hbar = 1.054571817e-34; // [J s]
inline constexpr double kB = 1.380649e-23;      // [J/K]
} // namespace consts

struct PhysicalConstants {
    double gamma = consts::gamma_proton;
    double hbar = consts::hbar;
    double kB = consts::kB;
    double B0 = 3.0;      // main field [T]
    double theta = 310.0; // temperature [K]
};

// Uniform Cartesian grid, cell-centered: node i along an axis sits at (i+1/2)h.
// Inactive axes (>= dim) have n=1, L=1, coordinate 0 and frequency 0, so 1-D/2-D
// fields embed in the same flat indexing (x fastest).
struct Grid {
    int dim = 1;
    std::array<int, 3> n{1, 1, 1};
    std::array<double, 3> L{1.0, 1.0, 1.0};

    static Grid make(int dim, std::array<int, 3> n, std::array<double, 3> L);

    int size() const { return n[0] * n[1] * n[2]; }
    double h(int ax) const { return L[ax] / n[ax]; }
    double cellvol() const { return h(0) * h(1) * h(2); }
    double volume() const { return L[0] * L[1] * L[2]; }
    double node(int ax, int i) const { return (i + 0.5) * h(ax); }

    int ravel(int i, int j, int k) const { return i + n[0] * (j + n[1] * k); }
    std::array<int, 3> unravel(int idx) const;
    Vec3 coords(int idx) const;

    // DFT frequency layout: index j maps to integer mode m = j < (n+1)/2 ? j : j-n,
    // physical frequency m/L.
    int freq_index(int ax, int j) const {
        return j < (n[ax] + 1) / 2 ? j : j - n[ax];
    }
    double freq(int ax, int j) const { return freq_index(ax, j) / L[ax]; }
    Vec3 freq_vec(int idx) const;

    bool operator==(const Grid& o) const {
        return dim == o.dim && n == o.n && L == o.L;
    }
};

// Vector-valued piecewise-constant waveform on [knots.front(), knots.back()];
// zero outside its support. Used for gradient timelines G(t).
struct PiecewiseConstant {
    std::vector<double> knots;  // size m+1, strictly increasing
    std::vector<Vec3> values;   // size m

    static PiecewiseConstant zero();
    static PiecewiseConstant constant(const Vec3& g, double t0, double t1);

    bool empty() const { return values.empty(); }
    double start() const { return knots.empty() ? 0.0 : knots.front(); }
    double end() const { return knots.empty() ? 0.0 : knots.back(); }
    Vec3 value(double t) const;
    Vec3 integral(double t0, double t1) const; // exact segment sums
    void validate() const;
};

// Complex scalar piecewise-constant function (pulse envelopes).
struct PiecewiseConstantC {
    std::vector<double> knots;
    std::vector<cd> values;

    cd value(double t) const;
    cd integral(double t0, double t1) const;
};

// The image-space unknowns x^img = (M^eq, R1, R2*) as flat grid fields.
// Also reused (unvalidated) for increments dx^img.
struct CoeffFields {
    VecXd Meq;
    VecXd R1;
    VecXcd R2star;

    // positivity / size checks for absolute coefficient fields; reports the
    // first offending flat index in the message.
    void validate(const Grid& g, double r1_floor = 1e-6,
                  double r2_floor = 1e-6) const;

    CoeffFields operator+(const CoeffFields& o) const;
    CoeffFields operator-(const CoeffFields& o) const;
    CoeffFields scaled(double s) const;
    double norm(const Grid& g) const; // discrete L2 over all three fields
};

// Fixed model parameters x^mod: diffusion tensor, advection field, excitation
// sensitivity c+. Per-point overrides are optional; empty means constant.
struct ModelParams {
    Mat3 D0 = Mat3::Zero();
    Vec3 v0 = Vec3::Zero();
    Eigen::MatrixXd D;  // size() x 6 rows (xx,yy,zz,xy,xz,yz), or 0x0
    Eigen::MatrixXd v;  // size() x 3, or 0x0
    cd cplus0 = cd(1.0, 0.0);
    VecXcd cplus;       // per-point c+, or empty

    void validate(const Grid& g) const; // symmetry/PSD of D, sizes
    Mat3 D_at(int idx) const;
    Vec3 v_at(int idx) const;
    cd cplus_at(int idx) const { return cplus.size() ? cplus(idx) : cplus0; }
    bool constant_D() const { return D.size() == 0; }
    bool constant_v() const { return v.size() == 0; }
};

// M^eq(r) = rho(r) * gamma^2 hbar^2 / (4 kB theta) * B0
VecXd equilibrium_from_density(const VecXd& rho, const PhysicalConstants& pc);

// k(t) = (gamma / 2 pi) * integral_0^t G, exact for piecewise-constant G.
Vec3 k_trajectory(const PiecewiseConstant& G, double gamma, double t);
std::vector<Vec3> k_trajectory(const PiecewiseConstant& G, double gamma,
                               const std::vector<double>& times);

// phi1(z) = (exp(z) - 1)/z, series near zero
cd phi1(cd z);

// Gauss-Legendre nodes and weights on [-1, 1], computed by Newton iteration
// on the Legendre recurrence (machine precision, no tabulated constants).
void gauss_legendre(int n, std::vector<double>& nodes, std::vector<double>& weights);

} // namespace bt
