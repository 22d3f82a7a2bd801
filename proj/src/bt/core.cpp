#include "bt/core.h"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace bt {

Grid Grid::make(int dim, std::array<int, 3> n, std::array<double, 3> L) {
    if (dim < 1 || dim > 3)
        throw ConfigError("grid: dim must be 1, 2 or 3, got " + std::to_string(dim));
    Grid g;
    g.dim = dim;
    for (int ax = 0; ax < 3; ++ax) {
        if (ax < dim) {
            if (n[ax] < 1)
                throw ConfigError("grid: n[" + std::to_string(ax) + "] must be >= 1");
            if (!(L[ax] > 0.0))
                throw ConfigError("grid: L[" + std::to_string(ax) + "] must be > 0");
            g.n[ax] = n[ax];
            g.L[ax] = L[ax];
        } else {
            g.n[ax] = 1;
            g.L[ax] = 1.0;
        }
    }
    return g;
}

std::array<int, 3> Grid::unravel(int idx) const {
    std::array<int, 3> a;
    a[0] = idx % n[0];
    a[1] = (idx / n[0]) % n[1];
    a[2] = idx / (n[0] * n[1]);
    return a;
}

Vec3 Grid::coords(int idx) const {
    auto a = unravel(idx);
    Vec3 r = Vec3::Zero();
    for (int ax = 0; ax < dim; ++ax) r[ax] = node(ax, a[ax]);
    return r;
}

Vec3 Grid::freq_vec(int idx) const {
    auto a = unravel(idx);
    Vec3 xi = Vec3::Zero();
    for (int ax = 0; ax < dim; ++ax) xi[ax] = freq(ax, a[ax]);
    return xi;
}

PiecewiseConstant PiecewiseConstant::zero() { return PiecewiseConstant{}; }

PiecewiseConstant PiecewiseConstant::constant(const Vec3& g, double t0, double t1) {
    PiecewiseConstant w;
    w.knots = {t0, t1};
    w.values = {g};
    w.validate();
    return w;
}

void PiecewiseConstant::validate() const {
    if (values.empty()) {
        if (!knots.empty())
            throw ConfigError("waveform: empty value list with nonempty knots");
        return;
    }
    if (knots.size() != values.size() + 1)
        throw ConfigError("waveform: need one more knot than values");
    for (size_t i = 0; i + 1 < knots.size(); ++i)
        if (!(knots[i] < knots[i + 1]))
            throw ConfigError("waveform: knots must be strictly increasing");
}

Vec3 PiecewiseConstant::value(double t) const {
    if (values.empty() || t < knots.front() || t >= knots.back())
        return Vec3::Zero();
    auto it = std::upper_bound(knots.begin(), knots.end(), t);
    size_t seg = static_cast<size_t>(it - knots.begin()) - 1;
    if (seg >= values.size()) seg = values.size() - 1;
    return values[seg];
}

Vec3 PiecewiseConstant::integral(double t0, double t1) const {
    if (t1 < t0) return -integral(t1, t0);
    Vec3 acc = Vec3::Zero();
    for (size_t s = 0; s < values.size(); ++s) {
        double a = std::max(t0, knots[s]);
        double b = std::min(t1, knots[s + 1]);
        if (b > a) acc += values[s] * (b - a);
    }
    return acc;
}

cd PiecewiseConstantC::value(double t) const {
    if (values.empty() || t < knots.front() || t >= knots.back()) return cd(0, 0);
    auto it = std::upper_bound(knots.begin(), knots.end(), t);
    size_t seg = static_cast<size_t>(it - knots.begin()) - 1;
    if (seg >= values.size()) seg = values.size() - 1;
    return values[seg];
}

cd PiecewiseConstantC::integral(double t0, double t1) const {
    if (t1 < t0) return -integral(t1, t0);
    cd acc(0, 0);
    for (size_t s = 0; s < values.size(); ++s) {
        double a = std::max(t0, knots[s]);
        double b = std::min(t1, knots[s + 1]);
        if (b > a) acc += values[s] * (b - a);
    }
    return acc;
}

void CoeffFields::validate(const Grid& g, double r1_floor, double r2_floor) const {
    const int N = g.size();
    if (Meq.size() != N || R1.size() != N || R2star.size() != N) {
        std::ostringstream os;
        os << "coefficients: field sizes (" << Meq.size() << "," << R1.size() << ","
           << R2star.size() << ") do not match grid size " << N;
        throw ConfigError(os.str());
    }
    for (int i = 0; i < N; ++i) {
        if (!std::isfinite(Meq(i)) || Meq(i) < 0.0)
            throw ConfigError("coefficients: Meq must be finite and >= 0, violated at index " +
                              std::to_string(i));
        if (!std::isfinite(R1(i)) || R1(i) < r1_floor)
            throw ConfigError("coefficients: R1 below floor " + std::to_string(r1_floor) +
                              " at index " + std::to_string(i));
        if (!std::isfinite(R2star(i).real()) || !std::isfinite(R2star(i).imag()) ||
            R2star(i).real() < r2_floor)
            throw ConfigError("coefficients: Re(R2*) below floor " + std::to_string(r2_floor) +
                              " at index " + std::to_string(i));
    }
}

CoeffFields CoeffFields::operator+(const CoeffFields& o) const {
    return CoeffFields{Meq + o.Meq, R1 + o.R1, R2star + o.R2star};
}

CoeffFields CoeffFields::operator-(const CoeffFields& o) const {
    return CoeffFields{Meq - o.Meq, R1 - o.R1, R2star - o.R2star};
}

CoeffFields CoeffFields::scaled(double s) const {
    return CoeffFields{Meq * s, R1 * s, R2star * s};
}

double CoeffFields::norm(const Grid& g) const {
    double s = Meq.squaredNorm() + R1.squaredNorm() + R2star.squaredNorm();
    return std::sqrt(s * g.cellvol());
}

void ModelParams::validate(const Grid& g) const {
    const int N = g.size();
    auto check_tensor = [](const Mat3& M, const std::string& where) {
        if ((M - M.transpose()).norm() > 1e-12 * (1.0 + M.norm()))
            throw ConfigError("model: diffusion tensor not symmetric (" + where + ")");
        Eigen::SelfAdjointEigenSolver<Mat3> es(M);
        if (es.eigenvalues().minCoeff() < -1e-12 * (1.0 + M.norm()))
            throw ConfigError("model: diffusion tensor indefinite (" + where + ")");
    };
    check_tensor(D0, "D0");
    if (D.size()) {
        if (D.rows() != N || D.cols() != 6)
            throw ConfigError("model: per-point D must be size() x 6");
        for (int i = 0; i < N; ++i) check_tensor(D_at(i), "point " + std::to_string(i));
    }
    if (v.size() && (v.rows() != N || v.cols() != 3))
        throw ConfigError("model: per-point v must be size() x 3");
    if (cplus.size() && cplus.size() != N)
        throw ConfigError("model: per-point c+ must match grid size");
}

Mat3 ModelParams::D_at(int idx) const {
    if (!D.size()) return D0;
    Mat3 M;
    M << D(idx, 0), D(idx, 3), D(idx, 4),
         D(idx, 3), D(idx, 1), D(idx, 5),
         D(idx, 4), D(idx, 5), D(idx, 2);
    return M;
}

Vec3 ModelParams::v_at(int idx) const {
    if (!v.size()) return v0;
    return Vec3(v(idx, 0), v(idx, 1), v(idx, 2));
}

VecXd equilibrium_from_density(const VecXd& rho, const PhysicalConstants& pc) {
    if (!(pc.theta > 0.0))
        throw DomainError("equilibrium_from_density: temperature must be > 0");
    for (int i = 0; i < rho.size(); ++i)
        if (!(rho(i) >= 0.0))
            throw DomainError("equilibrium_from_density: rho < 0 at index " +
                              std::to_string(i));
    const double factor =
        pc.gamma * pc.gamma * pc.hbar * pc.hbar / (4.0 * pc.kB * pc.theta) * pc.B0;
    return rho * factor;
}

Vec3 k_trajectory(const PiecewiseConstant& G, double gamma, double t) {
    if (t < 0.0) throw DomainError("k_trajectory: t must be >= 0");
    return gamma / (2.0 * M_PI) * G.integral(0.0, t);
}

std::vector<Vec3> k_trajectory(const PiecewiseConstant& G, double gamma,
                               const std::vector<double>& times) {
    std::vector<Vec3> out;
    out.reserve(times.size());
    for (double t : times) out.push_back(k_trajectory(G, gamma, t));
    return out;
}

} // namespace bt

namespace bt {

cd phi1(cd z) {
    if (std::abs(z) < 1e-4) {
        // 1 + z/2 + z^2/6 + z^3/24 + z^4/120, error ~ |z|^5/720 < 1e-23
        return 1.0 + z * (0.5 + z * (1.0 / 6.0 + z * (1.0 / 24.0 + z / 120.0)));
    }
    return (std::exp(z) - 1.0) / z;
}

void gauss_legendre(int n, std::vector<double>& nodes, std::vector<double>& weights) {
    nodes.assign(n, 0.0);
    weights.assign(n, 0.0);
    const int m = (n + 1) / 2;
    for (int i = 0; i < m; ++i) {
        double x = std::cos(M_PI * (i + 0.75) / (n + 0.5));
        double pp = 0.0;
        for (int it = 0; it < 100; ++it) {
            double p0 = 1.0, p1 = 0.0;
            for (int j = 0; j < n; ++j) {
                double p2 = p1;
                p1 = p0;
                p0 = ((2.0 * j + 1.0) * x * p1 - j * p2) / (j + 1.0);
            }
            pp = n * (x * p0 - p1) / (x * x - 1.0);
            double dx = p0 / pp;
            x -= dx;
            if (std::abs(dx) < 1e-15) break;
        }
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        double w = 2.0 / ((1.0 - x * x) * pp * pp);
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
}

} // namespace bt
