#include "bt/recon.h"

#include <algorithm>
#include <cmath>
#include <complex>
#include <limits>
#include <sstream>

#include <Eigen/Dense>
#include <Eigen/SVD>

#include "bt/errors.h"
#include "bt/kspace.h"

namespace bt {

namespace {

constexpr double kTwoPi = 2.0 * M_PI;

// normalized per-axis geometric sum (1/n) sum_j exp(2 pi i w (j+1/2) h);
// equals 1 at w = 0 and kronecker-selects matching lattice frequencies
cd axis_kernel(double w, int n, double h) {
    cd acc(0.0, 0.0);
    for (int j = 0; j < n; ++j) {
        double ph = kTwoPi * w * (j + 0.5) * h;
        acc += cd(std::cos(ph), std::sin(ph));
    }
    return acc / static_cast<double>(n);
}

Eigen::MatrixXcd stacked_rows(const Eigen::MatrixXcd& y) {
    // flatten (time, coil) row-major into a vector-compatible column
    Eigen::MatrixXcd out(y.rows() * y.cols(), 1);
    for (Eigen::Index i = 0; i < y.rows(); ++i)
        for (Eigen::Index j = 0; j < y.cols(); ++j)
            out(i * y.cols() + j, 0) = y(i, j);
    return out;
}

} // namespace

Vec3 AnsatzSpace::mode_freq(int m) const {
    const auto& mi = modes[m];
    return Vec3(mi[0] / grid.L[0], mi[1] / grid.L[1], mi[2] / grid.L[2]);
}

VecXcd AnsatzSpace::basis_field(int m) const {
    VecXcd f(grid.size());
    Vec3 xi = mode_freq(m);
    for (int idx = 0; idx < grid.size(); ++idx) {
        double ph = kTwoPi * xi.dot(grid.coords(idx));
        f(idx) = cd(std::cos(ph), std::sin(ph));
    }
    return f;
}

VecXcd AnsatzSpace::synth(const VecXcd& coeffs) const {
    if (coeffs.size() != nmodes())
        throw ConfigError("synth: coefficient count does not match basis size");
    VecXcd x = VecXcd::Zero(grid.size());
    for (int m = 0; m < nmodes(); ++m) x += coeffs(m) * basis_field(m);
    return x;
}

AnsatzSpace build_ansatz(const std::vector<Vec3>& k_samples, const Grid& g,
                         double tol) {
    if (k_samples.empty())
        throw ConfigError("build_ansatz: empty trajectory sample list");
    if (!(tol > 0.0)) throw ConfigError("build_ansatz: tol must be positive");

    AnsatzSpace X;
    X.grid = g;
    X.k_samples = k_samples;

    // scan every representable lattice frequency; keep those near the trajectory
    for (int idx = 0; idx < g.size(); ++idx) {
        auto ijk = g.unravel(idx);
        std::array<int, 3> m{g.freq_index(0, ijk[0]), g.freq_index(1, ijk[1]),
                             g.freq_index(2, ijk[2])};
        Vec3 xi(m[0] / g.L[0], m[1] / g.L[1], m[2] / g.L[2]);
        bool near = false;
        for (const auto& k : k_samples) {
            if ((xi - k).norm() <= tol) {
                near = true;
                break;
            }
        }
        if (near) X.modes.push_back(m);
    }
    if (X.modes.empty())
        throw ConfigError(
            "build_ansatz: no lattice frequency within tol of the trajectory");

    // sampling matrix: row per k sample, column per basis mode, entry the
    // normalized trig kernel; a sample sitting on a lattice point selects
    // exactly its own mode
    const int S = static_cast<int>(k_samples.size());
    const int M = X.nmodes();
    Eigen::MatrixXcd B(S, M);
    for (int i = 0; i < S; ++i) {
        for (int m = 0; m < M; ++m) {
            Vec3 xi = X.mode_freq(m);
            cd e(1.0, 0.0);
            for (int ax = 0; ax < 3; ++ax)
                e *= axis_kernel(xi[ax] - k_samples[i][ax], g.n[ax], g.h(ax));
            B(i, m) = e;
        }
    }
    Eigen::BDCSVD<Eigen::MatrixXcd> svd(B);
    X.sigma_min = svd.singularValues()(svd.singularValues().size() - 1);
    if (!(X.sigma_min >= 1e-8)) {
        std::ostringstream os;
        os << "build_ansatz: sampling matrix rank-deficient, smallest singular "
              "value "
           << X.sigma_min;
        throw NumericsError(os.str());
    }
    X.C_I = 1.0 / X.sigma_min;
    return X;
}

InterpResult interp_inverse(const Eigen::MatrixXcd& y,
                            const std::vector<Vec3>& k_samples,
                            const CoilSet& coils, const AnsatzSpace& X) {
    const int T = static_cast<int>(y.rows());
    const int J = static_cast<int>(y.cols());
    const int M = X.nmodes();
    const Grid& g = X.grid;
    if (static_cast<int>(k_samples.size()) != T)
        throw ConfigError("interp_inverse: sample count does not match rows");
    if (coils.ncoils() != J)
        throw ConfigError("interp_inverse: coil count does not match columns");
    coils.validate(g);

    // design matrix over (time, coil) rows: F[conj(c_j) basis_m](k_i)
    Eigen::MatrixXcd A(T * J, M);
    std::vector<VecXcd> cbar(J);
    for (int j = 0; j < J; ++j) cbar[j] = coils.c.col(j).conjugate();
    for (int m = 0; m < M; ++m) {
        VecXcd bm = X.basis_field(m);
        for (int j = 0; j < J; ++j) {
            VecXcd wf = cbar[j].cwiseProduct(bm);
            for (int i = 0; i < T; ++i)
                A(i * J + j, m) = dft_at(wf, g, k_samples[i]);
        }
    }

    Eigen::MatrixXcd yv = stacked_rows(y);
    Eigen::BDCSVD<Eigen::MatrixXcd> svd(
        A, Eigen::ComputeThinU | Eigen::ComputeThinV);
    const auto& sv = svd.singularValues();
    double smin = sv(sv.size() - 1);
    double smax = sv(0);
    if (!(smin > 1e-12 * smax)) {
        std::ostringstream os;
        os << "interp_inverse: rank-deficient sampling operator, singular value "
           << smin;
        throw NumericsError(os.str());
    }

    InterpResult out;
    out.sigma_min = smin;
    out.coeffs = svd.solve(yv).col(0);
    out.residual = (A * out.coeffs - yv.col(0)).norm();
    double yn = yv.norm();
    out.rel_residual = yn > 0.0 ? out.residual / yn : 0.0;
    out.x = X.synth(out.coeffs);
    return out;
}

InterpResult recon_Meq(const Measurement& y90, cd R2ref, const AnsatzSpace& X,
                       const CoilSet& coils) {
    y90.validate();
    if (y90.tau != 0.0)
        throw ConfigError("recon_Meq: expected a 90-degree acquisition");
    if (static_cast<int>(X.k_samples.size()) != y90.nsamples())
        throw ConfigError(
            "recon_Meq: ansatz trajectory length does not match the clock");
    Eigen::MatrixXcd yhat = demodulate(y90, R2ref, y90.taup, +1);
    return interp_inverse(yhat, X.k_samples, coils, X);
}

namespace {

void check_taus(double tau1, double tau2) {
    if (!(tau1 > 0.0 && tau2 > tau1))
        throw ConfigError("psi: requires 0 < tau1 < tau2");
}

} // namespace

double psi(double x, double tau1, double tau2) {
    check_taus(tau1, tau2);
    double den = 1.0 - 2.0 * std::exp(tau2 * x);
    if (den == 0.0)
        throw DomainError("psi: evaluation at the pole x = -ln2/tau2");
    return (1.0 - 2.0 * std::exp(tau1 * x)) / den;
}

double psi_prime(double x, double tau1, double tau2) {
    check_taus(tau1, tau2);
    double n = 1.0 - 2.0 * std::exp(tau1 * x);
    double d = 1.0 - 2.0 * std::exp(tau2 * x);
    if (d == 0.0)
        throw DomainError("psi_prime: evaluation at the pole x = -ln2/tau2");
    double np = -2.0 * tau1 * std::exp(tau1 * x);
    double dp = -2.0 * tau2 * std::exp(tau2 * x);
    return (np * d - n * dp) / (d * d);
}

double invert_psi(double val, double tau1, double tau2, double R1_max) {
    check_taus(tau1, tau2);
    if (!(R1_max > 0.0)) throw ConfigError("invert_psi: R1_max must be positive");
    if (!std::isfinite(val)) throw DomainError("invert_psi: non-finite value");

    const double xp = -std::log(2.0) / tau2; // pole of psi
    const double gap = std::max(std::abs(xp), 1.0) * 1e-13;

    // psi decreases on both sides of the pole: values >= 1 live on [xp, 0],
    // values < 1 on [-inf, xp); restrict each branch to [-R1_max, 0]
    double lo, hi;
    if (val >= 1.0) {
        lo = std::max(-R1_max, xp + gap);
        hi = 0.0;
    } else {
        if (-R1_max >= xp - gap)
            throw DomainError(
                "invert_psi: value < 1 needs a rate beyond the pole ln2/tau2; "
                "increase R1_max");
        lo = -R1_max;
        hi = xp - gap;
    }
    double flo = psi(lo, tau1, tau2) - val;
    double fhi = psi(hi, tau1, tau2) - val;
    if (flo < 0.0 || fhi > 0.0) {
        std::ostringstream os;
        os << "invert_psi: value " << val << " not attainable on [-R1_max, 0] "
           << "away from the pole";
        throw DomainError(os.str());
    }

    double x = 0.5 * (lo + hi);
    for (int it = 0; it < 200; ++it) {
        double fx = psi(x, tau1, tau2) - val;
        if (std::abs(fx) <= 1e-12) return x;
        if (fx > 0.0)
            lo = x;
        else
            hi = x;
        double dfx = psi_prime(x, tau1, tau2);
        double xn = dfx != 0.0 ? x - fx / dfx : x;
        x = (xn > lo && xn < hi) ? xn : 0.5 * (lo + hi);
    }
    double fx = psi(x, tau1, tau2) - val;
    if (std::abs(fx) <= 1e-12) return x;
    throw NumericsError("invert_psi: safeguarded Newton failed to reach 1e-12");
}

R1Result recon_R1_known_meq(const VecXcd& Phi_tau, const VecXcd& Meq,
                            double tau) {
    if (Phi_tau.size() != Meq.size())
        throw ConfigError("recon_R1: field sizes differ");
    if (!(tau > 0.0)) throw ConfigError("recon_R1: tau must be positive");
    const double floor = 1e-8 * Meq.cwiseAbs().maxCoeff();
    R1Result out;
    out.R1 = VecXd::Constant(Meq.size(),
                             std::numeric_limits<double>::quiet_NaN());
    for (Eigen::Index i = 0; i < Meq.size(); ++i) {
        if (std::abs(Meq(i)) < floor) {
            out.masked.push_back(static_cast<int>(i));
            continue;
        }
        double s = (Phi_tau(i) / Meq(i)).real();
        double om = 1.0 - s;
        if (!(om > 0.0)) {
            std::ostringstream os;
            os << "recon_R1: ratio >= 1 at index " << i;
            throw DomainError(os.str());
        }
        double r1 = (std::log(2.0) - std::log(om)) / tau;
        if (!(r1 > 0.0) || !std::isfinite(r1)) {
            std::ostringstream os;
            os << "recon_R1: degenerate ratio (nonpositive rate) at index " << i;
            throw DomainError(os.str());
        }
        out.R1(i) = r1;
    }
    return out;
}

R1Result recon_R1_two_tau(const VecXcd& Phi_tau1, const VecXcd& Phi_tau2,
                          double tau1, double tau2, double R1_max) {
    if (Phi_tau1.size() != Phi_tau2.size())
        throw ConfigError("recon_R1: field sizes differ");
    check_taus(tau1, tau2);
    const double floor = 1e-8 * Phi_tau2.cwiseAbs().maxCoeff();
    R1Result out;
    out.R1 = VecXd::Constant(Phi_tau1.size(),
                             std::numeric_limits<double>::quiet_NaN());
    for (Eigen::Index i = 0; i < Phi_tau1.size(); ++i) {
        if (std::abs(Phi_tau2(i)) < floor) {
            out.masked.push_back(static_cast<int>(i));
            continue;
        }
        double ratio = (Phi_tau1(i) / Phi_tau2(i)).real();
        try {
            out.R1(i) = -invert_psi(ratio, tau1, tau2, R1_max);
        } catch (const DomainError& e) {
            std::ostringstream os;
            os << e.what() << " (at index " << i << ")";
            throw DomainError(os.str());
        }
    }
    return out;
}

namespace {

// 4th-order differentiation of each column on a uniform clock
Eigen::MatrixXcd diff_time(const Eigen::MatrixXcd& y, double h) {
    const Eigen::Index T = y.rows();
    Eigen::MatrixXcd d(T, y.cols());
    for (Eigen::Index j = 0; j < y.cols(); ++j) {
        d(0, j) = (-25.0 * y(0, j) + 48.0 * y(1, j) - 36.0 * y(2, j) +
                   16.0 * y(3, j) - 3.0 * y(4, j)) /
                  (12.0 * h);
        d(1, j) = (-3.0 * y(0, j) - 10.0 * y(1, j) + 18.0 * y(2, j) -
                   6.0 * y(3, j) + y(4, j)) /
                  (12.0 * h);
        for (Eigen::Index i = 2; i < T - 2; ++i)
            d(i, j) = (y(i - 2, j) - 8.0 * y(i - 1, j) + 8.0 * y(i + 1, j) -
                       y(i + 2, j)) /
                      (12.0 * h);
        d(T - 2, j) = -(-3.0 * y(T - 1, j) - 10.0 * y(T - 2, j) +
                        18.0 * y(T - 3, j) - 6.0 * y(T - 4, j) + y(T - 5, j)) /
                      (12.0 * h);
        d(T - 1, j) = -(-25.0 * y(T - 1, j) + 48.0 * y(T - 2, j) -
                        36.0 * y(T - 3, j) + 16.0 * y(T - 4, j) -
                        3.0 * y(T - 5, j)) /
                      (12.0 * h);
    }
    return d;
}

} // namespace

R2starResult recon_R2star(const Measurement& y90, const VecXcd& Meq,
                          const PiecewiseConstant& G, const AnsatzSpace& X,
                          const CoilSet& coils, double gamma) {
    y90.validate();
    const Grid& g = X.grid;
    const int T = y90.nsamples();
    const int J = y90.ncoils();
    if (T < 5)
        throw ConfigError("recon_R2star: at least 5 samples needed for the "
                          "differencing stencil");
    if (Meq.size() != g.size())
        throw ConfigError("recon_R2star: M^eq size does not match the grid");
    if (coils.ncoils() != J)
        throw ConfigError("recon_R2star: coil count mismatch");
    if (static_cast<int>(X.k_samples.size()) != T)
        throw ConfigError(
            "recon_R2star: ansatz trajectory length does not match the clock");

    const double h = y90.times[1] - y90.times[0];
    for (int i = 1; i < T; ++i)
        if (std::abs(y90.times[i] - y90.times[i - 1] - h) > 1e-9 * h)
            throw ConfigError("recon_R2star: uniform sample clock required");

    // per-row transform values of conj(c_j) M^eq and its frequency gradient
    Eigen::MatrixXcd a(T, J), rhs(T, J);
    {
        std::vector<VecXcd> wf(J), wgx(J), wgy(J), wgz(J);
        for (int j = 0; j < J; ++j) {
            VecXcd cm = coils.c.col(j).conjugate().cwiseProduct(Meq);
            wf[j] = cm;
            wgx[j].resize(g.size());
            wgy[j].resize(g.size());
            wgz[j].resize(g.size());
            for (int idx = 0; idx < g.size(); ++idx) {
                Vec3 r = g.coords(idx);
                cd f = cd(0.0, -kTwoPi) * cm(idx); // F[-2 pi i r g] = grad_xi F[g]
                wgx[j](idx) = f * r[0];
                wgy[j](idx) = f * r[1];
                wgz[j](idx) = f * r[2];
            }
        }
        for (int i = 0; i < T; ++i) {
            Vec3 k = X.k_samples[i];
            // left limit at the final sample: the waveform closes there
            double te = i == T - 1 ? y90.times[i] - 1e-9 * h : y90.times[i];
            Vec3 gs = G.value(te) * (gamma / kTwoPi);
            for (int j = 0; j < J; ++j) {
                a(i, j) = dft_at(wf[j], g, k);
                rhs(i, j) = gs[0] * dft_at(wgx[j], g, k) +
                            gs[1] * dft_at(wgy[j], g, k) +
                            gs[2] * dft_at(wgz[j], g, k);
            }
        }
    }

    Eigen::MatrixXcd dy = diff_time(y90.y, h);

    // rows whose differencing stencil straddles a gradient switch see a kink
    // in y' and are dropped from the regression
    std::vector<bool> valid(T, true);
    for (double knot : G.knots) {
        for (int i = 0; i < T; ++i) {
            int lo = std::clamp<int>(i - 2, 0, T - 5);
            double tl = y90.times[lo], tr = y90.times[lo + 4];
            if (knot > tl + 1e-12 * h && knot < tr - 1e-12 * h)
                valid[i] = false;
        }
    }
    std::vector<int> rows;
    for (int i = 0; i < T; ++i)
        if (valid[i]) rows.push_back(i);
    if (static_cast<int>(rows.size()) < 5)
        throw ConfigError("recon_R2star: fewer than 5 samples clear of "
                          "gradient switches");

    R2starResult out;

    // Gauss-Newton fit of the constant rate rho in
    //   a(t) rho + i y'(t) exp(rho (t - taup)) = rhs(t)
    cd rho;
    {
        cd num(0.0, 0.0);
        double den = 0.0;
        int i0 = rows.front();
        for (int j = 0; j < J; ++j) {
            cd iy = cd(0.0, 1.0) * dy(i0, j);
            num += (rhs(i0, j) - iy) * std::conj(a(i0, j));
            den += std::norm(a(i0, j));
        }
        if (den == 0.0)
            throw NumericsError("recon_R2star: zero signal at the first sample");
        rho = num / den;
    }
    bool converged = false;
    for (int it = 0; it < 100; ++it) {
        cd jhr(0.0, 0.0);
        double jhj = 0.0, rn = 0.0;
        for (int i : rows) {
            double dt = y90.times[i] - y90.taup;
            cd e = std::exp(rho * dt);
            for (int j = 0; j < J; ++j) {
                cd iy = cd(0.0, 1.0) * dy(i, j);
                cd r = a(i, j) * rho + iy * e - rhs(i, j);
                cd Jc = a(i, j) + iy * dt * e;
                jhr += std::conj(Jc) * r;
                jhj += std::norm(Jc);
                rn += std::norm(r);
            }
        }
        out.gn_history.push_back(std::sqrt(rn));
        if (jhj == 0.0)
            throw NumericsError("recon_R2star: degenerate regression Jacobian");
        cd step = -jhr / jhj;
        rho += step;
        if (std::abs(step) <= 1e-12 * (1.0 + std::abs(rho))) {
            converged = true;
            break;
        }
    }
    if (!converged) {
        std::ostringstream os;
        os << "recon_R2star: rate regression did not converge in 100 "
              "iterations; residual history:";
        for (double r : out.gn_history) os << " " << r;
        throw NumericsError(os.str());
    }
    out.R2star0 = rho;

    // F[R2* conj(c) M^eq](k(t)) from the exact derivative relation, then
    // invert the sampling and divide out M^eq
    Eigen::MatrixXcd S(rows.size(), J);
    std::vector<Vec3> ksub(rows.size());
    for (std::size_t ri = 0; ri < rows.size(); ++ri) {
        int i = rows[ri];
        ksub[ri] = X.k_samples[i];
        double dt = y90.times[i] - y90.taup;
        cd e = std::exp(rho * dt);
        for (int j = 0; j < J; ++j)
            S(ri, j) = rhs(i, j) - cd(0.0, 1.0) * e * dy(i, j);
    }
    InterpResult ir = interp_inverse(S, ksub, coils, X);
    out.interp_residual = ir.residual;

    const double floor = 1e-8 * Meq.cwiseAbs().maxCoeff();
    out.R2star = VecXcd::Constant(
        g.size(), cd(std::numeric_limits<double>::quiet_NaN(),
                     std::numeric_limits<double>::quiet_NaN()));
    for (int i = 0; i < g.size(); ++i) {
        if (std::abs(Meq(i)) < floor) {
            out.masked.push_back(i);
            continue;
        }
        out.R2star(i) = ir.x(i) / Meq(i);
    }
    return out;
}

} // namespace bt
