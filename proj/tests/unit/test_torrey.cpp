#include <doctest.h>

#include <cmath>
#include <complex>
#include <vector>

#include "bt/torrey.h"

using namespace bt;

namespace {

Grid grid1d(int n, double L = 1.0) { return Grid::make(1, {n, 1, 1}, {L, 1.0, 1.0}); }

VecXd cosine_field(const Grid& g, double base, double amp, int mode, double phase = 0.0) {
    VecXd f(g.size());
    for (int i = 0; i < g.size(); ++i)
        f(i) = base + amp * std::cos(2.0 * M_PI * mode * g.node(0, i) / g.L[0] + phase);
    return f;
}

CoeffFields smooth_coeffs(const Grid& g) {
    CoeffFields c;
    c.Meq = cosine_field(g, 1.0, 0.2, 1);
    c.R1 = cosine_field(g, 1.5, 0.4, 1, 0.7);
    c.R2star = cosine_field(g, 12.0, 2.0, 2).cast<cd>() +
               cd(0.0, 1.0) * cosine_field(g, 1.0, 0.5, 1, 1.3).cast<VecXcd::Scalar>();
    return c;
}

BoundarySpec impedance_bc(double beta = 0.0) {
    BoundarySpec bc;
    bc.kind.fill(BCKind::Impedance);
    bc.beta_perp.fill(beta);
    bc.beta_z.fill(beta);
    return bc;
}

// gradient- and pulse-free window [0, T]: the splitting's rotation factors are
// the identity, so the Crank-Nicolson core is the whole scheme
PulseSequence free_window(double T) {
    PulseSequence s;
    s.kind = SeqKind::Ninety;
    s.taup = 0.0;
    s.T = T;
    s.readout_start = 0.0;
    s.G = PiecewiseConstant::zero();
    return s;
}

double rel_err(const VecXcd& got, const VecXcd& want) {
    return (got - want).norm() / want.norm();
}

// least-squares slope of log(err) against log(h)
double loglog_slope(const std::vector<double>& h, const std::vector<double>& e) {
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    const int n = static_cast<int>(h.size());
    for (int i = 0; i < n; ++i) {
        const double x = std::log(h[i]), y = std::log(e[i]);
        sx += x;
        sy += y;
        sxx += x * x;
        sxy += x * y;
    }
    return (n * sxy - sx * sy) / (n * sxx - sx * sx);
}

} // namespace

TEST_SUITE("torrey") {

TEST_CASE("zero-impedance walls annihilate constants, dirichlet walls do not") {
    const Grid g = grid1d(12);
    const double d = 2.5e-3;
    ModelParams m;
    m.D0 = d * Mat3::Identity();
    CoeffFields c = smooth_coeffs(g);

    TorreyOperators neu = assemble_operators(g, c, m, impedance_bc(0.0));
    const VecXcd ones = VecXcd::Ones(g.size());
    CHECK(neu.apply_Aperp(ones).cwiseAbs().maxCoeff() ==
          doctest::Approx(neu.r2.cwiseAbs().maxCoeff()).epsilon(1e-12));
    // diffusion part alone: subtract the reaction diagonal
    VecXcd kperp_ones = neu.apply_Aperp(ones) - neu.r2;
    VecXcd kz_ones = neu.apply_Az(ones) - neu.r1.cast<cd>();
    CHECK(kperp_ones.cwiseAbs().maxCoeff() < 1e-12 * d / (g.h(0) * g.h(0)));
    CHECK(kz_ones.cwiseAbs().maxCoeff() < 1e-12 * d / (g.h(0) * g.h(0)));

    BoundarySpec dir; // default: all Dirichlet
    TorreyOperators dk = assemble_operators(g, c, m, dir);
    VecXcd kdir_ones = dk.apply_Az(ones) - dk.r1.cast<cd>();
    const double h = g.h(0);
    CHECK(std::abs(kdir_ones(0) - cd(2.0 * d / (h * h), 0.0)) < 1e-12 * d / (h * h));
    CHECK(std::abs(kdir_ones(g.size() / 2)) < 1e-12 * d / (h * h));
    // the ghost-eliminated wall makes the form strictly positive
    CHECK(dk.dform_z(ones, g.cellvol()) > 0.0);
}

TEST_CASE("zero-flux cosine modes are exact discrete eigenvectors") {
    const int n = 16;
    const Grid g = grid1d(n);
    const double d = 3.0e-3, h = g.h(0);
    ModelParams m;
    m.D0 = d * Mat3::Identity();
    CoeffFields c = smooth_coeffs(g);
    TorreyOperators ops = assemble_operators(g, c, m, impedance_bc(0.0));

    for (int q : {1, 3, 5}) {
        VecXcd u(n);
        for (int i = 0; i < n; ++i) u(i) = std::cos(q * M_PI * (i + 0.5) / n);
        const double lam = 2.0 * d / (h * h) * (1.0 - std::cos(q * M_PI / n));
        VecXcd ku = ops.apply_Az(u) - ops.r1.cast<cd>().cwiseProduct(u);
        CHECK((ku - lam * u).cwiseAbs().maxCoeff() < 1e-12 * lam);
        // and the mode frequency converges to the continuum value d (q pi)^2
        CHECK(lam == doctest::Approx(d * q * q * M_PI * M_PI).epsilon(0.05));
    }
}

TEST_CASE("jump in D couples neighbours through the harmonic face average") {
    const int n = 4;
    const Grid g = grid1d(n);
    const double h = g.h(0);
    ModelParams m;
    m.D = Eigen::MatrixXd::Zero(n, 6);
    VecXd dv(n);
    dv << 1e-3, 4e-3, 2e-3, 8e-3;
    for (int i = 0; i < n; ++i) {
        m.D(i, 0) = dv(i);
        m.D(i, 1) = dv(i);
        m.D(i, 2) = dv(i);
    }
    CoeffFields c = smooth_coeffs(g);
    TorreyOperators ops = assemble_operators(g, c, m, impedance_bc(0.0));

    for (int i = 0; i + 1 < n; ++i) {
        VecXcd e = VecXcd::Zero(n);
        e(i + 1) = 1.0;
        VecXcd col = ops.apply_Az(e) - ops.r1.cast<cd>().cwiseProduct(e);
        const double dface = 2.0 * dv(i) * dv(i + 1) / (dv(i) + dv(i + 1));
        CHECK(col(i).real() == doctest::Approx(-dface / (h * h)).epsilon(1e-12));
    }
}

TEST_CASE("upwind advection differences against the flow, inflow rows vanish") {
    const int n = 10;
    const Grid g = grid1d(n);
    const double h = g.h(0);
    CoeffFields c = smooth_coeffs(g);

    VecXcd coords(n);
    for (int i = 0; i < n; ++i) coords(i) = g.node(0, i);

    ModelParams mp;
    mp.v0 = Vec3(0.7, 0.0, 0.0);
    TorreyOperators up = assemble_operators(g, c, mp, impedance_bc(0.0));
    VecXcd a = up.apply_Adv(coords);
    CHECK(std::abs(a(0)) < 1e-14);
    for (int i = 1; i < n; ++i) CHECK(std::abs(a(i) - cd(0.7, 0.0)) < 1e-12);

    ModelParams mn;
    mn.v0 = Vec3(-0.7, 0.0, 0.0);
    TorreyOperators dn = assemble_operators(g, c, mn, impedance_bc(0.0));
    VecXcd b = dn.apply_Adv(coords);
    CHECK(std::abs(b(n - 1)) < 1e-14);
    for (int i = 0; i + 1 < n; ++i) CHECK(std::abs(b(i) - cd(-0.7, 0.0)) < 1e-12);
    (void)h;
}

TEST_CASE("crank-nicolson decay matches the per-mode amplification factor") {
    const int n = 16;
    const Grid g = grid1d(n);
    const double d = 2.0e-3, h = g.h(0);
    ModelParams m;
    m.D0 = d * Mat3::Identity();

    CoeffFields c;
    c.Meq = VecXd::Zero(n); // no longitudinal forcing
    c.R1 = VecXd::Constant(n, 0.8);
    c.R2star = VecXcd::Constant(n, cd(6.0, 1.5));

    const int q = 3;
    VecXcd mode(n);
    for (int i = 0; i < n; ++i) mode(i) = std::cos(q * M_PI * (i + 0.5) / n);
    const double lam = 2.0 * d / (h * h) * (1.0 - std::cos(q * M_PI / n));

    MagState init = MagState::zero(n);
    init.Mperp = mode;
    init.Mminus = mode; // m_x = mode, m_y = 0
    init.mz = mode;

    const double T = 0.05;
    TorreyResult R = solve_bt(free_window(T), c, m, impedance_bc(0.0), {}, g,
                              consts::gamma_proton, 1e-3, T, &init);
    const double dte = R.dt;
    const long steps = static_cast<long>(R.states.size()) - 1;
    REQUIRE(steps == 50);

    const cd az = (1.0 - 0.5 * dte * (lam + 0.8)) / (1.0 + 0.5 * dte * (lam + 0.8));
    const cd ap = (1.0 - 0.5 * dte * (lam + cd(6.0, 1.5))) /
                  (1.0 + 0.5 * dte * (lam + cd(6.0, 1.5)));
    const cd az_n = std::pow(az, static_cast<double>(steps));
    const cd ap_n = std::pow(ap, static_cast<double>(steps));

    CHECK(rel_err(R.states.back().mz, az_n * mode) < 1e-11);
    CHECK(rel_err(R.states.back().Mperp, ap_n * mode) < 1e-11);
    CHECK(rel_err(R.states.back().Mminus, ap_n * mode) < 1e-11);
}

TEST_CASE("discrete energy balance is exact when no rotation acts") {
    const int n = 14;
    const Grid g = grid1d(n);
    ModelParams m;
    m.D0 = 1.5e-3 * Mat3::Identity();
    m.v0 = Vec3(3e-4, 0.0, 0.0);

    CoeffFields c = smooth_coeffs(g);

    TorreySource f;
    VecXcd wp = cosine_field(g, 0.3, 0.1, 2).cast<cd>();
    VecXcd wz = cosine_field(g, 0.2, 0.05, 1).cast<cd>();
    f.f_plus = [wp](double t) { return VecXcd(std::cos(2.0 * t) * wp); };
    f.f_z = [wz](double t) { return VecXcd(std::exp(-t) * wz); };

    const double T = 0.04;
    TorreyResult R = solve_bt(free_window(T), c, m, impedance_bc(0.0), f, g,
                              consts::gamma_proton, 1e-3, T, nullptr);
    VecXd res = energy_residual(R, g, c, m, impedance_bc(0.0));
    CHECK(res.maxCoeff() < 1e-10);
}

TEST_CASE("energy defect from the split rotations shrinks at second order") {
    const int n = 12;
    const Grid g = grid1d(n, 0.01);
    ModelParams m;
    m.D0 = 1e-9 * Mat3::Identity();
    CoeffFields c = smooth_coeffs(g);

    // keep the per-step rotation angle well under a radian so the splitting
    // sits in its asymptotic regime: gamma*G*x*dt ~ 0.5 at the coarsest dt
    const double taup = 1e-3, T = 0.02;
    PiecewiseConstant G = PiecewiseConstant::constant(Vec3(5e-4, 0.0, 0.0), taup, T);
    PulseSequence seq = make_sequence(SeqKind::Ninety, 1.0, taup, 0.0, T, G);

    std::vector<double> dts{4e-4, 2e-4, 1e-4};
    std::vector<double> defect;
    for (double dt : dts) {
        TorreyResult R =
            solve_bt(seq, c, m, impedance_bc(0.0), {}, g, consts::gamma_proton, dt, T);
        defect.push_back(energy_residual(R, g, c, m, impedance_bc(0.0)).maxCoeff());
    }
    // rotations genuinely perturb the balance ...
    CHECK(defect[0] > 1e-12);
    // ... and the perturbation is a second-order splitting artefact
    CHECK(defect[2] < defect[0]);
    const double slope = loglog_slope(dts, defect);
    CHECK(slope > 1.5);
    CHECK(slope < 3.0);
}

TEST_CASE("free decay is monotone in the L2 energy") {
    const int n = 16;
    const Grid g = grid1d(n);
    ModelParams m;
    m.D0 = 2e-3 * Mat3::Identity();
    m.v0 = Vec3(5e-4, 0.0, 0.0); // constant flow, divergence zero

    CoeffFields c;
    c.Meq = VecXd::Zero(n);
    c.R1 = cosine_field(g, 1.0, 0.3, 1);
    c.R2star = cosine_field(g, 8.0, 2.0, 2).cast<cd>();

    MagState init = MagState::zero(n);
    init.Mperp = cosine_field(g, 0.5, 0.4, 1).cast<cd>();
    init.Mminus = init.Mperp;
    init.mz = cosine_field(g, 0.8, 0.3, 2).cast<cd>();

    const double T = 0.1;
    TorreyResult R = solve_bt(free_window(T), c, m, impedance_bc(0.0), {}, g,
                              consts::gamma_proton, 1e-3, T, &init);
    REQUIRE(R.energy.size() == R.states.size());
    for (size_t k = 0; k + 1 < R.energy.size(); ++k)
        CHECK(R.energy[k + 1] <= R.energy[k] * (1.0 + 1e-12) + 1e-30);
    CHECK(R.energy.back() < R.energy.front());
}

TEST_CASE("expanding flow raises the divergence warning, rigid flow does not") {
    const int n = 12;
    const Grid g = grid1d(n);
    CoeffFields c = smooth_coeffs(g);
    const double T = 0.01;

    ModelParams rigid;
    rigid.v0 = Vec3(1e-3, 0.0, 0.0);
    TorreyResult okr = solve_bt(free_window(T), c, rigid, impedance_bc(0.0), {}, g,
                                consts::gamma_proton, 1e-3, T);
    CHECK_FALSE(okr.divv_warning);

    ModelParams expanding;
    expanding.v = Eigen::MatrixXd::Zero(n, 3);
    for (int i = 0; i < n; ++i) expanding.v(i, 0) = 1e-3 * g.node(0, i);
    TorreyResult warn = solve_bt(free_window(T), c, expanding, impedance_bc(0.0), {}, g,
                                 consts::gamma_proton, 1e-3, T);
    CHECK(warn.divv_warning);
}

TEST_CASE("directional-derivative source linearizes the solve") {
    const int n = 10;
    const Grid g = grid1d(n, 0.01);
    ModelParams m;
    m.D0 = 1e-9 * Mat3::Identity();

    CoeffFields c0;
    c0.Meq = cosine_field(g, 1.0, 0.2, 1);
    c0.R1 = cosine_field(g, 1.2, 0.3, 1, 0.4);
    c0.R2star = cosine_field(g, 10.0, 2.0, 2).cast<cd>() +
                cd(0.0, 1.0) * cosine_field(g, 0.8, 0.3, 1).cast<VecXcd::Scalar>();

    CoeffFields dx;
    dx.Meq = cosine_field(g, 0.0, 0.1, 2);
    dx.R1 = cosine_field(g, 0.0, 0.15, 1, 1.1);
    dx.R2star = cosine_field(g, 0.0, 0.5, 1).cast<cd>() +
                cd(0.0, 1.0) * cosine_field(g, 0.0, 0.2, 2).cast<VecXcd::Scalar>();

    const double taup = 1e-3, T = 0.02;
    PiecewiseConstant G = PiecewiseConstant::constant(Vec3(5e-4, 0.0, 0.0), taup, T);
    PulseSequence seq = make_sequence(SeqKind::Ninety, 1.0, taup, 0.0, T, G);
    const BoundarySpec bc = impedance_bc(0.0);

    auto fd_at = [&](double eps, double dt) {
        TorreyResult up = solve_bt(seq, c0 + dx.scaled(eps), m, bc, {}, g,
                                   consts::gamma_proton, dt, T);
        TorreyResult dn = solve_bt(seq, c0 - dx.scaled(eps), m, bc, {}, g,
                                   consts::gamma_proton, dt, T);
        std::pair<VecXcd, VecXcd> out;
        out.first = (up.states.back().Mperp - dn.states.back().Mperp) / (2.0 * eps);
        out.second = (up.states.back().mz - dn.states.back().mz) / (2.0 * eps);
        return out;
    };
    auto lin_at = [&](double dt) {
        TorreyResult ref = solve_bt(seq, c0, m, bc, {}, g, consts::gamma_proton, dt, T);
        CoeffFields clin = c0;
        clin.Meq = VecXd::Zero(n); // reaction at the reference, forcing from df
        MagState dinit = MagState::zero(n);
        dinit.mz = dx.Meq.cast<cd>();
        return solve_bt(seq, clin, m, bc, frechet_source(ref, c0, dx), g,
                        consts::gamma_proton, dt, T, &dinit);
    };

    // the source-form derivative and the same-step central difference converge
    // to each other as the step resolves the split rotations
    std::vector<double> dts{2e-4, 1e-4, 5e-5};
    std::vector<double> gap;
    for (double dt : dts) {
        auto fd = fd_at(1e-5, dt);
        TorreyResult dlin = lin_at(dt);
        gap.push_back(std::max(rel_err(dlin.states.back().Mperp, fd.first),
                               rel_err(dlin.states.back().mz, fd.second)));
    }
    CHECK(gap.front() < 1e-2);
    CHECK(gap.back() < 0.35 * gap.front());
    CHECK(loglog_slope(dts, gap) > 1.5);

    // second order in the probe amplitude: the drift of the central
    // difference away from a small-amplitude base scales like epsilon^2
    // (amplitudes chosen large enough to clear the cancellation noise)
    const double dt = 1e-4;
    auto f1 = fd_at(3e-2, dt), f2 = fd_at(1e-2, dt), f0 = fd_at(1e-3, dt);
    const double move_big = (f1.first - f0.first).norm() + (f1.second - f0.second).norm();
    const double move_small = (f2.first - f0.first).norm() + (f2.second - f0.second).norm();
    // quadratic prediction: (0.03^2 - 0.001^2) / (0.01^2 - 0.001^2) ~ 9.1
    CHECK(move_big / move_small > 6.0);
    CHECK(move_big / move_small < 13.0);
}

TEST_CASE("difference system reproduces the gap between two forward runs") {
    const int n = 10;
    const Grid g = grid1d(n, 0.01);
    ModelParams m;
    m.D0 = 1e-9 * Mat3::Identity();

    CoeffFields xt;
    xt.Meq = cosine_field(g, 1.0, 0.2, 1);
    xt.R1 = cosine_field(g, 1.2, 0.3, 1);
    xt.R2star = cosine_field(g, 10.0, 2.0, 2).cast<cd>();
    CoeffFields x = xt;
    x.Meq = cosine_field(g, 1.05, 0.25, 1);
    x.R1 = cosine_field(g, 1.26, 0.28, 1);
    x.R2star = cosine_field(g, 10.5, 1.8, 2).cast<cd>() +
               cd(0.0, 1.0) * VecXcd::Constant(n, 0.4);

    const double taup = 1e-3, T = 0.015;
    PiecewiseConstant G = PiecewiseConstant::constant(Vec3(5e-4, 0.0, 0.0), taup, T);
    PulseSequence seq = make_sequence(SeqKind::Ninety, 1.0, taup, 0.0, T, G);
    const BoundarySpec bc = impedance_bc(0.0);

    auto gap_at = [&](double dt) {
        LipschitzProbe pr =
            lipschitz_probe(x, xt, m, seq, bc, g, consts::gamma_proton, dt, T);
        CHECK(pr.den > 0.0);
        CHECK(pr.num > 0.0);
        CHECK(std::isfinite(pr.ratio));
        CHECK(pr.ratio == doctest::Approx(pr.num / pr.den).epsilon(1e-12));

        TorreyResult Sx = solve_bt(seq, x, m, bc, {}, g, consts::gamma_proton, dt, T);
        TorreyResult St = solve_bt(seq, xt, m, bc, {}, g, consts::gamma_proton, dt, T);
        REQUIRE(pr.diff.states.size() == Sx.states.size());
        VecXcd want_perp = Sx.states.back().Mperp - St.states.back().Mperp;
        VecXcd want_z = Sx.states.back().mz - St.states.back().mz;
        return std::max(rel_err(pr.diff.states.back().Mperp, want_perp),
                        rel_err(pr.diff.states.back().mz, want_z));
    };

    // agreement up to the rotation-splitting defect, vanishing with the step
    const double coarse = gap_at(2.5e-4);
    const double fine = gap_at(6.25e-5);
    CHECK(coarse < 1e-2);
    CHECK(fine < 0.3 * coarse);
}

} // TEST_SUITE
