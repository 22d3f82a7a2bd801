#include "doctest.h"

#include <cmath>
#include <vector>

#include "bt/bloch.h"
#include "bt/core.h"
#include "bt/seq.h"

using namespace bt;

namespace {

const double kGamma = consts::gamma_proton;

// reference integrator for the per-point pulse system in the (M+, M-, mz)
// coordinates:
//   M+' = -a2 M+ - i b mz
//   M-' = -a2 M- + i conj(b) mz
//   mz' = -a1 mz - (i/2)(conj(b) M+ - b M-) + f
struct Triple {
    cd Mp, Mm, mz;
};

Triple pulse_rhs(const Triple& s, cd a1, cd a2, cd b, cd f) {
    Triple d;
    d.Mp = -a2 * s.Mp - cd(0, 1) * b * s.mz;
    d.Mm = -a2 * s.Mm + cd(0, 1) * std::conj(b) * s.mz;
    d.mz = -a1 * s.mz -
           cd(0, 0.5) * (std::conj(b) * s.Mp - b * s.Mm) + f;
    return d;
}

Triple rk4_pulse(Triple s, cd a1, cd a2, cd b, cd f, double dt, int steps) {
    double h = dt / steps;
    auto add = [](const Triple& x, const Triple& y, double w) {
        return Triple{x.Mp + w * y.Mp, x.Mm + w * y.Mm, x.mz + w * y.mz};
    };
    for (int n = 0; n < steps; ++n) {
        Triple k1 = pulse_rhs(s, a1, a2, b, f);
        Triple k2 = pulse_rhs(add(s, k1, h / 2), a1, a2, b, f);
        Triple k3 = pulse_rhs(add(s, k2, h / 2), a1, a2, b, f);
        Triple k4 = pulse_rhs(add(s, k3, h), a1, a2, b, f);
        s.Mp += h / 6.0 * (k1.Mp + 2.0 * k2.Mp + 2.0 * k3.Mp + k4.Mp);
        s.Mm += h / 6.0 * (k1.Mm + 2.0 * k2.Mm + 2.0 * k3.Mm + k4.Mm);
        s.mz += h / 6.0 * (k1.mz + 2.0 * k2.mz + 2.0 * k3.mz + k4.mz);
    }
    return s;
}

Grid small_grid(int n = 6) { return Grid::make(1, {n, 1, 1}, {0.01, 0.01, 0.01}); }

CoeffFields smooth_fields(const Grid& g) {
    CoeffFields c;
    c.Meq.resize(g.size());
    c.R1.resize(g.size());
    c.R2star.resize(g.size());
    for (int i = 0; i < g.size(); ++i) {
        double x = g.coords(i)[0] / g.L[0];
        c.Meq(i) = 1.0 + 0.25 * std::cos(2 * M_PI * x);
        c.R1(i) = 1.2 + 0.3 * std::sin(2 * M_PI * x);
        c.R2star(i) = cd(12.0 + 3.0 * std::cos(2 * M_PI * x), 2.0);
    }
    return c;
}

} // namespace

TEST_SUITE("bloch") {

TEST_CASE("pulse propagator matches a reference RK4 integration") {
    // generic complex rates and envelope, inhomogeneous longitudinal term
    struct Case {
        cd a1, a2, b, f;
    };
    std::vector<Case> cases = {
        {cd(1.1, 0.0), cd(9.0, 2.0), cd(800.0, 0.0), cd(1.3, 0.0)},
        {cd(0.7, 0.0), cd(14.0, -3.0), cd(500.0, 300.0), cd(0.0, 0.0)},
        {cd(2.0, 1.0), cd(5.0, 0.5), cd(0.0, 0.0), cd(0.4, 0.2)},
        {cd(0.0, 0.0), cd(0.0, 0.0), cd(1000.0, -200.0), cd(0.0, 0.0)},
    };
    double dt = 1.2e-3;
    for (const auto& cs : cases) {
        PulsePropagator pp = pulse_propagator(cs.a1, cs.a2, cs.b, cs.f, dt);
        Triple s{cd(0.3, -0.1), cd(0.3, 0.1), cd(0.9, 0.05)};
        cd Mp = s.Mp, Mm = s.Mm, mz = s.mz;
        apply_propagator(pp, Mp, Mm, mz);
        Triple ref = rk4_pulse(s, cs.a1, cs.a2, cs.b, cs.f, dt, 4000);
        CHECK(std::abs(Mp - ref.Mp) <= 1e-9);
        CHECK(std::abs(Mm - ref.Mm) <= 1e-9);
        CHECK(std::abs(mz - ref.mz) <= 1e-9);
    }
}

TEST_CASE("quarter and half turns are exact without relaxation") {
    double dt = 1e-3;
    double Meq = 0.8;
    // flip angle |b| dt = pi/2
    cd b(M_PI / 2 / dt, 0.0);
    PulsePropagator p90 = pulse_propagator(0.0, 0.0, b, 0.0, dt);
    cd Mp(0, 0), Mm(0, 0), mz(Meq, 0);
    apply_propagator(p90, Mp, Mm, mz);
    CHECK(std::abs(Mp - cd(0.0, -Meq)) <= 1e-10);
    CHECK(std::abs(mz) <= 1e-10);

    PulsePropagator p180 = pulse_propagator(0.0, 0.0, 2.0 * b, 0.0, dt);
    Mp = cd(0, 0);
    Mm = cd(0, 0);
    mz = cd(Meq, 0);
    apply_propagator(p180, Mp, Mm, mz);
    CHECK(std::abs(mz + Meq) <= 1e-10);
    CHECK(std::abs(Mp) <= 1e-10);
}

TEST_CASE("free precession applies decay, gradient phase, and recovery") {
    Grid g = small_grid();
    CoeffFields c = smooth_fields(g);
    MagState s = MagState::equilibrium(c);
    // tip by hand so the transverse part is nonzero
    for (int i = 0; i < g.size(); ++i) {
        s.Mperp(i) = cd(0.0, -c.Meq(i));
        s.Mminus(i) = std::conj(s.Mperp(i));
        s.mz(i) = cd(0.1, 0.0);
    }
    Vec3 k0(100.0, 0, 0), k1(300.0, 0, 0);
    double dt = 2e-3;
    MagState e = free_precession(s, c, k0, k1, g, dt);
    for (int i = 0; i < g.size(); ++i) {
        Vec3 r = g.coords(i);
        cd decay = std::exp(-c.R2star(i) * dt -
                            cd(0, 2 * M_PI) * (k1 - k0).dot(r));
        CHECK(std::abs(e.Mperp(i) - s.Mperp(i) * decay) <= 1e-14);
        cd mz_ref = c.Meq(i) + std::exp(-c.R1(i) * dt) * (s.mz(i) - c.Meq(i));
        CHECK(std::abs(e.mz(i) - mz_ref) <= 1e-14);
    }
}

TEST_CASE("piecewise-exact and RK4 trajectories agree") {
    Grid g = small_grid();
    CoeffFields c = smooth_fields(g);
    VecXcd cplus = VecXcd::Constant(g.size(), cd(1.0, 0.0));
    PiecewiseConstant G =
        PiecewiseConstant::constant(Vec3(1e-3, 0, 0), 0.11, 0.13);
    PulseSequence seq = make_sequence(SeqKind::OneEightyTauNinety, 1.0, 1e-3,
                                      0.1, 0.13, G, kGamma, 0.11);
    std::vector<double> times{0.11, 0.12, 0.13};
    BlochOptions exact;
    BlochOptions rk;
    rk.mode = BlochMode::Numeric;
    rk.dt_pulse_frac = 1.0 / 100.0;
    rk.dt_free_frac = 1.0 / 2000.0;
    auto a = solve_bloch(seq, c, cplus, g, kGamma, exact, times);
    auto b = solve_bloch(seq, c, cplus, g, kGamma, rk, times);
    REQUIRE(a.size() == times.size());
    for (size_t i = 0; i < times.size(); ++i) {
        CHECK((a[i].Mperp - b[i].Mperp).cwiseAbs().maxCoeff() <= 1e-6);
        CHECK((a[i].mz - b[i].mz).cwiseAbs().maxCoeff() <= 1e-6);
    }
}

TEST_CASE("thin-pulse closed form is the short-pulse limit of the solver") {
    Grid g = small_grid();
    CoeffFields c = smooth_fields(g);
    VecXcd cplus = VecXcd::Constant(g.size(), cd(1.0, 0.0));
    PiecewiseConstant G =
        PiecewiseConstant::constant(Vec3(2e-3, 0, 0), 0.105, 0.12);
    double taup = 1e-7;
    PulseSequence seq = make_sequence(SeqKind::OneEightyTauNinety, 1.0, taup,
                                      0.1, 0.12, G, kGamma, 0.105);
    std::vector<double> times{0.105, 0.113, 0.12};
    auto sol = solve_bloch(seq, c, cplus, g, kGamma, BlochOptions{}, times);
    for (size_t i = 0; i < times.size(); ++i) {
        VecXcd ex = explicit_state(seq, c, g, kGamma, times[i]);
        double gap = (sol[i].Mperp - ex).cwiseAbs().maxCoeff();
        CHECK(gap <= 2e-5);
    }
}

TEST_CASE("thin-pulse closed form transcribes the stated formulas") {
    Grid g = small_grid(4);
    CoeffFields c = smooth_fields(g);
    double taup = 1e-3, tau = 0.08, T = 0.15;
    PiecewiseConstant G =
        PiecewiseConstant::constant(Vec3(1.5e-3, 0, 0), 0.09, T);
    PulseSequence s90 =
        make_sequence(SeqKind::Ninety, 1.0, taup, 0.0, T, G, kGamma, 0.09);
    PulseSequence sIR = make_sequence(SeqKind::OneEightyTauNinety, 1.0, taup,
                                      tau, T, G, kGamma, 0.09);
    double t = 0.12;
    Vec3 kt = k_trajectory(G, kGamma, t);
    VecXcd e90 = explicit_state(s90, c, g, kGamma, t);
    VecXcd eIR = explicit_state(sIR, c, g, kGamma, t);
    for (int i = 0; i < g.size(); ++i) {
        Vec3 r = g.coords(i);
        cd ph = std::exp(-c.R2star(i) * (t - taup) -
                         cd(0, 2 * M_PI) * kt.dot(r));
        CHECK(std::abs(e90(i) - cd(0, -1) * ph * c.Meq(i)) <= 1e-13);
        double tJ = tau + 2 * taup;
        cd phJ = std::exp(-c.R2star(i) * (t - tJ) -
                          cd(0, 2 * M_PI) * kt.dot(r));
        cd phi = (1.0 - 2.0 * std::exp(-c.R1(i) * tau)) * c.Meq(i);
        CHECK(std::abs(eIR(i) - cd(0, -1) * phJ * phi) <= 1e-13);
    }
}

TEST_CASE("linearized solver matches central differences") {
    Grid g = small_grid();
    CoeffFields c = smooth_fields(g);
    VecXcd cplus = VecXcd::Constant(g.size(), cd(1.0, 0.0));
    PiecewiseConstant G =
        PiecewiseConstant::constant(Vec3(1e-3, 0, 0), 0.105, 0.12);
    PulseSequence seq = make_sequence(SeqKind::OneEightyTauNinety, 1.0, 1e-3,
                                      0.1, 0.12, G, kGamma, 0.105);
    std::vector<double> times{0.106, 0.113, 0.12};

    CoeffFields dx;
    dx.Meq.resize(g.size());
    dx.R1.resize(g.size());
    dx.R2star.resize(g.size());
    for (int i = 0; i < g.size(); ++i) {
        double x = g.coords(i)[0] / g.L[0];
        dx.Meq(i) = 0.5 * std::cos(2 * M_PI * x);
        dx.R1(i) = 0.4 * std::sin(2 * M_PI * x);
        dx.R2star(i) = cd(1.0 * std::cos(2 * M_PI * x), 0.5);
    }

    auto lin = solve_bloch_linearized(seq, c, dx, cplus, g, kGamma, times);

    double eps = 1e-5;
    CoeffFields cp = c + dx.scaled(eps);
    CoeffFields cm = c - dx.scaled(eps);
    auto up = solve_bloch(seq, cp, cplus, g, kGamma, BlochOptions{}, times);
    auto um = solve_bloch(seq, cm, cplus, g, kGamma, BlochOptions{}, times);
    for (size_t i = 0; i < times.size(); ++i) {
        VecXcd fd = (up[i].Mperp - um[i].Mperp) / (2 * eps);
        double scale = std::max(1.0, fd.cwiseAbs().maxCoeff());
        CHECK((lin[i].Mperp - fd).cwiseAbs().maxCoeff() / scale <= 1e-6);
        VecXcd fdz = (up[i].mz - um[i].mz) / (2 * eps);
        CHECK((lin[i].mz - fdz).cwiseAbs().maxCoeff() <= 1e-6 * std::max(1.0, fdz.cwiseAbs().maxCoeff()));
    }
}

} // TEST_SUITE
