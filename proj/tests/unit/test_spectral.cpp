#include <doctest.h>

#include <cmath>
#include <complex>
#include <random>
#include <vector>

#include "bt/spectral.h"

using namespace bt;

namespace {

Grid grid1d(int n, double L = 0.01) { return Grid::make(1, {n, 1, 1}, {L, 1.0, 1.0}); }

BoundarySpec neumann() {
    BoundarySpec bc;
    bc.kind.fill(BCKind::Impedance);
    return bc;
}

CoeffFields const_coeffs(int n, double Meq, double R1, cd R2) {
    CoeffFields c;
    c.Meq = VecXd::Constant(n, Meq);
    c.R1 = VecXd::Constant(n, R1);
    c.R2star = VecXcd::Constant(n, R2);
    return c;
}

// spectral projector by the resolvent contour integral, trapezoid on a circle
Eigen::MatrixXcd contour_projector(const Eigen::MatrixXcd& A, cd center,
                                   double radius, int nodes = 64) {
    const int n = static_cast<int>(A.rows());
    Eigen::MatrixXcd P = Eigen::MatrixXcd::Zero(n, n);
    Eigen::MatrixXcd I = Eigen::MatrixXcd::Identity(n, n);
    for (int j = 0; j < nodes; ++j) {
        double th = 2.0 * M_PI * j / nodes;
        cd z = center + radius * cd(std::cos(th), std::sin(th));
        P += (z - center) * (z * I - A).partialPivLu().solve(I);
    }
    return P / static_cast<double>(nodes);
}

} // namespace

TEST_SUITE("spectral") {

TEST_CASE("generator assembly mirrors the operator blocks") {
    const int n = 6;
    const Grid g = grid1d(n);
    CoeffFields c = const_coeffs(n, 1.0, 0.9, cd(8.0, 0.7));
    c.R1(2) = 1.4; // something non-constant to see in the diagonal
    ModelParams m;
    m.D0 = 1e-6 * Mat3::Identity();
    const Vec3 G0(2e-4, 0.0, 0.0);
    const double gamma = consts::gamma_proton;

    GeneratorPair gen = assemble_generators(g, c, m, G0, neumann(), gamma);
    TorreyOperators ops = assemble_operators(g, c, m, neumann());
    Eigen::MatrixXd Kz(ops.K_z), Kp(ops.K_perp);

    CHECK((gen.Az - (Kz + Eigen::MatrixXd(c.R1.asDiagonal()))).norm() < 1e-14);
    for (int i = 0; i < n; ++i) {
        double w = c.R2star(i).imag() + gamma * G0[0] * g.node(0, i);
        CHECK(gen.Aperp(i, n + i) == doctest::Approx(-w).epsilon(1e-14));
        CHECK(gen.Aperp(n + i, i) == doctest::Approx(w).epsilon(1e-14));
        CHECK(std::abs(gen.Lperp(i, i) - (Kp(i, i) + cd(c.R2star(i).real(), w))) <
              1e-12);
    }
    // symmetric part of the block form is the diffusion + Re R2* part twice
    Eigen::MatrixXd S = 0.5 * (gen.Aperp + gen.Aperp.transpose());
    CHECK((S.topRightCorner(n, n)).norm() < 1e-14);
}

TEST_CASE("eigen projectors equal the resolvent contour integrals") {
    Eigen::MatrixXcd V(4, 4);
    V << cd(1.0, 0.0), cd(0.3, 0.1), cd(0.0, 0.0), cd(0.1, 0.0), //
        cd(0.2, 0.0), cd(1.0, 0.0), cd(0.4, -0.1), cd(0.0, 0.0), //
        cd(0.0, 0.1), cd(0.1, 0.0), cd(1.0, 0.0), cd(0.3, 0.0),  //
        cd(0.1, 0.0), cd(0.0, 0.0), cd(0.2, 0.1), cd(1.0, 0.0);
    VecXcd lam(4);
    lam << cd(0.5, 0.0), cd(1.2, 0.3), cd(2.0, -0.1), cd(3.5, 0.0);
    Eigen::MatrixXcd A =
        V * lam.asDiagonal() * V.partialPivLu().solve(Eigen::MatrixXcd::Identity(4, 4));

    EigenSystem es = eigen_projectors(A, 4);
    REQUIRE(es.values.size() == 4);
    // sorted by |Re| ascending
    for (int i = 0; i < 4; ++i) CHECK(std::abs(es.values(i) - lam(i)) < 1e-10);

    Eigen::MatrixXcd sum = Eigen::MatrixXcd::Zero(4, 4);
    for (int k = 0; k < 4; ++k) {
        const Eigen::MatrixXcd& P = es.P[k];
        sum += P;
        CHECK((P * P - P).norm() < 1e-10);
        CHECK((A * P - es.values(k) * P).norm() < 1e-9);
        Eigen::MatrixXcd Pc = contour_projector(A, lam(k), 0.3);
        CHECK((P - Pc).norm() < 1e-8);
    }
    CHECK((sum - Eigen::MatrixXcd::Identity(4, 4)).norm() < 1e-10);

    // truncation keeps the smallest |Re| clusters
    EigenSystem top = eigen_projectors(A, 2);
    REQUIRE(top.values.size() == 2);
    CHECK(std::abs(top.values(0) - lam(0)) < 1e-10);
    CHECK(std::abs(top.values(1) - lam(1)) < 1e-10);

    // a repeated but diagonalizable eigenvalue forms one cluster
    Eigen::MatrixXcd D = Eigen::MatrixXcd::Zero(3, 3);
    D(0, 0) = 1.0;
    D(1, 1) = 1.0;
    D(2, 2) = 2.0;
    EigenSystem rep = eigen_projectors(D, 2);
    REQUIRE(rep.values.size() == 2);
    CHECK(rep.multiplicity[0] == 2);
    CHECK((rep.P[0] - (Eigen::MatrixXcd(3, 3) << 1, 0, 0, 0, 1, 0, 0, 0, 0)
                          .finished())
              .norm() < 1e-12);

    // Jordan block: no spectral projector, flagged instead of silently wrong
    Eigen::MatrixXcd J(2, 2);
    J << 1.0, 1.0, 0.0, 1.0;
    CHECK_THROWS_AS(eigen_projectors(J, 1), NumericsError);

    CHECK_THROWS_AS(eigen_projectors(Eigen::MatrixXcd::Zero(2, 3), 1), ConfigError);
    CHECK_THROWS_AS(eigen_projectors(A, 0), ConfigError);
    CHECK_THROWS_AS(eigen_projectors(A, 5), ConfigError);
}

TEST_CASE("mode coefficients: quadrature and closed form coincide") {
    struct P {
        double lam, tau, R10, Rt;
    };
    for (P p : {P{0.7, 0.3, 1.0, 1.0}, P{2.4, 0.7, 0.8, 1.3}, P{5.0, 0.12, 2.0, 0.4},
                P{1.0, 0.5, 1.0, 1.0}}) { // last one hits lambda == R1tilde0
        double mu = 1.0 - 2.0 * std::exp(-p.Rt * p.tau);
        auto mz = [&](double s) { return -2.0 * std::exp(-p.Rt * s); };
        ABCoeffs q = coeffs_AB(p.lam, p.tau, p.R10, mu, mz);
        ABCoeffs c = coeffs_AB_exp(p.lam, p.tau, p.R10, mu, p.Rt);
        CHECK(q.A == doctest::Approx(c.A).epsilon(1e-14));
        CHECK(q.B == doctest::Approx(c.B).epsilon(1e-12));
    }
    CHECK_THROWS_AS(coeffs_AB_exp(0.0, 0.3, 1.0, 0.0, 1.0), DomainError);
    CHECK_THROWS_AS(coeffs_AB_exp(-1.0, 0.3, 1.0, 0.0, 1.0), DomainError);
}

TEST_CASE("determinant condition: closed form tracks direct evaluation") {
    std::mt19937_64 rng(20260814);
    std::uniform_real_distribution<double> U(0.0, 1.0);
    std::vector<double> lams;
    for (int d = 0; d < 200; ++d) {
        double lam = 0.1 + 19.9 * U(rng);
        double tau1 = 0.05 + 0.45 * U(rng);
        double tau2 = tau1 + 0.05 + 0.45 * U(rng);
        double R10 = 0.1 + 4.9 * U(rng);
        double Rt = 0.1 + 4.9 * U(rng);
        DetReport rep = det_condition({lam}, tau1, tau2, R10, Rt);
        CHECK(std::abs(rep.det_direct[0] - rep.det_closed[0]) <=
              1e-10 * (1.0 + rep.scale[0]));
        lams.push_back(lam);
    }

    // diffusion ladder above R10 = Rt = 1: all determinants safely nonzero
    std::vector<double> ladder;
    for (int q = 1; q <= 10; ++q)
        ladder.push_back(1.0 + 1e-3 * q * q * M_PI * M_PI);
    DetReport ok = det_condition(ladder, 0.3, 0.7, 1.0, 1.0);
    CHECK(ok.all_nonzero);

    // the closed form vanishes identically at lambda = R10
    DetReport zero = det_condition({1.7}, 0.3, 0.7, 1.7, 1.0);
    CHECK_FALSE(zero.all_nonzero);
    CHECK(std::abs(zero.det_closed[0]) == 0.0);

    CHECK_THROWS_AS(det_condition({1.0}, 0.7, 0.3, 1.0, 1.0), ConfigError);
}

TEST_CASE("longitudinal semigroups act diagonally on the flow eigenbasis") {
    const int n = 10;
    const Grid g = grid1d(n);
    const double Dc = 2e-3, R1 = 0.8, Rt = 0.9, tau = 0.4;
    CoeffFields c = const_coeffs(n, 1.0, R1, cd(8.0, 0.0));
    ModelParams m;
    m.D0 = Dc * Mat3::Identity();
    GeneratorPair gen =
        assemble_generators(g, c, m, Vec3::Zero(), neumann());

    Eigen::MatrixXd E = semigroup_E(gen.Az, c.R1, tau);
    Eigen::MatrixXd Et = semigroup_Etilde(gen.Az, Rt, tau);

    const double h = g.h(0);
    for (int q : {0, 1, 4}) {
        VecXd v(n);
        for (int i = 0; i < n; ++i) v(i) = std::cos(q * M_PI * (i + 0.5) / n);
        const double lam = 2.0 * Dc / (h * h) * (1.0 - std::cos(q * M_PI / n)) + R1;
        // E multiplier is minus the A coefficient at zero recovery weight
        const double want_E = -coeffs_AB_exp(lam, tau, R1, 0.0, Rt).A;
        CHECK((E * v - want_E * v).norm() < 1e-12 * v.norm());
        // Etilde multiplier equals the B coefficient, checked via quadrature
        auto mz = [&](double s) { return -2.0 * std::exp(-Rt * s); };
        const double want_B = coeffs_AB(lam, tau, R1, 0.0, mz).B;
        CHECK((Et * v - want_B * v).norm() < 1e-11 * v.norm());
    }

    Eigen::MatrixXd skew = gen.Az;
    skew(0, n - 1) += 1.0;
    CHECK_THROWS_AS(semigroup_E(skew, c.R1, tau), NumericsError);
}

TEST_CASE("transverse reference profile is the Laplace transform of the decay") {
    const Grid g = grid1d(3, 0.01);
    VecXd Meq(3);
    Meq << 1.0, 0.7, 1.3;
    const cd R2t(6.0, 0.4);
    const Vec3 G0(5e-4, 0.0, 0.0);
    const cd lam(1.5, -0.2);
    const double gamma = consts::gamma_proton;

    VecXcd mu = mu_I_profile(g, Meq, R2t, G0, lam, gamma);

    std::vector<double> nodes, weights;
    gauss_legendre(16, nodes, weights);
    for (int i = 0; i < 3; ++i) {
        cd den = R2t + cd(0.0, gamma * G0[0] * g.node(0, i)) + lam;
        const double X = 40.0 / den.real();
        cd acc(0.0, 0.0);
        const int panels = 200;
        for (int p = 0; p < panels; ++p) {
            double a = X * p / panels, b = X * (p + 1) / panels;
            for (std::size_t k = 0; k < nodes.size(); ++k) {
                double t = 0.5 * (a + b) + 0.5 * (b - a) * nodes[k];
                acc += 0.5 * (b - a) * weights[k] * cd(0.0, -1.0) * Meq(i) *
                       std::exp(-den * t);
            }
        }
        CHECK(std::abs(mu(i) - acc) < 1e-10 * std::abs(acc));
    }

    // vanishing denominator is refused, not divided through
    CHECK_THROWS_AS(
        mu_I_profile(g, Meq, cd(1.0, 0.5), Vec3::Zero(), cd(-1.0, -0.5)),
        DomainError);
}

TEST_CASE("rank test separates overlapping from orthogonal coils") {
    const int n = 12;
    const Grid g = grid1d(n);
    CoeffFields c = const_coeffs(n, 1.0, 1.0, cd(10.0, 0.5));
    ModelParams m;
    m.D0 = 1e-6 * Mat3::Identity();

    const double u = 1.0 / g.L[0];
    std::vector<Vec3> ks{Vec3(0, 0, 0), Vec3(u, 0, 0), Vec3(-u, 0, 0)};
    AnsatzSpace X = build_ansatz(ks, g, 0.5 * u);
    REQUIRE(X.nmodes() == 3);

    // matched: modulated coils with energy on the retained low modes
    CoilSet coils;
    coils.c = Eigen::MatrixXcd(n, 2);
    for (int i = 0; i < n; ++i) {
        double x = g.node(0, i) / g.L[0];
        coils.c(i, 0) = 1.0 + 0.4 * std::cos(2.0 * M_PI * x);
        coils.c(i, 1) = 1.0 + 0.4 * std::cos(2.0 * M_PI * x + 2.0 * M_PI / 3.0);
    }
    RankTestResult match = uniqueness_rank_test(g, c, m, Vec3(1e-6, 0, 0), neumann(),
                                                X, coils, 0.3, 0.7, 3);
    CHECK(match.rows == 3 * 3 * 2);
    CHECK(match.cols == 3 * X.nmodes());
    CHECK(match.sigma_min > 1e-8);

    // counterexample: still gradient, hard walls; every transverse mode is a
    // sine, and a coil made of higher sines is exactly orthogonal to them all
    BoundarySpec dir; // all Dirichlet
    CoilSet blind;
    blind.c = Eigen::MatrixXcd(n, 1);
    for (int i = 0; i < n; ++i)
        blind.c(i, 0) = std::sin(6.0 * M_PI * (i + 0.5) / n); // q = 6 > count
    RankTestResult ortho = uniqueness_rank_test(g, c, m, Vec3::Zero(), dir, X,
                                                blind, 0.3, 0.7, 4);
    CHECK(ortho.sigma_min <= 1e-10);

    CoeffFields vary = c;
    vary.R1(3) = 2.0;
    CHECK_THROWS_AS(uniqueness_rank_test(g, vary, m, Vec3::Zero(), dir, X, blind,
                                         0.3, 0.7, 3),
                    ConfigError);
    CHECK_THROWS_AS(uniqueness_rank_test(g, c, m, Vec3::Zero(), dir, X, blind,
                                         0.7, 0.3, 3),
                    ConfigError);
}

TEST_CASE("certificate aggregates the separation, positivity and rank checks") {
    const int n = 12;
    const Grid g = grid1d(n);
    CoeffFields c = const_coeffs(n, 1.0, 1.0, cd(10.0, 0.5));
    ModelParams m;
    m.D0 = 1e-6 * Mat3::Identity();
    const double u = 1.0 / g.L[0];
    AnsatzSpace X = build_ansatz(
        {Vec3(0, 0, 0), Vec3(u, 0, 0), Vec3(-u, 0, 0)}, g, 0.5 * u);
    CoilSet coils;
    coils.c = Eigen::MatrixXcd(n, 2);
    for (int i = 0; i < n; ++i) {
        double x = g.node(0, i) / g.L[0];
        coils.c(i, 0) = 1.0 + 0.4 * std::cos(2.0 * M_PI * x);
        coils.c(i, 1) = 1.0 + 0.4 * std::cos(2.0 * M_PI * x + 2.0 * M_PI / 3.0);
    }

    SpectralCertificate cert = certify_uniqueness(
        g, c, m, Vec3(1e-6, 0, 0), neumann(), X, coils, 0.3, 0.7, 3);
    CHECK(cert.spacetime_sep);
    CHECK(cert.assmperp);
    CHECK(cert.det_ell);
    CHECK(cert.muIell);
    CHECK(cert.sigma_min > 1e-8);
    CHECK(cert.pass);
    CHECK(cert.lambda_perp.size() == 3);
    CHECK(cert.lambda_z.size() == 3);
    CHECK(cert.det_values.size() == cert.lambda_z.size());

    // a still gradient cannot separate points: certificate must not pass
    SpectralCertificate flat = certify_uniqueness(g, c, m, Vec3::Zero(), neumann(),
                                                  X, coils, 0.3, 0.7, 3);
    CHECK_FALSE(flat.spacetime_sep);
    CHECK_FALSE(flat.pass);
}

} // TEST_SUITE
