#include <doctest.h>

#include <cmath>
#include <complex>
#include <vector>

#include "bt/measure.h"

using namespace bt;

namespace {

Grid grid1d(int n, double L = 1.0) { return Grid::make(1, {n, 1, 1}, {L, 1.0, 1.0}); }

MagState state_with(const Grid& g, double t, cd scale) {
    MagState s = MagState::zero(g.size(), t);
    for (int i = 0; i < g.size(); ++i) {
        s.Mperp(i) = scale * cd(std::cos(2.0 * M_PI * g.node(0, i)),
                                std::sin(2.0 * M_PI * g.node(0, i)));
        s.Mminus(i) = std::conj(s.Mperp(i));
        s.mz(i) = 0.3 * scale;
    }
    return s;
}

} // namespace

TEST_SUITE("measure") {

TEST_CASE("constant coil factory fills columns and survives validation") {
    const Grid g = grid1d(6);
    VecXcd vals(2);
    vals << cd(1.0, 0.0), cd(0.5, -0.25);
    CoilSet cs = CoilSet::constant(g, vals);
    CHECK(cs.ncoils() == 2);
    CHECK(cs.constant_coils);
    REQUIRE(cs.c.rows() == g.size());
    for (int i = 0; i < g.size(); ++i) {
        CHECK(cs.c(i, 0) == vals(0));
        CHECK(cs.c(i, 1) == vals(1));
    }
    CHECK_NOTHROW(cs.validate(g));

    CoilSet bad;
    bad.c = Eigen::MatrixXcd::Ones(g.size() - 1, 1);
    CHECK_THROWS_AS(bad.validate(g), ConfigError);
    CoilSet none;
    none.c = Eigen::MatrixXcd(g.size(), 0);
    CHECK_THROWS_AS(none.validate(g), ConfigError);
}

TEST_CASE("coil samples are conjugate-weighted sums times the cell volume") {
    const Grid g = grid1d(4, 0.02);
    Eigen::MatrixXcd c(4, 2);
    c << cd(1.0, 0.2), cd(0.3, -0.1), //
        cd(0.8, -0.4), cd(0.0, 0.5),  //
        cd(0.2, 0.0), cd(1.1, 0.3),   //
        cd(-0.5, 0.6), cd(0.4, 0.4);
    CoilSet coils;
    coils.c = c;

    std::vector<MagState> traj{state_with(g, 0.0, cd(1.0, 0.0)),
                               state_with(g, 0.1, cd(0.2, 0.5))};
    std::vector<double> clock{0.0, 0.05, 0.1};
    Measurement m = observe(traj, coils, g, clock);
    REQUIRE(m.nsamples() == 3);
    REQUIRE(m.ncoils() == 2);
    CHECK_NOTHROW(m.validate());

    for (int k = 0; k < 3; ++k) {
        const double w = (clock[k] - 0.0) / 0.1; // linear blend of the two states
        for (int j = 0; j < 2; ++j) {
            cd want(0.0, 0.0);
            for (int r = 0; r < 4; ++r) {
                cd mp = (1.0 - w) * traj[0].Mperp(r) + w * traj[1].Mperp(r);
                want += std::conj(c(r, j)) * mp * g.cellvol();
            }
            CHECK(std::abs(m.y(k, j) - want) < 1e-15);
        }
    }
}

TEST_CASE("observe rejects clocks outside the trajectory span") {
    const Grid g = grid1d(4);
    CoilSet coils = CoilSet::constant(g, VecXcd::Ones(1));
    std::vector<MagState> traj{state_with(g, 0.0, cd(1, 0)), state_with(g, 0.1, cd(1, 0))};
    CHECK_THROWS_AS(observe(traj, coils, g, {0.05, 0.2}), ConfigError);
    CHECK_THROWS_AS(observe({}, coils, g, {0.0}), ConfigError);
}

TEST_CASE("demodulation rewinds the reference decay and twists by i") {
    Measurement m;
    m.times = {0.3, 0.35, 0.4};
    m.y = Eigen::MatrixXcd(3, 1);
    m.y << cd(0.2, -0.1), cd(0.05, 0.15), cd(-0.3, 0.02);

    const cd R2ref(9.0, 1.5);
    const double t0 = 0.3;
    Eigen::MatrixXcd d = demodulate(m, R2ref, t0, +1);
    for (int k = 0; k < 3; ++k) {
        cd want = cd(0.0, 1.0) * std::exp(R2ref * (m.times[k] - t0)) * m.y(k, 0);
        CHECK(std::abs(d(k, 0) - want) < 1e-15);
    }
    Eigen::MatrixXcd dm = demodulate(m, R2ref, t0, -1);
    CHECK(std::abs(dm(1, 0) + d(1, 0)) < 1e-15);
    CHECK_THROWS_AS(demodulate(m, R2ref, t0, 2), ConfigError);
}

TEST_CASE("noise is reproducible under the seed and scales as sigma") {
    Measurement base;
    const int T = 1500, J = 2;
    base.times.resize(T);
    for (int k = 0; k < T; ++k) base.times[k] = 0.01 * k;
    base.y = Eigen::MatrixXcd::Zero(T, J);

    const double sigma = 0.5;
    Measurement a = add_noise(base, sigma, 42);
    Measurement b = add_noise(base, sigma, 42);
    Measurement c = add_noise(base, sigma, 43);
    CHECK((a.y - b.y).cwiseAbs().maxCoeff() == 0.0);
    CHECK((a.y - c.y).cwiseAbs().maxCoeff() > 0.0);
    CHECK(a.sigma == sigma);
    CHECK(a.seed == 42);

    // E|z|^2 = sigma^2 within sampling error over 3000 draws
    const double mean_sq = a.y.cwiseAbs2().mean();
    CHECK(mean_sq == doctest::Approx(sigma * sigma).epsilon(0.08));

    Measurement clean = add_noise(base, 0.0, 7);
    CHECK(clean.y.cwiseAbs().maxCoeff() == 0.0);
    CHECK_THROWS_AS(add_noise(base, -1.0, 7), ConfigError);
}

TEST_CASE("measurement validation names the defect") {
    Measurement m;
    m.times = {0.0, 0.1};
    m.y = Eigen::MatrixXcd::Zero(3, 1);
    CHECK_THROWS_AS(m.validate(), ConfigError);
    m.times = {0.0, 0.1, 0.05};
    CHECK_THROWS_AS(m.validate(), ConfigError);
    m.times = {0.0, 0.1, 0.2};
    CHECK_NOTHROW(m.validate());
}

} // TEST_SUITE
