#include "bt/measure.h"

#include <algorithm>
#include <cmath>
#include <random>

#include "bt/errors.h"

namespace bt {

CoilSet CoilSet::constant(const Grid& g, const VecXcd& vals) {
    CoilSet cs;
    const int n = g.size();
    const int J = static_cast<int>(vals.size());
    cs.c.resize(n, J);
    for (int j = 0; j < J; ++j) cs.c.col(j).setConstant(vals(j));
    cs.constant_coils = true;
    cs.c0 = vals;
    return cs;
}

void CoilSet::validate(const Grid& g) const {
    if (c.cols() < 1) throw ConfigError("CoilSet: need at least one coil");
    if (c.rows() != g.size())
        throw ConfigError("CoilSet: sensitivity rows do not match grid size");
    if (!c.allFinite()) throw ConfigError("CoilSet: non-finite sensitivity value");
    if (constant_coils && c0.size() != c.cols())
        throw ConfigError("CoilSet: constant_coils set but c0 size mismatches");
}

void Measurement::validate() const {
    if (static_cast<int>(times.size()) != y.rows())
        throw ConfigError("Measurement: clock length does not match rows");
    if (!y.allFinite()) throw ConfigError("Measurement: non-finite sample");
    for (size_t i = 1; i < times.size(); ++i)
        if (times[i] <= times[i - 1])
            throw ConfigError("Measurement: clock must be strictly increasing");
}

Measurement observe(const std::vector<MagState>& traj, const CoilSet& coils,
                    const Grid& g, const std::vector<double>& clock) {
    coils.validate(g);
    if (traj.empty()) throw ConfigError("observe: empty trajectory");
    for (size_t i = 1; i < traj.size(); ++i)
        if (traj[i].t < traj[i - 1].t)
            throw ConfigError("observe: trajectory times must be sorted");

    const double t0 = traj.front().t, t1 = traj.back().t;
    const int J = coils.ncoils();
    const int T = static_cast<int>(clock.size());
    const double vol = g.cellvol();

    Measurement m;
    m.times = clock;
    m.y.resize(T, J);

    // per-state coil projections, computed lazily
    std::vector<char> have(traj.size(), 0);
    Eigen::MatrixXcd proj(traj.size(), J);
    auto project = [&](size_t idx) -> Eigen::RowVectorXcd {
        if (!have[idx]) {
            proj.row(idx) = (coils.c.adjoint() * traj[idx].Mperp).transpose() * vol;
            have[idx] = 1;
        }
        return proj.row(idx);
    };

    for (int ti = 0; ti < T; ++ti) {
        const double t = clock[ti];
        if (t < t0 - 1e-12 || t > t1 + 1e-12)
            throw ConfigError("observe: clock time outside trajectory span");
        // bracket t in the trajectory
        auto it = std::lower_bound(traj.begin(), traj.end(), t,
                                   [](const MagState& s, double v) { return s.t < v; });
        size_t hi = std::min<size_t>(it - traj.begin(), traj.size() - 1);
        size_t lo = hi > 0 ? hi - 1 : 0;
        if (std::abs(traj[hi].t - t) <= 1e-12 || hi == lo) {
            m.y.row(ti) = project(hi);
        } else if (std::abs(traj[lo].t - t) <= 1e-12) {
            m.y.row(ti) = project(lo);
        } else {
            const double w = (t - traj[lo].t) / (traj[hi].t - traj[lo].t);
            m.y.row(ti) = (1.0 - w) * project(lo) + w * project(hi);
        }
    }
    return m;
}

Eigen::MatrixXcd demodulate(const Measurement& y, cd R2ref, double t_offset,
                            int sign) {
    if (sign != 1 && sign != -1) throw ConfigError("demodulate: sign must be +1 or -1");
    const cd I(0.0, 1.0);
    Eigen::MatrixXcd out = y.y;
    for (int ti = 0; ti < out.rows(); ++ti) {
        const cd factor =
            static_cast<double>(sign) * I * std::exp(R2ref * (y.times[ti] - t_offset));
        out.row(ti) *= factor;
    }
    return out;
}

Measurement add_noise(const Measurement& y, double sigma, std::uint64_t seed) {
    if (sigma < 0.0) throw ConfigError("add_noise: sigma must be >= 0");
    Measurement out = y;
    out.sigma = sigma;
    out.seed = seed;
    if (sigma == 0.0) return out;
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> gauss(0.0, sigma / std::sqrt(2.0));
    for (int ti = 0; ti < out.y.rows(); ++ti)
        for (int j = 0; j < out.y.cols(); ++j)
            out.y(ti, j) += cd(gauss(rng), gauss(rng));
    return out;
}

} // namespace bt
