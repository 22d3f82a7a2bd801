#include "bt/kspace.h"

#include <algorithm>
#include <cmath>

#include "bt/errors.h"

namespace bt {

namespace {
const cd I(0.0, 1.0);
}

void ConstCoeffs::validate() const {
    if (!(R10 > 0.0)) throw ConfigError("ConstCoeffs: R10 must be > 0");
    if (!(R20star.real() > 0.0)) throw ConfigError("ConstCoeffs: Re R20star must be > 0");
    Eigen::SelfAdjointEigenSolver<Mat3> es(D0);
    if (es.eigenvalues().minCoeff() < -1e-12 * (1.0 + D0.norm()))
        throw ConfigError("ConstCoeffs: D0 must be positive semidefinite");
}

ConstCoeffs const_coeffs_from(const CoeffFields& c, const ModelParams& m,
                              const Grid& g) {
    auto span_ok = [](double lo, double hi) {
        return hi - lo <= 1e-12 * (1.0 + std::max(std::abs(lo), std::abs(hi)));
    };
    if (!span_ok(c.R1.minCoeff(), c.R1.maxCoeff()))
        throw ConfigError("const_coeffs_from: spatially varying R1 unsupported here");
    const VecXd re = c.R2star.real(), im = c.R2star.imag();
    if (!span_ok(re.minCoeff(), re.maxCoeff()) || !span_ok(im.minCoeff(), im.maxCoeff()))
        throw ConfigError("const_coeffs_from: spatially varying R2star unsupported here");
    if (!m.constant_D())
        throw ConfigError("const_coeffs_from: spatially varying D unsupported here");
    if (!m.constant_v())
        throw ConfigError("const_coeffs_from: spatially varying v unsupported here");
    (void)g;
    ConstCoeffs cc;
    cc.R10 = c.R1(0);
    cc.R20star = c.R2star(0);
    cc.D0 = m.D0;
    cc.v0 = m.v0;
    cc.cplus0 = m.cplus0;
    cc.validate();
    return cc;
}

VecXcd dft_grid(const VecXcd& x, const Grid& g) {
    const int n = g.size();
    if (static_cast<int>(x.size()) != n)
        throw ConfigError("dft_grid: field size does not match grid");
    const double vol = g.cellvol();
    VecXcd out(n);
    for (int m = 0; m < n; ++m) {
        const Vec3 xi = g.freq_vec(m);
        cd acc(0.0, 0.0);
        for (int r = 0; r < n; ++r)
            acc += x(r) * std::exp(-2.0 * M_PI * I * xi.dot(g.coords(r)));
        out(m) = acc * vol;
    }
    return out;
}

VecXcd dft_grid(const VecXd& x, const Grid& g) { return dft_grid(VecXcd(x.cast<cd>()), g); }

VecXcd idft_grid(const VecXcd& xhat, const Grid& g) {
    const int n = g.size();
    if (static_cast<int>(xhat.size()) != n)
        throw ConfigError("idft_grid: field size does not match grid");
    const double vol = g.volume();
    VecXcd out(n);
    for (int r = 0; r < n; ++r) {
        const Vec3 pos = g.coords(r);
        cd acc(0.0, 0.0);
        for (int m = 0; m < n; ++m)
            acc += xhat(m) * std::exp(2.0 * M_PI * I * g.freq_vec(m).dot(pos));
        out(r) = acc / vol;
    }
    return out;
}

cd dft_at(const VecXcd& x, const Grid& g, const Vec3& xi) {
    const int n = g.size();
    if (static_cast<int>(x.size()) != n)
        throw ConfigError("dft_at: field size does not match grid");
    const double vol = g.cellvol();
    cd acc(0.0, 0.0);
    for (int r = 0; r < n; ++r)
        acc += x(r) * std::exp(-2.0 * M_PI * I * xi.dot(g.coords(r)));
    return acc * vol;
}

cd q_symbol(const Vec3& xi, const Mat3& D0, const Vec3& v0) {
    return cd(4.0 * M_PI * M_PI * xi.dot(D0 * xi), 2.0 * M_PI * v0.dot(xi));
}

cd dephase_integral(const Vec3& w, const Vec3& s, double Delta, const Mat3& D0,
                    const Vec3& v0) {
    // int_0^Delta [4pi^2 (w - s d).D0 (w - s d) + 2pi i v0.(w - s d)] dd
    const double wDw = w.dot(D0 * w);
    const double wDs = w.dot(D0 * s);
    const double sDs = s.dot(D0 * s);
    const double re = 4.0 * M_PI * M_PI *
                      (wDw * Delta - wDs * Delta * Delta +
                       sDs * Delta * Delta * Delta / 3.0);
    const double im =
        2.0 * M_PI * (v0.dot(w) * Delta - 0.5 * v0.dot(s) * Delta * Delta);
    return cd(re, im);
}

cd Ltau_symbol(cd lambda, double R10, double tau) {
    const cd e = std::exp(-lambda * tau);
    // (R10/lambda)(1 - e^{-lambda tau}) stabilized through phi1 near lambda=0
    return R10 * tau * phi1(-lambda * tau) - e;
}

KState KState::equilibrium(const VecXcd& Meq_hat, double t) {
    KState ks;
    ks.t = t;
    const int n = static_cast<int>(Meq_hat.size());
    ks.Mphat = VecXcd::Zero(n);
    ks.Mmhat = VecXcd::Zero(n);
    ks.mzhat = Meq_hat;
    return ks;
}

MagState kstate_to_magstate(const KState& ks, const Grid& g) {
    MagState s;
    s.t = ks.t;
    s.Mperp = idft_grid(ks.Mphat, g);
    s.Mminus = idft_grid(ks.Mmhat, g);
    s.mz = idft_grid(ks.mzhat, g);
    return s;
}

namespace {

// one maximal gradient-on/off stretch with no pulses: start state on the
// lattice plus its spatial representation for off-lattice evaluations
struct FreeRun {
    double t0 = 0.0;
    Vec3 k0 = Vec3::Zero();
    VecXcd sp, sm;  // spatial representations of Mphat, Mmhat at t0
    VecXcd mz0;     // lattice longitudinal state at t0
    // completed constant-G pieces since t0: (start, end, slew s = gamma/2pi g)
    std::vector<std::array<double, 2>> piece_t;
    std::vector<Vec3> piece_k0;
    std::vector<Vec3> piece_s;
};

// sum of closed-form dephasing integrals for the transported exponent
// int_{t0}^{t} q(xi_target - k(sigma)) dsigma given pieces covering [t0, t]
cd run_dephase(const FreeRun& run, double t, const Vec3& xi_target,
               const Mat3& D0, const Vec3& v0) {
    cd acc(0.0, 0.0);
    for (size_t j = 0; j < run.piece_t.size(); ++j) {
        const double a = run.piece_t[j][0];
        const double b = std::min(run.piece_t[j][1], t);
        if (b <= a) break;
        const Vec3 w = xi_target - run.piece_k0[j];
        acc += dephase_integral(w, run.piece_s[j], b - a, D0, v0);
        if (b >= t) break;
    }
    return acc;
}

} // namespace

std::vector<KState> solve_kspace(const PulseSequence& seq, const ConstCoeffs& cc,
                                 const VecXcd& Meq_hat, const Grid& g, double gamma,
                                 const std::vector<double>& sample_times,
                                 const KState* init) {
    seq.validate();
    cc.validate();
    const int n = g.size();
    if (static_cast<int>(Meq_hat.size()) != n)
        throw ConfigError("solve_kspace: Meq_hat size does not match grid");
    for (size_t i = 0; i < sample_times.size(); ++i) {
        if (sample_times[i] < 0.0 || sample_times[i] > seq.T + 1e-12)
            throw ConfigError("solve_kspace: sample time outside [0, T]");
        if (i && sample_times[i] < sample_times[i - 1])
            throw ConfigError("solve_kspace: sample times must be sorted");
    }

    KState state = init ? *init : KState::equilibrium(Meq_hat, 0.0);

    // per-mode longitudinal decay rate
    VecXcd lambda(n);
    for (int m = 0; m < n; ++m)
        lambda(m) = q_symbol(g.freq_vec(m), cc.D0, cc.v0) + cc.R10;

    std::vector<KState> out;
    out.reserve(sample_times.size());
    size_t si = 0;
    while (si < sample_times.size() && sample_times[si] <= state.t + 1e-15) {
        KState snap = state;
        snap.t = sample_times[si];
        out.push_back(snap);
        ++si;
    }

    FreeRun run;
    bool in_run = false;
    auto start_run = [&](double t) {
        run.t0 = t;
        run.k0 = k_trajectory(seq.G, gamma, t);
        run.sp = idft_grid(state.Mphat, g);
        run.sm = idft_grid(state.Mmhat, g);
        run.mz0 = state.mzhat;
        run.piece_t.clear();
        run.piece_k0.clear();
        run.piece_s.clear();
        in_run = true;
    };

    // evaluate the run state at time t (> run.t0) onto the lattice
    auto eval_run = [&](double t) {
        KState ks;
        ks.t = t;
        ks.Mphat.resize(n);
        ks.Mmhat.resize(n);
        ks.mzhat.resize(n);
        const Vec3 kt = k_trajectory(seq.G, gamma, t);
        const double dt = t - run.t0;
        for (int m = 0; m < n; ++m) {
            const Vec3 xi = g.freq_vec(m);
            // transverse: characteristics shift with closed-form dephasing,
            // integrand q(xi + k(t) - k(sigma))
            const cd deph_p = run_dephase(run, t, xi + kt, cc.D0, cc.v0);
            const cd Ep = std::exp(-(deph_p + cc.R20star * dt));
            ks.Mphat(m) = Ep * dft_at(run.sp, g, xi + kt - run.k0);

            // the counter-rotating component shifts the opposite way:
            // integrand q(xi - k(t) + k(sigma)), per piece w - (-s) delta
            cd deph_m(0.0, 0.0);
            for (size_t j = 0; j < run.piece_t.size(); ++j) {
                const double a = run.piece_t[j][0];
                const double b = std::min(run.piece_t[j][1], t);
                if (b <= a) break;
                const Vec3 w = xi - kt + run.piece_k0[j];
                deph_m += dephase_integral(w, -run.piece_s[j], b - a, cc.D0, cc.v0);
                if (b >= t) break;
            }
            const cd Em = std::exp(-(deph_m + cc.R20star * dt));
            ks.Mmhat(m) = Em * dft_at(run.sm, g, xi - kt + run.k0);

            // longitudinal: diagonal decay towards the R10-forced profile
            const cd lam = lambda(m);
            ks.mzhat(m) = std::exp(-lam * dt) * run.mz0(m) +
                          cc.R10 * Meq_hat(m) * dt * phi1(-lam * dt);
        }
        return ks;
    };

    for (const auto& seg : seq.segments()) {
        if (state.t >= seg.t1 - 1e-15) continue;
        if (!seg.is_pulse) {
            if (!in_run) start_run(state.t);
            run.piece_t.push_back({seg.t0, seg.t1});
            run.piece_k0.push_back(k_trajectory(seq.G, gamma, seg.t0));
            run.piece_s.push_back((gamma / (2.0 * M_PI)) * seg.g);
            while (si < sample_times.size() && sample_times[si] <= seg.t1 + 1e-15) {
                out.push_back(eval_run(sample_times[si]));
                ++si;
            }
            state = eval_run(seg.t1);
        } else {
            in_run = false;
            // mode-wise coupled rotation; gradients vanish on pulses so the
            // shift is frozen and the 3x3 map is local in frequency
            auto pulse_to = [&](const KState& from, double dt) {
                KState ks = from;
                ks.t = from.t + dt;
                for (int m = 0; m < n; ++m) {
                    const cd a1 = lambda(m);
                    const cd a2 = q_symbol(g.freq_vec(m), cc.D0, cc.v0) + cc.R20star;
                    const cd b = gamma * cc.cplus0 * seg.amp;
                    const cd f = cc.R10 * Meq_hat(m);
                    const PulsePropagator pp = pulse_propagator(a1, a2, b, f, dt);
                    apply_propagator(pp, ks.Mphat(m), ks.Mmhat(m), ks.mzhat(m));
                }
                return ks;
            };
            while (si < sample_times.size() && sample_times[si] <= seg.t1 + 1e-15) {
                out.push_back(pulse_to(state, sample_times[si] - state.t));
                ++si;
            }
            state = pulse_to(state, seg.t1 - state.t);
        }
    }
    while (si < sample_times.size() && sample_times[si] <= seq.T + 1e-12) {
        KState snap = state;
        snap.t = sample_times[si];
        out.push_back(snap);
        ++si;
    }
    return out;
}

namespace {

// pieces of the gradient timeline between t_start and t: constant-G spans
struct GradPieces {
    std::vector<double> a, b;
    std::vector<Vec3> k0;
    std::vector<Vec3> s;
};

GradPieces grad_pieces(const PulseSequence& seq, double gamma, double t_start,
                       double t) {
    GradPieces gp;
    for (const auto& seg : seq.segments()) {
        const double a = std::max(seg.t0, t_start);
        const double b = std::min(seg.t1, t);
        if (b <= a + 1e-15) continue;
        gp.a.push_back(a);
        gp.b.push_back(b);
        gp.k0.push_back(k_trajectory(seq.G, gamma, a));
        gp.s.push_back((gamma / (2.0 * M_PI)) * seg.g);
    }
    return gp;
}

// exp(- int_{t_start}^{t} q(target - k(sigma)) dsigma - R20*(t - t_start))
cd transverse_decay(const GradPieces& gp, const Vec3& target, double t_start,
                    double t, const ConstCoeffs& cc) {
    cd deph(0.0, 0.0);
    for (size_t j = 0; j < gp.a.size(); ++j)
        deph += dephase_integral(target - gp.k0[j], gp.s[j], gp.b[j] - gp.a[j],
                                 cc.D0, cc.v0);
    return std::exp(-(deph + cc.R20star * (t - t_start)));
}

cd phihat_multiplier(cd lambda, double R10, double tau) {
    // [R10 - (q + 2 R10) e^{-lambda tau}] / lambda with lambda = q + R10
    const cd q = lambda - R10;
    return (R10 - (q + 2.0 * R10) * std::exp(-lambda * tau)) / lambda;
}

} // namespace

VecXcd kspace_explicit_state(const PulseSequence& seq, const ConstCoeffs& cc,
                             const VecXd& Meq, const Grid& g, double gamma,
                             double t) {
    seq.validate();
    cc.validate();
    const int n = g.size();
    if (static_cast<int>(Meq.size()) != n)
        throw ConfigError("kspace_explicit_state: Meq size does not match grid");
    const VecXcd meqc = Meq.cast<cd>();

    const double t_ref =
        seq.kind == SeqKind::Ninety ? seq.taup : seq.tau + 2.0 * seq.taup;
    if (t < t_ref - 1e-12)
        throw DomainError("kspace_explicit_state: t before the sequence threshold");

    const Vec3 kt = k_trajectory(seq.G, gamma, t);
    const Vec3 kref = k_trajectory(seq.G, gamma, t_ref);
    const GradPieces gp = grad_pieces(seq, gamma, t_ref, t);

    VecXcd out(n);
    for (int m = 0; m < n; ++m) {
        const Vec3 xi = g.freq_vec(m);
        const Vec3 eta = xi + kt - kref;
        const cd E = transverse_decay(gp, xi + kt, t_ref, t, cc);
        cd seed = dft_at(meqc, g, eta);
        if (seq.kind == SeqKind::OneEightyTauNinety) {
            const cd lam = q_symbol(eta, cc.D0, cc.v0) + cc.R10;
            seed *= phihat_multiplier(lam, cc.R10, seq.tau);
        }
        out(m) = -I * E * seed;
    }
    return out;
}

Eigen::MatrixXcd kspace_jacobian(const PulseSequence& seq, const ConstCoeffs& cc,
                                 const VecXd& Meq_ref, const CoeffFields& dx,
                                 const Grid& g, double gamma, const VecXcd& coil0,
                                 const std::vector<double>& times) {
    seq.validate();
    cc.validate();
    const int n = g.size();
    if (static_cast<int>(Meq_ref.size()) != n || static_cast<int>(dx.Meq.size()) != n)
        throw ConfigError("kspace_jacobian: field sizes do not match grid");
    const int J = static_cast<int>(coil0.size());
    const int T = static_cast<int>(times.size());
    const VecXcd meqc = Meq_ref.cast<cd>();
    const VecXcd dmeq = dx.Meq.cast<cd>();
    const VecXcd dr1 = dx.R1.cast<cd>();
    const VecXcd dr2 = dx.R2star;

    const double t_ref =
        seq.kind == SeqKind::Ninety ? seq.taup : seq.tau + 2.0 * seq.taup;
    const Vec3 kref = k_trajectory(seq.G, gamma, t_ref);

    // reference transported transverse field at a given time (spatial form,
    // thin-pulse closed form), used inside the Duhamel relaxation-rate term
    auto Mperp_ref_spatial = [&](double a) {
        VecXcd hat(n);
        const Vec3 ka = k_trajectory(seq.G, gamma, a);
        const GradPieces gpa = grad_pieces(seq, gamma, t_ref, a);
        for (int m = 0; m < n; ++m) {
            const Vec3 xi = g.freq_vec(m);
            const Vec3 eta = xi + ka - kref;
            const cd E = transverse_decay(gpa, xi + ka, t_ref, a, cc);
            cd seed = dft_at(meqc, g, eta);
            if (seq.kind == SeqKind::OneEightyTauNinety) {
                const cd lam = q_symbol(eta, cc.D0, cc.v0) + cc.R10;
                seed *= phihat_multiplier(lam, cc.R10, seq.tau);
            }
            hat(m) = -I * E * seed;
        }
        return idft_grid(hat, g);
    };

    // per-mode longitudinal rates for the inversion-interval convolution
    VecXcd lam_modes(n);
    for (int m = 0; m < n; ++m)
        lam_modes(m) = q_symbol(g.freq_vec(m), cc.D0, cc.v0) + cc.R10;
    const VecXcd meq_hat = dft_grid(Meq_ref, g);

    std::vector<double> gx, gw;
    gauss_legendre(16, gx, gw);

    Eigen::MatrixXcd out(T, J);
    for (int ti = 0; ti < T; ++ti) {
        const double t = times[ti];
        if (t < t_ref - 1e-12)
            throw DomainError("kspace_jacobian: sample time before the threshold");
        const Vec3 kt = k_trajectory(seq.G, gamma, t);
        const Vec3 eta = kt - kref;
        const GradPieces gpt = grad_pieces(seq, gamma, t_ref, t);
        const cd E_full = transverse_decay(gpt, kt, t_ref, t, cc);

        // direct equilibrium term (and, for the inversion sequence, the
        // longitudinal-interval terms folded into the bracket)
        cd bracket;
        if (seq.kind == SeqKind::Ninety) {
            bracket = dft_at(dmeq, g, eta);
        } else {
            const cd lam_eta = q_symbol(eta, cc.D0, cc.v0) + cc.R10;
            bracket = Ltau_symbol(lam_eta, cc.R10, seq.tau) * dft_at(dmeq, g, eta);
            // relaxation-rate sensitivity of the inverted longitudinal state:
            // - sum_zeta dR1hat(eta - zeta) Meq_hat(zeta) K(lam_eta, lam_zeta)
            // realized as a spatial product against an eta-dependent kernel
            VecXcd Gker(n);
            const cd e_eta = std::exp(-lam_eta * seq.tau);
            for (int m = 0; m < n; ++m) {
                const cd lz = lam_modes(m);
                const cd piece1 =
                    (cc.R10 / lz - 1.0) * seq.tau * phi1(-lam_eta * seq.tau);
                const cd diff = lam_eta - lz;
                cd piece2;
                if (std::abs(diff) * seq.tau < 1e-8)
                    piece2 = (cc.R10 / lz + 1.0) * seq.tau * std::exp(-lz * seq.tau) *
                             phi1(-diff * seq.tau);
                else
                    piece2 = (cc.R10 / lz + 1.0) *
                             (std::exp(-lz * seq.tau) - e_eta) / diff;
                Gker(m) = meq_hat(m) * (piece1 - piece2);
            }
            const VecXcd Gsp = idft_grid(Gker, g);
            bracket -= dft_at(VecXcd(dr1.array() * Gsp.array()), g, eta);
        }
        cd val = -I * E_full * bracket;

        // transverse relaxation-rate term: Duhamel over the readout interval,
        // Gauss-Legendre per constant-gradient span
        for (const auto& seg : seq.segments()) {
            const double a0 = std::max(seg.t0, t_ref);
            const double b0 = std::min(seg.t1, t);
            if (b0 <= a0 + 1e-15) continue;
            for (size_t k = 0; k < gx.size(); ++k) {
                const double a = 0.5 * (a0 + b0) + 0.5 * (b0 - a0) * gx[k];
                const double w = 0.5 * (b0 - a0) * gw[k];
                const Vec3 ka = k_trajectory(seq.G, gamma, a);
                const GradPieces gpat = grad_pieces(seq, gamma, a, t);
                const cd Eat = transverse_decay(gpat, kt, a, t, cc);
                const VecXcd mref = Mperp_ref_spatial(a);
                const cd src =
                    dft_at(VecXcd(-dr2.array() * mref.array()), g, kt - ka);
                val += w * Eat * src;
            }
        }

        // the measurement weights by conjugated sensitivities, as observe does
        for (int j = 0; j < J; ++j) out(ti, j) = std::conj(coil0(j)) * val;
    }
    return out;
}

} // namespace bt
