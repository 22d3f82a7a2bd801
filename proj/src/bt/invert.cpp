#include "bt/invert.h"

#include <algorithm>
#include <cmath>
#include <complex>
#include <sstream>

#include <Eigen/Dense>

#include "bt/errors.h"

namespace bt {

std::string engine_name(Engine e) {
    switch (e) {
        case Engine::BlochExact: return "bloch-exact";
        case Engine::BlochNumeric: return "bloch-numeric";
        case Engine::TorreyFD: return "torrey-fd";
        case Engine::KspaceConst: return "kspace-const";
        case Engine::ExplicitForm: return "explicit-form";
    }
    return "unknown";
}

Engine engine_from_name(const std::string& s) {
    if (s == "bloch-exact") return Engine::BlochExact;
    if (s == "bloch-numeric") return Engine::BlochNumeric;
    if (s == "torrey-fd") return Engine::TorreyFD;
    if (s == "kspace-const") return Engine::KspaceConst;
    if (s == "explicit-form") return Engine::ExplicitForm;
    throw ConfigError("unknown engine '" + s + "'");
}

void ForwardConfig::validate() const {
    if (grid.size() <= 0) throw ConfigError("forward config: empty grid");
    if (seqs[0].kind != SeqKind::Ninety)
        throw ConfigError("forward config: first sequence must be 90-degree");
    for (int s = 1; s < 3; ++s)
        if (seqs[s].kind != SeqKind::OneEightyTauNinety)
            throw ConfigError(
                "forward config: sequences II/III must be inversion-recovery");
    if (!(tau1() > 0.0 && tau1() < tau2()))
        throw ConfigError("forward config: requires 0 < tau1 < tau2");
    for (const auto& s : seqs) s.validate();
    if (seqs[0].taup != seqs[1].taup || seqs[0].taup != seqs[2].taup)
        throw ConfigError("forward config: sequences must share taup");
    for (int s = 1; s < 3; ++s)
        if (seqs[s].G.knots != seqs[0].G.knots ||
            seqs[s].G.values.size() != seqs[0].G.values.size())
            throw ConfigError(
                "forward config: sequences must share the gradient timeline");
    if (clock.empty()) throw ConfigError("forward config: empty sample clock");
    double t0 = clock.front();
    for (std::size_t i = 1; i < clock.size(); ++i)
        if (!(clock[i] > clock[i - 1]))
            throw ConfigError("forward config: clock must be increasing");
    for (const auto& s : seqs) {
        if (t0 < s.readout_start - 1e-12)
            throw ConfigError("forward config: clock starts before readout");
        if (clock.back() > s.T + 1e-12)
            throw ConfigError("forward config: clock extends past the sequence");
    }
    coils.validate(grid);
    model.validate(grid);
    if (reduced && frozen_R2star.size() != grid.size())
        throw ConfigError(
            "forward config: reduced mode needs a frozen R2* field on the grid");
}

VecXcd StackedSeries::flat() const {
    const Eigen::Index T = y[0].rows(), J = y[0].cols();
    VecXcd out(3 * T * J);
    Eigen::Index p = 0;
    for (int s = 0; s < 3; ++s)
        for (Eigen::Index i = 0; i < T; ++i)
            for (Eigen::Index j = 0; j < J; ++j) out(p++) = y[s](i, j);
    return out;
}

StackedSeries StackedSeries::operator-(const StackedSeries& o) const {
    StackedSeries r;
    r.clock = clock;
    for (int s = 0; s < 3; ++s) r.y[s] = y[s] - o.y[s];
    return r;
}

namespace {

const char* kSeqTag[3] = {"sequence I: ", "sequence II: ", "sequence III: "};

template <typename F>
auto run_tagged(const char* tag, F&& f) -> decltype(f()) {
    try {
        return f();
    } catch (const ConfigError& e) {
        throw ConfigError(std::string(tag) + e.what());
    } catch (const DomainError& e) {
        throw DomainError(std::string(tag) + e.what());
    } catch (const NumericsError& e) {
        throw NumericsError(std::string(tag) + e.what());
    }
}

VecXcd cplus_field(const ModelParams& m, const Grid& g) {
    if (m.cplus.size()) return m.cplus;
    return VecXcd::Constant(g.size(), m.cplus0);
}

CoeffFields with_frozen(const CoeffFields& x, const ForwardConfig& cfg) {
    if (!cfg.reduced) return x;
    CoeffFields xe = x;
    xe.R2star = cfg.frozen_R2star;
    return xe;
}

std::vector<MagState> explicit_traj(const PulseSequence& seq,
                                    const CoeffFields& c, const Grid& g,
                                    double gamma,
                                    const std::vector<double>& clock) {
    std::vector<MagState> traj;
    traj.reserve(clock.size());
    for (double t : clock) {
        MagState st;
        st.t = t;
        st.Mperp = explicit_state(seq, c, g, gamma, t);
        st.Mminus = st.Mperp.conjugate();
        st.mz = VecXcd::Zero(g.size());
        traj.push_back(std::move(st));
    }
    return traj;
}

Eigen::MatrixXcd forward_one(const PulseSequence& seq, const CoeffFields& xe,
                             const ForwardConfig& cfg) {
    const Grid& g = cfg.grid;
    switch (cfg.engine) {
        case Engine::BlochExact:
        case Engine::BlochNumeric: {
            BlochOptions opt = cfg.bloch;
            opt.mode = cfg.engine == Engine::BlochExact ? BlochMode::ExactPiecewise
                                                        : BlochMode::Numeric;
            auto traj = solve_bloch(seq, xe, cplus_field(cfg.model, g), g,
                                    cfg.gamma, opt, cfg.clock);
            return observe(traj, cfg.coils, g, cfg.clock).y;
        }
        case Engine::TorreyFD: {
            auto R = solve_bt(seq, xe, cfg.model, cfg.bc, TorreySource{}, g,
                              cfg.gamma, cfg.torrey_dt, cfg.clock.back());
            return observe(R.states, cfg.coils, g, cfg.clock).y;
        }
        case Engine::KspaceConst: {
            ConstCoeffs cc = const_coeffs_from(xe, cfg.model, g);
            VecXcd meq_hat = dft_grid(xe.Meq, g);
            auto ks = solve_kspace(seq, cc, meq_hat, g, cfg.gamma, cfg.clock);
            std::vector<MagState> traj;
            traj.reserve(ks.size());
            for (const auto& k : ks) traj.push_back(kstate_to_magstate(k, g));
            return observe(traj, cfg.coils, g, cfg.clock).y;
        }
        case Engine::ExplicitForm: {
            auto traj = explicit_traj(seq, xe, g, cfg.gamma, cfg.clock);
            return observe(traj, cfg.coils, g, cfg.clock).y;
        }
    }
    throw ConfigError("forward_F: unhandled engine");
}

// closed-form derivative of the explicit (thin-pulse) forward map
Eigen::MatrixXcd explicit_jacobian_one(const PulseSequence& seq,
                                       const CoeffFields& xr,
                                       const CoeffFields& dx,
                                       const ForwardConfig& cfg) {
    const Grid& g = cfg.grid;
    const int n = g.size();
    const int T = static_cast<int>(cfg.clock.size());
    const int J = cfg.coils.ncoils();
    const double tref = seq.t_offset();
    const Vec3 kref = k_trajectory(seq.G, cfg.gamma, tref);

    VecXcd base = VecXcd::Zero(n), dbase = VecXcd::Zero(n);
    if (seq.kind == SeqKind::Ninety) {
        for (int i = 0; i < n; ++i) {
            base(i) = xr.Meq(i);
            dbase(i) = dx.Meq(i);
        }
    } else {
        for (int i = 0; i < n; ++i) {
            double e = std::exp(-xr.R1(i) * seq.tau);
            base(i) = (1.0 - 2.0 * e) * xr.Meq(i);
            dbase(i) = (1.0 - 2.0 * e) * dx.Meq(i) +
                       2.0 * seq.tau * e * xr.Meq(i) * dx.R1(i);
        }
    }

    Eigen::MatrixXcd out(T, J);
    for (int ti = 0; ti < T; ++ti) {
        double t = cfg.clock[ti];
        double dt = t - tref;
        Vec3 shift = k_trajectory(seq.G, cfg.gamma, t) - kref;
        VecXcd field(n);
        for (int i = 0; i < n; ++i) {
            cd E = std::exp(-xr.R2star(i) * dt);
            field(i) = E * (dbase(i) - dt * dx.R2star(i) * base(i));
        }
        for (int j = 0; j < J; ++j) {
            VecXcd wf = cfg.coils.c.col(j).conjugate().cwiseProduct(field);
            out(ti, j) = cd(0.0, -1.0) * dft_at(wf, g, shift);
        }
    }
    return out;
}

Eigen::MatrixXcd jacobian_one(const PulseSequence& seq, const CoeffFields& xr,
                              const CoeffFields& dxe, const ForwardConfig& cfg) {
    const Grid& g = cfg.grid;
    switch (cfg.engine) {
        case Engine::BlochExact:
        case Engine::BlochNumeric: {
            auto traj = solve_bloch_linearized(seq, xr, dxe,
                                               cplus_field(cfg.model, g), g,
                                               cfg.gamma, cfg.clock);
            return observe(traj, cfg.coils, g, cfg.clock).y;
        }
        case Engine::TorreyFD: {
            auto ref = solve_bt(seq, xr, cfg.model, cfg.bc, TorreySource{}, g,
                                cfg.gamma, cfg.torrey_dt, cfg.clock.back());
            TorreySource src = frechet_source(ref, xr, dxe);
            CoeffFields clin = xr;
            clin.Meq = VecXd::Zero(g.size()); // keep rates, drop the
                                              // equilibrium forcing: it is
                                              // carried by the source term
            MagState dm0;
            dm0.t = 0.0;
            dm0.Mperp = VecXcd::Zero(g.size());
            dm0.Mminus = VecXcd::Zero(g.size());
            dm0.mz = dxe.Meq.cast<cd>();
            auto lin = solve_bt(seq, clin, cfg.model, cfg.bc, src, g, cfg.gamma,
                                cfg.torrey_dt, cfg.clock.back(), &dm0);
            return observe(lin.states, cfg.coils, g, cfg.clock).y;
        }
        case Engine::KspaceConst: {
            if (!cfg.coils.constant_coils)
                throw ConfigError(
                    "jacobian_apply: constant-coefficient engine needs "
                    "constant coils");
            ConstCoeffs cc = const_coeffs_from(xr, cfg.model, g);
            return kspace_jacobian(seq, cc, xr.Meq, dxe, g, cfg.gamma,
                                   cfg.coils.c0, cfg.clock);
        }
        case Engine::ExplicitForm:
            return explicit_jacobian_one(seq, xr, dxe, cfg);
    }
    throw ConfigError("jacobian_apply: unhandled engine");
}

} // namespace

StackedSeries forward_F(const CoeffFields& x, const ForwardConfig& cfg) {
    cfg.validate();
    CoeffFields xe = with_frozen(x, cfg);
    xe.validate(cfg.grid);
    StackedSeries out;
    out.clock = cfg.clock;
    for (int s = 0; s < 3; ++s)
        out.y[s] = run_tagged(kSeqTag[s],
                              [&] { return forward_one(cfg.seqs[s], xe, cfg); });
    return out;
}

StackedSeries jacobian_apply(const CoeffFields& x_ref, const CoeffFields& dx,
                             const ForwardConfig& cfg) {
    cfg.validate();
    CoeffFields xr = with_frozen(x_ref, cfg);
    xr.validate(cfg.grid);
    CoeffFields dxe = dx;
    if (cfg.reduced) dxe.R2star = VecXcd::Zero(cfg.grid.size());
    StackedSeries out;
    out.clock = cfg.clock;
    for (int s = 0; s < 3; ++s)
        out.y[s] = run_tagged(
            kSeqTag[s], [&] { return jacobian_one(cfg.seqs[s], xr, dxe, cfg); });
    return out;
}

namespace {

double comb_weight(double tau, double R1ref, double taup) {
    return std::exp(R1ref * tau) * (1.0 - 2.0 * std::exp(-R1ref * tau)) *
           (1.0 + taup / tau);
}

} // namespace

EliminatedSeries eliminate_linear(const Eigen::MatrixXcd& dyI,
                                  const Eigen::MatrixXcd& dyII,
                                  const Eigen::MatrixXcd& dyIII,
                                  const std::vector<double>& clock, cd R2ref,
                                  double R1ref, double tau1, double tau2,
                                  double taup) {
    if (!(tau1 > 0.0 && tau1 < tau2))
        throw ConfigError("eliminate_linear: requires 0 < tau1 < tau2");
    if (dyI.rows() != dyII.rows() || dyI.rows() != dyIII.rows() ||
        dyI.cols() != dyII.cols() || dyI.cols() != dyIII.cols())
        throw ConfigError("eliminate_linear: series shapes differ");
    if (static_cast<Eigen::Index>(clock.size()) != dyI.rows())
        throw ConfigError("eliminate_linear: clock does not match series");

    const double c1 = comb_weight(tau1, R1ref, taup);
    const double c2 = comb_weight(tau2, R1ref, taup);
    if (std::abs(c2 - c1) <= 1e-12 * (std::abs(c1) + std::abs(c2) + 1.0))
        throw DomainError(
            "eliminate_linear: degenerate configuration, the tau-combination "
            "weights coincide");

    const double mu1 = 1.0 - 2.0 * std::exp(-R1ref * tau1);
    const double mu2 = 1.0 - 2.0 * std::exp(-R1ref * tau2);
    const double tJ1 = tau1 + 2.0 * taup;
    const double tJ2 = tau2 + 2.0 * taup;
    const cd I(0.0, 1.0);

    EliminatedSeries out;
    out.FdR2Meq.resize(dyI.rows(), dyI.cols());
    out.FdR1Meq.resize(dyI.rows(), dyI.cols());
    out.FdMeq.resize(dyI.rows(), dyI.cols());

    for (Eigen::Index i = 0; i < dyI.rows(); ++i) {
        double t = clock[i];
        cd eI = I * std::exp(R2ref * (t - taup));
        cd eII = I * std::exp(R2ref * (t - tJ1));
        cd eIII = I * std::exp(R2ref * (t - tJ2));
        for (Eigen::Index j = 0; j < dyI.cols(); ++j) {
            cd yI = eI * dyI(i, j);
            cd y21 = eII * dyII(i, j) - mu1 * yI;
            cd y31 = eIII * dyIII(i, j) - mu2 * yI;
            cd u = (std::exp(R1ref * tau2) / tau2 * y31 -
                    std::exp(R1ref * tau1) / tau1 * y21) /
                   (c2 - c1);
            cd w = (std::exp(R1ref * tau1) / tau1 * y21 - c1 * u) / 2.0;
            out.FdR2Meq(i, j) = u;
            out.FdR1Meq(i, j) = w;
            out.FdMeq(i, j) = yI + (t - taup) * u;
        }
    }
    return out;
}

namespace {

struct InverseContext {
    AnsatzSpace X;
    std::vector<Vec3> k_samples;
    double R1ref = 0.0;
    cd R2ref{0.0, 0.0};
    VecXd Meq_ref;
};

InverseContext make_inverse_context(const CoeffFields& xr,
                                    const ForwardConfig& cfg,
                                    const NewtonOptions& opts) {
    InverseContext ctx;
    ctx.k_samples = k_trajectory(cfg.seqs[0].G, cfg.gamma, cfg.clock);
    double tol = opts.ansatz_tol;
    if (tol <= 0.0) {
        tol = 0.0;
        for (int ax = 0; ax < 3; ++ax)
            if (cfg.grid.n[ax] > 1) tol = std::max(tol, 0.5 / cfg.grid.L[ax]);
        if (tol == 0.0) tol = 0.5 / cfg.grid.L[0];
    }
    ctx.X = build_ansatz(ctx.k_samples, cfg.grid, tol);
    ctx.R1ref = xr.R1.mean();
    ctx.R2ref = xr.R2star.mean();
    ctx.Meq_ref = xr.Meq;
    return ctx;
}

// approximate inverse of the linearized operator via elimination at constant
// reference rates followed by the sampling inverse on X
CoeffFields invert_by_elimination(const StackedSeries& res,
                                  const InverseContext& ctx,
                                  const ForwardConfig& cfg) {
    const Grid& g = cfg.grid;
    const double taup = cfg.seqs[0].taup;
    CoeffFields dx;
    dx.Meq = VecXd::Zero(g.size());
    dx.R1 = VecXd::Zero(g.size());
    dx.R2star = VecXcd::Zero(g.size());

    const double floor = 1e-8 * ctx.Meq_ref.cwiseAbs().maxCoeff();
    if (cfg.reduced) {
        // two unknown fields: take dM^eq from the demodulated 90-degree series
        // and dR1 from the first inversion-recovery combination
        Eigen::MatrixXcd yI(res.y[0].rows(), res.y[0].cols());
        Eigen::MatrixXcd w(res.y[0].rows(), res.y[0].cols());
        const cd I(0.0, 1.0);
        const double tau1 = cfg.tau1();
        const double mu1 = 1.0 - 2.0 * std::exp(-ctx.R1ref * tau1);
        const double tJ1 = tau1 + 2.0 * taup;
        for (Eigen::Index i = 0; i < yI.rows(); ++i) {
            double t = res.clock[i];
            cd eI = I * std::exp(ctx.R2ref * (t - taup));
            cd eII = I * std::exp(ctx.R2ref * (t - tJ1));
            for (Eigen::Index j = 0; j < yI.cols(); ++j) {
                yI(i, j) = eI * res.y[0](i, j);
                cd y21 = eII * res.y[1](i, j) - mu1 * yI(i, j);
                w(i, j) = std::exp(ctx.R1ref * tau1) / (2.0 * tau1) * y21;
            }
        }
        InterpResult iv = interp_inverse(yI, ctx.k_samples, cfg.coils, ctx.X);
        InterpResult iw = interp_inverse(w, ctx.k_samples, cfg.coils, ctx.X);
        for (int i = 0; i < g.size(); ++i) {
            dx.Meq(i) = iv.x(i).real();
            if (std::abs(ctx.Meq_ref(i)) >= floor)
                dx.R1(i) = (iw.x(i) / ctx.Meq_ref(i)).real();
        }
        return dx;
    }

    EliminatedSeries elim =
        eliminate_linear(res.y[0], res.y[1], res.y[2], res.clock, ctx.R2ref,
                         ctx.R1ref, cfg.tau1(), cfg.tau2(), taup);
    InterpResult iu = interp_inverse(elim.FdR2Meq, ctx.k_samples, cfg.coils, ctx.X);
    InterpResult iw = interp_inverse(elim.FdR1Meq, ctx.k_samples, cfg.coils, ctx.X);
    InterpResult iv = interp_inverse(elim.FdMeq, ctx.k_samples, cfg.coils, ctx.X);
    for (int i = 0; i < g.size(); ++i) {
        dx.Meq(i) = iv.x(i).real();
        if (std::abs(ctx.Meq_ref(i)) >= floor) {
            dx.R1(i) = (iw.x(i) / ctx.Meq_ref(i)).real();
            dx.R2star(i) = iu.x(i) / ctx.Meq_ref(i);
        }
    }
    return dx;
}

// dense real-linear least squares over the X-restricted increments; columns
// are engine jacobian runs, so this is the slow path
CoeffFields invert_dense(const StackedSeries& res, const CoeffFields& xr,
                         const InverseContext& ctx, const ForwardConfig& cfg) {
    const Grid& g = cfg.grid;
    const int M = ctx.X.nmodes();
    std::vector<CoeffFields> basis;
    basis.reserve(6 * M);
    auto zero = [&] {
        CoeffFields z;
        z.Meq = VecXd::Zero(g.size());
        z.R1 = VecXd::Zero(g.size());
        z.R2star = VecXcd::Zero(g.size());
        return z;
    };
    for (int m = 0; m < M; ++m) {
        VecXcd bm = ctx.X.basis_field(m);
        CoeffFields b1 = zero(), b2 = zero(), b3 = zero(), b4 = zero(),
                    b5 = zero(), b6 = zero();
        b1.Meq = bm.real();
        b2.Meq = bm.imag();
        b3.R1 = bm.real();
        b4.R1 = bm.imag();
        b5.R2star = bm;
        b6.R2star = cd(0.0, 1.0) * bm;
        basis.push_back(b1);
        basis.push_back(b2);
        basis.push_back(b3);
        basis.push_back(b4);
        basis.push_back(b5);
        basis.push_back(b6);
    }

    VecXcd r = res.flat();
    const Eigen::Index rows = 2 * r.size();
    Eigen::MatrixXd A(rows, static_cast<Eigen::Index>(basis.size()));
    for (std::size_t k = 0; k < basis.size(); ++k) {
        VecXcd col = jacobian_apply(xr, basis[k], cfg).flat();
        A.col(k).head(r.size()) = col.real();
        A.col(k).tail(r.size()) = col.imag();
    }
    VecXd b(rows);
    b.head(r.size()) = r.real();
    b.tail(r.size()) = r.imag();
    Eigen::BDCSVD<Eigen::MatrixXd> svd(A,
                                       Eigen::ComputeThinU | Eigen::ComputeThinV);
    VecXd z = svd.solve(b);
    CoeffFields dx = zero();
    for (std::size_t k = 0; k < basis.size(); ++k) {
        dx.Meq += z(k) * basis[k].Meq;
        dx.R1 += z(k) * basis[k].R1;
        dx.R2star += z(k) * basis[k].R2star;
    }
    return dx;
}

} // namespace

NewtonResult newton_solve(const StackedSeries& ydata, const CoeffFields& x0,
                          const ForwardConfig& cfg, NewtonVariant variant,
                          const NewtonOptions& opts) {
    cfg.validate();
    NewtonResult out;
    out.x = x0;

    const double ynorm = std::max(ydata.norm(), 1e-300);
    InverseContext ctx;
    bool ctx_fixed = false;
    if (variant == NewtonVariant::Frozen) {
        ctx = make_inverse_context(with_frozen(x0, cfg), cfg, opts);
        ctx_fixed = true;
    }

    int grow_streak = 0;
    double prev_res = -1.0;
    for (int n = 0; n <= opts.max_iter; ++n) {
        StackedSeries r = ydata - forward_F(out.x, cfg);
        double res = r.norm();

        NewtonIterate it;
        it.n = n;
        it.residual = res;
        if (opts.truth) {
            CoeffFields d = out.x - *opts.truth;
            double tn = std::max(opts.truth->norm(cfg.grid), 1e-300);
            it.error_to_truth = d.norm(cfg.grid) / tn;
        }
        out.history.push_back(it);

        if (res <= opts.tol * ynorm) {
            out.converged = true;
            return out;
        }
        if (prev_res >= 0.0 && res > prev_res) {
            if (++grow_streak >= 3) {
                std::ostringstream os;
                os << "newton_solve: divergence, residual grew 3 consecutive "
                      "steps; history:";
                for (const auto& h : out.history) os << " " << h.residual;
                throw NumericsError(os.str());
            }
        } else {
            grow_streak = 0;
        }
        prev_res = res;
        if (n == opts.max_iter) break;

        if (!ctx_fixed) ctx = make_inverse_context(with_frozen(out.x, cfg), cfg, opts);
        const CoeffFields& jac_point =
            variant == NewtonVariant::Frozen ? x0 : out.x;
        CoeffFields dx = opts.force_dense
                             ? invert_dense(r, jac_point, ctx, cfg)
                             : invert_by_elimination(r, ctx, cfg);
        if (cfg.reduced) dx.R2star = VecXcd::Zero(cfg.grid.size());
        out.x = out.x + dx;
        out.history.back().step_norm = dx.norm(cfg.grid);
    }
    return out;
}

double fit_order(const std::vector<double>& errors) {
    std::vector<double> xs, ys;
    for (std::size_t i = 0; i + 1 < errors.size(); ++i) {
        if (errors[i] > 1e-15 && errors[i + 1] > 1e-15) {
            xs.push_back(std::log(errors[i]));
            ys.push_back(std::log(errors[i + 1]));
        }
    }
    if (xs.size() < 2)
        throw NumericsError("fit_order: need at least two usable error pairs");
    double xm = 0.0, ym = 0.0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        xm += xs[i];
        ym += ys[i];
    }
    xm /= xs.size();
    ym /= ys.size();
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        num += (xs[i] - xm) * (ys[i] - ym);
        den += (xs[i] - xm) * (xs[i] - xm);
    }
    if (den == 0.0) throw NumericsError("fit_order: degenerate error sequence");
    return num / den;
}

} // namespace bt
