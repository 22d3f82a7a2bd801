#include "bt/bloch.h"

#include <algorithm>
#include <cmath>

namespace bt {

namespace {

const cd I(0.0, 1.0);

// cos(z) and sin(z)/z, stable for small |z| and branch-free in z^2
cd cos_z(cd z) { return std::cos(z); }

cd sinc_z(cd z) {
    if (std::abs(z) < 1e-4) {
        cd z2 = z * z;
        return 1.0 - z2 / 6.0 + z2 * z2 / 120.0;
    }
    return std::sin(z) / z;
}

struct Events {
    // merged, sorted list of times inside [t0, t1] at which states are needed
    std::vector<double> times;
};

} // namespace

MagState MagState::equilibrium(const CoeffFields& c, double t) {
    MagState s;
    s.t = t;
    const int n = static_cast<int>(c.Meq.size());
    s.Mperp = VecXcd::Zero(n);
    s.Mminus = VecXcd::Zero(n);
    s.mz = c.Meq.cast<cd>();
    return s;
}

MagState MagState::zero(int n, double t) {
    MagState s;
    s.t = t;
    s.Mperp = VecXcd::Zero(n);
    s.Mminus = VecXcd::Zero(n);
    s.mz = VecXcd::Zero(n);
    return s;
}

PulsePropagator pulse_propagator(cd alpha1, cd alpha2, cd b, cd f, double dt) {
    if (dt < 0.0) throw DomainError("pulse_propagator: dt must be >= 0");
    PulsePropagator out;
    out.alpha1 = alpha1;
    out.alpha2 = alpha2;
    out.b = b;
    out.dt = dt;

    const double bx = b.real(), by = b.imag();
    const double bn = std::hypot(bx, by);
    const cd dhat = 0.5 * (alpha2 - alpha1);
    const cd s = std::sqrt(cd(bn * bn, 0.0) - dhat * dhat);
    const cd mean = 0.5 * (alpha1 + alpha2);
    out.lambda0 = alpha2;
    out.lambda_plus = mean + I * s;
    out.lambda_minus = mean - I * s;

    if (bn == 0.0) {
        out.P = Eigen::Matrix3cd::Zero();
        const cd e2 = std::exp(-alpha2 * dt);
        const cd e1 = std::exp(-alpha1 * dt);
        out.P(0, 0) = e2;
        out.P(1, 1) = e2;
        out.P(2, 2) = e1;
        out.q = Eigen::Vector3cd(0.0, 0.0, f * dt * phi1(-alpha1 * dt));
        return out;
    }

    // orthogonal (reflection) change of basis built from the envelope direction:
    // columns (bx,by,0)/|b|, (by,-bx,0)/|b|, e_z; A becomes diag(alpha2) + a
    // 2x2 block [[alpha2, -|b|], [|b|, alpha1]] which exponentiates in closed
    // form through its traceless part (branch-free in the discriminant).
    Eigen::Matrix3cd Q = Eigen::Matrix3cd::Zero();
    Q(0, 0) = bx / bn;
    Q(1, 0) = by / bn;
    Q(0, 1) = by / bn;
    Q(1, 1) = -bx / bn;
    Q(2, 2) = 1.0;

    const cd c = cos_z(s * dt);
    const cd snc = sinc_z(s * dt) * dt; // sin(s dt)/s
    const cd em = std::exp(-mean * dt);
    // exp(-dt*B), B = [[alpha2, -bn], [bn, alpha1]] = mean*I + [[dhat, -bn],[bn, -dhat]]
    Eigen::Matrix2cd EB;
    EB(0, 0) = em * (c - dhat * snc);
    EB(0, 1) = em * (bn * snc);
    EB(1, 0) = em * (-bn * snc);
    EB(1, 1) = em * (c + dhat * snc);

    Eigen::Matrix3cd Etil = Eigen::Matrix3cd::Zero();
    Etil(0, 0) = std::exp(-alpha2 * dt);
    Etil(1, 1) = EB(0, 0);
    Etil(1, 2) = EB(0, 1);
    Etil(2, 1) = EB(1, 0);
    Etil(2, 2) = EB(1, 1);

    out.P = Q * Etil * Q;

    if (f == cd(0.0, 0.0)) {
        out.q = Eigen::Vector3cd::Zero();
        return out;
    }
    const cd denom = cd(bn * bn, 0.0) + alpha1 * alpha2;
    const double scale = bn * bn + std::abs(alpha1) * std::abs(alpha2);
    if (std::abs(denom) <= 1e-14 * (scale > 0.0 ? scale : 1.0))
        throw NumericsError("pulse_propagator: singular fixed point, |b|^2 + a1*a2 = 0");
    Eigen::Vector3cd ftil(f * by / denom, -f * bx / denom, f * alpha2 / denom);
    out.q = ftil - out.P * ftil;
    return out;
}

void apply_propagator(const PulsePropagator& pp, cd& Mp, cd& Mm, cd& mz) {
    cd mx = 0.5 * (Mp + Mm);
    cd my = (Mp - Mm) / cd(0.0, 2.0);
    Eigen::Vector3cd m(mx, my, mz);
    m = (pp.P * m + pp.q).eval();
    Mp = m(0) + cd(0.0, 1.0) * m(1);
    Mm = m(0) - cd(0.0, 1.0) * m(1);
    mz = m(2);
}

MagState apply_pulse(const MagState& s, const CoeffFields& c, const VecXcd& cplus,
                     double gamma, cd amp, double dt) {
    MagState out = s;
    out.t = s.t + dt;
    const int n = static_cast<int>(s.Mperp.size());
    for (int i = 0; i < n; ++i) {
        const cd b = gamma * cplus(i) * amp;
        PulsePropagator pp =
            pulse_propagator(cd(c.R1(i), 0.0), c.R2star(i), b, cd(c.R1(i) * c.Meq(i), 0.0), dt);
        apply_propagator(pp, out.Mperp(i), out.Mminus(i), out.mz(i));
    }
    return out;
}

MagState free_precession(const MagState& s, const CoeffFields& c, const Vec3& k_start,
                         const Vec3& k_end, const Grid& g, double dt) {
    if (dt < 0.0) throw DomainError("free_precession: dt must be >= 0");
    MagState out = s;
    out.t = s.t + dt;
    const Vec3 dk = k_end - k_start;
    const int n = g.size();
    for (int i = 0; i < n; ++i) {
        const double theta = 2.0 * M_PI * dk.dot(g.coords(i));
        const cd decay2 = std::exp(-(c.R2star(i) * dt + I * theta));
        const cd decay2m = std::exp(-(c.R2star(i) * dt - I * theta));
        out.Mperp(i) = decay2 * s.Mperp(i);
        out.Mminus(i) = decay2m * s.Mminus(i);
        const double e1 = std::exp(-c.R1(i) * dt);
        out.mz(i) = c.Meq(i) + e1 * (s.mz(i) - c.Meq(i));
    }
    return out;
}

namespace {

// RK4 right-hand side for the coupled per-point system
struct BlochRhs {
    const CoeffFields& c;
    const VecXcd& cplus;
    const Grid& g;
    double gamma;

    void operator()(const VecXcd& Mp, const VecXcd& Mm, const VecXcd& mz, cd amp,
                    const Vec3& grad, VecXcd& dMp, VecXcd& dMm, VecXcd& dmz) const {
        const int n = g.size();
        dMp.resize(n);
        dMm.resize(n);
        dmz.resize(n);
        for (int i = 0; i < n; ++i) {
            const cd b = gamma * cplus(i) * amp;
            const double w = gamma * grad.dot(g.coords(i));
            dMp(i) = -(c.R2star(i) + I * w) * Mp(i) - I * b * mz(i);
            dMm(i) = -(c.R2star(i) - I * w) * Mm(i) + I * std::conj(b) * mz(i);
            dmz(i) = -c.R1(i) * mz(i) -
                     cd(0.0, 0.5) * (std::conj(b) * Mp(i) - b * Mm(i)) +
                     c.R1(i) * c.Meq(i);
        }
    }
};

void rk4_advance(MagState& s, const BlochRhs& rhs, cd amp, const Vec3& grad,
                 double dt, int steps) {
    VecXcd k1p, k1m, k1z, k2p, k2m, k2z, k3p, k3m, k3z, k4p, k4m, k4z;
    const double h = dt / steps;
    for (int st = 0; st < steps; ++st) {
        rhs(s.Mperp, s.Mminus, s.mz, amp, grad, k1p, k1m, k1z);
        rhs(s.Mperp + 0.5 * h * k1p, s.Mminus + 0.5 * h * k1m, s.mz + 0.5 * h * k1z,
            amp, grad, k2p, k2m, k2z);
        rhs(s.Mperp + 0.5 * h * k2p, s.Mminus + 0.5 * h * k2m, s.mz + 0.5 * h * k2z,
            amp, grad, k3p, k3m, k3z);
        rhs(s.Mperp + h * k3p, s.Mminus + h * k3m, s.mz + h * k3z, amp, grad, k4p,
            k4m, k4z);
        s.Mperp += h / 6.0 * (k1p + 2.0 * k2p + 2.0 * k3p + k4p);
        s.Mminus += h / 6.0 * (k1m + 2.0 * k2m + 2.0 * k3m + k4m);
        s.mz += h / 6.0 * (k1z + 2.0 * k2z + 2.0 * k3z + k4z);
    }
    s.t += dt;
}

} // namespace

std::vector<MagState> solve_bloch(const PulseSequence& seq, const CoeffFields& c,
                                  const VecXcd& cplus, const Grid& g, double gamma,
                                  const BlochOptions& opt,
                                  const std::vector<double>& sample_times,
                                  const MagState* init) {
    seq.validate();
    if (cplus.size() != g.size())
        throw ConfigError("solve_bloch: cplus size does not match grid");
    if (opt.mode == BlochMode::Numeric &&
        (!(opt.dt_pulse_frac > 0.0) || !(opt.dt_free_frac > 0.0)))
        throw ConfigError("solve_bloch: numeric step fractions must be > 0");
    for (size_t i = 0; i < sample_times.size(); ++i) {
        if (sample_times[i] < 0.0 || sample_times[i] > seq.T + 1e-12)
            throw ConfigError("solve_bloch: sample time outside [0, T]");
        if (i && sample_times[i] < sample_times[i - 1])
            throw ConfigError("solve_bloch: sample times must be sorted");
    }

    MagState state = init ? *init : MagState::equilibrium(c, 0.0);
    std::vector<MagState> out;
    out.reserve(sample_times.size());
    size_t si = 0;
    while (si < sample_times.size() && sample_times[si] <= state.t + 1e-15) {
        MagState snap = state;
        snap.t = sample_times[si];
        out.push_back(snap);
        ++si;
    }

    BlochRhs rhs{c, cplus, g, gamma};
    for (const auto& seg : seq.segments()) {
        if (state.t >= seg.t1 - 1e-15) continue;
        // event times: sample times inside this segment, then the segment end
        std::vector<double> events;
        while (si < sample_times.size() && sample_times[si] <= seg.t1 + 1e-15) {
            events.push_back(std::min(sample_times[si], seg.t1));
            ++si;
        }
        events.push_back(seg.t1);
        size_t n_samples = events.size() - 1;
        for (size_t e = 0; e < events.size(); ++e) {
            double target = events[e];
            double dt = target - state.t;
            if (dt > 1e-15) {
                if (opt.mode == BlochMode::ExactPiecewise) {
                    if (seg.is_pulse) {
                        state = apply_pulse(state, c, cplus, gamma, seg.amp, dt);
                    } else {
                        Vec3 k0 = k_trajectory(seq.G, gamma, state.t);
                        Vec3 k1 = k_trajectory(seq.G, gamma, target);
                        state = free_precession(state, c, k0, k1, g, dt);
                    }
                } else {
                    double target_h = seg.is_pulse
                                          ? seq.taup * opt.dt_pulse_frac
                                          : (seg.t1 - seg.t0) * opt.dt_free_frac;
                    int steps = std::max(1, static_cast<int>(std::ceil(dt / target_h)));
                    rk4_advance(state, rhs, seg.is_pulse ? seg.amp : cd(0, 0), seg.g,
                                dt, steps);
                    state.t = target; // guard accumulation drift
                }
            } else {
                state.t = target;
            }
            if (e < n_samples) out.push_back(state);
        }
    }
    // samples exactly at T are covered by the last segment end; anything left
    // over means the clock ran past the horizon
    while (si < sample_times.size() && sample_times[si] <= seq.T + 1e-12) {
        out.push_back(state);
        ++si;
    }
    return out;
}

VecXcd explicit_state(const PulseSequence& seq, const CoeffFields& c, const Grid& g,
                      double gamma, double t) {
    const int n = g.size();
    VecXcd out(n);
    if (seq.kind == SeqKind::Ninety) {
        if (t < seq.taup - 1e-12)
            throw DomainError("explicit_state: t must be past the pulse (t > taup)");
        const Vec3 kt = k_trajectory(seq.G, gamma, t);
        for (int i = 0; i < n; ++i) {
            const double phase = 2.0 * M_PI * kt.dot(g.coords(i));
            out(i) = -I * std::exp(-(c.R2star(i) * (t - seq.taup) + I * phase)) * c.Meq(i);
        }
    } else {
        const double tJ = seq.tau + 2.0 * seq.taup;
        if (t < tJ - 1e-12)
            throw DomainError("explicit_state: t must be past the pulses (t > tau+2*taup)");
        const Vec3 kt = k_trajectory(seq.G, gamma, t);
        const Vec3 kJ = k_trajectory(seq.G, gamma, tJ);
        for (int i = 0; i < n; ++i) {
            const double phase = 2.0 * M_PI * (kt - kJ).dot(g.coords(i));
            const double pref = 1.0 - 2.0 * std::exp(-c.R1(i) * seq.tau);
            out(i) = -I * std::exp(-(c.R2star(i) * (t - tJ) + I * phase)) * pref * c.Meq(i);
        }
    }
    return out;
}

namespace {

struct LinPoint {
    Eigen::Vector3cd base; // (mx, my, mz)
    Eigen::Vector3cd dm;
};

// advance base and derivative through one pulse interval of length dt at one
// point, by variation of constants with Gauss-Legendre quadrature
void pulse_linearized_point(cd a1, cd a2, cd b, cd f, cd da2, cd da1, cd df,
                            double dt, LinPoint& p, const std::vector<double>& gx,
                            const std::vector<double>& gw) {
    const PulsePropagator full = pulse_propagator(a1, a2, b, f, dt);
    Eigen::Vector3cd acc = Eigen::Vector3cd::Zero();
    for (size_t k = 0; k < gx.size(); ++k) {
        const double u = 0.5 * dt * (gx[k] + 1.0);
        const double w = 0.5 * dt * gw[k];
        const PulsePropagator to_u = pulse_propagator(a1, a2, b, f, u);
        const PulsePropagator from_u = pulse_propagator(a1, a2, b, f, dt - u);
        const Eigen::Vector3cd mbase_u = to_u.P * p.base + to_u.q;
        Eigen::Vector3cd src;
        src(0) = -da2 * mbase_u(0);
        src(1) = -da2 * mbase_u(1);
        src(2) = -da1 * mbase_u(2) + df;
        acc += w * (from_u.P * src);
    }
    p.dm = full.P * p.dm + acc;
    p.base = full.P * p.base + full.q;
}

} // namespace

std::vector<MagState> solve_bloch_linearized(const PulseSequence& seq,
                                             const CoeffFields& coeffs_ref,
                                             const CoeffFields& dc, const VecXcd& cplus,
                                             const Grid& g, double gamma,
                                             const std::vector<double>& sample_times) {
    seq.validate();
    const int n = g.size();
    std::vector<double> gx, gw;
    gauss_legendre(24, gx, gw);

    MagState base = MagState::equilibrium(coeffs_ref, 0.0);
    MagState dm = MagState::zero(n, 0.0);
    dm.mz = dc.Meq.cast<cd>();

    std::vector<MagState> out;
    out.reserve(sample_times.size());
    size_t si = 0;
    while (si < sample_times.size() && sample_times[si] <= 1e-15) {
        MagState snap = dm;
        snap.t = sample_times[si];
        out.push_back(snap);
        ++si;
    }

    double tcur = 0.0;
    for (const auto& seg : seq.segments()) {
        if (tcur >= seg.t1 - 1e-15) continue;
        std::vector<double> events;
        while (si < sample_times.size() && sample_times[si] <= seg.t1 + 1e-15) {
            events.push_back(std::min(sample_times[si], seg.t1));
            ++si;
        }
        events.push_back(seg.t1);
        size_t n_samples = events.size() - 1;
        for (size_t e = 0; e < events.size(); ++e) {
            const double target = events[e];
            const double dt = target - tcur;
            if (dt > 1e-15) {
                if (seg.is_pulse) {
                    for (int i = 0; i < n; ++i) {
                        LinPoint p;
                        p.base(0) = 0.5 * (base.Mperp(i) + base.Mminus(i));
                        p.base(1) = (base.Mperp(i) - base.Mminus(i)) / cd(0.0, 2.0);
                        p.base(2) = base.mz(i);
                        p.dm(0) = 0.5 * (dm.Mperp(i) + dm.Mminus(i));
                        p.dm(1) = (dm.Mperp(i) - dm.Mminus(i)) / cd(0.0, 2.0);
                        p.dm(2) = dm.mz(i);
                        const cd b = gamma * cplus(i) * seg.amp;
                        pulse_linearized_point(
                            cd(coeffs_ref.R1(i), 0.0), coeffs_ref.R2star(i), b,
                            cd(coeffs_ref.R1(i) * coeffs_ref.Meq(i), 0.0),
                            dc.R2star(i), cd(dc.R1(i), 0.0),
                            cd(dc.R1(i) * coeffs_ref.Meq(i) +
                                   coeffs_ref.R1(i) * dc.Meq(i),
                               0.0),
                            dt, p, gx, gw);
                        base.Mperp(i) = p.base(0) + I * p.base(1);
                        base.Mminus(i) = p.base(0) - I * p.base(1);
                        base.mz(i) = p.base(2);
                        dm.Mperp(i) = p.dm(0) + I * p.dm(1);
                        dm.Mminus(i) = p.dm(0) - I * p.dm(1);
                        dm.mz(i) = p.dm(2);
                    }
                } else {
                    const Vec3 k0 = k_trajectory(seq.G, gamma, tcur);
                    const Vec3 k1 = k_trajectory(seq.G, gamma, target);
                    const Vec3 dk = k1 - k0;
                    for (int i = 0; i < n; ++i) {
                        const double theta = 2.0 * M_PI * dk.dot(g.coords(i));
                        const cd E2 = std::exp(-(coeffs_ref.R2star(i) * dt + I * theta));
                        const cd E2m = std::exp(-(coeffs_ref.R2star(i) * dt - I * theta));
                        const double E1 = std::exp(-coeffs_ref.R1(i) * dt);
                        // d/dR2* of E2 = -dt E2 ; d/dR1 of the mz map and the
                        // dMeq feed-through of the equilibrium offset
                        dm.Mperp(i) = E2 * (dm.Mperp(i) - dc.R2star(i) * dt * base.Mperp(i));
                        dm.Mminus(i) =
                            E2m * (dm.Mminus(i) - dc.R2star(i) * dt * base.Mminus(i));
                        dm.mz(i) = E1 * dm.mz(i) -
                                   dc.R1(i) * dt * E1 * (base.mz(i) - coeffs_ref.Meq(i)) +
                                   dc.Meq(i) * (1.0 - E1);
                        base.Mperp(i) *= E2;
                        base.Mminus(i) *= E2m;
                        base.mz(i) = coeffs_ref.Meq(i) + E1 * (base.mz(i) - coeffs_ref.Meq(i));
                    }
                }
            }
            tcur = target;
            base.t = tcur;
            dm.t = tcur;
            if (e < n_samples) out.push_back(dm);
        }
    }
    while (si < sample_times.size() && sample_times[si] <= seq.T + 1e-12) {
        out.push_back(dm);
        ++si;
    }
    return out;
}

} // namespace bt
