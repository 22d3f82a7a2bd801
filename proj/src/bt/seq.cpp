#include "bt/seq.h"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace bt {

void PulseSequence::validate() const {
    // pulse-free timelines are legitimate (plain relaxation/diffusion runs);
    // the pulse-width requirement only binds once pulses exist
    if (!pulses.empty() && !(taup > 0.0))
        throw ConfigError("sequence: taup must be > 0");
    double prev_end = 0.0;
    for (size_t i = 0; i < pulses.size(); ++i) {
        const Pulse& p = pulses[i];
        if (p.t0 < prev_end - 1e-15)
            throw ConfigError("sequence: pulses overlap or are out of order");
        if (!(p.taup > 0.0)) throw ConfigError("sequence: pulse duration must be > 0");
        prev_end = p.t1();
        // gradient must vanish on the pulse support
        Vec3 gint = G.integral(p.t0, p.t1());
        Vec3 gmid = G.value(0.5 * (p.t0 + p.t1()));
        if (gint.norm() > 1e-14 || gmid.norm() > 0.0) {
            std::ostringstream os;
            os << "sequence: gradient nonzero on pulse [" << p.t0 << ", " << p.t1() << "]";
            throw ConfigError(os.str());
        }
    }
    if (T < prev_end - 1e-15)
        throw ConfigError("sequence: horizon T shorter than the pulse span");
    if (readout_start < prev_end - 1e-12 || readout_start > T + 1e-12)
        throw ConfigError("sequence: readout_start outside [pulse end, T]");
    G.validate();
}

std::vector<PulseSequence::Segment> PulseSequence::segments() const {
    std::vector<Segment> out;
    // breakpoints: 0, T, pulse edges, gradient knots
    std::vector<double> bp{0.0, T};
    for (const Pulse& p : pulses) {
        bp.push_back(p.t0);
        bp.push_back(p.t1());
    }
    for (double k : G.knots)
        if (k > 0.0 && k < T) bp.push_back(k);
    std::sort(bp.begin(), bp.end());
    bp.erase(std::unique(bp.begin(), bp.end(),
                         [](double a, double b) { return std::abs(a - b) < 1e-15; }),
             bp.end());
    for (size_t i = 0; i + 1 < bp.size(); ++i) {
        double a = bp[i], b = bp[i + 1];
        if (b - a < 1e-15) continue;
        double mid = 0.5 * (a + b);
        Segment s;
        s.t0 = a;
        s.t1 = b;
        s.is_pulse = false;
        s.amp = cd(0, 0);
        s.g = G.value(mid);
        for (const Pulse& p : pulses) {
            if (mid > p.t0 && mid < p.t1()) {
                s.is_pulse = true;
                s.amp = p.amp;
                s.g = Vec3::Zero();
                break;
            }
        }
        out.push_back(s);
    }
    return out;
}

std::vector<double> PulseSequence::default_clock(int samples) const {
    std::vector<double> t(samples);
    // keep samples strictly inside (readout_start, T] so explicit formulas
    // with t > pulse end apply at every sample
    double a = readout_start, b = T;
    for (int i = 0; i < samples; ++i)
        t[i] = a + (b - a) * (i + 1) / static_cast<double>(samples);
    return t;
}

PulseSequence make_sequence(SeqKind kind, double cplus0, double taup, double tau,
                            double T, const PiecewiseConstant& G, double gamma,
                            double readout_start) {
    if (!(taup > 0.0)) throw ConfigError("make_sequence: taup must be > 0");
    if (!(cplus0 > 0.0)) throw ConfigError("make_sequence: cplus0 must be > 0");
    if (!(gamma > 0.0)) throw ConfigError("make_sequence: gamma must be > 0");
    PulseSequence s;
    s.kind = kind;
    s.taup = taup;
    s.G = G;
    s.T = T;
    const double amp90 = M_PI / (2.0 * cplus0 * gamma * taup);
    if (kind == SeqKind::Ninety) {
        s.tau = 0.0;
        s.pulses = {Pulse{0.0, taup, cd(amp90, 0.0)}};
    } else {
        if (!(tau > 0.0))
            throw ConfigError("make_sequence: tau must be > 0 for the 180-tau-90 kind");
        s.tau = tau;
        s.pulses = {Pulse{0.0, taup, cd(2.0 * amp90, 0.0)},
                    Pulse{tau + taup, taup, cd(amp90, 0.0)}};
    }
    s.readout_start = readout_start < 0.0 ? s.pulse_end() : readout_start;
    s.validate();
    return s;
}

double flip_angle(const std::vector<Pulse>& pulses, double cplus, double gamma,
                  double t, double horizon) {
    if (t < 0.0 || t > horizon + 1e-12)
        throw DomainError("flip_angle: t outside the sequence horizon");
    cd acc(0, 0);
    for (const Pulse& p : pulses) {
        double a = std::max(0.0, p.t0);
        double b = std::min(t, p.t1());
        if (b > a) acc += p.amp * (b - a);
    }
    return std::abs(gamma * cplus * acc);
}

double flip_angle(const PulseSequence& seq, double cplus, double gamma, double t) {
    return flip_angle(seq.pulses, cplus, gamma, t, seq.T);
}

} // namespace bt
