#pragma once

#include <vector>

#include "bt/core.h"

namespace bt {

enum class SeqKind { Ninety, OneEightyTauNinety };

struct Pulse {
    double t0 = 0.0;
    double taup = 0.0;
    cd amp{0.0, 0.0}; // envelope height on [t0, t0+taup]
    double t1() const { return t0 + taup; }
};

// Rectangular-pulse sequence on one absolute timeline [0, T]. The gradient
// waveform lives on the same timeline and must vanish on every pulse support.
struct PulseSequence {
    SeqKind kind = SeqKind::Ninety;
    double taup = 0.0;
    double tau = 0.0; // intermission (OneEightyTauNinety only)
    std::vector<Pulse> pulses;
    PiecewiseConstant G;
    double T = 0.0;
    double readout_start = 0.0; // first admissible sample time

    double pulse_end() const { return pulses.empty() ? 0.0 : pulses.back().t1(); }
    // demodulation offset: taup for Ninety, tau+2*taup for OneEightyTauNinety
    double t_offset() const { return pulse_end(); }
    void validate() const;

    // Chronological partition of [0, T] into pulse and free segments; free
    // segments are split at every gradient knot so G is constant per segment.
    struct Segment {
        double t0, t1;
        bool is_pulse;
        cd amp;  // envelope height if pulse
        Vec3 g;  // gradient value if free
    };
    std::vector<Segment> segments() const;

    std::vector<double> default_clock(int samples = 512) const;
};

// Amplitudes are set so the flip angles are exactly pi/2 (first kind) and
// pi then pi/2 (second kind): height pi/(2 c0+ gamma taup) for a 90 pulse.
// readout_start < 0 means "starts right after the last pulse".
PulseSequence make_sequence(SeqKind kind, double cplus0, double taup, double tau,
                            double T, const PiecewiseConstant& G,
                            double gamma = consts::gamma_proton,
                            double readout_start = -1.0);

// phi(t) = |gamma * cplus * integral_0^t p(s) ds|
double flip_angle(const std::vector<Pulse>& pulses, double cplus, double gamma,
                  double t, double horizon);
double flip_angle(const PulseSequence& seq, double cplus, double gamma, double t);

} // namespace bt
