#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "bt/bloch.h"
#include "bt/core.h"

namespace bt {

// receive-coil sensitivities, one complex grid function per coil
struct CoilSet {
    Eigen::MatrixXcd c; // n x J
    bool constant_coils = false;
    VecXcd c0; // per-coil scalar when constant_coils

    int ncoils() const { return static_cast<int>(c.cols()); }
    static CoilSet constant(const Grid& g, const VecXcd& vals);
    void validate(const Grid& g) const;
};

// per-coil complex series on a shared sample clock, plus the acquisition
// metadata needed to interpret or reproduce it
struct Measurement {
    std::vector<double> times;
    Eigen::MatrixXcd y; // T x J
    std::string seq_kind;
    double taup = 0.0;
    double tau = 0.0;
    double sigma = 0.0;
    std::uint64_t seed = 0;

    int ncoils() const { return static_cast<int>(y.cols()); }
    int nsamples() const { return static_cast<int>(y.rows()); }
    void validate() const;
};

// y_j(t) = sum_r conj-coil_j(r) * Mperp(t, r) * cellvol, at each clock time;
// trajectory states bracketing a clock time are combined linearly in t
Measurement observe(const std::vector<MagState>& traj, const CoilSet& coils,
                    const Grid& g, const std::vector<double>& clock);

// sign * i * exp(R2ref*(t - t_offset)) * y_j(t)
Eigen::MatrixXcd demodulate(const Measurement& y, cd R2ref, double t_offset,
                            int sign);

// i.i.d. complex Gaussian noise, E|z|^2 = sigma^2, deterministic under seed
Measurement add_noise(const Measurement& y, double sigma, std::uint64_t seed);

} // namespace bt
