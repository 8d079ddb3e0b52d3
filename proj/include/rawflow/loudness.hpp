#pragma once

#include <cmath>
#include <limits>
#include <vector>

#include "rawflow/audio_io.hpp"
#include "rawflow/common.hpp"

namespace rawflow {

// Gated integrated loudness per ITU-R BS.1770-4 (mono): K-weighting
// (high-shelf pre-filter + RLB high-pass), 400 ms blocks with 75% overlap,
// -70 LUFS absolute gate, -10 LU relative gate.

constexpr double kSilenceLoudness = -std::numeric_limits<double>::infinity();

namespace detail {

struct Biquad {
    double b0, b1, b2, a1, a2;

    void apply(std::vector<double>& x) const {
        double z1 = 0.0, z2 = 0.0;
        for (double& s : x) {
            const double in = s;
            const double out = b0 * in + z1;
            z1 = b1 * in - a1 * out + z2;
            z2 = b2 * in - a2 * out;
            s = out;
        }
    }
};

// Stage-1 high shelf, parameterized so it matches the BS.1770 reference
// coefficients at 48 kHz and stays correct at other sample rates.
inline Biquad shelf_filter(double fs) {
    const double f0 = 1681.974450955533;
    const double gain_db = 3.999843853973347;
    const double q = 0.7071752369554196;
    const double k = std::tan(M_PI * f0 / fs);
    const double vh = std::pow(10.0, gain_db / 20.0);
    const double vb = std::pow(vh, 0.4996667741545416);
    const double a0 = 1.0 + k / q + k * k;
    Biquad bq;
    bq.b0 = (vh + vb * k / q + k * k) / a0;
    bq.b1 = 2.0 * (k * k - vh) / a0;
    bq.b2 = (vh - vb * k / q + k * k) / a0;
    bq.a1 = 2.0 * (k * k - 1.0) / a0;
    bq.a2 = (1.0 - k / q + k * k) / a0;
    return bq;
}

// Stage-2 RLB high-pass.
inline Biquad highpass_filter(double fs) {
    const double f0 = 38.13547087602444;
    const double q = 0.5003270373238773;
    const double k = std::tan(M_PI * f0 / fs);
    Biquad bq;
    bq.b0 = 1.0;
    bq.b1 = -2.0;
    bq.b2 = 1.0;
    bq.a1 = 2.0 * (k * k - 1.0) / (1.0 + k / q + k * k);
    bq.a2 = (1.0 - k / q + k * k) / (1.0 + k / q + k * k);
    return bq;
}

}  // namespace detail

inline double integrated_loudness(const WaveformBuffer& buf) {
    const double fs = static_cast<double>(buf.sample_rate);
    if (buf.duration_s() < 0.4)
        throw precondition_error("integrated_loudness: need at least 400 ms");

    std::vector<double> x = buf.samples;
    detail::shelf_filter(fs).apply(x);
    detail::highpass_filter(fs).apply(x);

    const std::size_t block = static_cast<std::size_t>(std::lround(0.4 * fs));
    const std::size_t hop = static_cast<std::size_t>(std::lround(0.1 * fs));
    std::vector<double> block_power;
    for (std::size_t start = 0; start + block <= x.size(); start += hop) {
        double z = 0.0;
        for (std::size_t i = start; i < start + block; ++i) z += x[i] * x[i];
        block_power.push_back(z / static_cast<double>(block));
    }

    const auto loud = [](double z) { return -0.691 + 10.0 * std::log10(z); };

    // absolute gate at -70 LUFS
    std::vector<double> gated;
    for (double z : block_power)
        if (z > 0.0 && loud(z) > -70.0) gated.push_back(z);
    if (gated.empty()) return kSilenceLoudness;

    double mean_z = 0.0;
    for (double z : gated) mean_z += z;
    mean_z /= static_cast<double>(gated.size());
    const double rel_threshold = loud(mean_z) - 10.0;

    double final_z = 0.0;
    std::size_t n = 0;
    for (double z : gated)
        if (loud(z) > rel_threshold) {
            final_z += z;
            ++n;
        }
    if (n == 0) return kSilenceLoudness;
    return loud(final_z / static_cast<double>(n));
}

// Single gain so the result measures target_lufs; silence passes through.
inline WaveformBuffer normalize_loudness(const WaveformBuffer& buf,
                                         double target_lufs = -23.0) {
    const double l = integrated_loudness(buf);
    if (l == kSilenceLoudness) return buf;
    const double gain = std::pow(10.0, (target_lufs - l) / 20.0);
    WaveformBuffer out = buf;
    for (double& s : out.samples) s *= gain;
    return out;
}

}  // namespace rawflow
