#pragma once

#include <cmath>
#include <complex>
#include <cstddef>
#include <vector>

#include "rawflow/common.hpp"

namespace rawflow {

// Iterative radix-2 FFT, in place. n must be a power of two.
inline void fft_inplace(std::vector<std::complex<double>>& a) {
    const std::size_t n = a.size();
    if (n == 0 || (n & (n - 1)) != 0)
        throw precondition_error("fft: length must be a power of two");
    for (std::size_t i = 1, j = 0; i < n; ++i) {
        std::size_t bit = n >> 1;
        for (; j & bit; bit >>= 1) j ^= bit;
        j ^= bit;
        if (i < j) std::swap(a[i], a[j]);
    }
    for (std::size_t len = 2; len <= n; len <<= 1) {
        const double ang = -2.0 * M_PI / static_cast<double>(len);
        const std::complex<double> wlen(std::cos(ang), std::sin(ang));
        for (std::size_t i = 0; i < n; i += len) {
            std::complex<double> w(1.0);
            for (std::size_t k = 0; k < len / 2; ++k) {
                const std::complex<double> u = a[i + k];
                const std::complex<double> v = a[i + k + len / 2] * w;
                a[i + k] = u + v;
                a[i + k + len / 2] = u - v;
                w *= wlen;
            }
        }
    }
}

// Magnitude spectrum of a real signal, zero-padded up to the next power of
// two; returns n_fft/2+1 bins.
inline std::vector<double> magnitude_spectrum(const std::vector<double>& x,
                                              std::size_t n_fft = 0) {
    if (x.empty()) throw precondition_error("magnitude_spectrum: empty input");
    if (n_fft == 0) {
        n_fft = 1;
        while (n_fft < x.size()) n_fft <<= 1;
    }
    std::vector<std::complex<double>> a(n_fft, 0.0);
    for (std::size_t i = 0; i < x.size() && i < n_fft; ++i) a[i] = x[i];
    fft_inplace(a);
    std::vector<double> mag(n_fft / 2 + 1);
    for (std::size_t i = 0; i < mag.size(); ++i) mag[i] = std::abs(a[i]);
    return mag;
}

// Index of the strongest non-DC bin.
inline std::size_t dominant_bin(const std::vector<double>& x, std::size_t n_fft = 0) {
    const auto mag = magnitude_spectrum(x, n_fft);
    std::size_t best = 1;
    for (std::size_t i = 2; i < mag.size(); ++i)
        if (mag[i] > mag[best]) best = i;
    return best;
}

inline double bin_frequency(std::size_t bin, std::size_t n_fft, double sample_rate) {
    return static_cast<double>(bin) * sample_rate / static_cast<double>(n_fft);
}

}  // namespace rawflow
