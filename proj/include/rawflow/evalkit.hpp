#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstddef>
#include <vector>

#include "rawflow/audio_io.hpp"
#include "rawflow/common.hpp"
#include "rawflow/fft.hpp"
#include "rawflow/tensor.hpp"

namespace rawflow {

struct EmbeddingStats {
    Tensor mu;     // 1×d
    Tensor sigma;  // d×d, biased (divide by N)
    std::size_t n = 0;

    std::size_t dims() const { return mu.size(); }
};

inline EmbeddingStats gaussian_stats(const Tensor& embeddings) {
    if (embeddings.ndim() != 2 || embeddings.dim(0) == 0)
        throw precondition_error("gaussian_stats: need a non-empty N×d matrix");
    const std::size_t n = embeddings.dim(0), d = embeddings.dim(1);
    EmbeddingStats st;
    st.n = n;
    st.mu = Tensor({1, d});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) st.mu[j] += embeddings.at2(i, j);
    for (std::size_t j = 0; j < d; ++j) st.mu[j] /= static_cast<double>(n);
    st.sigma = Tensor({d, d});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) {
            const double xj = embeddings.at2(i, j) - st.mu[j];
            for (std::size_t k = 0; k < d; ++k)
                st.sigma.at2(j, k) += xj * (embeddings.at2(i, k) - st.mu[k]);
        }
    for (std::size_t j = 0; j < d; ++j)
        for (std::size_t k = 0; k < d; ++k) st.sigma.at2(j, k) /= static_cast<double>(n);
    return st;
}

namespace detail {

inline Eigen::MatrixXd to_eigen(const Tensor& t) {
    Eigen::MatrixXd m(t.dim(0), t.dim(1));
    for (std::size_t i = 0; i < t.dim(0); ++i)
        for (std::size_t j = 0; j < t.dim(1); ++j) m(i, j) = t.at2(i, j);
    return m;
}

// Symmetric PSD square root; negative eigenvalues from rounding are clipped.
inline Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(
        0.5 * (m + m.transpose()));
    if (es.info() != Eigen::Success)
        throw numeric_error("psd_sqrt: eigendecomposition failed");
    Eigen::VectorXd ev = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace detail

// |μa−μb|² + Tr(Σa + Σb − 2·(Σa^{1/2} Σb Σa^{1/2})^{1/2})
inline double frechet_distance(const EmbeddingStats& a, const EmbeddingStats& b) {
    if (a.dims() != b.dims()) throw dim_error("frechet_distance: dimension mismatch");
    double mean_term = 0.0;
    for (std::size_t j = 0; j < a.dims(); ++j) {
        const double d = a.mu[j] - b.mu[j];
        mean_term += d * d;
    }
    const Eigen::MatrixXd sa = detail::to_eigen(a.sigma);
    const Eigen::MatrixXd sb = detail::to_eigen(b.sigma);
    const Eigen::MatrixXd ra = detail::psd_sqrt(sa);
    const Eigen::MatrixXd cross = detail::psd_sqrt(ra * sb * ra);
    double fd = mean_term + sa.trace() + sb.trace() - 2.0 * cross.trace();
    if (!std::isfinite(fd)) throw numeric_error("frechet_distance: non-finite result");
    // roundoff on near-singular covariances can dip slightly below zero
    if (fd < 0.0) {
        if (fd < -1e-3) throw numeric_error("frechet_distance: negative beyond tolerance");
        fd = 0.0;
    }
    return fd;
}

// N×K rows of class probabilities.
struct PosteriorSet {
    Tensor p;

    std::size_t count() const { return p.dim(0); }
    std::size_t classes() const { return p.dim(1); }

    void check() const {
        if (p.ndim() != 2 || p.dim(0) == 0)
            throw precondition_error("PosteriorSet: need a non-empty N×K matrix");
        for (std::size_t i = 0; i < p.dim(0); ++i) {
            double s = 0.0;
            for (std::size_t k = 0; k < p.dim(1); ++k) {
                if (p.at2(i, k) < 0.0)
                    throw precondition_error("PosteriorSet: negative probability");
                s += p.at2(i, k);
            }
            if (std::fabs(s - 1.0) > 1e-6)
                throw precondition_error("PosteriorSet: row does not sum to 1");
        }
    }
};

constexpr double kKlEps = 1e-10;

// Mean over paired samples of KL(p_i || q_i), both sides floored at eps.
inline double paired_kl(const PosteriorSet& p, const PosteriorSet& q) {
    p.check();
    q.check();
    if (p.count() != q.count() || p.classes() != q.classes())
        throw dim_error("paired_kl: posterior set shape mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < p.count(); ++i)
        for (std::size_t k = 0; k < p.classes(); ++k) {
            const double pi = std::max(p.p.at2(i, k), kKlEps);
            const double qi = std::max(q.p.at2(i, k), kKlEps);
            acc += pi * std::log(pi / qi);
        }
    return acc / static_cast<double>(p.count());
}

// exp(mean_i KL(p_i || empirical marginal))
inline double inception_score(const PosteriorSet& p) {
    p.check();
    const std::size_t n = p.count(), k = p.classes();
    std::vector<double> marginal(k, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t c = 0; c < k; ++c) marginal[c] += p.p.at2(i, c);
    for (double& m : marginal) m /= static_cast<double>(n);
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t c = 0; c < k; ++c) {
            const double pi = std::max(p.p.at2(i, c), kKlEps);
            const double mc = std::max(marginal[c], kKlEps);
            acc += pi * std::log(pi / mc);
        }
    return std::exp(acc / static_cast<double>(n));
}

// ---- desk-scale embedder ------------------------------------------------

// Log-mel band statistics: 64 triangular mel bands, per-band mean and
// standard deviation over frames, concatenated to a 128-dim vector.
struct MelEmbedder {
    std::size_t n_fft = 1024;
    std::size_t hop = 512;
    std::size_t n_mels = 64;
    double log_floor = 1e-10;

    static double hz_to_mel(double f) { return 2595.0 * std::log10(1.0 + f / 700.0); }
    static double mel_to_hz(double m) { return 700.0 * (std::pow(10.0, m / 2595.0) - 1.0); }

    std::vector<double> embed(const WaveformBuffer& buf) const {
        if (buf.samples.size() < n_fft)
            throw precondition_error("MelEmbedder: clip shorter than one frame");
        const double fs = static_cast<double>(buf.sample_rate);
        const std::size_t n_bins = n_fft / 2 + 1;

        // triangular mel filter edges
        std::vector<double> centers(n_mels + 2);
        const double mel_hi = hz_to_mel(fs / 2.0);
        for (std::size_t m = 0; m < n_mels + 2; ++m)
            centers[m] = mel_to_hz(mel_hi * static_cast<double>(m) / (n_mels + 1));

        std::vector<double> window(n_fft);
        for (std::size_t i = 0; i < n_fft; ++i)
            window[i] = 0.5 - 0.5 * std::cos(2.0 * M_PI * i / (n_fft - 1));

        std::vector<std::vector<double>> band_log(n_mels);
        std::vector<double> frame(n_fft);
        for (std::size_t start = 0; start + n_fft <= buf.samples.size(); start += hop) {
            for (std::size_t i = 0; i < n_fft; ++i)
                frame[i] = buf.samples[start + i] * window[i];
            const auto mag = magnitude_spectrum(frame, n_fft);
            for (std::size_t m = 0; m < n_mels; ++m) {
                const double lo = centers[m], mid = centers[m + 1], hi = centers[m + 2];
                double e = 0.0;
                for (std::size_t b = 0; b < n_bins; ++b) {
                    const double f = static_cast<double>(b) * fs / n_fft;
                    double w = 0.0;
                    if (f > lo && f < mid)
                        w = (f - lo) / (mid - lo);
                    else if (f >= mid && f < hi)
                        w = (hi - f) / (hi - mid);
                    e += w * mag[b] * mag[b];
                }
                band_log[m].push_back(std::log(std::max(e, log_floor)));
            }
        }

        std::vector<double> out;
        out.reserve(2 * n_mels);
        for (std::size_t m = 0; m < n_mels; ++m) {
            const auto& v = band_log[m];
            double mean = 0.0;
            for (double x : v) mean += x;
            mean /= static_cast<double>(v.size());
            double var = 0.0;
            for (double x : v) var += (x - mean) * (x - mean);
            var /= static_cast<double>(v.size());
            out.push_back(mean);
            out.push_back(std::sqrt(var));
        }
        return out;
    }
};

// Desk-scale classifier stand-in: posterior over tone classes from the
// distance between a clip's dominant FFT frequency and each class frequency.
inline PosteriorSet tone_posteriors(const std::vector<WaveformBuffer>& clips,
                                    const std::vector<double>& class_freqs,
                                    double temperature = 100.0) {
    if (clips.empty()) throw precondition_error("tone_posteriors: no clips");
    if (class_freqs.empty()) throw precondition_error("tone_posteriors: no classes");
    if (temperature <= 0.0)
        throw precondition_error("tone_posteriors: temperature must be > 0");
    PosteriorSet ps;
    ps.p = Tensor({clips.size(), class_freqs.size()});
    for (std::size_t i = 0; i < clips.size(); ++i) {
        std::size_t n_fft = 1;
        while (n_fft < clips[i].samples.size()) n_fft <<= 1;
        const std::size_t bin = dominant_bin(clips[i].samples, n_fft);
        const double f = bin_frequency(bin, n_fft, clips[i].sample_rate);
        double z = 0.0;
        for (std::size_t k = 0; k < class_freqs.size(); ++k) {
            const double e = std::exp(-std::fabs(f - class_freqs[k]) / temperature);
            ps.p.at2(i, k) = e;
            z += e;
        }
        for (std::size_t k = 0; k < class_freqs.size(); ++k) ps.p.at2(i, k) /= z;
    }
    return ps;
}

// Stack per-clip embeddings; every clip must have the same length.
inline Tensor embed_clips(const std::vector<WaveformBuffer>& clips,
                          const MelEmbedder& embedder = {}) {
    if (clips.empty()) throw precondition_error("embed_clips: no clips");
    for (const auto& c : clips)
        if (c.samples.size() != clips[0].samples.size())
            throw precondition_error("embed_clips: clip length mismatch");
    const auto first = embedder.embed(clips[0]);
    Tensor out({clips.size(), first.size()});
    for (std::size_t j = 0; j < first.size(); ++j) out.at2(0, j) = first[j];
    for (std::size_t i = 1; i < clips.size(); ++i) {
        const auto e = embedder.embed(clips[i]);
        for (std::size_t j = 0; j < e.size(); ++j) out.at2(i, j) = e[j];
    }
    return out;
}

}  // namespace rawflow
