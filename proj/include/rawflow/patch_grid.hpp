#pragma once

#include <cstddef>
#include <vector>

#include "rawflow/audio_io.hpp"
#include "rawflow/common.hpp"
#include "rawflow/tensor.hpp"

namespace rawflow {

// C×D token grid: row c holds samples [c*D, (c+1)*D) of the padded waveform.
// pad_len trailing zeros were appended; C*D - pad_len == original length.
struct TokenGrid {
    std::size_t rows = 0;   // C, token count
    std::size_t cols = 0;   // D, samples per token
    std::vector<double> data;  // C*D, row-major
    std::size_t pad_len = 0;
    int sample_rate = 16000;

    void check() const {
        if (cols == 0 || pad_len >= cols)
            throw precondition_error("TokenGrid: pad_len must be in [0, D)");
        if (data.size() != rows * cols)
            throw precondition_error("TokenGrid: data size != C*D");
    }

    Tensor as_tensor() const { return Tensor({rows, cols}, data); }

    static TokenGrid from_tensor(const Tensor& t, std::size_t pad_len, int sample_rate) {
        TokenGrid g;
        g.rows = t.dim(0);
        g.cols = t.dim(1);
        g.data = t.vec();
        g.pad_len = pad_len;
        g.sample_rate = sample_rate;
        g.check();
        return g;
    }
};

// Lossless reshape: C = ceil(T/D), zero padding on the tail.
inline TokenGrid patchify(const WaveformBuffer& buf, std::size_t samples_per_token) {
    if (samples_per_token == 0) throw precondition_error("patchify: D must be >= 1");
    if (buf.samples.empty()) throw precondition_error("patchify: empty buffer");
    const std::size_t T = buf.samples.size();
    const std::size_t D = samples_per_token;
    const std::size_t C = (T + D - 1) / D;
    TokenGrid g;
    g.rows = C;
    g.cols = D;
    g.pad_len = C * D - T;
    g.sample_rate = buf.sample_rate;
    g.data.assign(C * D, 0.0);
    for (std::size_t i = 0; i < T; ++i) g.data[i] = buf.samples[i];
    return g;
}

// Exact inverse: unpatchify(patchify(x, D)) == x bit-for-bit.
inline WaveformBuffer unpatchify(const TokenGrid& grid) {
    grid.check();
    WaveformBuffer buf;
    buf.sample_rate = grid.sample_rate;
    const std::size_t T = grid.rows * grid.cols - grid.pad_len;
    buf.samples.assign(grid.data.begin(), grid.data.begin() + T);
    return buf;
}

inline double token_duration_ms(std::size_t samples_per_token, int sample_rate) {
    if (samples_per_token == 0 || sample_rate <= 0)
        throw precondition_error("token_duration_ms: positive inputs required");
    return 1000.0 * static_cast<double>(samples_per_token) / sample_rate;
}

}  // namespace rawflow
