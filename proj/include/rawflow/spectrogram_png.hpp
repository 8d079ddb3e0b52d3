#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "rawflow/audio_io.hpp"
#include "rawflow/common.hpp"
#include "rawflow/fft.hpp"

namespace rawflow {

namespace detail {

inline std::uint32_t crc32(const unsigned char* p, std::size_t n,
                           std::uint32_t crc = 0xffffffffu) {
    static const auto table = [] {
        std::vector<std::uint32_t> t(256);
        for (std::uint32_t i = 0; i < 256; ++i) {
            std::uint32_t c = i;
            for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xedb88320u ^ (c >> 1) : c >> 1;
            t[i] = c;
        }
        return t;
    }();
    for (std::size_t i = 0; i < n; ++i) crc = table[(crc ^ p[i]) & 0xff] ^ (crc >> 8);
    return crc;
}

inline void png_be32(std::vector<unsigned char>& v, std::uint32_t x) {
    v.push_back((x >> 24) & 0xff);
    v.push_back((x >> 16) & 0xff);
    v.push_back((x >> 8) & 0xff);
    v.push_back(x & 0xff);
}

inline void png_chunk(std::vector<unsigned char>& out, const char* type,
                      const std::vector<unsigned char>& body) {
    png_be32(out, static_cast<std::uint32_t>(body.size()));
    std::vector<unsigned char> tb(type, type + 4);
    tb.insert(tb.end(), body.begin(), body.end());
    out.insert(out.end(), tb.begin(), tb.end());
    png_be32(out, crc32(tb.data(), tb.size()) ^ 0xffffffffu);
}

// zlib stream with stored (uncompressed) deflate blocks
inline std::vector<unsigned char> zlib_store(const std::vector<unsigned char>& raw) {
    std::vector<unsigned char> z{0x78, 0x01};
    std::size_t pos = 0;
    do {
        const std::size_t len = std::min<std::size_t>(raw.size() - pos, 65535);
        const bool last = pos + len == raw.size();
        z.push_back(last ? 1 : 0);
        z.push_back(len & 0xff);
        z.push_back((len >> 8) & 0xff);
        z.push_back(~len & 0xff);
        z.push_back((~len >> 8) & 0xff);
        z.insert(z.end(), raw.begin() + pos, raw.begin() + pos + len);
        pos += len;
    } while (pos < raw.size());
    std::uint32_t s1 = 1, s2 = 0;
    for (unsigned char b : raw) {
        s1 = (s1 + b) % 65521;
        s2 = (s2 + s1) % 65521;
    }
    png_be32(z, (s2 << 16) | s1);
    return z;
}

}  // namespace detail

// 8-bit grayscale PNG, rows top to bottom.
inline void write_png_gray(const std::vector<unsigned char>& pixels, std::size_t width,
                           std::size_t height, const std::string& path) {
    if (pixels.size() != width * height || width == 0 || height == 0)
        throw precondition_error("write_png_gray: pixel buffer size mismatch");
    std::vector<unsigned char> out{0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
    std::vector<unsigned char> ihdr;
    detail::png_be32(ihdr, static_cast<std::uint32_t>(width));
    detail::png_be32(ihdr, static_cast<std::uint32_t>(height));
    ihdr.insert(ihdr.end(), {8, 0, 0, 0, 0});  // depth 8, grayscale
    detail::png_chunk(out, "IHDR", ihdr);

    std::vector<unsigned char> raw;
    raw.reserve(height * (width + 1));
    for (std::size_t y = 0; y < height; ++y) {
        raw.push_back(0);  // filter: none
        raw.insert(raw.end(), pixels.begin() + y * width, pixels.begin() + (y + 1) * width);
    }
    detail::png_chunk(out, "IDAT", detail::zlib_store(raw));
    detail::png_chunk(out, "IEND", {});

    std::ofstream f(path, std::ios::binary);
    if (!f) throw io_error("write_png_gray: cannot open " + path);
    f.write(reinterpret_cast<const char*>(out.data()),
            static_cast<std::streamsize>(out.size()));
    if (!f) throw io_error("write_png_gray: write failed for " + path);
}

// Log-magnitude STFT image: frequency on the vertical axis (low at bottom),
// time on the horizontal, 60 dB display range.
inline void write_spectrogram_png(const WaveformBuffer& buf, const std::string& path,
                                  std::size_t n_fft = 512, std::size_t hop = 128) {
    if (buf.samples.size() < n_fft) {
        // short clips get a single zero-padded frame
        n_fft = 1;
        while (n_fft < buf.samples.size()) n_fft <<= 1;
        hop = std::max<std::size_t>(n_fft / 4, 1);
    }
    std::vector<std::vector<double>> cols;
    std::vector<double> frame(n_fft);
    for (std::size_t start = 0; start < buf.samples.size();
         start += hop) {
        for (std::size_t i = 0; i < n_fft; ++i)
            frame[i] = start + i < buf.samples.size()
                           ? buf.samples[start + i] *
                                 (0.5 - 0.5 * std::cos(2.0 * M_PI * i / (n_fft - 1)))
                           : 0.0;
        cols.push_back(magnitude_spectrum(frame, n_fft));
        if (start + n_fft >= buf.samples.size()) break;
    }
    const std::size_t height = n_fft / 2 + 1;
    const std::size_t width = cols.size();
    double peak = 1e-12;
    for (const auto& c : cols)
        for (double v : c) peak = std::max(peak, v);
    std::vector<unsigned char> px(width * height);
    for (std::size_t x = 0; x < width; ++x)
        for (std::size_t y = 0; y < height; ++y) {
            const double db = 20.0 * std::log10(std::max(cols[x][y], 1e-12) / peak);
            const double v = std::clamp((db + 60.0) / 60.0, 0.0, 1.0);
            px[(height - 1 - y) * width + x] = static_cast<unsigned char>(std::lround(255.0 * v));
        }
    write_png_gray(px, width, height, path);
}

}  // namespace rawflow
