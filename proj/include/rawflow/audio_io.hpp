#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "rawflow/common.hpp"

namespace rawflow {

// Mono sample sequence. Samples are nominally in [-1, 1] but may exceed that
// after amplitude lifting.
struct WaveformBuffer {
    std::vector<double> samples;
    int sample_rate = 16000;

    std::size_t length() const { return samples.size(); }
    double duration_s() const {
        return static_cast<double>(samples.size()) / sample_rate;
    }
};

struct LiftConfig {
    double r_star = 0.33;    // target RMS before scaling
    double s_a = 3.0;        // global amplitude scale
    double rms_floor = 1e-6; // below this, skip the RMS ratio
};

inline double rms(const WaveformBuffer& buf) {
    if (buf.samples.empty()) throw precondition_error("rms: empty buffer");
    double acc = 0.0;
    for (double s : buf.samples) acc += s * s;
    return std::sqrt(acc / static_cast<double>(buf.samples.size()));
}

// x_lift = s_a * clamp((r*/rms(x)) * x, -1, 1).
// Near-silent input (rms < floor) skips the ratio so quiet clips are not
// blown up by the division.
inline WaveformBuffer amplitude_lift(const WaveformBuffer& buf, const LiftConfig& cfg = {}) {
    if (buf.samples.empty()) throw precondition_error("amplitude_lift: empty buffer");
    const double r = rms(buf);
    const double ratio = (r < cfg.rms_floor) ? 1.0 : cfg.r_star / r;
    WaveformBuffer out;
    out.sample_rate = buf.sample_rate;
    out.samples.resize(buf.samples.size());
    for (std::size_t i = 0; i < buf.samples.size(); ++i)
        out.samples[i] = cfg.s_a * std::clamp(ratio * buf.samples[i], -1.0, 1.0);
    return out;
}

inline WaveformBuffer amplitude_unlift(const WaveformBuffer& buf, double s_a) {
    if (s_a <= 0.0) throw precondition_error("amplitude_unlift: s_a must be positive");
    WaveformBuffer out = buf;
    for (double& s : out.samples) s /= s_a;
    return out;
}

// ---- RIFF/WAVE --------------------------------------------------------

namespace detail {

inline std::uint32_t rd_u32(const unsigned char* p) {
    return std::uint32_t(p[0]) | std::uint32_t(p[1]) << 8 | std::uint32_t(p[2]) << 16 |
           std::uint32_t(p[3]) << 24;
}
inline std::uint16_t rd_u16(const unsigned char* p) {
    return std::uint16_t(p[0]) | std::uint16_t(p[1]) << 8;
}
inline void wr_u32(std::vector<unsigned char>& v, std::uint32_t x) {
    v.push_back(x & 0xff);
    v.push_back((x >> 8) & 0xff);
    v.push_back((x >> 16) & 0xff);
    v.push_back((x >> 24) & 0xff);
}
inline void wr_u16(std::vector<unsigned char>& v, std::uint16_t x) {
    v.push_back(x & 0xff);
    v.push_back((x >> 8) & 0xff);
}

}  // namespace detail

// Reads PCM16 or IEEE float32, 1 or 2 channels. Stereo is averaged to mono;
// 16-bit samples map to value/32768.
inline WaveformBuffer read_wav(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw io_error("read_wav: cannot open " + path);
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(f)),
                                     std::istreambuf_iterator<char>());
    if (bytes.size() < 12 || std::memcmp(bytes.data(), "RIFF", 4) != 0 ||
        std::memcmp(bytes.data() + 8, "WAVE", 4) != 0)
        throw parse_error("read_wav: not a RIFF/WAVE file: " + path);

    std::uint16_t format = 0, channels = 0, bits = 0;
    std::uint32_t sample_rate = 0;
    const unsigned char* data_ptr = nullptr;
    std::size_t data_len = 0;
    bool have_fmt = false;

    std::size_t pos = 12;
    while (pos + 8 <= bytes.size()) {
        const char* id = reinterpret_cast<const char*>(bytes.data() + pos);
        const std::uint32_t len = detail::rd_u32(bytes.data() + pos + 4);
        if (pos + 8 + len > bytes.size())
            throw parse_error("read_wav: truncated chunk in " + path);
        const unsigned char* body = bytes.data() + pos + 8;
        if (std::memcmp(id, "fmt ", 4) == 0) {
            if (len < 16) throw parse_error("read_wav: short fmt chunk");
            format = detail::rd_u16(body);
            channels = detail::rd_u16(body + 2);
            sample_rate = detail::rd_u32(body + 4);
            bits = detail::rd_u16(body + 14);
            have_fmt = true;
        } else if (std::memcmp(id, "data", 4) == 0) {
            data_ptr = body;
            data_len = len;
        }
        pos += 8 + len + (len & 1);  // chunks are word-aligned
    }
    if (!have_fmt || data_ptr == nullptr)
        throw parse_error("read_wav: missing fmt or data chunk in " + path);
    if (channels < 1 || channels > 2)
        throw capability_error("read_wav: only mono/stereo supported");

    const bool pcm16 = (format == 1 && bits == 16);
    const bool f32 = (format == 3 && bits == 32);
    if (!pcm16 && !f32)
        throw capability_error("read_wav: unsupported codec (need PCM16 or float32)");

    const std::size_t bytes_per = (pcm16 ? 2u : 4u) * channels;
    const std::size_t frames = data_len / bytes_per;
    WaveformBuffer buf;
    buf.sample_rate = static_cast<int>(sample_rate);
    buf.samples.resize(frames);
    for (std::size_t i = 0; i < frames; ++i) {
        double acc = 0.0;
        for (std::uint16_t c = 0; c < channels; ++c) {
            const unsigned char* p = data_ptr + i * bytes_per + c * (pcm16 ? 2 : 4);
            if (pcm16) {
                const std::int16_t v =
                    static_cast<std::int16_t>(detail::rd_u16(p));
                acc += static_cast<double>(v) / 32768.0;
            } else {
                float fv;
                std::memcpy(&fv, p, 4);
                acc += static_cast<double>(fv);
            }
        }
        buf.samples[i] = acc / channels;
    }
    return buf;
}

// IEEE float32 mono writer; keeps values outside [-1, 1] (lifted audio).
inline void write_wav_f32(const WaveformBuffer& buf, const std::string& path) {
    if (buf.samples.empty()) throw precondition_error("write_wav_f32: empty buffer");
    std::vector<unsigned char> out;
    const std::uint32_t data_len = static_cast<std::uint32_t>(buf.samples.size() * 4);
    out.insert(out.end(), {'R', 'I', 'F', 'F'});
    detail::wr_u32(out, 36 + data_len);
    out.insert(out.end(), {'W', 'A', 'V', 'E', 'f', 'm', 't', ' '});
    detail::wr_u32(out, 16);
    detail::wr_u16(out, 3);  // IEEE float
    detail::wr_u16(out, 1);  // mono
    detail::wr_u32(out, static_cast<std::uint32_t>(buf.sample_rate));
    detail::wr_u32(out, static_cast<std::uint32_t>(buf.sample_rate) * 4);
    detail::wr_u16(out, 4);
    detail::wr_u16(out, 32);
    out.insert(out.end(), {'d', 'a', 't', 'a'});
    detail::wr_u32(out, data_len);
    for (double s : buf.samples) {
        const float fv = static_cast<float>(s);
        unsigned char b[4];
        std::memcpy(b, &fv, 4);
        out.insert(out.end(), b, b + 4);
    }
    std::ofstream f(path, std::ios::binary);
    if (!f) throw io_error("write_wav_f32: cannot open " + path);
    f.write(reinterpret_cast<const char*>(out.data()),
            static_cast<std::streamsize>(out.size()));
    if (!f) throw io_error("write_wav_f32: write failed for " + path);
}

// 16-bit PCM mono writer; samples are clamped to [-1, 1] before quantization.
inline void write_wav(const WaveformBuffer& buf, const std::string& path) {
    if (buf.samples.empty()) throw precondition_error("write_wav: empty buffer");
    std::vector<unsigned char> out;
    const std::uint32_t data_len = static_cast<std::uint32_t>(buf.samples.size() * 2);
    out.insert(out.end(), {'R', 'I', 'F', 'F'});
    detail::wr_u32(out, 36 + data_len);
    out.insert(out.end(), {'W', 'A', 'V', 'E', 'f', 'm', 't', ' '});
    detail::wr_u32(out, 16);
    detail::wr_u16(out, 1);  // PCM
    detail::wr_u16(out, 1);  // mono
    detail::wr_u32(out, static_cast<std::uint32_t>(buf.sample_rate));
    detail::wr_u32(out, static_cast<std::uint32_t>(buf.sample_rate) * 2);
    detail::wr_u16(out, 2);
    detail::wr_u16(out, 16);
    out.insert(out.end(), {'d', 'a', 't', 'a'});
    detail::wr_u32(out, data_len);
    for (double s : buf.samples) {
        const double c = std::clamp(s, -1.0, 1.0);
        const long q = std::lround(c * 32768.0);
        const std::int16_t v = static_cast<std::int16_t>(std::clamp(q, -32768l, 32767l));
        detail::wr_u16(out, static_cast<std::uint16_t>(v));
    }
    std::ofstream f(path, std::ios::binary);
    if (!f) throw io_error("write_wav: cannot open " + path);
    f.write(reinterpret_cast<const char*>(out.data()),
            static_cast<std::streamsize>(out.size()));
    if (!f) throw io_error("write_wav: write failed for " + path);
}

}  // namespace rawflow
