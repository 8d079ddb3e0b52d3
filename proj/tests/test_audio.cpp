#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "rawflow/audio_io.hpp"
#include "rawflow/loudness.hpp"
#include "rawflow/rng.hpp"

using namespace rawflow;

namespace {

std::string tmp_path(const char* name) {
    return std::string("/tmp/rawflow_test_") + name;
}

WaveformBuffer sine(double freq, double amp, double seconds, int fs) {
    WaveformBuffer b;
    b.sample_rate = fs;
    const std::size_t n = static_cast<std::size_t>(seconds * fs);
    b.samples.resize(n);
    for (std::size_t i = 0; i < n; ++i)
        b.samples[i] = amp * std::sin(2.0 * M_PI * freq * i / fs);
    return b;
}

void write_raw(const std::string& path, const std::vector<unsigned char>& bytes) {
    std::ofstream f(path, std::ios::binary);
    f.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
}

// Minimal PCM16 WAV with explicit interleaved int16 frames.
std::vector<unsigned char> pcm16_wav(const std::vector<std::int16_t>& frames,
                                     std::uint16_t channels, std::uint32_t fs) {
    std::vector<unsigned char> v;
    auto u32 = [&](std::uint32_t x) { detail::wr_u32(v, x); };
    auto u16 = [&](std::uint16_t x) { detail::wr_u16(v, x); };
    const std::uint32_t data_len = static_cast<std::uint32_t>(frames.size() * 2);
    v.insert(v.end(), {'R', 'I', 'F', 'F'});
    u32(36 + data_len);
    v.insert(v.end(), {'W', 'A', 'V', 'E', 'f', 'm', 't', ' '});
    u32(16);
    u16(1);
    u16(channels);
    u32(fs);
    u32(fs * 2 * channels);
    u16(static_cast<std::uint16_t>(2 * channels));
    u16(16);
    v.insert(v.end(), {'d', 'a', 't', 'a'});
    u32(data_len);
    for (std::int16_t s : frames) u16(static_cast<std::uint16_t>(s));
    return v;
}

}  // namespace

TEST_CASE("wav reading") {
    SECTION("int16 minimum maps to -1.0") {
        const auto path = tmp_path("min16.wav");
        write_raw(path, pcm16_wav({-32768, 32767, 0}, 1, 16000));
        const auto buf = read_wav(path);
        REQUIRE(buf.samples.size() == 3);
        CHECK(buf.samples[0] == -1.0);
        CHECK(buf.samples[1] == Catch::Approx(32767.0 / 32768.0));
        CHECK(buf.samples[2] == 0.0);
        CHECK(buf.sample_rate == 16000);
    }
    SECTION("stereo averages to mono") {
        const auto path = tmp_path("stereo.wav");
        write_raw(path, pcm16_wav({16384, -16384}, 2, 44100));
        const auto buf = read_wav(path);
        REQUIRE(buf.samples.size() == 1);
        CHECK(buf.samples[0] == Catch::Approx(0.0).margin(1e-12));
    }
    SECTION("truncated chunk is a parse error") {
        const auto path = tmp_path("trunc.wav");
        auto bytes = pcm16_wav({1, 2, 3, 4}, 1, 16000);
        bytes.resize(bytes.size() - 3);
        write_raw(path, bytes);
        CHECK_THROWS_AS(read_wav(path), parse_error);
    }
    SECTION("missing file is an io error") {
        CHECK_THROWS_AS(read_wav("/tmp/rawflow_no_such_file.wav"), io_error);
    }
    SECTION("unsupported codec is a capability error") {
        const auto path = tmp_path("alaw.wav");
        auto bytes = pcm16_wav({0, 0}, 1, 8000);
        bytes[20] = 6;  // fmt tag: A-law
        write_raw(path, bytes);
        CHECK_THROWS_AS(read_wav(path), capability_error);
    }
}

TEST_CASE("wav writing") {
    SECTION("roundtrip within quantization bound") {
        Rng rng(5);
        WaveformBuffer buf;
        buf.sample_rate = 16000;
        for (int i = 0; i < 500; ++i) buf.samples.push_back(rng.uniform(-1.0, 1.0));
        const auto path = tmp_path("round.wav");
        write_wav(buf, path);
        const auto back = read_wav(path);
        REQUIRE(back.samples.size() == buf.samples.size());
        for (std::size_t i = 0; i < buf.samples.size(); ++i)
            CHECK(std::fabs(back.samples[i] - buf.samples[i]) <= 1.0 / 32768.0);
    }
    SECTION("out-of-range samples clamp") {
        WaveformBuffer buf;
        buf.samples = {2.0, -2.0};
        const auto path = tmp_path("clamp.wav");
        write_wav(buf, path);
        const auto back = read_wav(path);
        CHECK(back.samples[0] == Catch::Approx(32767.0 / 32768.0));
        CHECK(back.samples[1] == -1.0);
    }
    SECTION("empty buffer rejected") {
        CHECK_THROWS_AS(write_wav(WaveformBuffer{}, tmp_path("empty.wav")),
                        precondition_error);
    }
    SECTION("float32 writer preserves lifted range") {
        WaveformBuffer buf;
        buf.samples = {2.5, -2.5, 0.125};
        const auto path = tmp_path("f32.wav");
        write_wav_f32(buf, path);
        const auto back = read_wav(path);
        REQUIRE(back.samples.size() == 3);
        CHECK(back.samples[0] == Catch::Approx(2.5));
        CHECK(back.samples[1] == Catch::Approx(-2.5));
        CHECK(back.samples[2] == 0.125);
    }
}

TEST_CASE("rms") {
    WaveformBuffer z;
    z.samples.assign(100, 0.0);
    CHECK(rms(z) == 0.0);
    WaveformBuffer c;
    c.samples.assign(100, 0.1);
    CHECK(rms(c) == Catch::Approx(0.1));
    CHECK(rms(sine(100.0, 1.0, 1.0, 16000)) == Catch::Approx(1.0 / std::sqrt(2.0)).margin(1e-4));
    CHECK_THROWS_AS(rms(WaveformBuffer{}), precondition_error);
}

TEST_CASE("amplitude lift") {
    SECTION("constant 0.1 lifts to 0.99") {
        WaveformBuffer c;
        c.samples.assign(64, 0.1);
        const auto out = amplitude_lift(c);
        for (double s : out.samples) CHECK(s == Catch::Approx(0.99));
    }
    SECTION("unit sine peak near 1.400") {
        const auto out = amplitude_lift(sine(100.0, 1.0, 1.0, 16000));
        double peak = 0.0;
        for (double s : out.samples) peak = std::max(peak, std::fabs(s));
        CHECK(peak == Catch::Approx(3.0 * 0.33 * std::sqrt(2.0)).margin(2e-3));
        CHECK(peak == Catch::Approx(1.400).margin(2e-3));
    }
    SECTION("lifted rms near 0.99 for unclamped signals") {
        Rng rng(9);
        WaveformBuffer b;
        for (int i = 0; i < 4000; ++i) b.samples.push_back(0.05 * rng.normal());
        const double r = rms(amplitude_lift(b));
        // gaussian tails do clip a little at ratio r*/rms
        CHECK(r == Catch::Approx(0.99).epsilon(0.02));
    }
    SECTION("near-silence skips the ratio") {
        WaveformBuffer b;
        b.samples.assign(32, 1e-9);
        const auto out = amplitude_lift(b);
        CHECK(out.samples[0] == Catch::Approx(3e-9));
    }
}

TEST_CASE("amplitude unlift") {
    SECTION("constant 3.0 with s_a=3 gives 1.0") {
        WaveformBuffer b;
        b.samples.assign(16, 3.0);
        const auto out = amplitude_unlift(b, 3.0);
        for (double s : out.samples) CHECK(s == 1.0);
    }
    SECTION("zeros stay zeros") {
        WaveformBuffer b;
        b.samples.assign(16, 0.0);
        const auto out = amplitude_unlift(b, 3.0);
        for (double s : out.samples) CHECK(s == 0.0);
    }
    SECTION("lift then unlift recovers the normalized signal") {
        const auto x = sine(200.0, 0.2, 0.5, 16000);
        const double ratio = 0.33 / rms(x);
        const auto back = amplitude_unlift(amplitude_lift(x), 3.0);
        for (std::size_t i = 0; i < x.samples.size(); ++i)
            CHECK(back.samples[i] == Catch::Approx(ratio * x.samples[i]).margin(1e-12));
    }
    SECTION("nonpositive scale rejected") {
        WaveformBuffer b;
        b.samples.assign(4, 1.0);
        CHECK_THROWS_AS(amplitude_unlift(b, 0.0), precondition_error);
    }
}

TEST_CASE("integrated loudness") {
    SECTION("silence sentinel") {
        WaveformBuffer z;
        z.sample_rate = 48000;
        z.samples.assign(48000, 0.0);
        CHECK(integrated_loudness(z) == kSilenceLoudness);
    }
    SECTION("997 Hz full-scale reference") {
        const auto s = sine(997.0, 1.0, 3.0, 48000);
        CHECK(integrated_loudness(s) == Catch::Approx(-3.01).margin(0.1));
    }
    SECTION("halving amplitude drops 6.02 dB") {
        const auto a = sine(997.0, 0.8, 3.0, 48000);
        auto b = a;
        for (double& s : b.samples) s *= 0.5;
        CHECK(integrated_loudness(a) - integrated_loudness(b) ==
              Catch::Approx(6.02).margin(0.05));
    }
    SECTION("works at 16 kHz too") {
        const auto s = sine(997.0, 1.0, 3.0, 16000);
        CHECK(integrated_loudness(s) == Catch::Approx(-3.01).margin(0.15));
    }
    SECTION("too short to gate") {
        WaveformBuffer b;
        b.sample_rate = 48000;
        b.samples.assign(4800, 0.5);  // 100 ms < one 400 ms block
        CHECK_THROWS_AS(integrated_loudness(b), precondition_error);
    }
}

TEST_CASE("loudness normalization") {
    SECTION("-20 LUFS source gains 10^(-3/20)") {
        // calibrate a sine to measure -20 LUFS, then normalize to -23
        auto s = sine(997.0, 1.0, 3.0, 48000);
        const double l0 = integrated_loudness(s);
        const double g0 = std::pow(10.0, (-20.0 - l0) / 20.0);
        for (double& v : s.samples) v *= g0;
        REQUIRE(integrated_loudness(s) == Catch::Approx(-20.0).margin(0.05));
        const auto out = normalize_loudness(s, -23.0);
        const double applied = out.samples[100] / s.samples[100];
        CHECK(applied == Catch::Approx(std::pow(10.0, -3.0 / 20.0)).margin(2e-3));
        CHECK(integrated_loudness(out) == Catch::Approx(-23.0).margin(0.2));
    }
    SECTION("already at target is a fixed point") {
        auto s = normalize_loudness(sine(997.0, 0.7, 3.0, 48000), -23.0);
        const auto again = normalize_loudness(s, -23.0);
        for (std::size_t i = 0; i < 100; ++i)
            CHECK(again.samples[i] == Catch::Approx(s.samples[i]).margin(1e-6));
    }
    SECTION("silence unchanged") {
        WaveformBuffer z;
        z.sample_rate = 48000;
        z.samples.assign(48000, 0.0);
        const auto out = normalize_loudness(z, -23.0);
        for (double s : out.samples) CHECK(s == 0.0);
    }
}
