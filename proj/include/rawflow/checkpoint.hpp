#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include "rawflow/common.hpp"
#include "rawflow/mmdit.hpp"

namespace rawflow {

// Versioned binary container: little-endian, name-length-prefixed tensor
// records. Layout:
//   "RFCK" | u32 version | u32 meta_len | meta (key=value lines)
//   u64 n_live  | n_live  records
//   u64 n_ema   | n_ema   records
// record: u32 name_len | name | u32 ndim | u64 dims[ndim] | f64 data[]
struct Checkpoint {
    ModelConfig config;
    ModelParams params;
    ModelParams ema;
    std::map<std::string, std::string> meta;  // run metadata (sample rate, C, ...)
};

namespace detail {

inline void wr(std::ofstream& f, const void* p, std::size_t n) {
    f.write(reinterpret_cast<const char*>(p), static_cast<std::streamsize>(n));
}

template <class T>
void wr_pod(std::ofstream& f, T v) {
    wr(f, &v, sizeof(T));
}

inline void rd(std::ifstream& f, void* p, std::size_t n) {
    f.read(reinterpret_cast<char*>(p), static_cast<std::streamsize>(n));
    if (!f) throw parse_error("checkpoint: truncated file");
}

template <class T>
T rd_pod(std::ifstream& f) {
    T v;
    rd(f, &v, sizeof(T));
    return v;
}

inline void write_tensors(std::ofstream& f, const ModelParams& p) {
    wr_pod<std::uint64_t>(f, p.tensors.size());
    for (const auto& [name, t] : p.tensors) {
        wr_pod<std::uint32_t>(f, static_cast<std::uint32_t>(name.size()));
        wr(f, name.data(), name.size());
        wr_pod<std::uint32_t>(f, static_cast<std::uint32_t>(t.ndim()));
        for (std::size_t i = 0; i < t.ndim(); ++i)
            wr_pod<std::uint64_t>(f, t.dim(i));
        wr(f, t.data(), t.size() * sizeof(double));
    }
}

inline ModelParams read_tensors(std::ifstream& f) {
    ModelParams p;
    const std::uint64_t n = rd_pod<std::uint64_t>(f);
    for (std::uint64_t i = 0; i < n; ++i) {
        const std::uint32_t name_len = rd_pod<std::uint32_t>(f);
        std::string name(name_len, '\0');
        rd(f, name.data(), name_len);
        const std::uint32_t ndim = rd_pod<std::uint32_t>(f);
        std::vector<std::size_t> shape(ndim);
        for (auto& d : shape) d = static_cast<std::size_t>(rd_pod<std::uint64_t>(f));
        Tensor t(shape);
        rd(f, t.data(), t.size() * sizeof(double));
        p.tensors[name] = std::move(t);
    }
    return p;
}

inline std::string encode_meta(const std::map<std::string, std::string>& m) {
    std::ostringstream os;
    for (const auto& [k, v] : m) os << k << '=' << v << '\n';
    return os.str();
}

inline std::map<std::string, std::string> decode_meta(const std::string& blob) {
    std::map<std::string, std::string> m;
    std::istringstream is(blob);
    std::string line;
    while (std::getline(is, line)) {
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw parse_error("checkpoint: bad meta line: " + line);
        m[line.substr(0, eq)] = line.substr(eq + 1);
    }
    return m;
}

}  // namespace detail

inline std::map<std::string, std::string> config_to_meta(const ModelConfig& cfg) {
    std::map<std::string, std::string> m;
    m["model.d"] = std::to_string(cfg.d);
    m["model.heads"] = std::to_string(cfg.heads);
    m["model.l_joint"] = std::to_string(cfg.l_joint);
    m["model.l_fused"] = std::to_string(cfg.l_fused);
    m["model.samples_per_token"] = std::to_string(cfg.samples_per_token);
    m["model.pred_mode"] = cfg.pred_mode == PredMode::x_pred ? "x" : "v";
    m["model.rope_base"] = std::to_string(cfg.rope_base);
    m["model.mlp_ratio"] = std::to_string(cfg.mlp_ratio);
    m["model.rope_in_fused"] = cfg.rope_in_fused ? "1" : "0";
    m["model.n_clip"] = std::to_string(cfg.enc.n_clip);
    m["model.n_sync"] = std::to_string(cfg.enc.n_sync);
    m["model.d_v"] = std::to_string(cfg.enc.d_v);
    m["model.d_s"] = std::to_string(cfg.enc.d_s);
    m["model.d_t"] = std::to_string(cfg.enc.d_t);
    m["model.num_classes"] = std::to_string(cfg.enc.num_classes);
    return m;
}

inline ModelConfig config_from_meta(const std::map<std::string, std::string>& m) {
    const auto get = [&](const std::string& k) -> const std::string& {
        auto it = m.find(k);
        if (it == m.end()) throw parse_error("checkpoint: missing meta key " + k);
        return it->second;
    };
    ModelConfig cfg;
    cfg.d = std::stoul(get("model.d"));
    cfg.heads = std::stoul(get("model.heads"));
    cfg.l_joint = std::stoul(get("model.l_joint"));
    cfg.l_fused = std::stoul(get("model.l_fused"));
    cfg.samples_per_token = std::stoul(get("model.samples_per_token"));
    cfg.pred_mode = get("model.pred_mode") == "x" ? PredMode::x_pred : PredMode::v_pred;
    cfg.rope_base = std::stod(get("model.rope_base"));
    cfg.mlp_ratio = std::stoul(get("model.mlp_ratio"));
    cfg.rope_in_fused = get("model.rope_in_fused") == "1";
    cfg.enc.n_clip = std::stoul(get("model.n_clip"));
    cfg.enc.n_sync = std::stoul(get("model.n_sync"));
    cfg.enc.d_v = std::stoul(get("model.d_v"));
    cfg.enc.d_s = std::stoul(get("model.d_s"));
    cfg.enc.d_t = std::stoul(get("model.d_t"));
    cfg.enc.num_classes = std::stoi(get("model.num_classes"));
    return cfg;
}

inline void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw io_error("save_checkpoint: cannot open " + path);
    f.write("RFCK", 4);
    detail::wr_pod<std::uint32_t>(f, 1u);
    auto meta = ckpt.meta;
    for (auto& [k, v] : config_to_meta(ckpt.config)) meta[k] = v;
    const std::string blob = detail::encode_meta(meta);
    detail::wr_pod<std::uint32_t>(f, static_cast<std::uint32_t>(blob.size()));
    detail::wr(f, blob.data(), blob.size());
    detail::write_tensors(f, ckpt.params);
    detail::write_tensors(f, ckpt.ema);
    if (!f) throw io_error("save_checkpoint: write failed for " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw io_error("load_checkpoint: cannot open " + path);
    char magic[4];
    detail::rd(f, magic, 4);
    if (std::memcmp(magic, "RFCK", 4) != 0)
        throw parse_error("load_checkpoint: bad magic in " + path);
    const std::uint32_t version = detail::rd_pod<std::uint32_t>(f);
    if (version != 1)
        throw parse_error("load_checkpoint: unsupported version " + std::to_string(version));
    const std::uint32_t meta_len = detail::rd_pod<std::uint32_t>(f);
    std::string blob(meta_len, '\0');
    detail::rd(f, blob.data(), meta_len);
    Checkpoint ckpt;
    ckpt.meta = detail::decode_meta(blob);
    ckpt.config = config_from_meta(ckpt.meta);
    ckpt.params = detail::read_tensors(f);
    ckpt.ema = detail::read_tensors(f);
    return ckpt;
}

}  // namespace rawflow
