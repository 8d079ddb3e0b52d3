#pragma once

#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include "rawflow/common.hpp"
#include "rawflow/rng.hpp"
#include "rawflow/tape.hpp"
#include "rawflow/tensor.hpp"

namespace rawflow {

// Toy dataset semantics: a class label plus event onsets inside the clip.
struct EventSpec {
    int class_id = 0;
    std::vector<double> event_times;  // seconds
    double clip_len = 8.0;            // seconds

    void check() const {
        if (clip_len <= 0.0) throw precondition_error("EventSpec: clip_len must be > 0");
        for (double t : event_times)
            if (t < 0.0 || t >= clip_len)
                throw precondition_error("EventSpec: event time outside clip");
    }

    // Line format: class_id,time1,time2,...
    std::string to_line() const {
        std::ostringstream os;
        os << class_id;
        for (double t : event_times) os << ',' << t;
        return os.str();
    }

    static EventSpec from_line(const std::string& line, double clip_len) {
        EventSpec spec;
        spec.clip_len = clip_len;
        std::istringstream is(line);
        std::string field;
        if (!std::getline(is, field, ','))
            throw parse_error("EventSpec: empty manifest line");
        try {
            spec.class_id = std::stoi(field);
        } catch (const std::exception&) {
            throw parse_error("EventSpec: bad class id '" + field + "'");
        }
        while (std::getline(is, field, ',')) {
            try {
                spec.event_times.push_back(std::stod(field));
            } catch (const std::exception&) {
                throw parse_error("EventSpec: bad event time '" + field + "'");
            }
        }
        spec.check();
        return spec;
    }
};

// Feature streams feeding the model. When a null flag is set the model
// substitutes its learned null embeddings for the corresponding stream(s);
// visual_null covers the visual and sync streams jointly.
struct ConditionBundle {
    Tensor visual_seq;  // N_clip × d_v
    Tensor sync_seq;    // N_sync × d_s
    Tensor text_emb;    // 1 × d_t
    bool visual_null = false;
    bool text_null = false;
};

namespace detail {

// splitmix64-style mix for derived seeds
inline std::uint64_t seed_mix(std::uint64_t a, std::uint64_t b) {
    std::uint64_t z = a + 0x9e3779b97f4a7c15ull * (b + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

inline std::size_t event_frame(double t, double clip_len, std::size_t n_frames) {
    auto f = static_cast<std::size_t>(t / clip_len * static_cast<double>(n_frames));
    return f < n_frames ? f : n_frames - 1;
}

}  // namespace detail

// Deterministic stand-in for a frozen visual encoder: a class-dependent base
// vector per frame plus a bump on frames covering event times.
inline Tensor synth_visual_features(const EventSpec& spec, std::size_t n_clip,
                                    std::size_t d_v, std::uint64_t seed) {
    spec.check();
    if (n_clip < 1) throw precondition_error("synth_visual_features: N_clip must be >= 1");
    Rng base_rng(detail::seed_mix(seed, 0x1000 + spec.class_id));
    Rng bump_rng(detail::seed_mix(seed, 0x2000));
    std::vector<double> base(d_v), bump(d_v);
    for (auto& v : base) v = base_rng.normal();
    for (auto& v : bump) v = bump_rng.normal();
    Tensor out({n_clip, d_v});
    for (std::size_t i = 0; i < n_clip; ++i)
        for (std::size_t j = 0; j < d_v; ++j) out.at2(i, j) = base[j];
    for (double t : spec.event_times) {
        const std::size_t f = detail::event_frame(t, spec.clip_len, n_clip);
        for (std::size_t j = 0; j < d_v; ++j) out.at2(f, j) += bump[j];
    }
    return out;
}

// Sync stand-in: flat zeros with a one-hot-like bump at event frames.
inline Tensor synth_sync_features(const EventSpec& spec, std::size_t n_sync,
                                  std::size_t d_s, std::uint64_t seed) {
    spec.check();
    if (n_sync < 1) throw precondition_error("synth_sync_features: N_sync must be >= 1");
    Rng bump_rng(detail::seed_mix(seed, 0x3000));
    std::vector<double> bump(d_s);
    for (auto& v : bump) v = bump_rng.normal();
    Tensor out({n_sync, d_s});
    for (double t : spec.event_times) {
        const std::size_t f = detail::event_frame(t, spec.clip_len, n_sync);
        for (std::size_t j = 0; j < d_s; ++j) out.at2(f, j) += bump[j];
    }
    return out;
}

// Fixed per-class embedding table (deterministic lookup).
inline Tensor encode_text_label(int class_id, int num_classes, std::size_t d_t) {
    if (class_id < 0 || class_id >= num_classes)
        throw precondition_error("encode_text_label: class id out of range");
    Rng rng(detail::seed_mix(0x7e87u, static_cast<std::uint64_t>(class_id)));
    Tensor out({1, d_t});
    for (std::size_t j = 0; j < d_t; ++j) out[j] = rng.normal();
    return out;
}

struct EncoderConfig {
    std::size_t n_clip = 8;
    std::size_t n_sync = 8;   // 192 at full scale
    std::size_t d_v = 16;
    std::size_t d_s = 16;
    std::size_t d_t = 16;
    int num_classes = 4;
};

inline ConditionBundle make_bundle(const EventSpec& spec, const EncoderConfig& cfg,
                                   std::uint64_t seed) {
    ConditionBundle b;
    b.visual_seq = synth_visual_features(spec, cfg.n_clip, cfg.d_v, seed);
    b.sync_seq = synth_sync_features(spec, cfg.n_sync, cfg.d_s, seed);
    b.text_emb = encode_text_label(spec.class_id, cfg.num_classes, cfg.d_t);
    return b;
}

// Nearest upsampling of sync rows onto the audio token axis.
inline std::vector<std::size_t> nearest_upsample_indices(std::size_t n_sync,
                                                         std::size_t c_tokens) {
    std::vector<std::size_t> idx(c_tokens);
    for (std::size_t j = 0; j < c_tokens; ++j) idx[j] = j * n_sync / c_tokens;
    return idx;
}

// Projections of the raw feature streams into model dimension d, plus the
// learnable per-segment sync positional table.
struct CondProjections {
    Tensor vis_w, vis_b;    // d_v×d, d
    Tensor text_w, text_b;  // d_t×d, d
    Tensor sync_w, sync_b;  // d_s×d, d
    Tensor sync_pos;        // N_sync×d
};

struct AssembledConditions {
    Tensor c_g;  // 1 × d
    Tensor c_e;  // C × d
};

// c_g = mean-pool(project(visual)) + project(text) + timestep_emb
// c_e[j] = c_g + (project(sync) + sync_pos)[floor(j*N_sync/C)]
inline AssembledConditions assemble_conditions(const ConditionBundle& bundle,
                                               const CondProjections& proj,
                                               const Tensor& timestep_emb,
                                               std::size_t c_tokens) {
    const std::size_t d = proj.vis_w.dim(1);
    if (timestep_emb.size() != d)
        throw dim_error("assemble_conditions: timestep embedding dim mismatch");

    Tensor vis_h = ad::mm(bundle.visual_seq, proj.vis_w);
    const std::size_t n_clip = vis_h.dim(0);
    Tensor c_g({1, d});
    for (std::size_t i = 0; i < n_clip; ++i)
        for (std::size_t j = 0; j < d; ++j) c_g[j] += vis_h.at2(i, j) + proj.vis_b[j];
    for (std::size_t j = 0; j < d; ++j) c_g[j] /= static_cast<double>(n_clip);

    Tensor text_h = ad::mm(bundle.text_emb, proj.text_w);
    for (std::size_t j = 0; j < d; ++j)
        c_g[j] += text_h[j] + proj.text_b[j] + timestep_emb[j];

    Tensor sync_h = ad::mm(bundle.sync_seq, proj.sync_w);
    const std::size_t n_sync = sync_h.dim(0);
    if (proj.sync_pos.dim(0) != n_sync)
        throw dim_error("assemble_conditions: sync_pos row mismatch");
    for (std::size_t i = 0; i < n_sync; ++i)
        for (std::size_t j = 0; j < d; ++j)
            sync_h.at2(i, j) += proj.sync_b[j] + proj.sync_pos.at2(i, j);

    const auto idx = nearest_upsample_indices(n_sync, c_tokens);
    Tensor c_e({c_tokens, d});
    for (std::size_t i = 0; i < c_tokens; ++i)
        for (std::size_t j = 0; j < d; ++j)
            c_e.at2(i, j) = c_g[j] + sync_h.at2(idx[i], j);

    return {std::move(c_g), std::move(c_e)};
}

// CFG condition dropout: visual drop nulls the visual and sync streams
// jointly; text drop nulls the caption embedding.
inline ConditionBundle drop_conditions(const ConditionBundle& bundle, Rng& rng,
                                       double p_visual = 0.1, double p_text = 0.1) {
    if (p_visual < 0.0 || p_visual > 1.0 || p_text < 0.0 || p_text > 1.0)
        throw precondition_error("drop_conditions: probabilities must be in [0,1]");
    ConditionBundle out = bundle;
    if (rng.bernoulli(p_visual)) out.visual_null = true;
    if (rng.bernoulli(p_text)) out.text_null = true;
    return out;
}

// T2A mode: visual pathways are always nulled.
inline ConditionBundle force_t2a(const ConditionBundle& bundle) {
    ConditionBundle out = bundle;
    out.visual_null = true;
    return out;
}

}  // namespace rawflow
