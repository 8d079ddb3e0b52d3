#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "rawflow/common.hpp"
#include "rawflow/conditioning.hpp"
#include "rawflow/flowmatch.hpp"
#include "rawflow/rng.hpp"
#include "rawflow/tape.hpp"
#include "rawflow/tensor.hpp"

namespace rawflow {

struct ModelConfig {
    std::size_t d = 32;           // hidden dim
    std::size_t heads = 4;
    std::size_t l_joint = 1;
    std::size_t l_fused = 2;
    std::size_t samples_per_token = 8;  // D
    PredMode pred_mode = PredMode::x_pred;
    double rope_base = 10000.0;
    std::size_t mlp_ratio = 4;
    bool rope_in_fused = true;
    EncoderConfig enc;            // feature-provider dims (d_v, d_s, d_t, N_clip, N_sync, K)

    std::size_t head_dim() const { return d / heads; }

    void check() const {
        if (heads == 0 || d % heads != 0)
            throw precondition_error("ModelConfig: d must be divisible by heads");
        if (head_dim() % 2 != 0)
            throw precondition_error("ModelConfig: head dim must be even for RoPE");
        if (l_joint < 1 || l_fused < 1)
            throw precondition_error("ModelConfig: need at least one joint and one fused block");
        if (samples_per_token == 0)
            throw precondition_error("ModelConfig: D must be >= 1");
    }
};

// Named weight tensors; std::map gives a stable iteration order for the
// optimizer, checkpointing and hashing.
struct ModelParams {
    std::map<std::string, Tensor> tensors;

    Tensor& at(const std::string& name) {
        auto it = tensors.find(name);
        if (it == tensors.end()) throw precondition_error("ModelParams: missing " + name);
        return it->second;
    }
    const Tensor& at(const std::string& name) const {
        auto it = tensors.find(name);
        if (it == tensors.end()) throw precondition_error("ModelParams: missing " + name);
        return it->second;
    }

    bool all_finite() const {
        for (const auto& [k, v] : tensors)
            if (!v.all_finite()) return false;
        return true;
    }
};

// ---- small plain helpers ----------------------------------------------

inline Tensor layernorm(const Tensor& h, double eps = 1e-6) {
    const std::size_t d = h.shape().back();
    const std::size_t rows = h.size() / d;
    Tensor y(h.shape());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* x = h.data() + r * d;
        double mu = 0.0;
        for (std::size_t j = 0; j < d; ++j) mu += x[j];
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) var += (x[j] - mu) * (x[j] - mu);
        var /= static_cast<double>(d);
        const double is = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < d; ++j) y.data()[r * d + j] = (x[j] - mu) * is;
    }
    return y;
}

// gate ⊙ (scale ⊙ layernorm(h) + shift); scale/shift/gate broadcast over rows
// when given as a single row.
inline Tensor adaln_modulate(const Tensor& h, const Tensor& scale, const Tensor& shift,
                             const Tensor& gate) {
    const std::size_t rows = h.dim(0), d = h.dim(1);
    auto row_of = [&](const Tensor& m, std::size_t r) {
        if (m.dim(1) != d) throw dim_error("adaln_modulate: column mismatch");
        if (m.dim(0) == rows) return m.data() + r * d;
        if (m.dim(0) == 1) return m.data();
        throw dim_error("adaln_modulate: modulation not broadcastable");
    };
    Tensor ln = layernorm(h);
    Tensor out({rows, d});
    for (std::size_t r = 0; r < rows; ++r) {
        const double* s = row_of(scale, r);
        const double* b = row_of(shift, r);
        const double* g = row_of(gate, r);
        for (std::size_t j = 0; j < d; ++j)
            out.at2(r, j) = g[j] * (s[j] * ln.at2(r, j) + b[j]);
    }
    return out;
}

// Sinusoidal features of the flow timestep (t scaled by 1000, standard
// half-sin half-cos layout), shape 1×d.
inline Tensor timestep_features(double t, std::size_t d) {
    const std::size_t half = d / 2;
    Tensor out({1, d});
    for (std::size_t i = 0; i < half; ++i) {
        const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) /
                                     static_cast<double>(half));
        out[i] = std::sin(1000.0 * t * freq);
        out[half + i] = std::cos(1000.0 * t * freq);
    }
    if (d % 2 == 1) out[d - 1] = 0.0;
    return out;
}

// Visual tokens run at a coarser rate than audio tokens; they get rotary
// phases at audio positions j * (C / N_clip) so co-temporal tokens match.
inline double visual_rope_position(std::size_t visual_index, std::size_t c_tokens,
                                   std::size_t n_clip) {
    if (n_clip == 0) throw precondition_error("visual_rope_position: N_clip must be >= 1");
    return static_cast<double>(visual_index) * static_cast<double>(c_tokens) /
           static_cast<double>(n_clip);
}

// Angle tables for Tape::rope. Positions are per sequence row; columns are
// flat rotation pairs, heads being contiguous head_dim blocks.
struct RopeTables {
    Tensor cos_t, sin_t;  // L × d/2
};

inline RopeTables build_rope_tables(const std::vector<double>& positions, std::size_t d,
                                    std::size_t head_dim, double base) {
    if (head_dim % 2 != 0) throw precondition_error("build_rope_tables: head dim must be even");
    const std::size_t L = positions.size();
    const std::size_t pairs = d / 2;
    const std::size_t pairs_per_head = head_dim / 2;
    RopeTables rt{Tensor({L, pairs}), Tensor({L, pairs})};
    for (std::size_t l = 0; l < L; ++l)
        for (std::size_t p = 0; p < pairs; ++p) {
            const std::size_t i = p % pairs_per_head;
            const double angle =
                positions[l] *
                std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(head_dim));
            rt.cos_t.at2(l, p) = std::cos(angle);
            rt.sin_t.at2(l, p) = std::sin(angle);
        }
    return rt;
}

// Plain-tensor rotary transform for tests and non-tape callers.
inline Tensor rope_rotate(const Tensor& x, const std::vector<double>& positions,
                          std::size_t head_dim, double base) {
    ad::Tape tape;
    RopeTables rt = build_rope_tables(positions, x.dim(1), head_dim, base);
    ad::Var v = tape.rope(tape.constant(x), rt.cos_t, rt.sin_t);
    return tape.value(v);
}

// ---- parameter initialization -----------------------------------------

namespace detail {

inline void put_linear(ModelParams& p, const std::string& name, std::size_t in,
                       std::size_t out, Rng& rng, bool zero = false) {
    p.tensors[name + ".w"] =
        zero ? Tensor::zeros({in, out})
             : Tensor::randn({in, out}, rng, 1.0 / std::sqrt(static_cast<double>(in)));
    p.tensors[name + ".b"] = Tensor::zeros({out});
}

inline void put_conv(ModelParams& p, const std::string& name, std::size_t k,
                     std::size_t cin, std::size_t cout, Rng& rng, bool identity = false) {
    if (identity && cin == cout) {
        Tensor w({k, cin, cout});
        for (std::size_t c = 0; c < cin; ++c) w[(k / 2) * cin * cout + c * cout + c] = 1.0;
        p.tensors[name + ".w"] = std::move(w);
    } else {
        p.tensors[name + ".w"] = Tensor::randn(
            {k, cin, cout}, rng, 1.0 / std::sqrt(static_cast<double>(k * cin)));
    }
    p.tensors[name + ".b"] = Tensor::zeros({cout});
}

// AdaLN projection d -> 6d: [scale1 shift1 gate1 scale2 shift2 gate2].
// Gate columns are zero-initialized so residual branches start at identity.
inline void put_adaln(ModelParams& p, const std::string& name, std::size_t d, Rng& rng,
                      bool zero_gates) {
    Tensor w = Tensor::randn({d, 6 * d}, rng, 1.0 / std::sqrt(static_cast<double>(d)));
    if (zero_gates) {
        for (std::size_t i = 0; i < d; ++i)
            for (std::size_t j = 0; j < d; ++j) {
                w.at2(i, 2 * d + j) = 0.0;  // gate1
                w.at2(i, 5 * d + j) = 0.0;  // gate2
            }
    }
    p.tensors[name + ".w"] = std::move(w);
    p.tensors[name + ".b"] = Tensor::zeros({6 * d});
}

}  // namespace detail

// identity_init: zero AdaLN gates and zero output projection (training
// default). Gradient checking passes false so every path carries signal.
inline ModelParams init_params(const ModelConfig& cfg, Rng& rng, bool identity_init = true) {
    cfg.check();
    const std::size_t d = cfg.d;
    const std::size_t D = cfg.samples_per_token;
    ModelParams p;

    detail::put_linear(p, "audio_in.lift", D, d, rng);
    detail::put_conv(p, "audio_in.conv", 3, d, d, rng);
    detail::put_linear(p, "visual_in.lin", cfg.enc.d_v, d, rng);
    detail::put_conv(p, "visual_in.conv", 3, d, d, rng);
    detail::put_linear(p, "text_in", cfg.enc.d_t, d, rng);

    detail::put_linear(p, "cond.vis", cfg.enc.d_v, d, rng);
    detail::put_linear(p, "cond.text", cfg.enc.d_t, d, rng);
    detail::put_linear(p, "cond.sync", cfg.enc.d_s, d, rng);
    p.tensors["cond.sync_pos"] =
        identity_init ? Tensor::zeros({cfg.enc.n_sync, d})
                      : Tensor::randn({cfg.enc.n_sync, d}, rng, 0.02);

    // learned nulls start at zero
    p.tensors["null.visual"] = identity_init ? Tensor::zeros({1, cfg.enc.d_v})
                                             : Tensor::randn({1, cfg.enc.d_v}, rng, 0.02);
    p.tensors["null.sync"] = identity_init ? Tensor::zeros({1, cfg.enc.d_s})
                                           : Tensor::randn({1, cfg.enc.d_s}, rng, 0.02);
    p.tensors["null.text"] = identity_init ? Tensor::zeros({1, cfg.enc.d_t})
                                           : Tensor::randn({1, cfg.enc.d_t}, rng, 0.02);

    detail::put_linear(p, "time.l1", d, d, rng);
    detail::put_linear(p, "time.l2", d, d, rng);

    const std::size_t dm = cfg.mlp_ratio * d;
    for (std::size_t i = 0; i < cfg.l_joint; ++i) {
        const std::string pre = "joint" + std::to_string(i) + ".";
        detail::put_adaln(p, pre + "ada_a", d, rng, identity_init);
        detail::put_adaln(p, pre + "ada_c", d, rng, identity_init);
        detail::put_linear(p, pre + "wq", d, d, rng);
        detail::put_linear(p, pre + "wk", d, d, rng);
        detail::put_linear(p, pre + "wv", d, d, rng);
        detail::put_linear(p, pre + "wo", d, d, rng);
        detail::put_linear(p, pre + "mlp1", d, dm, rng);
        detail::put_linear(p, pre + "mlp2", dm, d, rng);
    }
    for (std::size_t i = 0; i < cfg.l_fused; ++i) {
        const std::string pre = "fused" + std::to_string(i) + ".";
        detail::put_adaln(p, pre + "ada", d, rng, identity_init);
        detail::put_linear(p, pre + "wq", d, d, rng);
        detail::put_linear(p, pre + "wk", d, d, rng);
        detail::put_linear(p, pre + "wv", d, d, rng);
        detail::put_linear(p, pre + "wo", d, d, rng);
        detail::put_linear(p, pre + "mlp1", d, dm, rng);
        detail::put_linear(p, pre + "mlp2", dm, d, rng);
    }

    // output block: AdaLN (scale/shift only) + linear d->D + conv1d k7
    p.tensors["out.ada.w"] = Tensor::randn({d, 2 * d}, rng, 1.0 / std::sqrt((double)d));
    p.tensors["out.ada.b"] = Tensor::zeros({2 * d});
    detail::put_linear(p, "out.lin", d, D, rng, /*zero=*/identity_init);
    detail::put_conv(p, "out.conv", 7, D, D, rng, /*identity=*/identity_init);
    return p;
}

// ---- forward on a tape -------------------------------------------------

// Binds a parameter set onto a tape once; forward() may then be called for
// several items (e.g. a whole batch) sharing the same parameter nodes.
class ModelOnTape {
public:
    ModelOnTape(ad::Tape& tape, const ModelConfig& cfg, const ModelParams& params,
                bool requires_grad)
        : tape_(tape), cfg_(cfg) {
        cfg_.check();
        for (const auto& [name, tensor] : params.tensors)
            vars_[name] = tape_.input(tensor, requires_grad);
    }

    const std::map<std::string, ad::Var>& param_vars() const { return vars_; }

    ad::Var forward(const Tensor& x_tokens, const ConditionBundle& bundle, double t) {
        const std::size_t C = x_tokens.dim(0);
        const std::size_t d = cfg_.d;
        if (x_tokens.dim(1) != cfg_.samples_per_token)
            throw dim_error("forward: token width != D");
        const std::size_t n_clip = cfg_.enc.n_clip;
        const std::size_t n_sync = cfg_.enc.n_sync;

        // null substitution (visual drop covers visual and sync jointly)
        ad::Var visual = bundle.visual_null
                             ? tile_row(vars_.at("null.visual"), n_clip)
                             : tape_.constant(bundle.visual_seq);
        ad::Var sync = bundle.visual_null ? tile_row(vars_.at("null.sync"), n_sync)
                                          : tape_.constant(bundle.sync_seq);
        ad::Var text = bundle.text_null ? vars_.at("null.text")
                                        : tape_.constant(bundle.text_emb);
        if (tape_.value(visual).dim(0) != n_clip || tape_.value(visual).dim(1) != cfg_.enc.d_v)
            throw dim_error("forward: visual feature shape mismatch");
        if (tape_.value(sync).dim(0) != n_sync || tape_.value(sync).dim(1) != cfg_.enc.d_s)
            throw dim_error("forward: sync feature shape mismatch");
        if (tape_.value(text).size() != cfg_.enc.d_t)
            throw dim_error("forward: text feature shape mismatch");

        // conditions
        ad::Var t_feat = tape_.constant(timestep_features(t, d));
        ad::Var time_h = linear(silu_linear(t_feat, "time.l1"), "time.l2");
        ad::Var c_g = tape_.add(
            tape_.add(tape_.mean_rows(linear(visual, "cond.vis")), linear(text, "cond.text")),
            time_h);  // 1×d
        ad::Var sync_h = tape_.add(linear(sync, "cond.sync"), vars_.at("cond.sync_pos"));
        ad::Var c_e = tape_.add_rowvec(
            tape_.gather_rows(sync_h, nearest_upsample_indices(n_sync, C)), c_g);  // C×d

        // input blocks
        ad::Var audio_h = tape_.conv1d_same(linear(tape_.constant(x_tokens), "audio_in.lift"),
                                            vars_.at("audio_in.conv.w"),
                                            vars_.at("audio_in.conv.b"));
        ad::Var vis_h = tape_.conv1d_same(linear(visual, "visual_in.lin"),
                                          vars_.at("visual_in.conv.w"),
                                          vars_.at("visual_in.conv.b"));
        ad::Var text_h = linear(text, "text_in");

        // rotary tables: audio at integer positions, visual rate-scaled, text excluded
        std::vector<double> joint_pos;
        for (std::size_t i = 0; i < C; ++i) joint_pos.push_back(static_cast<double>(i));
        for (std::size_t i = 0; i < n_clip; ++i)
            joint_pos.push_back(visual_rope_position(i, C, n_clip));
        joint_pos.push_back(0.0);  // text row: zero angle = no rotation
        RopeTables joint_rope = build_rope_tables(joint_pos, d, cfg_.head_dim(), cfg_.rope_base);

        std::vector<double> audio_pos;
        for (std::size_t i = 0; i < C; ++i) audio_pos.push_back(static_cast<double>(i));
        RopeTables fused_rope = build_rope_tables(audio_pos, d, cfg_.head_dim(), cfg_.rope_base);

        for (std::size_t blk = 0; blk < cfg_.l_joint; ++blk) {
            const std::string pre = "joint" + std::to_string(blk) + ".";
            auto mods_a = adaln_mods(c_e, pre + "ada_a");        // six C×d slices
            auto mods_c = adaln_mods(c_g, pre + "ada_c");        // six 1×d slices

            ad::Var a_in = modulate(audio_h, mods_a[0], mods_a[1]);
            ad::Var v_in = modulate_bcast(vis_h, mods_c[0], mods_c[1]);
            ad::Var t_in = modulate(text_h, mods_c[0], mods_c[1]);
            ad::Var seq = tape_.concat_rows({a_in, v_in, t_in});
            ad::Var att = attention(seq, pre, &joint_rope);
            ad::Var a_att = tape_.slice_rows(att, 0, C);
            ad::Var v_att = tape_.slice_rows(att, C, C + n_clip);
            ad::Var t_att = tape_.slice_rows(att, C + n_clip, C + n_clip + 1);
            audio_h = tape_.add(audio_h, tape_.mul(mods_a[2], a_att));
            vis_h = tape_.add(vis_h, mul_bcast(mods_c[2], v_att));
            text_h = tape_.add(text_h, tape_.mul(mods_c[2], t_att));

            audio_h = tape_.add(audio_h,
                                tape_.mul(mods_a[5], mlp(modulate(audio_h, mods_a[3], mods_a[4]), pre)));
            vis_h = tape_.add(vis_h,
                              mul_bcast(mods_c[5], mlp(modulate_bcast(vis_h, mods_c[3], mods_c[4]), pre)));
            text_h = tape_.add(text_h,
                               tape_.mul(mods_c[5], mlp(modulate(text_h, mods_c[3], mods_c[4]), pre)));
        }

        for (std::size_t blk = 0; blk < cfg_.l_fused; ++blk) {
            const std::string pre = "fused" + std::to_string(blk) + ".";
            auto mods = adaln_mods(c_e, pre + "ada");
            ad::Var a_in = modulate(audio_h, mods[0], mods[1]);
            ad::Var att = attention(a_in, pre, cfg_.rope_in_fused ? &fused_rope : nullptr);
            audio_h = tape_.add(audio_h, tape_.mul(mods[2], att));
            audio_h = tape_.add(audio_h,
                                tape_.mul(mods[5], mlp(modulate(audio_h, mods[3], mods[4]), pre)));
        }

        // output block
        ad::Var out_mods = tape_.add_rowvec(tape_.matmul(c_e, vars_.at("out.ada.w")),
                                            vars_.at("out.ada.b"));
        ad::Var o_scale = tape_.slice_cols(out_mods, 0, d);
        ad::Var o_shift = tape_.slice_cols(out_mods, d, 2 * d);
        ad::Var h = modulate(audio_h, o_scale, o_shift);
        ad::Var y = linear(h, "out.lin");
        y = tape_.conv1d_same(y, vars_.at("out.conv.w"), vars_.at("out.conv.b"));
        if (!tape_.value(y).all_finite())
            throw numeric_error("forward: non-finite model output");
        return y;
    }

private:
    ad::Var tile_row(ad::Var row, std::size_t n) {
        return tape_.gather_rows(row, std::vector<std::size_t>(n, 0));
    }

    ad::Var linear(ad::Var x, const std::string& name) {
        return tape_.add_rowvec(tape_.matmul(x, vars_.at(name + ".w")),
                                vars_.at(name + ".b"));
    }

    ad::Var silu_linear(ad::Var x, const std::string& name) {
        return tape_.silu(linear(x, name));
    }

    // six modulation slices [s1 b1 g1 s2 b2 g2], rows matching cond's rows
    std::array<ad::Var, 6> adaln_mods(ad::Var cond, const std::string& name) {
        const std::size_t d = cfg_.d;
        ad::Var m = tape_.add_rowvec(tape_.matmul(cond, vars_.at(name + ".w")),
                                     vars_.at(name + ".b"));
        std::array<ad::Var, 6> out;
        for (std::size_t i = 0; i < 6; ++i) out[i] = tape_.slice_cols(m, i * d, (i + 1) * d);
        return out;
    }

    // (1 + s) ⊙ LN(h) + b, same-shape modulation
    ad::Var modulate(ad::Var h, ad::Var s, ad::Var b) {
        return tape_.add(tape_.mul(tape_.layernorm_lastdim(h), tape_.add_scalar(s, 1.0)), b);
    }

    // modulation given as 1×d rows broadcast over h's rows
    ad::Var modulate_bcast(ad::Var h, ad::Var s, ad::Var b) {
        const std::size_t n = tape_.value(h).dim(0);
        return modulate(h, tile(s, n), tile(b, n));
    }

    ad::Var mul_bcast(ad::Var g, ad::Var h) {
        const std::size_t n = tape_.value(h).dim(0);
        return tape_.mul(tile(g, n), h);
    }

    ad::Var tile(ad::Var row, std::size_t n) {
        if (tape_.value(row).dim(0) == n) return row;
        return tile_row(row, n);
    }

    ad::Var attention(ad::Var x, const std::string& pre, const RopeTables* rope) {
        const std::size_t hd = cfg_.head_dim();
        ad::Var q = linear(x, pre + "wq");
        ad::Var k = linear(x, pre + "wk");
        ad::Var v = linear(x, pre + "wv");
        if (rope) {
            q = tape_.rope(q, rope->cos_t, rope->sin_t);
            k = tape_.rope(k, rope->cos_t, rope->sin_t);
        }
        std::vector<ad::Var> heads_out;
        const double sc = 1.0 / std::sqrt(static_cast<double>(hd));
        for (std::size_t h = 0; h < cfg_.heads; ++h) {
            ad::Var qh = tape_.slice_cols(q, h * hd, (h + 1) * hd);
            ad::Var kh = tape_.slice_cols(k, h * hd, (h + 1) * hd);
            ad::Var vh = tape_.slice_cols(v, h * hd, (h + 1) * hd);
            ad::Var scores = tape_.scale(tape_.matmul(qh, tape_.transpose(kh)), sc);
            ad::Var attn = tape_.softmax_lastdim(scores);
            heads_out.push_back(tape_.matmul(attn, vh));
        }
        return linear(tape_.concat_cols(heads_out), pre + "wo");
    }

    ad::Var mlp(ad::Var x, const std::string& pre) {
        return linear(tape_.gelu(linear(x, pre + "mlp1")), pre + "mlp2");
    }

    ad::Tape& tape_;
    ModelConfig cfg_;
    std::map<std::string, ad::Var> vars_;
};

// Single inference forward without gradients.
inline Tensor forward_tensor(const ModelConfig& cfg, const ModelParams& params,
                             const Tensor& x_tokens, const ConditionBundle& bundle,
                             double t) {
    ad::Tape tape;
    ModelOnTape model(tape, cfg, params, /*requires_grad=*/false);
    return tape.value(model.forward(x_tokens, bundle, t));
}

}  // namespace rawflow
