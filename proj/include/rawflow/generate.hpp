#pragma once

#include <cstddef>
#include <vector>

#include "rawflow/audio_io.hpp"
#include "rawflow/common.hpp"
#include "rawflow/conditioning.hpp"
#include "rawflow/flowmatch.hpp"
#include "rawflow/loudness.hpp"
#include "rawflow/mmdit.hpp"
#include "rawflow/patch_grid.hpp"
#include "rawflow/rng.hpp"

namespace rawflow {

// Adapts a parameter set to the sampler's model concept. Conditions are
// ConditionBundle values; the null condition is the same bundle with both
// null flags raised.
struct SamplingModel {
    const ModelConfig* cfg = nullptr;
    const ModelParams* params = nullptr;
    PredMode mode = PredMode::x_pred;

    Tensor eval(const Tensor& x, double t, const ConditionBundle& cond) const {
        return forward_tensor(*cfg, *params, x, cond, t);
    }
};

inline ConditionBundle null_bundle(const ConditionBundle& bundle) {
    ConditionBundle out = bundle;
    out.visual_null = true;
    out.text_null = true;
    return out;
}

// Sample a C×D token tensor from noise under guidance.
inline Tensor generate_tokens(const ModelConfig& cfg, const ModelParams& params,
                              const ConditionBundle& bundle, const SamplerConfig& sampler,
                              Rng& rng, std::size_t c_tokens) {
    SamplingModel model{&cfg, &params, cfg.pred_mode};
    return euler_sample(model, bundle, null_bundle(bundle), sampler, rng,
                        {c_tokens, cfg.samples_per_token});
}

// Full output chain: sample tokens, unpatchify, undo the amplitude lift, and
// loudness-normalize (skipped for clips too short to measure).
inline WaveformBuffer generate_waveform(const ModelConfig& cfg, const ModelParams& params,
                                        const ConditionBundle& bundle,
                                        const SamplerConfig& sampler, Rng& rng,
                                        std::size_t c_tokens, int sample_rate,
                                        const LiftConfig& lift = {},
                                        double target_lufs = -23.0) {
    Tensor tokens = generate_tokens(cfg, params, bundle, sampler, rng, c_tokens);
    WaveformBuffer wav = unpatchify(TokenGrid::from_tensor(tokens, 0, sample_rate));
    wav = amplitude_unlift(wav, lift.s_a);
    if (wav.duration_s() >= 0.4) wav = normalize_loudness(wav, target_lufs);
    return wav;
}

}  // namespace rawflow
