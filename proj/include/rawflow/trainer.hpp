#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "rawflow/audio_io.hpp"
#include "rawflow/common.hpp"
#include "rawflow/conditioning.hpp"
#include "rawflow/flowmatch.hpp"
#include "rawflow/mmdit.hpp"
#include "rawflow/patch_grid.hpp"
#include "rawflow/rng.hpp"

namespace rawflow {

struct TrainConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double adam_eps = 1e-8;
    double weight_decay = 0.0;   // decoupled; 0 at toy scale
    int warmup_steps = 0;
    double clip_norm = 1.0;
    double ema_decay = 0.9999;
    int batch_size = 16;
    int steps = 2000;
    std::uint64_t seed = 0;
    LossMode loss_mode = LossMode::v_loss;
    double p_drop_visual = 0.1;
    double p_drop_text = 0.1;
    TimestepConfig timestep;

    void check() const {
        if (ema_decay <= 0.0 || ema_decay >= 1.0)
            throw precondition_error("TrainConfig: ema_decay must be in (0,1)");
        if (clip_norm <= 0.0) throw precondition_error("TrainConfig: clip_norm must be > 0");
        if (batch_size < 1 || steps < 1)
            throw precondition_error("TrainConfig: batch_size and steps must be >= 1");
        timestep.check();
    }
};

// ---- synthetic dataset -------------------------------------------------

struct ToyDatasetSpec {
    int num_classes = 4;
    std::vector<double> class_freqs = {1000.0, 2000.0, 3000.0, 4000.0};  // Hz
    double tone_amp = 0.5;
    double click_amp = 0.15;
    int max_events = 2;
    double clip_len = 0.016;  // seconds
    int sample_rate = 16000;
    int size = 64;

    void check() const {
        if (static_cast<int>(class_freqs.size()) != num_classes)
            throw precondition_error("ToyDatasetSpec: one frequency per class");
        for (double f : class_freqs)
            if (f >= sample_rate / 2.0)
                throw precondition_error("ToyDatasetSpec: frequency at or above Nyquist");
        if (size < 1 || clip_len <= 0.0)
            throw precondition_error("ToyDatasetSpec: bad size or clip length");
    }
};

struct ToyItem {
    WaveformBuffer wav;
    EventSpec events;
};

// Class-frequency sine with random phase plus short clicks at random event
// times. Deterministic per seed; classes cycle so the set stays balanced.
inline std::vector<ToyItem> make_toy_dataset(const ToyDatasetSpec& spec, std::uint64_t seed) {
    spec.check();
    Rng rng(seed);
    const std::size_t n_samples =
        static_cast<std::size_t>(std::lround(spec.clip_len * spec.sample_rate));
    std::vector<ToyItem> items;
    items.reserve(spec.size);
    for (int i = 0; i < spec.size; ++i) {
        ToyItem item;
        item.events.class_id = i % spec.num_classes;
        item.events.clip_len = spec.clip_len;
        item.wav.sample_rate = spec.sample_rate;
        item.wav.samples.resize(n_samples);
        const double freq = spec.class_freqs[item.events.class_id];
        const double phase = rng.uniform(0.0, 2.0 * M_PI);
        for (std::size_t n = 0; n < n_samples; ++n)
            item.wav.samples[n] =
                spec.tone_amp * std::sin(2.0 * M_PI * freq * n / spec.sample_rate + phase);
        const int n_events =
            spec.max_events > 0 ? static_cast<int>(rng.uniform_int(spec.max_events + 1)) : 0;
        for (int e = 0; e < n_events; ++e) {
            const double t_ev = rng.uniform(0.0, spec.clip_len * 0.999);
            item.events.event_times.push_back(t_ev);
            const std::size_t n0 = static_cast<std::size_t>(t_ev * spec.sample_rate);
            for (std::size_t k = 0; k < 12 && n0 + k < n_samples; ++k)
                item.wav.samples[n0 + k] +=
                    spec.click_amp * (k % 2 == 0 ? 1.0 : -1.0) * std::exp(-static_cast<double>(k) / 3.0);
        }
        items.push_back(std::move(item));
    }
    return items;
}

// ---- optimizer ---------------------------------------------------------

using GradMap = std::map<std::string, Tensor>;

struct AdamState {
    std::map<std::string, Tensor> m, v;
    int step = 0;  // completed updates
};

// lr * min(1, step/warmup); constant after warmup.
inline double lr_at(int step, const TrainConfig& cfg) {
    if (step < 0) throw precondition_error("lr_at: negative step");
    if (cfg.warmup_steps <= 0) return cfg.lr;
    return cfg.lr * std::min(1.0, static_cast<double>(step) / cfg.warmup_steps);
}

// If the global L2 norm exceeds max_norm, scale all gradients down to it.
// Returns the pre-clip norm.
inline double clip_grad_norm(GradMap& grads, double max_norm = 1.0) {
    if (max_norm <= 0.0) throw precondition_error("clip_grad_norm: max_norm must be > 0");
    double sq = 0.0;
    for (const auto& [k, g] : grads)
        for (std::size_t i = 0; i < g.size(); ++i) sq += g[i] * g[i];
    const double norm = std::sqrt(sq);
    if (norm > max_norm) {
        const double s = max_norm / norm;
        for (auto& [k, g] : grads)
            for (std::size_t i = 0; i < g.size(); ++i) g[i] *= s;
    }
    return norm;
}

// Standard AdamW: bias-corrected moments, decoupled weight decay. The
// learning rate for this update comes from lr_at(state.step, cfg).
inline void adamw_step(ModelParams& params, const GradMap& grads, AdamState& state,
                       const TrainConfig& cfg) {
    const double lr = lr_at(state.step, cfg);
    const int t = state.step + 1;
    const double bc1 = 1.0 - std::pow(cfg.beta1, t);
    const double bc2 = 1.0 - std::pow(cfg.beta2, t);
    for (auto& [name, p] : params.tensors) {
        auto git = grads.find(name);
        if (git == grads.end()) throw precondition_error("adamw_step: missing gradient for " + name);
        const Tensor& g = git->second;
        if (!g.same_shape(p)) throw dim_error("adamw_step: gradient shape mismatch for " + name);
        Tensor& m = state.m.try_emplace(name, Tensor::zeros(p.shape())).first->second;
        Tensor& v = state.v.try_emplace(name, Tensor::zeros(p.shape())).first->second;
        for (std::size_t i = 0; i < p.size(); ++i) {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            p[i] -= lr * (mhat / (std::sqrt(vhat) + cfg.adam_eps) + cfg.weight_decay * p[i]);
        }
    }
    ++state.step;
}

// ema <- decay*ema + (1-decay)*params
inline void ema_update(ModelParams& ema, const ModelParams& params, double decay) {
    for (auto& [name, e] : ema.tensors) {
        const Tensor& p = params.at(name);
        if (!e.same_shape(p)) throw dim_error("ema_update: shape mismatch for " + name);
        for (std::size_t i = 0; i < e.size(); ++i)
            e[i] = decay * e[i] + (1.0 - decay) * p[i];
    }
}

// ---- training loop -----------------------------------------------------

struct TrainItem {
    Tensor x1_tokens;        // C×D lifted, patchified clean signal
    ConditionBundle bundle;
};

// Lift + patchify the dataset and synthesize condition features once.
inline std::vector<TrainItem> prepare_items(const std::vector<ToyItem>& dataset,
                                            const ModelConfig& mcfg, std::uint64_t seed,
                                            const LiftConfig& lift = {}) {
    std::vector<TrainItem> out;
    out.reserve(dataset.size());
    for (const auto& item : dataset) {
        TrainItem ti;
        ti.x1_tokens =
            patchify(amplitude_lift(item.wav, lift), mcfg.samples_per_token).as_tensor();
        ti.bundle = make_bundle(item.events, mcfg.enc, seed);
        out.push_back(std::move(ti));
    }
    return out;
}

struct StepResult {
    double loss = 0.0;
    double grad_norm = 0.0;
    double lr = 0.0;
};

// One optimization step over a batch: per-item noise/timestep draws,
// condition dropout, forward, mean loss, backprop, clip, AdamW, EMA.
inline StepResult train_step(ModelParams& params, ModelParams& ema, AdamState& state,
                             const ModelConfig& mcfg, const std::vector<const TrainItem*>& batch,
                             const TrainConfig& cfg, Rng& rng) {
    ad::Tape tape;
    ModelOnTape model(tape, mcfg, params, /*requires_grad=*/true);
    ad::Var total{};
    for (const TrainItem* item : batch) {
        const Tensor& x1 = item->x1_tokens;
        Tensor x0 = Tensor::randn(x1.shape(), rng);
        const double t = sample_timestep(rng, cfg.timestep);
        ConditionBundle bundle = drop_conditions(item->bundle, rng, cfg.p_drop_visual,
                                                 cfg.p_drop_text);
        Tensor x_t = interpolate(x0, x1, t);
        ad::Var pred = model.forward(x_t, bundle, t);
        ad::Var target;
        double weight = 1.0;
        if (mcfg.pred_mode == PredMode::x_pred) {
            target = tape.constant(x1);
            if (cfg.loss_mode == LossMode::v_loss) {
                const double gap = std::max(1.0 - t, kOneMinusTFloor);
                weight = 1.0 / (gap * gap);
            }
        } else {
            // v-prediction trains directly against the target velocity; the
            // x-loss variant divides out the (1-t)² weight instead.
            target = tape.constant(target_velocity(x0, x1));
            if (cfg.loss_mode == LossMode::x_loss) {
                const double gap = std::max(1.0 - t, kOneMinusTFloor);
                weight = gap * gap;
            }
        }
        ad::Var diff = tape.sub(pred, target);
        ad::Var item_loss = tape.scale(tape.mean(tape.mul(diff, diff)), weight);
        total = total.valid() ? tape.add(total, item_loss) : item_loss;
    }
    ad::Var loss = tape.scale(total, 1.0 / static_cast<double>(batch.size()));
    const double loss_val = tape.value(loss)[0];
    if (!std::isfinite(loss_val)) throw numeric_error("train_step: non-finite loss");

    tape.backward(loss);
    GradMap grads;
    for (const auto& [name, var] : model.param_vars())
        grads[name] = tape.has_grad(var) ? tape.grad(var)
                                         : Tensor::zeros(tape.value(var).shape());
    StepResult res;
    res.loss = loss_val;
    res.grad_norm = clip_grad_norm(grads, cfg.clip_norm);
    res.lr = lr_at(state.step, cfg);
    adamw_step(params, grads, state, cfg);
    ema_update(ema, params, cfg.ema_decay);
    return res;
}

struct TrainResult {
    ModelParams params;
    ModelParams ema;
    std::vector<StepResult> log;
};

// Deterministic toy-scale run. csv_path, when non-empty, receives
// "step,lr,loss,grad_norm" lines.
inline TrainResult run_training(const ModelConfig& mcfg, const ToyDatasetSpec& dspec,
                                const TrainConfig& cfg, const std::string& csv_path = "") {
    cfg.check();
    mcfg.check();
    Rng rng(cfg.seed);
    const auto dataset = make_toy_dataset(dspec, cfg.seed);
    const auto items = prepare_items(dataset, mcfg, cfg.seed);

    Rng init_rng(cfg.seed + 1);
    TrainResult result;
    result.params = init_params(mcfg, init_rng);
    result.ema = result.params;
    AdamState state;

    std::ofstream csv;
    if (!csv_path.empty()) {
        csv.open(csv_path);
        if (!csv) throw io_error("run_training: cannot open " + csv_path);
        csv << "step,lr,loss,grad_norm\n";
    }
    for (int step = 0; step < cfg.steps; ++step) {
        std::vector<const TrainItem*> batch;
        for (int b = 0; b < cfg.batch_size; ++b)
            batch.push_back(&items[rng.uniform_int(items.size())]);
        StepResult r = train_step(result.params, result.ema, state, mcfg, batch, cfg, rng);
        result.log.push_back(r);
        if (csv) csv << step << ',' << r.lr << ',' << r.loss << ',' << r.grad_norm << '\n';
    }
    return result;
}

}  // namespace rawflow
