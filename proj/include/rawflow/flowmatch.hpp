#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "rawflow/common.hpp"
#include "rawflow/rng.hpp"
#include "rawflow/tensor.hpp"

namespace rawflow {

enum class PredMode { x_pred, v_pred };
enum class LossMode { v_loss, x_loss };

constexpr double kOneMinusTFloor = 1e-5;

// Logit-normal timestep law with optional noise shift.
struct TimestepConfig {
    double location = 0.0;  // m
    double scale = 1.0;     // sigma
    double shift = 1.0;     // s >= 1; 1.0 means no shift

    void check() const {
        if (scale <= 0.0) throw precondition_error("TimestepConfig: scale must be > 0");
        if (shift < 1.0) throw precondition_error("TimestepConfig: shift must be >= 1");
    }
};

struct SamplerConfig {
    int steps = 50;
    double cfg_scale = 4.5;
    double one_minus_t_floor = kOneMinusTFloor;

    void check() const {
        if (steps < 1) throw precondition_error("SamplerConfig: steps must be >= 1");
        if (cfg_scale < 0.0) throw precondition_error("SamplerConfig: cfg_scale must be >= 0");
    }
};

// x_t = (1-t) x0 + t x1
inline Tensor interpolate(const Tensor& x0, const Tensor& x1, double t) {
    if (!x0.same_shape(x1)) throw dim_error("interpolate: shape mismatch");
    if (t < 0.0 || t > 1.0) throw precondition_error("interpolate: t must be in [0,1]");
    Tensor out(x0.shape());
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = (1.0 - t) * x0[i] + t * x1[i];
    return out;
}

// v* = x1 - x0 (constant along the path)
inline Tensor target_velocity(const Tensor& x0, const Tensor& x1) {
    if (!x0.same_shape(x1)) throw dim_error("target_velocity: shape mismatch");
    Tensor out(x0.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x1[i] - x0[i];
    return out;
}

// v = (x̂1 - x_t) / max(1-t, eps); the floor guards the t→1 singularity.
inline Tensor recover_velocity(const Tensor& x_hat1, const Tensor& x_t, double t,
                               double eps = kOneMinusTFloor) {
    if (!x_hat1.same_shape(x_t)) throw dim_error("recover_velocity: shape mismatch");
    if (t < 0.0 || t > 1.0) throw precondition_error("recover_velocity: t must be in [0,1]");
    const double inv = 1.0 / std::max(1.0 - t, eps);
    Tensor out(x_hat1.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = (x_hat1[i] - x_t[i]) * inv;
    return out;
}

// x_loss = mean((x̂1 - x1)²); v_loss = x_loss / (1-t)².
// The v_loss is computed as x_loss divided by the squared guarded gap so the
// identity v_loss == x_loss/(1-t)² holds exactly in floating point.
inline double flow_loss(const Tensor& x_hat1, const Tensor& x1, double t, LossMode mode,
                        double eps = kOneMinusTFloor) {
    if (!x_hat1.same_shape(x1)) throw dim_error("flow_loss: shape mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < x_hat1.size(); ++i) {
        const double d = x_hat1[i] - x1[i];
        acc += d * d;
    }
    const double x_loss = acc / static_cast<double>(x_hat1.size());
    if (mode == LossMode::x_loss) return x_loss;
    const double gap = std::max(1.0 - t, eps);
    return x_loss / (gap * gap);
}

// Noise shift: t_s = t / (t + s (1 - t)); identity at s = 1.
inline double apply_noise_shift(double t, double s) {
    return t / (t + s * (1.0 - t));
}

// Draw z ~ N(m, sigma), t = sigmoid(z), then shift. Result is strictly in (0,1).
inline double sample_timestep(Rng& rng, const TimestepConfig& cfg = {}) {
    cfg.check();
    const double z = rng.normal(cfg.location, cfg.scale);
    double t = 1.0 / (1.0 + std::exp(-z));
    t = apply_noise_shift(t, cfg.shift);
    return std::clamp(t, 1e-12, 1.0 - 1e-12);
}

// v̂ = (1+w) v_cond - w v_uncond
inline Tensor cfg_velocity(const Tensor& v_cond, const Tensor& v_uncond, double w) {
    if (!v_cond.same_shape(v_uncond)) throw dim_error("cfg_velocity: shape mismatch");
    if (w < 0.0) throw precondition_error("cfg_velocity: w must be >= 0");
    Tensor out(v_cond.shape());
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = (1.0 + w) * v_cond[i] - w * v_uncond[i];
    return out;
}

// Euler CFG sampler over a uniform time grid t_i = i/N.
//
// Model concept: `model.mode` is a PredMode and `model.eval(x, t, cond)`
// returns the prediction (x̂1 or v̂) for condition `cond`. Two evaluations per
// step when cfg_scale > 0; with cfg_scale == 0 the null path is skipped so the
// result is bitwise identical to unguided conditional sampling.
template <class Model, class Cond>
Tensor euler_sample(const Model& model, const Cond& cond, const Cond& null_cond,
                    const SamplerConfig& cfg, Rng& rng,
                    const std::vector<std::size_t>& shape) {
    cfg.check();
    Tensor x = Tensor::randn(shape, rng);
    const int n = cfg.steps;
    const double w = cfg.cfg_scale;
    for (int i = 0; i < n; ++i) {
        const double t = static_cast<double>(i) / n;
        const Tensor pred_c = model.eval(x, t, cond);
        if (!pred_c.same_shape(x)) throw dim_error("euler_sample: model output shape mismatch");
        if (model.mode == PredMode::x_pred && 1.0 - t < cfg.one_minus_t_floor) {
            // terminal step: jump straight to the guided clean prediction
            if (w == 0.0) {
                x = pred_c;
            } else {
                x = cfg_velocity(pred_c, model.eval(x, t, null_cond), w);
            }
            continue;
        }
        Tensor v_c = (model.mode == PredMode::x_pred)
                         ? recover_velocity(pred_c, x, t, cfg.one_minus_t_floor)
                         : pred_c;
        Tensor v;
        if (w == 0.0) {
            v = std::move(v_c);
        } else {
            const Tensor pred_u = model.eval(x, t, null_cond);
            Tensor v_u = (model.mode == PredMode::x_pred)
                             ? recover_velocity(pred_u, x, t, cfg.one_minus_t_floor)
                             : pred_u;
            v = cfg_velocity(v_c, v_u, w);
        }
        const double dt = 1.0 / n;
        for (std::size_t j = 0; j < x.size(); ++j) x[j] += dt * v[j];
    }
    if (!x.all_finite()) throw numeric_error("euler_sample: non-finite state");
    return x;
}

}  // namespace rawflow
