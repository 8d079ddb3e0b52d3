#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "rawflow/common.hpp"
#include "rawflow/conditioning.hpp"
#include "rawflow/mmdit.hpp"
#include "rawflow/rng.hpp"
#include "rawflow/tape.hpp"
#include "rawflow/tensor.hpp"

namespace rawflow {

struct GradCheckConfig {
    ModelConfig model;      // toy dims; caller sets d/heads/blocks
    std::size_t c_tokens = 8;
    std::uint64_t seed = 7;
    double h = 1e-5;        // central-difference step
    double tol = 1e-3;      // max relative error
    double inject_error = 0.0;  // negative-control: added to one analytic grad entry
};

struct GradCheckReport {
    std::map<std::string, double> group_max_rel;  // per parameter tensor
    double max_rel = 0.0;
    std::string worst_group;
    bool pass = false;
};

namespace detail {

struct GradCheckProblem {
    ModelConfig cfg;
    ModelParams params;
    std::vector<std::pair<Tensor, ConditionBundle>> items;  // (x_t, bundle)
    std::vector<Tensor> targets;
    double t = 0.37;

    double loss(const ModelParams& p) const {
        double acc = 0.0;
        for (std::size_t i = 0; i < items.size(); ++i) {
            const Tensor y = forward_tensor(cfg, p, items[i].first, items[i].second, t);
            for (std::size_t j = 0; j < y.size(); ++j) {
                const double d = y[j] - targets[i][j];
                acc += d * d;
            }
        }
        std::size_t total = 0;
        for (const auto& tg : targets) total += tg.size();
        return acc / static_cast<double>(total);
    }
};

inline GradCheckProblem make_problem(const GradCheckConfig& gc) {
    GradCheckProblem pr;
    pr.cfg = gc.model;
    pr.cfg.check();
    Rng rng(gc.seed);
    // identity_init=false so gates, output block and null embeddings all carry
    // gradient signal
    pr.params = init_params(pr.cfg, rng, /*identity_init=*/false);

    EventSpec ev;
    ev.class_id = 1;
    ev.clip_len = 1.0;
    ev.event_times = {0.25, 0.7};
    ConditionBundle live = make_bundle(ev, pr.cfg.enc, gc.seed);
    ConditionBundle nulled = live;
    nulled.visual_null = true;
    nulled.text_null = true;

    const std::vector<std::size_t> shape{gc.c_tokens, pr.cfg.samples_per_token};
    pr.items.emplace_back(Tensor::randn(shape, rng), live);
    pr.items.emplace_back(Tensor::randn(shape, rng), nulled);
    pr.targets.push_back(Tensor::randn(shape, rng));
    pr.targets.push_back(Tensor::randn(shape, rng));
    return pr;
}

}  // namespace detail

// Analytic gradients of a two-item squared-error loss (one item with nulled
// conditions so the null parameters participate) against full central finite
// differences over every parameter element.
inline GradCheckReport run_gradcheck(const GradCheckConfig& gc) {
    detail::GradCheckProblem pr = detail::make_problem(gc);

    // analytic pass
    ad::Tape tape;
    ModelOnTape model(tape, pr.cfg, pr.params, /*requires_grad=*/true);
    ad::Var total{};
    std::size_t total_elems = 0;
    for (const auto& tg : pr.targets) total_elems += tg.size();
    for (std::size_t i = 0; i < pr.items.size(); ++i) {
        ad::Var y = model.forward(pr.items[i].first, pr.items[i].second, pr.t);
        ad::Var diff = tape.sub(y, tape.constant(pr.targets[i]));
        ad::Var sq = tape.sum(tape.mul(diff, diff));
        total = total.valid() ? tape.add(total, sq) : sq;
    }
    ad::Var loss = tape.scale(total, 1.0 / static_cast<double>(total_elems));
    tape.backward(loss);

    std::map<std::string, Tensor> analytic;
    for (const auto& [name, var] : model.param_vars())
        analytic[name] = tape.has_grad(var) ? tape.grad(var)
                                            : Tensor::zeros(tape.value(var).shape());
    if (gc.inject_error != 0.0 && !analytic.empty())
        analytic.begin()->second[0] += gc.inject_error;

    // numeric pass
    GradCheckReport rep;
    ModelParams probe = pr.params;
    for (auto& [name, tensor] : probe.tensors) {
        double group_max = 0.0;
        const Tensor& a = analytic.at(name);
        for (std::size_t i = 0; i < tensor.size(); ++i) {
            const double saved = tensor[i];
            tensor[i] = saved + gc.h;
            const double lp = pr.loss(probe);
            tensor[i] = saved - gc.h;
            const double lm = pr.loss(probe);
            tensor[i] = saved;
            const double fd = (lp - lm) / (2.0 * gc.h);
            const double denom = std::max({std::fabs(a[i]), std::fabs(fd), 1e-6});
            group_max = std::max(group_max, std::fabs(a[i] - fd) / denom);
        }
        rep.group_max_rel[name] = group_max;
        if (group_max > rep.max_rel) {
            rep.max_rel = group_max;
            rep.worst_group = name;
        }
    }
    rep.pass = rep.max_rel < gc.tol;
    return rep;
}

}  // namespace rawflow
