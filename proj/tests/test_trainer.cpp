#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "rawflow/fft.hpp"
#include "rawflow/trainer.hpp"

using namespace rawflow;

namespace {

ModelConfig toy_model() {
    ModelConfig cfg;
    cfg.d = 16;
    cfg.heads = 2;
    cfg.l_joint = 1;
    cfg.l_fused = 1;
    cfg.samples_per_token = 8;
    cfg.enc.n_clip = 4;
    cfg.enc.n_sync = 4;
    cfg.enc.d_v = cfg.enc.d_s = cfg.enc.d_t = 8;
    return cfg;
}

}  // namespace

TEST_CASE("toy dataset") {
    ToyDatasetSpec spec;
    SECTION("deterministic and class-balanced") {
        const auto a = make_toy_dataset(spec, 3);
        const auto b = make_toy_dataset(spec, 3);
        REQUIRE(a.size() == 64);
        for (std::size_t i = 0; i < a.size(); ++i) {
            CHECK(a[i].events.class_id == static_cast<int>(i) % 4);
            CHECK(a[i].wav.samples == b[i].wav.samples);
        }
        const auto c = make_toy_dataset(spec, 4);
        CHECK(a[0].wav.samples != c[0].wav.samples);
    }
    SECTION("dominant FFT bin matches the class frequency") {
        const auto items = make_toy_dataset(spec, 3);
        const std::size_t n_fft = 256;
        for (const auto& item : items) {
            const std::size_t bin = dominant_bin(item.wav.samples, n_fft);
            const double freq = spec.class_freqs[item.events.class_id];
            const std::size_t expect = static_cast<std::size_t>(
                std::lround(freq * n_fft / spec.sample_rate));
            CHECK(std::llabs(static_cast<long long>(bin) -
                             static_cast<long long>(expect)) <= 1);
        }
    }
    SECTION("event times stay inside the clip") {
        for (const auto& item : make_toy_dataset(spec, 9)) {
            CHECK(item.events.event_times.size() <= 2);
            item.events.check();
        }
    }
    SECTION("nyquist guard") {
        ToyDatasetSpec bad = spec;
        bad.class_freqs = {1000.0, 2000.0, 3000.0, 9000.0};
        CHECK_THROWS_AS(make_toy_dataset(bad, 1), precondition_error);
    }
}

TEST_CASE("learning-rate warmup") {
    TrainConfig cfg;
    cfg.lr = 0.4;
    cfg.warmup_steps = 100;
    CHECK(lr_at(0, cfg) == 0.0);
    CHECK(lr_at(50, cfg) == Catch::Approx(0.2));
    CHECK(lr_at(100, cfg) == Catch::Approx(0.4));
    CHECK(lr_at(5000, cfg) == Catch::Approx(0.4));  // constant after warmup
    cfg.warmup_steps = 0;
    CHECK(lr_at(0, cfg) == Catch::Approx(0.4));
    CHECK_THROWS_AS(lr_at(-1, cfg), precondition_error);
}

TEST_CASE("gradient clipping") {
    SECTION("norm 2 is halved to max 1") {
        GradMap g;
        g["a"] = Tensor({2}, {std::sqrt(2.0), std::sqrt(2.0)});
        const double norm = clip_grad_norm(g, 1.0);
        CHECK(norm == Catch::Approx(2.0));
        double sq = 0.0;
        for (std::size_t i = 0; i < 2; ++i) sq += g["a"][i] * g["a"][i];
        CHECK(std::sqrt(sq) == Catch::Approx(1.0));
        CHECK(g["a"][0] == Catch::Approx(std::sqrt(2.0) / 2.0));
    }
    SECTION("norm below max unchanged") {
        GradMap g;
        g["a"] = Tensor({2}, {0.3, 0.4});
        const double norm = clip_grad_norm(g, 1.0);
        CHECK(norm == Catch::Approx(0.5));
        CHECK(g["a"][0] == 0.3);
        CHECK(g["a"][1] == 0.4);
    }
    SECTION("norm spans tensors") {
        GradMap g;
        g["a"] = Tensor({1}, {3.0});
        g["b"] = Tensor({1}, {4.0});
        CHECK(clip_grad_norm(g, 10.0) == Catch::Approx(5.0));
    }
}

TEST_CASE("adamw") {
    TrainConfig cfg;
    cfg.lr = 0.01;
    cfg.warmup_steps = 0;
    SECTION("zero gradients, zero decay leave params unchanged") {
        ModelParams p;
        p.tensors["w"] = Tensor({2}, {1.5, -0.5});
        GradMap g;
        g["w"] = Tensor({2});
        AdamState st;
        adamw_step(p, g, st, cfg);
        CHECK(p.at("w")[0] == 1.5);
        CHECK(p.at("w")[1] == -0.5);
        CHECK(st.step == 1);
    }
    SECTION("first step with unit gradient moves by about -lr") {
        ModelParams p;
        p.tensors["w"] = Tensor({1}, {0.0});
        GradMap g;
        g["w"] = Tensor({1}, {1.0});
        AdamState st;
        adamw_step(p, g, st, cfg);
        // bias correction makes mhat = 1, vhat = 1 at step 1
        CHECK(p.at("w")[0] == Catch::Approx(-cfg.lr / (1.0 + cfg.adam_eps)));
    }
    SECTION("decoupled weight decay shrinks parameters") {
        TrainConfig wd = cfg;
        wd.weight_decay = 0.1;
        ModelParams p;
        p.tensors["w"] = Tensor({1}, {2.0});
        GradMap g;
        g["w"] = Tensor({1});
        AdamState st;
        adamw_step(p, g, st, wd);
        CHECK(p.at("w")[0] == Catch::Approx(2.0 - wd.lr * wd.weight_decay * 2.0));
    }
    SECTION("missing gradient is rejected") {
        ModelParams p;
        p.tensors["w"] = Tensor({1});
        GradMap g;
        AdamState st;
        CHECK_THROWS_AS(adamw_step(p, g, st, cfg), precondition_error);
    }
}

TEST_CASE("ema update") {
    ModelParams ema, live;
    ema.tensors["w"] = Tensor({1}, {0.0});
    live.tensors["w"] = Tensor({1}, {1.0});
    SECTION("decay 0.9 moves a tenth of the way") {
        ema_update(ema, live, 0.9);
        CHECK(ema.at("w")[0] == Catch::Approx(0.1));
    }
    SECTION("equal weights are a fixed point") {
        ema.tensors["w"][0] = 1.0;
        ema_update(ema, live, 0.9);
        CHECK(ema.at("w")[0] == 1.0);
    }
}

TEST_CASE("training steps") {
    const ModelConfig mcfg = toy_model();
    ToyDatasetSpec dspec;
    dspec.size = 8;
    TrainConfig cfg;
    cfg.steps = 3;
    cfg.batch_size = 2;
    cfg.lr = 1e-3;
    cfg.ema_decay = 0.9;
    cfg.seed = 5;

    SECTION("loss is finite and positive at random init") {
        const auto res = run_training(mcfg, dspec, cfg);
        REQUIRE(res.log.size() == 3);
        for (const auto& r : res.log) {
            CHECK(std::isfinite(r.loss));
            CHECK(r.loss > 0.0);
            CHECK(std::isfinite(r.grad_norm));
        }
        CHECK(res.params.all_finite());
        CHECK(res.ema.all_finite());
    }
    SECTION("same seed reproduces the loss trajectory and weights exactly") {
        const auto a = run_training(mcfg, dspec, cfg);
        const auto b = run_training(mcfg, dspec, cfg);
        for (std::size_t i = 0; i < a.log.size(); ++i) {
            CHECK(a.log[i].loss == b.log[i].loss);
            CHECK(a.log[i].grad_norm == b.log[i].grad_norm);
        }
        for (const auto& [name, tensor] : a.params.tensors)
            CHECK(max_abs_diff(tensor, b.params.at(name)) == 0.0);
        for (const auto& [name, tensor] : a.ema.tensors)
            CHECK(max_abs_diff(tensor, b.ema.at(name)) == 0.0);
    }
    SECTION("different seeds diverge") {
        TrainConfig other = cfg;
        other.seed = 6;
        const auto a = run_training(mcfg, dspec, cfg);
        const auto b = run_training(mcfg, dspec, other);
        CHECK(a.log[0].loss != b.log[0].loss);
    }
    SECTION("full dropout trains unconditioned without error") {
        TrainConfig drop = cfg;
        drop.p_drop_visual = drop.p_drop_text = 1.0;
        drop.steps = 2;
        const auto res = run_training(mcfg, dspec, drop);
        for (const auto& r : res.log) CHECK(std::isfinite(r.loss));
        // null embeddings received gradient signal on every item
        bool null_moved = false;
        Rng init_rng(drop.seed + 1);
        const ModelParams init = init_params(mcfg, init_rng);
        for (const char* name : {"null.visual", "null.sync", "null.text"})
            null_moved =
                null_moved || max_abs_diff(res.params.at(name), init.at(name)) > 0.0;
        CHECK(null_moved);
    }
    SECTION("csv log has one line per step") {
        const std::string path = "/tmp/rawflow_test_loss.csv";
        run_training(mcfg, dspec, cfg, path);
        std::ifstream f(path);
        REQUIRE(f.good());
        std::string line;
        std::getline(f, line);
        CHECK(line == "step,lr,loss,grad_norm");
        int rows = 0;
        while (std::getline(f, line))
            if (!line.empty()) ++rows;
        CHECK(rows == cfg.steps);
    }
}

TEST_CASE("training reduces the loss on a shrunken problem") {
    // tiny but real: enough steps to see clear descent, small enough for CI
    ModelConfig mcfg = toy_model();
    ToyDatasetSpec dspec;
    dspec.size = 8;
    TrainConfig cfg;
    cfg.steps = 60;
    cfg.batch_size = 4;
    cfg.lr = 3e-3;
    cfg.warmup_steps = 10;
    cfg.ema_decay = 0.95;
    cfg.seed = 1;
    const auto res = run_training(mcfg, dspec, cfg);
    double early = 0.0, late = 0.0;
    for (int i = 0; i < 10; ++i) {
        early += res.log[i].loss;
        late += res.log[cfg.steps - 10 + i].loss;
    }
    CHECK(late < 0.7 * early);
}
