#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "rawflow/rng.hpp"
#include "rawflow/tape.hpp"
#include "rawflow/tensor.hpp"

using namespace rawflow;

namespace {

// Central finite difference of a scalar function of one tensor input.
template <class F>
Tensor fd_grad(F f, Tensor x, double h = 1e-5) {
    Tensor g(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double saved = x[i];
        x[i] = saved + h;
        const double lp = f(x);
        x[i] = saved - h;
        const double lm = f(x);
        x[i] = saved;
        g[i] = (lp - lm) / (2.0 * h);
    }
    return g;
}

double max_rel(const Tensor& a, const Tensor& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double denom = std::max({std::fabs(a[i]), std::fabs(b[i]), 1e-6});
        m = std::max(m, std::fabs(a[i] - b[i]) / denom);
    }
    return m;
}

}  // namespace

TEST_CASE("matmul basics") {
    ad::Tape t;
    SECTION("identity times identity") {
        auto r = t.matmul(t.constant(Tensor::identity(2)), t.constant(Tensor::identity(2)));
        CHECK(max_abs_diff(t.value(r), Tensor::identity(2)) == 0.0);
    }
    SECTION("hand arithmetic") {
        Tensor a({2, 2}, {1, 2, 3, 4});
        Tensor b({2, 1}, {1, 1});
        auto r = t.matmul(t.constant(a), t.constant(b));
        CHECK(t.value(r)[0] == 3.0);
        CHECK(t.value(r)[1] == 7.0);
    }
    SECTION("inner dimension mismatch") {
        CHECK_THROWS_AS(t.matmul(t.constant(Tensor({2, 3})), t.constant(Tensor({2, 2}))),
                        dim_error);
    }
    SECTION("transpose identity (AB)^T == B^T A^T") {
        Rng rng(3);
        Tensor a = Tensor::randn({4, 5}, rng);
        Tensor b = Tensor::randn({5, 3}, rng);
        auto ab_t = t.transpose(t.matmul(t.constant(a), t.constant(b)));
        auto bt_at = t.matmul(t.transpose(t.constant(b)), t.transpose(t.constant(a)));
        CHECK(max_abs_diff(t.value(ab_t), t.value(bt_at)) < 1e-6);
    }
}

TEST_CASE("softmax") {
    ad::Tape t;
    SECTION("symmetry") {
        auto r = t.softmax_lastdim(t.constant(Tensor({1, 2}, {0, 0})));
        CHECK(t.value(r)[0] == Catch::Approx(0.5));
        CHECK(t.value(r)[1] == Catch::Approx(0.5));
    }
    SECTION("stability under large logits") {
        auto r = t.softmax_lastdim(t.constant(Tensor({1, 2}, {1000, 0})));
        CHECK(t.value(r)[0] == Catch::Approx(1.0));
        CHECK(t.value(r)[1] < 1e-300);
        CHECK(t.value(r).all_finite());
    }
    SECTION("log ratios") {
        auto r = t.softmax_lastdim(
            t.constant(Tensor({1, 3}, {std::log(1.0), std::log(2.0), std::log(3.0)})));
        CHECK(t.value(r)[0] == Catch::Approx(1.0 / 6.0));
        CHECK(t.value(r)[1] == Catch::Approx(2.0 / 6.0));
        CHECK(t.value(r)[2] == Catch::Approx(3.0 / 6.0));
    }
    SECTION("rows nonnegative, sum to one") {
        Rng rng(7);
        auto r = t.softmax_lastdim(t.constant(Tensor::randn({5, 9}, rng)));
        const Tensor& y = t.value(r);
        for (std::size_t i = 0; i < 5; ++i) {
            double s = 0.0;
            for (std::size_t j = 0; j < 9; ++j) {
                CHECK(y.at2(i, j) >= 0.0);
                s += y.at2(i, j);
            }
            CHECK(s == Catch::Approx(1.0).margin(1e-6));
        }
    }
    SECTION("NaN input rejected") {
        CHECK_THROWS_AS(
            t.softmax_lastdim(t.constant(Tensor({1, 2}, {std::nan(""), 0.0}))),
            numeric_error);
    }
}

TEST_CASE("gradients of simple functions") {
    SECTION("sum gives all-ones") {
        ad::Tape t;
        auto p = t.input(Tensor({2, 3}, {1, 2, 3, 4, 5, 6}));
        t.backward(t.sum(p));
        CHECK(max_abs_diff(t.grad(p), Tensor::full({2, 3}, 1.0)) == 0.0);
    }
    SECTION("sum of squares") {
        ad::Tape t;
        auto p = t.input(Tensor({2}, {1, 2}));
        t.backward(t.sum(t.mul(p, p)));
        CHECK(t.grad(p)[0] == Catch::Approx(2.0));
        CHECK(t.grad(p)[1] == Catch::Approx(4.0));
    }
    SECTION("loss must be scalar") {
        ad::Tape t;
        auto p = t.input(Tensor({2}, {1, 2}));
        CHECK_THROWS_AS(t.backward(p), precondition_error);
    }
    SECTION("custom node without backward raises capability error") {
        ad::Tape t;
        auto p = t.input(Tensor({2}, {1, 2}));
        auto c = t.custom(Tensor::scalar(3.0), {p}, nullptr);
        CHECK_THROWS_AS(t.backward(c), capability_error);
    }
}

TEST_CASE("three-layer MLP matches finite differences") {
    Rng rng(11);
    Tensor w1 = Tensor::randn({6, 8}, rng, 0.5);
    Tensor w2 = Tensor::randn({8, 8}, rng, 0.5);
    Tensor w3 = Tensor::randn({8, 2}, rng, 0.5);
    Tensor x = Tensor::randn({3, 6}, rng);

    auto loss_of = [&](const Tensor& w1v, const Tensor& w2v, const Tensor& w3v) {
        ad::Tape t;
        auto h1 = t.gelu(t.matmul(t.constant(x), t.constant(w1v)));
        auto h2 = t.silu(t.matmul(h1, t.constant(w2v)));
        auto y = t.matmul(h2, t.constant(w3v));
        return t.value(t.mean(t.mul(y, y)))[0];
    };

    ad::Tape t;
    auto v1 = t.input(w1), v2 = t.input(w2), v3 = t.input(w3);
    auto h1 = t.gelu(t.matmul(t.constant(x), v1));
    auto h2 = t.silu(t.matmul(h1, v2));
    auto y = t.matmul(h2, v3);
    t.backward(t.mean(t.mul(y, y)));

    Tensor f1 = fd_grad([&](const Tensor& w) { return loss_of(w, w2, w3); }, w1);
    Tensor f2 = fd_grad([&](const Tensor& w) { return loss_of(w1, w, w3); }, w2);
    Tensor f3 = fd_grad([&](const Tensor& w) { return loss_of(w1, w2, w); }, w3);
    CHECK(max_rel(t.grad(v1), f1) < 1e-4);
    CHECK(max_rel(t.grad(v2), f2) < 1e-4);
    CHECK(max_rel(t.grad(v3), f3) < 1e-4);
}

TEST_CASE("per-primitive gradients match finite differences") {
    Rng rng(23);

    auto check_unary = [&](auto build, std::vector<std::size_t> shape) {
        Tensor x = Tensor::randn(shape, rng);
        ad::Tape t;
        auto v = t.input(x);
        t.backward(t.sum(t.mul(build(t, v), build(t, v))));
        Tensor fd = fd_grad(
            [&](const Tensor& xv) {
                ad::Tape s;
                auto u = s.constant(xv);
                return s.value(s.sum(s.mul(build(s, u), build(s, u))))[0];
            },
            x);
        CHECK(max_rel(t.grad(v), fd) < 1e-4);
    };

    SECTION("layernorm") {
        // weight the normalized output so the loss is not row-degenerate
        Tensor w = Tensor::randn({3, 7}, rng);
        check_unary(
            [w](ad::Tape& t, ad::Var v) {
                return t.mul(t.layernorm_lastdim(v), t.constant(w));
            },
            {3, 7});
    }
    SECTION("softmax") {
        check_unary([](ad::Tape& t, ad::Var v) { return t.softmax_lastdim(v); }, {3, 5});
    }
    SECTION("gelu") {
        check_unary([](ad::Tape& t, ad::Var v) { return t.gelu(v); }, {2, 6});
    }
    SECTION("silu") {
        check_unary([](ad::Tape& t, ad::Var v) { return t.silu(v); }, {2, 6});
    }
    SECTION("slice and concat") {
        check_unary(
            [](ad::Tape& t, ad::Var v) {
                auto a = t.slice_cols(v, 0, 2);
                auto b = t.slice_cols(v, 2, 6);
                auto c = t.concat_cols({b, a});
                auto r0 = t.slice_rows(c, 0, 1);
                auto r1 = t.slice_rows(c, 1, 2);
                return t.concat_rows({r1, r0});
            },
            {2, 6});
    }
    SECTION("gather") {
        check_unary(
            [](ad::Tape& t, ad::Var v) {
                return t.gather_rows(v, {0, 0, 2, 1});
            },
            {3, 4});
    }
    SECTION("mean_rows and add_rowvec") {
        Tensor x = Tensor::randn({4, 5}, rng);
        Tensor b = Tensor::randn({1, 5}, rng);
        auto build = [](ad::Tape& t, ad::Var vx, ad::Var vb) {
            auto y = t.add_rowvec(vx, vb);
            auto m = t.mean_rows(vx);
            return t.add(t.sum(t.mul(y, y)), t.sum(t.mul(m, m)));
        };
        ad::Tape t;
        auto vx = t.input(x);
        auto vb = t.input(b);
        t.backward(build(t, vx, vb));
        auto loss = [&](const Tensor& xv, const Tensor& bv) {
            ad::Tape s;
            return s.value(build(s, s.constant(xv), s.constant(bv)))[0];
        };
        Tensor fx = fd_grad([&](const Tensor& v) { return loss(v, b); }, x);
        Tensor fb = fd_grad([&](const Tensor& v) { return loss(x, v); }, b);
        CHECK(max_rel(t.grad(vx), fx) < 1e-4);
        CHECK(max_rel(t.grad(vb), fb) < 1e-4);
    }
    SECTION("conv1d_same") {
        Tensor x = Tensor::randn({6, 3}, rng);
        Tensor w = Tensor::randn({3, 3, 2}, rng);
        Tensor b = Tensor::randn({2}, rng);
        auto loss = [&](const Tensor& xv, const Tensor& wv, const Tensor& bv) {
            ad::Tape s;
            auto y = s.conv1d_same(s.constant(xv), s.constant(wv), s.constant(bv));
            return s.value(s.sum(s.mul(y, y)))[0];
        };
        ad::Tape t;
        auto vx = t.input(x), vw = t.input(w), vb = t.input(b);
        auto y = t.conv1d_same(vx, vw, vb);
        t.backward(t.sum(t.mul(y, y)));
        CHECK(max_rel(t.grad(vx), fd_grad([&](const Tensor& v) { return loss(v, w, b); }, x)) <
              1e-4);
        CHECK(max_rel(t.grad(vw), fd_grad([&](const Tensor& v) { return loss(x, v, b); }, w)) <
              1e-4);
        CHECK(max_rel(t.grad(vb), fd_grad([&](const Tensor& v) { return loss(x, w, v); }, b)) <
              1e-4);
    }
    SECTION("rope") {
        Tensor x = Tensor::randn({4, 6}, rng);
        Tensor cos_t({4, 3}), sin_t({4, 3});
        for (std::size_t l = 0; l < 4; ++l)
            for (std::size_t i = 0; i < 3; ++i) {
                const double ang = 0.3 * static_cast<double>(l) * (i + 1);
                cos_t.at2(l, i) = std::cos(ang);
                sin_t.at2(l, i) = std::sin(ang);
            }
        auto loss = [&](const Tensor& xv) {
            ad::Tape s;
            auto y = s.rope(s.constant(xv), cos_t, sin_t);
            return s.value(s.sum(s.mul(y, y)))[0];
        };
        ad::Tape t;
        auto vx = t.input(x);
        auto y = t.rope(vx, cos_t, sin_t);
        t.backward(t.sum(t.mul(y, y)));
        CHECK(max_rel(t.grad(vx), fd_grad(loss, x)) < 1e-4);
    }
    SECTION("matmul both sides") {
        Tensor a = Tensor::randn({3, 4}, rng);
        Tensor b = Tensor::randn({4, 2}, rng);
        auto loss = [&](const Tensor& av, const Tensor& bv) {
            ad::Tape s;
            auto y = s.matmul(s.constant(av), s.constant(bv));
            return s.value(s.sum(s.mul(y, y)))[0];
        };
        ad::Tape t;
        auto va = t.input(a), vb = t.input(b);
        auto y = t.matmul(va, vb);
        t.backward(t.sum(t.mul(y, y)));
        CHECK(max_rel(t.grad(va), fd_grad([&](const Tensor& v) { return loss(v, b); }, a)) <
              1e-4);
        CHECK(max_rel(t.grad(vb), fd_grad([&](const Tensor& v) { return loss(a, v); }, b)) <
              1e-4);
    }
}

TEST_CASE("rng determinism") {
    Rng a(42), b(42);
    for (int i = 0; i < 100; ++i) {
        CHECK(a.normal() == b.normal());
        CHECK(a.uniform() == b.uniform());
    }
    Rng c(43);
    bool any_diff = false;
    Rng a2(42);
    for (int i = 0; i < 10; ++i) any_diff = any_diff || (a2.normal() != c.normal());
    CHECK(any_diff);
}
