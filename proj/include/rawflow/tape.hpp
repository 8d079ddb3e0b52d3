#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <utility>
#include <vector>

#include "rawflow/common.hpp"
#include "rawflow/tensor.hpp"

namespace rawflow::ad {

using rawflow::Tensor;

// Raw matrix product helpers (row-major, i-k-j ordering).
inline Tensor mm(const Tensor& a, const Tensor& b) {
    if (a.ndim() != 2 || b.ndim() != 2) throw dim_error("matmul: operands must be 2-D");
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    if (b.dim(0) != k) throw dim_error("matmul: inner dimensions disagree");
    Tensor c({m, n});
    for (std::size_t i = 0; i < m; ++i) {
        const double* ai = a.data() + i * k;
        double* ci = c.data() + i * n;
        for (std::size_t kk = 0; kk < k; ++kk) {
            const double av = ai[kk];
            if (av == 0.0) continue;
            const double* bk = b.data() + kk * n;
            for (std::size_t j = 0; j < n; ++j) ci[j] += av * bk[j];
        }
    }
    return c;
}

// aᵀ·b without materializing the transpose.
inline Tensor mm_at_b(const Tensor& a, const Tensor& b) {
    const std::size_t k = a.dim(0), m = a.dim(1), n = b.dim(1);
    if (b.dim(0) != k) throw dim_error("matmul: inner dimensions disagree");
    Tensor c({m, n});
    for (std::size_t kk = 0; kk < k; ++kk) {
        const double* ak = a.data() + kk * m;
        const double* bk = b.data() + kk * n;
        for (std::size_t i = 0; i < m; ++i) {
            const double av = ak[i];
            if (av == 0.0) continue;
            double* ci = c.data() + i * n;
            for (std::size_t j = 0; j < n; ++j) ci[j] += av * bk[j];
        }
    }
    return c;
}

// a·bᵀ without materializing the transpose.
inline Tensor mm_a_bt(const Tensor& a, const Tensor& b) {
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
    if (b.dim(1) != k) throw dim_error("matmul: inner dimensions disagree");
    Tensor c({m, n});
    for (std::size_t i = 0; i < m; ++i) {
        const double* ai = a.data() + i * k;
        double* ci = c.data() + i * n;
        for (std::size_t j = 0; j < n; ++j) {
            const double* bj = b.data() + j * k;
            double s = 0.0;
            for (std::size_t kk = 0; kk < k; ++kk) s += ai[kk] * bj[kk];
            ci[j] = s;
        }
    }
    return c;
}

struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
};

// Reverse-mode tape. Nodes are recorded in construction order, which is a
// topological order; the reverse pass walks them once, back to front.
class Tape {
public:
    Var input(Tensor value, bool requires_grad = true) {
        return push(std::move(value), requires_grad, {}, nullptr);
    }

    Var constant(Tensor value) { return input(std::move(value), false); }

    // Test hook: value with caller-supplied (possibly absent) backward.
    // An absent backward on a grad-requiring path raises capability_error.
    Var custom(Tensor value, std::vector<Var> inputs,
               std::function<void(Tape&, int)> backward) {
        bool rg = false;
        std::vector<int> in;
        for (Var v : inputs) {
            rg = rg || nodes_[v.id].requires_grad;
            in.push_back(v.id);
        }
        return push(std::move(value), rg, std::move(in), std::move(backward));
    }

    const Tensor& value(Var v) const { return nodes_.at(v.id).value; }

    const Tensor& grad(Var v) const {
        const Node& n = nodes_.at(v.id);
        if (n.grad.size() == 0)
            throw precondition_error("Tape::grad: no gradient recorded for this node");
        return n.grad;
    }

    bool has_grad(Var v) const { return nodes_.at(v.id).grad.size() != 0; }

    std::size_t num_nodes() const { return nodes_.size(); }

    // ---- primitives ----------------------------------------------------

    Var matmul(Var a, Var b) {
        Tensor c = mm(value(a), value(b));
        return push(std::move(c), needs_grad(a, b), {a.id, b.id}, [](Tape& t, int id) {
            Node& n = t.nodes_[id];
            const Tensor& g = n.grad;
            const Tensor& av = t.nodes_[n.inputs[0]].value;
            const Tensor& bv = t.nodes_[n.inputs[1]].value;
            if (t.nodes_[n.inputs[0]].requires_grad)
                t.accumulate(n.inputs[0], mm_a_bt(g, bv));
            if (t.nodes_[n.inputs[1]].requires_grad)
                t.accumulate(n.inputs[1], mm_at_b(av, g));
        });
    }

    Var transpose(Var a) {
        const Tensor& av = value(a);
        if (av.ndim() != 2) throw dim_error("transpose: 2-D only");
        Tensor c({av.dim(1), av.dim(0)});
        for (std::size_t i = 0; i < av.dim(0); ++i)
            for (std::size_t j = 0; j < av.dim(1); ++j) c.at2(j, i) = av.at2(i, j);
        return push(std::move(c), needs_grad(a), {a.id}, [](Tape& t, int id) {
            Node& n = t.nodes_[id];
            const Tensor& g = n.grad;
            Tensor gt({g.dim(1), g.dim(0)});
            for (std::size_t i = 0; i < g.dim(0); ++i)
                for (std::size_t j = 0; j < g.dim(1); ++j) gt.at2(j, i) = g.at2(i, j);
            t.accumulate(n.inputs[0], std::move(gt));
        });
    }

    Var add(Var a, Var b) { return elementwise2(a, b, "add", +1.0); }
    Var sub(Var a, Var b) { return elementwise2(a, b, "sub", -1.0); }

    Var mul(Var a, Var b) {
        const Tensor& av = value(a);
        const Tensor& bv = value(b);
        if (!av.same_shape(bv)) throw dim_error("mul: shape mismatch");
        Tensor c(av.shape());
        for (std::size_t i = 0; i < c.size(); ++i) c[i] = av[i] * bv[i];
        return push(std::move(c), needs_grad(a, b), {a.id, b.id}, [](Tape& t, int id) {
            Node& n = t.nodes_[id];
            const Tensor& g = n.grad;
            const Tensor& av = t.nodes_[n.inputs[0]].value;
            const Tensor& bv = t.nodes_[n.inputs[1]].value;
            if (t.nodes_[n.inputs[0]].requires_grad) {
                Tensor ga(av.shape());
                for (std::size_t i = 0; i < ga.size(); ++i) ga[i] = g[i] * bv[i];
                t.accumulate(n.inputs[0], std::move(ga));
            }
            if (t.nodes_[n.inputs[1]].requires_grad) {
                Tensor gb(bv.shape());
                for (std::size_t i = 0; i < gb.size(); ++i) gb[i] = g[i] * av[i];
                t.accumulate(n.inputs[1], std::move(gb));
            }
        });
    }

    Var scale(Var a, double s) {
        const Tensor& av = value(a);
        Tensor c(av.shape());
        for (std::size_t i = 0; i < c.size(); ++i) c[i] = av[i] * s;
        return push(std::move(c), needs_grad(a), {a.id}, [s](Tape& t, int id) {
            Node& n = t.nodes_[id];
            Tensor ga(n.grad.shape());
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] = n.grad[i] * s;
            t.accumulate(n.inputs[0], std::move(ga));
        });
    }

    Var add_scalar(Var a, double s) {
        const Tensor& av = value(a);
        Tensor c(av.shape());
        for (std::size_t i = 0; i < c.size(); ++i) c[i] = av[i] + s;
        return push(std::move(c), needs_grad(a), {a.id}, [](Tape& t, int id) {
            Node& n = t.nodes_[id];
            t.accumulate(n.inputs[0], n.grad);
        });
    }

    Var sum(Var a) {
        const Tensor& av = value(a);
        double s = 0.0;
        for (std::size_t i = 0; i < av.size(); ++i) s += av[i];
        return push(Tensor::scalar(s), needs_grad(a), {a.id}, [](Tape& t, int id) {
            Node& n = t.nodes_[id];
            const double g = n.grad[0];
            Tensor ga(t.nodes_[n.inputs[0]].value.shape());
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] = g;
            t.accumulate(n.inputs[0], std::move(ga));
        });
    }

    Var mean(Var a) {
        const std::size_t nels = value(a).size();
        return scale(sum(a), 1.0 / static_cast<double>(nels));
    }

    // Column means: L×d → 1×d.
    Var mean_rows(Var a) {
        const Tensor& av = value(a);
        if (av.ndim() != 2) throw dim_error("mean_rows: 2-D only");
        const std::size_t L = av.dim(0), d = av.dim(1);
        Tensor c({1, d});
        for (std::size_t i = 0; i < L; ++i)
            for (std::size_t j = 0; j < d; ++j) c[j] += av.at2(i, j);
        for (std::size_t j = 0; j < d; ++j) c[j] /= static_cast<double>(L);
        return push(std::move(c), needs_grad(a), {a.id}, [L, d](Tape& t, int id) {
            Node& n = t.nodes_[id];
            Tensor ga({L, d});
            const double inv = 1.0 / static_cast<double>(L);
            for (std::size_t i = 0; i < L; ++i)
                for (std::size_t j = 0; j < d; ++j) ga.at2(i, j) = n.grad[j] * inv;
            t.accumulate(n.inputs[0], std::move(ga));
        });
    }

    // m: L×d, v: d (or 1×d), broadcast-added over rows.
    Var add_rowvec(Var m, Var v) {
        const Tensor& mv = value(m);
        const Tensor& vv = value(v);
        const std::size_t L = mv.dim(0), d = mv.dim(1);
        if (vv.size() != d) throw dim_error("add_rowvec: vector length mismatch");
        Tensor c(mv.shape());
        for (std::size_t i = 0; i < L; ++i)
            for (std::size_t j = 0; j < d; ++j) c.at2(i, j) = mv.at2(i, j) + vv[j];
        return push(std::move(c), needs_grad(m, v), {m.id, v.id}, [L, d](Tape& t, int id) {
            Node& n = t.nodes_[id];
            if (t.nodes_[n.inputs[0]].requires_grad) t.accumulate(n.inputs[0], n.grad);
            if (t.nodes_[n.inputs[1]].requires_grad) {
                Tensor gv(t.nodes_[n.inputs[1]].value.shape());
                for (std::size_t i = 0; i < L; ++i)
                    for (std::size_t j = 0; j < d; ++j) gv[j] += n.grad.at2(i, j);
                t.accumulate(n.inputs[1], std::move(gv));
            }
        });
    }

    Var softmax_lastdim(Var a) {
        const Tensor& av = value(a);
        if (av.ndim() < 1 || av.size() == 0)
            throw precondition_error("softmax: empty input");
        const std::size_t d = av.shape().back();
        const std::size_t rows = av.size() / d;
        Tensor y(av.shape());
        for (std::size_t r = 0; r < rows; ++r) {
            const double* x = av.data() + r * d;
            double* o = y.data() + r * d;
            double mx = x[0];
            for (std::size_t j = 1; j < d; ++j) mx = std::max(mx, x[j]);
            if (!std::isfinite(mx)) throw numeric_error("softmax: non-finite input");
            double z = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
                o[j] = std::exp(x[j] - mx);
                z += o[j];
            }
            for (std::size_t j = 0; j < d; ++j) o[j] /= z;
        }
        return push(std::move(y), needs_grad(a), {a.id}, [d, rows](Tape& t, int id) {
            Node& n = t.nodes_[id];
            const Tensor& y = n.value;
            Tensor ga(y.shape());
            for (std::size_t r = 0; r < rows; ++r) {
                const double* yr = y.data() + r * d;
                const double* gr = n.grad.data() + r * d;
                double dot = 0.0;
                for (std::size_t j = 0; j < d; ++j) dot += yr[j] * gr[j];
                double* o = ga.data() + r * d;
                for (std::size_t j = 0; j < d; ++j) o[j] = yr[j] * (gr[j] - dot);
            }
            t.accumulate(n.inputs[0], std::move(ga));
        });
    }

    Var layernorm_lastdim(Var a, double eps = 1e-6) {
        const Tensor& av = value(a);
        const std::size_t d = av.shape().back();
        const std::size_t rows = av.size() / d;
        Tensor y(av.shape());
        Tensor invstd({rows});
        for (std::size_t r = 0; r < rows; ++r) {
            const double* x = av.data() + r * d;
            double mu = 0.0;
            for (std::size_t j = 0; j < d; ++j) mu += x[j];
            mu /= static_cast<double>(d);
            double var = 0.0;
            for (std::size_t j = 0; j < d; ++j) var += (x[j] - mu) * (x[j] - mu);
            var /= static_cast<double>(d);
            const double is = 1.0 / std::sqrt(var + eps);
            invstd[r] = is;
            double* o = y.data() + r * d;
            for (std::size_t j = 0; j < d; ++j) o[j] = (x[j] - mu) * is;
        }
        return push(std::move(y), needs_grad(a), {a.id},
                    [d, rows, invstd](Tape& t, int id) {
            Node& n = t.nodes_[id];
            const Tensor& y = n.value;
            Tensor ga(y.shape());
            const double dd = static_cast<double>(d);
            for (std::size_t r = 0; r < rows; ++r) {
                const double* yr = y.data() + r * d;
                const double* gr = n.grad.data() + r * d;
                double gmean = 0.0, gydot = 0.0;
                for (std::size_t j = 0; j < d; ++j) {
                    gmean += gr[j];
                    gydot += gr[j] * yr[j];
                }
                gmean /= dd;
                gydot /= dd;
                double* o = ga.data() + r * d;
                for (std::size_t j = 0; j < d; ++j)
                    o[j] = invstd[r] * (gr[j] - gmean - yr[j] * gydot);
            }
            t.accumulate(n.inputs[0], std::move(ga));
        });
    }

    Var gelu(Var a) {
        const Tensor& av = value(a);
        Tensor c(av.shape());
        for (std::size_t i = 0; i < c.size(); ++i)
            c[i] = 0.5 * av[i] * (1.0 + std::erf(av[i] * M_SQRT1_2));
        return push(std::move(c), needs_grad(a), {a.id}, [](Tape& t, int id) {
            Node& n = t.nodes_[id];
            const Tensor& x = t.nodes_[n.inputs[0]].value;
            Tensor ga(x.shape());
            constexpr double inv_sqrt_2pi = 0.3989422804014327;
            for (std::size_t i = 0; i < ga.size(); ++i) {
                const double cdf = 0.5 * (1.0 + std::erf(x[i] * M_SQRT1_2));
                const double pdf = inv_sqrt_2pi * std::exp(-0.5 * x[i] * x[i]);
                ga[i] = n.grad[i] * (cdf + x[i] * pdf);
            }
            t.accumulate(n.inputs[0], std::move(ga));
        });
    }

    Var silu(Var a) {
        const Tensor& av = value(a);
        Tensor c(av.shape());
        for (std::size_t i = 0; i < c.size(); ++i) {
            const double s = 1.0 / (1.0 + std::exp(-av[i]));
            c[i] = av[i] * s;
        }
        return push(std::move(c), needs_grad(a), {a.id}, [](Tape& t, int id) {
            Node& n = t.nodes_[id];
            const Tensor& x = t.nodes_[n.inputs[0]].value;
            Tensor ga(x.shape());
            for (std::size_t i = 0; i < ga.size(); ++i) {
                const double s = 1.0 / (1.0 + std::exp(-x[i]));
                ga[i] = n.grad[i] * (s + x[i] * s * (1.0 - s));
            }
            t.accumulate(n.inputs[0], std::move(ga));
        });
    }

    // Same-padded 1-D convolution along the row axis.
    // x: L×Cin, w: {K, Cin, Cout}, b: {Cout}.
    Var conv1d_same(Var x, Var w, Var b) {
        const Tensor& xv = value(x);
        const Tensor& wv = value(w);
        const Tensor& bv = value(b);
        if (wv.ndim() != 3) throw dim_error("conv1d: weight must be {K,Cin,Cout}");
        const std::size_t L = xv.dim(0), cin = xv.dim(1);
        const std::size_t K = wv.dim(0), cout = wv.dim(2);
        if (wv.dim(1) != cin || bv.size() != cout)
            throw dim_error("conv1d: channel mismatch");
        const long pad = static_cast<long>(K) / 2;
        Tensor y({L, cout});
        for (std::size_t l = 0; l < L; ++l) {
            double* yr = y.data() + l * cout;
            for (std::size_t j = 0; j < cout; ++j) yr[j] = bv[j];
            for (std::size_t k = 0; k < K; ++k) {
                const long src = static_cast<long>(l) + static_cast<long>(k) - pad;
                if (src < 0 || src >= static_cast<long>(L)) continue;
                const double* xr = xv.data() + src * cin;
                const double* wk = wv.data() + k * cin * cout;
                for (std::size_t ci = 0; ci < cin; ++ci) {
                    const double xval = xr[ci];
                    if (xval == 0.0) continue;
                    const double* wc = wk + ci * cout;
                    for (std::size_t j = 0; j < cout; ++j) yr[j] += xval * wc[j];
                }
            }
        }
        return push(std::move(y), needs_grad(x, w) || needs_grad(b), {x.id, w.id, b.id},
                    [L, cin, K, cout, pad](Tape& t, int id) {
            Node& n = t.nodes_[id];
            const Tensor& g = n.grad;
            const Tensor& xv = t.nodes_[n.inputs[0]].value;
            const Tensor& wv = t.nodes_[n.inputs[1]].value;
            if (t.nodes_[n.inputs[0]].requires_grad) {
                Tensor gx({L, cin});
                for (std::size_t l = 0; l < L; ++l) {
                    const double* gr = g.data() + l * cout;
                    for (std::size_t k = 0; k < K; ++k) {
                        const long src = static_cast<long>(l) + static_cast<long>(k) - pad;
                        if (src < 0 || src >= static_cast<long>(L)) continue;
                        double* gxr = gx.data() + src * cin;
                        const double* wk = wv.data() + k * cin * cout;
                        for (std::size_t ci = 0; ci < cin; ++ci) {
                            const double* wc = wk + ci * cout;
                            double s = 0.0;
                            for (std::size_t j = 0; j < cout; ++j) s += gr[j] * wc[j];
                            gxr[ci] += s;
                        }
                    }
                }
                t.accumulate(n.inputs[0], std::move(gx));
            }
            if (t.nodes_[n.inputs[1]].requires_grad) {
                Tensor gw({K, cin, cout});
                for (std::size_t l = 0; l < L; ++l) {
                    const double* gr = g.data() + l * cout;
                    for (std::size_t k = 0; k < K; ++k) {
                        const long src = static_cast<long>(l) + static_cast<long>(k) - pad;
                        if (src < 0 || src >= static_cast<long>(L)) continue;
                        const double* xr = xv.data() + src * cin;
                        double* gk = gw.data() + k * cin * cout;
                        for (std::size_t ci = 0; ci < cin; ++ci) {
                            const double xval = xr[ci];
                            if (xval == 0.0) continue;
                            double* gc = gk + ci * cout;
                            for (std::size_t j = 0; j < cout; ++j) gc[j] += xval * gr[j];
                        }
                    }
                }
                t.accumulate(n.inputs[1], std::move(gw));
            }
            if (t.nodes_[n.inputs[2]].requires_grad) {
                Tensor gb({cout});
                for (std::size_t l = 0; l < L; ++l)
                    for (std::size_t j = 0; j < cout; ++j) gb[j] += g.at2(l, j);
                t.accumulate(n.inputs[2], std::move(gb));
            }
        });
    }

    Var slice_rows(Var a, std::size_t r0, std::size_t r1) {
        const Tensor& av = value(a);
        if (r1 > av.dim(0) || r0 >= r1) throw dim_error("slice_rows: bad range");
        const std::size_t d = av.dim(1);
        Tensor c({r1 - r0, d});
        for (std::size_t i = r0; i < r1; ++i)
            for (std::size_t j = 0; j < d; ++j) c.at2(i - r0, j) = av.at2(i, j);
        return push(std::move(c), needs_grad(a), {a.id}, [r0, r1, d](Tape& t, int id) {
            Node& n = t.nodes_[id];
            Tensor ga(t.nodes_[n.inputs[0]].value.shape());
            for (std::size_t i = r0; i < r1; ++i)
                for (std::size_t j = 0; j < d; ++j) ga.at2(i, j) = n.grad.at2(i - r0, j);
            t.accumulate(n.inputs[0], std::move(ga));
        });
    }

    Var slice_cols(Var a, std::size_t c0, std::size_t c1) {
        const Tensor& av = value(a);
        if (c1 > av.dim(1) || c0 >= c1) throw dim_error("slice_cols: bad range");
        const std::size_t L = av.dim(0);
        Tensor c({L, c1 - c0});
        for (std::size_t i = 0; i < L; ++i)
            for (std::size_t j = c0; j < c1; ++j) c.at2(i, j - c0) = av.at2(i, j);
        return push(std::move(c), needs_grad(a), {a.id}, [c0, c1, L](Tape& t, int id) {
            Node& n = t.nodes_[id];
            Tensor ga(t.nodes_[n.inputs[0]].value.shape());
            for (std::size_t i = 0; i < L; ++i)
                for (std::size_t j = c0; j < c1; ++j) ga.at2(i, j) = n.grad.at2(i, j - c0);
            t.accumulate(n.inputs[0], std::move(ga));
        });
    }

    Var concat_rows(const std::vector<Var>& parts) {
        if (parts.empty()) throw precondition_error("concat_rows: empty list");
        const std::size_t d = value(parts[0]).dim(1);
        std::size_t L = 0;
        bool rg = false;
        std::vector<int> in;
        for (Var p : parts) {
            if (value(p).dim(1) != d) throw dim_error("concat_rows: column mismatch");
            L += value(p).dim(0);
            rg = rg || nodes_[p.id].requires_grad;
            in.push_back(p.id);
        }
        Tensor c({L, d});
        std::size_t off = 0;
        for (Var p : parts) {
            const Tensor& pv = value(p);
            for (std::size_t i = 0; i < pv.dim(0); ++i)
                for (std::size_t j = 0; j < d; ++j) c.at2(off + i, j) = pv.at2(i, j);
            off += pv.dim(0);
        }
        return push(std::move(c), rg, std::move(in), [d](Tape& t, int id) {
            Node& n = t.nodes_[id];
            std::size_t off = 0;
            for (int in_id : n.inputs) {
                const std::size_t li = t.nodes_[in_id].value.dim(0);
                if (t.nodes_[in_id].requires_grad) {
                    Tensor gp({li, d});
                    for (std::size_t i = 0; i < li; ++i)
                        for (std::size_t j = 0; j < d; ++j)
                            gp.at2(i, j) = n.grad.at2(off + i, j);
                    t.accumulate(in_id, std::move(gp));
                }
                off += li;
            }
        });
    }

    Var concat_cols(const std::vector<Var>& parts) {
        if (parts.empty()) throw precondition_error("concat_cols: empty list");
        const std::size_t L = value(parts[0]).dim(0);
        std::size_t d = 0;
        bool rg = false;
        std::vector<int> in;
        for (Var p : parts) {
            if (value(p).dim(0) != L) throw dim_error("concat_cols: row mismatch");
            d += value(p).dim(1);
            rg = rg || nodes_[p.id].requires_grad;
            in.push_back(p.id);
        }
        Tensor c({L, d});
        std::size_t off = 0;
        for (Var p : parts) {
            const Tensor& pv = value(p);
            for (std::size_t i = 0; i < L; ++i)
                for (std::size_t j = 0; j < pv.dim(1); ++j) c.at2(i, off + j) = pv.at2(i, j);
            off += pv.dim(1);
        }
        return push(std::move(c), rg, std::move(in), [L](Tape& t, int id) {
            Node& n = t.nodes_[id];
            std::size_t off = 0;
            for (int in_id : n.inputs) {
                const std::size_t di = t.nodes_[in_id].value.dim(1);
                if (t.nodes_[in_id].requires_grad) {
                    Tensor gp({L, di});
                    for (std::size_t i = 0; i < L; ++i)
                        for (std::size_t j = 0; j < di; ++j)
                            gp.at2(i, j) = n.grad.at2(i, off + j);
                    t.accumulate(in_id, std::move(gp));
                }
                off += di;
            }
        });
    }

    // out[i] = a[index[i]] (row gather); backward scatter-adds.
    Var gather_rows(Var a, std::vector<std::size_t> index) {
        const Tensor& av = value(a);
        const std::size_t d = av.dim(1);
        Tensor c({index.size(), d});
        for (std::size_t i = 0; i < index.size(); ++i) {
            if (index[i] >= av.dim(0)) throw dim_error("gather_rows: index out of range");
            for (std::size_t j = 0; j < d; ++j) c.at2(i, j) = av.at2(index[i], j);
        }
        return push(std::move(c), needs_grad(a), {a.id},
                    [index = std::move(index), d](Tape& t, int id) {
            Node& n = t.nodes_[id];
            Tensor ga(t.nodes_[n.inputs[0]].value.shape());
            for (std::size_t i = 0; i < index.size(); ++i)
                for (std::size_t j = 0; j < d; ++j)
                    ga.at2(index[i], j) += n.grad.at2(i, j);
            t.accumulate(n.inputs[0], std::move(ga));
        });
    }

    // Rotary transform with precomputed per-position angle tables.
    // x: L×d (d even within each rotation block); cos/sin: L×(d/2).
    Var rope(Var x, Tensor cos_t, Tensor sin_t) {
        const Tensor& xv = value(x);
        const std::size_t L = xv.dim(0), d = xv.dim(1);
        if (d % 2 != 0) throw dim_error("rope: feature dim must be even");
        if (cos_t.dim(0) != L || cos_t.dim(1) != d / 2 || !cos_t.same_shape(sin_t))
            throw dim_error("rope: angle table shape mismatch");
        Tensor y({L, d});
        for (std::size_t l = 0; l < L; ++l)
            for (std::size_t i = 0; i < d / 2; ++i) {
                const double c = cos_t.at2(l, i), s = sin_t.at2(l, i);
                const double x0 = xv.at2(l, 2 * i), x1 = xv.at2(l, 2 * i + 1);
                y.at2(l, 2 * i) = x0 * c - x1 * s;
                y.at2(l, 2 * i + 1) = x0 * s + x1 * c;
            }
        return push(std::move(y), needs_grad(x), {x.id},
                    [L, d, cos_t = std::move(cos_t), sin_t = std::move(sin_t)](Tape& t, int id) {
            Node& n = t.nodes_[id];
            Tensor ga({L, d});
            for (std::size_t l = 0; l < L; ++l)
                for (std::size_t i = 0; i < d / 2; ++i) {
                    const double c = cos_t.at2(l, i), s = sin_t.at2(l, i);
                    const double g0 = n.grad.at2(l, 2 * i), g1 = n.grad.at2(l, 2 * i + 1);
                    ga.at2(l, 2 * i) = g0 * c + g1 * s;
                    ga.at2(l, 2 * i + 1) = -g0 * s + g1 * c;
                }
            t.accumulate(n.inputs[0], std::move(ga));
        });
    }

    Var reshape(Var a, std::vector<std::size_t> shape) {
        Tensor c = value(a).reshaped(shape);
        return push(std::move(c), needs_grad(a), {a.id}, [](Tape& t, int id) {
            Node& n = t.nodes_[id];
            Tensor ga = n.grad.reshaped(t.nodes_[n.inputs[0]].value.shape());
            t.accumulate(n.inputs[0], std::move(ga));
        });
    }

    // ---- reverse pass --------------------------------------------------

    void backward(Var loss) {
        Node& ln = nodes_.at(loss.id);
        if (ln.value.size() != 1)
            throw precondition_error("backward: loss must be scalar");
        accumulate(loss.id, Tensor::scalar(1.0));
        for (int id = loss.id; id >= 0; --id) {
            Node& n = nodes_[id];
            if (n.grad.size() == 0 || !n.requires_grad) continue;
            if (n.inputs.empty()) continue;  // leaf
            if (!n.backward)
                throw capability_error("backward: node has no reverse rule");
            n.backward(*this, id);
        }
    }

private:
    struct Node {
        Tensor value;
        Tensor grad;  // empty until touched by the reverse pass
        bool requires_grad = false;
        std::vector<int> inputs;
        std::function<void(Tape&, int)> backward;
    };

    bool needs_grad(Var a) const { return nodes_[a.id].requires_grad; }
    bool needs_grad(Var a, Var b) const { return needs_grad(a) || needs_grad(b); }

    Var push(Tensor value, bool rg, std::vector<int> inputs,
             std::function<void(Tape&, int)> bw) {
        Node n;
        n.value = std::move(value);
        n.requires_grad = rg;
        n.inputs = std::move(inputs);
        n.backward = std::move(bw);
        nodes_.push_back(std::move(n));
        return Var{static_cast<int>(nodes_.size()) - 1};
    }

    Var elementwise2(Var a, Var b, const char* name, double bsign) {
        const Tensor& av = value(a);
        const Tensor& bv = value(b);
        if (!av.same_shape(bv)) throw dim_error(std::string(name) + ": shape mismatch");
        Tensor c(av.shape());
        for (std::size_t i = 0; i < c.size(); ++i) c[i] = av[i] + bsign * bv[i];
        return push(std::move(c), needs_grad(a, b), {a.id, b.id}, [bsign](Tape& t, int id) {
            Node& n = t.nodes_[id];
            if (t.nodes_[n.inputs[0]].requires_grad) t.accumulate(n.inputs[0], n.grad);
            if (t.nodes_[n.inputs[1]].requires_grad) {
                if (bsign == 1.0) {
                    t.accumulate(n.inputs[1], n.grad);
                } else {
                    Tensor gb(n.grad.shape());
                    for (std::size_t i = 0; i < gb.size(); ++i) gb[i] = bsign * n.grad[i];
                    t.accumulate(n.inputs[1], std::move(gb));
                }
            }
        });
    }

    void accumulate(int id, Tensor g) {
        Node& n = nodes_[id];
        if (n.grad.size() == 0) {
            n.grad = std::move(g);
        } else {
            for (std::size_t i = 0; i < n.grad.size(); ++i) n.grad[i] += g[i];
        }
    }

    std::vector<Node> nodes_;
};

// Convenience: gradient of a scalar computation w.r.t. a parameter set.
inline std::vector<Tensor> grad(Tape& tape, Var loss, const std::vector<Var>& params) {
    tape.backward(loss);
    std::vector<Tensor> out;
    out.reserve(params.size());
    for (Var p : params) {
        if (tape.has_grad(p))
            out.push_back(tape.grad(p));
        else
            out.push_back(Tensor::zeros(tape.value(p).shape()));
    }
    return out;
}

}  // namespace rawflow::ad
