#pragma once

// Tape-based reverse-mode differentiation over dense float tensors.
//
// Every op appends a node holding its value and (when any input requires a
// gradient) a closure that propagates the node's adjoint to its parents.
// Nodes are created in topological order, so `backward` is a single reverse
// sweep. A tape belongs to one thread; separate tapes are independent.

#include <cmath>
#include <algorithm>
#include <cstddef>
#include <deque>
#include <functional>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "maskdime/error.hpp"
#include "maskdime/tensor.hpp"

namespace maskdime::ndgrad {

class Tape;

/// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
struct Var {
    Tape* tape = nullptr;
    std::size_t id = 0;

    const Tensor& value() const;
    const Shape& shape() const { return value().shape(); }
};

class Tape {
public:
    using Backward = std::function<void(Tape&, std::size_t)>;

    /// With `record == false` no backward closures are kept (inference mode).
    explicit Tape(bool record = true) : record_(record) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var variable(Tensor v) { return push_leaf(std::move(v), record_); }
    Var constant(Tensor v) { return push_leaf(std::move(v), false); }

    const Tensor& value(Var v) const { return nodes_.at(v.id).value; }
    bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }
    bool recording() const noexcept { return record_; }
    std::size_t size() const noexcept { return nodes_.size(); }

    /// Appends an op result. `parents` decides whether the node needs a
    /// gradient; `bw` is dropped when none of them does.
    Var push(Tensor value, std::initializer_list<Var> parents, Backward bw, const char* op) {
        require_finite(value, op);
        bool rg = false;
        for (Var p : parents) rg = rg || nodes_.at(p.id).requires_grad;
        Node n;
        n.value = std::move(value);
        n.requires_grad = rg && record_;
        if (n.requires_grad) n.backward = std::move(bw);
        nodes_.push_back(std::move(n));
        return Var{this, nodes_.size() - 1};
    }

    /// Reverse sweep from a scalar loss. Previous adjoints are discarded.
    void backward(Var loss) {
        const Tensor& lv = value(loss);
        if (lv.numel() != 1) throw ShapeError("backward: loss is not scalar, shape " + to_string(lv.shape()));
        for (auto& n : nodes_) {
            n.adjoint = Tensor();
            n.has_adjoint = false;
        }
        if (!nodes_[loss.id].requires_grad) return;
        adj(loss.id)[0] = 1.0f;
        for (std::size_t i = loss.id + 1; i-- > 0;) {
            Node& n = nodes_[i];
            if (!n.has_adjoint || !n.backward) continue;
            n.backward(*this, i);
        }
    }

    /// Adjoint after `backward`; a zero tensor when `v` did not influence the loss.
    Tensor adjoint(Var v) const {
        const Node& n = nodes_.at(v.id);
        return n.has_adjoint ? n.adjoint : Tensor::zeros_like(n.value);
    }

    Tensor grad(Var loss, Var wrt) {
        backward(loss);
        return adjoint(wrt);
    }

    // Used by op closures.
    Tensor& adj(std::size_t id) {
        Node& n = nodes_[id];
        if (!n.has_adjoint) {
            n.adjoint = Tensor::zeros_like(n.value);
            n.has_adjoint = true;
        }
        return n.adjoint;
    }
    bool needs(std::size_t id) const { return nodes_[id].requires_grad; }
    const Tensor& val(std::size_t id) const { return nodes_[id].value; }

private:
    struct Node {
        Tensor value;
        Tensor adjoint;
        bool has_adjoint = false;
        bool requires_grad = false;
        Backward backward;
    };

    Var push_leaf(Tensor v, bool rg) {
        Node n;
        n.value = std::move(v);
        n.requires_grad = rg;
        nodes_.push_back(std::move(n));
        return Var{this, nodes_.size() - 1};
    }

    bool record_;
    std::deque<Node> nodes_;  // deque: references stay valid across push_back
};

inline const Tensor& Var::value() const { return tape->value(*this); }

namespace detail {

inline Tape& same_tape(Var a, Var b) {
    if (a.tape != b.tape) throw ArgumentError("operands live on different tapes");
    return *a.tape;
}

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

template <class F>
Var unary(Var a, const char* op, F f, std::function<float(float x, float y)> dfdx) {
    Tape& tape = *a.tape;
    const Tensor& x = a.value();
    Tensor out(x.shape());
    for (std::size_t i = 0; i < x.numel(); ++i) out[i] = f(x[i]);
    const std::size_t pa = a.id;
    return tape.push(std::move(out), {a}, [pa, dfdx](Tape& t, std::size_t self) {
        const Tensor& xv = t.val(pa);
        const Tensor& yv = t.val(self);
        const Tensor& g = t.adj(self);
        Tensor& ga = t.adj(pa);
        for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * dfdx(xv[i], yv[i]);
    }, op);
}

struct ConvGeom {
    int n, ci, h, w, co, k, stride, pad, ho, wo;
    int kdim() const { return ci * k * k; }
    int cols() const { return n * ho * wo; }
};

// Output columns ox whose input column ox * stride + off lies inside [0, w).
inline std::pair<int, int> valid_range(int off, int stride, int w, int wo) {
    int lo = off >= 0 ? 0 : (-off + stride - 1) / stride;
    int hi = (w - 1 - off) >= 0 ? (w - 1 - off) / stride + 1 : 0;
    return {std::min(lo, wo), std::clamp(hi, 0, wo)};
}

inline void im2col(const float* x, const ConvGeom& g, float* col) {
    const int P = g.ho * g.wo;
    const int ncols = g.cols();
    for (int c = 0; c < g.ci; ++c)
        for (int ki = 0; ki < g.k; ++ki)
            for (int kj = 0; kj < g.k; ++kj) {
                float* row = col + static_cast<std::size_t>((c * g.k + ki) * g.k + kj) * ncols;
                const int off = kj - g.pad;
                const auto [lo, hi] = valid_range(off, g.stride, g.w, g.wo);
                for (int b = 0; b < g.n; ++b) {
                    const float* xc = x + (static_cast<std::size_t>(b) * g.ci + c) * g.h * g.w;
                    float* dst = row + static_cast<std::size_t>(b) * P;
                    for (int oy = 0; oy < g.ho; ++oy) {
                        const int iy = oy * g.stride + ki - g.pad;
                        float* d = dst + oy * g.wo;
                        if (iy < 0 || iy >= g.h || lo >= hi) {
                            std::fill(d, d + g.wo, 0.0f);
                            continue;
                        }
                        const float* src = xc + iy * g.w + off;
                        std::fill(d, d + lo, 0.0f);
                        if (g.stride == 1) {
                            std::copy(src + lo, src + hi, d + lo);
                        } else {
                            for (int ox = lo; ox < hi; ++ox) d[ox] = src[ox * g.stride];
                        }
                        std::fill(d + hi, d + g.wo, 0.0f);
                    }
                }
            }
}

inline void col2im_add(const float* col, const ConvGeom& g, float* gx) {
    const int P = g.ho * g.wo;
    const int ncols = g.cols();
    for (int c = 0; c < g.ci; ++c)
        for (int ki = 0; ki < g.k; ++ki)
            for (int kj = 0; kj < g.k; ++kj) {
                const float* row = col + static_cast<std::size_t>((c * g.k + ki) * g.k + kj) * ncols;
                const int off = kj - g.pad;
                const auto [lo, hi] = valid_range(off, g.stride, g.w, g.wo);
                if (lo >= hi) continue;
                for (int b = 0; b < g.n; ++b) {
                    float* xc = gx + (static_cast<std::size_t>(b) * g.ci + c) * g.h * g.w;
                    const float* src = row + static_cast<std::size_t>(b) * P;
                    for (int oy = 0; oy < g.ho; ++oy) {
                        const int iy = oy * g.stride + ki - g.pad;
                        if (iy < 0 || iy >= g.h) continue;
                        float* d = xc + iy * g.w + off;
                        const float* s = src + oy * g.wo;
                        if (g.stride == 1) {
                            for (int ox = lo; ox < hi; ++ox) d[ox] += s[ox];
                        } else {
                            for (int ox = lo; ox < hi; ++ox) d[ox * g.stride] += s[ox];
                        }
                    }
                }
            }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

inline Var add(Var a, Var b) {
    Tape& tape = detail::same_tape(a, b);
    require_same_shape(a.value(), b.value(), "add");
    const std::size_t pa = a.id, pb = b.id;
    return tape.push(a.value() + b.value(), {a, b}, [pa, pb](Tape& t, std::size_t self) {
        const Tensor& g = t.adj(self);
        if (t.needs(pa)) {
            Tensor& ga = t.adj(pa);
            for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
        }
        if (t.needs(pb)) {
            Tensor& gb = t.adj(pb);
            for (std::size_t i = 0; i < g.numel(); ++i) gb[i] += g[i];
        }
    }, "add");
}

inline Var sub(Var a, Var b) {
    Tape& tape = detail::same_tape(a, b);
    require_same_shape(a.value(), b.value(), "sub");
    const std::size_t pa = a.id, pb = b.id;
    return tape.push(a.value() - b.value(), {a, b}, [pa, pb](Tape& t, std::size_t self) {
        const Tensor& g = t.adj(self);
        if (t.needs(pa)) {
            Tensor& ga = t.adj(pa);
            for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
        }
        if (t.needs(pb)) {
            Tensor& gb = t.adj(pb);
            for (std::size_t i = 0; i < g.numel(); ++i) gb[i] -= g[i];
        }
    }, "sub");
}

inline Var mul(Var a, Var b) {
    Tape& tape = detail::same_tape(a, b);
    require_same_shape(a.value(), b.value(), "mul");
    const std::size_t pa = a.id, pb = b.id;
    return tape.push(a.value() * b.value(), {a, b}, [pa, pb](Tape& t, std::size_t self) {
        const Tensor& g = t.adj(self);
        if (t.needs(pa)) {
            const Tensor& bv = t.val(pb);
            Tensor& ga = t.adj(pa);
            for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * bv[i];
        }
        if (t.needs(pb)) {
            const Tensor& av = t.val(pa);
            Tensor& gb = t.adj(pb);
            for (std::size_t i = 0; i < g.numel(); ++i) gb[i] += g[i] * av[i];
        }
    }, "mul");
}

inline Var scale(Var a, float s) {
    return detail::unary(a, "scale", [s](float x) { return s * x; }, [s](float, float) { return s; });
}

inline Var add_scalar(Var a, float s) {
    return detail::unary(a, "add_scalar", [s](float x) { return x + s; }, [](float, float) { return 1.0f; });
}

inline Var relu(Var a) {
    return detail::unary(a, "relu", [](float x) { return x > 0.0f ? x : 0.0f; },
                         [](float x, float) { return x > 0.0f ? 1.0f : 0.0f; });
}

inline Var sigmoid(Var a) {
    return detail::unary(a, "sigmoid", [](float x) { return 1.0f / (1.0f + std::exp(-x)); },
                         [](float, float y) { return y * (1.0f - y); });
}

inline Var exp(Var a) {
    return detail::unary(a, "exp", [](float x) { return std::exp(x); }, [](float, float y) { return y; });
}

inline Var log(Var a) {
    return detail::unary(a, "log", [](float x) { return std::log(x); }, [](float x, float) { return 1.0f / x; });
}

inline Var abs(Var a) {
    return detail::unary(a, "abs", [](float x) { return std::fabs(x); },
                         [](float x, float) { return x > 0.0f ? 1.0f : (x < 0.0f ? -1.0f : 0.0f); });
}

inline Var square(Var a) {
    return detail::unary(a, "square", [](float x) { return x * x; }, [](float x, float) { return 2.0f * x; });
}

/// max(x, lo); the gradient is zero where the clamp is active.
inline Var clamp_min(Var a, float lo) {
    return detail::unary(a, "clamp_min", [lo](float x) { return x < lo ? lo : x; },
                         [lo](float x, float) { return x < lo ? 0.0f : 1.0f; });
}

// ---------------------------------------------------------------------------
// Reductions and shape ops

inline Var sum(Var a) {
    const Tensor& x = a.value();
    float s = 0.0f;
    for (float v : x.vec()) s += v;
    const std::size_t pa = a.id;
    return a.tape->push(Tensor::scalar(s), {a}, [pa](Tape& t, std::size_t self) {
        const float g = t.adj(self)[0];
        Tensor& ga = t.adj(pa);
        for (std::size_t i = 0; i < ga.numel(); ++i) ga[i] += g;
    }, "sum");
}

inline Var mean(Var a) { return scale(sum(a), 1.0f / static_cast<float>(a.value().numel())); }

inline Var l1_norm(Var a) { return sum(abs(a)); }

/// Euclidean norm; the subgradient at zero is taken as zero.
inline Var l2_norm(Var a) {
    Var ss = sum(square(a));
    const float n = std::sqrt(ss.value()[0]);
    const std::size_t ps = ss.id;
    return a.tape->push(Tensor::scalar(n), {ss}, [ps](Tape& t, std::size_t self) {
        const float y = t.val(self)[0];
        if (y > 0.0f) t.adj(ps)[0] += t.adj(self)[0] * 0.5f / y;
    }, "l2_norm");
}

inline Var reshape(Var a, Shape shape) {
    const std::size_t pa = a.id;
    return a.tape->push(a.value().reshaped(std::move(shape)), {a}, [pa](Tape& t, std::size_t self) {
        const Tensor& g = t.adj(self);
        Tensor& ga = t.adj(pa);
        for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
    }, "reshape");
}

/// Concatenates two NCHW tensors along the channel axis.
inline Var concat_channels(Var a, Var b) {
    Tape& tape = detail::same_tape(a, b);
    const Tensor& x = a.value();
    const Tensor& y = b.value();
    if (x.rank() != 4 || y.rank() != 4 || x.dim(0) != y.dim(0) || x.dim(2) != y.dim(2) || x.dim(3) != y.dim(3))
        throw ShapeError("concat_channels: " + to_string(x.shape()) + " vs " + to_string(y.shape()));
    const int n = x.dim(0), ca = x.dim(1), cb = y.dim(1);
    const std::size_t hw = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
    Tensor out({n, ca + cb, x.dim(2), x.dim(3)});
    for (int i = 0; i < n; ++i) {
        std::copy_n(x.data() + i * ca * hw, ca * hw, out.data() + i * (ca + cb) * hw);
        std::copy_n(y.data() + i * cb * hw, cb * hw, out.data() + (i * (ca + cb) + ca) * hw);
    }
    const std::size_t pa = a.id, pb = b.id;
    return tape.push(std::move(out), {a, b}, [pa, pb, n, ca, cb, hw](Tape& t, std::size_t self) {
        const Tensor& g = t.adj(self);
        if (t.needs(pa)) {
            Tensor& ga = t.adj(pa);
            for (int i = 0; i < n; ++i)
                for (std::size_t j = 0; j < ca * hw; ++j) ga[i * ca * hw + j] += g[i * (ca + cb) * hw + j];
        }
        if (t.needs(pb)) {
            Tensor& gb = t.adj(pb);
            for (int i = 0; i < n; ++i)
                for (std::size_t j = 0; j < cb * hw; ++j) gb[i * cb * hw + j] += g[(i * (ca + cb) + ca) * hw + j];
        }
    }, "concat");
}

/// Picks one entry per row of an [N, C] tensor: out[i] = x[i, index[i]].
inline Var pick(Var a, std::vector<int> index) {
    const Tensor& x = a.value();
    if (x.rank() != 2 || static_cast<int>(index.size()) != x.dim(0))
        throw ShapeError("pick: expected [N,C] with N indices, got " + to_string(x.shape()));
    const int n = x.dim(0), c = x.dim(1);
    Tensor out({n});
    for (int i = 0; i < n; ++i) {
        if (index[i] < 0 || index[i] >= c) throw ArgumentError("pick: index out of range");
        out[i] = x[static_cast<std::size_t>(i) * c + index[i]];
    }
    const std::size_t pa = a.id;
    return a.tape->push(std::move(out), {a}, [pa, c, index = std::move(index)](Tape& t, std::size_t self) {
        const Tensor& g = t.adj(self);
        Tensor& ga = t.adj(pa);
        for (std::size_t i = 0; i < index.size(); ++i) ga[i * c + index[i]] += g[i];
    }, "pick");
}

// ---------------------------------------------------------------------------
// Broadcasts

/// x[N, M] + b[M] (row broadcast).
inline Var add_row_bias(Var x, Var b) {
    Tape& tape = detail::same_tape(x, b);
    const Tensor& xv = x.value();
    const Tensor& bv = b.value();
    if (xv.rank() != 2 || bv.numel() != static_cast<std::size_t>(xv.dim(1)))
        throw ShapeError("add_row_bias: " + to_string(xv.shape()) + " + " + to_string(bv.shape()));
    const int n = xv.dim(0), m = xv.dim(1);
    Tensor out = xv;
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < m; ++j) out[static_cast<std::size_t>(i) * m + j] += bv[j];
    const std::size_t px = x.id, pb = b.id;
    return tape.push(std::move(out), {x, b}, [px, pb, n, m](Tape& t, std::size_t self) {
        const Tensor& g = t.adj(self);
        if (t.needs(px)) {
            Tensor& gx = t.adj(px);
            for (std::size_t i = 0; i < g.numel(); ++i) gx[i] += g[i];
        }
        if (t.needs(pb)) {
            Tensor& gb = t.adj(pb);
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < m; ++j) gb[j] += g[static_cast<std::size_t>(i) * m + j];
        }
    }, "add_row_bias");
}

/// x[N, C, H, W] + b[N, C] broadcast over the spatial extent.
inline Var add_channel_bias(Var x, Var b) {
    Tape& tape = detail::same_tape(x, b);
    const Tensor& xv = x.value();
    const Tensor& bv = b.value();
    if (xv.rank() != 4 || bv.rank() != 2 || bv.dim(0) != xv.dim(0) || bv.dim(1) != xv.dim(1))
        throw ShapeError("add_channel_bias: " + to_string(xv.shape()) + " + " + to_string(bv.shape()));
    const std::size_t nc = static_cast<std::size_t>(xv.dim(0)) * xv.dim(1);
    const std::size_t hw = static_cast<std::size_t>(xv.dim(2)) * xv.dim(3);
    Tensor out = xv;
    for (std::size_t i = 0; i < nc; ++i)
        for (std::size_t j = 0; j < hw; ++j) out[i * hw + j] += bv[i];
    const std::size_t px = x.id, pb = b.id;
    return tape.push(std::move(out), {x, b}, [px, pb, nc, hw](Tape& t, std::size_t self) {
        const Tensor& g = t.adj(self);
        if (t.needs(px)) {
            Tensor& gx = t.adj(px);
            for (std::size_t i = 0; i < g.numel(); ++i) gx[i] += g[i];
        }
        if (t.needs(pb)) {
            Tensor& gb = t.adj(pb);
            for (std::size_t i = 0; i < nc; ++i) {
                float s = 0.0f;
                for (std::size_t j = 0; j < hw; ++j) s += g[i * hw + j];
                gb[i] += s;
            }
        }
    }, "add_channel_bias");
}

// ---------------------------------------------------------------------------
// Linear algebra

/// [M, K] x [K, N] -> [M, N].
inline Var matmul(Var a, Var b) {
    Tape& tape = detail::same_tape(a, b);
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0))
        throw ShapeError("matmul: " + to_string(av.shape()) + " x " + to_string(bv.shape()));
    const int m = av.dim(0), k = av.dim(1), n = bv.dim(1);
    Tensor out({m, n});
    detail::MapMat(out.data(), m, n).noalias() = detail::CMapMat(av.data(), m, k) * detail::CMapMat(bv.data(), k, n);
    const std::size_t pa = a.id, pb = b.id;
    return tape.push(std::move(out), {a, b}, [pa, pb, m, k, n](Tape& t, std::size_t self) {
        detail::CMapMat g(t.adj(self).data(), m, n);
        if (t.needs(pa))
            detail::MapMat(t.adj(pa).data(), m, k).noalias() += g * detail::CMapMat(t.val(pb).data(), k, n).transpose();
        if (t.needs(pb))
            detail::MapMat(t.adj(pb).data(), k, n).noalias() += detail::CMapMat(t.val(pa).data(), m, k).transpose() * g;
    }, "matmul");
}

/// Dense layer: x[N, in] * w[out, in]^T + b[out].
inline Var linear(Var x, Var w, Var b) {
    Tape& tape = detail::same_tape(x, w);
    const Tensor& xv = x.value();
    const Tensor& wv = w.value();
    const Tensor& bv = b.value();
    if (xv.rank() != 2 || wv.rank() != 2 || xv.dim(1) != wv.dim(1) || bv.numel() != static_cast<std::size_t>(wv.dim(0)))
        throw ShapeError("linear: " + to_string(xv.shape()) + " with weight " + to_string(wv.shape()));
    const int n = xv.dim(0), in = xv.dim(1), out_dim = wv.dim(0);
    Tensor out({n, out_dim});
    detail::MapMat o(out.data(), n, out_dim);
    o.noalias() = detail::CMapMat(xv.data(), n, in) * detail::CMapMat(wv.data(), out_dim, in).transpose();
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < out_dim; ++j) o(i, j) += bv[j];
    const std::size_t px = x.id, pw = w.id, pb = b.id;
    return tape.push(std::move(out), {x, w, b}, [px, pw, pb, n, in, out_dim](Tape& t, std::size_t self) {
        detail::CMapMat g(t.adj(self).data(), n, out_dim);
        if (t.needs(px))
            detail::MapMat(t.adj(px).data(), n, in).noalias() += g * detail::CMapMat(t.val(pw).data(), out_dim, in);
        if (t.needs(pw))
            detail::MapMat(t.adj(pw).data(), out_dim, in).noalias() +=
                g.transpose() * detail::CMapMat(t.val(px).data(), n, in);
        if (t.needs(pb)) {
            Tensor& gb = t.adj(pb);
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < out_dim; ++j) gb[j] += g(i, j);
        }
    }, "linear");
}

/// 2-D convolution, NCHW input, weight [Co, Ci, K, K], bias [Co], square
/// kernel, zero padding. Implemented as im2col plus GEMM over chunks of the
/// batch (about 2048 output columns per chunk so the column buffer stays in
/// cache). Chunking depends only on the shapes, so results are reproducible.
inline Var conv2d(Var x, Var w, Var b, int stride = 1, int pad = -1) {
    Tape& tape = detail::same_tape(x, w);
    const Tensor& xv = x.value();
    const Tensor& wv = w.value();
    const Tensor& bv = b.value();
    if (xv.rank() != 4 || wv.rank() != 4 || wv.dim(1) != xv.dim(1) || wv.dim(2) != wv.dim(3) ||
        bv.numel() != static_cast<std::size_t>(wv.dim(0)))
        throw ShapeError("conv2d: input " + to_string(xv.shape()) + " weight " + to_string(wv.shape()));
    if (stride < 1) throw ArgumentError("conv2d: stride must be positive");
    const int k = wv.dim(2);
    if (pad < 0) pad = k / 2;
    detail::ConvGeom geom{xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3), wv.dim(0), k, stride, pad, 0, 0};
    geom.ho = (geom.h + 2 * pad - k) / stride + 1;
    geom.wo = (geom.w + 2 * pad - k) / stride + 1;
    if (geom.ho <= 0 || geom.wo <= 0) throw ShapeError("conv2d: output would be empty");

    const int P = geom.ho * geom.wo;
    const int K = geom.kdim();
    const int chunk = std::max(1, 2048 / P);
    const std::size_t in_stride = static_cast<std::size_t>(geom.ci) * geom.h * geom.w;
    const std::size_t out_stride = static_cast<std::size_t>(geom.co) * P;

    Tensor out({geom.n, geom.co, geom.ho, geom.wo});
    std::vector<float> col;
    detail::RowMat res;
    for (int b0 = 0; b0 < geom.n; b0 += chunk) {
        detail::ConvGeom g = geom;
        g.n = std::min(chunk, geom.n - b0);
        const int NC = g.cols();
        col.resize(static_cast<std::size_t>(K) * NC);
        detail::im2col(xv.data() + b0 * in_stride, g, col.data());
        res.resize(g.co, NC);
        res.noalias() = detail::CMapMat(wv.data(), g.co, K) * detail::CMapMat(col.data(), K, NC);
        for (int n = 0; n < g.n; ++n)
            for (int c = 0; c < g.co; ++c) {
                float* dst = out.data() + (b0 + n) * out_stride + static_cast<std::size_t>(c) * P;
                const float* src = res.data() + static_cast<std::size_t>(c) * NC + static_cast<std::size_t>(n) * P;
                const float bias = bv[c];
                for (int p = 0; p < P; ++p) dst[p] = src[p] + bias;
            }
    }

    const std::size_t px = x.id, pw = w.id, pb = b.id;
    return tape.push(std::move(out), {x, w, b}, [px, pw, pb, geom, chunk](Tape& t, std::size_t self) {
        const int P = geom.ho * geom.wo;
        const int K = geom.kdim();
        const std::size_t in_stride = static_cast<std::size_t>(geom.ci) * geom.h * geom.w;
        const std::size_t out_stride = static_cast<std::size_t>(geom.co) * P;
        const Tensor& gout = t.adj(self);
        if (t.needs(pb)) {
            Tensor& gb = t.adj(pb);
            for (int c = 0; c < geom.co; ++c) {
                float s = 0.0f;
                for (int n = 0; n < geom.n; ++n) {
                    const float* src = gout.data() + n * out_stride + static_cast<std::size_t>(c) * P;
                    for (int p = 0; p < P; ++p) s += src[p];
                }
                gb[c] += s;
            }
        }
        const bool need_w = t.needs(pw), need_x = t.needs(px);
        if (!need_w && !need_x) return;
        std::vector<float> col;
        detail::RowMat gm, gcol;
        for (int b0 = 0; b0 < geom.n; b0 += chunk) {
            detail::ConvGeom g = geom;
            g.n = std::min(chunk, geom.n - b0);
            const int NC = g.cols();
            gm.resize(g.co, NC);
            for (int n = 0; n < g.n; ++n)
                for (int c = 0; c < g.co; ++c)
                    std::copy_n(gout.data() + (b0 + n) * out_stride + static_cast<std::size_t>(c) * P, P,
                                gm.data() + static_cast<std::size_t>(c) * NC + static_cast<std::size_t>(n) * P);
            if (need_w) {
                col.resize(static_cast<std::size_t>(K) * NC);
                detail::im2col(t.val(px).data() + b0 * in_stride, g, col.data());
                detail::MapMat(t.adj(pw).data(), g.co, K).noalias() +=
                    gm * detail::CMapMat(col.data(), K, NC).transpose();
            }
            if (need_x) {
                gcol.resize(K, NC);
                gcol.noalias() = detail::CMapMat(t.val(pw).data(), g.co, K).transpose() * gm;
                detail::col2im_add(gcol.data(), g, t.adj(px).data() + b0 * in_stride);
            }
        }
    }, "conv2d");
}

// ---------------------------------------------------------------------------
// Pooling and resampling (NCHW)

/// Non-overlapping k x k average pooling; H and W must be divisible by k.
inline Var avg_pool2d(Var a, int k) {
    const Tensor& x = a.value();
    if (x.rank() != 4 || k < 1 || x.dim(2) % k || x.dim(3) % k)
        throw ShapeError("avg_pool2d: " + to_string(x.shape()) + " with window " + std::to_string(k));
    const int nc = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3), ho = h / k, wo = w / k;
    Tensor out({x.dim(0), x.dim(1), ho, wo});
    const float inv = 1.0f / static_cast<float>(k * k);
    for (int c = 0; c < nc; ++c)
        for (int oy = 0; oy < ho; ++oy)
            for (int ox = 0; ox < wo; ++ox) {
                float s = 0.0f;
                for (int i = 0; i < k; ++i)
                    for (int j = 0; j < k; ++j) s += x[(static_cast<std::size_t>(c) * h + oy * k + i) * w + ox * k + j];
                out[(static_cast<std::size_t>(c) * ho + oy) * wo + ox] = s * inv;
            }
    const std::size_t pa = a.id;
    return a.tape->push(std::move(out), {a}, [pa, nc, h, w, ho, wo, k, inv](Tape& t, std::size_t self) {
        const Tensor& g = t.adj(self);
        Tensor& ga = t.adj(pa);
        for (int c = 0; c < nc; ++c)
            for (int oy = 0; oy < ho; ++oy)
                for (int ox = 0; ox < wo; ++ox) {
                    const float v = g[(static_cast<std::size_t>(c) * ho + oy) * wo + ox] * inv;
                    for (int i = 0; i < k; ++i)
                        for (int j = 0; j < k; ++j) ga[(static_cast<std::size_t>(c) * h + oy * k + i) * w + ox * k + j] += v;
                }
    }, "avg_pool2d");
}

/// Non-overlapping k x k max pooling; ties go to the first element in raster order.
inline Var max_pool2d(Var a, int k) {
    const Tensor& x = a.value();
    if (x.rank() != 4 || k < 1 || x.dim(2) % k || x.dim(3) % k)
        throw ShapeError("max_pool2d: " + to_string(x.shape()) + " with window " + std::to_string(k));
    const int nc = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3), ho = h / k, wo = w / k;
    Tensor out({x.dim(0), x.dim(1), ho, wo});
    std::vector<std::size_t> arg(out.numel());
    for (int c = 0; c < nc; ++c)
        for (int oy = 0; oy < ho; ++oy)
            for (int ox = 0; ox < wo; ++ox) {
                std::size_t best = (static_cast<std::size_t>(c) * h + oy * k) * w + ox * k;
                for (int i = 0; i < k; ++i)
                    for (int j = 0; j < k; ++j) {
                        const std::size_t idx = (static_cast<std::size_t>(c) * h + oy * k + i) * w + ox * k + j;
                        if (x[idx] > x[best]) best = idx;
                    }
                const std::size_t o = (static_cast<std::size_t>(c) * ho + oy) * wo + ox;
                out[o] = x[best];
                arg[o] = best;
            }
    const std::size_t pa = a.id;
    return a.tape->push(std::move(out), {a}, [pa, arg = std::move(arg)](Tape& t, std::size_t self) {
        const Tensor& g = t.adj(self);
        Tensor& ga = t.adj(pa);
        for (std::size_t o = 0; o < arg.size(); ++o) ga[arg[o]] += g[o];
    }, "max_pool2d");
}

/// Nearest-neighbour 2x upsampling.
inline Var upsample2x(Var a) {
    const Tensor& x = a.value();
    if (x.rank() != 4) throw ShapeError("upsample2x: " + to_string(x.shape()));
    const int nc = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
    Tensor out({x.dim(0), x.dim(1), 2 * h, 2 * w});
    for (int c = 0; c < nc; ++c)
        for (int y = 0; y < 2 * h; ++y)
            for (int xx = 0; xx < 2 * w; ++xx)
                out[(static_cast<std::size_t>(c) * 2 * h + y) * 2 * w + xx] = x[(static_cast<std::size_t>(c) * h + y / 2) * w + xx / 2];
    const std::size_t pa = a.id;
    return a.tape->push(std::move(out), {a}, [pa, nc, h, w](Tape& t, std::size_t self) {
        const Tensor& g = t.adj(self);
        Tensor& ga = t.adj(pa);
        for (int c = 0; c < nc; ++c)
            for (int y = 0; y < 2 * h; ++y)
                for (int xx = 0; xx < 2 * w; ++xx)
                    ga[(static_cast<std::size_t>(c) * h + y / 2) * w + xx / 2] += g[(static_cast<std::size_t>(c) * 2 * h + y) * 2 * w + xx];
    }, "upsample2x");
}

// ---------------------------------------------------------------------------
// Softmax over the last axis (rows of an [N, C] tensor, or a single vector).

inline Var softmax(Var a) {
    const Tensor& x = a.value();
    const int c = x.dim(-1);
    const int rows = static_cast<int>(x.numel() / c);
    Tensor out(x.shape());
    for (int r = 0; r < rows; ++r) {
        const float* xi = x.data() + static_cast<std::size_t>(r) * c;
        float* yi = out.data() + static_cast<std::size_t>(r) * c;
        float mx = xi[0];
        for (int j = 1; j < c; ++j) mx = std::max(mx, xi[j]);
        float z = 0.0f;
        for (int j = 0; j < c; ++j) {
            yi[j] = std::exp(xi[j] - mx);
            z += yi[j];
        }
        for (int j = 0; j < c; ++j) yi[j] /= z;
    }
    const std::size_t pa = a.id;
    return a.tape->push(std::move(out), {a}, [pa, rows, c](Tape& t, std::size_t self) {
        const Tensor& y = t.val(self);
        const Tensor& g = t.adj(self);
        Tensor& ga = t.adj(pa);
        for (int r = 0; r < rows; ++r) {
            const std::size_t o = static_cast<std::size_t>(r) * c;
            float dot = 0.0f;
            for (int j = 0; j < c; ++j) dot += g[o + j] * y[o + j];
            for (int j = 0; j < c; ++j) ga[o + j] += y[o + j] * (g[o + j] - dot);
        }
    }, "softmax");
}

/// Numerically stable log-softmax over the last axis (used for training losses).
inline Var log_softmax(Var a) {
    const Tensor& x = a.value();
    const int c = x.dim(-1);
    const int rows = static_cast<int>(x.numel() / c);
    Tensor out(x.shape());
    for (int r = 0; r < rows; ++r) {
        const float* xi = x.data() + static_cast<std::size_t>(r) * c;
        float* yi = out.data() + static_cast<std::size_t>(r) * c;
        float mx = xi[0];
        for (int j = 1; j < c; ++j) mx = std::max(mx, xi[j]);
        float z = 0.0f;
        for (int j = 0; j < c; ++j) z += std::exp(xi[j] - mx);
        const float lz = mx + std::log(z);
        for (int j = 0; j < c; ++j) yi[j] = xi[j] - lz;
    }
    const std::size_t pa = a.id;
    return a.tape->push(std::move(out), {a}, [pa, rows, c](Tape& t, std::size_t self) {
        const Tensor& y = t.val(self);
        const Tensor& g = t.adj(self);
        Tensor& ga = t.adj(pa);
        for (int r = 0; r < rows; ++r) {
            const std::size_t o = static_cast<std::size_t>(r) * c;
            float gs = 0.0f;
            for (int j = 0; j < c; ++j) gs += g[o + j];
            for (int j = 0; j < c; ++j) ga[o + j] += g[o + j] - std::exp(y[o + j]) * gs;
        }
    }, "log_softmax");
}

}  // namespace maskdime::ndgrad
