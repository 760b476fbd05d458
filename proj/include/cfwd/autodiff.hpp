#ifndef CFWD_AUTODIFF_HPP
#define CFWD_AUTODIFF_HPP

#include <Eigen/Dense>
#include <cmath>
#include <deque>
#include <functional>
#include <utility>
#include <vector>

#include "cfwd/tensor.hpp"

namespace cfwd::ad {

using MatRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<MatRM>;
using CMapM = Eigen::Map<const MatRM>;

struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
};

/// Reverse-mode tape. Nodes are appended in evaluation order, so walking
/// the tape backwards is already a topological order of the graph.
class Tape {
public:
    struct Node {
        Tensor value;
        Tensor grad;
        bool requires_grad = false;
        bool has_grad = false;
        std::function<void(Tape&, const Tensor&)> backward;
    };

    Var leaf(Tensor value, bool requires_grad = false) {
        return push(std::move(value), requires_grad, nullptr);
    }

    Var constant(Tensor value) { return leaf(std::move(value), false); }

    Var push(Tensor value, bool requires_grad, std::function<void(Tape&, const Tensor&)> backward) {
        nodes_.push_back(Node{std::move(value), Tensor{}, requires_grad, false, std::move(backward)});
        return Var{static_cast<int>(nodes_.size()) - 1};
    }

    const Tensor& val(Var v) const { return nodes_.at(static_cast<std::size_t>(v.id)).value; }
    bool requires_grad(Var v) const { return nodes_.at(static_cast<std::size_t>(v.id)).requires_grad; }

    /// Gradient of the last backward() target w.r.t. v. Zero tensor if the
    /// node was never reached.
    Tensor grad(Var v) const {
        const Node& n = nodes_.at(static_cast<std::size_t>(v.id));
        if (n.has_grad) return n.grad;
        return zeros(n.value.shape);
    }

    void accumulate(Var v, const Tensor& g) {
        Node& n = nodes_.at(static_cast<std::size_t>(v.id));
        if (!n.requires_grad) return;
        check_same_shape(n.value, g, "gradient accumulate");
        if (!n.has_grad) {
            n.grad = g;
            n.has_grad = true;
        } else {
            for (long i = 0; i < n.grad.numel(); ++i) n.grad[i] += g[i];
        }
    }

    /// Backpropagates from a scalar node. May be called once per tape.
    void backward(Var loss) {
        Node& ln = nodes_.at(static_cast<std::size_t>(loss.id));
        require(ln.value.numel() == 1, ErrorCode::InvalidArgument, "backward target must be scalar");
        ln.grad = full(ln.value.shape, 1.0);
        ln.has_grad = true;
        for (int i = loss.id; i >= 0; --i) {
            Node& n = nodes_[static_cast<std::size_t>(i)];
            if (!n.has_grad || !n.backward) continue;
            n.backward(*this, n.grad);
        }
    }

    std::size_t size() const { return nodes_.size(); }

private:
    // deque keeps references from val() stable while new nodes are appended
    std::deque<Node> nodes_;
};

namespace detail {

inline bool is_scalar(const Tensor& t) { return t.numel() == 1; }

inline bool any_grad(Tape& t, std::initializer_list<Var> vs) {
    for (Var v : vs)
        if (t.requires_grad(v)) return true;
    return false;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise arithmetic (same shape, or one operand scalar)

template <typename Fwd, typename BwdA, typename BwdB>
Var binary_op(Tape& t, Var a, Var b, Fwd fwd, BwdA dfda, BwdB dfdb, const char* name) {
    const Tensor& av = t.val(a);
    const Tensor& bv = t.val(b);
    bool a_scalar = detail::is_scalar(av), b_scalar = detail::is_scalar(bv);
    require(av.same_shape(bv) || a_scalar || b_scalar, ErrorCode::ShapeMismatch, name);
    const Tensor& big = a_scalar ? bv : av;
    Tensor out(big.shape);
    for (long i = 0; i < big.numel(); ++i) {
        double x = av[a_scalar ? 0 : i], y = bv[b_scalar ? 0 : i];
        out[i] = fwd(x, y);
    }
    bool rg = detail::any_grad(t, {a, b});
    return t.push(std::move(out), rg, [=](Tape& tp, const Tensor& g) {
        const Tensor& xa = tp.val(a);
        const Tensor& xb = tp.val(b);
        if (tp.requires_grad(a)) {
            Tensor ga(xa.shape);
            for (long i = 0; i < g.numel(); ++i) {
                double x = xa[a_scalar ? 0 : i], y = xb[b_scalar ? 0 : i];
                double c = g[i] * dfda(x, y);
                if (a_scalar)
                    ga[0] += c;
                else
                    ga[i] = c;
            }
            tp.accumulate(a, ga);
        }
        if (tp.requires_grad(b)) {
            Tensor gb(xb.shape);
            for (long i = 0; i < g.numel(); ++i) {
                double x = xa[a_scalar ? 0 : i], y = xb[b_scalar ? 0 : i];
                double c = g[i] * dfdb(x, y);
                if (b_scalar)
                    gb[0] += c;
                else
                    gb[i] = c;
            }
            tp.accumulate(b, gb);
        }
    });
}

inline Var add(Tape& t, Var a, Var b) {
    return binary_op(
        t, a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
        [](double, double) { return 1.0; }, "add");
}

inline Var sub(Tape& t, Var a, Var b) {
    return binary_op(
        t, a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
        [](double, double) { return -1.0; }, "sub");
}

inline Var mul(Tape& t, Var a, Var b) {
    return binary_op(
        t, a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
        [](double x, double) { return x; }, "mul");
}

inline Var div(Tape& t, Var a, Var b) {
    return binary_op(
        t, a, b, [](double x, double y) { return x / y; }, [](double, double y) { return 1.0 / y; },
        [](double x, double y) { return -x / (y * y); }, "div");
}

template <typename Fwd, typename Bwd>
Var unary_op(Tape& t, Var a, Fwd fwd, Bwd dfdx) {
    const Tensor& av = t.val(a);
    Tensor out(av.shape);
    for (long i = 0; i < av.numel(); ++i) out[i] = fwd(av[i]);
    return t.push(std::move(out), t.requires_grad(a), [=](Tape& tp, const Tensor& g) {
        if (!tp.requires_grad(a)) return;
        const Tensor& x = tp.val(a);
        Tensor ga(x.shape);
        for (long i = 0; i < g.numel(); ++i) ga[i] = g[i] * dfdx(x[i]);
        tp.accumulate(a, ga);
    });
}

/// out = k*x + c with scalar constants.
inline Var affine(Tape& t, Var a, double k, double c) {
    return unary_op(
        t, a, [=](double x) { return k * x + c; }, [=](double) { return k; });
}

inline Var scale(Tape& t, Var a, double k) { return affine(t, a, k, 0.0); }
inline Var neg(Tape& t, Var a) { return affine(t, a, -1.0, 0.0); }

inline Var exp_(Tape& t, Var a) {
    return unary_op(
        t, a, [](double x) { return std::exp(x); }, [](double x) { return std::exp(x); });
}

inline Var sqrt_(Tape& t, Var a) {
    return unary_op(
        t, a, [](double x) { return std::sqrt(x); },
        [](double x) { return x > 0.0 ? 0.5 / std::sqrt(x) : 0.0; });
}

inline Var abs_(Tape& t, Var a) {
    return unary_op(
        t, a, [](double x) { return std::abs(x); },
        [](double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

inline Var square(Tape& t, Var a) {
    return unary_op(
        t, a, [](double x) { return x * x; }, [](double x) { return 2.0 * x; });
}

inline Var silu(Tape& t, Var a) {
    return unary_op(
        t, a, [](double x) { return x / (1.0 + std::exp(-x)); },
        [](double x) {
            double s = 1.0 / (1.0 + std::exp(-x));
            return s * (1.0 + x * (1.0 - s));
        });
}

inline Var maximum_scalar(Tape& t, Var a, double m) {
    return unary_op(
        t, a, [=](double x) { return std::max(x, m); }, [=](double x) { return x > m ? 1.0 : 0.0; });
}

inline Var clamp(Tape& t, Var a, double lo, double hi) {
    return unary_op(
        t, a, [=](double x) { return std::min(hi, std::max(lo, x)); },
        [=](double x) { return (x > lo && x < hi) ? 1.0 : 0.0; });
}

// ---------------------------------------------------------------------------
// reductions

inline Var sum(Tape& t, Var a) {
    Tensor out({1});
    out[0] = sum_of(t.val(a));
    return t.push(std::move(out), t.requires_grad(a), [=](Tape& tp, const Tensor& g) {
        if (!tp.requires_grad(a)) return;
        tp.accumulate(a, full(tp.val(a).shape, g[0]));
    });
}

inline Var mean(Tape& t, Var a) {
    long n = t.val(a).numel();
    require(n > 0, ErrorCode::EmptyList, "mean of empty tensor");
    return scale(t, sum(t, a), 1.0 / static_cast<double>(n));
}

inline Var dot(Tape& t, Var a, Var b) { return sum(t, mul(t, a, b)); }

inline Var mse_loss(Tape& t, Var a, Var b) { return mean(t, square(t, sub(t, a, b))); }
inline Var l1_loss(Tape& t, Var a, Var b) { return mean(t, abs_(t, sub(t, a, b))); }

/// Stacks scalar nodes into a 1-D vector.
inline Var pack(Tape& t, const std::vector<Var>& scalars) {
    require(!scalars.empty(), ErrorCode::EmptyList, "pack of no scalars");
    Tensor out({static_cast<int>(scalars.size())});
    bool rg = false;
    for (std::size_t i = 0; i < scalars.size(); ++i) {
        const Tensor& v = t.val(scalars[i]);
        require(v.numel() == 1, ErrorCode::ShapeMismatch, "pack expects scalars");
        out[static_cast<long>(i)] = v[0];
        rg = rg || t.requires_grad(scalars[i]);
    }
    auto parts = scalars;
    return t.push(std::move(out), rg, [parts](Tape& tp, const Tensor& g) {
        for (std::size_t i = 0; i < parts.size(); ++i)
            if (tp.requires_grad(parts[i])) tp.accumulate(parts[i], Tensor({1}, {g[static_cast<long>(i)]}));
    });
}

/// L2-normalizes a 1-D vector; raises DegenerateEmbedding near zero norm.
inline Var l2_normalize(Tape& t, Var a, double min_norm = 1e-8) {
    double n = std::sqrt(squared_norm(t.val(a)));
    require(n > min_norm, ErrorCode::DegenerateEmbedding, "zero-norm vector");
    Var nrm = sqrt_(t, sum(t, square(t, a)));
    return div(t, a, nrm);
}

/// cos(a, b) of 1-D vectors via full normalized inner product.
inline Var cosine(Tape& t, Var a, Var b) {
    return dot(t, l2_normalize(t, a), l2_normalize(t, b));
}

// ---------------------------------------------------------------------------
// shape ops

inline Var reshape(Tape& t, Var a, std::vector<int> shape) {
    Tensor out = t.val(a).reshaped(shape);
    return t.push(std::move(out), t.requires_grad(a), [=](Tape& tp, const Tensor& g) {
        if (!tp.requires_grad(a)) return;
        tp.accumulate(a, g.reshaped(tp.val(a).shape));
    });
}

/// Channel concatenation of HWC tensors.
inline Var concat_ch(Tape& t, const std::vector<Var>& parts) {
    require(!parts.empty(), ErrorCode::EmptyList, "concat of nothing");
    int h = t.val(parts[0]).height(), w = t.val(parts[0]).width();
    int ctot = 0;
    bool rg = false;
    for (Var p : parts) {
        const Tensor& v = t.val(p);
        require(v.rank() == 3 && v.height() == h && v.width() == w, ErrorCode::ShapeMismatch, "concat_ch");
        ctot += v.channels();
        rg = rg || t.requires_grad(p);
    }
    Tensor out({h, w, ctot});
    int off = 0;
    for (Var p : parts) {
        const Tensor& v = t.val(p);
        int c = v.channels();
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x)
                for (int k = 0; k < c; ++k) out.at(y, x, off + k) = v.at(y, x, k);
        off += c;
    }
    auto ps = parts;
    return t.push(std::move(out), rg, [ps, h, w](Tape& tp, const Tensor& g) {
        int off2 = 0;
        for (Var p : ps) {
            const Tensor& v = tp.val(p);
            int c = v.channels();
            if (tp.requires_grad(p)) {
                Tensor gp({h, w, c});
                for (int y = 0; y < h; ++y)
                    for (int x = 0; x < w; ++x)
                        for (int k = 0; k < c; ++k) gp.at(y, x, k) = g.at(y, x, off2 + k);
                tp.accumulate(p, gp);
            }
            off2 += c;
        }
    });
}

/// Channels [c0, c1) of an HWC tensor.
inline Var slice_ch(Tape& t, Var a, int c0, int c1) {
    const Tensor& v = t.val(a);
    require(v.rank() == 3 && c0 >= 0 && c1 <= v.channels() && c0 < c1, ErrorCode::ShapeMismatch, "slice_ch");
    int h = v.height(), w = v.width(), c = c1 - c0;
    Tensor out({h, w, c});
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int k = 0; k < c; ++k) out.at(y, x, k) = v.at(y, x, c0 + k);
    return t.push(std::move(out), t.requires_grad(a), [=](Tape& tp, const Tensor& g) {
        if (!tp.requires_grad(a)) return;
        Tensor ga(tp.val(a).shape);
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x)
                for (int k = 0; k < c; ++k) ga.at(y, x, c0 + k) = g.at(y, x, k);
        tp.accumulate(a, ga);
    });
}

/// Spatial crop [y0, y0+h) x [x0, x0+w) of an HWC tensor.
inline Var crop(Tape& t, Var a, int y0, int x0, int h, int w) {
    const Tensor& v = t.val(a);
    require(v.rank() == 3 && y0 >= 0 && x0 >= 0 && y0 + h <= v.height() && x0 + w <= v.width(),
            ErrorCode::ShapeMismatch, "crop out of bounds");
    int c = v.channels();
    Tensor out({h, w, c});
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int k = 0; k < c; ++k) out.at(y, x, k) = v.at(y0 + y, x0 + x, k);
    return t.push(std::move(out), t.requires_grad(a), [=](Tape& tp, const Tensor& g) {
        if (!tp.requires_grad(a)) return;
        Tensor ga(tp.val(a).shape);
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x)
                for (int k = 0; k < c; ++k) ga.at(y0 + y, x0 + x, k) = g.at(y, x, k);
        tp.accumulate(a, ga);
    });
}

// ---------------------------------------------------------------------------
// linear algebra

inline Var matmul(Tape& t, Var a, Var b) {
    const Tensor& av = t.val(a);
    const Tensor& bv = t.val(b);
    require(av.rank() == 2 && bv.rank() == 2 && av.dim(1) == bv.dim(0), ErrorCode::ShapeMismatch, "matmul");
    int m = av.dim(0), k = av.dim(1), n = bv.dim(1);
    Tensor out({m, n});
    CMapM A(av.data.data(), m, k), B(bv.data.data(), k, n);
    MapM C(out.data.data(), m, n);
    C.noalias() = A * B;
    return t.push(std::move(out), detail::any_grad(t, {a, b}), [=](Tape& tp, const Tensor& g) {
        CMapM G(g.data.data(), m, n);
        if (tp.requires_grad(a)) {
            Tensor ga({m, k});
            CMapM B2(tp.val(b).data.data(), k, n);
            MapM GA(ga.data.data(), m, k);
            GA.noalias() = G * B2.transpose();
            tp.accumulate(a, ga);
        }
        if (tp.requires_grad(b)) {
            Tensor gb({k, n});
            CMapM A2(tp.val(a).data.data(), m, k);
            MapM GB(gb.data.data(), k, n);
            GB.noalias() = A2.transpose() * G;
            tp.accumulate(b, gb);
        }
    });
}

inline Var transpose2d(Tape& t, Var a) {
    const Tensor& av = t.val(a);
    require(av.rank() == 2, ErrorCode::ShapeMismatch, "transpose2d");
    int m = av.dim(0), n = av.dim(1);
    Tensor out({n, m});
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) out[static_cast<long>(j) * m + i] = av[static_cast<long>(i) * n + j];
    return t.push(std::move(out), t.requires_grad(a), [=](Tape& tp, const Tensor& g) {
        if (!tp.requires_grad(a)) return;
        Tensor ga({m, n});
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) ga[static_cast<long>(i) * n + j] = g[static_cast<long>(j) * m + i];
        tp.accumulate(a, ga);
    });
}

inline Var softmax_rows(Tape& t, Var a) {
    const Tensor& av = t.val(a);
    require(av.rank() == 2, ErrorCode::ShapeMismatch, "softmax_rows");
    int m = av.dim(0), n = av.dim(1);
    Tensor out({m, n});
    for (int i = 0; i < m; ++i) {
        const double* row = &av.data[static_cast<std::size_t>(i) * n];
        double mx = row[0];
        for (int j = 1; j < n; ++j) mx = std::max(mx, row[j]);
        double denom = 0.0;
        for (int j = 0; j < n; ++j) denom += std::exp(row[j] - mx);
        for (int j = 0; j < n; ++j) out[static_cast<long>(i) * n + j] = std::exp(row[j] - mx) / denom;
    }
    Tensor cached = out;
    return t.push(std::move(out), t.requires_grad(a), [=](Tape& tp, const Tensor& g) {
        if (!tp.requires_grad(a)) return;
        Tensor ga({m, n});
        for (int i = 0; i < m; ++i) {
            double s = 0.0;
            for (int j = 0; j < n; ++j) s += g[static_cast<long>(i) * n + j] * cached[static_cast<long>(i) * n + j];
            for (int j = 0; j < n; ++j) {
                long idx = static_cast<long>(i) * n + j;
                ga[idx] = cached[idx] * (g[idx] - s);
            }
        }
        tp.accumulate(a, ga);
    });
}

/// x [n,k] @ W [k,m] + b [m]
inline Var linear(Tape& t, Var x, Var W, Var b) {
    Var y = matmul(t, x, W);
    const Tensor& bv = t.val(b);
    const Tensor& yv = t.val(y);
    require(bv.rank() == 1 && bv.dim(0) == yv.dim(1), ErrorCode::ShapeMismatch, "linear bias");
    int m = yv.dim(0), n = yv.dim(1);
    Tensor out = yv;
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) out[static_cast<long>(i) * n + j] += bv[j];
    return t.push(std::move(out), detail::any_grad(t, {y, b}), [=](Tape& tp, const Tensor& g) {
        if (tp.requires_grad(y)) tp.accumulate(y, g);
        if (tp.requires_grad(b)) {
            Tensor gb({n});
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j) gb[j] += g[static_cast<long>(i) * n + j];
            tp.accumulate(b, gb);
        }
    });
}

}  // namespace cfwd::ad

#endif  // CFWD_AUTODIFF_HPP
