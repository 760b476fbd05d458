#ifndef CFWD_NN_HPP
#define CFWD_NN_HPP

#include <map>
#include <string>
#include <vector>

#include "cfwd/autodiff.hpp"

namespace cfwd::ad {

namespace detail {

inline int conv_out_dim(int in, int k, int stride, int pad, int dilation) {
    int eff = dilation * (k - 1) + 1;
    int out = (in + 2 * pad - eff) / stride + 1;
    require(out >= 1, ErrorCode::ShapeMismatch, "convolution output would be empty");
    return out;
}

/// Unrolls conv patches of an HWC tensor into rows of [ho*wo, kh*kw*c].
inline Tensor im2col(const Tensor& x, int kh, int kw, int stride, int pad, int dilation, int ho, int wo) {
    int h = x.height(), w = x.width(), c = x.channels();
    Tensor cols({ho * wo, kh * kw * c});
    long r = 0;
    for (int oy = 0; oy < ho; ++oy) {
        for (int ox = 0; ox < wo; ++ox, ++r) {
            double* row = &cols.data[static_cast<std::size_t>(r) * kh * kw * c];
            long idx = 0;
            for (int ky = 0; ky < kh; ++ky) {
                int iy = oy * stride + ky * dilation - pad;
                for (int kx = 0; kx < kw; ++kx) {
                    int ix = ox * stride + kx * dilation - pad;
                    if (iy >= 0 && iy < h && ix >= 0 && ix < w) {
                        const double* src = &x.data[(static_cast<long>(iy) * w + ix) * c];
                        for (int k = 0; k < c; ++k) row[idx++] = src[k];
                    } else {
                        for (int k = 0; k < c; ++k) row[idx++] = 0.0;
                    }
                }
            }
        }
    }
    return cols;
}

inline void col2im_add(Tensor& gx, const Tensor& gcols, int kh, int kw, int stride, int pad, int dilation,
                       int ho, int wo) {
    int h = gx.height(), w = gx.width(), c = gx.channels();
    long r = 0;
    for (int oy = 0; oy < ho; ++oy) {
        for (int ox = 0; ox < wo; ++ox, ++r) {
            const double* row = &gcols.data[static_cast<std::size_t>(r) * kh * kw * c];
            long idx = 0;
            for (int ky = 0; ky < kh; ++ky) {
                int iy = oy * stride + ky * dilation - pad;
                for (int kx = 0; kx < kw; ++kx) {
                    int ix = ox * stride + kx * dilation - pad;
                    if (iy >= 0 && iy < h && ix >= 0 && ix < w) {
                        double* dst = &gx.data[(static_cast<long>(iy) * w + ix) * c];
                        for (int k = 0; k < c; ++k) dst[k] += row[idx++];
                    } else {
                        idx += c;
                    }
                }
            }
        }
    }
}

}  // namespace detail

/// 2D convolution over an HWC tensor. Weights are [kh, kw, cin, cout] so the
/// flat layout doubles as the im2col GEMM operand; bias is [cout].
inline Var conv2d(Tape& t, Var x, Var w, Var b, int stride = 1, int pad = 0, int dilation = 1) {
    const Tensor& xv = t.val(x);
    const Tensor& wv = t.val(w);
    const Tensor& bv = t.val(b);
    require(xv.rank() == 3 && wv.rank() == 4, ErrorCode::ShapeMismatch, "conv2d operands");
    int kh = wv.dim(0), kw = wv.dim(1), cin = wv.dim(2), cout = wv.dim(3);
    require(xv.channels() == cin, ErrorCode::ShapeMismatch, "conv2d channel mismatch");
    require(bv.rank() == 1 && bv.dim(0) == cout, ErrorCode::ShapeMismatch, "conv2d bias");
    int ho = detail::conv_out_dim(xv.height(), kh, stride, pad, dilation);
    int wo = detail::conv_out_dim(xv.width(), kw, stride, pad, dilation);

    Tensor cols = detail::im2col(xv, kh, kw, stride, pad, dilation, ho, wo);
    Tensor out({ho, wo, cout});
    {
        CMapM C(cols.data.data(), ho * wo, kh * kw * cin);
        CMapM W(wv.data.data(), kh * kw * cin, cout);
        MapM O(out.data.data(), ho * wo, cout);
        O.noalias() = C * W;
        for (long r = 0; r < static_cast<long>(ho) * wo; ++r)
            for (int k = 0; k < cout; ++k) out[r * cout + k] += bv[k];
    }
    return t.push(std::move(out), detail::any_grad(t, {x, w, b}),
                  [=](Tape& tp, const Tensor& g) {
                      const Tensor& xval = tp.val(x);
                      const Tensor& wval = tp.val(w);
                      CMapM G(g.data.data(), ho * wo, cout);
                      if (tp.requires_grad(w)) {
                          Tensor cols2 = detail::im2col(xval, kh, kw, stride, pad, dilation, ho, wo);
                          Tensor gw(wval.shape);
                          CMapM C(cols2.data.data(), ho * wo, kh * kw * cin);
                          MapM GW(gw.data.data(), kh * kw * cin, cout);
                          GW.noalias() = C.transpose() * G;
                          tp.accumulate(w, gw);
                      }
                      if (tp.requires_grad(b)) {
                          Tensor gb({cout});
                          for (long r = 0; r < static_cast<long>(ho) * wo; ++r)
                              for (int k = 0; k < cout; ++k) gb[k] += g[r * cout + k];
                          tp.accumulate(b, gb);
                      }
                      if (tp.requires_grad(x)) {
                          Tensor gcols({ho * wo, kh * kw * cin});
                          CMapM W(wval.data.data(), kh * kw * cin, cout);
                          MapM GC(gcols.data.data(), ho * wo, kh * kw * cin);
                          GC.noalias() = G * W.transpose();
                          Tensor gx(xval.shape);
                          detail::col2im_add(gx, gcols, kh, kw, stride, pad, dilation, ho, wo);
                          tp.accumulate(x, gx);
                      }
                  });
}

/// Depthwise 2D convolution; weights [kh, kw, c], bias [c].
inline Var depthwise_conv2d(Tape& t, Var x, Var w, Var b, int stride = 1, int pad = 0, int dilation = 1) {
    const Tensor& xv = t.val(x);
    const Tensor& wv = t.val(w);
    const Tensor& bv = t.val(b);
    require(xv.rank() == 3 && wv.rank() == 3 && wv.dim(2) == xv.channels(), ErrorCode::ShapeMismatch,
            "depthwise_conv2d operands");
    require(bv.rank() == 1 && bv.dim(0) == xv.channels(), ErrorCode::ShapeMismatch, "depthwise bias");
    int kh = wv.dim(0), kw = wv.dim(1), c = xv.channels();
    int h = xv.height(), wdt = xv.width();
    int ho = detail::conv_out_dim(h, kh, stride, pad, dilation);
    int wo = detail::conv_out_dim(wdt, kw, stride, pad, dilation);
    Tensor out({ho, wo, c});
    for (int oy = 0; oy < ho; ++oy)
        for (int ox = 0; ox < wo; ++ox)
            for (int k = 0; k < c; ++k) {
                double acc = bv[k];
                for (int ky = 0; ky < kh; ++ky) {
                    int iy = oy * stride + ky * dilation - pad;
                    if (iy < 0 || iy >= h) continue;
                    for (int kx = 0; kx < kw; ++kx) {
                        int ix = ox * stride + kx * dilation - pad;
                        if (ix < 0 || ix >= wdt) continue;
                        acc += xv.at(iy, ix, k) * wv.at(ky, kx, k);
                    }
                }
                out.at(oy, ox, k) = acc;
            }
    return t.push(std::move(out), detail::any_grad(t, {x, w, b}),
                  [=](Tape& tp, const Tensor& g) {
                      const Tensor& xval = tp.val(x);
                      const Tensor& wval = tp.val(w);
                      Tensor gx(xval.shape), gw(wval.shape), gb({c});
                      for (int oy = 0; oy < ho; ++oy)
                          for (int ox = 0; ox < wo; ++ox)
                              for (int k = 0; k < c; ++k) {
                                  double go = g.at(oy, ox, k);
                                  gb[k] += go;
                                  for (int ky = 0; ky < kh; ++ky) {
                                      int iy = oy * stride + ky * dilation - pad;
                                      if (iy < 0 || iy >= h) continue;
                                      for (int kx = 0; kx < kw; ++kx) {
                                          int ix = ox * stride + kx * dilation - pad;
                                          if (ix < 0 || ix >= wdt) continue;
                                          gw.at(ky, kx, k) += go * xval.at(iy, ix, k);
                                          gx.at(iy, ix, k) += go * wval.at(ky, kx, k);
                                      }
                                  }
                              }
                      if (tp.requires_grad(x)) tp.accumulate(x, gx);
                      if (tp.requires_grad(w)) tp.accumulate(w, gw);
                      if (tp.requires_grad(b)) tp.accumulate(b, gb);
                  });
}

inline Var upsample_nearest2x(Tape& t, Var x) {
    const Tensor& xv = t.val(x);
    require(xv.rank() == 3, ErrorCode::ShapeMismatch, "upsample_nearest2x");
    int h = xv.height(), w = xv.width(), c = xv.channels();
    Tensor out({2 * h, 2 * w, c});
    for (int y = 0; y < 2 * h; ++y)
        for (int xx = 0; xx < 2 * w; ++xx)
            for (int k = 0; k < c; ++k) out.at(y, xx, k) = xv.at(y / 2, xx / 2, k);
    return t.push(std::move(out), t.requires_grad(x), [=](Tape& tp, const Tensor& g) {
        if (!tp.requires_grad(x)) return;
        Tensor gx({h, w, c});
        for (int y = 0; y < 2 * h; ++y)
            for (int xx = 0; xx < 2 * w; ++xx)
                for (int k = 0; k < c; ++k) gx.at(y / 2, xx / 2, k) += g.at(y, xx, k);
        tp.accumulate(x, gx);
    });
}

/// Non-overlapping 2x2 average pooling; odd trailing row/column dropped.
inline Var avgpool2x2(Tape& t, Var x) {
    const Tensor& xv = t.val(x);
    require(xv.rank() == 3 && xv.height() >= 2 && xv.width() >= 2, ErrorCode::ShapeMismatch, "avgpool2x2");
    int ho = xv.height() / 2, wo = xv.width() / 2, c = xv.channels();
    Tensor out({ho, wo, c});
    for (int y = 0; y < ho; ++y)
        for (int xx = 0; xx < wo; ++xx)
            for (int k = 0; k < c; ++k)
                out.at(y, xx, k) = 0.25 * (xv.at(2 * y, 2 * xx, k) + xv.at(2 * y, 2 * xx + 1, k) +
                                           xv.at(2 * y + 1, 2 * xx, k) + xv.at(2 * y + 1, 2 * xx + 1, k));
    return t.push(std::move(out), t.requires_grad(x), [=](Tape& tp, const Tensor& g) {
        if (!tp.requires_grad(x)) return;
        Tensor gx(tp.val(x).shape);
        for (int y = 0; y < ho; ++y)
            for (int xx = 0; xx < wo; ++xx)
                for (int k = 0; k < c; ++k) {
                    double v = 0.25 * g.at(y, xx, k);
                    gx.at(2 * y, 2 * xx, k) += v;
                    gx.at(2 * y, 2 * xx + 1, k) += v;
                    gx.at(2 * y + 1, 2 * xx, k) += v;
                    gx.at(2 * y + 1, 2 * xx + 1, k) += v;
                }
        tp.accumulate(x, gx);
    });
}

/// Adaptive average pooling to a g x g grid (each cell averages its
/// rectangle, PyTorch-style bin edges).
inline Var adaptive_avgpool_grid(Tape& t, Var x, int grid) {
    const Tensor& xv = t.val(x);
    require(xv.rank() == 3 && grid >= 1, ErrorCode::ShapeMismatch, "adaptive_avgpool_grid");
    int h = xv.height(), w = xv.width(), c = xv.channels();
    auto lo = [](int i, int n, int g) { return (i * n) / g; };
    auto hi = [](int i, int n, int g) { return ((i + 1) * n + g - 1) / g; };
    Tensor out({grid, grid, c});
    for (int gy = 0; gy < grid; ++gy)
        for (int gx = 0; gx < grid; ++gx) {
            int y0 = lo(gy, h, grid), y1 = hi(gy, h, grid);
            int x0 = lo(gx, w, grid), x1 = hi(gx, w, grid);
            double inv = 1.0 / (static_cast<double>(y1 - y0) * (x1 - x0));
            for (int k = 0; k < c; ++k) {
                double acc = 0.0;
                for (int y = y0; y < y1; ++y)
                    for (int xx = x0; xx < x1; ++xx) acc += xv.at(y, xx, k);
                out.at(gy, gx, k) = acc * inv;
            }
        }
    return t.push(std::move(out), t.requires_grad(x), [=](Tape& tp, const Tensor& g) {
        if (!tp.requires_grad(x)) return;
        Tensor gxs({h, w, c});
        for (int gy = 0; gy < grid; ++gy)
            for (int gxx = 0; gxx < grid; ++gxx) {
                int y0 = lo(gy, h, grid), y1 = hi(gy, h, grid);
                int x0 = lo(gxx, w, grid), x1 = hi(gxx, w, grid);
                double inv = 1.0 / (static_cast<double>(y1 - y0) * (x1 - x0));
                for (int k = 0; k < c; ++k) {
                    double v = g.at(gy, gxx, k) * inv;
                    for (int y = y0; y < y1; ++y)
                        for (int xx = x0; xx < x1; ++xx) gxs.at(y, xx, k) += v;
                }
            }
        tp.accumulate(x, gxs);
    });
}

/// Adds a per-channel bias vector across all spatial positions.
inline Var add_bias_ch(Tape& t, Var x, Var b) {
    const Tensor& xv = t.val(x);
    const Tensor& bv = t.val(b);
    require(xv.rank() == 3 && bv.rank() == 1 && bv.dim(0) == xv.channels(), ErrorCode::ShapeMismatch,
            "add_bias_ch");
    int h = xv.height(), w = xv.width(), c = xv.channels();
    Tensor out = xv;
    for (int y = 0; y < h; ++y)
        for (int xx = 0; xx < w; ++xx)
            for (int k = 0; k < c; ++k) out.at(y, xx, k) += bv[k];
    return t.push(std::move(out), detail::any_grad(t, {x, b}), [=](Tape& tp, const Tensor& g) {
        if (tp.requires_grad(x)) tp.accumulate(x, g);
        if (tp.requires_grad(b)) {
            Tensor gb({c});
            for (int y = 0; y < h; ++y)
                for (int xx = 0; xx < w; ++xx)
                    for (int k = 0; k < c; ++k) gb[k] += g.at(y, xx, k);
            tp.accumulate(b, gb);
        }
    });
}

/// Group normalization over an HWC tensor with affine parameters
/// gamma, beta of shape [c].
inline Var group_norm(Tape& t, Var x, Var gamma, Var beta, int groups, double eps = 1e-5) {
    const Tensor& xv = t.val(x);
    require(xv.rank() == 3, ErrorCode::ShapeMismatch, "group_norm input");
    int h = xv.height(), w = xv.width(), c = xv.channels();
    require(groups >= 1 && c % groups == 0, ErrorCode::InvalidArchitecture, "group count must divide channels");
    const Tensor& gv = t.val(gamma);
    const Tensor& bv = t.val(beta);
    require(gv.rank() == 1 && gv.dim(0) == c && bv.rank() == 1 && bv.dim(0) == c, ErrorCode::ShapeMismatch,
            "group_norm affine");
    int cg = c / groups;
    long m = static_cast<long>(h) * w * cg;

    std::vector<double> mu(groups, 0.0), var(groups, 0.0);
    for (int y = 0; y < h; ++y)
        for (int xx = 0; xx < w; ++xx)
            for (int k = 0; k < c; ++k) mu[static_cast<std::size_t>(k / cg)] += xv.at(y, xx, k);
    for (int g2 = 0; g2 < groups; ++g2) mu[static_cast<std::size_t>(g2)] /= static_cast<double>(m);
    for (int y = 0; y < h; ++y)
        for (int xx = 0; xx < w; ++xx)
            for (int k = 0; k < c; ++k) {
                double d = xv.at(y, xx, k) - mu[static_cast<std::size_t>(k / cg)];
                var[static_cast<std::size_t>(k / cg)] += d * d;
            }
    for (int g2 = 0; g2 < groups; ++g2) var[static_cast<std::size_t>(g2)] /= static_cast<double>(m);

    Tensor out({h, w, c});
    for (int y = 0; y < h; ++y)
        for (int xx = 0; xx < w; ++xx)
            for (int k = 0; k < c; ++k) {
                int g2 = k / cg;
                double xhat = (xv.at(y, xx, k) - mu[static_cast<std::size_t>(g2)]) /
                              std::sqrt(var[static_cast<std::size_t>(g2)] + eps);
                out.at(y, xx, k) = gv[k] * xhat + bv[k];
            }
    return t.push(std::move(out), detail::any_grad(t, {x, gamma, beta}),
                  [=](Tape& tp, const Tensor& g) {
                      const Tensor& xval = tp.val(x);
                      const Tensor& gam = tp.val(gamma);
                      Tensor gx(xval.shape), ggam({c}), gbeta({c});
                      for (int g2 = 0; g2 < groups; ++g2) {
                          double istd = 1.0 / std::sqrt(var[static_cast<std::size_t>(g2)] + eps);
                          double mu_g = mu[static_cast<std::size_t>(g2)];
                          // accumulate the two reductions the input gradient needs
                          double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
                          for (int y = 0; y < h; ++y)
                              for (int xx = 0; xx < w; ++xx)
                                  for (int k = g2 * cg; k < (g2 + 1) * cg; ++k) {
                                      double xhat = (xval.at(y, xx, k) - mu_g) * istd;
                                      double dxhat = g.at(y, xx, k) * gam[k];
                                      sum_dxhat += dxhat;
                                      sum_dxhat_xhat += dxhat * xhat;
                                      ggam[k] += g.at(y, xx, k) * xhat;
                                      gbeta[k] += g.at(y, xx, k);
                                  }
                          double inv_m = 1.0 / static_cast<double>(m);
                          for (int y = 0; y < h; ++y)
                              for (int xx = 0; xx < w; ++xx)
                                  for (int k = g2 * cg; k < (g2 + 1) * cg; ++k) {
                                      double xhat = (xval.at(y, xx, k) - mu_g) * istd;
                                      double dxhat = g.at(y, xx, k) * gam[k];
                                      gx.at(y, xx, k) =
                                          istd * (dxhat - inv_m * sum_dxhat - xhat * inv_m * sum_dxhat_xhat);
                                  }
                      }
                      if (tp.requires_grad(x)) tp.accumulate(x, gx);
                      if (tp.requires_grad(gamma)) tp.accumulate(gamma, ggam);
                      if (tp.requires_grad(beta)) tp.accumulate(beta, gbeta);
                  });
}

/// Single-head scaled dot-product attention over spatial positions.
/// q, k, v are HWC feature maps; q supplies the queries, k/v the context.
inline Var spatial_attention(Tape& t, Var q, Var k, Var v) {
    const Tensor& qv = t.val(q);
    const Tensor& kv = t.val(k);
    require(qv.rank() == 3 && kv.rank() == 3 && t.val(v).rank() == 3, ErrorCode::ShapeMismatch, "attention");
    require(qv.channels() == kv.channels(), ErrorCode::ShapeMismatch, "attention dims");
    int sq = qv.height() * qv.width();
    int sk = kv.height() * kv.width();
    int d = qv.channels();
    Var q2 = reshape(t, q, {sq, d});
    Var k2 = reshape(t, k, {sk, d});
    Var v2 = reshape(t, v, {sk, t.val(v).channels()});
    Var scores = scale(t, matmul(t, q2, transpose2d(t, k2)), 1.0 / std::sqrt(static_cast<double>(d)));
    Var attn = softmax_rows(t, scores);
    Var out = matmul(t, attn, v2);
    return reshape(t, out, {qv.height(), qv.width(), t.val(v).channels()});
}

// ---------------------------------------------------------------------------
// parameter storage and optimization

/// Named, ordered collection of trainable tensors. Order is the
/// serialization order; the fingerprint pins the architecture.
struct ParamStore {
    std::vector<std::pair<std::string, Tensor>> entries;
    std::string fingerprint;

    Tensor& add(const std::string& name, Tensor init) {
        entries.emplace_back(name, std::move(init));
        return entries.back().second;
    }

    Tensor& get(const std::string& name) {
        for (auto& [n, t] : entries)
            if (n == name) return t;
        fail(ErrorCode::InvalidArgument, "unknown parameter " + name);
    }

    const Tensor& get(const std::string& name) const {
        for (const auto& [n, t] : entries)
            if (n == name) return t;
        fail(ErrorCode::InvalidArgument, "unknown parameter " + name);
    }

    long parameter_count() const {
        long n = 0;
        for (const auto& [name, t] : entries) n += t.numel();
        return n;
    }

    bool all_finite_params() const {
        for (const auto& [name, t] : entries)
            if (!all_finite(t)) return false;
        return true;
    }
};

/// Tape bindings for every entry of a ParamStore, in entry order.
struct BoundParams {
    const ParamStore* store = nullptr;
    std::vector<Var> vars;

    Var operator[](const std::string& name) const {
        for (std::size_t i = 0; i < store->entries.size(); ++i)
            if (store->entries[i].first == name) return vars[i];
        fail(ErrorCode::InvalidArgument, "unbound parameter " + name);
    }
};

inline BoundParams bind(Tape& t, const ParamStore& store, bool requires_grad = true) {
    BoundParams bp;
    bp.store = &store;
    bp.vars.reserve(store.entries.size());
    for (const auto& [name, tensor] : store.entries) bp.vars.push_back(t.leaf(tensor, requires_grad));
    return bp;
}

/// Adam with bias correction; state is keyed by parameter name.
class Adam {
public:
    Adam(double lr = 1e-4, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

    void step(ParamStore& store, const std::vector<Tensor>& grads) {
        require(grads.size() == store.entries.size(), ErrorCode::ShapeMismatch, "gradient list size");
        ++t_;
        double bc1 = 1.0 - std::pow(beta1_, t_);
        double bc2 = 1.0 - std::pow(beta2_, t_);
        for (std::size_t i = 0; i < store.entries.size(); ++i) {
            auto& [name, p] = store.entries[i];
            const Tensor& g = grads[i];
            check_same_shape(p, g, "adam step");
            auto& [m, v] = state_[name];
            if (m.empty()) {
                m = zeros(p.shape);
                v = zeros(p.shape);
            }
            for (long j = 0; j < p.numel(); ++j) {
                m[j] = beta1_ * m[j] + (1.0 - beta1_) * g[j];
                v[j] = beta2_ * v[j] + (1.0 - beta2_) * g[j] * g[j];
                double mhat = m[j] / bc1;
                double vhat = v[j] / bc2;
                p[j] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
            }
        }
    }

    double learning_rate() const { return lr_; }

private:
    double lr_, beta1_, beta2_, eps_;
    long t_ = 0;
    std::map<std::string, std::pair<Tensor, Tensor>> state_;
};

/// Largest group count <= 8 that divides the channel count.
inline int pick_groups(int channels) {
    for (int g = std::min(8, channels); g >= 1; --g)
        if (channels % g == 0) return g;
    return 1;
}

/// Fan-in-scaled uniform init, U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
inline Tensor init_uniform(std::vector<int> shape, long fan_in, Rng& rng) {
    double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    return rand_uniform(std::move(shape), rng, -bound, bound);
}

}  // namespace cfwd::ad

#endif  // CFWD_NN_HPP
