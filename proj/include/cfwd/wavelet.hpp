#ifndef CFWD_WAVELET_HPP
#define CFWD_WAVELET_HPP

#include <vector>

#include "cfwd/autodiff.hpp"
#include "cfwd/tensor.hpp"

namespace cfwd {

/// Vertical / horizontal / diagonal detail bands of one pyramid level.
struct SubbandTriple {
    Tensor V;
    Tensor H;
    Tensor D;
};

/// K-level orthonormal Haar pyramid. details[k-1] holds level k, with
/// level 1 the finest; approx is the level-K low-frequency band.
struct WaveletPyramid {
    int levels = 0;
    Tensor approx;
    std::vector<SubbandTriple> details;
};

struct Bands {
    Tensor A, V, H, D;
};

/// Single-level orthonormal 2D Haar analysis. Per 2x2 block (a b / c d):
/// A=(a+b+c+d)/2, H=(a+b-c-d)/2, V=(a-b+c-d)/2, D=(a-b-c+d)/2.
inline Bands dwt2(const Tensor& x) {
    require(x.rank() == 3, ErrorCode::ShapeMismatch, "dwt2 expects HWC");
    require(x.height() % 2 == 0 && x.width() % 2 == 0, ErrorCode::OddDimensions,
            "dwt2 needs even height and width");
    int h = x.height() / 2, w = x.width() / 2, c = x.channels();
    Bands b{Tensor({h, w, c}), Tensor({h, w, c}), Tensor({h, w, c}), Tensor({h, w, c})};
    for (int y = 0; y < h; ++y)
        for (int xx = 0; xx < w; ++xx)
            for (int k = 0; k < c; ++k) {
                double a = x.at(2 * y, 2 * xx, k);
                double bb = x.at(2 * y, 2 * xx + 1, k);
                double cc = x.at(2 * y + 1, 2 * xx, k);
                double dd = x.at(2 * y + 1, 2 * xx + 1, k);
                b.A.at(y, xx, k) = 0.5 * (a + bb + cc + dd);
                b.H.at(y, xx, k) = 0.5 * (a + bb - cc - dd);
                b.V.at(y, xx, k) = 0.5 * (a - bb + cc - dd);
                b.D.at(y, xx, k) = 0.5 * (a - bb - cc + dd);
            }
    return b;
}

/// Exact inverse of dwt2: a=(A+H+V+D)/2, b=(A+H-V-D)/2, c=(A-H+V-D)/2,
/// d=(A-H-V+D)/2.
inline Tensor idwt2(const Tensor& A, const Tensor& V, const Tensor& H, const Tensor& D) {
    check_same_shape(A, V, "idwt2 bands");
    check_same_shape(A, H, "idwt2 bands");
    check_same_shape(A, D, "idwt2 bands");
    require(A.rank() == 3, ErrorCode::ShapeMismatch, "idwt2 expects HWC bands");
    int h = A.height(), w = A.width(), c = A.channels();
    Tensor x({2 * h, 2 * w, c});
    for (int y = 0; y < h; ++y)
        for (int xx = 0; xx < w; ++xx)
            for (int k = 0; k < c; ++k) {
                double a = A.at(y, xx, k), v = V.at(y, xx, k), hh = H.at(y, xx, k), d = D.at(y, xx, k);
                x.at(2 * y, 2 * xx, k) = 0.5 * (a + hh + v + d);
                x.at(2 * y, 2 * xx + 1, k) = 0.5 * (a + hh - v - d);
                x.at(2 * y + 1, 2 * xx, k) = 0.5 * (a - hh + v - d);
                x.at(2 * y + 1, 2 * xx + 1, k) = 0.5 * (a - hh - v + d);
            }
    return x;
}

/// Applies dwt2 recursively to the approximation band K times.
inline WaveletPyramid decompose(const Tensor& x, int levels) {
    require(levels >= 1, ErrorCode::InvalidArgument, "decompose needs at least one level");
    int div = 1 << levels;
    require(x.rank() == 3 && x.height() % div == 0 && x.width() % div == 0, ErrorCode::IndivisibleDimensions,
            "image dims must be divisible by 2^levels");
    WaveletPyramid p;
    p.levels = levels;
    Tensor cur = x;
    for (int k = 1; k <= levels; ++k) {
        Bands b = dwt2(cur);
        p.details.push_back(SubbandTriple{std::move(b.V), std::move(b.H), std::move(b.D)});
        cur = std::move(b.A);
    }
    p.approx = std::move(cur);
    return p;
}

/// Synthesizes the pyramid coarsest-to-finest back into an image.
inline Tensor reconstruct(const WaveletPyramid& p) {
    require(p.levels >= 1 && static_cast<int>(p.details.size()) == p.levels, ErrorCode::ShapeMismatch,
            "pyramid level count mismatch");
    Tensor cur = p.approx;
    for (int k = p.levels; k >= 1; --k) {
        const SubbandTriple& d = p.details[static_cast<std::size_t>(k - 1)];
        cur = idwt2(cur, d.V, d.H, d.D);
    }
    return cur;
}

// ---------------------------------------------------------------------------
// tape versions (the transform is orthonormal, so each direction's backward
// pass is the other direction applied to the gradient)

namespace ad {

struct BandVars {
    Var A, V, H, D;
};

inline BandVars dwt2(Tape& t, Var x) {
    const Tensor& xv = t.val(x);
    Bands b = cfwd::dwt2(xv);
    bool rg = t.requires_grad(x);
    int h = b.A.height(), w = b.A.width(), c = b.A.channels();
    // one backward per band: scatter the band gradient through the synthesis
    auto band_node = [&](Tensor val, int which) {
        return t.push(std::move(val), rg, [x, which, h, w, c](Tape& tp, const Tensor& g) {
            if (!tp.requires_grad(x)) return;
            Tensor z({h, w, c});
            const Tensor& A = which == 0 ? g : z;
            const Tensor& V = which == 1 ? g : z;
            const Tensor& H = which == 2 ? g : z;
            const Tensor& D = which == 3 ? g : z;
            tp.accumulate(x, cfwd::idwt2(A, V, H, D));
        });
    };
    BandVars out;
    out.A = band_node(std::move(b.A), 0);
    out.V = band_node(std::move(b.V), 1);
    out.H = band_node(std::move(b.H), 2);
    out.D = band_node(std::move(b.D), 3);
    return out;
}

inline Var idwt2(Tape& t, Var A, Var V, Var H, Var D) {
    Tensor xv = cfwd::idwt2(t.val(A), t.val(V), t.val(H), t.val(D));
    bool rg = detail::any_grad(t, {A, V, H, D});
    return t.push(std::move(xv), rg, [=](Tape& tp, const Tensor& g) {
        Bands gb = cfwd::dwt2(g);
        if (tp.requires_grad(A)) tp.accumulate(A, gb.A);
        if (tp.requires_grad(V)) tp.accumulate(V, gb.V);
        if (tp.requires_grad(H)) tp.accumulate(H, gb.H);
        if (tp.requires_grad(D)) tp.accumulate(D, gb.D);
    });
}

}  // namespace ad

}  // namespace cfwd

#endif  // CFWD_WAVELET_HPP
