#ifndef CFWD_SPECTRAL_HPP
#define CFWD_SPECTRAL_HPP

#include <complex>
#include <numbers>
#include <utility>
#include <vector>

#include "cfwd/autodiff.hpp"
#include "cfwd/tensor.hpp"

namespace cfwd {

/// Amplitude/phase decomposition of a per-channel 2D DFT. Phase lives in
/// (-pi, pi]; zero-modulus bins carry phase 0 by convention.
struct Spectrum {
    Tensor amplitude;
    Tensor phase;
};

namespace spectral_detail {

using cplx = std::complex<double>;

inline bool is_pow2(int n) { return n > 0 && (n & (n - 1)) == 0; }

/// In-place 1D transform, unnormalized: out[k] = sum_n in[n]*exp(sign*2*pi*i*k*n/N).
/// Radix-2 when the length allows it, direct summation otherwise.
inline void transform1d(std::vector<cplx>& a, int sign) {
    const int n = static_cast<int>(a.size());
    if (n == 1) return;
    if (is_pow2(n)) {
        // iterative Cooley-Tukey with bit-reversal permutation
        for (int i = 1, j = 0; i < n; ++i) {
            int bit = n >> 1;
            for (; j & bit; bit >>= 1) j ^= bit;
            j ^= bit;
            if (i < j) std::swap(a[static_cast<std::size_t>(i)], a[static_cast<std::size_t>(j)]);
        }
        for (int len = 2; len <= n; len <<= 1) {
            double ang = sign * 2.0 * std::numbers::pi / len;
            cplx wl(std::cos(ang), std::sin(ang));
            for (int i = 0; i < n; i += len) {
                cplx w(1.0, 0.0);
                for (int k = 0; k < len / 2; ++k) {
                    cplx u = a[static_cast<std::size_t>(i + k)];
                    cplx v = a[static_cast<std::size_t>(i + k + len / 2)] * w;
                    a[static_cast<std::size_t>(i + k)] = u + v;
                    a[static_cast<std::size_t>(i + k + len / 2)] = u - v;
                    w *= wl;
                }
            }
        }
        return;
    }
    std::vector<cplx> out(a.size());
    for (int k = 0; k < n; ++k) {
        cplx acc(0.0, 0.0);
        for (int m = 0; m < n; ++m) {
            double ang = sign * 2.0 * std::numbers::pi * k * m / n;
            acc += a[static_cast<std::size_t>(m)] * cplx(std::cos(ang), std::sin(ang));
        }
        out[static_cast<std::size_t>(k)] = acc;
    }
    a = std::move(out);
}

/// Unnormalized 2D transform of one channel plane, rows then columns.
inline void transform2d(std::vector<cplx>& plane, int h, int w, int sign) {
    std::vector<cplx> line;
    for (int y = 0; y < h; ++y) {
        line.assign(plane.begin() + static_cast<long>(y) * w, plane.begin() + static_cast<long>(y + 1) * w);
        transform1d(line, sign);
        std::copy(line.begin(), line.end(), plane.begin() + static_cast<long>(y) * w);
    }
    line.resize(static_cast<std::size_t>(h));
    for (int x = 0; x < w; ++x) {
        for (int y = 0; y < h; ++y) line[static_cast<std::size_t>(y)] = plane[static_cast<long>(y) * w + x];
        transform1d(line, sign);
        for (int y = 0; y < h; ++y) plane[static_cast<long>(y) * w + x] = line[static_cast<std::size_t>(y)];
    }
}

/// Principal value in (-pi, pi].
inline double normalize_phase(double p) {
    if (p <= -std::numbers::pi) p += 2.0 * std::numbers::pi;
    return p;
}

/// Distance between phases folded onto (-pi, pi].
inline double wrap_delta(double d) {
    double two_pi = 2.0 * std::numbers::pi;
    d = std::fmod(d, two_pi);
    if (d > std::numbers::pi) d -= two_pi;
    if (d <= -std::numbers::pi) d += two_pi;
    return d;
}

}  // namespace spectral_detail

/// Per-channel unnormalized forward 2D DFT split into real and imaginary
/// parts, each shaped like the input.
inline std::pair<Tensor, Tensor> dft2d_reim(const Tensor& x) {
    require(x.rank() == 3, ErrorCode::ShapeMismatch, "dft expects HWC");
    require(all_finite(x), ErrorCode::InvalidRange, "dft input must be finite");
    int h = x.height(), w = x.width(), c = x.channels();
    Tensor re(x.shape), im(x.shape);
    std::vector<spectral_detail::cplx> plane(static_cast<std::size_t>(h) * w);
    for (int k = 0; k < c; ++k) {
        for (int y = 0; y < h; ++y)
            for (int xx = 0; xx < w; ++xx)
                plane[static_cast<std::size_t>(y) * w + xx] = spectral_detail::cplx(x.at(y, xx, k), 0.0);
        spectral_detail::transform2d(plane, h, w, -1);
        for (int y = 0; y < h; ++y)
            for (int xx = 0; xx < w; ++xx) {
                re.at(y, xx, k) = plane[static_cast<std::size_t>(y) * w + xx].real();
                im.at(y, xx, k) = plane[static_cast<std::size_t>(y) * w + xx].imag();
            }
    }
    return {std::move(re), std::move(im)};
}

/// Real part of the normalized inverse DFT of amplitude*exp(i*phase).
inline Tensor idft2d_from_amp_phase(const Tensor& amp, const Tensor& phase) {
    check_same_shape(amp, phase, "idft bands");
    int h = amp.height(), w = amp.width(), c = amp.channels();
    Tensor out(amp.shape);
    std::vector<spectral_detail::cplx> plane(static_cast<std::size_t>(h) * w);
    for (int k = 0; k < c; ++k) {
        for (int y = 0; y < h; ++y)
            for (int xx = 0; xx < w; ++xx)
                plane[static_cast<std::size_t>(y) * w + xx] =
                    std::polar(amp.at(y, xx, k), phase.at(y, xx, k));
        spectral_detail::transform2d(plane, h, w, +1);
        double norm = 1.0 / (static_cast<double>(h) * w);
        for (int y = 0; y < h; ++y)
            for (int xx = 0; xx < w; ++xx) out.at(y, xx, k) = plane[static_cast<std::size_t>(y) * w + xx].real() * norm;
    }
    return out;
}

/// Amplitude and phase of the per-channel forward DFT.
inline Spectrum dft_amp_phase(const Tensor& x) {
    auto [re, im] = dft2d_reim(x);
    Spectrum s{Tensor(x.shape), Tensor(x.shape)};
    for (long i = 0; i < x.numel(); ++i) {
        double r = std::hypot(re[i], im[i]);
        s.amplitude[i] = r;
        s.phase[i] = r == 0.0 ? 0.0 : spectral_detail::normalize_phase(std::atan2(im[i], re[i]));
    }
    return s;
}

/// theta1 * mean-L1 of amplitudes + theta2 * mean-L1 of phases, each first
/// averaged within a scale and then across the list.
inline double spectral_l1_loss(const std::vector<Spectrum>& pred, const std::vector<Spectrum>& ref,
                               double theta1, double theta2, bool phase_wrapped = false) {
    require(!pred.empty(), ErrorCode::EmptyList, "spectral loss over empty list");
    require(pred.size() == ref.size(), ErrorCode::ShapeMismatch, "spectrum list length mismatch");
    double l_amp = 0.0, l_pha = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        check_same_shape(pred[i].amplitude, ref[i].amplitude, "spectral loss amplitude");
        check_same_shape(pred[i].phase, ref[i].phase, "spectral loss phase");
        double a = 0.0, p = 0.0;
        long n = pred[i].amplitude.numel();
        for (long j = 0; j < n; ++j) {
            a += std::abs(pred[i].amplitude[j] - ref[i].amplitude[j]);
            double d = pred[i].phase[j] - ref[i].phase[j];
            p += std::abs(phase_wrapped ? spectral_detail::wrap_delta(d) : d);
        }
        l_amp += a / static_cast<double>(n);
        l_pha += p / static_cast<double>(n);
    }
    double k = static_cast<double>(pred.size());
    return theta1 * (l_amp / k) + theta2 * (l_pha / k);
}

// ---------------------------------------------------------------------------
// tape versions

namespace ad {

struct SpectrumVars {
    Var amplitude;
    Var phase;
};

/// Forward DFT as two tape nodes (re, im). The transform is linear, so each
/// backward applies the adjoint (sign-flipped, unnormalized) transform.
inline std::pair<Var, Var> dft2d(Tape& t, Var x) {
    auto [re, im] = cfwd::dft2d_reim(t.val(x));
    bool rg = t.requires_grad(x);
    auto adjoint = [x](Tape& tp, const Tensor& g, bool imag_part) {
        if (!tp.requires_grad(x)) return;
        int h = g.height(), w = g.width(), c = g.channels();
        Tensor gx(g.shape);
        std::vector<spectral_detail::cplx> plane(static_cast<std::size_t>(h) * w);
        for (int k = 0; k < c; ++k) {
            for (int y = 0; y < h; ++y)
                for (int xx = 0; xx < w; ++xx)
                    plane[static_cast<std::size_t>(y) * w + xx] =
                        imag_part ? spectral_detail::cplx(0.0, g.at(y, xx, k))
                                  : spectral_detail::cplx(g.at(y, xx, k), 0.0);
            spectral_detail::transform2d(plane, h, w, +1);
            for (int y = 0; y < h; ++y)
                for (int xx = 0; xx < w; ++xx) gx.at(y, xx, k) = plane[static_cast<std::size_t>(y) * w + xx].real();
        }
        tp.accumulate(x, gx);
    };
    Var vre = t.push(std::move(re), rg, [adjoint](Tape& tp, const Tensor& g) { adjoint(tp, g, false); });
    Var vim = t.push(std::move(im), rg, [adjoint](Tape& tp, const Tensor& g) { adjoint(tp, g, true); });
    return {vre, vim};
}

/// Modulus of (re, im); gradient vanishes at zero-modulus bins.
inline Var amp_of(Tape& t, Var re, Var im) {
    return binary_op(
        t, re, im, [](double x, double y) { return std::hypot(x, y); },
        [](double x, double y) {
            double r = std::hypot(x, y);
            return r == 0.0 ? 0.0 : x / r;
        },
        [](double x, double y) {
            double r = std::hypot(x, y);
            return r == 0.0 ? 0.0 : y / r;
        },
        "amp_of");
}

/// Argument of (re, im) in (-pi, pi]; zero-modulus bins read 0 with zero
/// gradient.
inline Var phase_of(Tape& t, Var re, Var im) {
    return binary_op(
        t, re, im,
        [](double x, double y) {
            double r2 = x * x + y * y;
            return r2 == 0.0 ? 0.0 : spectral_detail::normalize_phase(std::atan2(y, x));
        },
        [](double x, double y) {
            double r2 = x * x + y * y;
            return r2 == 0.0 ? 0.0 : -y / r2;
        },
        [](double x, double y) {
            double r2 = x * x + y * y;
            return r2 == 0.0 ? 0.0 : x / r2;
        },
        "phase_of");
}

inline SpectrumVars dft_amp_phase(Tape& t, Var x) {
    auto [re, im] = dft2d(t, x);
    return {amp_of(t, re, im), phase_of(t, re, im)};
}

/// |wrap(p - q)| elementwise, with sign gradients almost everywhere.
inline Var phase_l1_wrapped(Tape& t, Var p, Var q) {
    auto dist = [](double x, double y) { return std::abs(spectral_detail::wrap_delta(x - y)); };
    auto sgn = [](double x, double y) {
        double d = spectral_detail::wrap_delta(x - y);
        return d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0);
    };
    return mean(t, binary_op(
                       t, p, q, dist, sgn,
                       [sgn](double x, double y) { return -sgn(x, y); }, "phase_l1_wrapped"));
}

inline Var spectral_l1_loss(Tape& t, const std::vector<SpectrumVars>& pred,
                            const std::vector<SpectrumVars>& ref, double theta1, double theta2,
                            bool phase_wrapped = false) {
    require(!pred.empty(), ErrorCode::EmptyList, "spectral loss over empty list");
    require(pred.size() == ref.size(), ErrorCode::ShapeMismatch, "spectrum list length mismatch");
    Var l_amp, l_pha;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        Var a = l1_loss(t, pred[i].amplitude, ref[i].amplitude);
        Var p = phase_wrapped ? phase_l1_wrapped(t, pred[i].phase, ref[i].phase)
                              : l1_loss(t, pred[i].phase, ref[i].phase);
        l_amp = i == 0 ? a : add(t, l_amp, a);
        l_pha = i == 0 ? p : add(t, l_pha, p);
    }
    double inv_k = 1.0 / static_cast<double>(pred.size());
    return add(t, scale(t, l_amp, theta1 * inv_k), scale(t, l_pha, theta2 * inv_k));
}

}  // namespace ad

}  // namespace cfwd

#endif  // CFWD_SPECTRAL_HPP
