#ifndef CFWD_HFPM_HPP
#define CFWD_HFPM_HPP

#include <algorithm>
#include <sstream>
#include <string>
#include <vector>

#include "cfwd/common.hpp"
#include "cfwd/nn.hpp"
#include "cfwd/spectral.hpp"
#include "cfwd/tensor.hpp"
#include "cfwd/wavelet.hpp"

namespace cfwd {

/// Geometry of the detail-enhancement network. `channels` is the band channel
/// count, `width` the internal feature width per band.
struct HfpmConfig {
    int channels = 3;
    int width = 16;
};

struct HfpmParams {
    HfpmConfig config;
    ad::ParamStore store;
    std::string fingerprint;
};

/// Which spectra the frequency comparison covers: the retained low-frequency
/// band only (v1), the finest detail triple (v2), or every detail level (v3).
enum class HfpmVersion { v1, v2, v3 };

inline std::string to_string(HfpmVersion v) {
    switch (v) {
        case HfpmVersion::v1: return "v1";
        case HfpmVersion::v2: return "v2";
        default: return "v3";
    }
}

inline HfpmVersion hfpm_version_from(const std::string& s) {
    if (s == "v1") return HfpmVersion::v1;
    if (s == "v2") return HfpmVersion::v2;
    if (s == "v3") return HfpmVersion::v3;
    fail(ErrorCode::ConfigError, "unknown hfpm version: " + s);
}

namespace hfpm_detail {

inline void add_conv(ad::ParamStore& ps, const std::string& name, int kh, int kw, int cin, int cout,
                     Rng& rng) {
    ps.add(name + ".weight", ad::init_uniform({kh, kw, cin, cout}, static_cast<long>(kh) * kw * cin, rng));
    ps.add(name + ".bias", zeros({cout}));
}

inline void add_dw(ad::ParamStore& ps, const std::string& name, int c, Rng& rng) {
    ps.add(name + ".weight", ad::init_uniform({3, 3, c}, 9, rng));
    ps.add(name + ".bias", zeros({c}));
}

/// Depthwise-separable in/out stages plus the dilated pair for one band.
inline void add_band(ad::ParamStore& ps, const std::string& pre, int c, int f, Rng& rng) {
    add_dw(ps, pre + ".in.dw", c, rng);
    add_conv(ps, pre + ".in.pw", 1, 1, c, f, rng);
}

inline void add_band_tail(ad::ParamStore& ps, const std::string& pre, int c, int f, Rng& rng) {
    add_conv(ps, pre + ".dil1", 3, 3, f, f, rng);
    add_conv(ps, pre + ".dil2", 3, 3, f, f, rng);
    add_dw(ps, pre + ".out.dw", f, rng);
    add_conv(ps, pre + ".out.pw", 1, 1, f, c, rng);
}

}  // namespace hfpm_detail

inline std::string hfpm_fingerprint(const HfpmConfig& cfg, const ad::ParamStore& store) {
    std::ostringstream os;
    os << "hfpm/v1 c=" << cfg.channels << " width=" << cfg.width;
    for (const auto& [name, t] : store.entries) {
        os << ";" << name << "=";
        for (std::size_t i = 0; i < t.shape.size(); ++i) os << (i ? "x" : "") << t.shape[i];
    }
    return os.str();
}

inline HfpmParams init_hfpm(std::uint64_t seed, const HfpmConfig& cfg) {
    require(cfg.channels >= 1, ErrorCode::InvalidArchitecture, "channels must be >= 1");
    require(cfg.width >= 1, ErrorCode::InvalidArchitecture, "width must be >= 1");
    using namespace hfpm_detail;
    HfpmParams p;
    p.config = cfg;
    ad::ParamStore& ps = p.store;
    Rng rng = Rng::derive(seed, 0x4FB0u);
    const int c = cfg.channels, f = cfg.width;
    for (const char* pre : {"v", "h", "d"}) add_band(ps, pre, c, f, rng);
    add_conv(ps, "fuse", 1, 1, 2 * f, f, rng);
    for (const char* nm : {"attn.q", "attn.k", "attn.v", "attn.proj"}) add_conv(ps, nm, 1, 1, f, f, rng);
    for (const char* pre : {"v", "h", "d"}) add_band_tail(ps, pre, c, f, rng);
    p.fingerprint = hfpm_fingerprint(cfg, ps);
    return p;
}

namespace ad {

struct TripleVars {
    Var V;
    Var H;
    Var D;
};

namespace hfpm_detail {

inline Var pw(Tape& t, const BoundParams& p, const std::string& name, Var x) {
    return conv2d(t, x, p[name + ".weight"], p[name + ".bias"], 1, 0);
}

inline Var dw3(Tape& t, const BoundParams& p, const std::string& name, Var x, int dilation = 1) {
    return depthwise_conv2d(t, x, p[name + ".weight"], p[name + ".bias"], 1, dilation, dilation);
}

inline Var dil3(Tape& t, const BoundParams& p, const std::string& name, Var x, int dilation) {
    return conv2d(t, x, p[name + ".weight"], p[name + ".bias"], 1, dilation, dilation);
}

/// Depthwise-separable feature extraction: depthwise 3x3, pointwise to the
/// feature width, SiLU.
inline Var features(Tape& t, const BoundParams& p, const std::string& pre, Var band) {
    return silu(t, pw(t, p, pre + ".in.pw", dw3(t, p, pre + ".in.dw", band)));
}

/// Residual dilated pair (rates 2 and 3) followed by the depthwise-separable
/// projection back to band space, added onto the original band.
inline Var band_tail(Tape& t, const BoundParams& p, const std::string& pre, Var feat, Var band) {
    Var g = add(t, feat, dil3(t, p, pre + ".dil2", silu(t, dil3(t, p, pre + ".dil1", feat, 2)), 3));
    Var out = pw(t, p, pre + ".out.pw", dw3(t, p, pre + ".out.dw", silu(t, g)));
    return add(t, band, out);
}

/// Attention context is pooled to a bounded grid so the score matrix grows
/// linearly with band area; queries stay at native resolution. Bands at or
/// below the cap pass through untouched.
inline Var pool_context(Tape& t, Var x) {
    constexpr int cap = 32;
    const Tensor& xv = t.val(x);
    if (xv.height() <= cap && xv.width() <= cap) return x;
    return adaptive_avgpool_grid(t, x, std::min({cap, xv.height(), xv.width()}));
}

}  // namespace hfpm_detail

/// Detail enhancement on the tape. Queries come from the diagonal band's
/// features; keys and values from the fused vertical/horizontal features.
inline TripleVars enhance_details(Tape& t, const BoundParams& p, Var V, Var H, Var D) {
    using namespace hfpm_detail;
    check_same_shape(t.val(V), t.val(H), "detail triple");
    check_same_shape(t.val(V), t.val(D), "detail triple");
    Var fv = features(t, p, "v", V);
    Var fh = features(t, p, "h", H);
    Var fd = features(t, p, "d", D);
    Var fused = silu(t, pw(t, p, "fuse", concat_ch(t, {fv, fh})));
    Var context = pool_context(t, fused);
    Var att = spatial_attention(t, pw(t, p, "attn.q", fd), pw(t, p, "attn.k", context),
                                pw(t, p, "attn.v", context));
    fd = add(t, fd, pw(t, p, "attn.proj", att));
    return {band_tail(t, p, "v", fv, V), band_tail(t, p, "h", fh, H), band_tail(t, p, "d", fd, D)};
}

}  // namespace ad

/// Plain detail enhancement (no gradients).
inline SubbandTriple enhance_details(const SubbandTriple& triple, const HfpmParams& hp) {
    ad::Tape t;
    ad::BoundParams p = ad::bind(t, hp.store, false);
    ad::TripleVars out = ad::enhance_details(t, p, t.constant(triple.V), t.constant(triple.H),
                                             t.constant(triple.D));
    return {t.val(out.V), t.val(out.H), t.val(out.D)};
}

namespace ad {

/// Frequency comparison from already-enhanced detail triples (one per level,
/// finest first). v3 covers every level, v2 the finest only, v1 compares the
/// raw retained low-frequency bands and ignores the triples.
inline Var hfpm_loss_enhanced(Tape& t, const std::vector<TripleVars>& enhanced,
                              const WaveletPyramid& low, const WaveletPyramid& ref,
                              HfpmVersion version, double theta1, double theta2,
                              bool phase_wrapped = false) {
    require(low.levels == ref.levels, ErrorCode::LevelMismatch, "pyramid depth mismatch");
    check_same_shape(low.approx, ref.approx, "pyramid approximation");
    for (int k = 0; k < low.levels; ++k) {
        check_same_shape(low.details[static_cast<std::size_t>(k)].V,
                         ref.details[static_cast<std::size_t>(k)].V, "pyramid details");
    }
    std::vector<SpectrumVars> pred, target;
    if (version == HfpmVersion::v1) {
        pred.push_back(dft_amp_phase(t, t.constant(low.approx)));
        target.push_back(dft_amp_phase(t, t.constant(ref.approx)));
    } else {
        require(low.levels >= 1, ErrorCode::LevelMismatch, "detail comparison needs at least one level");
        int levels = version == HfpmVersion::v2 ? 1 : low.levels;
        require(static_cast<int>(enhanced.size()) >= levels, ErrorCode::LevelMismatch,
                "missing enhanced levels");
        for (int k = 0; k < levels; ++k) {
            const TripleVars& e = enhanced[static_cast<std::size_t>(k)];
            const SubbandTriple& hi = ref.details[static_cast<std::size_t>(k)];
            for (Var band : {e.V, e.H, e.D}) pred.push_back(dft_amp_phase(t, band));
            for (const Tensor* band : {&hi.V, &hi.H, &hi.D})
                target.push_back(dft_amp_phase(t, t.constant(*band)));
        }
    }
    return spectral_l1_loss(t, pred, target, theta1, theta2, phase_wrapped);
}

/// Frequency-domain comparison of the enhanced degraded pyramid against the
/// raw reference pyramid. v3 covers every detail level, v2 the finest level
/// only, v1 the retained low-frequency bands without enhancement.
inline Var hfpm_loss(Tape& t, const BoundParams& p, const WaveletPyramid& low,
                     const WaveletPyramid& ref, HfpmVersion version, double theta1, double theta2,
                     bool phase_wrapped = false) {
    std::vector<TripleVars> enhanced;
    if (version != HfpmVersion::v1) {
        int levels = version == HfpmVersion::v2 ? std::min(1, low.levels) : low.levels;
        for (int k = 0; k < levels; ++k) {
            const SubbandTriple& lo = low.details[static_cast<std::size_t>(k)];
            enhanced.push_back(enhance_details(t, p, t.constant(lo.V), t.constant(lo.H), t.constant(lo.D)));
        }
    }
    return hfpm_loss_enhanced(t, enhanced, low, ref, version, theta1, theta2, phase_wrapped);
}

}  // namespace ad

/// Plain loss evaluation (no gradients).
inline double hfpm_loss(const WaveletPyramid& low, const WaveletPyramid& ref, const HfpmParams& hp,
                        HfpmVersion version, double theta1, double theta2, bool phase_wrapped = false) {
    ad::Tape t;
    ad::BoundParams p = ad::bind(t, hp.store, false);
    return t.val(ad::hfpm_loss(t, p, low, ref, version, theta1, theta2, phase_wrapped))[0];
}

}  // namespace cfwd

#endif  // CFWD_HFPM_HPP
