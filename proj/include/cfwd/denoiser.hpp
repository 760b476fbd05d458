#ifndef CFWD_DENOISER_HPP
#define CFWD_DENOISER_HPP

#include <cmath>
#include <sstream>
#include <string>
#include <vector>

#include "cfwd/diffusion.hpp"
#include "cfwd/nn.hpp"

namespace cfwd {

/// Conditional encoder-decoder noise predictor.
///
/// Layout (ch_d = base * 2^d):
///   conv_in 3x3: 2*in_channels -> base
///   encoder d = 0..levels-1: ResBlock(ch_d), Down conv3x3/s2 (ch_d -> ch_{d+1})
///   middle: ResBlock, self-attention, ResBlock at ch_levels
///   decoder d = levels-1..0: nearest-2x upsample + conv3x3 (ch_{d+1} -> ch_d),
///                            concat encoder skip, ResBlock(2*ch_d -> ch_d)
///   out: GroupNorm + SiLU + conv3x3 (base -> in_channels)
/// Timesteps enter each ResBlock as a learned projection of a sinusoidal
/// embedding, added per channel.
struct DenoiserConfig {
    int in_channels = 3;
    int base_channels = 32;
    int levels = 2;

    int time_dim() const { return 4 * base_channels; }
    int ch(int d) const { return base_channels << d; }
};

struct DenoiserParams {
    DenoiserConfig config;
    ad::ParamStore store;
    std::string fingerprint;
};

namespace denoiser_detail {

inline void add_conv(ad::ParamStore& ps, const std::string& name, int kh, int kw, int cin, int cout,
                     Rng& rng) {
    ps.add(name + ".weight", ad::init_uniform({kh, kw, cin, cout}, static_cast<long>(kh) * kw * cin, rng));
    ps.add(name + ".bias", zeros({cout}));
}

inline void add_linear(ad::ParamStore& ps, const std::string& name, int in, int out, Rng& rng) {
    ps.add(name + ".weight", ad::init_uniform({in, out}, in, rng));
    ps.add(name + ".bias", zeros({out}));
}

inline void add_norm(ad::ParamStore& ps, const std::string& name, int c) {
    ps.add(name + ".gamma", full({c}, 1.0));
    ps.add(name + ".beta", zeros({c}));
}

inline void add_resblock(ad::ParamStore& ps, const std::string& name, int cin, int cout, int time_dim,
                         Rng& rng) {
    add_norm(ps, name + ".gn1", cin);
    add_conv(ps, name + ".conv1", 3, 3, cin, cout, rng);
    add_linear(ps, name + ".temb", time_dim, cout, rng);
    add_norm(ps, name + ".gn2", cout);
    add_conv(ps, name + ".conv2", 3, 3, cout, cout, rng);
    if (cin != cout) add_conv(ps, name + ".skip", 1, 1, cin, cout, rng);
}

inline void add_attention(ad::ParamStore& ps, const std::string& name, int c, Rng& rng) {
    add_norm(ps, name + ".gn", c);
    add_conv(ps, name + ".q", 1, 1, c, c, rng);
    add_conv(ps, name + ".k", 1, 1, c, c, rng);
    add_conv(ps, name + ".v", 1, 1, c, c, rng);
    add_conv(ps, name + ".proj", 1, 1, c, c, rng);
}

}  // namespace denoiser_detail

inline std::string denoiser_fingerprint(const DenoiserConfig& cfg, const ad::ParamStore& store) {
    std::ostringstream os;
    os << "cond-unet/v1 in=" << cfg.in_channels << " base=" << cfg.base_channels << " levels=" << cfg.levels;
    for (const auto& [name, t] : store.entries) {
        os << ";" << name << "=";
        for (std::size_t i = 0; i < t.shape.size(); ++i) os << (i ? "x" : "") << t.shape[i];
    }
    return os.str();
}

inline DenoiserParams init_denoiser(std::uint64_t seed, const DenoiserConfig& cfg) {
    require(cfg.base_channels >= 4 && cfg.base_channels % 2 == 0, ErrorCode::InvalidArchitecture,
            "base_channels must be even and >= 4");
    require(cfg.levels >= 1, ErrorCode::InvalidArchitecture, "levels must be >= 1");
    require(cfg.in_channels >= 1, ErrorCode::InvalidArchitecture, "in_channels must be >= 1");
    using namespace denoiser_detail;
    DenoiserParams p;
    p.config = cfg;
    Rng rng = Rng::derive(seed, 0xDE0123u);
    ad::ParamStore& ps = p.store;
    int td = cfg.time_dim();
    add_linear(ps, "time.fc1", cfg.base_channels, td, rng);
    add_linear(ps, "time.fc2", td, td, rng);
    add_conv(ps, "conv_in", 3, 3, 2 * cfg.in_channels, cfg.base_channels, rng);
    for (int d = 0; d < cfg.levels; ++d) {
        std::string pre = "enc" + std::to_string(d);
        add_resblock(ps, pre + ".res", cfg.ch(d), cfg.ch(d), td, rng);
        add_conv(ps, pre + ".down", 3, 3, cfg.ch(d), cfg.ch(d + 1), rng);
    }
    add_resblock(ps, "mid.res1", cfg.ch(cfg.levels), cfg.ch(cfg.levels), td, rng);
    add_attention(ps, "mid.attn", cfg.ch(cfg.levels), rng);
    add_resblock(ps, "mid.res2", cfg.ch(cfg.levels), cfg.ch(cfg.levels), td, rng);
    for (int d = cfg.levels - 1; d >= 0; --d) {
        std::string pre = "dec" + std::to_string(d);
        add_conv(ps, pre + ".up", 3, 3, cfg.ch(d + 1), cfg.ch(d), rng);
        add_resblock(ps, pre + ".res", 2 * cfg.ch(d), cfg.ch(d), td, rng);
    }
    denoiser_detail::add_norm(ps, "out.gn", cfg.base_channels);
    denoiser_detail::add_conv(ps, "out.conv", 3, 3, cfg.base_channels, cfg.in_channels, rng);
    p.fingerprint = denoiser_fingerprint(cfg, ps);
    return p;
}

namespace ad {

/// Sinusoidal features of a timestep: sin at the first half of the dims,
/// cos at the second, geometric frequency ladder.
inline Tensor sinusoidal_embedding(int t, int dim) {
    require(dim >= 2 && dim % 2 == 0, ErrorCode::InvalidArchitecture, "embedding dim must be even");
    int half = dim / 2;
    Tensor out({1, dim});
    for (int i = 0; i < half; ++i) {
        double freq = std::exp(-std::log(10000.0) * (half == 1 ? 0.0 : static_cast<double>(i) / (half - 1)));
        out[i] = std::sin(t * freq);
        out[half + i] = std::cos(t * freq);
    }
    return out;
}

namespace denoiser_detail {

inline Var conv3x3(Tape& t, const BoundParams& p, const std::string& name, Var x, int stride = 1) {
    return conv2d(t, x, p[name + ".weight"], p[name + ".bias"], stride, 1);
}

inline Var conv1x1(Tape& t, const BoundParams& p, const std::string& name, Var x) {
    return conv2d(t, x, p[name + ".weight"], p[name + ".bias"], 1, 0);
}

inline Var norm(Tape& t, const BoundParams& p, const std::string& name, Var x) {
    return group_norm(t, x, p[name + ".gamma"], p[name + ".beta"], pick_groups(t.val(x).channels()));
}

inline Var resblock(Tape& t, const BoundParams& p, const std::string& name, Var x, Var temb) {
    int cin = t.val(x).channels();
    Var h = silu(t, norm(t, p, name + ".gn1", x));
    h = conv3x3(t, p, name + ".conv1", h);
    int cout = t.val(h).channels();
    Var tc = linear(t, temb, p[name + ".temb.weight"], p[name + ".temb.bias"]);
    h = add_bias_ch(t, h, reshape(t, tc, {cout}));
    h = silu(t, norm(t, p, name + ".gn2", h));
    h = conv3x3(t, p, name + ".conv2", h);
    Var skip = cin == cout ? x : conv1x1(t, p, name + ".skip", x);
    return add(t, h, skip);
}

inline Var attention(Tape& t, const BoundParams& p, const std::string& name, Var x) {
    Var h = norm(t, p, name + ".gn", x);
    Var q = conv1x1(t, p, name + ".q", h);
    Var k = conv1x1(t, p, name + ".k", h);
    Var v = conv1x1(t, p, name + ".v", h);
    Var att = spatial_attention(t, q, k, v);
    return add(t, x, conv1x1(t, p, name + ".proj", att));
}

}  // namespace denoiser_detail

/// Noise prediction on the tape. x_t and condition are concatenated on the
/// channel axis; output matches x_t's shape.
inline Var predict_noise(Tape& t, const BoundParams& p, Var x_t, Var condition, int step,
                         const DenoiserConfig& cfg) {
    using namespace denoiser_detail;
    const Tensor& xv = t.val(x_t);
    require(step >= 1, ErrorCode::StepOutOfRange, "timestep must be >= 1");
    check_same_shape(xv, t.val(condition), "denoiser condition");
    require(xv.rank() == 3 && xv.channels() == cfg.in_channels, ErrorCode::ShapeMismatch,
            "latent channel count");
    int div = 1 << cfg.levels;
    require(xv.height() % div == 0 && xv.width() % div == 0, ErrorCode::ShapeMismatch,
            "latent dims must be divisible by 2^levels");

    Var temb = t.constant(sinusoidal_embedding(step, cfg.base_channels));
    temb = linear(t, temb, p["time.fc1.weight"], p["time.fc1.bias"]);
    temb = linear(t, silu(t, temb), p["time.fc2.weight"], p["time.fc2.bias"]);

    Var h = conv3x3(t, p, "conv_in", concat_ch(t, {x_t, condition}));
    std::vector<Var> skips;
    for (int d = 0; d < cfg.levels; ++d) {
        std::string pre = "enc" + std::to_string(d);
        h = resblock(t, p, pre + ".res", h, temb);
        skips.push_back(h);
        h = conv3x3(t, p, pre + ".down", h, 2);
    }
    h = resblock(t, p, "mid.res1", h, temb);
    h = attention(t, p, "mid.attn", h);
    h = resblock(t, p, "mid.res2", h, temb);
    for (int d = cfg.levels - 1; d >= 0; --d) {
        std::string pre = "dec" + std::to_string(d);
        h = conv3x3(t, p, pre + ".up", upsample_nearest2x(t, h));
        h = concat_ch(t, {h, skips[static_cast<std::size_t>(d)]});
        h = resblock(t, p, pre + ".res", h, temb);
    }
    h = silu(t, norm(t, p, "out.gn", h));
    return conv3x3(t, p, "out.conv", h);
}

}  // namespace ad

/// Plain forward pass (no gradients).
inline Tensor predict_noise(const Tensor& x_t, const Tensor& condition, int step, const DenoiserParams& dp) {
    ad::Tape t;
    ad::BoundParams p = ad::bind(t, dp.store, false);
    ad::Var out = ad::predict_noise(t, p, t.constant(x_t), t.constant(condition), step, dp.config);
    return t.val(out);
}

/// DenoiserFn adapter for the sampler.
inline DenoiserFn denoiser_fn(const DenoiserParams& dp) {
    return [&dp](const Tensor& x_t, const Tensor& cond, int step) { return predict_noise(x_t, cond, step, dp); };
}

}  // namespace cfwd

#endif  // CFWD_DENOISER_HPP
