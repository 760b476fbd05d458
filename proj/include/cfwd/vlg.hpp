#ifndef CFWD_VLG_HPP
#define CFWD_VLG_HPP

#include <cmath>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "cfwd/common.hpp"
#include "cfwd/nn.hpp"
#include "cfwd/serialize.hpp"
#include "cfwd/tensor.hpp"

namespace cfwd {

/// Joint image/text encoder abstraction. Image paths run on the tape so
/// guidance losses can differentiate through them; text embedding carries no
/// gradients. Embeddings are unit vectors of dimension dim().
class Embedder {
public:
    virtual ~Embedder() = default;
    virtual int dim() const = 0;
    virtual ad::Var embed_image(ad::Tape& t, ad::Var image) const = 0;
    virtual Tensor embed_text(const std::string& text) const = 0;
    /// Five feature maps (layers 0..4) for perceptual comparison.
    virtual std::vector<ad::Var> image_features(ad::Tape& t, ad::Var image) const = 0;
};

struct PromptPair {
    std::string positive;
    std::string negative;
    std::optional<Tensor> positive_embedding;
    std::optional<Tensor> negative_embedding;
};

enum class VlgMode { literal, corrected };

inline std::string to_string(VlgMode m) { return m == VlgMode::literal ? "literal" : "corrected"; }

inline VlgMode vlg_mode_from(const std::string& s) {
    if (s == "literal") return VlgMode::literal;
    if (s == "corrected") return VlgMode::corrected;
    fail(ErrorCode::ConfigError, "unknown guidance mode: " + s);
}

namespace vlg_detail {

inline void check_unit(const Tensor& e, const std::string& what) {
    double n = std::sqrt(squared_norm(e));
    require(std::abs(n - 1.0) <= 1e-5, ErrorCode::DegenerateEmbedding, what + " embedding is not unit-norm");
}

/// Five-level average-pooling pyramid, cropping to even dims where needed so
/// every level halves cleanly.
inline std::vector<ad::Var> pooled_pyramid(ad::Tape& t, ad::Var image) {
    const Tensor& xv = t.val(image);
    require(xv.rank() == 3, ErrorCode::ShapeMismatch, "feature pyramid expects HWC");
    require(xv.height() >= 16 && xv.width() >= 16, ErrorCode::ImageTooSmall,
            "feature pyramid needs at least 16x16 input");
    std::vector<ad::Var> maps{image};
    ad::Var h = image;
    for (int l = 1; l < 5; ++l) {
        const Tensor& hv = t.val(h);
        int eh = hv.height() - hv.height() % 2, ew = hv.width() - hv.width() % 2;
        if (eh != hv.height() || ew != hv.width()) h = ad::crop(t, h, 0, 0, eh, ew);
        h = ad::avgpool2x2(t, h);
        maps.push_back(h);
    }
    return maps;
}

}  // namespace vlg_detail

/// Hermetic, dependency-free encoder. The image embedding is a smooth,
/// differentiable recipe over luminance statistics; text maps to fixed unit
/// anchors through a small phrase lexicon. Brighter constant images score
/// strictly higher cosine against the positive anchor.
class StubEmbedder final : public Embedder {
public:
    int dim() const override { return 7; }

    ad::Var embed_image(ad::Tape& t, ad::Var image) const override {
        using namespace ad;
        const Tensor& xv = t.val(image);
        require(xv.rank() == 3 && xv.channels() == 3, ErrorCode::ShapeMismatch,
                "stub embedder expects HWC RGB");
        Var r = slice_ch(t, image, 0, 1);
        Var g = slice_ch(t, image, 1, 2);
        Var b = slice_ch(t, image, 2, 3);
        Var lum = scale(t, add(t, add(t, r, g), b), 1.0 / 3.0);
        Var mean_lum = mean(t, lum);
        Var contrast = mean(t, square(t, sub(t, lum, mean_lum)));
        Var grad_energy = gradient_energy(t, lum);
        Var one = t.constant(full({1}, 1.0));
        Var dr = sub(t, mean(t, r), mean_lum);
        Var dg = sub(t, mean(t, g), mean_lum);
        Var db = sub(t, mean(t, b), mean_lum);
        return l2_normalize(t, pack(t, {one, mean_lum, contrast, grad_energy, dr, dg, db}));
    }

    Tensor embed_text(const std::string& text) const override {
        // positive anchor: bright, contrasty; negative: dark, flat, noisy
        if (contains_any(text, {"well-lit", "bright", "high-contrast"})) return unit({1, 2, 1, 0, 0, 0, 0});
        if (contains_any(text, {"dark", "underexposed", "noisy", "low-light"}))
            return unit({1, -2, -1, 1, 0, 0, 0});
        fail(ErrorCode::InvalidArgument, "stub embedder lexicon does not cover: " + text);
    }

    std::vector<ad::Var> image_features(ad::Tape& t, ad::Var image) const override {
        return vlg_detail::pooled_pyramid(t, image);
    }

private:
    static bool contains_any(const std::string& text, std::initializer_list<const char*> keys) {
        for (const char* k : keys)
            if (text.find(k) != std::string::npos) return true;
        return false;
    }

    static Tensor unit(std::initializer_list<double> v) {
        Tensor t({static_cast<int>(v.size())}, std::vector<double>(v));
        double n = std::sqrt(squared_norm(t));
        for (auto& x : t.data) x /= n;
        return t;
    }

    static ad::Var gradient_energy(ad::Tape& t, ad::Var lum) {
        using namespace ad;
        const Tensor& lv = t.val(lum);
        int h = lv.height(), w = lv.width();
        Var dx = sub(t, crop(t, lum, 0, 1, h, w - 1), crop(t, lum, 0, 0, h, w - 1));
        Var dy = sub(t, crop(t, lum, 1, 0, h - 1, w), crop(t, lum, 0, 0, h - 1, w));
        return add(t, mean(t, square(t, dx)), mean(t, square(t, dy)));
    }
};

/// File-backed encoder adapter. The checkpoint supplies a pooled-linear image
/// head and a text lexicon; see the serialized layout in load().
class PretrainedEmbedder final : public Embedder {
public:
    static constexpr const char* kMagic = "CFWDEMB1";

    /// Layout, little-endian: 8-byte magic "CFWDEMB1", u32 dim, u32 pool grid,
    /// projection tensor [grid*grid*3, dim], bias tensor [dim], u32 lexicon
    /// count, then per phrase a string and a unit-norm tensor [dim].
    static PretrainedEmbedder load(const std::string& path) {
        std::ifstream in(path, std::ios::binary);
        require(in.good(), ErrorCode::MissingFile,
                "pretrained embedder checkpoint not found at '" + path +
                    "'; pass embedder=stub to use the built-in encoder");
        char magic[8];
        in.read(magic, 8);
        require(in.gcount() == 8 && std::string(magic, 8) == kMagic, ErrorCode::CorruptData,
                "bad embedder checkpoint magic");
        PretrainedEmbedder e;
        e.dim_ = static_cast<int>(ser::read_u32(in));
        e.grid_ = static_cast<int>(ser::read_u32(in));
        require(e.dim_ >= 2 && e.grid_ >= 1, ErrorCode::CorruptData, "bad embedder geometry");
        e.proj_ = ser::read_tensor(in);
        e.bias_ = ser::read_tensor(in);
        require(e.proj_.shape == std::vector<int>({e.grid_ * e.grid_ * 3, e.dim_}) &&
                    e.bias_.shape == std::vector<int>({e.dim_}),
                ErrorCode::CorruptData, "embedder projection shape mismatch");
        std::uint32_t n = ser::read_u32(in);
        require(n <= 4096, ErrorCode::CorruptData, "embedder lexicon too large");
        for (std::uint32_t i = 0; i < n; ++i) {
            std::string phrase = ser::read_string(in);
            Tensor v = ser::read_tensor(in);
            require(v.shape == std::vector<int>({e.dim_}), ErrorCode::CorruptData,
                    "embedder lexicon entry shape mismatch");
            vlg_detail::check_unit(v, "lexicon");
            e.lexicon_[phrase] = std::move(v);
        }
        return e;
    }

    static void save(std::ostream& out, int dim, int grid, const Tensor& proj, const Tensor& bias,
                     const std::map<std::string, Tensor>& lexicon) {
        out.write(kMagic, 8);
        ser::write_u32(out, static_cast<std::uint32_t>(dim));
        ser::write_u32(out, static_cast<std::uint32_t>(grid));
        ser::write_tensor(out, proj);
        ser::write_tensor(out, bias);
        ser::write_u32(out, static_cast<std::uint32_t>(lexicon.size()));
        for (const auto& [phrase, v] : lexicon) {
            ser::write_string(out, phrase);
            ser::write_tensor(out, v);
        }
    }

    int dim() const override { return dim_; }

    ad::Var embed_image(ad::Tape& t, ad::Var image) const override {
        using namespace ad;
        const Tensor& xv = t.val(image);
        require(xv.rank() == 3 && xv.channels() == 3, ErrorCode::ShapeMismatch,
                "pretrained embedder expects HWC RGB");
        Var pooled = adaptive_avgpool_grid(t, image, grid_);
        Var flat = reshape(t, pooled, {1, grid_ * grid_ * 3});
        Var projected = linear(t, flat, t.constant(proj_), t.constant(bias_));
        return l2_normalize(t, reshape(t, projected, {dim_}));
    }

    Tensor embed_text(const std::string& text) const override {
        auto it = lexicon_.find(text);
        if (it == lexicon_.end())
            fail(ErrorCode::InvalidArgument, "phrase not in embedder checkpoint lexicon: " + text);
        return it->second;
    }

    std::vector<ad::Var> image_features(ad::Tape& t, ad::Var image) const override {
        return vlg_detail::pooled_pyramid(t, image);
    }

private:
    int dim_ = 0;
    int grid_ = 0;
    Tensor proj_;
    Tensor bias_;
    std::map<std::string, Tensor> lexicon_;
};

/// Prompt embeddings: precomputed vectors win over text encoding; both must
/// be unit-norm.
inline std::pair<Tensor, Tensor> prompt_embeddings(const Embedder& emb, const PromptPair& prompts) {
    require(!prompts.positive.empty() && !prompts.negative.empty(), ErrorCode::InvalidArgument,
            "prompts must be non-empty");
    Tensor pos = prompts.positive_embedding ? *prompts.positive_embedding : emb.embed_text(prompts.positive);
    Tensor neg = prompts.negative_embedding ? *prompts.negative_embedding : emb.embed_text(prompts.negative);
    vlg_detail::check_unit(pos, "positive prompt");
    vlg_detail::check_unit(neg, "negative prompt");
    return {pos, neg};
}

/// Rescale a level-k approximation band to image range: the analysis filters
/// gain 2^k on constants, so divide it back out and clamp into [0,1].
inline ad::Var rescale_approximation(ad::Tape& t, ad::Var approx, int level) {
    require(level >= 1, ErrorCode::InvalidArgument, "approximation level must be >= 1");
    return ad::clamp(t, ad::scale(t, approx, std::pow(0.5, level)), 0.0, 1.0);
}

namespace ad {

/// Prompt-direction loss over the approximation list. Per entry:
/// cos(neg)/max(cos(pos), 1e-4) plus cos(pos) in literal mode or
/// (1 - cos(pos)) in corrected mode, summed over the list.
inline Var similarity_loss_1(Tape& t, const std::vector<Var>& approximations, const PromptPair& prompts,
                             const Embedder& emb, VlgMode mode) {
    require(!approximations.empty(), ErrorCode::EmptyList, "similarity loss over empty list");
    auto [pos, neg] = prompt_embeddings(emb, prompts);
    Var vp = t.constant(pos);
    Var vn = t.constant(neg);
    Var total;
    for (std::size_t k = 0; k < approximations.size(); ++k) {
        Var e = emb.embed_image(t, approximations[k]);
        Var cos_p = cosine(t, e, vp);
        Var cos_n = cosine(t, e, vn);
        Var term = div(t, cos_n, maximum_scalar(t, cos_p, 1e-4));
        Var tail = mode == VlgMode::literal ? cos_p : affine(t, cos_p, -1.0, 1.0);
        term = add(t, term, tail);
        total = k == 0 ? term : add(t, total, term);
    }
    return total;
}

/// Two-way softmax probability of the negative prompt; strictly inside (0,1)
/// and decreasing in cos(pos).
inline Var similarity_loss_2(Tape& t, Var enhanced, const PromptPair& prompts, const Embedder& emb) {
    auto [pos, neg] = prompt_embeddings(emb, prompts);
    Var e = emb.embed_image(t, enhanced);
    Var en = exp_(t, cosine(t, e, t.constant(neg)));
    Var ep = exp_(t, cosine(t, e, t.constant(pos)));
    return div(t, en, add(t, ep, en));
}

/// Combined guidance loss.
inline Var vlg_loss(Tape& t, const std::vector<Var>& approximations, Var enhanced,
                    const PromptPair& prompts, const Embedder& emb, VlgMode mode) {
    return add(t, similarity_loss_1(t, approximations, prompts, emb, mode),
               similarity_loss_2(t, enhanced, prompts, emb));
}

}  // namespace ad

/// Plain evaluations (no gradients).
inline double similarity_loss_1(const std::vector<Tensor>& approximations, const PromptPair& prompts,
                                const Embedder& emb, VlgMode mode) {
    ad::Tape t;
    std::vector<ad::Var> vars;
    vars.reserve(approximations.size());
    for (const auto& a : approximations) vars.push_back(t.constant(a));
    return t.val(ad::similarity_loss_1(t, vars, prompts, emb, mode))[0];
}

inline double similarity_loss_2(const Tensor& enhanced, const PromptPair& prompts, const Embedder& emb) {
    ad::Tape t;
    return t.val(ad::similarity_loss_2(t, t.constant(enhanced), prompts, emb))[0];
}

inline double vlg_loss(const std::vector<Tensor>& approximations, const Tensor& enhanced,
                       const PromptPair& prompts, const Embedder& emb, VlgMode mode) {
    ad::Tape t;
    std::vector<ad::Var> vars;
    vars.reserve(approximations.size());
    for (const auto& a : approximations) vars.push_back(t.constant(a));
    return t.val(ad::vlg_loss(t, vars, t.constant(enhanced), prompts, emb, mode))[0];
}

}  // namespace cfwd

#endif  // CFWD_VLG_HPP
