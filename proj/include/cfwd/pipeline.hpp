#pragma once

// End-to-end training, enhancement, and evaluation: wires the wavelet
// front end, the conditional latent denoiser, the detail-band enhancer, and
// the guidance losses into one optimization loop with checkpointing.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "cfwd/common.hpp"
#include "cfwd/denoiser.hpp"
#include "cfwd/diffusion.hpp"
#include "cfwd/hfpm.hpp"
#include "cfwd/imaging.hpp"
#include "cfwd/nn.hpp"
#include "cfwd/serialize.hpp"
#include "cfwd/spectral.hpp"
#include "cfwd/vlg.hpp"
#include "cfwd/wavelet.hpp"

namespace cfwd {

// ---------------------------------------------------------------------------
// training configuration

/// Every knob of a training run. The text form is `key = value` lines; see
/// config_keys() for the full key list.
struct TrainConfig {
    int wavelet_levels = 2;                 // pyramid depth K
    int guidance_scale = 3;                 // 0 = off, 1 = image only, 2 = + coarsest band, 3 = + every band
    int timesteps = 200;                    // diffusion chain length T
    ScheduleKind schedule = ScheduleKind::Linear;
    double beta_start = 1e-4;
    double beta_end = 5e-2;                 // near-total forward corruption at T=200 so the
                                            // sampler's standard-normal start is in-distribution
    int sampling_steps = 10;
    SampleMode sampling_mode = SampleMode::Implicit;
    double learning_rate = 1e-4;
    int batch_size = 16;
    int patch_size = 256;
    long iterations = 200000;
    double theta1 = 1.0;                    // amplitude weight of the spectral loss
    double theta2 = 1.0;                    // phase weight of the spectral loss
    std::array<double, 5> gamma = {0.2, 0.2, 0.2, 0.2, 0.2};  // per-stage content weights
    bool loss_vlg = true;
    bool loss_hfpm = true;
    bool loss_content = true;
    HfpmVersion hfpm_version = HfpmVersion::v3;
    VlgMode vlg_mode = VlgMode::corrected;
    std::string prompt_positive = "a well-lit, high-contrast photo";
    std::string prompt_negative = "a dark, underexposed, noisy photo";
    std::uint64_t seed = 0;
    int base_channels = 32;                 // denoiser width
    int denoiser_levels = 2;                // denoiser down/up stages
    int hfpm_width = 16;                    // detail enhancer feature width
    long checkpoint_interval = 1000;        // 0 = final checkpoint only
    bool augment_flip = false;
    bool phase_wrapped = false;             // circular phase distance in spectral losses
};

namespace config_detail {

inline std::string format_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

inline std::string trim(const std::string& s) {
    std::size_t b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    std::size_t e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

inline double parse_double(const std::string& key, const std::string& value) {
    try {
        std::size_t idx = 0;
        double v = std::stod(value, &idx);
        require(idx == value.size(), ErrorCode::ConfigError, "trailing characters in value for " + key);
        return v;
    } catch (const Error&) {
        throw;
    } catch (const std::exception&) {
        fail(ErrorCode::ConfigError, "cannot parse number '" + value + "' for key " + key);
    }
}

inline long parse_long(const std::string& key, const std::string& value) {
    try {
        std::size_t idx = 0;
        long long v = std::stoll(value, &idx);
        require(idx == value.size(), ErrorCode::ConfigError, "trailing characters in value for " + key);
        return static_cast<long>(v);
    } catch (const Error&) {
        throw;
    } catch (const std::exception&) {
        fail(ErrorCode::ConfigError, "cannot parse integer '" + value + "' for key " + key);
    }
}

inline int parse_int(const std::string& key, const std::string& value) {
    return static_cast<int>(parse_long(key, value));
}

inline bool parse_bool(const std::string& key, const std::string& value) {
    if (value == "on" || value == "true" || value == "1") return true;
    if (value == "off" || value == "false" || value == "0") return false;
    fail(ErrorCode::ConfigError, "expected on/off for key " + key + ", got '" + value + "'");
}

inline std::array<double, 5> parse_gamma(const std::string& value) {
    std::array<double, 5> out{};
    std::stringstream ss(value);
    std::string item;
    std::size_t n = 0;
    while (std::getline(ss, item, ',')) {
        require(n < out.size(), ErrorCode::ConfigError, "gamma expects exactly 5 comma-separated weights");
        out[n++] = parse_double("gamma", trim(item));
    }
    require(n == out.size(), ErrorCode::ConfigError, "gamma expects exactly 5 comma-separated weights");
    return out;
}

}  // namespace config_detail

/// Applies one `key = value` assignment. Unknown keys are rejected.
inline void apply_config_entry(TrainConfig& cfg, const std::string& key, const std::string& value) {
    using namespace config_detail;
    if (key == "wavelet_levels") cfg.wavelet_levels = parse_int(key, value);
    else if (key == "guidance_scale") cfg.guidance_scale = parse_int(key, value);
    else if (key == "timesteps") cfg.timesteps = parse_int(key, value);
    else if (key == "schedule") cfg.schedule = schedule_kind_from(value);
    else if (key == "beta_start") cfg.beta_start = parse_double(key, value);
    else if (key == "beta_end") cfg.beta_end = parse_double(key, value);
    else if (key == "sampling_steps") cfg.sampling_steps = parse_int(key, value);
    else if (key == "sampling_mode") cfg.sampling_mode = sample_mode_from(value);
    else if (key == "learning_rate") cfg.learning_rate = parse_double(key, value);
    else if (key == "batch_size") cfg.batch_size = parse_int(key, value);
    else if (key == "patch_size") cfg.patch_size = parse_int(key, value);
    else if (key == "iterations") cfg.iterations = parse_long(key, value);
    else if (key == "theta1") cfg.theta1 = parse_double(key, value);
    else if (key == "theta2") cfg.theta2 = parse_double(key, value);
    else if (key == "gamma") cfg.gamma = parse_gamma(value);
    else if (key == "loss_vlg") cfg.loss_vlg = parse_bool(key, value);
    else if (key == "loss_hfpm") cfg.loss_hfpm = parse_bool(key, value);
    else if (key == "loss_content") cfg.loss_content = parse_bool(key, value);
    else if (key == "hfpm_version") cfg.hfpm_version = hfpm_version_from(value);
    else if (key == "vlg_mode") cfg.vlg_mode = vlg_mode_from(value);
    else if (key == "prompt_positive") cfg.prompt_positive = value;
    else if (key == "prompt_negative") cfg.prompt_negative = value;
    else if (key == "seed") cfg.seed = static_cast<std::uint64_t>(parse_long(key, value));
    else if (key == "base_channels") cfg.base_channels = parse_int(key, value);
    else if (key == "denoiser_levels") cfg.denoiser_levels = parse_int(key, value);
    else if (key == "hfpm_width") cfg.hfpm_width = parse_int(key, value);
    else if (key == "checkpoint_interval") cfg.checkpoint_interval = parse_long(key, value);
    else if (key == "augment_flip") cfg.augment_flip = parse_bool(key, value);
    else if (key == "phase_wrapped") cfg.phase_wrapped = parse_bool(key, value);
    else fail(ErrorCode::ConfigError, "unknown config key: " + key);
}

/// Parses `key = value` lines; '#' starts a comment, blank lines are
/// ignored, later assignments win.
inline TrainConfig parse_config(std::istream& is) {
    using config_detail::trim;
    TrainConfig cfg;
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        std::size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        std::size_t eq = line.find('=');
        require(eq != std::string::npos, ErrorCode::ConfigError,
                "line " + std::to_string(lineno) + " is not a key = value assignment");
        std::string key = trim(line.substr(0, eq));
        std::string value = trim(line.substr(eq + 1));
        require(!key.empty(), ErrorCode::ConfigError, "empty key on line " + std::to_string(lineno));
        apply_config_entry(cfg, key, value);
    }
    return cfg;
}

inline TrainConfig parse_config_text(const std::string& text) {
    std::istringstream is(text);
    return parse_config(is);
}

inline TrainConfig load_config(const std::string& path) {
    std::ifstream is(path);
    require(is.good(), ErrorCode::MissingFile, "cannot open config file " + path);
    return parse_config(is);
}

/// Fixed-order text form; parsing it reproduces the config exactly.
inline std::string canonical_config_text(const TrainConfig& cfg) {
    using config_detail::format_double;
    auto onoff = [](bool b) { return b ? "on" : "off"; };
    std::ostringstream os;
    os << "wavelet_levels = " << cfg.wavelet_levels << "\n";
    os << "guidance_scale = " << cfg.guidance_scale << "\n";
    os << "timesteps = " << cfg.timesteps << "\n";
    os << "schedule = " << to_string(cfg.schedule) << "\n";
    os << "beta_start = " << format_double(cfg.beta_start) << "\n";
    os << "beta_end = " << format_double(cfg.beta_end) << "\n";
    os << "sampling_steps = " << cfg.sampling_steps << "\n";
    os << "sampling_mode = " << to_string(cfg.sampling_mode) << "\n";
    os << "learning_rate = " << format_double(cfg.learning_rate) << "\n";
    os << "batch_size = " << cfg.batch_size << "\n";
    os << "patch_size = " << cfg.patch_size << "\n";
    os << "iterations = " << cfg.iterations << "\n";
    os << "theta1 = " << format_double(cfg.theta1) << "\n";
    os << "theta2 = " << format_double(cfg.theta2) << "\n";
    os << "gamma = " << format_double(cfg.gamma[0]) << "," << format_double(cfg.gamma[1]) << ","
       << format_double(cfg.gamma[2]) << "," << format_double(cfg.gamma[3]) << ","
       << format_double(cfg.gamma[4]) << "\n";
    os << "loss_vlg = " << onoff(cfg.loss_vlg) << "\n";
    os << "loss_hfpm = " << onoff(cfg.loss_hfpm) << "\n";
    os << "loss_content = " << onoff(cfg.loss_content) << "\n";
    os << "hfpm_version = " << to_string(cfg.hfpm_version) << "\n";
    os << "vlg_mode = " << to_string(cfg.vlg_mode) << "\n";
    os << "prompt_positive = " << cfg.prompt_positive << "\n";
    os << "prompt_negative = " << cfg.prompt_negative << "\n";
    os << "seed = " << cfg.seed << "\n";
    os << "base_channels = " << cfg.base_channels << "\n";
    os << "denoiser_levels = " << cfg.denoiser_levels << "\n";
    os << "hfpm_width = " << cfg.hfpm_width << "\n";
    os << "checkpoint_interval = " << cfg.checkpoint_interval << "\n";
    os << "augment_flip = " << onoff(cfg.augment_flip) << "\n";
    os << "phase_wrapped = " << onoff(cfg.phase_wrapped) << "\n";
    return os.str();
}

/// Rejects configs that cannot train: the patch must survive K analysis
/// halvings and the retained band must divide through the denoiser stages.
inline void validate_config(const TrainConfig& cfg) {
    auto check = [](bool ok, const std::string& msg) { require(ok, ErrorCode::ConfigError, msg); };
    check(cfg.wavelet_levels >= 1, "wavelet_levels must be >= 1");
    check(cfg.guidance_scale >= 0 && cfg.guidance_scale <= 3, "guidance_scale must be in 0..3");
    check(cfg.timesteps >= 1, "timesteps must be >= 1");
    check(cfg.beta_start > 0.0 && cfg.beta_end < 1.0 && cfg.beta_start <= cfg.beta_end,
          "beta range must satisfy 0 < beta_start <= beta_end < 1");
    check(cfg.sampling_steps >= 1 && cfg.sampling_steps <= cfg.timesteps,
          "sampling_steps must be in 1..timesteps");
    check(cfg.learning_rate > 0.0, "learning_rate must be positive");
    check(cfg.batch_size >= 1, "batch_size must be >= 1");
    check(cfg.patch_size >= 16, "patch_size must be >= 16");
    check(cfg.patch_size % (1 << cfg.wavelet_levels) == 0,
          "patch_size must be divisible by 2^wavelet_levels");
    check((cfg.patch_size >> cfg.wavelet_levels) % (1 << cfg.denoiser_levels) == 0,
          "patch_size / 2^wavelet_levels must be divisible by 2^denoiser_levels");
    check(cfg.iterations >= 1, "iterations must be >= 1");
    check(cfg.theta1 >= 0.0 && cfg.theta2 >= 0.0, "theta weights must be non-negative");
    for (double g : cfg.gamma) check(g >= 0.0, "gamma weights must be non-negative");
    check(cfg.base_channels >= 1, "base_channels must be >= 1");
    check(cfg.denoiser_levels >= 1, "denoiser_levels must be >= 1");
    check(cfg.hfpm_width >= 1, "hfpm_width must be >= 1");
    check(cfg.checkpoint_interval >= 0, "checkpoint_interval must be >= 0");
}

// ---------------------------------------------------------------------------
// models and checkpoints

struct PipelineModels {
    DenoiserParams denoiser;
    HfpmParams hfpm;
    NoiseSchedule schedule;
};

/// Fresh models for `channels`-channel images, seeded from the config.
inline PipelineModels init_models(const TrainConfig& cfg, int channels) {
    validate_config(cfg);
    PipelineModels m;
    m.denoiser = init_denoiser(cfg.seed, DenoiserConfig{channels, cfg.base_channels, cfg.denoiser_levels});
    m.hfpm = init_hfpm(cfg.seed, HfpmConfig{channels, cfg.hfpm_width});
    m.schedule = make_schedule(cfg.timesteps, cfg.beta_start, cfg.beta_end, cfg.schedule);
    return m;
}

struct Checkpoint {
    TrainConfig config;
    long iteration = 0;
    int channels = 0;
    DenoiserParams denoiser;
    HfpmParams hfpm;
    NoiseSchedule schedule;
};

inline constexpr char kCheckpointMagic[9] = "CFWDCKP1";
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline Checkpoint make_checkpoint(const TrainConfig& cfg, long iteration, const PipelineModels& models) {
    Checkpoint ck;
    ck.config = cfg;
    ck.iteration = iteration;
    ck.channels = models.denoiser.config.in_channels;
    ck.denoiser = models.denoiser;
    ck.hfpm = models.hfpm;
    ck.schedule = models.schedule;
    return ck;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
    std::ofstream os(path, std::ios::binary);
    require(os.good(), ErrorCode::WriteFailure, "cannot open checkpoint for writing: " + path);
    os.write(kCheckpointMagic, 8);
    ser::write_u32(os, kCheckpointVersion);
    ser::write_string(os, canonical_config_text(ck.config));
    ser::write_i64(os, ck.iteration);
    ser::write_i64(os, ck.channels);
    ser::write_string(os, ck.denoiser.fingerprint);
    ser::write_param_store(os, ck.denoiser.store);
    ser::write_string(os, ck.hfpm.fingerprint);
    ser::write_param_store(os, ck.hfpm.store);
    require(os.good(), ErrorCode::WriteFailure, "failed writing checkpoint " + path);
}

/// Loads and cross-checks a checkpoint: the stored fingerprints must match
/// ones recomputed from the stored config and parameters.
inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    require(is.good(), ErrorCode::MissingFile, "cannot open checkpoint " + path);
    char magic[8] = {};
    is.read(magic, 8);
    require(is.good() && std::string(magic, 8) == std::string(kCheckpointMagic, 8), ErrorCode::CorruptData,
            "not a checkpoint file: " + path);
    std::uint32_t version = ser::read_u32(is);
    require(version == kCheckpointVersion, ErrorCode::CorruptData,
            "unsupported checkpoint format version " + std::to_string(version));
    Checkpoint ck;
    ck.config = parse_config_text(ser::read_string(is));
    validate_config(ck.config);
    ck.iteration = static_cast<long>(ser::read_i64(is));
    ck.channels = static_cast<int>(ser::read_i64(is));
    require(ck.channels >= 1, ErrorCode::CorruptData, "checkpoint channel count must be >= 1");

    ck.denoiser.config =
        DenoiserConfig{ck.channels, ck.config.base_channels, ck.config.denoiser_levels};
    std::string stored_dn = ser::read_string(is);
    ck.denoiser.store = ser::read_param_store(is);
    ck.denoiser.fingerprint = denoiser_fingerprint(ck.denoiser.config, ck.denoiser.store);
    require(ck.denoiser.fingerprint == stored_dn, ErrorCode::CheckpointMismatch,
            "denoiser parameters do not match the checkpoint descriptor");

    ck.hfpm.config = HfpmConfig{ck.channels, ck.config.hfpm_width};
    std::string stored_hf = ser::read_string(is);
    ck.hfpm.store = ser::read_param_store(is);
    ck.hfpm.fingerprint = hfpm_fingerprint(ck.hfpm.config, ck.hfpm.store);
    require(ck.hfpm.fingerprint == stored_hf, ErrorCode::CheckpointMismatch,
            "detail enhancer parameters do not match the checkpoint descriptor");

    ck.schedule = make_schedule(ck.config.timesteps, ck.config.beta_start, ck.config.beta_end,
                                ck.config.schedule);
    return ck;
}

// ---------------------------------------------------------------------------
// losses

/// K analysis levels scale the retained band by 2^K relative to pixel
/// intensities. Diffusion runs on a unit-range latent instead: with the band
/// fed in raw, the standard-normal prior the sampler starts from would sit
/// far off the forward process's t=T marginal and the learned predictor
/// (unlike the analytic oracle) does not extrapolate off that manifold.
inline Tensor to_latent(const Tensor& band, int levels) {
    Tensor out = band;
    double f = std::ldexp(1.0, -levels);
    for (auto& v : out.data) v *= f;
    return out;
}

inline Tensor from_latent(const Tensor& latent, int levels) {
    Tensor out = latent;
    double f = std::ldexp(1.0, levels);
    for (auto& v : out.data) v *= f;
    return out;
}

/// Noise-prediction plus latent-reconstruction error at one uniformly drawn
/// timestep.
inline double diffusion_loss(const Tensor& x0, const Tensor& condition, const DenoiserFn& denoiser,
                             const NoiseSchedule& s, Rng& rng) {
    check_same_shape(x0, condition, "diffusion condition");
    int step = static_cast<int>(rng.uniform_int(1, s.T));
    Tensor eps = randn(x0.shape, rng);
    Tensor x_t = q_sample(x0, step, eps, s);
    Tensor eps_hat = denoiser(x_t, condition, step);
    check_same_shape(eps_hat, eps, "denoiser output");
    Tensor x0_hat = predict_x0(x_t, eps_hat, step, s);
    double noise_term = 0.0, recon_term = 0.0;
    for (long i = 0; i < eps.numel(); ++i) {
        double de = eps_hat[i] - eps[i];
        double dx = x0_hat[i] - x0[i];
        noise_term += de * de;
        recon_term += dx * dx;
    }
    double n = static_cast<double>(eps.numel());
    return noise_term / n + recon_term / n;
}

namespace ad {

/// Stage-weighted feature distance plus structural dissimilarity between an
/// enhanced image and its reference.
inline Var content_loss(Tape& t, Var enhanced, Var reference, const Embedder& emb,
                        const std::array<double, 5>& gamma) {
    check_same_shape(t.val(enhanced), t.val(reference), "content loss inputs");
    std::vector<Var> fe = emb.image_features(t, enhanced);
    std::vector<Var> fr = emb.image_features(t, reference);
    require(fe.size() == gamma.size() && fr.size() == gamma.size(), ErrorCode::ShapeMismatch,
            "feature pyramid must have one map per stage weight");
    Var total = t.constant(Tensor({1}));
    for (std::size_t l = 0; l < gamma.size(); ++l)
        total = add(t, total, scale(t, mse_loss(t, fe[l], fr[l]), gamma[l]));
    return add(t, total, affine(t, ssim_ad(t, enhanced, reference), -1.0, 1.0));
}

/// Scalar terms of one training step; total is the sum of the four parts.
struct LossTerms {
    Var total;
    Var diffusion;
    Var vlg;
    Var spectral;
    Var content;
};

/// Tape-level noise predictor: (x_t, condition, timestep) -> predicted noise.
using TapeDenoiser = std::function<Var(Tape&, Var, Var, int)>;

inline TapeDenoiser bound_denoiser(const BoundParams& p, const DenoiserConfig& cfg) {
    return [&p, cfg](Tape& t, Var x_t, Var cond, int step) {
        return predict_noise(t, p, x_t, cond, step, cfg);
    };
}

/// Full training objective over a batch of paired patches. Per sample: the
/// reference pyramid's retained band is noised at one uniform timestep and
/// denoised conditioned on the degraded band; the one-shot latent estimate is
/// reconstructed through the enhanced detail bands into a preview image that
/// feeds the guidance and content terms, while the enhanced bands also feed
/// the spectral term. Terms are averaged over the batch.
inline LossTerms total_loss(Tape& t, const TapeDenoiser& denoiser, const BoundParams& enhancer,
                            const TrainConfig& cfg, const NoiseSchedule& s, const Embedder& emb,
                            const PromptPair& prompts, const std::vector<PairedSample>& batch,
                            Rng& rng) {
    require(!batch.empty(), ErrorCode::EmptyList, "training batch is empty");
    const int K = cfg.wavelet_levels;
    Var zero = t.constant(Tensor({1}));
    Var acc_diff = zero, acc_vlg = zero, acc_spec = zero, acc_content = zero;
    for (const PairedSample& sample : batch) {
        check_same_shape(sample.low, sample.high, "training pair");
        WaveletPyramid lo = decompose(sample.low, K);
        WaveletPyramid hi = decompose(sample.high, K);

        Tensor hi_lat = to_latent(hi.approx, K);
        int step = static_cast<int>(rng.uniform_int(1, s.T));
        Tensor eps = randn(hi_lat.shape, rng);
        Var x_t = t.constant(q_sample(hi_lat, step, eps, s));
        Var eps_hat = denoiser(t, x_t, t.constant(to_latent(lo.approx, K)), step);
        check_same_shape(t.val(eps_hat), eps, "noise prediction");
        Var x0_hat = predict_x0(t, x_t, eps_hat, step, s);
        Var diff = add(t, mse_loss(t, eps_hat, t.constant(eps)),
                       mse_loss(t, x0_hat, t.constant(hi_lat)));
        acc_diff = add(t, acc_diff, diff);

        std::vector<TripleVars> enhanced;
        enhanced.reserve(static_cast<std::size_t>(K));
        for (int k = 1; k <= K; ++k) {
            const SubbandTriple& tr = lo.details[static_cast<std::size_t>(k - 1)];
            enhanced.push_back(
                enhance_details(t, enhancer, t.constant(tr.V), t.constant(tr.H), t.constant(tr.D)));
        }
        if (cfg.loss_hfpm) {
            Var spec = hfpm_loss_enhanced(t, enhanced, lo, hi, cfg.hfpm_version, cfg.theta1,
                                          cfg.theta2, cfg.phase_wrapped);
            acc_spec = add(t, acc_spec, spec);
        }

        // One-shot preview: reconstruct the latent estimate (back at band
        // scale) through the enhanced detail bands, keeping each
        // intermediate retained band.
        std::vector<Var> chain(static_cast<std::size_t>(K));
        Var cur = scale(t, x0_hat, std::ldexp(1.0, K));
        for (int k = K; k >= 1; --k) {
            chain[static_cast<std::size_t>(k - 1)] = cur;
            const TripleVars& e = enhanced[static_cast<std::size_t>(k - 1)];
            cur = idwt2(t, cur, e.V, e.H, e.D);
        }
        Var preview = clamp(t, cur, 0.0, 1.0);

        if (cfg.loss_vlg && cfg.guidance_scale >= 1) {
            Var g = similarity_loss_2(t, preview, prompts, emb);
            if (cfg.guidance_scale >= 2) {
                std::vector<Var> rescaled;
                if (cfg.guidance_scale == 2) {
                    rescaled.push_back(rescale_approximation(t, chain[static_cast<std::size_t>(K - 1)], K));
                } else {
                    for (int k = 1; k <= K; ++k)
                        rescaled.push_back(
                            rescale_approximation(t, chain[static_cast<std::size_t>(k - 1)], k));
                }
                g = add(t, similarity_loss_1(t, rescaled, prompts, emb, cfg.vlg_mode), g);
            }
            acc_vlg = add(t, acc_vlg, g);
        }

        if (cfg.loss_content)
            acc_content = add(t, acc_content,
                              content_loss(t, preview, t.constant(sample.high), emb, cfg.gamma));
    }
    double inv = 1.0 / static_cast<double>(batch.size());
    LossTerms terms;
    terms.diffusion = scale(t, acc_diff, inv);
    terms.vlg = scale(t, acc_vlg, inv);
    terms.spectral = scale(t, acc_spec, inv);
    terms.content = scale(t, acc_content, inv);
    terms.total = add(t, add(t, add(t, terms.diffusion, terms.vlg), terms.spectral), terms.content);
    return terms;
}

}  // namespace ad

/// Plain evaluation (no gradients).
inline double content_loss(const Tensor& enhanced, const Tensor& reference, const Embedder& emb,
                           const std::array<double, 5>& gamma) {
    ad::Tape t;
    return t.val(ad::content_loss(t, t.constant(enhanced), t.constant(reference), emb, gamma))[0];
}

// ---------------------------------------------------------------------------
// training loop

struct TrainResult {
    std::string checkpoint_path;                 // final checkpoint
    std::string log_path;                        // per-iteration loss CSV
    std::vector<std::string> checkpoint_paths;   // interval checkpoints + final
};

namespace train_detail {

inline std::string loss_row(long iteration, double total, double diffusion, double vlg,
                            double spectral, double content) {
    using config_detail::format_double;
    std::ostringstream os;
    os << iteration << ',' << format_double(total) << ',' << format_double(diffusion) << ','
       << format_double(vlg) << ',' << format_double(spectral) << ',' << format_double(content);
    return os.str();
}

inline void dump_nonfinite(const std::string& path, long iteration, double total, double diffusion,
                           double vlg, double spectral, double content,
                           const PipelineModels& models) {
    std::ofstream os(path);
    os << "non-finite training loss\n";
    os << "iteration: " << iteration << "\n";
    os << "total: " << total << "\n";
    os << "diffusion: " << diffusion << "\n";
    os << "vlg: " << vlg << "\n";
    os << "spectral: " << spectral << "\n";
    os << "content: " << content << "\n";
    os << "denoiser parameters finite: " << (models.denoiser.store.all_finite_params() ? "yes" : "no")
       << "\n";
    os << "enhancer parameters finite: " << (models.hfpm.store.all_finite_params() ? "yes" : "no")
       << "\n";
}

}  // namespace train_detail

/// Optimizes the given models in place. Each iteration draws a batch of
/// random patches, evaluates the full objective, and applies one joint Adam
/// step to both parameter stores. Losses stream to `<out_dir>/loss_log.csv`;
/// checkpoints land in out_dir. Runs are deterministic for a fixed config.
inline TrainResult train_loop(PipelineModels& models, const TrainConfig& cfg, const Dataset& data,
                              const Embedder& emb, const std::string& out_dir) {
    namespace fs = std::filesystem;
    validate_config(cfg);
    require(data.size() > 0, ErrorCode::EmptyDataset, "training dataset is empty");
    fs::create_directories(out_dir);

    std::string log_path = (fs::path(out_dir) / "loss_log.csv").string();
    std::ofstream log(log_path, std::ios::binary);
    require(log.good(), ErrorCode::WriteFailure, "cannot open loss log " + log_path);
    log << "iteration,total,diffusion,vlg,spectral,content\n";

    PromptPair prompts{cfg.prompt_positive, cfg.prompt_negative, {}, {}};
    if (cfg.loss_vlg && cfg.guidance_scale >= 1) prompt_embeddings(emb, prompts);  // fail fast

    // Desk-scale corpora fit in memory; larger ones load lazily per draw.
    std::vector<PairedSample> cache;
    if (data.size() <= 64)
        for (std::size_t i = 0; i < data.size(); ++i) cache.push_back(data.load_pair(i));

    Rng rng = Rng::derive(cfg.seed, 0x7E41ULL);
    ad::Adam opt_denoiser(cfg.learning_rate);
    ad::Adam opt_enhancer(cfg.learning_rate);
    TrainResult result;
    result.log_path = log_path;

    for (long it = 1; it <= cfg.iterations; ++it) {
        std::vector<PairedSample> batch;
        batch.reserve(static_cast<std::size_t>(cfg.batch_size));
        for (int b = 0; b < cfg.batch_size; ++b) {
            std::size_t idx = static_cast<std::size_t>(
                rng.uniform_int(0, static_cast<std::int64_t>(data.size()) - 1));
            PairedSample patch = cache.empty()
                                     ? sample_patch_pair(data.load_pair(idx), cfg.patch_size, rng)
                                     : sample_patch_pair(cache[idx], cfg.patch_size, rng);
            if (cfg.augment_flip && rng.uniform() < 0.5) {
                patch.low = flip_horizontal(patch.low);
                patch.high = flip_horizontal(patch.high);
            }
            batch.push_back(std::move(patch));
        }

        ad::Tape t;
        ad::BoundParams dn = ad::bind(t, models.denoiser.store);
        ad::BoundParams hf = ad::bind(t, models.hfpm.store);
        ad::LossTerms terms = ad::total_loss(t, ad::bound_denoiser(dn, models.denoiser.config), hf,
                                             cfg, models.schedule, emb, prompts, batch, rng);
        double v_total = t.val(terms.total)[0];
        double v_diff = t.val(terms.diffusion)[0];
        double v_vlg = t.val(terms.vlg)[0];
        double v_spec = t.val(terms.spectral)[0];
        double v_content = t.val(terms.content)[0];
        if (!std::isfinite(v_total)) {
            std::string dump = (fs::path(out_dir) / "nonfinite_dump.txt").string();
            train_detail::dump_nonfinite(dump, it, v_total, v_diff, v_vlg, v_spec, v_content, models);
            fail(ErrorCode::NonFiniteLoss, "non-finite training loss at iteration " +
                                               std::to_string(it) + "; diagnostics in " + dump);
        }
        t.backward(terms.total);

        std::vector<Tensor> grad_dn, grad_hf;
        grad_dn.reserve(dn.vars.size());
        grad_hf.reserve(hf.vars.size());
        for (ad::Var v : dn.vars) grad_dn.push_back(t.grad(v));
        for (ad::Var v : hf.vars) grad_hf.push_back(t.grad(v));
        opt_denoiser.step(models.denoiser.store, grad_dn);
        opt_enhancer.step(models.hfpm.store, grad_hf);
        models.denoiser.fingerprint = denoiser_fingerprint(models.denoiser.config, models.denoiser.store);
        models.hfpm.fingerprint = hfpm_fingerprint(models.hfpm.config, models.hfpm.store);

        log << train_detail::loss_row(it, v_total, v_diff, v_vlg, v_spec, v_content) << "\n";

        if (cfg.checkpoint_interval > 0 && it % cfg.checkpoint_interval == 0 && it != cfg.iterations) {
            char name[32];
            std::snprintf(name, sizeof(name), "ckpt_%06ld.bin", it);
            std::string path = (fs::path(out_dir) / name).string();
            save_checkpoint(path, make_checkpoint(cfg, it, models));
            result.checkpoint_paths.push_back(path);
        }
    }
    log.flush();
    require(log.good(), ErrorCode::WriteFailure, "failed writing loss log " + log_path);

    result.checkpoint_path = (fs::path(out_dir) / "checkpoint.bin").string();
    save_checkpoint(result.checkpoint_path, make_checkpoint(cfg, cfg.iterations, models));
    result.checkpoint_paths.push_back(result.checkpoint_path);
    return result;
}

/// Initializes fresh models sized for the dataset's channel count and trains
/// them from scratch.
inline TrainResult train(const TrainConfig& cfg, const Dataset& data, const Embedder& emb,
                         const std::string& out_dir) {
    validate_config(cfg);
    PairedSample first = data.load_pair(0);
    PipelineModels models = init_models(cfg, first.low.channels());
    return train_loop(models, cfg, data, emb, out_dir);
}

// ---------------------------------------------------------------------------
// enhancement

/// Mirrors the bottom and right edges (edge pixel included) so each padded
/// dimension reaches the next multiple required downstream.
inline Tensor reflect_pad_bottom_right(const Tensor& img, int pad_h, int pad_w) {
    require(img.rank() == 3, ErrorCode::ShapeMismatch, "reflect pad expects HWC");
    int h = img.height(), w = img.width(), c = img.channels();
    require(pad_h >= 0 && pad_w >= 0, ErrorCode::InvalidArgument, "negative padding");
    require(pad_h <= h && pad_w <= w, ErrorCode::ImageTooSmall,
            "image too small to mirror-pad to a working size");
    Tensor out({h + pad_h, w + pad_w, c});
    for (int y = 0; y < h + pad_h; ++y) {
        int sy = y < h ? y : 2 * h - 1 - y;
        for (int x = 0; x < w + pad_w; ++x) {
            int sx = x < w ? x : 2 * w - 1 - x;
            for (int ch = 0; ch < c; ++ch)
                out[(static_cast<long>(y) * (w + pad_w) + x) * c + ch] =
                    img[(static_cast<long>(sy) * w + sx) * c + ch];
        }
    }
    return out;
}

namespace pipeline_detail {

inline Tensor crop_top_left(const Tensor& img, int h, int w) {
    int c = img.channels();
    Tensor out({h, w, c});
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int ch = 0; ch < c; ++ch)
                out[(static_cast<long>(y) * w + x) * c + ch] =
                    img[(static_cast<long>(y) * img.width() + x) * c + ch];
    return out;
}

inline DenoiserFn checkpoint_denoiser(const Checkpoint& ck) {
    return [&ck](const Tensor& x_t, const Tensor& cond, int step) {
        ad::Tape t;
        ad::BoundParams p = ad::bind(t, ck.denoiser.store, false);
        ad::Var out = ad::predict_noise(t, p, t.constant(x_t), t.constant(cond), step,
                                        ck.denoiser.config);
        return t.val(out);
    };
}

}  // namespace pipeline_detail

/// Enhances one low-light image: decompose, sample a restored retained band
/// conditioned on the degraded one, enhance the detail bands, reconstruct,
/// and clamp. Non-divisible sizes are mirror-padded and cropped back.
/// Deterministic for a fixed seed.
inline Tensor enhance(const Tensor& low, const Checkpoint& ck, std::uint64_t seed) {
    require(low.rank() == 3, ErrorCode::ShapeMismatch, "enhance expects an HWC image");
    require(low.channels() == ck.channels, ErrorCode::ShapeMismatch,
            "image channel count does not match the checkpoint");
    const TrainConfig& cfg = ck.config;
    const int K = cfg.wavelet_levels;
    int div = 1 << (K + cfg.denoiser_levels);
    int h = low.height(), w = low.width();
    int pad_h = (div - h % div) % div;
    int pad_w = (div - w % div) % div;
    Tensor padded = reflect_pad_bottom_right(low, pad_h, pad_w);

    WaveletPyramid pyr = decompose(padded, K);
    DenoiserFn fn = pipeline_detail::checkpoint_denoiser(ck);
    Rng rng = Rng::derive(seed, 0xE4A9CEULL);
    Tensor latent = sample(fn, to_latent(pyr.approx, K), ck.schedule, cfg.sampling_steps,
                           cfg.sampling_mode, rng);

    WaveletPyramid out;
    out.levels = K;
    out.approx = from_latent(latent, K);
    out.details.reserve(static_cast<std::size_t>(K));
    for (int k = 1; k <= K; ++k)
        out.details.push_back(enhance_details(pyr.details[static_cast<std::size_t>(k - 1)], ck.hfpm));

    Tensor img = reconstruct(out);
    for (double& v : img.data) v = std::clamp(v, 0.0, 1.0);
    if (pad_h == 0 && pad_w == 0) return img;
    return pipeline_detail::crop_top_left(img, h, w);
}

// ---------------------------------------------------------------------------
// evaluation

struct MetricsRow {
    std::string name;
    double psnr = 0.0;
    double ssim = 0.0;
};

struct MetricsReport {
    std::vector<MetricsRow> rows;
    double mean_psnr = 0.0;
    double mean_ssim = 0.0;
    std::string checkpoint_fingerprint;
    std::string timestamp;
};

/// Stable per-item seed stream for evaluation (splitmix64 mixing).
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t index) {
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (index + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

/// Enhances every degraded image and scores it against its reference.
inline MetricsReport evaluate(const Dataset& data, const Checkpoint& ck, std::uint64_t seed) {
    MetricsReport report;
    double sum_psnr = 0.0, sum_ssim = 0.0;
    for (std::size_t i = 0; i < data.size(); ++i) {
        PairedSample pair = data.load_pair(i);
        Tensor out = enhance(pair.low, ck, mix_seed(seed, i));
        MetricsRow row;
        row.name = pair.identifier;
        row.psnr = psnr(out, pair.high);
        row.ssim = ssim(out, pair.high);
        sum_psnr += row.psnr;
        sum_ssim += row.ssim;
        report.rows.push_back(std::move(row));
    }
    double n = static_cast<double>(report.rows.size());
    report.mean_psnr = sum_psnr / n;
    report.mean_ssim = sum_ssim / n;
    report.checkpoint_fingerprint = ck.denoiser.fingerprint + " | " + ck.hfpm.fingerprint;
    std::time_t now = std::time(nullptr);
    char stamp[32];
    std::strftime(stamp, sizeof(stamp), "%Y-%m-%d %H:%M:%S UTC", std::gmtime(&now));
    report.timestamp = stamp;
    return report;
}

/// Per-image rows plus a final mean row. Deterministic: no timestamp.
inline void write_metrics_csv(const MetricsReport& report, std::ostream& os) {
    using config_detail::format_double;
    os << "name,psnr,ssim\n";
    for (const MetricsRow& row : report.rows)
        os << row.name << ',' << format_double(row.psnr) << ',' << format_double(row.ssim) << "\n";
    os << "mean," << format_double(report.mean_psnr) << ',' << format_double(report.mean_ssim) << "\n";
}

inline void write_metrics_csv(const MetricsReport& report, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    require(os.good(), ErrorCode::WriteFailure, "cannot open report " + path);
    write_metrics_csv(report, os);
    os.flush();
    require(os.good(), ErrorCode::WriteFailure, "failed writing report " + path);
}

/// Human-readable aligned table with provenance footer.
inline std::string format_metrics_table(const MetricsReport& report) {
    std::size_t name_w = 5;
    for (const MetricsRow& row : report.rows) name_w = std::max(name_w, row.name.size());
    std::ostringstream os;
    char line[160];
    std::snprintf(line, sizeof(line), "%-*s  %12s  %8s\n", static_cast<int>(name_w), "image",
                  "psnr (dB)", "ssim");
    os << line << std::string(name_w + 24, '-') << "\n";
    for (const MetricsRow& row : report.rows) {
        std::snprintf(line, sizeof(line), "%-*s  %12.4f  %8.4f\n", static_cast<int>(name_w),
                      row.name.c_str(), row.psnr, row.ssim);
        os << line;
    }
    os << std::string(name_w + 24, '-') << "\n";
    std::snprintf(line, sizeof(line), "%-*s  %12.4f  %8.4f\n", static_cast<int>(name_w), "mean",
                  report.mean_psnr, report.mean_ssim);
    os << line;
    os << "checkpoint: " << report.checkpoint_fingerprint << "\n";
    os << "generated: " << report.timestamp << "\n";
    return os.str();
}

}  // namespace cfwd
