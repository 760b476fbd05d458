#ifndef CFWD_DIFFUSION_HPP
#define CFWD_DIFFUSION_HPP

#include <cmath>
#include <functional>
#include <numbers>
#include <string>
#include <vector>

#include "cfwd/autodiff.hpp"
#include "cfwd/tensor.hpp"

namespace cfwd {

enum class ScheduleKind { Linear, Cosine };

inline std::string to_string(ScheduleKind k) { return k == ScheduleKind::Linear ? "linear" : "cosine"; }

inline ScheduleKind schedule_kind_from(const std::string& s) {
    if (s == "linear") return ScheduleKind::Linear;
    if (s == "cosine") return ScheduleKind::Cosine;
    fail(ErrorCode::InvalidArgument, "unknown schedule kind: " + s);
}

/// Variance schedule and its derived arrays. Index t-1 holds step t;
/// abar(0) is 1 by convention.
struct NoiseSchedule {
    ScheduleKind kind = ScheduleKind::Linear;
    int T = 0;
    double beta_start = 0.0;
    double beta_end = 0.0;
    std::vector<double> beta;       // beta_t
    std::vector<double> alpha;      // 1 - beta_t
    std::vector<double> alpha_bar;  // prod_{i<=t} alpha_i
    std::vector<double> sigma;      // sqrt(beta_t)

    double abar(int t) const {
        require(t >= 0 && t <= T, ErrorCode::StepOutOfRange, "abar step out of range");
        return t == 0 ? 1.0 : alpha_bar[static_cast<std::size_t>(t - 1)];
    }
    double beta_at(int t) const {
        require(t >= 1 && t <= T, ErrorCode::StepOutOfRange, "beta step out of range");
        return beta[static_cast<std::size_t>(t - 1)];
    }
    double alpha_at(int t) const {
        require(t >= 1 && t <= T, ErrorCode::StepOutOfRange, "alpha step out of range");
        return alpha[static_cast<std::size_t>(t - 1)];
    }
    double sigma_at(int t) const {
        require(t >= 1 && t <= T, ErrorCode::StepOutOfRange, "sigma step out of range");
        return sigma[static_cast<std::size_t>(t - 1)];
    }

    void finalize_from_beta() {
        alpha.resize(beta.size());
        alpha_bar.resize(beta.size());
        sigma.resize(beta.size());
        double prod = 1.0;
        for (std::size_t i = 0; i < beta.size(); ++i) {
            require(beta[i] > 0.0 && beta[i] < 1.0, ErrorCode::InvalidRange, "beta must lie in (0,1)");
            alpha[i] = 1.0 - beta[i];
            prod *= alpha[i];
            alpha_bar[i] = prod;
            sigma[i] = std::sqrt(beta[i]);
        }
    }
};

inline NoiseSchedule make_schedule(int T, double beta_start, double beta_end, ScheduleKind kind) {
    require(T >= 1, ErrorCode::InvalidRange, "schedule needs T >= 1");
    require(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0, ErrorCode::InvalidRange,
            "need 0 < beta_start <= beta_end < 1");
    NoiseSchedule s;
    s.kind = kind;
    s.T = T;
    s.beta_start = beta_start;
    s.beta_end = beta_end;
    s.beta.resize(static_cast<std::size_t>(T));
    if (kind == ScheduleKind::Linear) {
        for (int t = 0; t < T; ++t)
            s.beta[static_cast<std::size_t>(t)] =
                T == 1 ? beta_start : beta_start + (beta_end - beta_start) * t / (T - 1);
    } else {
        // squared-cosine alpha_bar profile, betas clipped to (0, 0.999]
        const double off = 0.008;
        auto f = [&](double u) {
            double v = std::cos((u + off) / (1.0 + off) * std::numbers::pi / 2.0);
            return v * v;
        };
        double prev = 1.0;
        for (int t = 1; t <= T; ++t) {
            double cur = f(static_cast<double>(t) / T) / f(0.0);
            double b = 1.0 - cur / prev;
            s.beta[static_cast<std::size_t>(t - 1)] = std::min(std::max(b, 1e-8), 0.999);
            prev = cur;
        }
    }
    s.finalize_from_beta();
    return s;
}

/// Closed-form forward process: sqrt(abar_t)*x0 + sqrt(1-abar_t)*eps.
inline Tensor q_sample(const Tensor& x0, int t, const Tensor& eps, const NoiseSchedule& s) {
    require(t >= 1 && t <= s.T, ErrorCode::StepOutOfRange, "q_sample step out of range");
    check_same_shape(x0, eps, "q_sample");
    double a = std::sqrt(s.abar(t)), b = std::sqrt(1.0 - s.abar(t));
    Tensor out(x0.shape);
    for (long i = 0; i < out.numel(); ++i) out[i] = a * x0[i] + b * eps[i];
    return out;
}

/// Inverts q_sample given a noise estimate: (x_t - sqrt(1-abar_t)*eps)/sqrt(abar_t).
inline Tensor predict_x0(const Tensor& x_t, const Tensor& eps_hat, int t, const NoiseSchedule& s) {
    require(t >= 1 && t <= s.T, ErrorCode::StepOutOfRange, "predict_x0 step out of range");
    check_same_shape(x_t, eps_hat, "predict_x0");
    double a = std::sqrt(s.abar(t)), b = std::sqrt(1.0 - s.abar(t));
    Tensor out(x_t.shape);
    for (long i = 0; i < out.numel(); ++i) out[i] = (x_t[i] - b * eps_hat[i]) / a;
    return out;
}

/// Reverse-step mean: (x_t - beta_t/sqrt(1-abar_t)*eps)/sqrt(alpha_t).
inline Tensor posterior_mean(const Tensor& x_t, const Tensor& eps_hat, int t, const NoiseSchedule& s) {
    require(t >= 1 && t <= s.T, ErrorCode::StepOutOfRange, "posterior_mean step out of range");
    check_same_shape(x_t, eps_hat, "posterior_mean");
    double c = s.beta_at(t) / std::sqrt(1.0 - s.abar(t));
    double inv = 1.0 / std::sqrt(s.alpha_at(t));
    Tensor out(x_t.shape);
    for (long i = 0; i < out.numel(); ++i) out[i] = inv * (x_t[i] - c * eps_hat[i]);
    return out;
}

enum class SampleMode { Ancestral, Implicit };

inline std::string to_string(SampleMode m) { return m == SampleMode::Ancestral ? "ancestral" : "implicit"; }

inline SampleMode sample_mode_from(const std::string& s) {
    if (s == "ancestral") return SampleMode::Ancestral;
    if (s == "implicit") return SampleMode::Implicit;
    fail(ErrorCode::InvalidArgument, "unknown sampling mode: " + s);
}

/// Noise predictor handle: eps_hat = f(x_t, condition, t).
using DenoiserFn = std::function<Tensor(const Tensor&, const Tensor&, int)>;

/// Descending, evenly spaced timesteps from T down to 1 (just {T} for
/// steps=1). Spacing >= 1 guarantees strictly decreasing values.
inline std::vector<int> sampling_timesteps(int T, int steps) {
    require(steps >= 1 && steps <= T, ErrorCode::StepCountInvalid, "steps must lie in [1, T]");
    std::vector<int> ts(static_cast<std::size_t>(steps));
    for (int i = 0; i < steps; ++i)
        ts[static_cast<std::size_t>(i)] =
            steps == 1 ? T : static_cast<int>(std::lround(T - static_cast<double>(i) * (T - 1) / (steps - 1)));
    return ts;
}

/// Conditional reverse process from pure noise. Implicit mode is the
/// deterministic non-Markovian update; ancestral mode injects sigma*z per
/// step using the stride-consistent variance 1 - abar(t)/abar(t_prev),
/// which reduces to beta_t at full step count.
inline Tensor sample(const DenoiserFn& denoiser, const Tensor& condition, const NoiseSchedule& s, int steps,
                     SampleMode mode, Rng& rng) {
    std::vector<int> ts = sampling_timesteps(s.T, steps);
    Tensor x = randn(condition.shape, rng);
    for (std::size_t i = 0; i < ts.size(); ++i) {
        int t = ts[i];
        int t_prev = i + 1 < ts.size() ? ts[i + 1] : 0;
        Tensor eps_hat = denoiser(x, condition, t);
        check_same_shape(eps_hat, x, "denoiser output");
        if (mode == SampleMode::Implicit) {
            Tensor x0 = predict_x0(x, eps_hat, t, s);
            double a = std::sqrt(s.abar(t_prev)), b = std::sqrt(1.0 - s.abar(t_prev));
            for (long j = 0; j < x.numel(); ++j) x[j] = a * x0[j] + b * eps_hat[j];
        } else {
            double abar_t = s.abar(t), abar_prev = s.abar(t_prev);
            // unit stride uses the stored per-step constants exactly
            double alpha_eff = t_prev == t - 1 ? s.alpha_at(t) : abar_t / abar_prev;
            double beta_eff = t_prev == t - 1 ? s.beta_at(t) : 1.0 - alpha_eff;
            double c = beta_eff / std::sqrt(1.0 - abar_t);
            double inv = 1.0 / std::sqrt(alpha_eff);
            for (long j = 0; j < x.numel(); ++j) x[j] = inv * (x[j] - c * eps_hat[j]);
            if (t_prev > 0) {
                double sig = std::sqrt(beta_eff);
                for (long j = 0; j < x.numel(); ++j) x[j] += sig * rng.normal();
            }
        }
        require(all_finite(x), ErrorCode::NonFiniteLoss, "sampler produced non-finite values");
    }
    return x;
}

namespace ad {

/// Tape version of predict_x0 for the training losses.
inline Var predict_x0(Tape& t, Var x_t, Var eps_hat, int step, const NoiseSchedule& s) {
    require(step >= 1 && step <= s.T, ErrorCode::StepOutOfRange, "predict_x0 step out of range");
    double a = std::sqrt(s.abar(step)), b = std::sqrt(1.0 - s.abar(step));
    return scale(t, sub(t, x_t, scale(t, eps_hat, b)), 1.0 / a);
}

}  // namespace ad

}  // namespace cfwd

#endif  // CFWD_DIFFUSION_HPP
