#ifndef CFWD_TENSOR_HPP
#define CFWD_TENSOR_HPP

#include <algorithm>
#include <cstddef>
#include <numeric>
#include <sstream>
#include <vector>

#include "cfwd/common.hpp"

namespace cfwd {

/// Dense row-major tensor of doubles. Images use HWC layout with values
/// in [0,1]; network activations and wavelet bands are unbounded.
struct Tensor {
    std::vector<int> shape;
    std::vector<double> data;

    Tensor() = default;
    explicit Tensor(std::vector<int> s) : shape(std::move(s)), data(numel_of(shape), 0.0) {}
    Tensor(std::vector<int> s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
        require(data.size() == static_cast<std::size_t>(numel_of(shape)), ErrorCode::ShapeMismatch,
                "tensor data size does not match shape");
    }

    static long numel_of(const std::vector<int>& s) {
        long n = 1;
        for (int d : s) {
            require(d >= 0, ErrorCode::InvalidArgument, "negative dimension");
            n *= d;
        }
        return n;
    }

    long numel() const { return static_cast<long>(data.size()); }
    bool empty() const { return data.empty(); }

    int dim(int i) const { return shape.at(static_cast<std::size_t>(i)); }
    int rank() const { return static_cast<int>(shape.size()); }

    // HWC accessors
    int height() const { return shape.at(0); }
    int width() const { return shape.at(1); }
    int channels() const { return rank() >= 3 ? shape.at(2) : 1; }

    double& at(int y, int x, int c) { return data[(static_cast<long>(y) * width() + x) * channels() + c]; }
    double at(int y, int x, int c) const { return data[(static_cast<long>(y) * width() + x) * channels() + c]; }

    double& operator[](long i) { return data[static_cast<std::size_t>(i)]; }
    double operator[](long i) const { return data[static_cast<std::size_t>(i)]; }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    Tensor reshaped(std::vector<int> s) const {
        require(numel_of(s) == numel(), ErrorCode::ShapeMismatch, "reshape changes element count");
        return Tensor(std::move(s), data);
    }

    std::string shape_str() const {
        std::ostringstream os;
        os << '(';
        for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
        os << ')';
        return os.str();
    }
};

inline Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }

inline Tensor full(std::vector<int> shape, double value) {
    Tensor t(std::move(shape));
    std::fill(t.data.begin(), t.data.end(), value);
    return t;
}

inline Tensor scalar_tensor(double value) { return Tensor({1}, {value}); }

inline Tensor randn(std::vector<int> shape, Rng& rng) {
    Tensor t(std::move(shape));
    for (auto& v : t.data) v = rng.normal();
    return t;
}

inline Tensor rand_uniform(std::vector<int> shape, Rng& rng, double lo = 0.0, double hi = 1.0) {
    Tensor t(std::move(shape));
    for (auto& v : t.data) v = lo + (hi - lo) * rng.uniform();
    return t;
}

inline bool all_finite(const Tensor& t) {
    return std::all_of(t.data.begin(), t.data.end(), [](double v) { return std::isfinite(v); });
}

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* what) {
    require(a.same_shape(b), ErrorCode::ShapeMismatch,
            std::string(what) + ": " + a.shape_str() + " vs " + b.shape_str());
}

inline double mean_of(const Tensor& t) {
    require(!t.empty(), ErrorCode::EmptyList, "mean of empty tensor");
    return std::accumulate(t.data.begin(), t.data.end(), 0.0) / static_cast<double>(t.numel());
}

inline double sum_of(const Tensor& t) { return std::accumulate(t.data.begin(), t.data.end(), 0.0); }

inline double mse(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "mse");
    double acc = 0.0;
    for (long i = 0; i < a.numel(); ++i) {
        double d = a[i] - b[i];
        acc += d * d;
    }
    return acc / static_cast<double>(a.numel());
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "max_abs_diff");
    double m = 0.0;
    for (long i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

inline double squared_norm(const Tensor& t) {
    double acc = 0.0;
    for (double v : t.data) acc += v * v;
    return acc;
}

inline Tensor clamp01(Tensor t) {
    for (auto& v : t.data) v = std::min(1.0, std::max(0.0, v));
    return t;
}

inline bool is_image_valued(const Tensor& t) {
    return std::all_of(t.data.begin(), t.data.end(),
                       [](double v) { return std::isfinite(v) && v >= 0.0 && v <= 1.0; });
}

}  // namespace cfwd

#endif  // CFWD_TENSOR_HPP
