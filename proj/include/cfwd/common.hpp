#ifndef CFWD_COMMON_HPP
#define CFWD_COMMON_HPP

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace cfwd {

enum class ErrorCode {
    MissingFile,
    UnsupportedFormat,
    CorruptData,
    WriteFailure,
    PatchTooLarge,
    ShapeMismatch,
    ImageTooSmall,
    OddDimensions,
    IndivisibleDimensions,
    InvalidRange,
    StepOutOfRange,
    StepCountInvalid,
    InvalidArchitecture,
    EmptyList,
    LevelMismatch,
    DegenerateEmbedding,
    EmptyDataset,
    NonFiniteLoss,
    CheckpointMismatch,
    ConfigError,
    InvalidArgument,
};

inline const char* error_code_name(ErrorCode c) {
    switch (c) {
        case ErrorCode::MissingFile: return "MissingFile";
        case ErrorCode::UnsupportedFormat: return "UnsupportedFormat";
        case ErrorCode::CorruptData: return "CorruptData";
        case ErrorCode::WriteFailure: return "WriteFailure";
        case ErrorCode::PatchTooLarge: return "PatchTooLarge";
        case ErrorCode::ShapeMismatch: return "ShapeMismatch";
        case ErrorCode::ImageTooSmall: return "ImageTooSmall";
        case ErrorCode::OddDimensions: return "OddDimensions";
        case ErrorCode::IndivisibleDimensions: return "IndivisibleDimensions";
        case ErrorCode::InvalidRange: return "InvalidRange";
        case ErrorCode::StepOutOfRange: return "StepOutOfRange";
        case ErrorCode::StepCountInvalid: return "StepCountInvalid";
        case ErrorCode::InvalidArchitecture: return "InvalidArchitecture";
        case ErrorCode::EmptyList: return "EmptyList";
        case ErrorCode::LevelMismatch: return "LevelMismatch";
        case ErrorCode::DegenerateEmbedding: return "DegenerateEmbedding";
        case ErrorCode::EmptyDataset: return "EmptyDataset";
        case ErrorCode::NonFiniteLoss: return "NonFiniteLoss";
        case ErrorCode::CheckpointMismatch: return "CheckpointMismatch";
        case ErrorCode::ConfigError: return "ConfigError";
        case ErrorCode::InvalidArgument: return "InvalidArgument";
    }
    return "Unknown";
}

class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& message)
        : std::runtime_error(std::string(error_code_name(code)) + ": " + message), code_(code) {}

    ErrorCode code() const { return code_; }

private:
    ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) {
    throw Error(code, message);
}

inline void require(bool cond, ErrorCode code, const std::string& message) {
    if (!cond) fail(code, message);
}

/// Seeded random source. All stochastic operations take one of these
/// explicitly so runs are reproducible end to end.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : gen_(seed) {}

    double normal() { return normal_(gen_); }
    double uniform() { return uniform_(gen_); }

    /// Uniform integer in [lo, hi] inclusive.
    std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
        return std::uniform_int_distribution<std::int64_t>(lo, hi)(gen_);
    }

    std::mt19937_64& engine() { return gen_; }

    /// Derives an independent stream, e.g. one per image during evaluation.
    static Rng derive(std::uint64_t seed, std::uint64_t stream) {
        // splitmix64 mixing of (seed, stream)
        std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        z = z ^ (z >> 31);
        return Rng(z);
    }

private:
    std::mt19937_64 gen_;
    std::normal_distribution<double> normal_{0.0, 1.0};
    std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

}  // namespace cfwd

#endif  // CFWD_COMMON_HPP
