#ifndef CFWD_SERIALIZE_HPP
#define CFWD_SERIALIZE_HPP

#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>

#include "cfwd/nn.hpp"
#include "cfwd/tensor.hpp"

// Little-endian binary primitives for checkpoint files. Layout of every
// record type is documented in the README so other tools can parse them.

namespace cfwd::ser {

inline void write_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
    os.write(reinterpret_cast<const char*>(b), 4);
}

inline void write_i64(std::ostream& os, std::int64_t v) {
    auto u = static_cast<std::uint64_t>(v);
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((u >> (8 * i)) & 0xFF);
    os.write(reinterpret_cast<const char*>(b), 8);
}

inline void write_f64(std::ostream& os, double v) {
    std::uint64_t u;
    static_assert(sizeof(u) == sizeof(v));
    std::memcpy(&u, &v, 8);
    write_i64(os, static_cast<std::int64_t>(u));
}

inline void write_string(std::ostream& os, const std::string& s) {
    write_u32(os, static_cast<std::uint32_t>(s.size()));
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::uint32_t read_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    require(is.good(), ErrorCode::CorruptData, "truncated stream reading u32");
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return v;
}

inline std::int64_t read_i64(std::istream& is) {
    unsigned char b[8];
    is.read(reinterpret_cast<char*>(b), 8);
    require(is.good(), ErrorCode::CorruptData, "truncated stream reading i64");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return static_cast<std::int64_t>(v);
}

inline double read_f64(std::istream& is) {
    std::uint64_t u = static_cast<std::uint64_t>(read_i64(is));
    double v;
    std::memcpy(&v, &u, 8);
    return v;
}

inline std::string read_string(std::istream& is, std::uint32_t max_len = 1u << 20) {
    std::uint32_t n = read_u32(is);
    require(n <= max_len, ErrorCode::CorruptData, "string length out of bounds");
    std::string s(n, '\0');
    is.read(s.data(), static_cast<std::streamsize>(n));
    require(is.good() || n == 0, ErrorCode::CorruptData, "truncated stream reading string");
    return s;
}

/// Tensor record: u32 rank, i64 dims..., f64 data flat row-major.
inline void write_tensor(std::ostream& os, const Tensor& t) {
    write_u32(os, static_cast<std::uint32_t>(t.rank()));
    for (int d : t.shape) write_i64(os, d);
    for (long i = 0; i < t.numel(); ++i) write_f64(os, t[i]);
}

inline Tensor read_tensor(std::istream& is) {
    std::uint32_t rank = read_u32(is);
    require(rank <= 8, ErrorCode::CorruptData, "tensor rank out of bounds");
    std::vector<int> shape(rank);
    long numel = 1;
    for (auto& d : shape) {
        std::int64_t v = read_i64(is);
        require(v >= 1 && v <= (1 << 24), ErrorCode::CorruptData, "tensor dim out of bounds");
        d = static_cast<int>(v);
        numel *= d;
    }
    Tensor t(shape);
    for (long i = 0; i < numel; ++i) t[i] = read_f64(is);
    return t;
}

/// ParamStore payload: u32 entry count, then per entry (string name, tensor).
inline void write_param_store(std::ostream& os, const ad::ParamStore& ps) {
    write_u32(os, static_cast<std::uint32_t>(ps.entries.size()));
    for (const auto& [name, t] : ps.entries) {
        write_string(os, name);
        write_tensor(os, t);
    }
}

inline ad::ParamStore read_param_store(std::istream& is) {
    ad::ParamStore ps;
    std::uint32_t n = read_u32(is);
    require(n <= 1u << 16, ErrorCode::CorruptData, "parameter count out of bounds");
    for (std::uint32_t i = 0; i < n; ++i) {
        std::string name = read_string(is);
        ps.add(name, read_tensor(is));
    }
    return ps;
}

}  // namespace cfwd::ser

#endif  // CFWD_SERIALIZE_HPP
