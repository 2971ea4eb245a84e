#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "metakgr/autodiff.hpp"
#include "metakgr/error.hpp"

namespace metakgr {

/// Binary checkpoint layout, all integers and floats little-endian:
///   "MKGR" | u32 version | u64 seed | u64 param count
///   then per parameter, in store order:
///   u32 name length | name bytes | u32 rank | u64 dim... | f32 payload
/// Values are stored as float32 regardless of the in-memory scalar type.
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void put_bytes(std::ostream& os, const void* p, std::size_t n) {
    os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

template <class U>
void put_le(std::ostream& os, U v) {
    static_assert(std::is_integral_v<U>);
    unsigned char buf[sizeof(U)];
    for (std::size_t i = 0; i < sizeof(U); ++i) buf[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
    put_bytes(os, buf, sizeof(U));
}

inline void put_f32_le(std::ostream& os, float f) {
    std::uint32_t u;
    std::memcpy(&u, &f, 4);
    put_le<std::uint32_t>(os, u);
}

inline void get_bytes(std::istream& is, void* p, std::size_t n, const char* what) {
    is.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(is.gcount()) != n)
        throw FormatError(std::string("checkpoint truncated while reading ") + what);
}

template <class U>
U get_le(std::istream& is, const char* what) {
    static_assert(std::is_integral_v<U>);
    unsigned char buf[sizeof(U)];
    get_bytes(is, buf, sizeof(U), what);
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(buf[i]) << (8 * i);
    return v;
}

inline float get_f32_le(std::istream& is, const char* what) {
    const std::uint32_t u = get_le<std::uint32_t>(is, what);
    float f;
    std::memcpy(&f, &u, 4);
    return f;
}

} // namespace detail

template <class T>
void save_checkpoint(const ParamStore<T>& store, const std::string& path) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw FormatError("cannot open checkpoint for writing: " + path);
    detail::put_bytes(os, "MKGR", 4);
    detail::put_le<std::uint32_t>(os, kCheckpointVersion);
    detail::put_le<std::uint64_t>(os, store.seed());
    detail::put_le<std::uint64_t>(os, store.param_count());
    for (const auto& e : store.entries()) {
        detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(e.name.size()));
        detail::put_bytes(os, e.name.data(), e.name.size());
        detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(e.value.shape.size()));
        for (int d : e.value.shape) detail::put_le<std::uint64_t>(os, static_cast<std::uint64_t>(d));
        for (T x : e.value.v) detail::put_f32_le(os, static_cast<float>(x));
    }
    if (!os) throw FormatError("write failure on checkpoint: " + path);
}

/// Loads a checkpoint into a fresh store. Shapes come from the file; the
/// caller is responsible for checking them against the expected model.
template <class T>
ParamStore<T> load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("cannot open checkpoint: " + path);
    char magic[4];
    detail::get_bytes(is, magic, 4, "magic");
    if (std::memcmp(magic, "MKGR", 4) != 0) throw FormatError("bad checkpoint magic in " + path);
    const auto version = detail::get_le<std::uint32_t>(is, "version");
    if (version != kCheckpointVersion)
        throw FormatError("unsupported checkpoint version " + std::to_string(version));
    const auto seed = detail::get_le<std::uint64_t>(is, "seed");
    const auto count = detail::get_le<std::uint64_t>(is, "param count");
    ParamStore<T> store(seed);
    for (std::uint64_t k = 0; k < count; ++k) {
        const auto name_len = detail::get_le<std::uint32_t>(is, "name length");
        std::string name(name_len, '\0');
        detail::get_bytes(is, name.data(), name_len, "name");
        const auto rank = detail::get_le<std::uint32_t>(is, "rank");
        Shape shape(rank);
        for (auto& d : shape) {
            const auto dim = detail::get_le<std::uint64_t>(is, "dim");
            d = static_cast<int>(dim);
            if (d < 0 || static_cast<std::uint64_t>(d) != dim)
                throw FormatError("checkpoint dimension out of range");
        }
        const int idx = store.add(std::move(name), shape);
        auto& v = store.entry(idx).value.v;
        for (auto& x : v) x = static_cast<T>(detail::get_f32_le(is, "payload"));
    }
    // Trailing bytes mean the file does not match its own header.
    if (is.peek() != std::char_traits<char>::eof())
        throw FormatError("checkpoint has trailing bytes: " + path);
    return store;
}

} // namespace metakgr
