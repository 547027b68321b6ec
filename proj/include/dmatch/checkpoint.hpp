#pragma once

#include <bit>
#include <cstdint>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "dmatch/tensor.hpp"

namespace dmatch {

// Parameter checkpoint, format "DMCK1":
//   magic "DMCK1", then per record: name length (u32 LE), name bytes,
//   rank (u32 LE), extents (u64 LE each), payload (f64 LE each),
//   records until EOF. Round-trips bit-exactly.

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
    char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
    os.write(b, 4);
}

inline void put_u64(std::ostream& os, std::uint64_t v) {
    char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
    os.write(b, 8);
}

inline void put_f64(std::ostream& os, double v) { put_u64(os, std::bit_cast<std::uint64_t>(v)); }

inline bool get_u32(std::istream& is, std::uint32_t& v) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4)) return false;
    v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return true;
}

inline bool get_u64(std::istream& is, std::uint64_t& v) {
    unsigned char b[8];
    if (!is.read(reinterpret_cast<char*>(b), 8)) return false;
    v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return true;
}

}  // namespace detail

inline constexpr char kCheckpointMagic[] = "DMCK1";

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

inline void save_tensors(const std::string& path, const NamedTensors& tensors) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open for write: " + path);
    os.write(kCheckpointMagic, 5);
    for (const auto& [name, t] : tensors) {
        detail::put_u32(os, static_cast<std::uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        detail::put_u32(os, static_cast<std::uint32_t>(t.rank()));
        for (std::size_t d : t.shape()) detail::put_u64(os, d);
        for (double v : t.data()) detail::put_f64(os, v);
    }
    if (!os) throw IoError("write failed: " + path);
}

inline NamedTensors load_tensors(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open for read: " + path);
    char magic[5];
    if (!is.read(magic, 5) || std::string(magic, 5) != kCheckpointMagic) {
        throw IoError("bad checkpoint magic in " + path);
    }
    NamedTensors out;
    std::uint32_t name_len = 0;
    while (detail::get_u32(is, name_len)) {
        std::string name(name_len, '\0');
        if (!is.read(name.data(), name_len)) throw IoError("truncated name in " + path);
        std::uint32_t rank = 0;
        if (!detail::get_u32(is, rank)) throw IoError("truncated rank in " + path);
        Shape shape(rank);
        for (std::uint32_t d = 0; d < rank; ++d) {
            std::uint64_t e = 0;
            if (!detail::get_u64(is, e)) throw IoError("truncated extents in " + path);
            shape[d] = static_cast<std::size_t>(e);
        }
        std::vector<double> data(numel_of(shape));
        for (double& v : data) {
            std::uint64_t bits = 0;
            if (!detail::get_u64(is, bits)) throw IoError("truncated payload in " + path);
            v = std::bit_cast<double>(bits);
        }
        out.emplace_back(std::move(name), Tensor::from_data(std::move(shape), std::move(data)));
    }
    return out;
}

}  // namespace dmatch
