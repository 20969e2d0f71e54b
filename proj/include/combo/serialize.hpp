// Copyright (c) 2026 The combo-avs Authors
// SPDX-License-Identifier: Apache-2.0
//
// CTNS binary tensor format:
//   "CTNS" | u8 version (=1) | u8 rank | rank x u64 LE extents | f64 LE payload

#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "combo/tensor.hpp"

namespace combo {

inline constexpr std::array<char, 4> kCtnsMagic{'C', 'T', 'N', 'S'};
inline constexpr std::uint8_t kCtnsVersion = 1;

namespace detail {

inline void put_u64(std::vector<unsigned char>& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

inline std::uint64_t get_u64(const unsigned char* p) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    return v;
}

}  // namespace detail

inline std::vector<unsigned char> encode_ctns(const Tensor& t) {
    if (t.rank() > 255) throw DimensionError("ctns: rank exceeds 255");
    std::vector<unsigned char> out(kCtnsMagic.begin(), kCtnsMagic.end());
    out.push_back(kCtnsVersion);
    out.push_back(static_cast<unsigned char>(t.rank()));
    for (auto e : t.shape()) detail::put_u64(out, e);
    out.reserve(out.size() + 8 * t.size());
    for (double v : t.data()) detail::put_u64(out, std::bit_cast<std::uint64_t>(v));
    return out;
}

inline Tensor decode_ctns(const std::vector<unsigned char>& buf, const std::string& origin = "<buffer>") {
    if (buf.size() < 6 || std::memcmp(buf.data(), kCtnsMagic.data(), 4) != 0)
        throw IoError("ctns: bad magic in " + origin);
    if (buf[4] != kCtnsVersion) throw IoError("ctns: unsupported version " + std::to_string(buf[4]) + " in " + origin);
    const std::size_t rank = buf[5];
    std::size_t off = 6;
    if (buf.size() < off + 8 * rank) throw IoError("ctns: truncated header in " + origin);
    Shape shape(rank);
    for (std::size_t i = 0; i < rank; ++i, off += 8) shape[i] = detail::get_u64(buf.data() + off);
    const std::size_t n = numel(shape);
    if (buf.size() != off + 8 * n) throw IoError("ctns: payload size mismatch in " + origin);
    std::vector<double> values(n);
    for (std::size_t i = 0; i < n; ++i, off += 8) values[i] = std::bit_cast<double>(detail::get_u64(buf.data() + off));
    return Tensor(std::move(shape), std::move(values));
}

inline void write_bytes(const std::filesystem::path& path, const std::vector<unsigned char>& bytes) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for writing: " + path.string());
    os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw IoError("write failed: " + path.string());
}

inline std::vector<unsigned char> read_bytes(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open for reading: " + path.string());
    return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

inline void save_tensor(const std::filesystem::path& path, const Tensor& t) { write_bytes(path, encode_ctns(t)); }

inline Tensor load_tensor(const std::filesystem::path& path) { return decode_ctns(read_bytes(path), path.string()); }

}  // namespace combo
