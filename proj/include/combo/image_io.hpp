// Copyright (c) 2026 The combo-avs Authors
// SPDX-License-Identifier: Apache-2.0
//
// Binary PGM (P5) and PPM (P6) with maxval 255.

#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "combo/serialize.hpp"
#include "combo/tensor.hpp"

namespace combo {

struct GrayImage {
    std::size_t height = 0, width = 0;
    std::vector<std::uint8_t> pixels;  // row-major
};

struct RgbImage {
    std::size_t height = 0, width = 0;
    std::vector<std::uint8_t> pixels;  // row-major interleaved RGB
};

inline std::uint8_t to_byte(double x) {
    return static_cast<std::uint8_t>(std::lround(255.0 * std::clamp(x, 0.0, 1.0)));
}

namespace detail {

inline std::vector<unsigned char> netpbm_header(const char* magic, std::size_t w, std::size_t h) {
    const std::string s = std::string(magic) + "\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
    return {s.begin(), s.end()};
}

// Parses "P5"/"P6" headers (comments allowed); returns payload offset.
inline std::size_t parse_netpbm(const std::vector<unsigned char>& buf, const char* magic, std::size_t& w,
                                std::size_t& h, const std::string& origin) {
    if (buf.size() < 2 || buf[0] != magic[0] || buf[1] != magic[1])
        throw IoError(std::string("expected ") + magic + " image: " + origin);
    std::size_t pos = 2;
    auto next_int = [&]() -> std::size_t {
        while (pos < buf.size()) {
            if (buf[pos] == '#') {
                while (pos < buf.size() && buf[pos] != '\n') ++pos;
            } else if (std::isspace(buf[pos])) {
                ++pos;
            } else {
                break;
            }
        }
        if (pos >= buf.size() || !std::isdigit(buf[pos])) throw IoError("malformed image header: " + origin);
        std::size_t v = 0;
        while (pos < buf.size() && std::isdigit(buf[pos])) v = v * 10 + static_cast<std::size_t>(buf[pos++] - '0');
        return v;
    };
    w = next_int();
    h = next_int();
    const std::size_t maxval = next_int();
    if (maxval != 255) throw IoError("only maxval 255 supported: " + origin);
    if (pos >= buf.size() || !std::isspace(buf[pos])) throw IoError("malformed image header: " + origin);
    return pos + 1;
}

}  // namespace detail

inline void write_pgm(const std::filesystem::path& path, const GrayImage& img) {
    auto out = detail::netpbm_header("P5", img.width, img.height);
    out.insert(out.end(), img.pixels.begin(), img.pixels.end());
    write_bytes(path, out);
}

inline GrayImage read_pgm(const std::filesystem::path& path) {
    const auto buf = read_bytes(path);
    GrayImage img;
    const std::size_t off = detail::parse_netpbm(buf, "P5", img.width, img.height, path.string());
    if (buf.size() != off + img.width * img.height) throw IoError("PGM payload size mismatch: " + path.string());
    img.pixels.assign(buf.begin() + static_cast<long>(off), buf.end());
    return img;
}

inline void write_ppm(const std::filesystem::path& path, const RgbImage& img) {
    auto out = detail::netpbm_header("P6", img.width, img.height);
    out.insert(out.end(), img.pixels.begin(), img.pixels.end());
    write_bytes(path, out);
}

inline RgbImage read_ppm(const std::filesystem::path& path) {
    const auto buf = read_bytes(path);
    RgbImage img;
    const std::size_t off = detail::parse_netpbm(buf, "P6", img.width, img.height, path.string());
    if (buf.size() != off + 3 * img.width * img.height) throw IoError("PPM payload size mismatch: " + path.string());
    img.pixels.assign(buf.begin() + static_cast<long>(off), buf.end());
    return img;
}

// [3,H,W] tensor in [0,1] (clamped) -> RGB bytes.
inline RgbImage to_rgb(const Tensor& chw) {
    if (chw.rank() != 3 || chw.dim(0) != 3) throw DimensionError("to_rgb: expected [3,H,W], got " + shape_str(chw.shape()));
    RgbImage img{chw.dim(1), chw.dim(2), {}};
    const std::size_t hw = img.height * img.width;
    img.pixels.resize(3 * hw);
    for (std::size_t p = 0; p < hw; ++p)
        for (std::size_t c = 0; c < 3; ++c) img.pixels[3 * p + c] = to_byte(chw[c * hw + p]);
    return img;
}

inline Tensor from_rgb(const RgbImage& img) {
    const std::size_t hw = img.height * img.width;
    std::vector<double> v(3 * hw);
    for (std::size_t p = 0; p < hw; ++p)
        for (std::size_t c = 0; c < 3; ++c) v[c * hw + p] = img.pixels[3 * p + c] / 255.0;
    return Tensor({3, img.height, img.width}, std::move(v));
}

}  // namespace combo
