// Copyright (c) 2026 The combo-avs Authors
// SPDX-License-Identifier: Apache-2.0
//
// Maskige generation: class-agnostic binary proposals are zero-padded to a
// fixed capacity N and mapped to a 3-channel prior image by a fixed linear
// color layer, image[:, h, w] = sum_n masks[n, h, w] * A[n, :].

#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "combo/image_io.hpp"
#include "combo/rng.hpp"
#include "combo/tensor.hpp"

namespace combo {

inline constexpr std::size_t kDefaultPaletteCapacity = 100;

// K x H x W stack of binary masks (values exactly 0 or 1).
class MaskStack {
public:
    MaskStack() = default;

    MaskStack(std::size_t count, std::size_t height, std::size_t width)
        : count_(count), height_(height), width_(width), bits_(count * height * width, 0) {
        if (height == 0 || width == 0) throw DimensionError("mask stack needs positive spatial extent");
    }

    MaskStack(std::size_t count, std::size_t height, std::size_t width, std::vector<std::uint8_t> bits)
        : count_(count), height_(height), width_(width), bits_(std::move(bits)) {
        if (height == 0 || width == 0) throw DimensionError("mask stack needs positive spatial extent");
        if (bits_.size() != count * height * width) throw DimensionError("mask stack payload size mismatch");
        for (auto b : bits_)
            if (b > 1) throw ParameterError("mask stack values must be 0 or 1");
    }

    static MaskStack from_tensor(const Tensor& t) {
        if (t.rank() != 3) throw DimensionError("mask stack expects [K,H,W], got " + shape_str(t.shape()));
        std::vector<std::uint8_t> bits(t.size());
        for (std::size_t i = 0; i < t.size(); ++i) {
            if (t[i] != 0.0 && t[i] != 1.0) throw ParameterError("mask stack values must be 0 or 1");
            bits[i] = t[i] == 1.0;
        }
        return MaskStack(t.dim(0), t.dim(1), t.dim(2), std::move(bits));
    }

    std::size_t count() const noexcept { return count_; }
    std::size_t height() const noexcept { return height_; }
    std::size_t width() const noexcept { return width_; }
    std::size_t plane_size() const noexcept { return height_ * width_; }

    std::uint8_t at(std::size_t k, std::size_t y, std::size_t x) const { return bits_[(k * height_ + y) * width_ + x]; }
    void set(std::size_t k, std::size_t y, std::size_t x, bool v) { bits_[(k * height_ + y) * width_ + x] = v; }
    const std::vector<std::uint8_t>& bits() const noexcept { return bits_; }

    Tensor to_tensor() const {
        return Tensor({count_, height_, width_}, std::vector<double>(bits_.begin(), bits_.end()));
    }

    bool pairwise_disjoint() const {
        for (std::size_t p = 0; p < plane_size(); ++p) {
            int covered = 0;
            for (std::size_t k = 0; k < count_; ++k) covered += bits_[k * plane_size() + p];
            if (covered > 1) return false;
        }
        return true;
    }

    friend bool operator==(const MaskStack&, const MaskStack&) = default;

private:
    std::size_t count_ = 0, height_ = 0, width_ = 0;
    std::vector<std::uint8_t> bits_;
};

using Color = std::array<double, 3>;

// N x 3 normalized RGB matrix.
class Palette {
public:
    Palette() = default;
    explicit Palette(std::vector<Color> rows) : rows_(std::move(rows)) {}

    std::size_t capacity() const noexcept { return rows_.size(); }
    const Color& operator[](std::size_t i) const { return rows_[i]; }
    const std::vector<Color>& rows() const noexcept { return rows_; }

    Tensor matrix() const {
        std::vector<double> v;
        v.reserve(3 * rows_.size());
        for (const auto& r : rows_) v.insert(v.end(), r.begin(), r.end());
        return Tensor({rows_.size(), 3}, std::move(v));
    }

    // Minimum pairwise L-infinity distance between rows (+inf below two rows).
    double min_separation() const {
        double best = std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < rows_.size(); ++i)
            for (std::size_t j = i + 1; j < rows_.size(); ++j) {
                double d = 0.0;
                for (int c = 0; c < 3; ++c) d = std::max(d, std::abs(rows_[i][c] - rows_[j][c]));
                best = std::min(best, d);
            }
        return best;
    }

    friend bool operator==(const Palette&, const Palette&) = default;

private:
    std::vector<Color> rows_;
};

inline MaskStack pad_masks(const MaskStack& stack, std::size_t capacity) {
    if (stack.count() > capacity)
        throw CapacityError(stack.count(), capacity, "pad_masks: more proposals than palette capacity");
    std::vector<std::uint8_t> bits = stack.bits();
    bits.resize(capacity * stack.plane_size(), 0);
    return MaskStack(capacity, stack.height(), stack.width(), std::move(bits));
}

// Pure linear map; records nothing on the tape and owns no parameters.
inline Tensor encode_maskige(const MaskStack& padded, const Palette& palette) {
    if (padded.count() != palette.capacity()) {
        throw DimensionError("encode_maskige: stack holds " + std::to_string(padded.count()) +
                             " planes but palette capacity is " + std::to_string(palette.capacity()));
    }
    const std::size_t hw = padded.plane_size();
    std::vector<double> img(3 * hw, 0.0);
    for (std::size_t n = 0; n < padded.count(); ++n) {
        const auto& color = palette[n];
        const std::uint8_t* plane = padded.bits().data() + n * hw;
        for (std::size_t p = 0; p < hw; ++p) {
            if (!plane[p]) continue;
            for (std::size_t c = 0; c < 3; ++c) img[c * hw + p] += color[c];
        }
    }
    return Tensor({3, padded.height(), padded.width()}, std::move(img));
}

// Nearest palette row per pixel (L2); pixels nearest to black stay empty.
inline MaskStack decode_nearest(const Tensor& maskige, const Palette& palette) {
    if (maskige.rank() != 3 || maskige.dim(0) != 3)
        throw DimensionError("decode_nearest: expected [3,H,W], got " + shape_str(maskige.shape()));
    const std::size_t H = maskige.dim(1), W = maskige.dim(2), hw = H * W;
    MaskStack out(palette.capacity(), H, W);
    for (std::size_t p = 0; p < hw; ++p) {
        const double r = maskige[p], g = maskige[hw + p], b = maskige[2 * hw + p];
        double best = r * r + g * g + b * b;  // distance to black
        std::optional<std::size_t> arg;
        for (std::size_t n = 0; n < palette.capacity(); ++n) {
            const auto& c = palette[n];
            const double d = (r - c[0]) * (r - c[0]) + (g - c[1]) * (g - c[1]) + (b - c[2]) * (b - c[2]);
            if (d < best) {
                best = d;
                arg = n;
            }
        }
        if (arg) out.set(*arg, p / W, p % W, true);
    }
    return out;
}

// Seeded quantized low-discrepancy colors (additive recurrence on the
// generalized golden ratio in 3-D). Rows are distinct at 8-bit resolution,
// so the L-infinity separation is at least 1/255, and never pure black.
inline Palette generate_palette(std::size_t capacity, std::uint64_t seed) {
    constexpr std::size_t kDistinct = 256u * 256u * 256u - 1u;  // black is reserved
    if (capacity > kDistinct) {
        throw GenerationError("palette: cannot separate " + std::to_string(capacity) +
                              " colors at 8-bit resolution (max " + std::to_string(kDistinct) + ")");
    }
    const double phi = 1.2207440845990135;  // real root of x^3 = x + 1
    const std::array<double, 3> alpha{1.0 / phi, 1.0 / (phi * phi), 1.0 / (phi * phi * phi)};
    Rng rng(seed, "palette");
    std::array<double, 3> offset{rng.uniform(), rng.uniform(), rng.uniform()};
    std::set<std::uint32_t> used;
    std::vector<Color> rows;
    rows.reserve(capacity);
    const std::size_t max_draws = 64 * capacity + 1024;
    for (std::size_t i = 1; rows.size() < capacity; ++i) {
        if (i > max_draws) throw GenerationError("palette: separation not achieved within draw budget");
        std::array<std::uint32_t, 3> q{};
        for (int c = 0; c < 3; ++c) {
            const double v = std::fmod(offset[c] + static_cast<double>(i) * alpha[c], 1.0);
            q[c] = static_cast<std::uint32_t>(std::lround(v * 255.0));
        }
        const std::uint32_t key = (q[0] << 16) | (q[1] << 8) | q[2];
        if (key == 0 || !used.insert(key).second) continue;
        rows.push_back({q[0] / 255.0, q[1] / 255.0, q[2] / 255.0});
    }
    return Palette(std::move(rows));
}

// Text palette: one "r g b" line of 0..255 integers per row.
inline Palette load_palette(const std::filesystem::path& path, std::optional<std::size_t> expected_rows = {}) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open palette: " + path.string());
    std::vector<Color> rows;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        std::istringstream ls(line);
        long r, g, b;
        std::string extra;
        if (!(ls >> r >> g >> b) || (ls >> extra) || r < 0 || r > 255 || g < 0 || g > 255 || b < 0 || b > 255)
            throw IoError("palette " + path.string() + ":" + std::to_string(lineno) + ": expected 'r g b' in 0..255");
        rows.push_back({r / 255.0, g / 255.0, b / 255.0});
    }
    if (expected_rows && rows.size() != *expected_rows) {
        throw IoError("palette " + path.string() + " has " + std::to_string(rows.size()) + " rows, expected " +
                      std::to_string(*expected_rows));
    }
    return Palette(std::move(rows));
}

inline void save_palette(const std::filesystem::path& path, const Palette& palette) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot write palette: " + path.string());
    for (const auto& c : palette.rows())
        os << std::lround(c[0] * 255.0) << ' ' << std::lround(c[1] * 255.0) << ' ' << std::lround(c[2] * 255.0) << '\n';
}

inline std::optional<std::filesystem::path> bundled_palette_path(std::size_t capacity) {
#ifdef COMBO_DATA_DIR
    const std::filesystem::path p = std::filesystem::path(COMBO_DATA_DIR) / ("palette" + std::to_string(capacity) + ".txt");
    if (std::filesystem::exists(p)) return p;
#else
    (void)capacity;
#endif
    return std::nullopt;
}

// Bundled palette file when one exists for this capacity, else the seeded
// generated palette.
inline Palette default_palette(std::size_t capacity = kDefaultPaletteCapacity, std::uint64_t seed = 0,
                               std::optional<std::filesystem::path> file = bundled_palette_path(kDefaultPaletteCapacity)) {
    if (file && std::filesystem::exists(*file)) {
        Palette p = load_palette(*file);
        if (p.capacity() == capacity) return p;
    }
    return generate_palette(capacity, seed);
}

// Full pipeline for one frame: pad K proposals to capacity and encode.
inline Tensor make_maskige(const MaskStack& proposals, const Palette& palette) {
    return encode_maskige(pad_masks(proposals, palette.capacity()), palette);
}

inline GrayImage mask_plane_to_pgm(const MaskStack& stack, std::size_t k) {
    GrayImage img{stack.height(), stack.width(), std::vector<std::uint8_t>(stack.plane_size())};
    for (std::size_t p = 0; p < stack.plane_size(); ++p) img.pixels[p] = stack.bits()[k * stack.plane_size() + p] ? 255 : 0;
    return img;
}

// Planes from PGM files (nonzero = inside); all must share one size.
inline MaskStack masks_from_pgms(const std::vector<GrayImage>& planes) {
    if (planes.empty()) throw DimensionError("no mask planes given");
    const std::size_t H = planes[0].height, W = planes[0].width;
    std::vector<std::uint8_t> bits;
    bits.reserve(planes.size() * H * W);
    for (const auto& pl : planes) {
        if (pl.height != H || pl.width != W) throw DimensionError("mask planes differ in size");
        for (auto v : pl.pixels) bits.push_back(v != 0);
    }
    return MaskStack(planes.size(), H, W, std::move(bits));
}

}  // namespace combo
