// Copyright (c) 2026 The combo-avs Authors
// SPDX-License-Identifier: Apache-2.0
//
// Bilateral audio <-> visual attention with one shared similarity matrix.
//
//   X   pixel tokens [M, C]  (sine positional encoding already added)
//   A   audio tokens [T, D]  (learnable positional embedding already added)
//   S   = (X W_Q)(A W_K)^T / sqrt(d)                  computed once, [M, T]
//   P1' = softmax_rows(S)   (A W_V^a) + X W_res       [M, d]
//   Fa' = (softmax_rows(S^T) (X W_V^v) + A W_in) W_out [T, d]
//
// Keys span every audio token of the clip unless per-frame restriction is
// requested, in which case pixel tokens of frame t only see audio token t.

#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "combo/ops.hpp"
#include "combo/params.hpp"

namespace combo {

enum class FusionMode { none, visual_only, audio_only, bilateral };

inline FusionMode parse_fusion_mode(std::string_view s) {
    if (s == "none") return FusionMode::none;
    if (s == "visual_only") return FusionMode::visual_only;
    if (s == "audio_only") return FusionMode::audio_only;
    if (s == "bilateral") return FusionMode::bilateral;
    throw ConfigError("unknown fusion mode '" + std::string(s) + "' (none|visual_only|audio_only|bilateral)");
}

inline std::string to_string(FusionMode m) {
    switch (m) {
        case FusionMode::none: return "none";
        case FusionMode::visual_only: return "visual_only";
        case FusionMode::audio_only: return "audio_only";
        case FusionMode::bilateral: return "bilateral";
    }
    return "?";
}

// Fixed 2-D sine/cosine encoding [C, H, W]: the first C/2 channels encode the
// row, the rest the column; frequency index i uses wavelength
// 2*pi * 10000^(2i / (C/2)). Positions are 1-based.
inline Tensor sine_positional_encoding(std::size_t height, std::size_t width, std::size_t channels) {
    if (channels == 0 || channels % 2) throw ParameterError("sine positional encoding needs an even channel count");
    const std::size_t half = channels / 2;
    std::vector<double> v(channels * height * width);
    for (std::size_t j = 0; j < half; ++j) {
        const double dim_t = std::pow(10000.0, 2.0 * static_cast<double>(j / 2) / static_cast<double>(half));
        for (std::size_t y = 0; y < height; ++y)
            for (std::size_t x = 0; x < width; ++x) {
                const double py = static_cast<double>(y + 1) / dim_t;
                const double px = static_cast<double>(x + 1) / dim_t;
                v[(j * height + y) * width + x] = j % 2 == 0 ? std::sin(py) : std::cos(py);
                v[((half + j) * height + y) * width + x] = j % 2 == 0 ? std::sin(px) : std::cos(px);
            }
    }
    return Tensor({channels, height, width}, std::move(v));
}

struct BfmParams {
    Tensor w_q;          // [C, d]
    Tensor w_k;          // [D, d]
    Tensor w_value_vis;  // [C, d]
    Tensor w_value_aud;  // [D, d]
    Tensor w_pixel_res;  // [C, d]
    Tensor w_audio_in;   // [D, d]
    Tensor w_audio_out;  // [d, d]

    std::size_t width() const { return w_q.dim(1); }

    void validate(std::size_t pixel_channels, std::size_t audio_channels) const {
        const std::size_t d = w_q.dim(1);
        auto check = [&](const Tensor& w, std::size_t rows, const char* name) {
            if (w.rank() != 2 || w.dim(0) != rows || w.dim(1) != d)
                throw DimensionError(std::string("bfm: ") + name + " has shape " + shape_str(w.shape()) + ", expected [" +
                                     std::to_string(rows) + "x" + std::to_string(d) + "]");
        };
        check(w_q, pixel_channels, "W_Q");
        check(w_k, audio_channels, "W_K");
        check(w_value_vis, pixel_channels, "W_V^v");
        check(w_value_aud, audio_channels, "W_V^a");
        check(w_pixel_res, pixel_channels, "pixel residual projection");
        check(w_audio_in, audio_channels, "audio input projection");
        check(w_audio_out, d, "audio output projection");
    }
};

struct FusedTokens {
    Tensor pixels;  // [M, d]
    Tensor audio;   // [T, d]
};

// Instrumentation for structural assertions.
struct BfmTrace {
    std::size_t similarity_evaluations = 0;
    Tensor similarity;         // [M, T]
    Tensor visual_attention;   // softmax rows of S
    Tensor audio_attention;    // softmax rows of S^T
};

// frame_of_token, when non-empty, restricts attention to matching frames.
inline FusedTokens bilateral_attention(const Tensor& pixel_tokens, const Tensor& audio_tokens, const BfmParams& p,
                                       FusionMode mode = FusionMode::bilateral,
                                       const std::vector<std::size_t>& frame_of_token = {},
                                       BfmTrace* trace = nullptr) {
    if (pixel_tokens.rank() != 2 || audio_tokens.rank() != 2)
        throw DimensionError("bfm: expected token matrices, got " + shape_str(pixel_tokens.shape()) + " and " +
                             shape_str(audio_tokens.shape()));
    p.validate(pixel_tokens.dim(1), audio_tokens.dim(1));
    const std::size_t M = pixel_tokens.dim(0), T = audio_tokens.dim(0);
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(p.width()));

    FusedTokens out;
    out.pixels = matmul(pixel_tokens, p.w_pixel_res);
    Tensor audio_res = matmul(audio_tokens, p.w_audio_in);
    if (mode == FusionMode::none) {
        out.audio = matmul(audio_res, p.w_audio_out);
        return out;
    }

    Tensor q = matmul(pixel_tokens, p.w_q);
    Tensor k = matmul(audio_tokens, p.w_k);
    Tensor s = scale(matmul(q, transpose(k)), inv_sqrt_d);
    if (trace) {
        ++trace->similarity_evaluations;
        trace->similarity = s;
    }

    std::vector<std::uint8_t> block_v, block_a;
    if (!frame_of_token.empty()) {
        if (frame_of_token.size() != M) throw DimensionError("bfm: frame map size does not match pixel tokens");
        block_v.assign(M * T, 1);
        block_a.assign(T * M, 1);
        for (std::size_t m = 0; m < M; ++m) {
            const std::size_t t = frame_of_token[m];
            if (t >= T) throw DimensionError("bfm: frame index out of range");
            block_v[m * T + t] = 0;
            block_a[t * M + m] = 0;
        }
    }
    auto row_softmax = [](const Tensor& x, const std::vector<std::uint8_t>& blocked) {
        return blocked.empty() ? softmax(x, -1) : masked_softmax(x, blocked);
    };

    if (mode == FusionMode::visual_only || mode == FusionMode::bilateral) {
        Tensor attn = row_softmax(s, block_v);
        if (trace) trace->visual_attention = attn;
        out.pixels = add(matmul(attn, matmul(audio_tokens, p.w_value_aud)), out.pixels);
    }
    if (mode == FusionMode::audio_only || mode == FusionMode::bilateral) {
        Tensor attn = row_softmax(transpose(s), block_a);
        if (trace) trace->audio_attention = attn;
        audio_res = add(matmul(attn, matmul(pixel_tokens, p.w_value_vis)), audio_res);
    }
    out.audio = matmul(audio_res, p.w_audio_out);
    return out;
}

struct FusedPair {
    Tensor pixels;  // P_1' [T, d, H_1, W_1]
    Tensor audio;   // F_a' [T, d]
};

class BilateralFusion {
public:
    BilateralFusion() = default;

    BilateralFusion(ParamStore& store, std::size_t pixel_channels, std::size_t audio_channels, std::size_t width,
                    std::size_t frames, FusionMode mode, bool per_frame = false)
        : pixel_channels_(pixel_channels), audio_channels_(audio_channels), mode_(mode), per_frame_(per_frame) {
        auto lin = [&](const char* name, std::size_t in, std::size_t out) {
            return store.create(std::string("bfm.") + name, {in, out}, Init::xavier(in, out));
        };
        params_.w_q = lin("w_q", pixel_channels, width);
        params_.w_k = lin("w_k", audio_channels, width);
        params_.w_value_vis = lin("w_value_vis", pixel_channels, width);
        params_.w_value_aud = lin("w_value_aud", audio_channels, width);
        params_.w_pixel_res = lin("w_pixel_res", pixel_channels, width);
        params_.w_audio_in = lin("w_audio_in", audio_channels, width);
        params_.w_audio_out = lin("w_audio_out", width, width);
        audio_pos_ = store.create("bfm.audio_pos", {frames, audio_channels}, Init::normal(0.02));
    }

    FusedPair forward(const Tensor& p1, const Tensor& audio, BfmTrace* trace = nullptr) const {
        if (p1.rank() != 4 || p1.dim(1) != pixel_channels_)
            throw DimensionError("bfm expects P_1 [T," + std::to_string(pixel_channels_) + ",H,W], got " +
                                 shape_str(p1.shape()));
        if (audio.shape() != audio_pos_.shape())
            throw DimensionError("bfm expects audio " + shape_str(audio_pos_.shape()) + ", got " + shape_str(audio.shape()));
        const std::size_t T = p1.dim(0), H = p1.dim(2), W = p1.dim(3), C = p1.dim(1);
        if (T != audio.dim(0)) throw DimensionError("bfm: frame count differs between P_1 and audio");
        Tensor with_pe = add(p1, sine_positional_encoding(H, W, C));
        Tensor tokens = reshape(permute(with_pe, {0, 2, 3, 1}), {T * H * W, C});
        Tensor audio_tokens = add(audio, audio_pos_);
        std::vector<std::size_t> frames;
        if (per_frame_) {
            frames.resize(T * H * W);
            for (std::size_t m = 0; m < frames.size(); ++m) frames[m] = m / (H * W);
        }
        FusedTokens fused = bilateral_attention(tokens, audio_tokens, params_, mode_, frames, trace);
        const std::size_t d = params_.width();
        FusedPair out;
        out.pixels = reshape(permute(reshape(fused.pixels, {T, H * W, d}), {0, 2, 1}), {T, d, H, W});
        out.audio = fused.audio;
        return out;
    }

    const BfmParams& params() const noexcept { return params_; }
    FusionMode mode() const noexcept { return mode_; }
    void set_mode(FusionMode m) { mode_ = m; }

private:
    std::size_t pixel_channels_ = 0, audio_channels_ = 0;
    FusionMode mode_ = FusionMode::bilateral;
    bool per_frame_ = false;
    BfmParams params_;
    Tensor audio_pos_;
};

}  // namespace combo
