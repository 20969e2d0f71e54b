// Copyright (c) 2026 The combo-avs Authors
// SPDX-License-Identifier: Apache-2.0
//
// Twin four-stage convolutional encoders for frames and Maskiges, merged by
// channel-weighted blocks:
//   F_v <- F_m * broadcast(GAP(F_m) W) + F_v
// GAP(F_m) W is a per-frame C_i vector that gates F_m channel-wise.

#pragma once

#include <array>
#include <string>

#include "combo/ops.hpp"
#include "combo/params.hpp"

namespace combo {

struct EncoderConfig {
    std::array<std::size_t, 4> stage_channels{16, 32, 64, 128};
    std::size_t in_channels = 3;
    std::size_t stem_kernel = 5;
    std::size_t kernel = 3;
    bool shared_weights = false;
};

// Stage s (0-based) has extent ceil(H / 2^(s+2)).
inline std::size_t stage_extent(std::size_t input, std::size_t stage) {
    const std::size_t f = std::size_t{1} << (stage + 2);
    return (input + f - 1) / f;
}

struct FeaturePyramid {
    std::array<Tensor, 4> levels;  // [T, C_i, H_i, W_i]
};

class ConvBackbone {
public:
    ConvBackbone() = default;

    ConvBackbone(ParamStore& store, const std::string& prefix, const EncoderConfig& cfg) : cfg_(cfg) {
        std::size_t in = cfg.in_channels;
        for (std::size_t s = 0; s < 4; ++s) {
            const std::size_t out = cfg.stage_channels[s];
            const std::size_t k1 = s == 0 ? cfg.stem_kernel : cfg.kernel;
            const std::string p = prefix + ".stage" + std::to_string(s + 1);
            stages_[s].w1 = store.create(p + ".conv1.weight", {out, in, k1, k1}, Init::he(in * k1 * k1));
            stages_[s].b1 = store.create(p + ".conv1.bias", {out}, Init::zeros());
            stages_[s].w2 = store.create(p + ".conv2.weight", {out, out, cfg.kernel, cfg.kernel},
                                         Init::he(out * cfg.kernel * cfg.kernel));
            stages_[s].b2 = store.create(p + ".conv2.bias", {out}, Init::zeros());
            in = out;
        }
    }

    FeaturePyramid forward(const Tensor& x) const {
        if (x.rank() != 4 || x.dim(1) != cfg_.in_channels)
            throw DimensionError("encoder expects [T," + std::to_string(cfg_.in_channels) + ",H,W], got " +
                                 shape_str(x.shape()));
        if (x.dim(2) % 32 || x.dim(3) % 32)
            throw DimensionError("encoder input spatial size must be divisible by 32, got " + shape_str(x.shape()));
        FeaturePyramid out;
        Tensor h = x;
        for (std::size_t s = 0; s < 4; ++s) {
            h = relu(conv2d(h, stages_[s].w1, stages_[s].b1, s == 0 ? 4 : 2));
            h = relu(conv2d(h, stages_[s].w2, stages_[s].b2, 1));
            out.levels[s] = h;
        }
        return out;
    }

private:
    struct Stage {
        Tensor w1, b1, w2, b2;
    };
    EncoderConfig cfg_;
    std::array<Stage, 4> stages_;
};

inline Tensor channel_weighted_fuse(const Tensor& visual, const Tensor& maskige, const Tensor& weight) {
    if (visual.rank() != 4 || visual.shape() != maskige.shape())
        throw DimensionError("channel_weighted_fuse: visual " + shape_str(visual.shape()) + " vs maskige " +
                             shape_str(maskige.shape()));
    const std::size_t C = visual.dim(1);
    if (weight.rank() != 2 || weight.dim(0) != C || weight.dim(1) != C)
        throw DimensionError("channel_weighted_fuse: weight " + shape_str(weight.shape()) + " for " +
                             std::to_string(C) + " channels");
    Tensor gate = matmul(global_avg_pool(maskige), weight);  // [T, C]
    return add(mul(maskige, expand_trailing(gate, {visual.dim(2), visual.dim(3)})), visual);
}

enum class EncoderInput { image, maskige };

class SiamEncoder {
public:
    SiamEncoder() = default;

    // with_maskige=false builds the image branch only (no Maskige encoder and
    // no fusion weights), the configuration of a model without the prior.
    SiamEncoder(ParamStore& store, const EncoderConfig& cfg, bool with_maskige = true)
        : cfg_(cfg), with_maskige_(with_maskige), siam_enabled_(with_maskige) {
        image_ = ConvBackbone(store, "enc_v", cfg);
        if (!with_maskige) return;
        if (!cfg.shared_weights) maskige_ = ConvBackbone(store, "enc_m", cfg);
        for (std::size_t s = 0; s < 4; ++s) {
            const std::size_t c = cfg.stage_channels[s];
            fuse_[s] = store.create("fuse.stage" + std::to_string(s + 1) + ".weight", {c, c},
                                    Init::normal(1.0 / static_cast<double>(c)));
        }
    }

    FeaturePyramid encode(const Tensor& x, EncoderInput which) const {
        if (which == EncoderInput::image || cfg_.shared_weights) return image_.forward(x);
        if (!with_maskige_) throw ConfigError("encoder was built without a Maskige branch");
        return maskige_.forward(x);
    }

    FeaturePyramid fuse(const FeaturePyramid& visual, const FeaturePyramid& maskige) const {
        FeaturePyramid out;
        for (std::size_t s = 0; s < 4; ++s) out.levels[s] = channel_weighted_fuse(visual.levels[s], maskige.levels[s], fuse_[s]);
        return out;
    }

    FeaturePyramid forward(const Tensor& frames, const Tensor& maskiges) const {
        FeaturePyramid visual = encode(frames, EncoderInput::image);
        if (!siam_enabled_) return visual;
        return fuse(visual, encode(maskiges, EncoderInput::maskige));
    }

    // Runtime switch; disabling reproduces the image-only model exactly.
    void set_siam_enabled(bool on) {
        if (on && !with_maskige_) throw ConfigError("encoder was built without a Maskige branch");
        siam_enabled_ = on;
    }
    bool siam_enabled() const noexcept { return siam_enabled_; }
    const EncoderConfig& config() const noexcept { return cfg_; }
    const Tensor& fuse_weight(std::size_t stage) const { return fuse_.at(stage); }

private:
    EncoderConfig cfg_;
    bool with_maskige_ = true;
    bool siam_enabled_ = true;
    ConvBackbone image_, maskige_;
    std::array<Tensor, 4> fuse_;
};

}  // namespace combo
