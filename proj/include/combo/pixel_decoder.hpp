// Copyright (c) 2026 The combo-avs Authors
// SPDX-License-Identifier: Apache-2.0
//
// Lateral/top-down decoder producing per-pixel embeddings P_1..P_4 at a common
// width C:  P_4 = lat(F_4),  P_i = lat(F_i) + up2(P_{i+1}),
// with lat = 1x1 conv followed by ReLU.

#pragma once

#include <array>
#include <string>

#include "combo/ops.hpp"
#include "combo/params.hpp"
#include "combo/siam_encoder.hpp"

namespace combo {

struct PixelEmbeddings {
    std::array<Tensor, 4> levels;  // P_1 (largest) .. P_4, each [T, C, H_i, W_i]
};

class PixelDecoder {
public:
    PixelDecoder() = default;

    PixelDecoder(ParamStore& store, const std::array<std::size_t, 4>& stage_channels, std::size_t width)
        : stage_channels_(stage_channels), width_(width) {
        for (std::size_t s = 0; s < 4; ++s) {
            const std::string p = "pixdec.lateral" + std::to_string(s + 1);
            weights_[s] = store.create(p + ".weight", {width, stage_channels[s], 1, 1}, Init::he(stage_channels[s]));
            biases_[s] = store.create(p + ".bias", {width}, Init::zeros());
        }
    }

    PixelEmbeddings forward(const FeaturePyramid& pyramid) const {
        PixelEmbeddings out;
        for (std::size_t s = 4; s-- > 0;) {
            const Tensor& f = pyramid.levels[s];
            if (f.rank() != 4 || f.dim(1) != stage_channels_[s])
                throw DimensionError("pixel decoder lateral " + std::to_string(s + 1) + " expects " +
                                     std::to_string(stage_channels_[s]) + " channels, got " + shape_str(f.shape()));
            Tensor lat = relu(conv2d(f, weights_[s], biases_[s], 1));
            out.levels[s] = s == 3 ? lat : add(lat, upsample_nearest2x(out.levels[s + 1]));
        }
        return out;
    }

    std::size_t width() const noexcept { return width_; }
    const Tensor& lateral_bias(std::size_t s) const { return biases_.at(s); }

private:
    std::array<std::size_t, 4> stage_channels_{};
    std::size_t width_ = 0;
    std::array<Tensor, 4> weights_, biases_;
};

}  // namespace combo
