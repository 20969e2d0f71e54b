// Copyright (c) 2026 The combo-avs Authors
// SPDX-License-Identifier: Apache-2.0
//
// Semantic post-processing: O[t,k] = sum_q p_cls[t,q,k] * p_mask[t,q], the
// no-object column dropped, argmax over real classes.

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "combo/image_io.hpp"
#include "combo/ops.hpp"
#include "combo/query_decoder.hpp"

namespace combo {

// Labels 0 = background, 1..K_c = classes.
struct SemanticMap {
    std::size_t frames = 0, height = 0, width = 0, num_classes = 0;
    std::vector<std::uint16_t> labels;

    SemanticMap() = default;
    SemanticMap(std::size_t t, std::size_t h, std::size_t w, std::size_t k)
        : frames(t), height(h), width(w), num_classes(k), labels(t * h * w, 0) {}

    std::size_t plane() const noexcept { return height * width; }
    std::uint16_t at(std::size_t t, std::size_t y, std::size_t x) const { return labels[(t * height + y) * width + x]; }
    void set(std::size_t t, std::size_t y, std::size_t x, std::uint16_t v) { labels[(t * height + y) * width + x] = v; }

    void validate() const {
        if (labels.size() != frames * height * width) throw DimensionError("semantic map size mismatch");
        for (auto v : labels)
            if (v > num_classes) throw ContractError("semantic label " + std::to_string(v) + " exceeds class count");
    }

    friend bool operator==(const SemanticMap&, const SemanticMap&) = default;
};

inline constexpr double kDefaultBackgroundThreshold = 0.5;

// cls_prob [T,N_q,K_c+1] (softmaxed), mask_prob [T,N_q,H,W] (sigmoided).
// Ties go to the lowest class index; a pixel whose best score is below tau
// stays background.
inline SemanticMap semantic_inference(const Tensor& cls_prob, const Tensor& mask_prob,
                                      double tau = kDefaultBackgroundThreshold) {
    if (cls_prob.rank() != 3 || mask_prob.rank() != 4 || cls_prob.dim(0) != mask_prob.dim(0) ||
        cls_prob.dim(1) != mask_prob.dim(1) || cls_prob.dim(2) < 2)
        throw DimensionError("semantic_inference: cls " + shape_str(cls_prob.shape()) + " vs mask " +
                             shape_str(mask_prob.shape()));
    const std::size_t T = cls_prob.dim(0), Nq = cls_prob.dim(1), K = cls_prob.dim(2) - 1;
    const std::size_t H = mask_prob.dim(2), W = mask_prob.dim(3), hw = H * W;
    SemanticMap out(T, H, W, K);
    std::vector<double> score(K * hw);
    for (std::size_t t = 0; t < T; ++t) {
        std::fill(score.begin(), score.end(), 0.0);
        for (std::size_t q = 0; q < Nq; ++q) {
            const double* m = mask_prob.data().data() + (t * Nq + q) * hw;
            for (std::size_t k = 0; k < K; ++k) {
                const double c = cls_prob[(t * Nq + q) * (K + 1) + k];
                if (c == 0.0) continue;
                double* s = score.data() + k * hw;
                for (std::size_t p = 0; p < hw; ++p) s[p] += c * m[p];
            }
        }
        for (std::size_t p = 0; p < hw; ++p) {
            std::size_t best_k = 0;
            double best = score[p];
            for (std::size_t k = 1; k < K; ++k)
                if (score[k * hw + p] > best) {
                    best = score[k * hw + p];
                    best_k = k;
                }
            out.labels[t * hw + p] = best < tau ? 0 : static_cast<std::uint16_t>(best_k + 1);
        }
    }
    return out;
}

// Object-vs-background specialization (K_c = 1).
inline SemanticMap binary_inference(const Tensor& cls_prob, const Tensor& mask_prob,
                                    double tau = kDefaultBackgroundThreshold) {
    if (cls_prob.rank() != 3 || cls_prob.dim(2) != 2)
        throw DimensionError("binary_inference expects [T,N_q,2] class probabilities, got " + shape_str(cls_prob.shape()));
    return semantic_inference(cls_prob, mask_prob, tau);
}

// From raw decoder logits: softmax classes, upsample mask logits to H x W,
// sigmoid, then infer.
inline SemanticMap predict_semantic(const PredictionSet& pred, std::size_t height, std::size_t width,
                                    double tau = kDefaultBackgroundThreshold) {
    NoGradGuard guard;
    Tensor cls = softmax(pred.cls, -1);
    Tensor mask = sigmoid(upsample_masks(pred.mask, height, width));
    return semantic_inference(cls, mask, tau);
}

inline std::uint8_t label_to_gray(std::size_t label, std::size_t num_classes) {
    if (num_classes == 0) return 0;
    return static_cast<std::uint8_t>(255 * label / num_classes);
}

inline std::size_t gray_to_label(std::uint8_t v, std::size_t num_classes) {
    for (std::size_t k = 0; k <= num_classes; ++k)
        if (label_to_gray(k, num_classes) == v) return k;
    throw IoError("gray level " + std::to_string(v) + " is not a label for " + std::to_string(num_classes) + " classes");
}

inline GrayImage frame_to_pgm(const SemanticMap& m, std::size_t t) {
    GrayImage img{m.height, m.width, std::vector<std::uint8_t>(m.plane())};
    for (std::size_t p = 0; p < m.plane(); ++p) img.pixels[p] = label_to_gray(m.labels[t * m.plane() + p], m.num_classes);
    return img;
}

inline void frame_from_pgm(SemanticMap& m, std::size_t t, const GrayImage& img) {
    if (img.height != m.height || img.width != m.width) throw DimensionError("label image size mismatch");
    for (std::size_t p = 0; p < m.plane(); ++p)
        m.labels[t * m.plane() + p] = static_cast<std::uint16_t>(gray_to_label(img.pixels[p], m.num_classes));
}

}  // namespace combo
