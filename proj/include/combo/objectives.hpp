// Copyright (c) 2026 The combo-avs Authors
// SPDX-License-Identifier: Apache-2.0
//
// Set-prediction objectives with bipartite matching, and the adaptive
// inter-frame consistency loss
//   L_ada = sum_t exp(S_t - 1) * (1 - S_t),  S_t = cos(O_t, O_{t+1}).

#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "combo/hungarian.hpp"
#include "combo/ops.hpp"
#include "combo/query_decoder.hpp"

namespace combo {

struct LossWeights {
    double cls = 2.0;
    double mask = 5.0;
    double ada = 10.0;
    double no_object = 0.1;

    void validate() const {
        if (cls < 0 || mask < 0 || ada < 0 || no_object < 0) throw ConfigError("loss weights must be non-negative");
    }
};

// Ground truth of one frame at mask resolution.
struct FrameTarget {
    std::vector<std::size_t> classes;  // real-class logit index, 0..K_c-1
    Tensor masks;                      // [G, P] soft targets in [0, 1]

    std::size_t count() const noexcept { return classes.size(); }
};

struct ClipTargets {
    std::vector<FrameTarget> frames;
    std::vector<bool> annotated;  // frames contributing to L_cls / L_mask

    bool is_annotated(std::size_t t) const { return annotated.empty() || annotated[t]; }
};

struct MatchResult {
    std::vector<std::size_t> query_of_gt;
    double cost = 0.0;
};

namespace detail {

inline double bce_value(double x, double t) { return std::max(x, 0.0) - x * t + std::log1p(std::exp(-std::abs(x))); }

}  // namespace detail

// Pairwise matching cost for one frame:
//   lambda_cls * (-p_q[class_g]) + lambda_mask * (BCE + Dice)(mask_q, mask_g).
// cls_logits [N_q, K_c + 1], mask_logits [N_q, P].
inline std::vector<double> matching_cost(const Tensor& cls_logits, const Tensor& mask_logits, const FrameTarget& gt,
                                         const LossWeights& w) {
    const std::size_t Nq = cls_logits.dim(0), K1 = cls_logits.dim(1), P = mask_logits.dim(1), G = gt.count();
    std::vector<double> cost(G * Nq, 0.0);
    for (std::size_t q = 0; q < Nq; ++q) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < K1; ++c) mx = std::max(mx, cls_logits[q * K1 + c]);
        double z = 0.0;
        for (std::size_t c = 0; c < K1; ++c) z += std::exp(cls_logits[q * K1 + c] - mx);
        double psum = 0.0;
        for (std::size_t p = 0; p < P; ++p) psum += sigmoid_value(mask_logits[q * P + p]);
        for (std::size_t g = 0; g < G; ++g) {
            const double prob = std::exp(cls_logits[q * K1 + gt.classes[g]] - mx) / z;
            double bce = 0.0, inter = 0.0, tsum = 0.0;
            for (std::size_t p = 0; p < P; ++p) {
                const double x = mask_logits[q * P + p], t = gt.masks[g * P + p];
                bce += detail::bce_value(x, t);
                inter += sigmoid_value(x) * t;
                tsum += t;
            }
            const double dice = 1.0 - (2.0 * inter + 1.0) / (psum + tsum + 1.0);
            cost[g * Nq + q] = w.cls * (-prob) + w.mask * (bce / static_cast<double>(P) + dice);
        }
    }
    return cost;
}

inline MatchResult match_from_cost(const std::vector<double>& cost, std::size_t gts, std::size_t queries) {
    if (gts > queries) throw CapacityError(gts, queries, "matching: more ground-truth instances than queries");
    Assignment a = hungarian(cost, gts, queries);
    return {a.col_of_row, a.cost};
}

// Exact minimum-cost matching of one frame's predictions to its targets.
inline MatchResult hungarian_match(const Tensor& cls_logits, const Tensor& mask_logits, const FrameTarget& gt,
                                   const LossWeights& w) {
    if (gt.count() > cls_logits.dim(0))
        throw CapacityError(gt.count(), cls_logits.dim(0), "matching: more ground-truth instances than queries");
    return match_from_cost(matching_cost(cls_logits, mask_logits, gt, w), gt.count(), cls_logits.dim(0));
}

// Matches every annotated frame of one prediction set.
inline std::vector<MatchResult> match_clip(const PredictionSet& pred, const ClipTargets& targets, const LossWeights& w) {
    const std::size_t T = pred.cls.dim(0), Nq = pred.cls.dim(1), K1 = pred.cls.dim(2);
    const std::size_t P = pred.mask.dim(2) * pred.mask.dim(3);
    std::vector<MatchResult> out(T);
    for (std::size_t t = 0; t < T; ++t) {
        if (!targets.is_annotated(t) || targets.frames[t].count() == 0) continue;
        Tensor cls(std::vector<std::size_t>{Nq, K1},
                   std::vector<double>(pred.cls.data().begin() + static_cast<long>(t * Nq * K1),
                                       pred.cls.data().begin() + static_cast<long>((t + 1) * Nq * K1)));
        Tensor mask(std::vector<std::size_t>{Nq, P},
                    std::vector<double>(pred.mask.data().begin() + static_cast<long>(t * Nq * P),
                                        pred.mask.data().begin() + static_cast<long>((t + 1) * Nq * P)));
        out[t] = hungarian_match(cls, mask, targets.frames[t], w);
    }
    return out;
}

// Weighted-mean cross-entropy over all queries of annotated frames; matched
// queries target their instance class, the rest the no-object class with
// weight `no_object_weight`.
inline Tensor classification_loss(const Tensor& cls_logits, const std::vector<MatchResult>& matches,
                                  const ClipTargets& targets, double no_object_weight) {
    const std::size_t T = cls_logits.dim(0), Nq = cls_logits.dim(1), K1 = cls_logits.dim(2);
    std::vector<double> weight(T * Nq * K1, 0.0);
    double total = 0.0;
    for (std::size_t t = 0; t < T; ++t) {
        if (!targets.is_annotated(t)) continue;
        std::vector<long> label(Nq, static_cast<long>(K1 - 1));
        if (t < matches.size())
            for (std::size_t g = 0; g < matches[t].query_of_gt.size(); ++g)
                label[matches[t].query_of_gt[g]] = static_cast<long>(targets.frames[t].classes[g]);
        for (std::size_t q = 0; q < Nq; ++q) {
            const double wq = label[q] == static_cast<long>(K1 - 1) ? no_object_weight : 1.0;
            weight[(t * Nq + q) * K1 + static_cast<std::size_t>(label[q])] = wq;
            total += wq;
        }
    }
    Tensor logp = log_softmax(cls_logits, -1);
    if (total == 0.0) return scale(sum(logp), 0.0);
    return scale(sum(mul(logp, Tensor(cls_logits.shape(), std::move(weight)))), -1.0 / total);
}

// Mean over matched instances of (pixel-mean BCE + Dice), Dice smoothing 1.
inline Tensor mask_loss(const Tensor& mask_logits, const std::vector<MatchResult>& matches, const ClipTargets& targets) {
    const std::size_t T = mask_logits.dim(0), Nq = mask_logits.dim(1);
    const std::size_t P = mask_logits.dim(2) * mask_logits.dim(3);
    std::vector<std::size_t> rows;
    std::vector<double> tgt;
    for (std::size_t t = 0; t < T && t < matches.size(); ++t) {
        if (!targets.is_annotated(t)) continue;
        const auto& m = matches[t];
        for (std::size_t g = 0; g < m.query_of_gt.size(); ++g) {
            rows.push_back(t * Nq + m.query_of_gt[g]);
            const auto src = targets.frames[t].masks.data().subspan(g * P, P);
            tgt.insert(tgt.end(), src.begin(), src.end());
        }
    }
    if (rows.empty()) return scale(sum(mask_logits), 0.0);
    const std::size_t M = rows.size();
    Tensor pred = index_select0(reshape(mask_logits, {T * Nq, P}), rows);
    Tensor target({M, P}, std::move(tgt));
    Tensor bce = scale(sum(bce_with_logits(pred, target)), 1.0 / static_cast<double>(M * P));
    Tensor prob = sigmoid(pred);
    Tensor num = add_scalar(scale(sum_axis(mul(prob, target), 1), 2.0), 1.0);
    Tensor den = add_scalar(add(sum_axis(prob, 1), sum_axis(target, 1)), 1.0);
    Tensor dice = add_scalar(scale(mean(div(num, den)), -1.0), 1.0);
    return add(bce, dice);
}

enum class AdaSource { probabilities, logits };

inline AdaSource parse_ada_source(std::string_view s) {
    if (s == "probabilities") return AdaSource::probabilities;
    if (s == "logits") return AdaSource::logits;
    throw ConfigError("unknown ada source '" + std::string(s) + "' (probabilities|logits)");
}

inline std::string to_string(AdaSource s) { return s == AdaSource::probabilities ? "probabilities" : "logits"; }

// Per-pair term exp(S - 1) * (1 - S).
inline double ada_term(double s) { return std::exp(s - 1.0) * (1.0 - s); }

// Each frame's masks (all queries, all pixels) flattened to one vector.
inline Tensor adaptive_consistency_loss(const Tensor& mask_logits, AdaSource source = AdaSource::probabilities) {
    if (mask_logits.rank() != 4) throw DimensionError("adaptive_consistency_loss expects [T,N_q,H,W]");
    const std::size_t T = mask_logits.dim(0);
    if (T < 2) return scale(sum(mask_logits), 0.0);
    Tensor x = source == AdaSource::probabilities ? sigmoid(mask_logits) : mask_logits;
    Tensor flat = reshape(x, {T, x.size() / T});
    Tensor total;
    for (std::size_t t = 0; t + 1 < T; ++t) {
        Tensor s = cosine_similarity(slice0(flat, t, t + 1), slice0(flat, t + 1, t + 2));
        Tensor term = mul(exp(add_scalar(s, -1.0)), add_scalar(scale(s, -1.0), 1.0));
        total = total.defined() ? add(total, term) : term;
    }
    return total;
}

struct LossBreakdown {
    Tensor total;
    double cls = 0.0;   // lambda_cls * sum over layers of L_cls
    double mask = 0.0;  // lambda_mask * sum over layers of L_mask
    double ada = 0.0;   // lambda_ada * L_ada
};

// Assignments per layer. With replay set, total_loss reuses them instead of
// matching again (the assignment is a constant of the gradient).
struct MatchMemo {
    std::vector<std::vector<MatchResult>> layers;
    bool replay = false;
};

inline std::size_t default_ada_layer(std::size_t layers) { return layers / 2; }

// Deep-supervised objective: every layer is matched and scored; L_ada uses
// only the designated intermediate layer.
inline LossBreakdown total_loss(const std::vector<PredictionSet>& layers, const ClipTargets& targets,
                                const LossWeights& w, std::optional<std::size_t> ada_layer = {},
                                AdaSource ada_source = AdaSource::probabilities, MatchMemo* memo = nullptr) {
    w.validate();
    if (layers.empty()) throw ContractError("total_loss: no predictions");
    const std::size_t ada_idx = ada_layer.value_or(default_ada_layer(layers.size()));
    if (ada_idx >= layers.size()) throw ConfigError("ada layer index out of range");
    for (const auto& pred : layers) {
        const std::size_t P = pred.mask.dim(2) * pred.mask.dim(3);
        for (const auto& f : targets.frames)
            if (f.masks.size() != f.classes.size() * P)
                throw DimensionError("target masks " + shape_str(f.masks.shape()) + " do not match mask logits " +
                                     shape_str(pred.mask.shape()));
    }
    LossBreakdown out;
    if (memo && memo->replay && memo->layers.size() != layers.size())
        throw ContractError("match replay holds " + std::to_string(memo->layers.size()) + " layers, expected " +
                            std::to_string(layers.size()));
    if (memo && !memo->replay) memo->layers.clear();
    for (std::size_t l = 0; l < layers.size(); ++l) {
        const auto& pred = layers[l];
        auto matches = memo && memo->replay ? memo->layers[l] : match_clip(pred, targets, w);
        if (memo && !memo->replay) memo->layers.push_back(matches);
        Tensor lc = classification_loss(pred.cls, matches, targets, w.no_object);
        Tensor lm = mask_loss(pred.mask, matches, targets);
        out.cls += w.cls * lc.item();
        out.mask += w.mask * lm.item();
        Tensor term = add(scale(lc, w.cls), scale(lm, w.mask));
        out.total = out.total.defined() ? add(out.total, term) : term;
    }
    Tensor la = adaptive_consistency_loss(layers[ada_idx].mask, ada_source);
    out.ada = w.ada * la.item();
    out.total = add(out.total, scale(la, w.ada));
    return out;
}

}  // namespace combo
