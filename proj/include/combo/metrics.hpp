// Copyright (c) 2026 The combo-avs Authors
// SPDX-License-Identifier: Apache-2.0
//
// Region metrics: Jaccard (IoU) and F-beta (beta^2 = 0.3). Per clip, every
// class present in the prediction or the ground truth is scored over all
// frames jointly; clip scores average those classes and the dataset score
// averages clips.

#pragma once

#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "combo/inference.hpp"

namespace combo {

inline constexpr double kFBetaSquared = 0.3;

struct ClassCounts {
    std::size_t pred = 0, gt = 0, inter = 0;
};

// Counts for classes 1..K_c (index 0 unused).
inline std::vector<ClassCounts> class_counts(const SemanticMap& pred, const SemanticMap& gt) {
    if (pred.frames != gt.frames || pred.height != gt.height || pred.width != gt.width)
        throw DimensionError("metric inputs differ in shape: " + std::to_string(pred.frames) + "x" +
                             std::to_string(pred.height) + "x" + std::to_string(pred.width) + " vs " +
                             std::to_string(gt.frames) + "x" + std::to_string(gt.height) + "x" + std::to_string(gt.width));
    std::size_t K = std::max(pred.num_classes, gt.num_classes);
    for (auto v : pred.labels) K = std::max<std::size_t>(K, v);
    for (auto v : gt.labels) K = std::max<std::size_t>(K, v);
    std::vector<ClassCounts> c(K + 1);
    for (std::size_t i = 0; i < pred.labels.size(); ++i) {
        const auto p = pred.labels[i], g = gt.labels[i];
        if (p) ++c[p].pred;
        if (g) ++c[g].gt;
        if (p && p == g) ++c[p].inter;
    }
    return c;
}

inline double jaccard_of(const ClassCounts& c) {
    const std::size_t uni = c.pred + c.gt - c.inter;
    return uni == 0 ? 1.0 : static_cast<double>(c.inter) / static_cast<double>(uni);
}

inline double fbeta(double precision, double recall, double beta2 = kFBetaSquared) {
    const double den = beta2 * precision + recall;
    return den == 0.0 ? 0.0 : (1.0 + beta2) * precision * recall / den;
}

inline double fscore_of(const ClassCounts& c) {
    if (c.pred == 0 && c.gt == 0) return 1.0;
    const double precision = c.pred ? static_cast<double>(c.inter) / static_cast<double>(c.pred) : 0.0;
    const double recall = c.gt ? static_cast<double>(c.inter) / static_cast<double>(c.gt) : 0.0;
    return fbeta(precision, recall);
}

struct ClipScore {
    double jaccard = 1.0;
    double fscore = 1.0;
    std::map<std::size_t, std::pair<double, double>> per_class;  // class -> (J, F)
};

inline ClipScore score_clip(const SemanticMap& pred, const SemanticMap& gt) {
    const auto counts = class_counts(pred, gt);
    ClipScore s;
    double sj = 0.0, sf = 0.0;
    for (std::size_t k = 1; k < counts.size(); ++k) {
        if (counts[k].pred == 0 && counts[k].gt == 0) continue;
        const double j = jaccard_of(counts[k]), f = fscore_of(counts[k]);
        s.per_class[k] = {j, f};
        sj += j;
        sf += f;
    }
    if (!s.per_class.empty()) {
        s.jaccard = sj / static_cast<double>(s.per_class.size());
        s.fscore = sf / static_cast<double>(s.per_class.size());
    }
    return s;
}

inline double jaccard(const SemanticMap& pred, const SemanticMap& gt) { return score_clip(pred, gt).jaccard; }
inline double fscore(const SemanticMap& pred, const SemanticMap& gt) { return score_clip(pred, gt).fscore; }

// Mean cosine similarity of adjacent binary foreground maps. Two empty maps
// count as identical (1); one empty map against a non-empty one scores 0.
inline std::optional<double> interframe_similarity(const SemanticMap& pred) {
    if (pred.frames < 2) return std::nullopt;
    const std::size_t hw = pred.plane();
    double total = 0.0;
    for (std::size_t t = 0; t + 1 < pred.frames; ++t) {
        std::size_t a = 0, b = 0, ab = 0;
        for (std::size_t p = 0; p < hw; ++p) {
            const bool x = pred.labels[t * hw + p] != 0, y = pred.labels[(t + 1) * hw + p] != 0;
            a += x;
            b += y;
            ab += x && y;
        }
        if (a == 0 && b == 0) total += 1.0;
        else if (a && b) total += static_cast<double>(ab) / std::sqrt(static_cast<double>(a) * static_cast<double>(b));
    }
    return total / static_cast<double>(pred.frames - 1);
}

struct MetricReport {
    double miou = 1.0;
    double fscore = 1.0;
    std::optional<double> interframe_similarity;
    std::map<std::size_t, std::pair<double, double>> per_class;  // mean over clips where present
    std::vector<std::pair<std::string, ClipScore>> per_clip;

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json j;
        j["miou"] = miou;
        j["fscore"] = fscore;
        nlohmann::ordered_json pc = nlohmann::ordered_json::object();
        for (const auto& [k, v] : per_class) pc[std::to_string(k)] = {{"jaccard", v.first}, {"fscore", v.second}};
        j["per_class"] = pc;
        j["interframe_similarity"] = interframe_similarity ? nlohmann::ordered_json(*interframe_similarity)
                                                           : nlohmann::ordered_json(nullptr);
        nlohmann::ordered_json clips = nlohmann::ordered_json::array();
        for (const auto& [id, s] : per_clip) clips.push_back({{"clip", id}, {"jaccard", s.jaccard}, {"fscore", s.fscore}});
        j["per_clip"] = clips;
        return j;
    }
};

// Accumulates clips in insertion order so reports are reproducible.
class MetricAccumulator {
public:
    void add(const std::string& clip_id, const SemanticMap& pred, const SemanticMap& gt) {
        ClipScore s = score_clip(pred, gt);
        for (const auto& [k, v] : s.per_class) {
            auto& acc = class_sum_[k];
            acc[0] += v.first;
            acc[1] += v.second;
            acc[2] += 1.0;
        }
        if (auto sim = interframe_similarity(pred)) {
            sim_sum_ += *sim;
            ++sim_count_;
        }
        clips_.emplace_back(clip_id, std::move(s));
    }

    MetricReport report() const {
        MetricReport r;
        r.per_clip = clips_;
        if (!clips_.empty()) {
            double sj = 0.0, sf = 0.0;
            for (const auto& c : clips_) {
                sj += c.second.jaccard;
                sf += c.second.fscore;
            }
            r.miou = sj / static_cast<double>(clips_.size());
            r.fscore = sf / static_cast<double>(clips_.size());
        }
        for (const auto& [k, a] : class_sum_) r.per_class[k] = {a[0] / a[2], a[1] / a[2]};
        if (sim_count_) r.interframe_similarity = sim_sum_ / static_cast<double>(sim_count_);
        return r;
    }

private:
    std::vector<std::pair<std::string, ClipScore>> clips_;
    std::map<std::size_t, std::array<double, 3>> class_sum_;
    double sim_sum_ = 0.0;
    std::size_t sim_count_ = 0;
};

}  // namespace combo
