// Copyright (c) 2026 The combo-avs Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "combo/metrics.hpp"
#include "combo/model.hpp"
#include "combo/train.hpp"

namespace combo {

// Scores prediction/ground-truth pairs in the given order.
inline MetricReport evaluate_maps(const std::vector<std::string>& ids, const std::vector<SemanticMap>& preds,
                                  const std::vector<SemanticMap>& gts) {
    if (ids.size() != preds.size() || preds.size() != gts.size()) throw DimensionError("evaluate_maps: length mismatch");
    MetricAccumulator acc;
    for (std::size_t i = 0; i < ids.size(); ++i) acc.add(ids[i], preds[i], gts[i]);
    return acc.report();
}

inline std::vector<SemanticMap> predict_clips(const ComboModel& model, const std::vector<PreparedClip>& clips) {
    std::vector<SemanticMap> preds(clips.size());
    parallel_for(clips.size(), [&](std::size_t i) { preds[i] = model.predict(clips[i].input); });
    return preds;
}

inline MetricReport evaluate_model(const ComboModel& model, const std::vector<PreparedClip>& clips) {
    std::vector<std::string> ids;
    std::vector<SemanticMap> gts;
    for (const auto& c : clips) {
        ids.push_back(c.id);
        gts.push_back(c.gt);
    }
    return evaluate_maps(ids, predict_clips(model, clips), gts);
}

inline void write_predictions(const std::filesystem::path& dir, const std::vector<PreparedClip>& clips,
                              const std::vector<SemanticMap>& preds) {
    for (std::size_t i = 0; i < clips.size(); ++i) {
        const auto clip_dir = dir / clips[i].id;
        std::filesystem::create_directories(clip_dir);
        for (std::size_t t = 0; t < preds[i].frames; ++t)
            write_pgm(clip_dir / ("pred_" + std::to_string(t) + ".pgm"), frame_to_pgm(preds[i], t));
    }
}

inline void write_report(const std::filesystem::path& path, const MetricReport& report) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream os(path);
    if (!os) throw IoError("cannot write report " + path.string());
    os << report.to_json().dump(2) << '\n';
}

// eval subcommand: checkpoint + dataset split -> report JSON and predicted
// label maps next to it (<report stem>_predictions/).
inline MetricReport evaluate_run(const std::filesystem::path& checkpoint, const std::filesystem::path& data,
                                 const std::filesystem::path& report_path, const std::string& split = "val",
                                 std::optional<double> background_threshold = {}) {
    ComboModel model = ComboModel::load(checkpoint);
    const DatasetInfo info = load_dataset_info(data);
    check_compatible(model.config(), info.options, "eval");
    RunConfig cfg = model.config();
    if (background_threshold) cfg.background_threshold = *background_threshold;
    const auto clips = load_prepared(data, info, split, cfg);
    std::vector<SemanticMap> preds(clips.size());
    parallel_for(clips.size(), [&](std::size_t i) {
        NoGradGuard guard;
        auto layers = model.forward(clips[i].input);
        preds[i] = predict_semantic(layers.back(), cfg.height, cfg.width, cfg.background_threshold);
    });
    std::vector<std::string> ids;
    std::vector<SemanticMap> gts;
    for (const auto& c : clips) {
        ids.push_back(c.id);
        gts.push_back(c.gt);
    }
    MetricReport report = evaluate_maps(ids, preds, gts);
    write_report(report_path, report);
    auto pred_dir = report_path;
    pred_dir.replace_filename(report_path.stem().string() + "_predictions");
    write_predictions(pred_dir, clips, preds);
    return report;
}

}  // namespace combo
