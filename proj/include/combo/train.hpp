// Copyright (c) 2026 The combo-avs Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "combo/model.hpp"
#include "combo/optim.hpp"
#include "combo/synthetic.hpp"

namespace combo {

struct LogRecord {
    std::size_t iteration = 0;
    double loss = 0.0, cls = 0.0, mask = 0.0, ada = 0.0;  // batch means, weighted by lambda

    nlohmann::ordered_json to_json() const {
        return {{"iter", iteration}, {"loss", loss}, {"cls", cls}, {"mask", mask}, {"ada", ada}};
    }
};

struct TrainResult {
    std::vector<LogRecord> log;
};

inline std::vector<PreparedClip> load_prepared(const std::filesystem::path& data, const DatasetInfo& info,
                                               const std::string& split, const RunConfig& cfg) {
    const auto ids = info.split(split);
    if (ids.empty()) throw IoError("dataset " + data.string() + " has no '" + split + "' clips");
    const Palette palette = model_palette(cfg);
    std::vector<PreparedClip> out(ids.size());
    parallel_for(ids.size(), [&](std::size_t i) { out[i] = prepare_clip(read_clip(data, ids[i], info.options), cfg, palette); });
    return out;
}

// Trains `model` in place on `clips`. `on_log` receives every logged record
// (iteration 0, every cfg.log_every iterations, and the last iteration).
inline TrainResult train_model(ComboModel& model, const std::vector<PreparedClip>& clips,
                               const std::function<void(const LogRecord&)>& on_log = {}) {
    const RunConfig& cfg = model.config();
    if (clips.empty()) throw ContractError("training needs at least one clip");
    auto params = model.params().tensors();
    AdamW opt(params, {cfg.lr, cfg.weight_decay});
    Rng sampler(cfg.seed, "batches");
    std::vector<std::size_t> order(clips.size());
    std::iota(order.begin(), order.end(), 0);
    std::size_t cursor = order.size();
    TrainResult result;

    auto should_log = [&](std::size_t it) { return it % cfg.log_every == 0 || it + 1 == cfg.iterations; };
    for (std::size_t it = 0; it < cfg.iterations; ++it) {
        opt.zero_grad();
        LogRecord rec;
        rec.iteration = it;
        const double inv_b = 1.0 / static_cast<double>(cfg.batch_size);
        for (std::size_t b = 0; b < cfg.batch_size; ++b) {
            if (cursor == order.size()) {
                std::shuffle(order.begin(), order.end(), sampler.engine());
                cursor = 0;
            }
            const PreparedClip& clip = clips[order[cursor++]];
            LossBreakdown lb;
            try {
                lb = model.loss(clip.input, clip.targets);
                if (!std::isfinite(lb.total.item())) throw NumericError("non-finite loss");
                backward(scale(lb.total, inv_b));
            } catch (const NumericError& e) {
                Tape::current().clear();
                throw NumericError("training diverged at iteration " + std::to_string(it) + " on " + clip.id +
                                   " (cls=" + std::to_string(lb.cls) + " mask=" + std::to_string(lb.mask) +
                                   " ada=" + std::to_string(lb.ada) + "): " + e.what());
            }
            rec.loss += inv_b * lb.total.item();
            rec.cls += inv_b * lb.cls;
            rec.mask += inv_b * lb.mask;
            rec.ada += inv_b * lb.ada;
        }
        opt.step();
        if (should_log(it)) {
            result.log.push_back(rec);
            if (on_log) on_log(rec);
        }
    }
    return result;
}

// train subcommand: dataset dir + config -> checkpoint dir with train_log.jsonl.
inline TrainResult train_run(const RunConfig& cfg, const std::filesystem::path& data, const std::filesystem::path& out) {
    const DatasetInfo info = load_dataset_info(data);
    check_compatible(cfg, info.options, "train");
    const auto clips = load_prepared(data, info, "train", cfg);
    ComboModel model(cfg);
    std::error_code ec;
    std::filesystem::create_directories(out, ec);
    if (ec) throw IoError("cannot create output directory " + out.string() + ": " + ec.message());
    std::ofstream log(out / "train_log.jsonl");
    if (!log) throw IoError("cannot write " + (out / "train_log.jsonl").string());
    TrainResult r = train_model(model, clips, [&](const LogRecord& rec) { log << rec.to_json().dump() << '\n' << std::flush; });
    model.save(out, cfg.iterations);
    return r;
}

}  // namespace combo
