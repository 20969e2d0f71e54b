// Copyright (c) 2026 The combo-avs Authors
// SPDX-License-Identifier: Apache-2.0
//
// Full network: Maskige -> siam encoder -> pixel decoder -> bilateral fusion
// -> query decoder. Parameters are created from named seed streams, so
// toggling a branch never perturbs the initialization of the others.

#pragma once

#include <filesystem>
#include <fstream>
#include <vector>

#include <nlohmann/json.hpp>

#include "combo/bilateral_fusion.hpp"
#include "combo/config.hpp"
#include "combo/maskige.hpp"
#include "combo/objectives.hpp"
#include "combo/pixel_decoder.hpp"
#include "combo/query_decoder.hpp"
#include "combo/siam_encoder.hpp"
#include "combo/synthetic.hpp"

namespace combo {

struct ModelInput {
    Tensor frames;   // [T, 3, H, W]
    Tensor maskige;  // [T, 3, H, W]
    Tensor audio;    // [T, D]
};

struct ForwardTrace {
    BfmTrace bfm;
    DecoderTrace decoder;
    PixelEmbeddings pixels;
    FusedPair fused;
};

class ComboModel {
public:
    explicit ComboModel(const RunConfig& cfg) : cfg_(cfg), store_(cfg.seed) {
        cfg.validate();
        encoder_ = SiamEncoder(store_, cfg.encoder(), cfg.siam);
        pixel_decoder_ = PixelDecoder(store_, cfg.stage_channels, cfg.pixel_dim);
        fusion_ = BilateralFusion(store_, cfg.pixel_dim, cfg.audio_dim, cfg.model_dim, cfg.frames, cfg.fusion,
                                  cfg.per_frame_attention);
        decoder_ = QueryDecoder(store_, cfg.decoder());
    }

    // One prediction set per decoder layer.
    std::vector<PredictionSet> forward(const ModelInput& in, ForwardTrace* trace = nullptr) const {
        if (in.frames.rank() != 4 || in.frames.dim(0) != cfg_.frames || in.frames.dim(2) != cfg_.height ||
            in.frames.dim(3) != cfg_.width)
            throw DimensionError("model expects frames [" + std::to_string(cfg_.frames) + "x3x" +
                                 std::to_string(cfg_.height) + "x" + std::to_string(cfg_.width) + "], got " +
                                 shape_str(in.frames.shape()));
        FeaturePyramid pyramid = encoder_.forward(in.frames, in.maskige);
        PixelEmbeddings pixels = pixel_decoder_.forward(pyramid);
        FusedPair fused = fusion_.forward(pixels.levels[0], in.audio, trace ? &trace->bfm : nullptr);
        QuerySet queries = decoder_.queries(fused.audio, cfg_.query_mode);
        auto out = decoder_.forward(queries, pixels, fused.pixels, trace ? &trace->decoder : nullptr);
        if (trace) {
            trace->pixels = pixels;
            trace->fused = fused;
        }
        return out;
    }

    LossBreakdown loss(const ModelInput& in, const ClipTargets& targets, ForwardTrace* trace = nullptr,
                       MatchMemo* memo = nullptr) const {
        return total_loss(forward(in, trace), targets, cfg_.loss_weights(), cfg_.ada_layer, cfg_.ada_source, memo);
    }

    SemanticMap predict(const ModelInput& in) const {
        NoGradGuard guard;
        auto layers = forward(in);
        return predict_semantic(layers.back(), cfg_.height, cfg_.width, cfg_.background_threshold);
    }

    const RunConfig& config() const noexcept { return cfg_; }
    ParamStore& params() noexcept { return store_; }
    const ParamStore& params() const noexcept { return store_; }
    SiamEncoder& encoder() noexcept { return encoder_; }
    BilateralFusion& fusion() noexcept { return fusion_; }
    const QueryDecoder& decoder() const noexcept { return decoder_; }

    void save(const std::filesystem::path& dir, std::size_t iterations) const {
        std::error_code ec;
        std::filesystem::create_directories(dir, ec);
        if (ec) throw IoError("cannot create checkpoint directory " + dir.string() + ": " + ec.message());
        nlohmann::ordered_json m;
        m["format"] = "combo-checkpoint";
        m["version"] = 1;
        m["iterations"] = iterations;
        m["config"] = cfg_.to_json();
        m["parameters"] = store_.save(dir);
        std::ofstream os(dir / "manifest.json");
        if (!os) throw IoError("cannot write " + (dir / "manifest.json").string());
        os << m.dump(2) << '\n';
    }

    static ComboModel load(const std::filesystem::path& dir) {
        const auto path = dir / "manifest.json";
        std::ifstream is(path);
        if (!is) throw CheckpointError("cannot open checkpoint manifest: " + path.string());
        nlohmann::json m;
        try {
            m = nlohmann::json::parse(is);
        } catch (const nlohmann::json::parse_error& e) {
            throw CheckpointError("checkpoint manifest " + path.string() + " is not valid JSON: " + e.what());
        }
        if (!m.contains("config") || !m.contains("parameters"))
            throw CheckpointError("checkpoint manifest " + path.string() + " is incomplete");
        RunConfig cfg;
        try {
            cfg = RunConfig::from_json(m["config"]);
        } catch (const ConfigError& e) {
            throw CheckpointError(std::string("checkpoint config invalid: ") + e.what());
        }
        ComboModel model(cfg);
        model.store_.load(dir, m["parameters"]);
        return model;
    }

private:
    RunConfig cfg_;
    ParamStore store_;
    SiamEncoder encoder_;
    PixelDecoder pixel_decoder_;
    BilateralFusion fusion_;
    QueryDecoder decoder_;
};

inline Palette model_palette(const RunConfig& cfg) { return default_palette(cfg.palette_capacity); }

// [T, 3, H, W] Maskige images of a clip's proposals.
inline Tensor clip_maskige(const SyntheticClip& clip, const Palette& palette) {
    std::vector<double> v;
    for (const auto& props : clip.proposals) {
        Tensor m = make_maskige(props, palette);
        v.insert(v.end(), m.data().begin(), m.data().end());
    }
    const std::size_t T = clip.proposals.size();
    return Tensor({T, 3, clip.frames.dim(2), clip.frames.dim(3)}, std::move(v));
}

// Instance targets at mask resolution (area fraction per cell).
inline ClipTargets clip_targets(const SyntheticClip& clip, std::size_t mask_h, std::size_t mask_w,
                                bool first_frame_only = false) {
    const std::size_t T = clip.instances.size(), H = clip.frames.dim(2), W = clip.frames.dim(3);
    if (H % mask_h || W % mask_w) throw DimensionError("mask resolution must divide the frame size");
    const std::size_t fy = H / mask_h, fx = W / mask_w;
    ClipTargets out;
    out.frames.resize(T);
    out.annotated.assign(T, !first_frame_only);
    if (first_frame_only && T) out.annotated[0] = true;
    for (std::size_t t = 0; t < T; ++t) {
        const auto& inst = clip.instances[t];
        const std::size_t G = inst.classes.size();
        std::vector<double> m(G * mask_h * mask_w, 0.0);
        for (std::size_t g = 0; g < G; ++g)
            for (std::size_t y = 0; y < H; ++y)
                for (std::size_t x = 0; x < W; ++x)
                    if (inst.masks.at(g, y, x)) m[(g * mask_h + y / fy) * mask_w + x / fx] += 1.0;
        for (auto& v : m) v /= static_cast<double>(fy * fx);
        out.frames[t].classes = inst.classes;
        out.frames[t].masks = Tensor({G, mask_h * mask_w}, std::move(m));
    }
    return out;
}

struct PreparedClip {
    std::string id;
    ModelInput input;
    ClipTargets targets;
    SemanticMap gt;
};

inline PreparedClip prepare_clip(const SyntheticClip& clip, const RunConfig& cfg, const Palette& palette) {
    PreparedClip p;
    p.id = clip.id;
    p.input = {clip.frames, clip_maskige(clip, palette), clip.audio};
    p.targets = clip_targets(clip, stage_extent(cfg.height, 0), stage_extent(cfg.width, 0), cfg.annotate_first_frame_only);
    p.gt = clip.gt;
    return p;
}

// The dataset must match the model's frame, image, audio and class shapes.
inline void check_compatible(const RunConfig& cfg, const SyntheticOptions& data, const char* what) {
    auto mismatch = [&](const char* field, std::size_t model, std::size_t dataset) {
        if (model != dataset)
            throw CheckpointError(std::string(what) + ": " + field + " is " + std::to_string(model) +
                                  " in the model but " + std::to_string(dataset) + " in the dataset");
    };
    mismatch("frames", cfg.frames, data.frames);
    mismatch("height", cfg.height, data.height);
    mismatch("width", cfg.width, data.width);
    mismatch("audio_dim", cfg.audio_dim, data.audio_dim);
    mismatch("num_classes", cfg.num_classes, data.num_classes);
}

}  // namespace combo
