// Copyright (c) 2026 The combo-avs Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <string>

#include <nlohmann/json.hpp>

#include "combo/bilateral_fusion.hpp"
#include "combo/inference.hpp"
#include "combo/objectives.hpp"
#include "combo/query_decoder.hpp"

namespace combo {

// Every knob of a run. Defaults are the desk-scale setup.
struct RunConfig {
    std::size_t frames = 3;         // T
    std::size_t height = 32;        // H
    std::size_t width = 32;         // W
    std::size_t audio_dim = 16;     // D
    std::size_t model_dim = 32;     // d
    std::size_t pixel_dim = 32;     // C
    std::size_t num_queries = 8;    // N_q
    std::size_t rounds = 3;         // L
    std::size_t num_classes = 3;    // K_c
    std::array<std::size_t, 4> stage_channels{16, 32, 64, 128};
    std::size_t palette_capacity = kDefaultPaletteCapacity;

    double lambda_cls = 2.0;
    double lambda_mask = 5.0;
    double lambda_ada = 10.0;
    double no_object_weight = 0.1;
    std::optional<std::size_t> ada_layer;
    AdaSource ada_source = AdaSource::probabilities;

    FusionMode fusion = FusionMode::bilateral;
    bool per_frame_attention = false;
    QueryMode query_mode = QueryMode::add;
    bool siam = true;
    bool shared_weights = false;
    double mask_threshold = 0.5;
    double background_threshold = kDefaultBackgroundThreshold;

    std::uint64_t seed = 0;
    std::size_t iterations = 2000;
    double lr = 1e-4;
    double weight_decay = 0.05;
    std::size_t batch_size = 4;
    std::size_t log_every = 50;
    bool annotate_first_frame_only = false;

    LossWeights loss_weights() const { return {lambda_cls, lambda_mask, lambda_ada, no_object_weight}; }

    DecoderConfig decoder() const {
        DecoderConfig d;
        d.width = model_dim;
        d.num_queries = num_queries;
        d.rounds = rounds;
        d.num_classes = num_classes;
        d.pixel_channels = pixel_dim;
        d.mask_threshold = mask_threshold;
        return d;
    }

    EncoderConfig encoder() const {
        EncoderConfig e;
        e.stage_channels = stage_channels;
        e.shared_weights = shared_weights;
        return e;
    }

    void validate() const {
        auto positive = [](std::size_t v, const char* name) {
            if (v == 0) throw ConfigError(std::string(name) + " must be positive");
        };
        positive(frames, "frames");
        positive(audio_dim, "audio_dim");
        positive(model_dim, "model_dim");
        positive(pixel_dim, "pixel_dim");
        positive(num_queries, "num_queries");
        positive(rounds, "rounds");
        positive(num_classes, "num_classes");
        positive(batch_size, "batch_size");
        positive(log_every, "log_every");
        positive(palette_capacity, "palette_capacity");
        for (auto c : stage_channels) positive(c, "stage_channels");
        if (height == 0 || width == 0 || height % 32 || width % 32)
            throw ConfigError("height and width must be positive multiples of 32, got " + std::to_string(height) + "x" +
                              std::to_string(width));
        if (pixel_dim % 2 || model_dim % 2) throw ConfigError("pixel_dim and model_dim must be even");
        if (shared_weights && !siam) throw ConfigError("shared_weights requires siam");
        if (!(mask_threshold > 0.0 && mask_threshold < 1.0)) throw ConfigError("mask_threshold must lie in (0, 1)");
        if (!(lr > 0.0)) throw ConfigError("lr must be positive");
        if (weight_decay < 0.0) throw ConfigError("weight_decay must be non-negative");
        if (background_threshold < 0.0) throw ConfigError("background_threshold must be non-negative");
        if (ada_layer && *ada_layer >= 3 * rounds) throw ConfigError("ada_layer exceeds decoder depth");
        if (num_classes > 255) throw ConfigError("num_classes above 255 cannot be stored as gray labels");
        loss_weights().validate();
    }

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json j;
        j["frames"] = frames;
        j["height"] = height;
        j["width"] = width;
        j["audio_dim"] = audio_dim;
        j["model_dim"] = model_dim;
        j["pixel_dim"] = pixel_dim;
        j["num_queries"] = num_queries;
        j["rounds"] = rounds;
        j["num_classes"] = num_classes;
        j["stage_channels"] = stage_channels;
        j["palette_capacity"] = palette_capacity;
        j["lambda_cls"] = lambda_cls;
        j["lambda_mask"] = lambda_mask;
        j["lambda_ada"] = lambda_ada;
        j["no_object_weight"] = no_object_weight;
        j["ada_layer"] = ada_layer ? nlohmann::ordered_json(*ada_layer) : nlohmann::ordered_json(nullptr);
        j["ada_source"] = to_string(ada_source);
        j["fusion"] = to_string(fusion);
        j["per_frame_attention"] = per_frame_attention;
        j["query_mode"] = to_string(query_mode);
        j["siam"] = siam;
        j["shared_weights"] = shared_weights;
        j["mask_threshold"] = mask_threshold;
        j["background_threshold"] = background_threshold;
        j["seed"] = seed;
        j["iterations"] = iterations;
        j["lr"] = lr;
        j["weight_decay"] = weight_decay;
        j["batch_size"] = batch_size;
        j["log_every"] = log_every;
        j["annotate_first_frame_only"] = annotate_first_frame_only;
        return j;
    }

    // Starts from the defaults; keys absent from `j` keep them. Unknown keys
    // and ill-typed values are rejected.
    static RunConfig from_json(const nlohmann::json& j) {
        if (!j.is_object()) throw ConfigError("config must be a JSON object");
        RunConfig c;
        using Setter = std::function<void(const nlohmann::json&)>;
        auto size = [](std::size_t& dst) -> Setter {
            return [&dst](const nlohmann::json& v) {
                if (!v.is_number_unsigned()) throw ConfigError("expected a non-negative integer");
                dst = v.get<std::size_t>();
            };
        };
        auto real = [](double& dst) -> Setter {
            return [&dst](const nlohmann::json& v) {
                if (!v.is_number()) throw ConfigError("expected a number");
                dst = v.get<double>();
            };
        };
        auto flag = [](bool& dst) -> Setter {
            return [&dst](const nlohmann::json& v) {
                if (!v.is_boolean()) throw ConfigError("expected a boolean");
                dst = v.get<bool>();
            };
        };
        auto text = [](auto parse) -> std::function<void(const nlohmann::json&)> {
            return [parse](const nlohmann::json& v) {
                if (!v.is_string()) throw ConfigError("expected a string");
                parse(v.get<std::string>());
            };
        };
        const std::map<std::string, Setter> fields{
            {"frames", size(c.frames)},
            {"height", size(c.height)},
            {"width", size(c.width)},
            {"audio_dim", size(c.audio_dim)},
            {"model_dim", size(c.model_dim)},
            {"pixel_dim", size(c.pixel_dim)},
            {"num_queries", size(c.num_queries)},
            {"rounds", size(c.rounds)},
            {"num_classes", size(c.num_classes)},
            {"stage_channels",
             [&c](const nlohmann::json& v) {
                 if (!v.is_array() || v.size() != 4) throw ConfigError("expected an array of 4 channel counts");
                 for (std::size_t i = 0; i < 4; ++i) {
                     if (!v[i].is_number_unsigned()) throw ConfigError("expected non-negative integers");
                     c.stage_channels[i] = v[i].get<std::size_t>();
                 }
             }},
            {"palette_capacity", size(c.palette_capacity)},
            {"lambda_cls", real(c.lambda_cls)},
            {"lambda_mask", real(c.lambda_mask)},
            {"lambda_ada", real(c.lambda_ada)},
            {"no_object_weight", real(c.no_object_weight)},
            {"ada_layer",
             [&c](const nlohmann::json& v) {
                 if (v.is_null()) c.ada_layer.reset();
                 else if (v.is_number_unsigned()) c.ada_layer = v.get<std::size_t>();
                 else throw ConfigError("expected null or a non-negative integer");
             }},
            {"ada_source", text([&c](const std::string& s) { c.ada_source = parse_ada_source(s); })},
            {"fusion", text([&c](const std::string& s) { c.fusion = parse_fusion_mode(s); })},
            {"per_frame_attention", flag(c.per_frame_attention)},
            {"query_mode", text([&c](const std::string& s) { c.query_mode = parse_query_mode(s); })},
            {"siam", flag(c.siam)},
            {"shared_weights", flag(c.shared_weights)},
            {"mask_threshold", real(c.mask_threshold)},
            {"background_threshold", real(c.background_threshold)},
            {"seed",
             [&c](const nlohmann::json& v) {
                 if (!v.is_number_unsigned()) throw ConfigError("expected a non-negative integer");
                 c.seed = v.get<std::uint64_t>();
             }},
            {"iterations", size(c.iterations)},
            {"lr", real(c.lr)},
            {"weight_decay", real(c.weight_decay)},
            {"batch_size", size(c.batch_size)},
            {"log_every", size(c.log_every)},
            {"annotate_first_frame_only", flag(c.annotate_first_frame_only)},
        };
        for (const auto& [key, value] : j.items()) {
            auto it = fields.find(key);
            if (it == fields.end()) throw ConfigError("unknown config key '" + key + "'");
            try {
                it->second(value);
            } catch (const ConfigError& e) {
                throw ConfigError("config key '" + key + "': " + e.what());
            }
        }
        c.validate();
        return c;
    }

    static RunConfig load(const std::filesystem::path& path) {
        std::ifstream is(path);
        if (!is) throw IoError("cannot open config: " + path.string());
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(is);
        } catch (const nlohmann::json::parse_error& e) {
            throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
        }
        return from_json(j);
    }
};

}  // namespace combo
