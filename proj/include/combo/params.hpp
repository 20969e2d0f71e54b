// Copyright (c) 2026 The combo-avs Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "combo/rng.hpp"
#include "combo/serialize.hpp"
#include "combo/tensor.hpp"

namespace combo {

struct Init {
    enum class Kind { zeros, ones, normal, uniform };
    Kind kind = Kind::zeros;
    double scale = 0.0;

    static Init zeros() { return {Kind::zeros, 0.0}; }
    static Init ones() { return {Kind::ones, 0.0}; }
    static Init normal(double stddev) { return {Kind::normal, stddev}; }
    static Init uniform(double bound) { return {Kind::uniform, bound}; }
    static Init he(std::size_t fan_in) { return normal(std::sqrt(2.0 / static_cast<double>(fan_in))); }
    static Init xavier(std::size_t fan_in, std::size_t fan_out) {
        return uniform(std::sqrt(6.0 / static_cast<double>(fan_in + fan_out)));
    }
};

// Named trainable parameters. Each tensor is initialized from its own random
// stream keyed by (seed, name), so the values of a parameter do not depend on
// which other parameters exist.
class ParamStore {
public:
    explicit ParamStore(std::uint64_t seed) : seed_(seed) {}

    Tensor create(const std::string& name, Shape shape, Init init) {
        if (params_.count(name)) throw ConfigError("duplicate parameter name: " + name);
        std::vector<double> values(numel(shape), 0.0);
        Rng rng(seed_, "param/" + name);
        for (auto& v : values) {
            switch (init.kind) {
                case Init::Kind::zeros: v = 0.0; break;
                case Init::Kind::ones: v = 1.0; break;
                case Init::Kind::normal: v = rng.normal(0.0, init.scale); break;
                case Init::Kind::uniform: v = rng.uniform(-init.scale, init.scale); break;
            }
        }
        Tensor t(std::move(shape), std::move(values), true);
        params_.emplace(name, t);
        return t;
    }

    bool contains(const std::string& name) const { return params_.count(name) != 0; }

    Tensor get(const std::string& name) const {
        auto it = params_.find(name);
        if (it == params_.end()) throw ConfigError("unknown parameter: " + name);
        return it->second;
    }

    const std::map<std::string, Tensor>& items() const { return params_; }

    std::vector<Tensor> tensors() const {
        std::vector<Tensor> out;
        for (const auto& [_, t] : params_) out.push_back(t);
        return out;
    }

    std::size_t count() const {
        std::size_t n = 0;
        for (const auto& [_, t] : params_) n += t.size();
        return n;
    }

    void zero_grad() {
        for (auto& [_, t] : params_) t.zero_grad();
    }

    std::uint64_t seed() const noexcept { return seed_; }

    // One CTNS file per parameter plus a JSON manifest {name: file}.
    nlohmann::json save(const std::filesystem::path& dir) const {
        std::filesystem::create_directories(dir);
        nlohmann::json files = nlohmann::json::object();
        std::size_t i = 0;
        for (const auto& [name, t] : params_) {
            char buf[32];
            std::snprintf(buf, sizeof buf, "p%04zu.ctns", i++);
            save_tensor(dir / buf, t);
            files[name] = buf;
        }
        return files;
    }

    void load(const std::filesystem::path& dir, const nlohmann::json& files) {
        for (auto& [name, t] : params_) {
            if (!files.contains(name)) throw CheckpointError("checkpoint missing parameter " + name);
            Tensor loaded = load_tensor(dir / files.at(name).get<std::string>());
            if (loaded.shape() != t.shape()) {
                throw CheckpointError("checkpoint parameter " + name + " has shape " + shape_str(loaded.shape()) +
                                      ", model expects " + shape_str(t.shape()));
            }
            auto dst = t.mutable_data();
            std::copy(loaded.data().begin(), loaded.data().end(), dst.begin());
        }
        for (auto it = files.begin(); it != files.end(); ++it)
            if (!params_.count(it.key())) throw CheckpointError("checkpoint has unknown parameter " + it.key());
    }

private:
    std::uint64_t seed_;
    std::map<std::string, Tensor> params_;
};

}  // namespace combo
