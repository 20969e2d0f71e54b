// Copyright (c) 2026 The combo-avs Authors
// SPDX-License-Identifier: Apache-2.0
//
// Named finite-difference checks: every differentiable primitive, the fusion
// block, the query decoder, and the full training loss of a micro model.

#pragma once

#include <functional>
#include <string>
#include <vector>

#include "combo/gradcheck.hpp"
#include "combo/model.hpp"
#include "combo/synthetic.hpp"

namespace combo {

struct GradCheckCase {
    std::string module;
    std::string name;
    double tolerance = 0.0;
    GradCheckReport report;

    bool passed() const { return report.max_rel_error < tolerance; }
};

inline constexpr double kElementaryTolerance = 1e-6;
inline constexpr double kComposedTolerance = 1e-4;
inline constexpr double kComposedScaleFloor = 1e-4;
inline constexpr double kElementaryStep = 3e-4;
inline constexpr double kComposedStep = 1e-5;

inline GradCheckOptions elementary_options() {
    GradCheckOptions o;
    o.step = kElementaryStep;
    o.five_point = true;
    return o;
}

namespace detail {

inline Tensor random_tensor(Rng& rng, const Shape& shape, double lo = -1.0, double hi = 1.0) {
    std::vector<double> v(numel(shape));
    for (auto& x : v) x = rng.uniform(lo, hi);
    return Tensor(shape, std::move(v));
}

// Values bounded away from zero so relu and division stay smooth.
inline Tensor away_from_zero(Rng& rng, const Shape& shape) {
    std::vector<double> v(numel(shape));
    for (auto& x : v) x = (rng.bernoulli(0.5) ? 1.0 : -1.0) * rng.uniform(0.1, 1.0);
    return Tensor(shape, std::move(v));
}

}  // namespace detail

inline std::vector<GradCheckCase> gradcheck_tensor(std::uint64_t seed) {
    Rng rng(seed, "gradcheck/tensor");
    std::vector<GradCheckCase> out;
    auto run = [&](const std::string& name, std::vector<Tensor> inputs, std::function<Tensor(const std::vector<Tensor>&)> f) {
        Rng proj(seed, "gradcheck/tensor/" + name);
        Tensor probe = f(inputs);
        Tensor w = detail::random_tensor(proj, probe.shape());
        auto loss = [&] { return sum(mul(f(inputs), w)); };
        out.push_back({"tensor", name, kElementaryTolerance, finite_difference_check(loss, inputs, elementary_options())});
    };
    using V = std::vector<Tensor>;
    auto R = [&](const Shape& s) { return detail::random_tensor(rng, s); };

    run("matmul", {R({3, 4}), R({4, 5})}, [](const V& v) { return matmul(v[0], v[1]); });
    run("bmm", {R({2, 3, 4}), R({2, 4, 2})}, [](const V& v) { return bmm(v[0], v[1]); });
    run("add_broadcast", {R({2, 3, 4}), R({4})}, [](const V& v) { return add(v[0], v[1]); });
    run("sub_broadcast", {R({2, 3}), R({2, 3})}, [](const V& v) { return sub(v[0], v[1]); });
    run("mul_broadcast", {R({2, 3, 4}), R({3, 4})}, [](const V& v) { return mul(v[0], v[1]); });
    run("div", {R({3, 4}), detail::away_from_zero(rng, {3, 4})}, [](const V& v) { return div(v[0], v[1]); });
    run("scale_add_scalar", {R({5})}, [](const V& v) { return add_scalar(scale(v[0], -1.7), 0.3); });
    run("exp", {R({6})}, [](const V& v) { return exp(v[0]); });
    run("log", {detail::random_tensor(rng, {6}, 0.2, 2.0)}, [](const V& v) { return log(v[0]); });
    run("sigmoid", {R({6})}, [](const V& v) { return sigmoid(v[0]); });
    run("relu", {detail::away_from_zero(rng, {8})}, [](const V& v) { return relu(v[0]); });
    {
        Tensor target = detail::random_tensor(rng, {2, 5}, 0.0, 1.0);
        run("bce_with_logits", {detail::random_tensor(rng, {2, 5}, -3.0, 3.0)},
            [target](const V& v) { return bce_with_logits(v[0], target); });
    }
    run("sum_mean", {R({3, 4})}, [](const V& v) { return add(scale(sum(v[0]), 0.5), mean(v[0])); });
    run("sum_axis", {R({2, 3, 4})}, [](const V& v) { return sum_axis(v[0], 1); });
    run("mean_axis", {R({2, 3, 4})}, [](const V& v) { return mean_axis(v[0], -1); });
    run("global_avg_pool", {R({2, 3, 4, 4})}, [](const V& v) { return global_avg_pool(v[0]); });
    run("softmax", {R({3, 5})}, [](const V& v) { return softmax(v[0], -1); });
    run("softmax_axis0", {R({3, 5})}, [](const V& v) { return softmax(v[0], 0); });
    run("log_softmax", {R({2, 3, 4})}, [](const V& v) { return log_softmax(v[0], -1); });
    {
        std::vector<std::uint8_t> blocked{0, 1, 0, 1, 1, 0, 0, 0, 0, 1, 1, 1, 0, 0, 1};
        run("masked_softmax", {R({3, 5})}, [blocked](const V& v) { return masked_softmax(v[0], blocked); });
    }
    run("layer_norm", {R({3, 6}), R({6}), R({6})}, [](const V& v) { return layer_norm(v[0], v[1], v[2]); });
    run("cosine_similarity", {R({1, 6}), R({1, 6})}, [](const V& v) { return cosine_similarity(v[0], v[1]); });
    run("conv2d_stride1", {R({2, 2, 5, 5}), R({3, 2, 3, 3}), R({3})},
        [](const V& v) { return conv2d(v[0], v[1], v[2], 1); });
    run("conv2d_stride2", {R({1, 2, 6, 6}), R({2, 2, 3, 3}), R({2})},
        [](const V& v) { return conv2d(v[0], v[1], v[2], 2); });
    run("conv2d_k5_stride4", {R({1, 3, 8, 8}), R({2, 3, 5, 5})}, [](const V& v) { return conv2d(v[0], v[1], 4); });
    run("upsample_nearest2x", {R({1, 2, 3, 3})}, [](const V& v) { return upsample_nearest2x(v[0]); });
    run("upsample_bilinear", {R({1, 2, 3, 3})}, [](const V& v) { return upsample_bilinear(v[0], 7, 5); });
    run("avg_pool", {R({1, 2, 4, 4})}, [](const V& v) { return avg_pool(v[0], 2); });
    run("reshape_permute", {R({2, 3, 4})}, [](const V& v) { return permute(reshape(v[0], {3, 2, 4}), {2, 0, 1}); });
    run("transpose", {R({3, 4})}, [](const V& v) { return transpose(v[0]); });
    run("repeat", {R({2, 3})}, [](const V& v) { return repeat(v[0], 1, 3); });
    run("expand_trailing", {R({2, 3})}, [](const V& v) { return expand_trailing(v[0], {2, 2}); });
    run("slice0", {R({4, 3})}, [](const V& v) { return slice0(v[0], 1, 3); });
    run("index_select0", {R({4, 3})}, [](const V& v) { return index_select0(v[0], {3, 0, 3}); });
    run("linear", {R({2, 3, 4}), R({4, 5}), R({5})}, [](const V& v) { return linear(v[0], v[1], v[2]); });
    return out;
}

inline std::vector<GradCheckCase> gradcheck_bfm(std::uint64_t seed) {
    Rng rng(seed, "gradcheck/bfm");
    const std::size_t M = 12, T = 3, C = 6, D = 5, d = 4;
    auto R = [&](const Shape& s) { return detail::random_tensor(rng, s, -0.8, 0.8); };
    std::vector<GradCheckCase> out;
    for (FusionMode mode : {FusionMode::bilateral, FusionMode::visual_only, FusionMode::audio_only}) {
        for (bool per_frame : {false, true}) {
            BfmParams p{R({C, d}), R({D, d}), R({C, d}), R({D, d}), R({C, d}), R({D, d}), R({d, d})};
            Tensor x = R({M, C}), a = R({T, D});
            std::vector<std::size_t> frames;
            if (per_frame)
                for (std::size_t m = 0; m < M; ++m) frames.push_back(m / (M / T));
            Tensor wp = R({M, d}), wa = R({T, d});
            auto loss = [&] {
                FusedTokens f = bilateral_attention(x, a, p, mode, frames);
                return add(sum(mul(f.pixels, wp)), sum(mul(f.audio, wa)));
            };
            std::vector<Tensor> inputs{x, a, p.w_q, p.w_k, p.w_value_vis, p.w_value_aud, p.w_pixel_res, p.w_audio_in,
                                       p.w_audio_out};
            GradCheckOptions opts;
            opts.scale_floor = kComposedScaleFloor;
            opts.step = kComposedStep;
            out.push_back({"bfm", to_string(mode) + (per_frame ? "_per_frame" : "_clip"), kComposedTolerance,
                           finite_difference_check(loss, inputs, opts)});
        }
    }
    return out;
}

// Micro configuration: T=2, 32x32 input (8x8 mask grid), d=8.
inline RunConfig micro_config(std::uint64_t seed) {
    RunConfig c;
    c.frames = 2;
    c.height = 32;
    c.width = 32;
    c.audio_dim = 4;
    c.model_dim = 8;
    c.pixel_dim = 8;
    c.num_queries = 4;
    c.rounds = 1;
    c.num_classes = 2;
    c.stage_channels = {4, 4, 8, 8};
    c.palette_capacity = 8;
    c.seed = seed;
    return c;
}

inline std::vector<GradCheckCase> gradcheck_decoder(std::uint64_t seed) {
    Rng rng(seed, "gradcheck/decoder");
    RunConfig cfg = micro_config(seed);
    cfg.rounds = 2;
    ParamStore store(seed);
    QueryDecoder dec(store, cfg.decoder());
    // Move off the zero-bias initialization to a generic point.
    Rng jitter(seed, "gradcheck/jitter");
    for (auto& t : store.tensors())
        for (auto& v : t.mutable_data()) v += jitter.normal(0.0, 0.05);
    const std::size_t T = cfg.frames, d = cfg.model_dim;
    PixelEmbeddings px;
    for (std::size_t lvl = 0; lvl < 4; ++lvl) {
        const std::size_t e = stage_extent(cfg.height, lvl);
        px.levels[lvl] = detail::random_tensor(rng, {T, cfg.pixel_dim, e, e});
    }
    Tensor mask_features = detail::random_tensor(rng, {T, d, 8, 8});
    Tensor audio = detail::random_tensor(rng, {T, d});
    std::vector<GradCheckCase> out;
    for (QueryMode mode : {QueryMode::add, QueryMode::all}) {
        Rng proj(seed, "gradcheck/decoder/" + to_string(mode));
        std::vector<Tensor> wcls, wmask;
        for (std::size_t l = 0; l < cfg.decoder().layers(); ++l) {
            wcls.push_back(detail::random_tensor(proj, {T, cfg.num_queries, cfg.num_classes + 1}));
            wmask.push_back(detail::random_tensor(proj, {T, cfg.num_queries, 8, 8}));
        }
        DecoderTrace trace;
        ReluGateReplay gates;
        auto loss = [&] {
            auto layers = dec.forward(dec.queries(audio, mode), px, mask_features, &trace);
            trace.replay = true;
            gates.arm();
            Tensor total;
            for (std::size_t l = 0; l < layers.size(); ++l) {
                Tensor term = add(sum(mul(layers[l].cls, wcls[l])), scale(sum(mul(layers[l].mask, wmask[l])), 0.1));
                total = total.defined() ? add(total, term) : term;
            }
            return total;
        };
        std::vector<Tensor> inputs = store.tensors();
        inputs.push_back(audio);
        inputs.push_back(mask_features);
        for (std::size_t lvl = 1; lvl < 4; ++lvl) inputs.push_back(px.levels[lvl]);
        GradCheckOptions opts;
        opts.max_coordinates = 600;
        opts.seed = seed;
        opts.scale_floor = kComposedScaleFloor;
        opts.step = kComposedStep;
        out.push_back({"decoder", "queries_" + to_string(mode), kComposedTolerance, finite_difference_check(loss, inputs, opts)});
    }
    return out;
}

// Full training objective of the micro model on one synthetic clip.
inline std::vector<GradCheckCase> gradcheck_loss(std::uint64_t seed) {
    RunConfig cfg = micro_config(seed);
    SyntheticOptions so;
    so.clips = 1;
    so.frames = cfg.frames;
    so.height = cfg.height;
    so.width = cfg.width;
    so.num_classes = cfg.num_classes;
    so.audio_dim = cfg.audio_dim;
    so.seed = seed;
    const Tensor sig = class_signatures(so.num_classes, so.audio_dim, so.seed);
    SyntheticClip clip = generate_clip(0, so, sig);
    const Palette palette = generate_palette(cfg.palette_capacity, seed);
    std::vector<GradCheckCase> out;
    for (FusionMode mode : {FusionMode::bilateral, FusionMode::none}) {
        RunConfig c = cfg;
        c.fusion = mode;
        ComboModel model(c);
        // Move off the zero-bias initialization to a generic point.
        Rng jitter(seed, "gradcheck/jitter");
        for (auto& t : model.params().tensors())
            for (auto& v : t.mutable_data()) v += jitter.normal(0.0, 0.05);
        PreparedClip prep = prepare_clip(clip, c, palette);
        ForwardTrace trace;
        MatchMemo memo;
        ReluGateReplay gates;
        auto loss = [&] {
            Tensor l = model.loss(prep.input, prep.targets, &trace, &memo).total;
            trace.decoder.replay = memo.replay = true;
            gates.arm();
            return l;
        };
        GradCheckOptions opts;
        opts.max_coordinates = 800;
        opts.seed = seed;
        opts.scale_floor = kComposedScaleFloor;
        opts.step = kComposedStep;
        out.push_back({"loss", "combo_" + to_string(mode), kComposedTolerance,
                       finite_difference_check(loss, model.params().tensors(), opts)});
    }
    return out;
}

inline std::vector<GradCheckCase> run_gradcheck(const std::string& module, std::uint64_t seed) {
    std::vector<GradCheckCase> all;
    auto append = [&](std::vector<GradCheckCase> v) { all.insert(all.end(), v.begin(), v.end()); };
    const bool every = module == "all";
    bool known = every;
    if (every || module == "tensor") append(gradcheck_tensor(seed)), known = true;
    if (every || module == "bfm") append(gradcheck_bfm(seed)), known = true;
    if (every || module == "decoder") append(gradcheck_decoder(seed)), known = true;
    if (every || module == "loss") append(gradcheck_loss(seed)), known = true;
    if (!known) throw ConfigError("unknown gradcheck module '" + module + "' (tensor|bfm|decoder|loss|all)");
    return all;
}

}  // namespace combo
