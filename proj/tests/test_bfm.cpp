// Copyright (c) 2026 The combo-avs Authors
// SPDX-License-Identifier: Apache-2.0

#include <catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "combo/combo.hpp"

using namespace combo;

namespace {

BfmParams random_params(Rng& rng, std::size_t C, std::size_t D, std::size_t d) {
    auto R = [&](std::size_t r, std::size_t c) { return detail::random_tensor(rng, {r, c}); };
    return {R(C, d), R(D, d), R(C, d), R(D, d), R(C, d), R(D, d), R(d, d)};
}

void check_rows_sum_to_one(const Tensor& a) {
    const std::size_t rows = a.dim(0), cols = a.dim(1);
    for (std::size_t r = 0; r < rows; ++r) {
        double s = 0.0;
        for (std::size_t c = 0; c < cols; ++c) s += a[r * cols + c];
        REQUIRE(std::abs(s - 1.0) < 1e-12);
    }
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

}  // namespace

TEST_CASE("the similarity matrix is computed once and drives both directions", "[bfm]") {
    Rng rng(0, "test/bfm/shared");
    NoGradGuard guard;
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t M = 6 + trial, T = 1 + trial % 4, C = 5, D = 3, d = 4;
        BfmParams p = random_params(rng, C, D, d);
        Tensor x = detail::random_tensor(rng, {M, C}, -3.0, 3.0), a = detail::random_tensor(rng, {T, D}, -3.0, 3.0);
        BfmTrace trace;
        bilateral_attention(x, a, p, FusionMode::bilateral, {}, &trace);
        CHECK(trace.similarity_evaluations == 1);
        REQUIRE(trace.similarity.shape() == Shape{M, T});
        CHECK(trace.visual_attention.values() == softmax(trace.similarity, -1).values());
        CHECK(trace.audio_attention.values() == softmax(transpose(trace.similarity), -1).values());
        check_rows_sum_to_one(trace.visual_attention);
        check_rows_sum_to_one(trace.audio_attention);
    }
}

TEST_CASE("the module forward also evaluates the similarity once", "[bfm]") {
    ParamStore store(1);
    BilateralFusion bfm(store, 6, 4, 5, 3, FusionMode::bilateral);
    Rng rng(1, "test/bfm/module");
    BfmTrace trace;
    NoGradGuard guard;
    FusedPair out = bfm.forward(detail::random_tensor(rng, {3, 6, 4, 4}), detail::random_tensor(rng, {3, 4}), &trace);
    CHECK(trace.similarity_evaluations == 1);
    CHECK(trace.similarity.shape() == Shape{48, 3});
    CHECK(out.pixels.shape() == Shape{3, 5, 4, 4});
    CHECK(out.audio.shape() == Shape{3, 5});
}

TEST_CASE("fusion modes switch each direction independently", "[bfm]") {
    Rng rng(2, "test/bfm/modes");
    NoGradGuard guard;
    const std::size_t M = 10, T = 3, C = 4, D = 3, d = 5;
    BfmParams p = random_params(rng, C, D, d);
    Tensor x = detail::random_tensor(rng, {M, C}), a = detail::random_tensor(rng, {T, D});
    const Tensor proj_pixels = matmul(x, p.w_pixel_res);
    const Tensor proj_audio = matmul(matmul(a, p.w_audio_in), p.w_audio_out);

    BfmTrace none_trace;
    FusedTokens none = bilateral_attention(x, a, p, FusionMode::none, {}, &none_trace);
    CHECK(none.pixels.values() == proj_pixels.values());
    CHECK(none.audio.values() == proj_audio.values());
    CHECK(none_trace.similarity_evaluations == 0);

    FusedTokens vis = bilateral_attention(x, a, p, FusionMode::visual_only);
    CHECK(vis.audio.values() == proj_audio.values());
    CHECK(vis.pixels.values() != proj_pixels.values());

    FusedTokens aud = bilateral_attention(x, a, p, FusionMode::audio_only);
    CHECK(aud.pixels.values() == proj_pixels.values());
    CHECK(aud.audio.values() != proj_audio.values());

    FusedTokens both = bilateral_attention(x, a, p, FusionMode::bilateral);
    CHECK(both.pixels.values() == vis.pixels.values());
    CHECK(both.audio.values() == aud.audio.values());
}

TEST_CASE("bilateral output matches the attention formulas written out", "[bfm]") {
    Rng rng(3, "test/bfm/closed");
    NoGradGuard guard;
    const std::size_t M = 7, T = 2, C = 3, D = 4, d = 6;
    BfmParams p = random_params(rng, C, D, d);
    Tensor x = detail::random_tensor(rng, {M, C}), a = detail::random_tensor(rng, {T, D});
    FusedTokens out = bilateral_attention(x, a, p);

    Tensor s = scale(matmul(matmul(x, p.w_q), transpose(matmul(a, p.w_k))), 1.0 / std::sqrt(6.0));
    Tensor pixels = add(matmul(softmax(s, -1), matmul(a, p.w_value_aud)), matmul(x, p.w_pixel_res));
    Tensor audio = matmul(add(matmul(softmax(transpose(s), -1), matmul(x, p.w_value_vis)), matmul(a, p.w_audio_in)),
                          p.w_audio_out);
    CHECK(max_abs_diff(out.pixels, pixels) < 1e-12);
    CHECK(max_abs_diff(out.audio, audio) < 1e-12);
}

TEST_CASE("permuting pixel tokens permutes the pixel output and keeps the audio output", "[bfm]") {
    Rng rng(4, "test/bfm/perm");
    NoGradGuard guard;
    const std::size_t M = 12, T = 3, C = 4, D = 3, d = 5;
    BfmParams p = random_params(rng, C, D, d);
    Tensor x = detail::random_tensor(rng, {M, C}), a = detail::random_tensor(rng, {T, D});
    FusedTokens ref = bilateral_attention(x, a, p);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<std::size_t> perm(M);
        std::iota(perm.begin(), perm.end(), 0);
        std::shuffle(perm.begin(), perm.end(), rng.engine());
        FusedTokens out = bilateral_attention(index_select0(x, perm), a, p);
        CHECK(max_abs_diff(out.pixels, index_select0(ref.pixels, perm)) < 1e-12);
        CHECK(max_abs_diff(out.audio, ref.audio) < 1e-12);
    }
}

TEST_CASE("per-frame attention restricts each token to its own frame", "[bfm]") {
    Rng rng(5, "test/bfm/perframe");
    NoGradGuard guard;
    const std::size_t T = 2, per = 4, M = T * per, C = 3, D = 3, d = 4;
    BfmParams p = random_params(rng, C, D, d);
    Tensor x = detail::random_tensor(rng, {M, C}), a = detail::random_tensor(rng, {T, D});
    std::vector<std::size_t> frames(M);
    for (std::size_t m = 0; m < M; ++m) frames[m] = m / per;
    BfmTrace trace;
    bilateral_attention(x, a, p, FusionMode::bilateral, frames, &trace);
    for (std::size_t m = 0; m < M; ++m) CHECK(trace.visual_attention[m * T + frames[m]] == 1.0);
    check_rows_sum_to_one(trace.audio_attention);
    for (std::size_t t = 0; t < T; ++t)
        for (std::size_t m = 0; m < M; ++m)
            if (frames[m] != t) CHECK(trace.audio_attention[t * M + m] == 0.0);
}

TEST_CASE("both attention directions pass the gradient check", "[bfm][gradcheck]") {
    for (std::uint64_t seed : {0u, 1u}) {
        for (const auto& c : gradcheck_bfm(seed)) {
            INFO(c.name << " seed " << seed << " error " << c.report.max_rel_error);
            CHECK(c.passed());
        }
    }
}

TEST_CASE("fusion mode names parse and unknown names are config errors", "[bfm][errors]") {
    for (FusionMode m : {FusionMode::none, FusionMode::visual_only, FusionMode::audio_only, FusionMode::bilateral})
        CHECK(parse_fusion_mode(to_string(m)) == m);
    CHECK_THROWS_AS(parse_fusion_mode("sideways"), ConfigError);
}

TEST_CASE("mis-shaped inputs are dimension errors", "[bfm][errors]") {
    Rng rng(6, "test/bfm/errors");
    BfmParams p = random_params(rng, 3, 2, 4);
    CHECK_THROWS_AS(bilateral_attention(Tensor::zeros({5, 4}), Tensor::zeros({2, 2}), p), DimensionError);
    CHECK_THROWS_AS(bilateral_attention(Tensor::zeros({5, 3}), Tensor::zeros({2, 3}), p), DimensionError);
    ParamStore store(6);
    BilateralFusion bfm(store, 3, 2, 4, 2, FusionMode::bilateral);
    CHECK_THROWS_AS(bfm.forward(Tensor::zeros({2, 3, 2, 2}), Tensor::zeros({3, 2})), DimensionError);
}
