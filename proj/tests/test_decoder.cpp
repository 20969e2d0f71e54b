// Copyright (c) 2026 The combo-avs Authors
// SPDX-License-Identifier: Apache-2.0

#include <catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "combo/combo.hpp"

using namespace combo;

namespace {

struct Fixture {
    DecoderConfig cfg;
    PixelEmbeddings pixels;
    Tensor mask_features;
    std::size_t T = 2;

    explicit Fixture(std::uint64_t seed, std::size_t rounds = 2) {
        cfg.width = 8;
        cfg.pixel_channels = 8;
        cfg.num_queries = 5;
        cfg.num_classes = 3;
        cfg.rounds = rounds;
        Rng rng(seed, "test/decoder/fixture");
        for (std::size_t lvl = 0; lvl < 4; ++lvl)
            pixels.levels[lvl] = detail::random_tensor(rng, {T, cfg.pixel_channels, 8u >> lvl, 8u >> lvl});
        mask_features = detail::random_tensor(rng, {T, cfg.width, 8, 8});
    }
};

double max_abs_diff(const Tensor& a, const Tensor& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

// Rows of a [T, N_q, ...] tensor reordered along the query axis.
Tensor permute_queries(const Tensor& x, const std::vector<std::size_t>& perm) {
    const std::size_t T = x.dim(0), N = x.dim(1), inner = x.size() / (T * N);
    std::vector<double> v(x.size());
    for (std::size_t t = 0; t < T; ++t)
        for (std::size_t n = 0; n < N; ++n)
            std::copy_n(x.data().begin() + static_cast<long>((t * N + perm[n]) * inner), inner,
                        v.begin() + static_cast<long>((t * N + n) * inner));
    return Tensor(x.shape(), std::move(v));
}

}  // namespace

TEST_CASE("the decoder emits 3L prediction sets of the right shape", "[decoder]") {
    for (std::size_t rounds : {1u, 2u, 3u}) {
        Fixture f(0, rounds);
        ParamStore store(0);
        QueryDecoder dec(store, f.cfg);
        NoGradGuard guard;
        auto out = dec.forward(dec.queries(Tensor::zeros({f.T, f.cfg.width}), QueryMode::add), f.pixels, f.mask_features);
        REQUIRE(out.size() == 3 * rounds);
        for (const auto& p : out) {
            CHECK(p.cls.shape() == Shape{f.T, 5, 4});
            CHECK(p.mask.shape() == Shape{f.T, 5, 8, 8});
        }
    }
}

TEST_CASE("no attention row is ever fully blocked", "[decoder]") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        Fixture f(seed, 3);
        ParamStore store(seed);
        QueryDecoder dec(store, f.cfg);
        Rng rng(seed, "test/decoder/rows");
        DecoderTrace trace;
        NoGradGuard guard;
        dec.forward(dec.queries(detail::random_tensor(rng, {f.T, f.cfg.width}), QueryMode::add), f.pixels,
                    f.mask_features, &trace);
        REQUIRE(trace.blocked.size() == 3 * 3 - 1);
        CHECK(trace.masked_layers == 3 * 3 - 1);
        for (std::size_t l = 0; l < trace.blocked.size(); ++l) {
            const std::size_t lvl = 3 - ((l + 1) % 3), hw = (8u >> lvl) * (8u >> lvl);
            const auto& b = trace.blocked[l];
            REQUIRE(b.size() == f.T * 5 * hw);
            for (std::size_t r = 0; r < f.T * 5; ++r) {
                std::size_t open = 0;
                for (std::size_t i = 0; i < hw; ++i) open += !b[r * hw + i];
                CHECK(open > 0);
            }
        }
    }
}

TEST_CASE("fully blocked rows fall back to unmasked attention", "[decoder]") {
    // A huge threshold blocks every location, so every masked row falls back.
    Fixture f(1);
    f.cfg.mask_threshold = 1.0 - 1e-15;
    ParamStore store(1);
    QueryDecoder dec(store, f.cfg);
    DecoderTrace trace;
    NoGradGuard guard;
    dec.forward(dec.queries(Tensor::zeros({f.T, f.cfg.width}), QueryMode::add), f.pixels, f.mask_features, &trace);
    CHECK(trace.fallback_rows == trace.attention_rows);
    CHECK(trace.attention_rows == (2 * 3 - 1) * f.T * 5);
}

TEST_CASE("permuting learnable queries permutes every output", "[decoder]") {
    Fixture f(2);
    ParamStore store(2);
    QueryDecoder dec(store, f.cfg);
    Tensor zero_audio = Tensor::zeros({f.T, f.cfg.width});
    NoGradGuard guard;
    auto ref = dec.forward(dec.queries(zero_audio, QueryMode::add), f.pixels, f.mask_features);
    Tensor learnable = dec.learnable_queries();
    const std::vector<double> original = learnable.values();
    Rng rng(2, "test/decoder/perm");
    for (int trial = 0; trial < 5; ++trial) {
        std::vector<std::size_t> perm(5);
        std::iota(perm.begin(), perm.end(), 0);
        std::shuffle(perm.begin(), perm.end(), rng.engine());
        auto data = learnable.mutable_data();
        const std::size_t d = f.cfg.width;
        for (std::size_t n = 0; n < 5; ++n)
            std::copy_n(original.begin() + static_cast<long>(perm[n] * d), d, data.begin() + static_cast<long>(n * d));
        auto out = dec.forward(dec.queries(zero_audio, QueryMode::add), f.pixels, f.mask_features);
        for (std::size_t l = 0; l < out.size(); ++l) {
            CHECK(max_abs_diff(out[l].cls, permute_queries(ref[l].cls, perm)) < 1e-12);
            CHECK(max_abs_diff(out[l].mask, permute_queries(ref[l].mask, perm)) < 1e-12);
        }
    }
    std::copy(original.begin(), original.end(), learnable.mutable_data().begin());
}

TEST_CASE("'all' queries are identical across queries of a frame", "[decoder]") {
    Fixture f(3);
    ParamStore store(3);
    QueryDecoder dec(store, f.cfg);
    Rng rng(3, "test/decoder/all");
    Tensor audio = detail::random_tensor(rng, {f.T, f.cfg.width});
    QuerySet q = dec.queries(audio, QueryMode::all);
    const std::size_t d = f.cfg.width;
    for (std::size_t t = 0; t < f.T; ++t)
        for (std::size_t n = 1; n < 5; ++n)
            for (std::size_t c = 0; c < d; ++c)
                CHECK(q.effective[(t * 5 + n) * d + c] == q.effective[(t * 5) * d + c]);
    QuerySet added = dec.queries(audio, QueryMode::add);
    CHECK(added.effective.values() == add(q.effective, dec.learnable_queries()).values());
}

TEST_CASE("decoder gradients match finite differences", "[decoder][gradcheck]") {
    for (std::uint64_t seed : {0u, 1u}) {
        for (const auto& c : gradcheck_decoder(seed)) {
            INFO(c.name << " seed " << seed << " error " << c.report.max_rel_error);
            CHECK(c.passed());
        }
    }
}

TEST_CASE("bilinear mask upsampling", "[decoder][upsample]") {
    SECTION("a constant map stays constant") {
        Tensor up = upsample_masks(Tensor::full({1, 2, 3, 3}, -0.7), 12, 12);
        CHECK(up.shape() == Shape{1, 2, 12, 12});
        for (double v : up.data()) CHECK(std::abs(v + 0.7) < 1e-15);
    }
    SECTION("a 2x2 ramp matches the hand computation") {
        // f(y, x) = x + 2y; half-pixel centers clamp to the border, so each
        // axis samples source coordinates {0, 0.25, 0.75, 1}.
        Tensor up = upsample_masks(Tensor({1, 1, 2, 2}, {0.0, 1.0, 2.0, 3.0}), 4, 4);
        const double c[4] = {0.0, 0.25, 0.75, 1.0};
        for (std::size_t y = 0; y < 4; ++y)
            for (std::size_t x = 0; x < 4; ++x) CHECK(std::abs(up[y * 4 + x] - (c[x] + 2.0 * c[y])) < 1e-15);
    }
    SECTION("upsampling then averaging returns a constant map") {
        Tensor back = avg_pool(upsample_masks(Tensor::full({1, 1, 2, 2}, 1.25), 8, 8), 4);
        for (double v : back.data()) CHECK(v == 1.25);
    }
}

TEST_CASE("query mode names and decoder errors", "[decoder][errors]") {
    CHECK(parse_query_mode("add") == QueryMode::add);
    CHECK(parse_query_mode("all") == QueryMode::all);
    CHECK_THROWS_AS(parse_query_mode("some"), ConfigError);
    Fixture f(4);
    ParamStore store(4);
    QueryDecoder dec(store, f.cfg);
    CHECK_THROWS_AS(dec.queries(Tensor::zeros({2, 3}), QueryMode::add), DimensionError);
    QuerySet q = dec.queries(Tensor::zeros({f.T, f.cfg.width}), QueryMode::add);
    CHECK_THROWS_AS(dec.forward(q, f.pixels, Tensor::zeros({f.T, 4, 8, 8})), DimensionError);
}
