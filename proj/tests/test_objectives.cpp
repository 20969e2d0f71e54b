// Copyright (c) 2026 The combo-avs Authors
// SPDX-License-Identifier: Apache-2.0

#include <catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "combo/combo.hpp"

using namespace combo;

namespace {

double brute_force_min(const std::vector<double>& cost, std::size_t rows, std::size_t cols) {
    std::vector<std::size_t> cols_perm(cols);
    std::iota(cols_perm.begin(), cols_perm.end(), 0);
    double best = std::numeric_limits<double>::infinity();
    do {
        double c = 0.0;
        for (std::size_t r = 0; r < rows; ++r) c += cost[r * cols + cols_perm[r]];
        best = std::min(best, c);
    } while (std::next_permutation(cols_perm.begin(), cols_perm.end()));
    return best;
}

double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }
double sig(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

TEST_CASE("identical adjacent frames give zero consistency loss", "[objectives][ada]") {
    Rng rng(0, "test/ada/identical");
    Tensor frame = detail::random_tensor(rng, {1, 3, 4, 4}, -4.0, 4.0);
    std::vector<double> v;
    for (int t = 0; t < 4; ++t) v.insert(v.end(), frame.data().begin(), frame.data().end());
    Tensor clip({4, 3, 4, 4}, v);
    for (AdaSource src : {AdaSource::probabilities, AdaSource::logits})
        CHECK(std::abs(adaptive_consistency_loss(clip, src).item()) < 1e-12);
}

TEST_CASE("orthogonal adjacent frames give exp(-1) per pair", "[objectives][ada]") {
    // Saturated logits make the probabilities exactly 0 and 1.
    Tensor clip({2, 1, 1, 2}, {1000.0, -1000.0, -1000.0, 1000.0});
    CHECK(std::abs(adaptive_consistency_loss(clip).item() - std::exp(-1.0)) < 1e-9);
    Tensor three({3, 1, 1, 2}, {1000.0, -1000.0, -1000.0, 1000.0, 1000.0, -1000.0});
    CHECK(std::abs(adaptive_consistency_loss(three).item() - 2.0 * std::exp(-1.0)) < 1e-9);
    CHECK(std::abs(ada_term(0.0) - 0.36787944117144233) < 1e-15);
}

TEST_CASE("consistency loss is non-negative and vanishes only at S = 1", "[objectives][ada]") {
    Rng rng(1, "test/ada/nonneg");
    for (int trial = 0; trial < 200; ++trial) {
        Tensor clip = detail::random_tensor(rng, {3, 2, 2, 2}, -5.0, 5.0);
        CHECK(adaptive_consistency_loss(clip).item() > 0.0);
        CHECK(adaptive_consistency_loss(clip, AdaSource::logits).item() >= 0.0);
    }
    CHECK(adaptive_consistency_loss(Tensor::zeros({1, 2, 2, 2})).item() == 0.0);
}

TEST_CASE("the per-pair term is positive below 1 and decreasing near 1", "[objectives][ada]") {
    for (int i = 0; i < 2000; ++i) {
        const double s = -1.0 + 2.0 * i / 2000.0;
        CHECK(ada_term(s) > 0.0);
        if (s >= 0.0) CHECK(ada_term(s + 1e-3) < ada_term(s));
    }
    CHECK(ada_term(1.0) == 0.0);
}

TEST_CASE("hungarian equals brute force on random matrices", "[objectives][hungarian]") {
    Rng rng(2, "test/hungarian");
    std::size_t mismatches = 0;
    for (int trial = 0; trial < 500; ++trial) {
        const auto cols = static_cast<std::size_t>(rng.integer(2, 6));
        const auto rows = trial % 3 == 0 ? static_cast<std::size_t>(rng.integer(1, static_cast<long>(cols))) : cols;
        std::vector<double> cost(rows * cols);
        for (auto& c : cost) c = trial % 2 ? rng.uniform(-5.0, 5.0) : static_cast<double>(rng.integer(0, 3));
        Assignment a = hungarian(cost, rows, cols);
        std::vector<std::size_t> used = a.col_of_row;
        std::sort(used.begin(), used.end());
        REQUIRE(std::adjacent_find(used.begin(), used.end()) == used.end());
        double c = 0.0;
        for (std::size_t r = 0; r < rows; ++r) c += cost[r * cols + a.col_of_row[r]];
        if (std::abs(c - brute_force_min(cost, rows, cols)) > 1e-9 || std::abs(c - a.cost) > 1e-9) ++mismatches;
    }
    CHECK(mismatches == 0);
}

TEST_CASE("hungarian rejects more rows than columns", "[objectives][hungarian][errors]") {
    CHECK_THROWS_AS(hungarian(std::vector<double>(6, 0.0), 3, 2), CapacityError);
    CHECK_THROWS_AS(hungarian(std::vector<double>(5, 0.0), 3, 2), DimensionError);
}

TEST_CASE("a hand-built instance matches the weighted hand sum", "[objectives]") {
    // One layer, T=2, N_q=2, K_c=1, 1x2 masks. Both frames hold one class-0
    // instance: frame 0 covers pixel 0, frame 1 covers pixel 1.
    const std::vector<double> cls{2.0, -1.0, 0.5, 1.5, 0.2, 0.1, -0.3, 0.8};
    const std::vector<double> mask{3.0, -2.0, 0.5, 0.5, -1.0, 0.4, -2.5, 2.0};
    PredictionSet pred{Tensor({2, 2, 2}, cls), Tensor({2, 2, 1, 2}, mask)};
    ClipTargets targets;
    targets.frames = {FrameTarget{{0}, Tensor({1, 2}, {1.0, 0.0})}, FrameTarget{{0}, Tensor({1, 2}, {0.0, 1.0})}};
    LossWeights w;

    auto ce = [&](std::size_t t, std::size_t q, std::size_t label) {
        const double a = cls[(t * 2 + q) * 2], b = cls[(t * 2 + q) * 2 + 1];
        const double lse = std::max(a, b) + std::log(std::exp(a - std::max(a, b)) + std::exp(b - std::max(a, b)));
        return lse - (label == 0 ? a : b);
    };
    auto mask_terms = [&](std::size_t t, std::size_t q, const std::vector<double>& tgt) {
        double bce = 0.0, inter = 0.0, psum = 0.0;
        for (std::size_t p = 0; p < 2; ++p) {
            const double x = mask[(t * 2 + q) * 2 + p];
            bce += softplus(x) - x * tgt[p];
            inter += sig(x) * tgt[p];
            psum += sig(x);
        }
        return bce / 2.0 + 1.0 - (2.0 * inter + 1.0) / (psum + 1.0 + 1.0);
    };
    auto match_cost = [&](std::size_t t, std::size_t q, const std::vector<double>& tgt) {
        const double a = cls[(t * 2 + q) * 2], b = cls[(t * 2 + q) * 2 + 1];
        return -w.cls * std::exp(a) / (std::exp(a) + std::exp(b)) + w.mask * mask_terms(t, q, tgt);
    };
    const std::vector<std::vector<double>> gt{{1.0, 0.0}, {0.0, 1.0}};
    double cls_sum = 0.0, weight_sum = 0.0, mask_sum = 0.0;
    for (std::size_t t = 0; t < 2; ++t) {
        const std::size_t q = match_cost(t, 0, gt[t]) <= match_cost(t, 1, gt[t]) ? 0 : 1;
        cls_sum += ce(t, q, 0) + w.no_object * ce(t, 1 - q, 1);
        weight_sum += 1.0 + w.no_object;
        mask_sum += mask_terms(t, q, gt[t]);
    }
    const double l_cls = cls_sum / weight_sum, l_mask = mask_sum / 2.0;

    std::vector<double> f0(4), f1(4);
    for (std::size_t i = 0; i < 4; ++i) {
        f0[i] = sig(mask[i]);
        f1[i] = sig(mask[4 + i]);
    }
    const double dot = std::inner_product(f0.begin(), f0.end(), f1.begin(), 0.0);
    const double s = dot / (std::sqrt(std::inner_product(f0.begin(), f0.end(), f0.begin(), 0.0)) *
                            std::sqrt(std::inner_product(f1.begin(), f1.end(), f1.begin(), 0.0)));
    const double l_ada = std::exp(s - 1.0) * (1.0 - s);

    LossBreakdown b = total_loss({pred}, targets, w);
    CHECK(std::abs(b.total.item() - (w.cls * l_cls + w.mask * l_mask + w.ada * l_ada)) < 1e-12);
    CHECK(std::abs(b.cls - w.cls * l_cls) < 1e-12);
    CHECK(std::abs(b.mask - w.mask * l_mask) < 1e-12);
    CHECK(std::abs(b.ada - w.ada * l_ada) < 1e-12);
}

TEST_CASE("zero consistency weight leaves only the matched terms", "[objectives]") {
    Rng rng(3, "test/objectives/lambda0");
    PredictionSet pred{detail::random_tensor(rng, {2, 3, 3}), detail::random_tensor(rng, {2, 3, 2, 2})};
    ClipTargets targets;
    targets.frames = {FrameTarget{{1}, Tensor({1, 4}, {1, 1, 0, 0})}, FrameTarget{{0, 1}, Tensor({2, 4}, {1, 0, 0, 0, 0, 0, 1, 1})}};
    LossWeights w;
    w.ada = 0.0;
    LossBreakdown b = total_loss({pred, pred}, targets, w);
    CHECK(b.ada == 0.0);
    CHECK(std::abs(b.total.item() - (b.cls + b.mask)) < 1e-12);
}

TEST_CASE("scaling a perfect prediction drives the matched loss to zero", "[objectives]") {
    // Query 0 predicts the instance, query 1 predicts no-object.
    ClipTargets targets;
    targets.frames = {FrameTarget{{0}, Tensor({1, 4}, {1, 0, 1, 0})}};
    LossWeights w;
    w.ada = 0.0;
    double previous = std::numeric_limits<double>::infinity();
    for (double t : {1.0, 10.0, 100.0}) {
        PredictionSet pred{Tensor({1, 2, 2}, {t, -t, -t, t}), Tensor({1, 2, 2, 2}, {t, -t, t, -t, -t, -t, -t, -t})};
        const double loss = total_loss({pred}, targets, w).total.item();
        CHECK(loss < previous);
        previous = loss;
    }
    CHECK(previous < 0.02);
}

TEST_CASE("unannotated frames do not contribute to the matched terms", "[objectives]") {
    Rng rng(4, "test/objectives/annotated");
    PredictionSet pred{detail::random_tensor(rng, {2, 3, 3}), detail::random_tensor(rng, {2, 3, 2, 2})};
    ClipTargets a, b;
    a.frames = {FrameTarget{{1}, Tensor({1, 4}, {1, 1, 0, 0})}, FrameTarget{{0}, Tensor({1, 4}, {0, 0, 1, 1})}};
    b.frames = {a.frames[0], FrameTarget{{1, 0}, Tensor({2, 4}, {1, 0, 1, 0, 0, 1, 0, 1})}};
    a.annotated = b.annotated = {true, false};
    LossWeights w;
    LossBreakdown la = total_loss({pred}, a, w), lb = total_loss({pred}, b, w);
    CHECK(la.cls == lb.cls);
    CHECK(la.mask == lb.mask);
    CHECK(la.ada == lb.ada);
    b.annotated = {true, true};
    CHECK(total_loss({pred}, b, w).cls != la.cls);
}

TEST_CASE("deep supervision scores every layer", "[objectives]") {
    Rng rng(5, "test/objectives/deep");
    PredictionSet p1{detail::random_tensor(rng, {2, 3, 3}), detail::random_tensor(rng, {2, 3, 2, 2})};
    PredictionSet p2{detail::random_tensor(rng, {2, 3, 3}), detail::random_tensor(rng, {2, 3, 2, 2})};
    ClipTargets targets;
    targets.frames = {FrameTarget{{1}, Tensor({1, 4}, {1, 1, 0, 0})}, FrameTarget{{0}, Tensor({1, 4}, {0, 0, 1, 1})}};
    LossWeights w;
    w.ada = 0.0;
    const double one = total_loss({p1}, targets, w).total.item(), two = total_loss({p2}, targets, w).total.item();
    CHECK(std::abs(total_loss({p1, p2}, targets, w).total.item() - (one + two)) < 1e-12);
    CHECK_THROWS_AS(total_loss({p1, p2}, targets, w, std::size_t{2}), ConfigError);
}

TEST_CASE("more instances than queries is a capacity error", "[objectives][errors]") {
    PredictionSet pred{Tensor::zeros({1, 1, 3}), Tensor::zeros({1, 1, 1, 2})};
    ClipTargets targets;
    targets.frames = {FrameTarget{{0, 1}, Tensor({2, 2}, {1, 0, 0, 1})}};
    CHECK_THROWS_AS(total_loss({pred}, targets, LossWeights{}), CapacityError);
    LossWeights bad;
    bad.mask = -1.0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    CHECK_THROWS_AS(parse_ada_source("pixels"), ConfigError);
}

TEST_CASE("the full objective matches finite differences on the micro model", "[objectives][gradcheck]") {
    for (const auto& c : gradcheck_loss(0)) {
        INFO(c.name << " error " << c.report.max_rel_error);
        CHECK(c.passed());
    }
}
