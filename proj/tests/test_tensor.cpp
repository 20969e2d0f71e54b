// Copyright (c) 2026 The combo-avs Authors
// SPDX-License-Identifier: Apache-2.0

#include <catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>

#include "combo/combo.hpp"

using namespace combo;
using Catch::Matchers::WithinAbs;

namespace {

Tensor random(Rng& rng, const Shape& shape, double lo = -1.0, double hi = 1.0) {
    return detail::random_tensor(rng, shape, lo, hi);
}

bool all_finite(const Tensor& t) {
    for (double v : t.data())
        if (!std::isfinite(v)) return false;
    return true;
}

}  // namespace

TEST_CASE("softmax rows sum to one", "[tensor]") {
    Rng rng(0, "test/softmax");
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t rows = 1 + rng.integer(0, 5), cols = 1 + rng.integer(0, 9);
        const double spread = trial % 2 ? 50.0 : 1.0;
        Tensor x = random(rng, {rows, cols}, -spread, spread);
        Tensor y = softmax(x, -1);
        for (std::size_t r = 0; r < rows; ++r) {
            double s = 0.0;
            for (std::size_t c = 0; c < cols; ++c) s += y[r * cols + c];
            REQUIRE(std::abs(s - 1.0) < 1e-12);
        }
    }
}

TEST_CASE("masked softmax gives zero weight to blocked entries", "[tensor]") {
    Tensor x({2, 3}, {0.3, -1.0, 2.0, 1.0, 1.0, 1.0});
    Tensor y = masked_softmax(x, {1, 0, 1, 0, 0, 0});
    CHECK(y[0] == 0.0);
    CHECK(y[2] == 0.0);
    CHECK_THAT(y[1], WithinAbs(1.0, 1e-15));
    CHECK_THAT(y[3] + y[4] + y[5], WithinAbs(1.0, 1e-15));
}

TEST_CASE("finite differences are exact on a linear function", "[tensor][gradcheck]") {
    Rng rng(1, "test/linear");
    Tensor x = random(rng, {4, 5});
    auto r = finite_difference_check([](const Tensor& v) { return sum(v); }, x);
    CHECK(r.max_rel_error < 1e-10);
}

TEST_CASE("cross-entropy on random logits matches finite differences", "[tensor][gradcheck]") {
    Rng rng(2, "test/ce");
    Tensor logits = random(rng, {4, 6}, -2.0, 2.0);
    std::vector<double> onehot(24, 0.0);
    for (std::size_t r = 0; r < 4; ++r) onehot[r * 6 + static_cast<std::size_t>(rng.integer(0, 5))] = 1.0;
    Tensor target({4, 6}, onehot);
    auto r = finite_difference_check([&](const Tensor& v) { return scale(sum(mul(log_softmax(v, -1), target)), -1.0); },
                                     logits);
    CHECK(r.max_rel_error < 1e-6);
}

TEST_CASE("every elementary op passes the gradient check", "[tensor][gradcheck]") {
    for (std::uint64_t seed : {0u, 1u, 2u}) {
        for (const auto& c : gradcheck_tensor(seed)) {
            INFO(c.name << " seed " << seed << " error " << c.report.max_rel_error);
            CHECK(c.passed());
            CHECK(c.tolerance == kElementaryTolerance);
        }
    }
}

TEST_CASE("gradients accumulate through shared inputs", "[tensor]") {
    Tensor x({3}, {1.0, 2.0, 3.0}, true);
    Tensor y = add(mul(x, x), x);
    backward(sum(y));
    REQUIRE(x.has_grad());
    CHECK(x.grad()[0] == 3.0);
    CHECK(x.grad()[1] == 5.0);
    CHECK(x.grad()[2] == 7.0);
}

TEST_CASE("no-grad mode records nothing", "[tensor]") {
    Tape::current().clear();
    Tensor x({2, 2}, {1, 2, 3, 4}, true);
    {
        NoGradGuard guard;
        Tensor y = matmul(x, x);
        CHECK_FALSE(y.requires_grad());
    }
    CHECK(Tape::current().size() == 0);
}

TEST_CASE("shape mismatches are dimension errors", "[tensor][errors]") {
    Tensor a = Tensor::zeros({2, 3}), b = Tensor::zeros({3, 2});
    CHECK_THROWS_AS(add(a, b), DimensionError);
    CHECK_THROWS_AS(matmul(a, a), DimensionError);
    CHECK_THROWS_AS(Tensor({2, 2}, {1.0}), DimensionError);
    CHECK_THROWS_AS(reshape(a, {4}), DimensionError);
}

TEST_CASE("backward needs a scalar loss", "[tensor][errors]") {
    Tensor x({2}, {1.0, 2.0}, true);
    Tensor y = mul(x, x);
    CHECK_THROWS_AS(backward(y), ContractError);
    Tape::current().clear();
}

TEST_CASE("bounded ops stay finite for inputs up to 1e3", "[tensor][numeric]") {
    Rng rng(3, "test/finite");
    for (int trial = 0; trial < 50; ++trial) {
        Tensor x = random(rng, {3, 7}, -1e3, 1e3);
        Tensor t = random(rng, {3, 7}, 0.0, 1.0);
        Tensor g = random(rng, {7}), b = random(rng, {7});
        CHECK(all_finite(sigmoid(x)));
        CHECK(all_finite(softmax(x, -1)));
        CHECK(all_finite(log_softmax(x, -1)));
        CHECK(all_finite(bce_with_logits(x, t)));
        CHECK(all_finite(layer_norm(x, g, b)));
        CHECK(all_finite(cosine_similarity(x, x)));
        CHECK(all_finite(relu(x)));
    }
}

TEST_CASE("overflow surfaces as a numeric error, never as inf", "[tensor][numeric]") {
    Tensor x({1}, {1e3});
    CHECK_THROWS_AS(exp(x), NumericError);
    CHECK_THROWS_AS(log(Tensor({1}, {0.0})), NumericError);
}

TEST_CASE("relu gate replay rejects a different forward pass", "[tensor]") {
    ReluGateReplay gates;
    relu(Tensor({3}, {1.0, -1.0, 2.0}));
    gates.arm();
    Tensor replayed = relu(Tensor({3}, {-5.0, 5.0, 2.0}));
    CHECK(replayed[0] == -5.0);
    CHECK(replayed[1] == 0.0);
    CHECK_THROWS_AS(relu(Tensor({2}, {1.0, 1.0})), ContractError);
}

TEST_CASE("adamw first step moves each weight by about lr against its gradient", "[tensor][optim]") {
    Tensor w({3}, {0.5, -0.5, 1.0}, true);
    AdamWOptions opts;
    opts.lr = 0.01;
    opts.weight_decay = 0.0;
    AdamW opt({w}, opts);
    backward(sum(mul(w, Tensor({3}, {2.0, -3.0, 0.5}))));
    opt.step();
    CHECK_THAT(w[0], WithinAbs(0.49, 1e-9));
    CHECK_THAT(w[1], WithinAbs(-0.49, 1e-9));
    CHECK_THAT(w[2], WithinAbs(0.99, 1e-9));
}

TEST_CASE("identical seeds give bit-identical parameter trajectories", "[tensor][determinism]") {
    auto run = [] {
        ParamStore store(7);
        Tensor w = store.create("w", {4, 3}, Init::he(4));
        Tensor b = store.create("b", {3}, Init::zeros());
        Rng rng(7, "test/trajectory");
        Tensor x = random(rng, {5, 4});
        AdamW opt(store.tensors(), AdamWOptions{});
        for (int i = 0; i < 20; ++i) {
            for (auto& p : store.tensors()) p.zero_grad();
            backward(sum(mul(relu(linear(x, w, b)), relu(linear(x, w, b)))));
            opt.step();
        }
        return w.values();
    };
    CHECK(run() == run());
}

TEST_CASE("tensor files round-trip and reject corruption", "[tensor][io]") {
    Rng rng(4, "test/ctns");
    Tensor t = random(rng, {2, 3, 4});
    auto bytes = encode_ctns(t);
    REQUIRE(bytes.size() == 4 + 1 + 1 + 3 * 8 + 24 * 8);
    CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "CTNS");
    Tensor back = decode_ctns(bytes);
    CHECK(back.shape() == t.shape());
    CHECK(back.values() == t.values());

    auto bad = bytes;
    bad[0] = 'X';
    CHECK_THROWS_AS(decode_ctns(bad), IoError);
    bad = bytes;
    bad.pop_back();
    CHECK_THROWS_AS(decode_ctns(bad), IoError);
    bad = bytes;
    bad[4] = 2;
    CHECK_THROWS_AS(decode_ctns(bad), IoError);

    const auto path = std::filesystem::temp_directory_path() / "combo_test_tensor.ctns";
    save_tensor(path, t);
    CHECK(load_tensor(path).values() == t.values());
    std::filesystem::remove(path);
}
