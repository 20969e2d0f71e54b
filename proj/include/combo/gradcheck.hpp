// Copyright (c) 2026 The combo-avs Authors
// SPDX-License-Identifier: Apache-2.0
//
// Central finite-difference oracle for the tape.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <vector>

#include "combo/tensor.hpp"

namespace combo {

struct GradCheckReport {
    double max_rel_error = 0.0;
    std::size_t coordinates = 0;
    std::vector<double> errors;  // per checked coordinate
    double worst_analytic = 0.0, worst_numeric = 0.0;

    double fraction_below(double tol) const {
        if (errors.empty()) return 1.0;
        const auto n = std::count_if(errors.begin(), errors.end(), [tol](double e) { return e < tol; });
        return static_cast<double>(n) / static_cast<double>(errors.size());
    }
};

inline double relative_error(double analytic, double numeric, double floor = 1e-8) {
    const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
    return std::abs(analytic - numeric) / denom;
}

struct GradCheckOptions {
    double step = 1e-5;
    // 0 checks every coordinate; otherwise a seeded subset of this size.
    std::size_t max_coordinates = 0;
    std::uint64_t seed = 0;
    // Denominator floor as a fraction of the largest gradient magnitude among
    // the checked coordinates. Central differences resolve a gradient only
    // down to roughly eps * |loss| / step, so on a composed loss the relative
    // error of near-zero coordinates is measured against this scale instead.
    double scale_floor = 0.0;
    // Five-point stencil: truncation O(h^4) instead of O(h^2), so a larger
    // step (and less roundoff) is affordable on smooth functions.
    bool five_point = false;
};

// `loss` rebuilds the scalar from the current contents of `inputs`. Gradients
// on `inputs` are overwritten.
inline GradCheckReport finite_difference_check(const std::function<Tensor()>& loss, std::vector<Tensor> inputs,
                                               GradCheckOptions opts = {}) {
    for (auto& x : inputs) {
        x.set_requires_grad(true);
        x.zero_grad();
    }
    Tape::current().clear();
    Tensor l = loss();
    backward(l);

    struct Coord {
        std::size_t tensor, index;
    };
    std::vector<Coord> coords;
    for (std::size_t t = 0; t < inputs.size(); ++t)
        for (std::size_t i = 0; i < inputs[t].size(); ++i) coords.push_back({t, i});
    if (opts.max_coordinates && coords.size() > opts.max_coordinates) {
        std::mt19937_64 rng(opts.seed);
        std::shuffle(coords.begin(), coords.end(), rng);
        coords.resize(opts.max_coordinates);
    }

    GradCheckReport report;
    NoGradGuard guard;
    std::vector<std::pair<double, double>> pairs;
    for (const auto& c : coords) {
        Tensor& x = inputs[c.tensor];
        const double analytic = x.has_grad() ? x.grad()[c.index] : 0.0;
        auto data = x.mutable_data();
        const double orig = data[c.index];
        auto at = [&](double offset) {
            data[c.index] = orig + offset;
            const double v = loss().item();
            data[c.index] = orig;
            return v;
        };
        const double h = opts.step;
        const double d1 = at(h) - at(-h);
        if (opts.five_point)
            pairs.emplace_back(analytic, (8.0 * d1 - (at(2.0 * h) - at(-2.0 * h))) / (12.0 * h));
        else
            pairs.emplace_back(analytic, d1 / (2.0 * h));
    }
    double scale = 0.0;
    for (const auto& [a, n] : pairs) scale = std::max({scale, std::abs(a), std::abs(n)});
    const double floor = std::max(1e-8, opts.scale_floor * scale);
    for (const auto& [a, n] : pairs) {
        const double err = relative_error(a, n, floor);
        report.errors.push_back(err);
        if (err > report.max_rel_error) {
            report.max_rel_error = err;
            report.worst_analytic = a;
            report.worst_numeric = n;
        }
    }
    report.coordinates = coords.size();
    return report;
}

inline GradCheckReport finite_difference_check(const std::function<Tensor(const Tensor&)>& f, Tensor x,
                                               double step = 1e-5) {
    GradCheckOptions opts;
    opts.step = step;
    return finite_difference_check([&] { return f(x); }, {x}, opts);
}

}  // namespace combo
