// Copyright (c) 2026 The combo-avs Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <limits>
#include <vector>

#include "combo/tensor.hpp"

namespace combo {

struct Assignment {
    std::vector<std::size_t> col_of_row;
    double cost = 0.0;
};

// Minimum-cost assignment of every row to a distinct column (rows <= cols),
// shortest augmenting path with potentials, O(rows^2 * cols).
// `cost` is row-major [rows x cols].
inline Assignment hungarian(const std::vector<double>& cost, std::size_t rows, std::size_t cols) {
    if (cost.size() != rows * cols) throw DimensionError("hungarian: cost matrix size mismatch");
    if (rows > cols) throw CapacityError(rows, cols, "hungarian: more rows than columns");
    Assignment out;
    if (rows == 0) return out;
    const double inf = std::numeric_limits<double>::infinity();
    // 1-based potentials; column 0 is the virtual source.
    std::vector<double> u(rows + 1, 0.0), v(cols + 1, 0.0);
    std::vector<std::size_t> match(cols + 1, 0), way(cols + 1, 0);
    for (std::size_t i = 1; i <= rows; ++i) {
        match[0] = i;
        std::size_t j0 = 0;
        std::vector<double> minv(cols + 1, inf);
        std::vector<bool> used(cols + 1, false);
        do {
            used[j0] = true;
            const std::size_t i0 = match[j0];
            double delta = inf;
            std::size_t j1 = 0;
            for (std::size_t j = 1; j <= cols; ++j) {
                if (used[j]) continue;
                const double cur = cost[(i0 - 1) * cols + (j - 1)] - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for (std::size_t j = 0; j <= cols; ++j) {
                if (used[j]) {
                    u[match[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (match[j0] != 0);
        do {
            const std::size_t j1 = way[j0];
            match[j0] = match[j1];
            j0 = j1;
        } while (j0 != 0);
    }
    out.col_of_row.assign(rows, 0);
    for (std::size_t j = 1; j <= cols; ++j)
        if (match[j]) out.col_of_row[match[j] - 1] = j - 1;
    for (std::size_t i = 0; i < rows; ++i) out.cost += cost[i * cols + out.col_of_row[i]];
    return out;
}

}  // namespace combo
