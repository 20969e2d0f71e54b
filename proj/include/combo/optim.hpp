// Copyright (c) 2026 The combo-avs Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <vector>

#include "combo/tensor.hpp"

namespace combo {

struct AdamWOptions {
    double lr = 1e-4;
    double weight_decay = 0.05;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// AdamW with bias correction and decoupled weight decay:
//   w <- w - lr * m_hat / (sqrt(v_hat) + eps) - lr * wd * w
// Parameters without a gradient are treated as having a zero gradient.
class AdamW {
public:
    AdamW(std::vector<Tensor> params, AdamWOptions opts) : params_(std::move(params)), opts_(opts) {
        if (!(opts_.lr > 0.0)) throw ParameterError("adamw: learning rate must be positive");
        if (opts_.weight_decay < 0.0) throw ParameterError("adamw: weight decay must be non-negative");
        for (const auto& p : params_) {
            m_.emplace_back(p.size(), 0.0);
            v_.emplace_back(p.size(), 0.0);
        }
    }

    void step() {
        ++t_;
        const double bc1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(t_));
        for (std::size_t i = 0; i < params_.size(); ++i) {
            Tensor& p = params_[i];
            auto w = p.mutable_data();
            const bool has = p.has_grad();
            auto g = p.grad();
            for (std::size_t j = 0; j < w.size(); ++j) {
                const double gj = has ? g[j] : 0.0;
                m_[i][j] = opts_.beta1 * m_[i][j] + (1.0 - opts_.beta1) * gj;
                v_[i][j] = opts_.beta2 * v_[i][j] + (1.0 - opts_.beta2) * gj * gj;
                const double mh = m_[i][j] / bc1;
                const double vh = v_[i][j] / bc2;
                w[j] = w[j] - opts_.lr * mh / (std::sqrt(vh) + opts_.eps) - opts_.lr * opts_.weight_decay * w[j];
            }
        }
    }

    void zero_grad() {
        for (auto& p : params_) p.zero_grad();
    }

    void set_lr(double lr) {
        if (!(lr > 0.0)) throw ParameterError("adamw: learning rate must be positive");
        opts_.lr = lr;
    }

    long steps() const noexcept { return t_; }
    const AdamWOptions& options() const noexcept { return opts_; }

private:
    std::vector<Tensor> params_;
    AdamWOptions opts_;
    std::vector<std::vector<double>> m_, v_;
    long t_ = 0;
};

// Single update on explicit parameter/gradient pairs with fresh moment state.
inline void adamw_step(std::vector<Tensor>& params, AdamWOptions opts) {
    AdamW opt(params, opts);
    opt.step();
}

}  // namespace combo
