// Copyright (c) 2026 The combo-avs Authors
// SPDX-License-Identifier: Apache-2.0
//
// Differentiable operations. Every function records its adjoint on the
// current thread's tape when any input requires a gradient.
//
// Broadcasting is deliberately narrow: binary ops accept identical shapes or a
// right operand whose shape is a trailing suffix of the left operand's shape
// (bias-style). Anything else is a DimensionError; use repeat() or
// expand_trailing() to make an expansion explicit.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "combo/tensor.hpp"

namespace combo {

namespace detail {

// C[m x n] += A[m x k] * B[k x n]
inline void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                    std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        double* crow = c + i * n;
        const double* arow = a + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = arow[p];
            if (av == 0.0) continue;
            const double* brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C[m x n] += A[m x k] * B[n x k]^T
inline void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                    std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        double* crow = c + i * n;
        for (std::size_t j = 0; j < n; ++j) {
            const double* brow = b + j * k;
            double acc = 0.0;
            for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
            crow[j] += acc;
        }
    }
}

// C[m x n] += A[k x m]^T * B[k x n]
inline void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                    std::size_t n) {
    for (std::size_t p = 0; p < k; ++p) {
        const double* arow = a + p * m;
        const double* brow = b + p * n;
        for (std::size_t i = 0; i < m; ++i) {
            const double av = arow[i];
            if (av == 0.0) continue;
            double* crow = c + i * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

inline void require_rank(const Tensor& t, std::size_t r, const char* op) {
    if (t.rank() != r) {
        throw DimensionError(std::string(op) + ": expected rank " + std::to_string(r) + ", got " +
                             shape_str(t.shape()));
    }
}

inline std::size_t normalize_axis(long axis, std::size_t rank, const char* op) {
    const long r = static_cast<long>(rank);
    if (axis < 0) axis += r;
    if (axis < 0 || axis >= r) {
        throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) +
                             " out of range for rank " + std::to_string(rank));
    }
    return static_cast<std::size_t>(axis);
}

// Returns the repeat period of b inside a: a.size() / b.size() copies of b laid
// out contiguously. Throws unless shapes match or b is a trailing suffix of a.
inline std::size_t broadcast_inner(const Tensor& a, const Tensor& b, const char* op) {
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    bool ok = sb.size() <= sa.size();
    for (std::size_t i = 0; ok && i < sb.size(); ++i) ok = sb[sb.size() - 1 - i] == sa[sa.size() - 1 - i];
    if (!ok) {
        throw DimensionError(std::string(op) + ": cannot broadcast " + shape_str(sb) + " onto " +
                             shape_str(sa));
    }
    return b.size();
}

template <typename F, typename DF>
Tensor unary(const Tensor& x, const char* op, F f, DF df) {
    std::vector<double> out(x.size());
    const auto& xv = x.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(xv[i]);
    Tensor y = make_result(x.shape(), std::move(out), any_requires_grad(x), op);
    if (y.requires_grad()) {
        Tape::current().record([xn = x.ptr(), yn = y.ptr(), df] {
            if (yn->grad.empty() || !xn->requires_grad) return;
            xn->ensure_grad();
            for (std::size_t i = 0; i < yn->grad.size(); ++i)
                xn->grad[i] += yn->grad[i] * df(xn->value[i], yn->value[i]);
        });
    }
    return y;
}

}  // namespace detail

// ---------------------------------------------------------------- products

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
        throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                             shape_str(b.shape()));
    }
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    std::vector<double> out(m * n, 0.0);
    detail::gemm_nn(a.data().data(), b.data().data(), out.data(), m, k, n);
    Tensor c = detail::make_result({m, n}, std::move(out), detail::any_requires_grad(a, b), "matmul");
    if (c.requires_grad()) {
        Tape::current().record([an = a.ptr(), bn = b.ptr(), cn = c.ptr(), m, k, n] {
            if (cn->grad.empty()) return;
            if (an->requires_grad) {
                an->ensure_grad();
                detail::gemm_nt(cn->grad.data(), bn->value.data(), an->grad.data(), m, n, k);
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                detail::gemm_tn(an->value.data(), cn->grad.data(), bn->grad.data(), k, m, n);
            }
        });
    }
    return c;
}

// Batched product: a[B x m x k] * b[B x k x n].
inline Tensor bmm(const Tensor& a, const Tensor& b) {
    if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1)) {
        throw DimensionError("bmm: incompatible shapes " + shape_str(a.shape()) + " and " +
                             shape_str(b.shape()));
    }
    const std::size_t B = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
    std::vector<double> out(B * m * n, 0.0);
    for (std::size_t s = 0; s < B; ++s)
        detail::gemm_nn(a.data().data() + s * m * k, b.data().data() + s * k * n, out.data() + s * m * n, m,
                        k, n);
    Tensor c = detail::make_result({B, m, n}, std::move(out), detail::any_requires_grad(a, b), "bmm");
    if (c.requires_grad()) {
        Tape::current().record([an = a.ptr(), bn = b.ptr(), cn = c.ptr(), B, m, k, n] {
            if (cn->grad.empty()) return;
            if (an->requires_grad) an->ensure_grad();
            if (bn->requires_grad) bn->ensure_grad();
            for (std::size_t s = 0; s < B; ++s) {
                const double* g = cn->grad.data() + s * m * n;
                if (an->requires_grad)
                    detail::gemm_nt(g, bn->value.data() + s * k * n, an->grad.data() + s * m * k, m, n, k);
                if (bn->requires_grad)
                    detail::gemm_tn(an->value.data() + s * m * k, g, bn->grad.data() + s * k * n, k, m, n);
            }
        });
    }
    return c;
}

// ---------------------------------------------------------------- layout

inline Tensor reshape(const Tensor& x, Shape shape) {
    if (numel(shape) != x.size()) {
        throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
    }
    Tensor y = detail::make_result(std::move(shape), x.values(), detail::any_requires_grad(x), "reshape");
    if (y.requires_grad()) {
        Tape::current().record([xn = x.ptr(), yn = y.ptr()] {
            if (!yn->grad.empty()) detail::accumulate(xn, yn->grad);
        });
    }
    return y;
}

inline Tensor permute(const Tensor& x, const std::vector<std::size_t>& perm) {
    const std::size_t r = x.rank();
    if (perm.size() != r) throw DimensionError("permute: permutation rank mismatch for " + shape_str(x.shape()));
    std::vector<bool> seen(r, false);
    for (auto p : perm) {
        if (p >= r || seen[p]) throw DimensionError("permute: invalid permutation");
        seen[p] = true;
    }
    Shape out_shape(r);
    for (std::size_t i = 0; i < r; ++i) out_shape[i] = x.dim(perm[i]);
    std::vector<std::size_t> in_strides(r, 1);
    for (std::size_t i = r; i-- > 1;) in_strides[i - 1] = in_strides[i] * x.dim(i);
    // map[out_flat] = in_flat
    std::vector<std::size_t> map(x.size());
    std::vector<std::size_t> idx(r, 0);
    for (std::size_t o = 0; o < map.size(); ++o) {
        std::size_t src = 0;
        for (std::size_t i = 0; i < r; ++i) src += idx[i] * in_strides[perm[i]];
        map[o] = src;
        for (std::size_t i = r; i-- > 0;) {
            if (++idx[i] < out_shape[i]) break;
            idx[i] = 0;
        }
    }
    std::vector<double> out(x.size());
    for (std::size_t o = 0; o < out.size(); ++o) out[o] = x[map[o]];
    Tensor y = detail::make_result(std::move(out_shape), std::move(out), detail::any_requires_grad(x), "permute");
    if (y.requires_grad()) {
        Tape::current().record([xn = x.ptr(), yn = y.ptr(), map = std::move(map)] {
            if (yn->grad.empty() || !xn->requires_grad) return;
            xn->ensure_grad();
            for (std::size_t o = 0; o < map.size(); ++o) xn->grad[map[o]] += yn->grad[o];
        });
    }
    return y;
}

inline Tensor transpose(const Tensor& x) {
    detail::require_rank(x, 2, "transpose");
    return permute(x, {1, 0});
}

// Inserts a new axis at `axis` holding n copies of x.
inline Tensor repeat(const Tensor& x, std::size_t axis, std::size_t n) {
    if (axis > x.rank()) throw DimensionError("repeat: axis out of range for " + shape_str(x.shape()));
    std::size_t outer = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
    const std::size_t inner = x.size() / std::max<std::size_t>(outer, 1);
    Shape shape = x.shape();
    shape.insert(shape.begin() + static_cast<long>(axis), n);
    std::vector<double> out(outer * n * inner);
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t r = 0; r < n; ++r)
            std::copy_n(x.data().begin() + static_cast<long>(o * inner), inner,
                        out.begin() + static_cast<long>((o * n + r) * inner));
    Tensor y = detail::make_result(std::move(shape), std::move(out), detail::any_requires_grad(x), "repeat");
    if (y.requires_grad()) {
        Tape::current().record([xn = x.ptr(), yn = y.ptr(), outer, n, inner] {
            if (yn->grad.empty() || !xn->requires_grad) return;
            xn->ensure_grad();
            for (std::size_t o = 0; o < outer; ++o)
                for (std::size_t r = 0; r < n; ++r)
                    for (std::size_t i = 0; i < inner; ++i)
                        xn->grad[o * inner + i] += yn->grad[(o * n + r) * inner + i];
        });
    }
    return y;
}

// Appends trailing axes, replicating each element over them: [T,C] -> [T,C,H,W].
inline Tensor expand_trailing(const Tensor& x, const Shape& extra) {
    const std::size_t reps = numel(extra);
    Shape shape = x.shape();
    shape.insert(shape.end(), extra.begin(), extra.end());
    std::vector<double> out(x.size() * reps);
    for (std::size_t i = 0; i < x.size(); ++i)
        std::fill_n(out.begin() + static_cast<long>(i * reps), reps, x[i]);
    Tensor y = detail::make_result(std::move(shape), std::move(out), detail::any_requires_grad(x),
                                   "expand_trailing");
    if (y.requires_grad()) {
        Tape::current().record([xn = x.ptr(), yn = y.ptr(), reps] {
            if (yn->grad.empty() || !xn->requires_grad) return;
            xn->ensure_grad();
            for (std::size_t i = 0; i < xn->value.size(); ++i) {
                double acc = 0.0;
                for (std::size_t r = 0; r < reps; ++r) acc += yn->grad[i * reps + r];
                xn->grad[i] += acc;
            }
        });
    }
    return y;
}

// Rows [begin, end) along axis 0.
inline Tensor slice0(const Tensor& x, std::size_t begin, std::size_t end) {
    if (x.rank() == 0 || begin > end || end > x.dim(0))
        throw DimensionError("slice0: range out of bounds for " + shape_str(x.shape()));
    const std::size_t row = x.size() / x.dim(0);
    Shape shape = x.shape();
    shape[0] = end - begin;
    std::vector<double> out(x.data().begin() + static_cast<long>(begin * row),
                            x.data().begin() + static_cast<long>(end * row));
    Tensor y = detail::make_result(std::move(shape), std::move(out), detail::any_requires_grad(x), "slice0");
    if (y.requires_grad()) {
        Tape::current().record([xn = x.ptr(), yn = y.ptr(), offset = begin * row] {
            if (yn->grad.empty() || !xn->requires_grad) return;
            xn->ensure_grad();
            for (std::size_t i = 0; i < yn->grad.size(); ++i) xn->grad[offset + i] += yn->grad[i];
        });
    }
    return y;
}

// Gathers rows of x (viewed as [rows, rest...]) in the given order.
inline Tensor index_select0(const Tensor& x, const std::vector<std::size_t>& rows) {
    if (x.rank() == 0) throw DimensionError("index_select0: scalar input");
    const std::size_t row = x.size() / x.dim(0);
    for (auto r : rows)
        if (r >= x.dim(0)) throw DimensionError("index_select0: row index out of range");
    Shape shape = x.shape();
    shape[0] = rows.size();
    std::vector<double> out(rows.size() * row);
    for (std::size_t i = 0; i < rows.size(); ++i)
        std::copy_n(x.data().begin() + static_cast<long>(rows[i] * row), row,
                    out.begin() + static_cast<long>(i * row));
    Tensor y = detail::make_result(std::move(shape), std::move(out), detail::any_requires_grad(x),
                                   "index_select0");
    if (y.requires_grad()) {
        Tape::current().record([xn = x.ptr(), yn = y.ptr(), rows, row] {
            if (yn->grad.empty() || !xn->requires_grad) return;
            xn->ensure_grad();
            for (std::size_t i = 0; i < rows.size(); ++i)
                for (std::size_t j = 0; j < row; ++j) xn->grad[rows[i] * row + j] += yn->grad[i * row + j];
        });
    }
    return y;
}

// ---------------------------------------------------------------- elementwise

inline Tensor add(const Tensor& a, const Tensor& b) {
    const std::size_t inner = detail::broadcast_inner(a, b, "add");
    std::vector<double> out(a.values());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i % inner];
    Tensor c = detail::make_result(a.shape(), std::move(out), detail::any_requires_grad(a, b), "add");
    if (c.requires_grad()) {
        Tape::current().record([an = a.ptr(), bn = b.ptr(), cn = c.ptr(), inner] {
            if (cn->grad.empty()) return;
            detail::accumulate(an, cn->grad);
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (std::size_t i = 0; i < cn->grad.size(); ++i) bn->grad[i % inner] += cn->grad[i];
            }
        });
    }
    return c;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    const std::size_t inner = detail::broadcast_inner(a, b, "sub");
    std::vector<double> out(a.values());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b[i % inner];
    Tensor c = detail::make_result(a.shape(), std::move(out), detail::any_requires_grad(a, b), "sub");
    if (c.requires_grad()) {
        Tape::current().record([an = a.ptr(), bn = b.ptr(), cn = c.ptr(), inner] {
            if (cn->grad.empty()) return;
            detail::accumulate(an, cn->grad);
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (std::size_t i = 0; i < cn->grad.size(); ++i) bn->grad[i % inner] -= cn->grad[i];
            }
        });
    }
    return c;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    const std::size_t inner = detail::broadcast_inner(a, b, "mul");
    std::vector<double> out(a.values());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b[i % inner];
    Tensor c = detail::make_result(a.shape(), std::move(out), detail::any_requires_grad(a, b), "mul");
    if (c.requires_grad()) {
        Tape::current().record([an = a.ptr(), bn = b.ptr(), cn = c.ptr(), inner] {
            if (cn->grad.empty()) return;
            if (an->requires_grad) {
                an->ensure_grad();
                for (std::size_t i = 0; i < cn->grad.size(); ++i) an->grad[i] += cn->grad[i] * bn->value[i % inner];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (std::size_t i = 0; i < cn->grad.size(); ++i) bn->grad[i % inner] += cn->grad[i] * an->value[i];
            }
        });
    }
    return c;
}

inline Tensor div(const Tensor& a, const Tensor& b) {
    const std::size_t inner = detail::broadcast_inner(a, b, "div");
    for (std::size_t i = 0; i < inner; ++i)
        if (b[i] == 0.0) throw NumericError("div: division by zero");
    std::vector<double> out(a.values());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] /= b[i % inner];
    Tensor c = detail::make_result(a.shape(), std::move(out), detail::any_requires_grad(a, b), "div");
    if (c.requires_grad()) {
        Tape::current().record([an = a.ptr(), bn = b.ptr(), cn = c.ptr(), inner] {
            if (cn->grad.empty()) return;
            if (an->requires_grad) {
                an->ensure_grad();
                for (std::size_t i = 0; i < cn->grad.size(); ++i) an->grad[i] += cn->grad[i] / bn->value[i % inner];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (std::size_t i = 0; i < cn->grad.size(); ++i)
                    bn->grad[i % inner] -= cn->grad[i] * cn->value[i] / bn->value[i % inner];
            }
        });
    }
    return c;
}

inline Tensor scale(const Tensor& x, double s) {
    return detail::unary(
        x, "scale", [s](double v) { return v * s; }, [s](double, double) { return s; });
}

inline Tensor add_scalar(const Tensor& x, double s) {
    return detail::unary(
        x, "add_scalar", [s](double v) { return v + s; }, [](double, double) { return 1.0; });
}

inline Tensor exp(const Tensor& x) {
    return detail::unary(
        x, "exp", [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

inline Tensor log(const Tensor& x) {
    for (double v : x.data())
        if (!(v > 0.0)) throw NumericError("log: non-positive input");
    return detail::unary(
        x, "log", [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

inline double sigmoid_value(double v) {
    if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
    const double e = std::exp(v);
    return e / (1.0 + e);
}

inline Tensor sigmoid(const Tensor& x) {
    return detail::unary(
        x, "sigmoid", [](double v) { return sigmoid_value(v); }, [](double, double y) { return y * (1.0 - y); });
}

// Records the on/off pattern of every relu on this thread, or replays a
// recorded pattern so a finite-difference probe stays on one linear piece.
// Only the gradient checker uses it.
class ReluGates {
public:
    enum class Mode { off, record, replay };

    static ReluGates& current() {
        thread_local ReluGates gates;
        return gates;
    }

    Mode mode() const noexcept { return mode_; }
    void record() {
        mode_ = Mode::record;
        log_.clear();
        cursor_ = 0;
    }
    void replay() {
        mode_ = Mode::replay;
        cursor_ = 0;
    }
    void off() {
        mode_ = Mode::off;
        log_.clear();
        cursor_ = 0;
    }

    std::vector<std::uint8_t> gate(const Tensor& x) {
        std::vector<std::uint8_t> g(x.size());
        if (mode_ == Mode::replay) {
            if (cursor_ >= log_.size() || log_[cursor_].size() != x.size())
                throw ContractError("relu gate replay does not match the recorded forward pass");
            return log_[cursor_++];
        }
        for (std::size_t i = 0; i < g.size(); ++i) g[i] = x[i] > 0.0;
        if (mode_ == Mode::record) log_.push_back(g);
        return g;
    }

private:
    Mode mode_ = Mode::off;
    std::vector<std::vector<std::uint8_t>> log_;
    std::size_t cursor_ = 0;
};

// Scoped record-then-replay: the first pass records, later passes replay.
class ReluGateReplay {
public:
    ReluGateReplay() { ReluGates::current().record(); }
    ~ReluGateReplay() { ReluGates::current().off(); }
    ReluGateReplay(const ReluGateReplay&) = delete;
    ReluGateReplay& operator=(const ReluGateReplay&) = delete;
    void arm() { ReluGates::current().replay(); }
};

inline Tensor relu(const Tensor& x) {
    auto gate = ReluGates::current().gate(x);
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = gate[i] ? x[i] : 0.0;
    Tensor y = detail::make_result(x.shape(), std::move(out), detail::any_requires_grad(x), "relu");
    if (y.requires_grad()) {
        Tape::current().record([xn = x.ptr(), yn = y.ptr(), gate = std::move(gate)] {
            if (yn->grad.empty() || !xn->requires_grad) return;
            xn->ensure_grad();
            for (std::size_t i = 0; i < yn->grad.size(); ++i)
                if (gate[i]) xn->grad[i] += yn->grad[i];
        });
    }
    return y;
}

// Elementwise binary cross-entropy on logits against a constant target.
inline Tensor bce_with_logits(const Tensor& logits, const Tensor& target) {
    if (logits.shape() != target.shape()) {
        throw DimensionError("bce_with_logits: shape " + shape_str(logits.shape()) + " vs target " +
                             shape_str(target.shape()));
    }
    std::vector<double> out(logits.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double x = logits[i];
        out[i] = std::max(x, 0.0) - x * target[i] + std::log1p(std::exp(-std::abs(x)));
    }
    Tensor y = detail::make_result(logits.shape(), std::move(out), detail::any_requires_grad(logits),
                                   "bce_with_logits");
    if (y.requires_grad()) {
        Tape::current().record([xn = logits.ptr(), tn = target.ptr(), yn = y.ptr()] {
            if (yn->grad.empty() || !xn->requires_grad) return;
            xn->ensure_grad();
            for (std::size_t i = 0; i < yn->grad.size(); ++i)
                xn->grad[i] += yn->grad[i] * (sigmoid_value(xn->value[i]) - tn->value[i]);
        });
    }
    return y;
}

// ---------------------------------------------------------------- reductions

inline Tensor sum(const Tensor& x) {
    double acc = 0.0;
    for (double v : x.data()) acc += v;
    Tensor y = detail::make_result({}, {acc}, detail::any_requires_grad(x), "sum");
    if (y.requires_grad()) {
        Tape::current().record([xn = x.ptr(), yn = y.ptr()] {
            if (yn->grad.empty() || !xn->requires_grad) return;
            xn->ensure_grad();
            for (auto& g : xn->grad) g += yn->grad[0];
        });
    }
    return y;
}

inline Tensor mean(const Tensor& x) {
    if (x.size() == 0) throw DimensionError("mean: empty tensor");
    return scale(sum(x), 1.0 / static_cast<double>(x.size()));
}

// Sums out one axis, removing it from the shape.
inline Tensor sum_axis(const Tensor& x, long axis_in) {
    const std::size_t axis = detail::normalize_axis(axis_in, x.rank(), "sum_axis");
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
    for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
    const std::size_t n = x.dim(axis);
    Shape shape = x.shape();
    shape.erase(shape.begin() + static_cast<long>(axis));
    std::vector<double> out(outer * inner, 0.0);
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t r = 0; r < n; ++r)
            for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += x[(o * n + r) * inner + i];
    Tensor y = detail::make_result(std::move(shape), std::move(out), detail::any_requires_grad(x), "sum_axis");
    if (y.requires_grad()) {
        Tape::current().record([xn = x.ptr(), yn = y.ptr(), outer, n, inner] {
            if (yn->grad.empty() || !xn->requires_grad) return;
            xn->ensure_grad();
            for (std::size_t o = 0; o < outer; ++o)
                for (std::size_t r = 0; r < n; ++r)
                    for (std::size_t i = 0; i < inner; ++i) xn->grad[(o * n + r) * inner + i] += yn->grad[o * inner + i];
        });
    }
    return y;
}

inline Tensor mean_axis(const Tensor& x, long axis) {
    const std::size_t a = detail::normalize_axis(axis, x.rank(), "mean_axis");
    return scale(sum_axis(x, axis), 1.0 / static_cast<double>(x.dim(a)));
}

// Spatial mean per (sample, channel): [N,C,H,W] -> [N,C].
inline Tensor global_avg_pool(const Tensor& x) {
    detail::require_rank(x, 4, "global_avg_pool");
    return mean_axis(reshape(x, {x.dim(0), x.dim(1), x.dim(2) * x.dim(3)}), 2);
}

// ---------------------------------------------------------------- normalizers

// Numerically stable softmax along `axis` (max subtraction).
inline Tensor softmax(const Tensor& x, long axis_in) {
    const std::size_t axis = detail::normalize_axis(axis_in, x.rank(), "softmax");
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
    for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
    const std::size_t n = x.dim(axis);
    std::vector<double> out(x.size());
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < inner; ++i) {
            const std::size_t base = o * n * inner + i;
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t r = 0; r < n; ++r) mx = std::max(mx, x[base + r * inner]);
            double z = 0.0;
            for (std::size_t r = 0; r < n; ++r) z += (out[base + r * inner] = std::exp(x[base + r * inner] - mx));
            for (std::size_t r = 0; r < n; ++r) out[base + r * inner] /= z;
        }
    Tensor y = detail::make_result(x.shape(), std::move(out), detail::any_requires_grad(x), "softmax");
    if (y.requires_grad()) {
        Tape::current().record([xn = x.ptr(), yn = y.ptr(), outer, n, inner] {
            if (yn->grad.empty() || !xn->requires_grad) return;
            xn->ensure_grad();
            for (std::size_t o = 0; o < outer; ++o)
                for (std::size_t i = 0; i < inner; ++i) {
                    const std::size_t base = o * n * inner + i;
                    double dot = 0.0;
                    for (std::size_t r = 0; r < n; ++r) dot += yn->grad[base + r * inner] * yn->value[base + r * inner];
                    for (std::size_t r = 0; r < n; ++r) {
                        const std::size_t k = base + r * inner;
                        xn->grad[k] += yn->value[k] * (yn->grad[k] - dot);
                    }
                }
        });
    }
    return y;
}

inline Tensor log_softmax(const Tensor& x, long axis_in) {
    const std::size_t axis = detail::normalize_axis(axis_in, x.rank(), "log_softmax");
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
    for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
    const std::size_t n = x.dim(axis);
    std::vector<double> out(x.size());
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < inner; ++i) {
            const std::size_t base = o * n * inner + i;
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t r = 0; r < n; ++r) mx = std::max(mx, x[base + r * inner]);
            double z = 0.0;
            for (std::size_t r = 0; r < n; ++r) z += std::exp(x[base + r * inner] - mx);
            const double lz = mx + std::log(z);
            for (std::size_t r = 0; r < n; ++r) out[base + r * inner] = x[base + r * inner] - lz;
        }
    Tensor y = detail::make_result(x.shape(), std::move(out), detail::any_requires_grad(x), "log_softmax");
    if (y.requires_grad()) {
        Tape::current().record([xn = x.ptr(), yn = y.ptr(), outer, n, inner] {
            if (yn->grad.empty() || !xn->requires_grad) return;
            xn->ensure_grad();
            for (std::size_t o = 0; o < outer; ++o)
                for (std::size_t i = 0; i < inner; ++i) {
                    const std::size_t base = o * n * inner + i;
                    double gsum = 0.0;
                    for (std::size_t r = 0; r < n; ++r) gsum += yn->grad[base + r * inner];
                    for (std::size_t r = 0; r < n; ++r) {
                        const std::size_t k = base + r * inner;
                        xn->grad[k] += yn->grad[k] - std::exp(yn->value[k]) * gsum;
                    }
                }
        });
    }
    return y;
}

// Softmax over the last axis where blocked entries (nonzero in `blocked`)
// receive exactly zero weight. A row with every entry blocked is a contract
// violation; callers decide on a fallback before calling.
inline Tensor masked_softmax(const Tensor& x, const std::vector<std::uint8_t>& blocked) {
    if (x.rank() == 0 || blocked.size() != x.size())
        throw DimensionError("masked_softmax: mask size does not match " + shape_str(x.shape()));
    const std::size_t n = x.dim(x.rank() - 1);
    const std::size_t rows = x.size() / n;
    std::vector<double> out(x.size(), 0.0);
    for (std::size_t r = 0; r < rows; ++r) {
        const std::size_t base = r * n;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < n; ++j)
            if (!blocked[base + j]) mx = std::max(mx, x[base + j]);
        if (mx == -std::numeric_limits<double>::infinity())
            throw ContractError("masked_softmax: attention row " + std::to_string(r) + " is fully masked");
        double z = 0.0;
        for (std::size_t j = 0; j < n; ++j)
            if (!blocked[base + j]) z += (out[base + j] = std::exp(x[base + j] - mx));
        for (std::size_t j = 0; j < n; ++j) out[base + j] /= z;
    }
    Tensor y = detail::make_result(x.shape(), std::move(out), detail::any_requires_grad(x), "masked_softmax");
    if (y.requires_grad()) {
        Tape::current().record([xn = x.ptr(), yn = y.ptr(), rows, n] {
            if (yn->grad.empty() || !xn->requires_grad) return;
            xn->ensure_grad();
            for (std::size_t r = 0; r < rows; ++r) {
                const std::size_t base = r * n;
                double dot = 0.0;
                for (std::size_t j = 0; j < n; ++j) dot += yn->grad[base + j] * yn->value[base + j];
                for (std::size_t j = 0; j < n; ++j)
                    xn->grad[base + j] += yn->value[base + j] * (yn->grad[base + j] - dot);
            }
        });
    }
    return y;
}

// Layer normalization over the last axis with affine gain/bias.
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5) {
    if (x.rank() == 0) throw DimensionError("layer_norm: scalar input");
    const std::size_t n = x.dim(x.rank() - 1);
    if (gamma.size() != n || beta.size() != n)
        throw DimensionError("layer_norm: affine width does not match " + shape_str(x.shape()));
    const std::size_t rows = x.size() / n;
    std::vector<double> out(x.size()), xhat(x.size()), inv_std(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const std::size_t base = r * n;
        double mu = 0.0;
        for (std::size_t j = 0; j < n; ++j) mu += x[base + j];
        mu /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t j = 0; j < n; ++j) var += (x[base + j] - mu) * (x[base + j] - mu);
        var /= static_cast<double>(n);
        inv_std[r] = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < n; ++j) {
            xhat[base + j] = (x[base + j] - mu) * inv_std[r];
            out[base + j] = xhat[base + j] * gamma[j] + beta[j];
        }
    }
    Tensor y = detail::make_result(x.shape(), std::move(out), detail::any_requires_grad(x, gamma, beta),
                                   "layer_norm");
    if (y.requires_grad()) {
        Tape::current().record([xn = x.ptr(), gn = gamma.ptr(), bn = beta.ptr(), yn = y.ptr(),
                                xhat = std::move(xhat), inv_std = std::move(inv_std), rows, n] {
            if (yn->grad.empty()) return;
            if (gn->requires_grad) gn->ensure_grad();
            if (bn->requires_grad) bn->ensure_grad();
            if (xn->requires_grad) xn->ensure_grad();
            std::vector<double> dxhat(n);
            for (std::size_t r = 0; r < rows; ++r) {
                const std::size_t base = r * n;
                double m1 = 0.0, m2 = 0.0;
                for (std::size_t j = 0; j < n; ++j) {
                    const double g = yn->grad[base + j];
                    if (gn->requires_grad) gn->grad[j] += g * xhat[base + j];
                    if (bn->requires_grad) bn->grad[j] += g;
                    dxhat[j] = g * gn->value[j];
                    m1 += dxhat[j];
                    m2 += dxhat[j] * xhat[base + j];
                }
                if (!xn->requires_grad) continue;
                m1 /= static_cast<double>(n);
                m2 /= static_cast<double>(n);
                for (std::size_t j = 0; j < n; ++j)
                    xn->grad[base + j] += inv_std[r] * (dxhat[j] - m1 - xhat[base + j] * m2);
            }
        });
    }
    return y;
}

// ---------------------------------------------------------------- similarity

inline constexpr double kCosineEps = 1e-8;

// <a,b> / max(|a| |b|, eps) over all elements. Exact-zero inputs give 0
// through the eps guard rather than an exception.
inline Tensor cosine_similarity(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw DimensionError("cosine_similarity: shape " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    na = std::sqrt(na);
    nb = std::sqrt(nb);
    // Clamping the product instead of each norm keeps S(a, a) = 1 up to rounding.
    const double denom = std::max(na * nb, kCosineEps);
    const bool clamped = na * nb < kCosineEps;
    Tensor y = detail::make_result({}, {dot / denom}, detail::any_requires_grad(a, b), "cosine_similarity");
    if (y.requires_grad()) {
        Tape::current().record([an = a.ptr(), bn = b.ptr(), yn = y.ptr(), dot, na, nb, denom, clamped] {
            if (yn->grad.empty()) return;
            const double g = yn->grad[0];
            auto push = [&](const detail::NodePtr& self, const detail::NodePtr& other, double nself) {
                if (!self->requires_grad) return;
                self->ensure_grad();
                for (std::size_t i = 0; i < self->value.size(); ++i) {
                    double d = other->value[i] / denom;
                    if (!clamped) d -= dot / denom * self->value[i] / (nself * nself);
                    self->grad[i] += g * d;
                }
            };
            push(an, bn, na);
            push(bn, an, nb);
        });
    }
    return y;
}

// ---------------------------------------------------------------- spatial

inline std::size_t conv_out_extent(std::size_t in, std::size_t stride) { return (in - 1) / stride + 1; }

// Cross-correlation of x[N,C,H,W] with w[O,C,k,k], odd k, zero padding k/2.
// Output extent is ceil(H/stride). bias may be undefined.
inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, std::size_t stride) {
    if (stride < 1) throw ParameterError("conv2d: stride must be >= 1");
    detail::require_rank(x, 4, "conv2d");
    detail::require_rank(w, 4, "conv2d");
    const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::size_t O = w.dim(0), k = w.dim(2);
    if (w.dim(1) != C || w.dim(3) != k)
        throw DimensionError("conv2d: kernel " + shape_str(w.shape()) + " incompatible with input " +
                             shape_str(x.shape()));
    if (k % 2 == 0) throw ParameterError("conv2d: kernel size must be odd");
    if (bias.defined() && bias.size() != O) throw DimensionError("conv2d: bias width mismatch");
    const long pad = static_cast<long>(k / 2);
    const std::size_t Ho = conv_out_extent(H, stride), Wo = conv_out_extent(W, stride);
    const std::size_t K = C * k * k, P = Ho * Wo;

    // im2col: cols[n][K x P]
    std::vector<double> cols(N * K * P, 0.0);
    for (std::size_t n = 0; n < N; ++n) {
        double* cn = cols.data() + n * K * P;
        const double* xn = x.data().data() + n * C * H * W;
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t ky = 0; ky < k; ++ky)
                for (std::size_t kx = 0; kx < k; ++kx) {
                    double* row = cn + ((c * k + ky) * k + kx) * P;
                    for (std::size_t oy = 0; oy < Ho; ++oy) {
                        const long iy = static_cast<long>(oy * stride) + static_cast<long>(ky) - pad;
                        if (iy < 0 || iy >= static_cast<long>(H)) continue;
                        for (std::size_t ox = 0; ox < Wo; ++ox) {
                            const long ix = static_cast<long>(ox * stride) + static_cast<long>(kx) - pad;
                            if (ix < 0 || ix >= static_cast<long>(W)) continue;
                            row[oy * Wo + ox] = xn[(c * H + static_cast<std::size_t>(iy)) * W + static_cast<std::size_t>(ix)];
                        }
                    }
                }
    }
    std::vector<double> out(N * O * P, 0.0);
    for (std::size_t n = 0; n < N; ++n) {
        double* yn = out.data() + n * O * P;
        if (bias.defined())
            for (std::size_t o = 0; o < O; ++o) std::fill_n(yn + o * P, P, bias[o]);
        detail::gemm_nn(w.data().data(), cols.data() + n * K * P, yn, O, K, P);
    }
    const bool track = bias.defined() ? detail::any_requires_grad(x, w, bias) : detail::any_requires_grad(x, w);
    Tensor y = detail::make_result({N, O, Ho, Wo}, std::move(out), track, "conv2d");
    if (y.requires_grad()) {
        detail::NodePtr bn = bias.defined() ? bias.ptr() : nullptr;
        Tape::current().record([xn = x.ptr(), wn = w.ptr(), bn, yn = y.ptr(), cols = std::move(cols), N, C, H, W,
                                O, k, stride, pad, Ho, Wo, K, P] {
            if (yn->grad.empty()) return;
            if (wn->requires_grad) wn->ensure_grad();
            if (bn && bn->requires_grad) bn->ensure_grad();
            if (xn->requires_grad) xn->ensure_grad();
            std::vector<double> dcols(K * P);
            for (std::size_t n = 0; n < N; ++n) {
                const double* g = yn->grad.data() + n * O * P;
                if (wn->requires_grad) detail::gemm_nt(g, cols.data() + n * K * P, wn->grad.data(), O, P, K);
                if (bn && bn->requires_grad)
                    for (std::size_t o = 0; o < O; ++o)
                        for (std::size_t p = 0; p < P; ++p) bn->grad[o] += g[o * P + p];
                if (!xn->requires_grad) continue;
                std::fill(dcols.begin(), dcols.end(), 0.0);
                detail::gemm_tn(wn->value.data(), g, dcols.data(), K, O, P);
                double* dx = xn->grad.data() + n * C * H * W;
                for (std::size_t c = 0; c < C; ++c)
                    for (std::size_t ky = 0; ky < k; ++ky)
                        for (std::size_t kx = 0; kx < k; ++kx) {
                            const double* row = dcols.data() + ((c * k + ky) * k + kx) * P;
                            for (std::size_t oy = 0; oy < Ho; ++oy) {
                                const long iy = static_cast<long>(oy * stride) + static_cast<long>(ky) - pad;
                                if (iy < 0 || iy >= static_cast<long>(H)) continue;
                                for (std::size_t ox = 0; ox < Wo; ++ox) {
                                    const long ix = static_cast<long>(ox * stride) + static_cast<long>(kx) - pad;
                                    if (ix < 0 || ix >= static_cast<long>(W)) continue;
                                    dx[(c * H + static_cast<std::size_t>(iy)) * W + static_cast<std::size_t>(ix)] +=
                                        row[oy * Wo + ox];
                                }
                            }
                        }
            }
        });
    }
    return y;
}

inline Tensor conv2d(const Tensor& x, const Tensor& w, std::size_t stride) { return conv2d(x, w, Tensor{}, stride); }

// Nearest-neighbour x2 upsampling of [N,C,H,W].
inline Tensor upsample_nearest2x(const Tensor& x) {
    detail::require_rank(x, 4, "upsample_nearest2x");
    const std::size_t NC = x.dim(0) * x.dim(1), H = x.dim(2), W = x.dim(3);
    std::vector<double> out(NC * 4 * H * W);
    for (std::size_t p = 0; p < NC; ++p)
        for (std::size_t y = 0; y < 2 * H; ++y)
            for (std::size_t xx = 0; xx < 2 * W; ++xx)
                out[(p * 2 * H + y) * 2 * W + xx] = x[(p * H + y / 2) * W + xx / 2];
    Tensor y = detail::make_result({x.dim(0), x.dim(1), 2 * H, 2 * W}, std::move(out), detail::any_requires_grad(x),
                                   "upsample_nearest2x");
    if (y.requires_grad()) {
        Tape::current().record([xn = x.ptr(), yn = y.ptr(), NC, H, W] {
            if (yn->grad.empty() || !xn->requires_grad) return;
            xn->ensure_grad();
            for (std::size_t p = 0; p < NC; ++p)
                for (std::size_t y = 0; y < 2 * H; ++y)
                    for (std::size_t xx = 0; xx < 2 * W; ++xx)
                        xn->grad[(p * H + y / 2) * W + xx / 2] += yn->grad[(p * 2 * H + y) * 2 * W + xx];
        });
    }
    return y;
}

// Bilinear resize of [N,C,H,W] to [N,C,out_h,out_w], align_corners=false.
inline Tensor upsample_bilinear(const Tensor& x, std::size_t out_h, std::size_t out_w) {
    detail::require_rank(x, 4, "upsample_bilinear");
    const std::size_t NC = x.dim(0) * x.dim(1), H = x.dim(2), W = x.dim(3);
    struct Tap {
        std::size_t i0, i1;
        double l1;
    };
    auto taps = [](std::size_t in, std::size_t out) {
        std::vector<Tap> t(out);
        const double s = static_cast<double>(in) / static_cast<double>(out);
        for (std::size_t o = 0; o < out; ++o) {
            double src = (static_cast<double>(o) + 0.5) * s - 0.5;
            if (src < 0.0) src = 0.0;
            std::size_t i0 = static_cast<std::size_t>(std::floor(src));
            if (i0 > in - 1) i0 = in - 1;
            const std::size_t i1 = std::min(i0 + 1, in - 1);
            t[o] = {i0, i1, src - static_cast<double>(i0)};
        }
        return t;
    };
    auto ty = taps(H, out_h), tx = taps(W, out_w);
    std::vector<double> out(NC * out_h * out_w);
    for (std::size_t p = 0; p < NC; ++p) {
        const double* src = x.data().data() + p * H * W;
        for (std::size_t oy = 0; oy < out_h; ++oy)
            for (std::size_t ox = 0; ox < out_w; ++ox) {
                const auto& a = ty[oy];
                const auto& b = tx[ox];
                out[(p * out_h + oy) * out_w + ox] =
                    (1 - a.l1) * ((1 - b.l1) * src[a.i0 * W + b.i0] + b.l1 * src[a.i0 * W + b.i1]) +
                    a.l1 * ((1 - b.l1) * src[a.i1 * W + b.i0] + b.l1 * src[a.i1 * W + b.i1]);
            }
    }
    Tensor y = detail::make_result({x.dim(0), x.dim(1), out_h, out_w}, std::move(out), detail::any_requires_grad(x),
                                   "upsample_bilinear");
    if (y.requires_grad()) {
        Tape::current().record([xn = x.ptr(), yn = y.ptr(), ty = std::move(ty), tx = std::move(tx), NC, H, W, out_h,
                                out_w] {
            if (yn->grad.empty() || !xn->requires_grad) return;
            xn->ensure_grad();
            for (std::size_t p = 0; p < NC; ++p) {
                double* dst = xn->grad.data() + p * H * W;
                for (std::size_t oy = 0; oy < out_h; ++oy)
                    for (std::size_t ox = 0; ox < out_w; ++ox) {
                        const double g = yn->grad[(p * out_h + oy) * out_w + ox];
                        const auto& a = ty[oy];
                        const auto& b = tx[ox];
                        dst[a.i0 * W + b.i0] += g * (1 - a.l1) * (1 - b.l1);
                        dst[a.i0 * W + b.i1] += g * (1 - a.l1) * b.l1;
                        dst[a.i1 * W + b.i0] += g * a.l1 * (1 - b.l1);
                        dst[a.i1 * W + b.i1] += g * a.l1 * b.l1;
                    }
            }
        });
    }
    return y;
}

// Non-overlapping average pooling of [N,C,H,W] by an integer factor.
inline Tensor avg_pool(const Tensor& x, std::size_t factor) {
    detail::require_rank(x, 4, "avg_pool");
    if (factor < 1 || x.dim(2) % factor || x.dim(3) % factor)
        throw DimensionError("avg_pool: factor " + std::to_string(factor) + " does not divide " + shape_str(x.shape()));
    const std::size_t NC = x.dim(0) * x.dim(1), H = x.dim(2), W = x.dim(3), h = H / factor, w = W / factor;
    const double inv = 1.0 / static_cast<double>(factor * factor);
    std::vector<double> out(NC * h * w, 0.0);
    for (std::size_t p = 0; p < NC; ++p)
        for (std::size_t y = 0; y < H; ++y)
            for (std::size_t xx = 0; xx < W; ++xx) out[(p * h + y / factor) * w + xx / factor] += x[(p * H + y) * W + xx] * inv;
    Tensor y = detail::make_result({x.dim(0), x.dim(1), h, w}, std::move(out), detail::any_requires_grad(x), "avg_pool");
    if (y.requires_grad()) {
        Tape::current().record([xn = x.ptr(), yn = y.ptr(), NC, H, W, h, w, factor, inv] {
            if (yn->grad.empty() || !xn->requires_grad) return;
            xn->ensure_grad();
            for (std::size_t p = 0; p < NC; ++p)
                for (std::size_t y = 0; y < H; ++y)
                    for (std::size_t xx = 0; xx < W; ++xx)
                        xn->grad[(p * H + y) * W + xx] += yn->grad[(p * h + y / factor) * w + xx / factor] * inv;
        });
    }
    return y;
}

// ---------------------------------------------------------------- composites

// x[..., k] * w[k, n] (+ b[n]).
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b = Tensor{}) {
    if (x.rank() == 0) throw DimensionError("linear: scalar input");
    detail::require_rank(w, 2, "linear");
    const std::size_t k = x.dim(x.rank() - 1);
    if (w.dim(0) != k)
        throw DimensionError("linear: input " + shape_str(x.shape()) + " vs weight " + shape_str(w.shape()));
    Shape out_shape = x.shape();
    out_shape.back() = w.dim(1);
    Tensor y = matmul(x.rank() == 2 ? x : reshape(x, {x.size() / k, k}), w);
    if (b.defined()) y = add(y, b);
    return x.rank() == 2 ? y : reshape(y, std::move(out_shape));
}

}  // namespace combo
