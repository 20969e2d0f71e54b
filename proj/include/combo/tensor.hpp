// Copyright (c) 2026 The combo-avs Authors
// SPDX-License-Identifier: Apache-2.0
//
// Dense float64 tensor with a define-by-run reverse-mode tape.

#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace combo {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

// Error taxonomy. Every failure surfaced by the library derives from Error so
// the CLI can report a single machine-parsable line.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& what) : std::runtime_error(what) {}
    virtual const char* kind() const noexcept { return "error"; }
};

#define COMBO_DEFINE_ERROR(Name, Kind)                                     \
    class Name : public Error {                                            \
    public:                                                                \
        explicit Name(const std::string& what) : Error(what) {}            \
        const char* kind() const noexcept override { return Kind; }        \
    };

COMBO_DEFINE_ERROR(DimensionError, "dimension")
COMBO_DEFINE_ERROR(ParameterError, "parameter")
COMBO_DEFINE_ERROR(ContractError, "contract")
COMBO_DEFINE_ERROR(NumericError, "numeric")
COMBO_DEFINE_ERROR(ConfigError, "config")
COMBO_DEFINE_ERROR(IoError, "io")
COMBO_DEFINE_ERROR(CheckpointError, "checkpoint")
COMBO_DEFINE_ERROR(GenerationError, "generation")

#undef COMBO_DEFINE_ERROR

class CapacityError : public Error {
public:
    CapacityError(std::size_t requested, std::size_t capacity, const std::string& what)
        : Error(what + " (requested " + std::to_string(requested) + ", capacity " +
                std::to_string(capacity) + ")"),
          requested_(requested),
          capacity_(capacity) {}
    const char* kind() const noexcept override { return "capacity"; }
    std::size_t requested() const noexcept { return requested_; }
    std::size_t capacity() const noexcept { return capacity_; }

private:
    std::size_t requested_;
    std::size_t capacity_;
};

namespace detail {

struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;
    bool requires_grad = false;

    void ensure_grad() {
        if (grad.empty()) grad.assign(value.size(), 0.0);
    }
};

using NodePtr = std::shared_ptr<Node>;

}  // namespace detail

class Tensor {
public:
    Tensor() = default;

    Tensor(Shape shape, std::vector<double> values, bool requires_grad = false)
        : node_(std::make_shared<detail::Node>()) {
        if (numel(shape) != values.size()) {
            throw DimensionError("tensor shape " + shape_str(shape) + " does not match " +
                                 std::to_string(values.size()) + " values");
        }
        node_->shape = std::move(shape);
        node_->value = std::move(values);
        node_->requires_grad = requires_grad;
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        const std::size_t n = numel(shape);
        return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
    }

    static Tensor full(Shape shape, double v, bool requires_grad = false) {
        const std::size_t n = numel(shape);
        return Tensor(std::move(shape), std::vector<double>(n, v), requires_grad);
    }

    static Tensor scalar(double v, bool requires_grad = false) {
        return Tensor(Shape{}, std::vector<double>{v}, requires_grad);
    }

    bool defined() const noexcept { return static_cast<bool>(node_); }

    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
    std::size_t size() const { return node_->value.size(); }

    std::span<const double> data() const { return node_->value; }
    // Mutable access is reserved for leaves (parameters, optimizer, fixtures).
    std::span<double> mutable_data() { return node_->value; }
    const std::vector<double>& values() const { return node_->value; }

    double operator[](std::size_t i) const { return node_->value[i]; }
    double item() const {
        if (size() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
        return node_->value[0];
    }

    bool requires_grad() const { return node_ && node_->requires_grad; }
    void set_requires_grad(bool on) { node_->requires_grad = on; }

    bool has_grad() const { return !node_->grad.empty(); }
    std::span<const double> grad() const { return node_->grad; }
    std::span<double> mutable_grad() {
        node_->ensure_grad();
        return node_->grad;
    }
    void zero_grad() { node_->grad.clear(); }

    // Fresh leaf sharing no history with this tensor.
    Tensor detach() const { return Tensor(shape(), node_->value, false); }
    Tensor clone() const { return Tensor(shape(), node_->value, requires_grad()); }

    const detail::NodePtr& ptr() const { return node_; }

private:
    detail::NodePtr node_;
};

inline bool& grad_mode_flag() {
    thread_local bool enabled = true;
    return enabled;
}

inline bool grad_enabled() { return grad_mode_flag(); }

class NoGradGuard {
public:
    NoGradGuard() : previous_(grad_mode_flag()) { grad_mode_flag() = false; }
    ~NoGradGuard() { grad_mode_flag() = previous_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

// Ordered record of executed differentiable operations. One tape per thread;
// backward replays adjoints in exact reverse order and then clears the tape.
class Tape {
public:
    using Adjoint = std::function<void()>;

    static Tape& current() {
        thread_local Tape tape;
        return tape;
    }

    void record(Adjoint adjoint) { records_.push_back(std::move(adjoint)); }
    std::size_t size() const noexcept { return records_.size(); }
    void clear() { records_.clear(); }

    void backward(const Tensor& loss) {
        if (!loss.defined() || loss.size() != 1) {
            throw ContractError("backward requires a scalar loss, got " +
                                (loss.defined() ? shape_str(loss.shape()) : std::string("undefined")));
        }
        if (!loss.requires_grad()) {
            throw ContractError("backward on a loss that was not produced on the tape");
        }
        loss.ptr()->ensure_grad();
        loss.ptr()->grad[0] += 1.0;
        for (auto it = records_.rbegin(); it != records_.rend(); ++it) (*it)();
        records_.clear();
    }

private:
    std::vector<Adjoint> records_;
};

inline void backward(const Tensor& loss) { Tape::current().backward(loss); }

namespace detail {

inline void check_finite(const std::vector<double>& v, const char* op) {
    for (double x : v) {
        if (!std::isfinite(x)) throw NumericError(std::string("non-finite value produced by ") + op);
    }
}

template <typename... Ts>
bool any_requires_grad(const Ts&... ts) {
    return grad_enabled() && (ts.requires_grad() || ...);
}

inline bool any_requires_grad_list(const std::vector<Tensor>& ts) {
    if (!grad_enabled()) return false;
    for (const auto& t : ts)
        if (t.requires_grad()) return true;
    return false;
}

inline Tensor make_result(Shape shape, std::vector<double> values, bool track, const char* op) {
    check_finite(values, op);
    return Tensor(std::move(shape), std::move(values), track);
}

// Adds `src` into the gradient of `dst` when it participates in differentiation.
inline void accumulate(const NodePtr& dst, std::span<const double> src) {
    if (!dst->requires_grad) return;
    dst->ensure_grad();
    for (std::size_t i = 0; i < src.size(); ++i) dst->grad[i] += src[i];
}

}  // namespace detail

}  // namespace combo
