#pragma once

#include <atomic>
#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "panflow/tensor.hpp"

namespace panflow {

/// A trainable tensor together with its accumulated gradient.
template <class T>
struct Parameter {
    std::string name;
    Tensor<T> value;
    Tensor<T> grad;

    Parameter() = default;
    Parameter(std::string n, Tensor<T> v)
        : name(std::move(n)), value(std::move(v)), grad(Tensor<T>::zeros_like(value)) {}

    void zero_grad() { grad = Tensor<T>::zeros_like(value); }
};

namespace detail {

inline std::atomic<bool>& finite_checks_flag() {
    static std::atomic<bool> flag{true};
    return flag;
}

template <class T>
struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool has_grad = false;
    bool requires_grad = false;
    Parameter<T>* param = nullptr;
    std::function<void(Node&)> backward;

    void accumulate(const Tensor<T>& g) {
        if (!has_grad) {
            grad = g;
            has_grad = true;
            return;
        }
        T* dst = grad.data();
        const T* src = g.data();
        for (std::size_t i = 0; i < grad.numel(); ++i) dst[i] += src[i];
    }

    void accumulate(Tensor<T>&& g) {
        if (!has_grad) {
            grad = std::move(g);
            has_grad = true;
            return;
        }
        accumulate(static_cast<const Tensor<T>&>(g));
    }
};

} // namespace detail

/// Enables or disables the NaN/Inf assertion run after every op (on by default).
inline void set_finite_checks(bool enabled) { detail::finite_checks_flag() = enabled; }
inline bool finite_checks_enabled() { return detail::finite_checks_flag(); }

template <class T>
class GradTape;

/// Handle to a value that may participate in reverse-mode differentiation.
template <class T>
class Var {
public:
    Var() = default;

    static Var constant(Tensor<T> value) {
        auto node = std::make_shared<detail::Node<T>>();
        node->value = std::move(value);
        return Var(std::move(node), nullptr);
    }

    const Tensor<T>& value() const { return node_->value; }
    const Shape& shape() const { return node_->value.shape(); }
    bool requires_grad() const { return node_ && node_->requires_grad; }
    GradTape<T>* tape() const { return tape_; }

    /// Gradient accumulated by the last backward pass; only leaves keep theirs.
    const Tensor<T>& grad() const { return node_->grad; }
    bool has_grad() const { return node_->has_grad; }

    const std::shared_ptr<detail::Node<T>>& node() const { return node_; }

private:
    friend class GradTape<T>;
    template <class U, class F>
    friend Var<U> make_op_result(Tensor<U>, std::initializer_list<const Var<U>*>, const char*, F&&);

    Var(std::shared_ptr<detail::Node<T>> node, GradTape<T>* tape)
        : node_(std::move(node)), tape_(tape) {}

    std::shared_ptr<detail::Node<T>> node_;
    GradTape<T>* tape_ = nullptr;
};

/// Ordered record of executed ops; replaying it backwards fills Parameter::grad.
/// A tape is single-owner and must not be shared across threads.
template <class T>
class GradTape {
public:
    GradTape() = default;
    GradTape(const GradTape&) = delete;
    GradTape& operator=(const GradTape&) = delete;

    /// Leaf bound to a parameter; backward() adds into param.grad.
    Var<T> param(Parameter<T>& p) {
        auto node = std::make_shared<detail::Node<T>>();
        node->value = p.value;
        node->requires_grad = true;
        node->param = &p;
        nodes_.push_back(node);
        return Var<T>(std::move(node), this);
    }

    /// Differentiable leaf that is not a parameter (used for input gradients).
    Var<T> leaf(Tensor<T> value) {
        auto node = std::make_shared<detail::Node<T>>();
        node->value = std::move(value);
        node->requires_grad = true;
        nodes_.push_back(node);
        return Var<T>(std::move(node), this);
    }

    void record(std::shared_ptr<detail::Node<T>> node) { nodes_.push_back(std::move(node)); }

    std::size_t size() const noexcept { return nodes_.size(); }

    /// Reverse accumulation from a scalar loss. Parameter gradients are added to
    /// whatever the parameters already hold.
    void backward(const Var<T>& loss) {
        if (loss.value().numel() != 1) {
            throw ShapeError("backward requires a scalar loss, got shape " + shape_str(loss.shape()));
        }
        if (!loss.requires_grad()) return;
        if (loss.tape() != this) throw Error("loss was not recorded on this tape");
        loss.node()->accumulate(Tensor<T>(loss.shape(), T{1}));
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
            auto& node = **it;
            if (!node.has_grad) continue;
            if (node.backward) {
                node.backward(node);
                node.grad = Tensor<T>();
                node.has_grad = false;
            }
            if (node.param != nullptr) {
                T* dst = node.param->grad.data();
                const T* src = node.grad.data();
                for (std::size_t i = 0; i < node.grad.numel(); ++i) dst[i] += src[i];
            }
        }
    }

    void clear() { nodes_.clear(); }

private:
    std::vector<std::shared_ptr<detail::Node<T>>> nodes_;
};

/// Wraps an op output; records it on the tape when any input needs gradients.
/// `bw` receives the output node (value and grad) and pushes gradients into its inputs.
template <class T, class F>
Var<T> make_op_result(Tensor<T> value, std::initializer_list<const Var<T>*> inputs, const char* op,
                      F&& bw) {
    if (finite_checks_enabled()) require_finite(value, op);
    GradTape<T>* tape = nullptr;
    bool needs = false;
    for (const Var<T>* in : inputs) {
        if (in->requires_grad()) {
            needs = true;
            tape = in->tape();
        }
    }
    auto node = std::make_shared<detail::Node<T>>();
    node->value = std::move(value);
    if (!needs) return Var<T>(std::move(node), nullptr);
    node->requires_grad = true;
    node->backward = std::forward<F>(bw);
    tape->record(node);
    return Var<T>(std::move(node), tape);
}

} // namespace panflow
