#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "rfcnet/tensor.hpp"

namespace rfcnet {

template <typename T>
struct Node {
    Tensor<T> value;
    Tensor<T> grad;  // allocated lazily on first accumulation
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    // Propagates this node's grad into its parents' grads.
    std::function<void(Node&)> backward;

    Tensor<T>& grad_buffer() {
        if (grad.empty()) grad = Tensor<T>(value.shape());
        return grad;
    }
};

/// Handle to a node of the reverse-mode computation graph.
///
/// Leaves created with `requires_grad = true` are parameters; everything else is
/// produced by the ops in ops.hpp, which record a backward closure only when at
/// least one input requires a gradient and recording is enabled.
template <typename T>
class Var {
public:
    Var() = default;
    explicit Var(Tensor<T> value, bool requires_grad = false)
        : node_(std::make_shared<Node<T>>()) {
        node_->value = std::move(value);
        node_->requires_grad = requires_grad;
    }

    bool defined() const { return static_cast<bool>(node_); }
    const Tensor<T>& value() const { return node_->value; }
    Tensor<T>& mutable_value() { return node_->value; }
    const Shape& shape() const { return node_->value.shape(); }
    bool requires_grad() const { return node_ && node_->requires_grad; }

    /// Gradient accumulated by the last backward pass; empty when none reached this node.
    const Tensor<T>& grad() const { return node_->grad; }
    Tensor<T>& mutable_grad() { return node_->grad_buffer(); }
    void zero_grad() { node_->grad = Tensor<T>(); }

    /// Seeds d(this)/d(this) = 1 (this must be a single-element tensor) and
    /// back-propagates through the recorded graph.
    void backward();

    const std::shared_ptr<Node<T>>& node() const { return node_; }
    static Var from_node(std::shared_ptr<Node<T>> n) {
        Var v;
        v.node_ = std::move(n);
        return v;
    }

private:
    std::shared_ptr<Node<T>> node_;
};

/// Thread-local switch for graph recording; evaluation runs inside a NoGradGuard.
class GradMode {
public:
    static bool enabled();
    static void set_enabled(bool on);
};

class NoGradGuard {
public:
    NoGradGuard() : prev_(GradMode::enabled()) { GradMode::set_enabled(false); }
    ~NoGradGuard() { GradMode::set_enabled(prev_); }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

/// Creates the result node of an op. The closure is attached only when some
/// parent requires a gradient and recording is on.
template <typename T>
Var<T> make_result(Tensor<T> value, std::vector<Var<T>> inputs,
                   std::function<void(Node<T>&)> backward) {
    Var<T> out(std::move(value));
    if (!GradMode::enabled()) return out;
    bool any = false;
    for (const auto& in : inputs) any = any || in.requires_grad();
    if (!any) return out;
    auto& node = *out.node();
    node.requires_grad = true;
    node.parents.reserve(inputs.size());
    for (auto& in : inputs) node.parents.push_back(in.node());
    node.backward = std::move(backward);
    return out;
}

}  // namespace rfcnet
