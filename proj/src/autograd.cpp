#include "rfcnet/autograd.hpp"

#include <unordered_set>

namespace rfcnet {

namespace {
thread_local bool grad_mode_enabled = true;
}

bool GradMode::enabled() { return grad_mode_enabled; }
void GradMode::set_enabled(bool on) { grad_mode_enabled = on; }

template <typename T>
void Var<T>::backward() {
    if (!node_) throw std::logic_error("backward on undefined Var");
    if (node_->value.size() != 1) {
        throw ShapeMismatch("backward requires a single-element output, got " +
                            node_->value.shape().str());
    }
    if (!node_->requires_grad) return;

    // Iterative post-order DFS gives a topological order (parents before children).
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> visited;
    std::vector<std::pair<Node<T>*, std::size_t>> stack;
    stack.emplace_back(node_.get(), 0);
    visited.insert(node_.get());
    while (!stack.empty()) {
        auto& [n, next] = stack.back();
        if (next < n->parents.size()) {
            Node<T>* p = n->parents[next++].get();
            if (p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }

    node_->grad_buffer()[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<T>* n = *it;
        if (n->backward && !n->grad.empty()) n->backward(*n);
    }
}

template class Var<float>;
template class Var<double>;

}  // namespace rfcnet
