#pragma once

#include <functional>
#include <memory>
#include <unordered_set>
#include <vector>

#include "simsyn/core/tensor.hpp"

namespace simsyn {

// Reverse-mode autodiff over Tensor<S>. Eager graph: every op allocates a
// node holding the value and a closure that pushes the output gradient into
// its parents. Parameters are long-lived nodes; everything else dies with the
// step's locals.

struct GradMode {
    static bool& enabled() {
        thread_local bool on = true;
        return on;
    }
};

struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(GradMode::enabled()) { GradMode::enabled() = false; }
    ~NoGradGuard() { GradMode::enabled() = prev; }
};

template <typename S>
struct Node {
    Tensor<S> value;
    Tensor<S> grad;  // allocated on demand, same shape as value
    bool requires_grad = false;
    bool grad_alloc = false;
    std::vector<std::shared_ptr<Node<S>>> parents;
    std::function<void(Node<S>&)> backward_fn;

    Tensor<S>& grad_ref() {
        if (!grad_alloc) {
            grad = Tensor<S>::zeros(value.shape());
            grad_alloc = true;
        }
        return grad;
    }
    void drop_grad() {
        grad = Tensor<S>();
        grad_alloc = false;
    }
};

template <typename S>
class Var {
public:
    Var() = default;
    explicit Var(Tensor<S> v, bool requires_grad = false) : n_(std::make_shared<Node<S>>()) {
        n_->value = std::move(v);
        n_->requires_grad = requires_grad && GradMode::enabled();
    }

    static Var constant(Tensor<S> v) { return Var(std::move(v), false); }

    bool defined() const { return static_cast<bool>(n_); }
    const Tensor<S>& val() const { return n_->value; }
    Tensor<S>& val_mut() { return n_->value; }
    const Shape& shape() const { return n_->value.shape(); }
    Index numel() const { return n_->value.numel(); }
    bool requires_grad() const { return n_ && n_->requires_grad; }
    Tensor<S>& grad() { return n_->grad_ref(); }
    bool has_grad() const { return n_ && n_->grad_alloc; }
    void zero_grad() {
        if (n_) n_->drop_grad();
    }

    Var detach() const { return constant(n_->value); }

    std::shared_ptr<Node<S>>& node() { return n_; }
    const std::shared_ptr<Node<S>>& node() const { return n_; }

private:
    std::shared_ptr<Node<S>> n_;
};

// Builds an op node. `parents` become graph edges; `fn` runs at backward time
// with the node (grad filled) and must accumulate into parent grads.
template <typename S>
Var<S> make_node(Tensor<S> value, std::vector<Var<S>> parents, std::function<void(Node<S>&)> fn) {
    Var<S> out(std::move(value), false);
    if (!GradMode::enabled()) return out;
    bool req = false;
    for (const auto& p : parents) req = req || p.requires_grad();
    if (!req) return out;
    out.node()->requires_grad = true;
    out.node()->parents.reserve(parents.size());
    for (auto& p : parents) out.node()->parents.push_back(p.node());
    out.node()->backward_fn = std::move(fn);
    return out;
}

// Backpropagate from a scalar root. Frees intermediate grads as it goes;
// leaf (parameter) grads accumulate and persist until zero_grad.
template <typename S>
void backward(Var<S> root) {
    if (root.numel() != 1) throw std::invalid_argument("backward: root must be scalar");
    if (!root.requires_grad()) return;

    // Post-order DFS over parents; reverse gives a valid backward order.
    std::vector<Node<S>*> order;
    std::unordered_set<Node<S>*> seen;
    std::vector<std::pair<Node<S>*, size_t>> stack;
    stack.push_back({root.node().get(), 0});
    seen.insert(root.node().get());
    while (!stack.empty()) {
        auto& [n, i] = stack.back();
        if (i < n->parents.size()) {
            Node<S>* p = n->parents[i++].get();
            if (p->requires_grad && !seen.count(p)) {
                seen.insert(p);
                stack.push_back({p, 0});
            }
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }

    root.node()->grad_ref().array().setConstant(S(1));
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<S>* n = *it;
        if (n->backward_fn && n->grad_alloc) n->backward_fn(*n);
        if (n->backward_fn) {
            n->drop_grad();        // intermediate; free eagerly
            n->backward_fn = nullptr;
        }
    }
}

// Gradient accumulation helper used by op closures.
template <typename S>
inline void accum(Node<S>& parent, const typename Tensor<S>::ArrayX& g) {
    parent.grad_ref().array() += g;
}

}  // namespace simsyn
