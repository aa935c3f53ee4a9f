#pragma once

#include <deque>
#include <functional>
#include <string>
#include <vector>

#include "simsyn/core/autodiff.hpp"
#include "simsyn/core/rng.hpp"

namespace simsyn {

// Base for parameterized components. Var is a shared handle, so both the
// registry and the owning layer keep copies of the same node; buffers live in
// a deque so references stay valid as more are added.
template <typename S>
class Module {
public:
    virtual ~Module() = default;

    Var<S> add_param(const std::string& name, Tensor<S> init, bool trainable = true) {
        Var<S> v(std::move(init), false);
        v.node()->requires_grad = trainable;  // independent of thread GradMode
        params_.emplace_back(name, v);
        return v;
    }

    Tensor<double>& add_buffer(const std::string& name, Tensor<double> init) {
        buffers_.emplace_back(name, std::move(init));
        return buffers_.back().second;
    }

    void add_child(const std::string& name, Module<S>* m) { children_.emplace_back(name, m); }

    void visit_params(const std::function<void(const std::string&, Var<S>&)>& fn,
                      const std::string& prefix = "") {
        for (auto& [n, v] : params_) fn(prefix + n, v);
        for (auto& [n, c] : children_) c->visit_params(fn, prefix + n + "/");
    }

    void visit_buffers(const std::function<void(const std::string&, Tensor<double>&)>& fn,
                       const std::string& prefix = "") {
        for (auto& [n, b] : buffers_) fn(prefix + n, b);
        for (auto& [n, c] : children_) c->visit_buffers(fn, prefix + n + "/");
    }

    std::vector<Var<S>> parameters() {
        std::vector<Var<S>> out;
        visit_params([&](const std::string&, Var<S>& v) { out.push_back(v); });
        return out;
    }

    std::vector<Var<S>> trainable_parameters() {
        std::vector<Var<S>> out;
        visit_params([&](const std::string&, Var<S>& v) {
            if (v.node()->requires_grad) out.push_back(v);
        });
        return out;
    }

    Index parameter_count() {
        Index n = 0;
        visit_params([&](const std::string&, Var<S>& v) { n += v.numel(); });
        return n;
    }

    void set_training(bool on) {
        training_ = on;
        for (auto& [n, c] : children_) c->set_training(on);
    }
    bool training() const { return training_; }

    void zero_grad() {
        visit_params([](const std::string&, Var<S>& v) { v.zero_grad(); });
    }

    // Temporarily exclude/include this tree's parameters from gradient
    // computation (used to skip discriminator weight grads on generator steps).
    void set_params_requires_grad(bool on) {
        visit_params([on](const std::string&, Var<S>& v) { v.node()->requires_grad = on; });
    }

private:
    bool training_ = true;
    std::vector<std::pair<std::string, Var<S>>> params_;
    std::deque<std::pair<std::string, Tensor<double>>> buffers_;
    std::vector<std::pair<std::string, Module<S>*>> children_;
};

// Weight initializers.
template <typename S>
Tensor<S> init_normal(Shape shape, Rng& rng, double stddev) {
    Tensor<S> t(std::move(shape));
    for (Index i = 0; i < t.numel(); ++i) t[i] = static_cast<S>(rng.normal() * stddev);
    return t;
}

template <typename S>
Tensor<S> init_zeros(Shape shape) {
    return Tensor<S>::zeros(std::move(shape));
}

// Variance-preserving init for frozen random feature extractors: without it,
// activations decay layer over layer and the conditioning statistics
// degenerate into the epsilon guard.
template <typename S>
Tensor<S> init_he(Shape shape, Rng& rng) {
    Index fan_in = 1;
    for (size_t i = 1; i < shape.size(); ++i) fan_in *= shape[i];
    double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
    return init_normal<S>(std::move(shape), rng, stddev);
}

template <typename S>
Tensor<S> init_ones(Shape shape) {
    return Tensor<S>::full(std::move(shape), S(1));
}

// Orthogonal rows (or columns when rows > cols) via Householder QR of a
// Gaussian matrix, sign-fixed so the result is unique given the rng stream.
template <typename S>
Tensor<S> init_orthogonal(Index rows, Index cols, Rng& rng) {
    Index r = std::max(rows, cols), c = std::min(rows, cols);
    Eigen::MatrixXd a(r, c);
    for (Index i = 0; i < r; ++i)
        for (Index j = 0; j < c; ++j) a(i, j) = rng.normal();
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(a);
    Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(r, c);
    Eigen::VectorXd d = qr.matrixQR().diagonal();
    for (Index j = 0; j < c; ++j)
        if (d(j) < 0) q.col(j) = -q.col(j);
    Tensor<S> t({rows, cols});
    auto m = t.mat(rows, cols);
    if (rows >= cols) {
        for (Index i = 0; i < rows; ++i)
            for (Index j = 0; j < cols; ++j) m(i, j) = static_cast<S>(q(i, j));
    } else {
        for (Index i = 0; i < rows; ++i)
            for (Index j = 0; j < cols; ++j) m(i, j) = static_cast<S>(q(j, i));
    }
    return t;
}

}  // namespace simsyn
