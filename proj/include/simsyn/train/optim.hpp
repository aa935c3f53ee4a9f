#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "simsyn/core/autodiff.hpp"

namespace simsyn {

// Named parameter group; ordering is the registration order and must be
// deterministic for checkpoint round trips.
template <typename S>
struct NamedParams {
    std::vector<std::string> names;
    std::vector<Var<S>> vars;

    void add(const std::string& name, Var<S> v) {
        names.push_back(name);
        vars.push_back(std::move(v));
    }
    size_t size() const { return vars.size(); }
};

struct ClipReport {
    double norm = 0.0;   // pre-clip global gradient norm
    double scale = 1.0;  // applied scaling factor
};

// Global-norm gradient clipping; max_norm <= 0 leaves gradients untouched but
// still reports the norm (used for logging and finite checks).
template <typename S>
ClipReport clip_gradients(NamedParams<S>& params, double max_norm) {
    double sq = 0.0;
    for (auto& v : params.vars) {
        if (!v.has_grad()) continue;
        sq += v.grad().array().template cast<double>().square().sum();
    }
    ClipReport rep;
    rep.norm = std::sqrt(sq);
    if (max_norm > 0.0 && rep.norm > max_norm) {
        rep.scale = max_norm / (rep.norm + 1e-12);
        for (auto& v : params.vars) {
            if (!v.has_grad()) continue;
            v.grad().array() *= static_cast<S>(rep.scale);
        }
    }
    return rep;
}

// Adam with bias correction. The paper's setting beta1 = 0 reduces the first
// moment to the raw gradient.
template <typename S>
class Adam {
public:
    Adam() = default;
    Adam(NamedParams<S> params, double lr, double beta1, double beta2, double eps = 1e-8)
        : params_(std::move(params)), lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {
        for (auto& v : params_.vars) {
            m_.push_back(Tensor<S>::zeros(v.shape()));
            v_.push_back(Tensor<S>::zeros(v.shape()));
        }
    }

    void step(double grad_scale = 1.0) {
        ++t_;
        const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
        for (size_t i = 0; i < params_.size(); ++i) {
            Var<S>& p = params_.vars[i];
            if (!p.has_grad()) continue;
            auto g = (p.grad().array() * static_cast<S>(grad_scale)).eval();
            m_[i].array() = static_cast<S>(b1_) * m_[i].array() + static_cast<S>(1.0 - b1_) * g;
            v_[i].array() = static_cast<S>(b2_) * v_[i].array() + static_cast<S>(1.0 - b2_) * g.square();
            auto mhat = m_[i].array() / static_cast<S>(c1);
            auto vhat = v_[i].array() / static_cast<S>(c2);
            p.val_mut().array() -= static_cast<S>(lr_) * mhat / (vhat.sqrt() + static_cast<S>(eps_));
        }
    }

    void zero_grad() {
        for (auto& v : params_.vars) v.zero_grad();
    }

    NamedParams<S>& params() { return params_; }
    std::int64_t step_count() const { return t_; }
    void set_step_count(std::int64_t t) { t_ = t; }
    Tensor<S>& moment1(size_t i) { return m_[i]; }
    Tensor<S>& moment2(size_t i) { return v_[i]; }

private:
    NamedParams<S> params_;
    double lr_ = 1e-3, b1_ = 0.0, b2_ = 0.99, eps_ = 1e-8;
    std::int64_t t_ = 0;
    std::vector<Tensor<S>> m_, v_;
};

// shadow <- alpha * shadow + (1 - alpha) * current, applied after each
// generator step. No warmup or bias correction.
template <typename S>
class EmaState {
public:
    EmaState() = default;
    EmaState(NamedParams<S> params, double decay) : params_(std::move(params)), decay_(decay) {
        if (decay_ <= 0.0 || decay_ >= 1.0)
            throw std::invalid_argument("ema: decay must be in (0,1)");
        for (auto& v : params_.vars) shadow_.push_back(v.val());
    }

    void update() {
        for (size_t i = 0; i < params_.size(); ++i)
            shadow_[i].array() = static_cast<S>(decay_) * shadow_[i].array() +
                                 static_cast<S>(1.0 - decay_) * params_.vars[i].val().array();
    }

    const Tensor<S>& shadow(size_t i) const { return shadow_[i]; }
    Tensor<S>& shadow_mut(size_t i) { return shadow_[i]; }
    const NamedParams<S>& params() const { return params_; }
    double decay() const { return decay_; }

    // Writes the shadow weights into a parameter group with matching names.
    void copy_to(NamedParams<S>& target) const {
        if (target.size() != params_.size())
            throw std::invalid_argument("ema: target parameter set does not match");
        for (size_t i = 0; i < target.size(); ++i) {
            if (target.names[i] != params_.names[i])
                throw std::invalid_argument("ema: parameter name mismatch at '" + target.names[i] + "'");
            target.vars[i].val_mut() = shadow_[i];
        }
    }

private:
    NamedParams<S> params_;
    double decay_ = 0.9999;
    std::vector<Tensor<S>> shadow_;
};

// Elementwise EMA update helper, exposed for direct verification.
template <typename S>
Tensor<S> update_ema(const Tensor<S>& shadow, const Tensor<S>& current, double alpha) {
    if (!shadow.same_shape(current)) throw std::invalid_argument("update_ema: shape mismatch");
    Tensor<S> out(shadow.shape());
    out.array() = static_cast<S>(alpha) * shadow.array() +
                  static_cast<S>(1.0 - alpha) * current.array();
    return out;
}

}  // namespace simsyn
