#pragma once

#include <memory>

#include "simsyn/core/ops.hpp"
#include "simsyn/nn/module.hpp"

namespace simsyn {

// Spectral normalization state shared by Linear/Conv2d. The weight is treated
// as a (rows, cols) matrix; one persistent left vector u is tracked and the
// normalized weight is expressed on the tape as w / (u^T w v) so gradients
// include the sigma term.
template <typename S>
class SpectralNorm {
public:
    void init(Module<S>& owner, const std::string& name, Index rows, Index cols) {
        rows_ = rows;
        cols_ = cols;
        Tensor<double> u({rows});
        // Fixed start; warmup iterations against the actual weight follow.
        for (Index i = 0; i < rows; ++i) u[i] = 1.0 + 0.01 * static_cast<double>(i % 7);
        u_ = &owner.add_buffer(name + "/sn_u", std::move(u));
    }

    void power_iterate(const Tensor<S>& w, int iters) {
        auto W = w.mat(rows_, cols_);
        Eigen::VectorXd u = u_->array().matrix();
        Eigen::VectorXd v(cols_);
        for (int it = 0; it < iters; ++it) {
            v = W.transpose().template cast<double>() * u;
            v /= (v.norm() + 1e-12);
            u = W.template cast<double>() * v;
            u /= (u.norm() + 1e-12);
        }
        u_->array() = u.array();
    }

    // Builds the normalized weight on the tape.
    Var<S> apply(Var<S> w, bool update) {
        if (update) power_iterate(w.val(), 2);
        Eigen::VectorXd u = u_->array().matrix();
        Eigen::VectorXd v = w.val().mat(rows_, cols_).transpose().template cast<double>() * u;
        v /= (v.norm() + 1e-12);
        Tensor<S> ut({1, rows_}), vt({cols_, 1});
        for (Index i = 0; i < rows_; ++i) ut[i] = static_cast<S>(u(i));
        for (Index i = 0; i < cols_; ++i) vt[i] = static_cast<S>(v(i));
        Var<S> wmat = reshape(w, {rows_, cols_});
        Var<S> sigma = matmul(matmul(Var<S>::constant(ut), wmat), Var<S>::constant(vt));  // (1,1)
        return scale_by(w, reciprocal(sigma));
    }

    // Converged estimate of the top singular value; used by tests and the
    // normalization-bound property check.
    static double estimate_sigma(const Tensor<S>& w, Index rows, Index cols, int iters = 100) {
        auto W = w.mat(rows, cols).template cast<double>().eval();
        Eigen::VectorXd u = Eigen::VectorXd::Ones(rows);
        for (int it = 0; it < iters; ++it) {
            Eigen::VectorXd v = W.transpose() * u;
            v /= (v.norm() + 1e-12);
            u = W * v;
            u /= (u.norm() + 1e-12);
        }
        Eigen::VectorXd v = W.transpose() * u;
        return v.norm();
    }

private:
    Index rows_ = 0, cols_ = 0;
    Tensor<double>* u_ = nullptr;
};

template <typename S>
class Linear : public Module<S> {
public:
    Linear() = default;
    Linear(Index in, Index out, Rng& rng, bool spectral = true, bool bias = true,
           bool orthogonal = false, bool trainable = true)
        : in_(in), out_(out), spectral_(spectral) {
        Tensor<S> w = orthogonal ? init_orthogonal<S>(out, in, rng)
                                 : init_normal<S>({out, in}, rng, 0.02);
        w_ = this->add_param("weight", std::move(w), trainable);
        if (bias) {
            b_ = this->add_param("bias", init_zeros<S>({out}), trainable);
            has_bias_ = true;
        }
        if (spectral_) {
            sn_.init(*this, "weight", out, in);
            sn_.power_iterate(w_.val(), 15);
        }
    }

    // x: (R, in) -> (R, out)
    Var<S> forward(Var<S> x) {
        Var<S> w = w_;
        if (spectral_) w = sn_.apply(w, this->training() && GradMode::enabled());
        return linear(x, w, has_bias_ ? b_ : Var<S>());
    }

    Var<S> weight() { return w_; }
    Index in_features() const { return in_; }
    Index out_features() const { return out_; }
    bool spectral() const { return spectral_; }
    double normalized_sigma() {
        Var<S> w = sn_.apply(w_, false);
        return SpectralNorm<S>::estimate_sigma(w.val(), out_, in_);
    }

private:
    Index in_ = 0, out_ = 0;
    bool spectral_ = false, has_bias_ = false;
    Var<S> w_, b_;
    SpectralNorm<S> sn_;
};

template <typename S>
class Conv2d : public Module<S> {
public:
    Conv2d() = default;
    Conv2d(Index in, Index out, Index k, Index stride, Index pad, Rng& rng, bool spectral = true,
           bool bias = true, bool trainable = true, bool he_init = false)
        : in_(in), out_(out), k_(k), stride_(stride), pad_(pad), spectral_(spectral) {
        w_ = this->add_param("weight",
                             he_init ? init_he<S>({out, in, k, k}, rng)
                                     : init_normal<S>({out, in, k, k}, rng, 0.02),
                             trainable);
        if (bias) {
            b_ = this->add_param("bias", init_zeros<S>({out}), trainable);
            has_bias_ = true;
        }
        if (spectral_) {
            sn_.init(*this, "weight", out, in * k * k);
            sn_.power_iterate(w_.val(), 15);
        }
    }

    Var<S> forward(Var<S> x) {
        Var<S> w = w_;
        if (spectral_) w = sn_.apply(w, this->training() && GradMode::enabled());
        return conv2d(x, w, has_bias_ ? b_ : Var<S>(), stride_, pad_);
    }

    Var<S> weight() { return w_; }
    Var<S> bias() { return b_; }
    Index out_channels() const { return out_; }
    bool spectral() const { return spectral_; }
    double normalized_sigma() {
        Var<S> w = sn_.apply(w_, false);
        return SpectralNorm<S>::estimate_sigma(w.val(), out_, in_ * k_ * k_);
    }

private:
    Index in_ = 0, out_ = 0, k_ = 1, stride_ = 1, pad_ = 0;
    bool spectral_ = false, has_bias_ = false;
    Var<S> w_, b_;
    SpectralNorm<S> sn_;
};

template <typename S>
class BatchNorm2d : public Module<S> {
public:
    BatchNorm2d() = default;
    BatchNorm2d(Index channels, bool affine, double momentum = 0.1, S eps = S(1e-5))
        : c_(channels), affine_(affine), momentum_(momentum), eps_(eps) {
        if (affine_) {
            gamma_ = this->add_param("gamma", init_ones<S>({channels}));
            beta_ = this->add_param("beta", init_zeros<S>({channels}));
        }
        rmean_ = &this->add_buffer("running_mean", Tensor<double>::zeros({channels}));
        rvar_ = &this->add_buffer("running_var", Tensor<double>::full({channels}, 1.0));
    }

    Var<S> forward(Var<S> x) {
        Var<S> g = affine_ ? gamma_ : Var<S>();
        Var<S> b = affine_ ? beta_ : Var<S>();
        if (this->training()) {
            std::vector<double> m, v;
            Var<S> y = batchnorm_train(x, g, b, eps_, &m, &v);
            if (GradMode::enabled()) {
                for (Index c = 0; c < c_; ++c) {
                    (*rmean_)[c] = (1.0 - momentum_) * (*rmean_)[c] + momentum_ * m[static_cast<size_t>(c)];
                    (*rvar_)[c] = (1.0 - momentum_) * (*rvar_)[c] + momentum_ * v[static_cast<size_t>(c)];
                }
            }
            return y;
        }
        std::vector<double> m(rmean_->data(), rmean_->data() + c_);
        std::vector<double> v(rvar_->data(), rvar_->data() + c_);
        return batchnorm_eval(x, g, b, m, v, eps_);
    }

private:
    Index c_ = 0;
    bool affine_ = true;
    double momentum_ = 0.1;
    S eps_ = S(1e-5);
    Var<S> gamma_, beta_;
    Tensor<double>* rmean_ = nullptr;
    Tensor<double>* rvar_ = nullptr;
};

// Three-layer MLP mapping z to the token matrix w.
template <typename S>
class NoiseMapper : public Module<S> {
public:
    NoiseMapper() = default;
    NoiseMapper(Index z_dim, Index hidden, Index tokens, Index token_dim, Rng& rng, bool spectral)
        : z_dim_(z_dim), tokens_(tokens), token_dim_(token_dim) {
        l1_ = std::make_unique<Linear<S>>(z_dim, hidden, rng, spectral);
        l2_ = std::make_unique<Linear<S>>(hidden, hidden, rng, spectral);
        l3_ = std::make_unique<Linear<S>>(hidden, tokens * token_dim, rng, spectral);
        this->add_child("fc1", l1_.get());
        this->add_child("fc2", l2_.get());
        this->add_child("fc3", l3_.get());
    }

    // z: (B, z_dim) -> (B*tokens, token_dim) rows grouped by batch item.
    Var<S> forward(Var<S> z) {
        if (z.val().ndim() != 2 || z.val().dim(1) != z_dim_)
            throw std::invalid_argument("noise mapper: expected (B," + std::to_string(z_dim_) +
                                        ") latent, got " + shape_str(z.shape()));
        for (Index i = 0; i < z.numel(); ++i)
            if (!std::isfinite(static_cast<double>(z.val()[i])))
                throw std::invalid_argument("noise mapper: latent contains non-finite values");
        Index B = z.val().dim(0);
        Var<S> h = gelu(l1_->forward(z));
        h = gelu(l2_->forward(h));
        h = l3_->forward(h);
        return reshape(h, {B * tokens_, token_dim_});
    }

    Index tokens() const { return tokens_; }
    Index token_dim() const { return token_dim_; }
    Index z_dim() const { return z_dim_; }

private:
    Index z_dim_ = 0, tokens_ = 0, token_dim_ = 0;
    std::unique_ptr<Linear<S>> l1_, l2_, l3_;
};

}  // namespace simsyn
