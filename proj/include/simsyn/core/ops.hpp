#pragma once

#include <unsupported/Eigen/SpecialFunctions>

#include <cmath>
#include <vector>

#include "simsyn/core/autodiff.hpp"

namespace simsyn {

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

template <typename S>
Var<S> add(Var<S> a, Var<S> b) {
    if (!a.val().same_shape(b.val()))
        throw std::invalid_argument("add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor<S> y(a.shape());
    y.array() = a.val().array() + b.val().array();
    auto an = a.node(), bn = b.node();
    return make_node<S>(std::move(y), {a, b}, [an, bn](Node<S>& o) {
        if (an->requires_grad) accum(*an, o.grad.array());
        if (bn->requires_grad) accum(*bn, o.grad.array());
    });
}

template <typename S>
Var<S> sub(Var<S> a, Var<S> b) {
    if (!a.val().same_shape(b.val())) throw std::invalid_argument("sub: shape mismatch");
    Tensor<S> y(a.shape());
    y.array() = a.val().array() - b.val().array();
    auto an = a.node(), bn = b.node();
    return make_node<S>(std::move(y), {a, b}, [an, bn](Node<S>& o) {
        if (an->requires_grad) accum(*an, o.grad.array());
        if (bn->requires_grad) bn->grad_ref().array() -= o.grad.array();
    });
}

template <typename S>
Var<S> mul(Var<S> a, Var<S> b) {
    if (!a.val().same_shape(b.val())) throw std::invalid_argument("mul: shape mismatch");
    Tensor<S> y(a.shape());
    y.array() = a.val().array() * b.val().array();
    auto an = a.node(), bn = b.node();
    return make_node<S>(std::move(y), {a, b}, [an, bn](Node<S>& o) {
        if (an->requires_grad) accum(*an, (o.grad.array() * bn->value.array()).eval());
        if (bn->requires_grad) accum(*bn, (o.grad.array() * an->value.array()).eval());
    });
}

template <typename S>
Var<S> neg(Var<S> a) {
    Tensor<S> y(a.shape());
    y.array() = -a.val().array();
    auto an = a.node();
    return make_node<S>(std::move(y), {a}, [an](Node<S>& o) {
        if (an->requires_grad) an->grad_ref().array() -= o.grad.array();
    });
}

template <typename S>
Var<S> scale(Var<S> a, S c) {
    Tensor<S> y(a.shape());
    y.array() = a.val().array() * c;
    auto an = a.node();
    return make_node<S>(std::move(y), {a}, [an, c](Node<S>& o) {
        if (an->requires_grad) accum(*an, (o.grad.array() * c).eval());
    });
}

template <typename S>
Var<S> add_scalar(Var<S> a, S c) {
    Tensor<S> y(a.shape());
    y.array() = a.val().array() + c;
    auto an = a.node();
    return make_node<S>(std::move(y), {a}, [an](Node<S>& o) {
        if (an->requires_grad) accum(*an, o.grad.array());
    });
}

// 1 - x, handy for focal terms.
template <typename S>
Var<S> one_minus(Var<S> a) {
    return add_scalar(neg(a), S(1));
}

template <typename S>
Var<S> log_v(Var<S> a) {
    Tensor<S> y(a.shape());
    y.array() = a.val().array().log();
    auto an = a.node();
    return make_node<S>(std::move(y), {a}, [an](Node<S>& o) {
        if (an->requires_grad) accum(*an, (o.grad.array() / an->value.array()).eval());
    });
}

template <typename S>
Var<S> exp_v(Var<S> a) {
    Tensor<S> y(a.shape());
    y.array() = a.val().array().exp();
    auto an = a.node();
    Tensor<S> ycopy = y;
    return make_node<S>(std::move(y), {a}, [an, ycopy](Node<S>& o) {
        if (an->requires_grad) accum(*an, (o.grad.array() * ycopy.array()).eval());
    });
}

// x^p for constant p; x must be nonnegative where p < 1.
template <typename S>
Var<S> powc(Var<S> a, S p) {
    Tensor<S> y(a.shape());
    if (p == S(0)) {
        y.array().setConstant(S(1));
        return make_node<S>(std::move(y), {a}, [](Node<S>&) {});
    }
    if (p == S(1)) return a;
    y.array() = a.val().array().pow(p);
    auto an = a.node();
    return make_node<S>(std::move(y), {a}, [an, p](Node<S>& o) {
        if (an->requires_grad) accum(*an, (o.grad.array() * p * an->value.array().pow(p - S(1))).eval());
    });
}

template <typename S>
Var<S> clamp_min(Var<S> a, S m) {
    Tensor<S> y(a.shape());
    y.array() = a.val().array().max(m);
    auto an = a.node();
    return make_node<S>(std::move(y), {a}, [an, m](Node<S>& o) {
        if (an->requires_grad)
            accum(*an, (o.grad.array() * (an->value.array() > m).template cast<S>()).eval());
    });
}

template <typename S>
Var<S> clamp_max(Var<S> a, S m) {
    Tensor<S> y(a.shape());
    y.array() = a.val().array().min(m);
    auto an = a.node();
    return make_node<S>(std::move(y), {a}, [an, m](Node<S>& o) {
        if (an->requires_grad)
            accum(*an, (o.grad.array() * (an->value.array() < m).template cast<S>()).eval());
    });
}

template <typename S>
Var<S> abs_v(Var<S> a) {
    Tensor<S> y(a.shape());
    y.array() = a.val().array().abs();
    auto an = a.node();
    return make_node<S>(std::move(y), {a}, [an](Node<S>& o) {
        if (an->requires_grad) accum(*an, (o.grad.array() * an->value.array().sign()).eval());
    });
}

template <typename S>
Var<S> sigmoid(Var<S> a) {
    Tensor<S> y(a.shape());
    y.array() = S(1) / (S(1) + (-a.val().array()).exp());
    auto an = a.node();
    Tensor<S> ycopy = y;
    return make_node<S>(std::move(y), {a}, [an, ycopy](Node<S>& o) {
        if (an->requires_grad)
            accum(*an, (o.grad.array() * ycopy.array() * (S(1) - ycopy.array())).eval());
    });
}

// Exact (erf) GELU.
template <typename S>
Var<S> gelu(Var<S> a) {
    const S inv_sqrt2 = S(0.7071067811865475244);
    Tensor<S> y(a.shape());
    auto x = a.val().array();
    y.array() = x * S(0.5) * (S(1) + (x * inv_sqrt2).erf());
    auto an = a.node();
    return make_node<S>(std::move(y), {a}, [an, inv_sqrt2](Node<S>& o) {
        if (!an->requires_grad) return;
        const S inv_sqrt2pi = S(0.3989422804014326779);
        auto x = an->value.array();
        auto phi = S(0.5) * (S(1) + (x * inv_sqrt2).erf());
        auto pdf = inv_sqrt2pi * (-S(0.5) * x.square()).exp();
        accum(*an, (o.grad.array() * (phi + x * pdf)).eval());
    });
}

template <typename S>
Var<S> leaky_relu(Var<S> a, S slope) {
    Tensor<S> y(a.shape());
    auto x = a.val().array();
    y.array() = (x > S(0)).select(x, x * slope);
    auto an = a.node();
    return make_node<S>(std::move(y), {a}, [an, slope](Node<S>& o) {
        if (!an->requires_grad) return;
        auto x = an->value.array();
        accum(*an, (o.grad.array() * (x > S(0)).select(
                        Tensor<S>::full(an->value.shape(), S(1)).array(),
                        Tensor<S>::full(an->value.shape(), slope).array()))
                       .eval());
    });
}

// ---------------------------------------------------------------------------
// Reductions and scalar plumbing
// ---------------------------------------------------------------------------

template <typename S>
Var<S> sum(Var<S> a) {
    Tensor<S> y = Tensor<S>::scalar(static_cast<S>(a.val().array().template cast<double>().sum()));
    auto an = a.node();
    return make_node<S>(std::move(y), {a}, [an](Node<S>& o) {
        if (an->requires_grad) an->grad_ref().array() += o.grad[0];
    });
}

template <typename S>
Var<S> mean(Var<S> a) {
    return scale(sum(a), S(1) / static_cast<S>(a.numel()));
}

// y = a * s where s is a 1-element Var (both differentiable).
template <typename S>
Var<S> scale_by(Var<S> a, Var<S> s) {
    if (s.numel() != 1) throw std::invalid_argument("scale_by: scale must be scalar");
    S sv = s.val()[0];
    Tensor<S> y(a.shape());
    y.array() = a.val().array() * sv;
    auto an = a.node(), sn = s.node();
    return make_node<S>(std::move(y), {a, s}, [an, sn, sv](Node<S>& o) {
        if (an->requires_grad) accum(*an, (o.grad.array() * sv).eval());
        if (sn->requires_grad)
            sn->grad_ref()[0] += static_cast<S>((o.grad.array() * an->value.array()).template cast<double>().sum());
    });
}

template <typename S>
Var<S> reciprocal(Var<S> a) {
    Tensor<S> y(a.shape());
    y.array() = a.val().array().inverse();
    auto an = a.node();
    Tensor<S> ycopy = y;
    return make_node<S>(std::move(y), {a}, [an, ycopy](Node<S>& o) {
        if (an->requires_grad) accum(*an, (-o.grad.array() * ycopy.array().square()).eval());
    });
}

template <typename S>
Var<S> reshape(Var<S> a, Shape s) {
    Tensor<S> y = a.val().reshaped(s);
    auto an = a.node();
    return make_node<S>(std::move(y), {a}, [an](Node<S>& o) {
        if (an->requires_grad) accum(*an, o.grad.array());
    });
}

// ---------------------------------------------------------------------------
// Matrix ops (2-D tensors)
// ---------------------------------------------------------------------------

template <typename S>
Var<S> matmul(Var<S> a, Var<S> b, bool ta = false, bool tb = false) {
    if (a.val().ndim() != 2 || b.val().ndim() != 2) throw std::invalid_argument("matmul: need 2-D tensors");
    Index am = ta ? a.val().dim(1) : a.val().dim(0);
    Index ak = ta ? a.val().dim(0) : a.val().dim(1);
    Index bk = tb ? b.val().dim(1) : b.val().dim(0);
    Index bn = tb ? b.val().dim(0) : b.val().dim(1);
    if (ak != bk) throw std::invalid_argument("matmul: inner dims " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    Tensor<S> y({am, bn});
    auto A = a.val().mat(a.val().dim(0), a.val().dim(1));
    auto B = b.val().mat(b.val().dim(0), b.val().dim(1));
    auto Y = y.mat(am, bn);
    if (!ta && !tb) Y.noalias() = A * B;
    else if (ta && !tb) Y.noalias() = A.transpose() * B;
    else if (!ta && tb) Y.noalias() = A * B.transpose();
    else Y.noalias() = A.transpose() * B.transpose();
    auto an = a.node(), bn_ = b.node();
    return make_node<S>(std::move(y), {a, b}, [an, bn_, ta, tb, am, bn](Node<S>& o) {
        auto G = o.grad.mat(am, bn);
        auto A = an->value.mat(an->value.dim(0), an->value.dim(1));
        auto B = bn_->value.mat(bn_->value.dim(0), bn_->value.dim(1));
        if (an->requires_grad) {
            auto GA = an->grad_ref().mat(an->value.dim(0), an->value.dim(1));
            if (!ta && !tb) GA.noalias() += G * B.transpose();
            else if (ta && !tb) GA.noalias() += B * G.transpose();
            else if (!ta && tb) GA.noalias() += G * B;
            else GA.noalias() += B.transpose() * G.transpose();
        }
        if (bn_->requires_grad) {
            auto GB = bn_->grad_ref().mat(bn_->value.dim(0), bn_->value.dim(1));
            if (!ta && !tb) GB.noalias() += A.transpose() * G;
            else if (ta && !tb) GB.noalias() += A * G;
            else if (!ta && tb) GB.noalias() += G.transpose() * A;
            else GB.noalias() += G.transpose() * A.transpose();
        }
    });
}

// y = x W^T + b with x (R,in), W (out,in), b (out) or undefined.
template <typename S>
Var<S> linear(Var<S> x, Var<S> w, Var<S> b) {
    if (x.val().ndim() != 2 || w.val().ndim() != 2) throw std::invalid_argument("linear: need 2-D tensors");
    Index R = x.val().dim(0), in = x.val().dim(1), out = w.val().dim(0);
    if (w.val().dim(1) != in) throw std::invalid_argument("linear: weight/input dim mismatch");
    Tensor<S> y({R, out});
    y.mat(R, out).noalias() = x.val().mat(R, in) * w.val().mat(out, in).transpose();
    bool has_bias = b.defined();
    if (has_bias) {
        if (b.val().numel() != out) throw std::invalid_argument("linear: bias dim mismatch");
        y.mat(R, out).rowwise() += b.val().mat(1, out).row(0);
    }
    std::vector<Var<S>> parents = {x, w};
    if (has_bias) parents.push_back(b);
    auto xn = x.node(), wn = w.node();
    auto bn = has_bias ? b.node() : nullptr;
    return make_node<S>(std::move(y), std::move(parents), [xn, wn, bn, R, in, out](Node<S>& o) {
        auto G = o.grad.mat(R, out);
        if (xn->requires_grad) xn->grad_ref().mat(R, in).noalias() += G * wn->value.mat(out, in);
        if (wn->requires_grad) wn->grad_ref().mat(out, in).noalias() += G.transpose() * xn->value.mat(R, in);
        if (bn && bn->requires_grad) bn->grad_ref().mat(1, out).row(0) += G.colwise().sum();
    });
}

template <typename S>
Var<S> softmax_rows(Var<S> x) {
    if (x.val().ndim() != 2) throw std::invalid_argument("softmax_rows: need 2-D tensor");
    Index R = x.val().dim(0), C = x.val().dim(1);
    Tensor<S> y({R, C});
    auto X = x.val().mat(R, C);
    auto Y = y.mat(R, C);
    for (Index r = 0; r < R; ++r) {
        auto row = X.row(r).array();
        S m = row.maxCoeff();
        Y.row(r).array() = (row - m).exp();
        Y.row(r) /= Y.row(r).sum();
    }
    Tensor<S> ycopy = y;
    auto xn = x.node();
    return make_node<S>(std::move(y), {x}, [xn, ycopy, R, C](Node<S>& o) {
        if (!xn->requires_grad) return;
        auto G = o.grad.mat(R, C);
        auto Y = ycopy.mat(R, C);
        auto GX = xn->grad_ref().mat(R, C);
        for (Index r = 0; r < R; ++r) {
            S dot = Y.row(r).dot(G.row(r));
            GX.row(r).array() += Y.row(r).array() * (G.row(r).array() - dot);
        }
    });
}

// Row-wise log(sum(exp(x))), output (R,1). Stable via max shift.
template <typename S>
Var<S> logsumexp_rows(Var<S> x) {
    if (x.val().ndim() != 2) throw std::invalid_argument("logsumexp_rows: need 2-D tensor");
    Index R = x.val().dim(0), C = x.val().dim(1);
    Tensor<S> y({R, 1});
    auto X = x.val().mat(R, C);
    for (Index r = 0; r < R; ++r) {
        S m = X.row(r).maxCoeff();
        y[r] = m + std::log((X.row(r).array() - m).exp().sum());
    }
    Tensor<S> ycopy = y;
    auto xn = x.node();
    return make_node<S>(std::move(y), {x}, [xn, ycopy, R, C](Node<S>& o) {
        if (!xn->requires_grad) return;
        auto X = xn->value.mat(R, C);
        auto GX = xn->grad_ref().mat(R, C);
        for (Index r = 0; r < R; ++r)
            GX.row(r).array() += o.grad[r] * (X.row(r).array() - ycopy[r]).exp();
    });
}

// Row-wise L2 normalization: y_r = x_r / sqrt(|x_r|^2 + eps).
template <typename S>
Var<S> l2_normalize_rows(Var<S> x, S eps = S(1e-12)) {
    if (x.val().ndim() != 2) throw std::invalid_argument("l2_normalize_rows: need 2-D tensor");
    Index R = x.val().dim(0), C = x.val().dim(1);
    Tensor<S> y({R, C});
    Tensor<S> norms({R, 1});
    auto X = x.val().mat(R, C);
    auto Y = y.mat(R, C);
    for (Index r = 0; r < R; ++r) {
        S n = std::sqrt(X.row(r).squaredNorm() + eps);
        norms[r] = n;
        Y.row(r) = X.row(r) / n;
    }
    auto xn = x.node();
    return make_node<S>(std::move(y), {x}, [xn, norms, R, C](Node<S>& o) {
        if (!xn->requires_grad) return;
        auto X = xn->value.mat(R, C);
        auto G = o.grad.mat(R, C);
        auto GX = xn->grad_ref().mat(R, C);
        for (Index r = 0; r < R; ++r) {
            S n = norms[r];
            S d = X.row(r).dot(G.row(r));
            GX.row(r).array() += G.row(r).array() / n - X.row(r).array() * (d / (n * n * n));
        }
    });
}

// Select rows by index; backward scatter-adds.
template <typename S>
Var<S> gather_rows(Var<S> x, std::vector<Index> idx) {
    if (x.val().ndim() != 2) throw std::invalid_argument("gather_rows: need 2-D tensor");
    Index R = x.val().dim(0), C = x.val().dim(1);
    Index K = static_cast<Index>(idx.size());
    Tensor<S> y({K, C});
    auto X = x.val().mat(R, C);
    auto Y = y.mat(K, C);
    for (Index k = 0; k < K; ++k) {
        if (idx[static_cast<size_t>(k)] < 0 || idx[static_cast<size_t>(k)] >= R)
            throw std::invalid_argument("gather_rows: index out of range");
        Y.row(k) = X.row(idx[static_cast<size_t>(k)]);
    }
    auto xn = x.node();
    return make_node<S>(std::move(y), {x}, [xn, idx = std::move(idx), R, C, K](Node<S>& o) {
        if (!xn->requires_grad) return;
        auto G = o.grad.mat(K, C);
        auto GX = xn->grad_ref().mat(R, C);
        for (Index k = 0; k < K; ++k) GX.row(idx[static_cast<size_t>(k)]) += G.row(k);
    });
}

// Concatenate two 2-D tensors along rows.
template <typename S>
Var<S> concat_rows(Var<S> a, Var<S> b) {
    if (a.val().ndim() != 2 || b.val().ndim() != 2 || a.val().dim(1) != b.val().dim(1))
        throw std::invalid_argument("concat_rows: column mismatch");
    Index Ra = a.val().dim(0), Rb = b.val().dim(0), C = a.val().dim(1);
    Tensor<S> y({Ra + Rb, C});
    y.mat(Ra + Rb, C).topRows(Ra) = a.val().mat(Ra, C);
    y.mat(Ra + Rb, C).bottomRows(Rb) = b.val().mat(Rb, C);
    auto an = a.node(), bn = b.node();
    return make_node<S>(std::move(y), {a, b}, [an, bn, Ra, Rb, C](Node<S>& o) {
        auto G = o.grad.mat(Ra + Rb, C);
        if (an->requires_grad) an->grad_ref().mat(Ra, C) += G.topRows(Ra);
        if (bn->requires_grad) bn->grad_ref().mat(Rb, C) += G.bottomRows(Rb);
    });
}

// Row-wise sums: (R,C) -> (R,1).
template <typename S>
Var<S> row_sums(Var<S> x) {
    if (x.val().ndim() != 2) throw std::invalid_argument("row_sums: need 2-D tensor");
    Index R = x.val().dim(0), C = x.val().dim(1);
    Tensor<S> y({R, 1});
    auto X = x.val().mat(R, C);
    for (Index r = 0; r < R; ++r) y[r] = X.row(r).sum();
    auto xn = x.node();
    return make_node<S>(std::move(y), {x}, [xn, R, C](Node<S>& o) {
        if (!xn->requires_grad) return;
        auto GX = xn->grad_ref().mat(R, C);
        for (Index r = 0; r < R; ++r) GX.row(r).array() += o.grad[r];
    });
}

template <typename S>
Var<S> concat_cols(Var<S> a, Var<S> b) {
    if (a.val().ndim() != 2 || b.val().ndim() != 2 || a.val().dim(0) != b.val().dim(0))
        throw std::invalid_argument("concat_cols: row mismatch");
    Index R = a.val().dim(0), Ca = a.val().dim(1), Cb = b.val().dim(1);
    Tensor<S> y({R, Ca + Cb});
    y.mat(R, Ca + Cb).leftCols(Ca) = a.val().mat(R, Ca);
    y.mat(R, Ca + Cb).rightCols(Cb) = b.val().mat(R, Cb);
    auto an = a.node(), bn = b.node();
    return make_node<S>(std::move(y), {a, b}, [an, bn, R, Ca, Cb](Node<S>& o) {
        auto G = o.grad.mat(R, Ca + Cb);
        if (an->requires_grad) an->grad_ref().mat(R, Ca) += G.leftCols(Ca);
        if (bn->requires_grad) bn->grad_ref().mat(R, Cb) += G.rightCols(Cb);
    });
}

template <typename S>
Var<S> slice_rows(Var<S> x, Index r0, Index len) {
    if (x.val().ndim() != 2) throw std::invalid_argument("slice_rows: need 2-D tensor");
    Index R = x.val().dim(0), C = x.val().dim(1);
    if (r0 < 0 || r0 + len > R) throw std::invalid_argument("slice_rows: range out of bounds");
    Tensor<S> y({len, C});
    y.mat(len, C) = x.val().mat(R, C).middleRows(r0, len);
    auto xn = x.node();
    return make_node<S>(std::move(y), {x}, [xn, r0, len, R, C](Node<S>& o) {
        if (xn->requires_grad)
            xn->grad_ref().mat(R, C).middleRows(r0, len) += o.grad.mat(len, C);
    });
}

// Batched scaled-dot-product attention on stacked matrices.
// Q (B*m, d), K (B*n, d), V (B*n, d); per batch item: softmax(Q K^T / sqrt(d)) V.
template <typename S>
Var<S> attention_batched(Var<S> q, Var<S> k, Var<S> v, Index B) {
    Index d = q.val().dim(1);
    if (k.val().dim(1) != d || v.val().dim(1) != d)
        throw std::invalid_argument("attention: embedding dims must match");
    if (q.val().dim(0) % B || k.val().dim(0) % B || v.val().dim(0) != k.val().dim(0))
        throw std::invalid_argument("attention: batch layout mismatch");
    Index m = q.val().dim(0) / B, n = k.val().dim(0) / B;
    if (n < 1) throw std::invalid_argument("attention: need at least one key");
    S sc = S(1) / static_cast<S>(std::sqrt(static_cast<double>(d)));
    Tensor<S> y({B * m, d});
    Tensor<S> probs({B * m, n});
    for (Index b = 0; b < B; ++b) {
        auto Q = q.val().mat_at(b * m * d, m, d);
        auto Kb = k.val().mat_at(b * n * d, n, d);
        auto Vb = v.val().mat_at(b * n * d, n, d);
        auto P = probs.mat_at(b * m * n, m, n);
        P.noalias() = Q * Kb.transpose();
        P *= sc;
        for (Index r = 0; r < m; ++r) {
            auto row = P.row(r).array();
            S mx = row.maxCoeff();
            P.row(r).array() = (row - mx).exp();
            P.row(r) /= P.row(r).sum();
        }
        y.mat_at(b * m * d, m, d).noalias() = P * Vb;
    }
    auto qn = q.node(), kn = k.node(), vn = v.node();
    return make_node<S>(std::move(y), {q, k, v}, [qn, kn, vn, probs, B, m, n, d, sc](Node<S>& o) {
        for (Index b = 0; b < B; ++b) {
            auto G = o.grad.mat_at(b * m * d, m, d);
            auto P = probs.mat_at(b * m * n, m, n);
            auto Q = qn->value.mat_at(b * m * d, m, d);
            auto Kb = kn->value.mat_at(b * n * d, n, d);
            auto Vb = vn->value.mat_at(b * n * d, n, d);
            if (vn->requires_grad)
                vn->grad_ref().mat_at(b * n * d, n, d).noalias() += P.transpose() * G;
            if (qn->requires_grad || kn->requires_grad) {
                typename Tensor<S>::MatrixRM GP = G * Vb.transpose();  // (m,n)
                typename Tensor<S>::MatrixRM GS(m, n);
                for (Index r = 0; r < m; ++r) {
                    S dot = P.row(r).dot(GP.row(r));
                    GS.row(r).array() = P.row(r).array() * (GP.row(r).array() - dot);
                }
                GS *= sc;
                if (qn->requires_grad) qn->grad_ref().mat_at(b * m * d, m, d).noalias() += GS * Kb;
                if (kn->requires_grad) kn->grad_ref().mat_at(b * n * d, n, d).noalias() += GS.transpose() * Q;
            }
        }
    });
}

// ---------------------------------------------------------------------------
// NCHW image ops
// ---------------------------------------------------------------------------

namespace detail {
template <typename S>
std::vector<S>& scratch(int which) {
    thread_local std::vector<S> bufs[2];
    return bufs[which];
}

// col is (Cin*kh*kw) x (Ho*Wo), row-major.
template <typename S>
void im2col(const S* x, Index C, Index H, Index W, Index kh, Index kw, Index stride, Index pad,
            Index Ho, Index Wo, S* col) {
    for (Index c = 0; c < C; ++c) {
        for (Index ki = 0; ki < kh; ++ki) {
            for (Index kj = 0; kj < kw; ++kj) {
                S* dst = col + ((c * kh + ki) * kw + kj) * (Ho * Wo);
                for (Index oh = 0; oh < Ho; ++oh) {
                    Index ih = oh * stride + ki - pad;
                    if (ih < 0 || ih >= H) {
                        std::fill(dst, dst + Wo, S(0));
                        dst += Wo;
                        continue;
                    }
                    const S* src = x + (c * H + ih) * W;
                    Index iw = kj - pad;  // at ow=0
                    for (Index ow = 0; ow < Wo; ++ow, ++dst) {
                        Index cur = iw + ow * stride;
                        *dst = (cur >= 0 && cur < W) ? src[cur] : S(0);
                    }
                }
            }
        }
    }
}

template <typename S>
void col2im_add(const S* col, Index C, Index H, Index W, Index kh, Index kw, Index stride,
                Index pad, Index Ho, Index Wo, S* gx) {
    for (Index c = 0; c < C; ++c) {
        for (Index ki = 0; ki < kh; ++ki) {
            for (Index kj = 0; kj < kw; ++kj) {
                const S* src = col + ((c * kh + ki) * kw + kj) * (Ho * Wo);
                for (Index oh = 0; oh < Ho; ++oh) {
                    Index ih = oh * stride + ki - pad;
                    if (ih < 0 || ih >= H) {
                        src += Wo;
                        continue;
                    }
                    S* dst = gx + (c * H + ih) * W;
                    Index iw = kj - pad;
                    for (Index ow = 0; ow < Wo; ++ow, ++src) {
                        Index cur = iw + ow * stride;
                        if (cur >= 0 && cur < W) dst[cur] += *src;
                    }
                }
            }
        }
    }
}
}  // namespace detail

// 2-D convolution, x (B,Cin,H,W), w (Cout,Cin,kh,kw), optional bias (Cout).
template <typename S>
Var<S> conv2d(Var<S> x, Var<S> w, Var<S> b, Index stride = 1, Index pad = 0) {
    if (x.val().ndim() != 4 || w.val().ndim() != 4) throw std::invalid_argument("conv2d: need 4-D tensors");
    Index B = x.val().dim(0), Cin = x.val().dim(1), H = x.val().dim(2), W = x.val().dim(3);
    Index Cout = w.val().dim(0), kh = w.val().dim(2), kw = w.val().dim(3);
    if (w.val().dim(1) != Cin)
        throw std::invalid_argument("conv2d: weight expects " + std::to_string(w.val().dim(1)) +
                                    " input channels, got " + std::to_string(Cin));
    Index Ho = (H + 2 * pad - kh) / stride + 1;
    Index Wo = (W + 2 * pad - kw) / stride + 1;
    if (Ho < 1 || Wo < 1) throw std::invalid_argument("conv2d: output would be empty");
    const Index K = Cin * kh * kw, P = Ho * Wo;

    // Pointwise convs skip im2col entirely: per item, Y = W * X on the plane.
    if (kh == 1 && kw == 1 && stride == 1 && pad == 0) {
        Tensor<S> y({B, Cout, H, W});
        auto Wmat = w.val().mat(Cout, Cin);
        bool has_bias = b.defined();
        for (Index nb = 0; nb < B; ++nb) {
            auto X = x.val().mat_at(nb * Cin * P, Cin, P);
            auto Y = y.mat_at(nb * Cout * P, Cout, P);
            Y.noalias() = Wmat * X;
            if (has_bias)
                Y.colwise() += Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, 1>>(b.val().data(), Cout);
        }
        std::vector<Var<S>> parents = {x, w};
        if (has_bias) parents.push_back(b);
        auto xn = x.node(), wn = w.node();
        auto bn = has_bias ? b.node() : nullptr;
        return make_node<S>(std::move(y), std::move(parents), [xn, wn, bn, B, Cin, Cout, P](Node<S>& o) {
            for (Index nb = 0; nb < B; ++nb) {
                auto G = o.grad.mat_at(nb * Cout * P, Cout, P);
                if (wn->requires_grad)
                    wn->grad_ref().mat(Cout, Cin).noalias() +=
                        G * xn->value.mat_at(nb * Cin * P, Cin, P).transpose();
                if (bn && bn->requires_grad)
                    Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, 1>>(bn->grad_ref().data(), Cout) +=
                        G.rowwise().sum();
                if (xn->requires_grad)
                    xn->grad_ref().mat_at(nb * Cin * P, Cin, P).noalias() +=
                        wn->value.mat(Cout, Cin).transpose() * G;
            }
        });
    }

    Tensor<S> y({B, Cout, Ho, Wo});
    auto& colbuf = detail::scratch<S>(0);
    colbuf.resize(static_cast<size_t>(K * P));
    auto Wmat = w.val().mat(Cout, K);
    bool has_bias = b.defined();
    for (Index nb = 0; nb < B; ++nb) {
        detail::im2col(x.val().data() + nb * Cin * H * W, Cin, H, W, kh, kw, stride, pad, Ho, Wo,
                       colbuf.data());
        Eigen::Map<typename Tensor<S>::MatrixRM> col(colbuf.data(), K, P);
        auto Y = y.mat_at(nb * Cout * P, Cout, P);
        Y.noalias() = Wmat * col;
        if (has_bias)
            Y.colwise() += Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, 1>>(b.val().data(), Cout);
    }

    std::vector<Var<S>> parents = {x, w};
    if (has_bias) parents.push_back(b);
    auto xn = x.node(), wn = w.node();
    auto bn = has_bias ? b.node() : nullptr;
    return make_node<S>(std::move(y), std::move(parents),
                        [xn, wn, bn, B, Cin, H, W, Cout, kh, kw, stride, pad, Ho, Wo, K, P](Node<S>& o) {
        auto& colbuf = detail::scratch<S>(0);
        colbuf.resize(static_cast<size_t>(K * P));
        auto& gcolbuf = detail::scratch<S>(1);
        for (Index nb = 0; nb < B; ++nb) {
            auto G = o.grad.mat_at(nb * Cout * P, Cout, P);
            if (wn->requires_grad || bn) {
                detail::im2col(xn->value.data() + nb * Cin * H * W, Cin, H, W, kh, kw, stride, pad,
                               Ho, Wo, colbuf.data());
            }
            if (wn->requires_grad) {
                Eigen::Map<typename Tensor<S>::MatrixRM> col(colbuf.data(), K, P);
                wn->grad_ref().mat(Cout, K).noalias() += G * col.transpose();
            }
            if (bn && bn->requires_grad)
                Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, 1>>(bn->grad_ref().data(), Cout) +=
                    G.rowwise().sum();
            if (xn->requires_grad) {
                gcolbuf.resize(static_cast<size_t>(K * P));
                Eigen::Map<typename Tensor<S>::MatrixRM> gcol(gcolbuf.data(), K, P);
                gcol.noalias() = wn->value.mat(Cout, K).transpose() * G;
                detail::col2im_add(gcolbuf.data(), Cin, H, W, kh, kw, stride, pad, Ho, Wo,
                                   xn->grad_ref().data() + nb * Cin * H * W);
            }
        }
    });
}

// Training-mode batch normalization over (B,H,W) per channel, biased variance,
// double-precision statistics. Optional affine. Batch stats are reported
// through `mean_out`/`var_out` so the layer can maintain running statistics.
template <typename S>
Var<S> batchnorm_train(Var<S> x, Var<S> gamma, Var<S> beta, S eps,
                       std::vector<double>* mean_out = nullptr,
                       std::vector<double>* var_out = nullptr) {
    if (x.val().ndim() != 4) throw std::invalid_argument("batchnorm: need 4-D tensor");
    Index B = x.val().dim(0), C = x.val().dim(1), H = x.val().dim(2), W = x.val().dim(3);
    const Index plane = H * W;
    const double n = static_cast<double>(B * plane);

    std::vector<double> mu(static_cast<size_t>(C), 0.0), var(static_cast<size_t>(C), 0.0);
    for (Index c = 0; c < C; ++c) {
        double s = 0.0;
        for (Index nb = 0; nb < B; ++nb) {
            auto p = x.val().mat_at(nchw_offset(x.val().shape(), nb, c), 1, plane);
            s += p.template cast<double>().sum();
        }
        mu[static_cast<size_t>(c)] = s / n;
        double v = 0.0;
        for (Index nb = 0; nb < B; ++nb) {
            auto p = x.val().mat_at(nchw_offset(x.val().shape(), nb, c), 1, plane);
            v += (p.template cast<double>().array() - mu[static_cast<size_t>(c)]).square().sum();
        }
        var[static_cast<size_t>(c)] = v / n;
    }
    if (mean_out) *mean_out = mu;
    if (var_out) *var_out = var;

    Tensor<S> y(x.shape());
    std::vector<S> inv_std(static_cast<size_t>(C));
    bool affine = gamma.defined();
    for (Index c = 0; c < C; ++c) {
        double is = 1.0 / std::sqrt(var[static_cast<size_t>(c)] + static_cast<double>(eps));
        inv_std[static_cast<size_t>(c)] = static_cast<S>(is);
        S g = affine ? gamma.val()[c] : S(1);
        S bta = affine ? beta.val()[c] : S(0);
        for (Index nb = 0; nb < B; ++nb) {
            Index off = nchw_offset(x.val().shape(), nb, c);
            auto xin = x.val().mat_at(off, 1, plane).array();
            y.mat_at(off, 1, plane).array() =
                ((xin.template cast<double>() - mu[static_cast<size_t>(c)]) * is).template cast<S>() * g + bta;
        }
    }

    std::vector<Var<S>> parents = {x};
    if (affine) {
        parents.push_back(gamma);
        parents.push_back(beta);
    }
    auto xn = x.node();
    auto gn = affine ? gamma.node() : nullptr;
    auto btn = affine ? beta.node() : nullptr;
    return make_node<S>(std::move(y), std::move(parents),
                        [xn, gn, btn, mu, inv_std, B, C, plane, n](Node<S>& o) {
        // dx = gamma*is*(g - mean(g) - xhat*mean(g*xhat)) with batch means.
        const Shape& xs = xn->value.shape();
        for (Index c = 0; c < C; ++c) {
            double m = mu[static_cast<size_t>(c)];
            S is = inv_std[static_cast<size_t>(c)];
            S g = gn ? gn->value[c] : S(1);
            double sum_g = 0.0, sum_gx = 0.0;
            for (Index nb = 0; nb < B; ++nb) {
                Index off = nchw_offset(xs, nb, c);
                auto go = o.grad.mat_at(off, 1, plane).array().template cast<double>();
                auto xin = xn->value.mat_at(off, 1, plane).array().template cast<double>();
                sum_g += go.sum();
                sum_gx += (go * (xin - m) * static_cast<double>(is)).sum();
            }
            if (gn && gn->requires_grad) gn->grad_ref()[c] += static_cast<S>(sum_gx);
            if (btn && btn->requires_grad) btn->grad_ref()[c] += static_cast<S>(sum_g);
            if (xn->requires_grad) {
                double mean_g = sum_g / n, mean_gx = sum_gx / n;
                for (Index nb = 0; nb < B; ++nb) {
                    Index off = nchw_offset(xs, nb, c);
                    auto go = o.grad.mat_at(off, 1, plane).array().template cast<double>();
                    auto xin = xn->value.mat_at(off, 1, plane).array().template cast<double>();
                    auto xhat = (xin - m) * static_cast<double>(is);
                    xn->grad_ref().mat_at(off, 1, plane).array() +=
                        ((go - mean_g - xhat * mean_gx) * static_cast<double>(is) * static_cast<double>(g))
                            .template cast<S>();
                }
            }
        }
    });
}

// Evaluation-mode batch normalization with fixed statistics.
template <typename S>
Var<S> batchnorm_eval(Var<S> x, Var<S> gamma, Var<S> beta, const std::vector<double>& rmean,
                      const std::vector<double>& rvar, S eps) {
    if (x.val().ndim() != 4) throw std::invalid_argument("batchnorm: need 4-D tensor");
    Index B = x.val().dim(0), C = x.val().dim(1), H = x.val().dim(2), W = x.val().dim(3);
    const Index plane = H * W;
    bool affine = gamma.defined();
    Tensor<S> y(x.shape());
    std::vector<S> scale_c(static_cast<size_t>(C)), shift_c(static_cast<size_t>(C));
    for (Index c = 0; c < C; ++c) {
        double is = 1.0 / std::sqrt(rvar[static_cast<size_t>(c)] + static_cast<double>(eps));
        S g = affine ? gamma.val()[c] : S(1);
        scale_c[static_cast<size_t>(c)] = static_cast<S>(is) * g;
        shift_c[static_cast<size_t>(c)] =
            static_cast<S>(-rmean[static_cast<size_t>(c)] * is) * g + (affine ? beta.val()[c] : S(0));
    }
    for (Index nb = 0; nb < B; ++nb)
        for (Index c = 0; c < C; ++c) {
            Index off = nchw_offset(x.val().shape(), nb, c);
            y.mat_at(off, 1, plane).array() =
                x.val().mat_at(off, 1, plane).array() * scale_c[static_cast<size_t>(c)] +
                shift_c[static_cast<size_t>(c)];
        }
    std::vector<Var<S>> parents = {x};
    if (affine) {
        parents.push_back(gamma);
        parents.push_back(beta);
    }
    auto xn = x.node();
    auto gn = affine ? gamma.node() : nullptr;
    auto btn = affine ? beta.node() : nullptr;
    std::vector<S> rm_s(static_cast<size_t>(C)), is_s(static_cast<size_t>(C));
    for (Index c = 0; c < C; ++c) {
        rm_s[static_cast<size_t>(c)] = static_cast<S>(rmean[static_cast<size_t>(c)]);
        is_s[static_cast<size_t>(c)] =
            static_cast<S>(1.0 / std::sqrt(rvar[static_cast<size_t>(c)] + static_cast<double>(eps)));
    }
    return make_node<S>(std::move(y), std::move(parents),
                        [xn, gn, btn, rm_s, is_s, B, C, plane](Node<S>& o) {
        const Shape& xs = xn->value.shape();
        for (Index c = 0; c < C; ++c) {
            S g = gn ? gn->value[c] : S(1);
            double sum_g = 0.0, sum_gx = 0.0;
            for (Index nb = 0; nb < B; ++nb) {
                Index off = nchw_offset(xs, nb, c);
                auto go = o.grad.mat_at(off, 1, plane).array();
                if (xn->requires_grad)
                    xn->grad_ref().mat_at(off, 1, plane).array() +=
                        go * is_s[static_cast<size_t>(c)] * g;
                if (gn && gn->requires_grad) {
                    auto xin = xn->value.mat_at(off, 1, plane).array();
                    sum_gx += (go.template cast<double>() *
                               ((xin - rm_s[static_cast<size_t>(c)]) * is_s[static_cast<size_t>(c)])
                                   .template cast<double>())
                                  .sum();
                }
                if (btn && btn->requires_grad) sum_g += go.template cast<double>().sum();
            }
            if (gn && gn->requires_grad) gn->grad_ref()[c] += static_cast<S>(sum_gx);
            if (btn && btn->requires_grad) btn->grad_ref()[c] += static_cast<S>(sum_g);
        }
    });
}

// Per-pixel softmax across the channel axis of an NCHW tensor. Vectorized
// over the pixel axis (channel count is small, plane is long).
template <typename S>
Var<S> softmax_channels(Var<S> x) {
    if (x.val().ndim() != 4) throw std::invalid_argument("softmax_channels: need 4-D tensor");
    Index B = x.val().dim(0), C = x.val().dim(1), plane = x.val().dim(2) * x.val().dim(3);
    Tensor<S> y(x.shape());
    using RowA = Eigen::Array<S, 1, Eigen::Dynamic>;
    RowA mx(plane), sum(plane);
    for (Index nb = 0; nb < B; ++nb) {
        auto X = x.val().mat_at(nb * C * plane, C, plane);
        auto Y = y.mat_at(nb * C * plane, C, plane);
        mx = X.row(0).array();
        for (Index c = 1; c < C; ++c) mx = mx.max(X.row(c).array());
        sum.setZero();
        for (Index c = 0; c < C; ++c) {
            Y.row(c).array() = (X.row(c).array() - mx).exp();
            sum += Y.row(c).array();
        }
        for (Index c = 0; c < C; ++c) Y.row(c).array() /= sum;
    }
    Tensor<S> ycopy = y;
    auto xn = x.node();
    return make_node<S>(std::move(y), {x}, [xn, ycopy, B, C, plane](Node<S>& o) {
        if (!xn->requires_grad) return;
        RowA dot(plane);
        for (Index nb = 0; nb < B; ++nb) {
            auto G = o.grad.mat_at(nb * C * plane, C, plane);
            auto Y = ycopy.mat_at(nb * C * plane, C, plane);
            auto GX = xn->grad_ref().mat_at(nb * C * plane, C, plane);
            dot.setZero();
            for (Index c = 0; c < C; ++c) dot += Y.row(c).array() * G.row(c).array();
            for (Index c = 0; c < C; ++c)
                GX.row(c).array() += Y.row(c).array() * (G.row(c).array() - dot);
        }
    });
}

template <typename S>
Var<S> upsample_nearest2(Var<S> x) {
    if (x.val().ndim() != 4) throw std::invalid_argument("upsample: need 4-D tensor");
    Index B = x.val().dim(0), C = x.val().dim(1), H = x.val().dim(2), W = x.val().dim(3);
    Tensor<S> y({B, C, H * 2, W * 2});
    const S* src = x.val().data();
    S* dst = y.data();
    for (Index nc = 0; nc < B * C; ++nc) {
        const S* sp = src + nc * H * W;
        S* dp = dst + nc * 4 * H * W;
        for (Index h = 0; h < H; ++h) {
            S* row0 = dp + (2 * h) * 2 * W;
            S* row1 = row0 + 2 * W;
            for (Index w = 0; w < W; ++w) {
                S v = sp[h * W + w];
                row0[2 * w] = v;
                row0[2 * w + 1] = v;
                row1[2 * w] = v;
                row1[2 * w + 1] = v;
            }
        }
    }
    auto xn = x.node();
    return make_node<S>(std::move(y), {x}, [xn, B, C, H, W](Node<S>& o) {
        if (!xn->requires_grad) return;
        const S* gp = o.grad.data();
        S* gx = xn->grad_ref().data();
        for (Index nc = 0; nc < B * C; ++nc) {
            const S* g = gp + nc * 4 * H * W;
            S* out = gx + nc * H * W;
            for (Index h = 0; h < H; ++h) {
                const S* row0 = g + (2 * h) * 2 * W;
                const S* row1 = row0 + 2 * W;
                for (Index w = 0; w < W; ++w)
                    out[h * W + w] += row0[2 * w] + row0[2 * w + 1] + row1[2 * w] + row1[2 * w + 1];
            }
        }
    });
}

template <typename S>
Var<S> concat_channels(Var<S> a, Var<S> b) {
    if (a.val().ndim() != 4 || b.val().ndim() != 4) throw std::invalid_argument("concat: need 4-D tensors");
    Index B = a.val().dim(0), Ca = a.val().dim(1), Cb = b.val().dim(1);
    Index H = a.val().dim(2), W = a.val().dim(3);
    if (b.val().dim(0) != B || b.val().dim(2) != H || b.val().dim(3) != W)
        throw std::invalid_argument("concat: spatial/batch mismatch " + shape_str(a.shape()) + " vs " +
                                    shape_str(b.shape()));
    Index plane = H * W;
    Tensor<S> y({B, Ca + Cb, H, W});
    for (Index nb = 0; nb < B; ++nb) {
        y.mat_at(nb * (Ca + Cb) * plane, Ca, plane) = a.val().mat_at(nb * Ca * plane, Ca, plane);
        y.mat_at(nb * (Ca + Cb) * plane + Ca * plane, Cb, plane) =
            b.val().mat_at(nb * Cb * plane, Cb, plane);
    }
    auto an = a.node(), bn = b.node();
    return make_node<S>(std::move(y), {a, b}, [an, bn, B, Ca, Cb, plane](Node<S>& o) {
        for (Index nb = 0; nb < B; ++nb) {
            if (an->requires_grad)
                an->grad_ref().mat_at(nb * Ca * plane, Ca, plane) +=
                    o.grad.mat_at(nb * (Ca + Cb) * plane, Ca, plane);
            if (bn->requires_grad)
                bn->grad_ref().mat_at(nb * Cb * plane, Cb, plane) +=
                    o.grad.mat_at(nb * (Ca + Cb) * plane + Ca * plane, Cb, plane);
        }
    });
}

template <typename S>
Var<S> slice_channels(Var<S> x, Index c0, Index len) {
    if (x.val().ndim() != 4) throw std::invalid_argument("slice: need 4-D tensor");
    Index B = x.val().dim(0), C = x.val().dim(1), H = x.val().dim(2), W = x.val().dim(3);
    if (c0 < 0 || c0 + len > C) throw std::invalid_argument("slice: channel range out of bounds");
    Index plane = H * W;
    Tensor<S> y({B, len, H, W});
    for (Index nb = 0; nb < B; ++nb)
        y.mat_at(nb * len * plane, len, plane) = x.val().mat_at(nb * C * plane + c0 * plane, len, plane);
    auto xn = x.node();
    return make_node<S>(std::move(y), {x}, [xn, B, C, c0, len, plane](Node<S>& o) {
        if (!xn->requires_grad) return;
        for (Index nb = 0; nb < B; ++nb)
            xn->grad_ref().mat_at(nb * C * plane + c0 * plane, len, plane) +=
                o.grad.mat_at(nb * len * plane, len, plane);
    });
}

// (B,C,H,W) -> (B*H*W, C) row matrix; rows ordered batch-major then scanline.
template <typename S>
Var<S> nchw_to_rows(Var<S> x) {
    if (x.val().ndim() != 4) throw std::invalid_argument("nchw_to_rows: need 4-D tensor");
    Index B = x.val().dim(0), C = x.val().dim(1), plane = x.val().dim(2) * x.val().dim(3);
    Tensor<S> y({B * plane, C});
    for (Index nb = 0; nb < B; ++nb)
        y.mat_at(nb * plane * C, plane, C) = x.val().mat_at(nb * C * plane, C, plane).transpose();
    auto xn = x.node();
    return make_node<S>(std::move(y), {x}, [xn, B, C, plane](Node<S>& o) {
        if (!xn->requires_grad) return;
        for (Index nb = 0; nb < B; ++nb)
            xn->grad_ref().mat_at(nb * C * plane, C, plane) +=
                o.grad.mat_at(nb * plane * C, plane, C).transpose();
    });
}

template <typename S>
Var<S> rows_to_nchw(Var<S> x, Index B, Index C, Index H, Index W) {
    if (x.val().ndim() != 2 || x.val().dim(0) != B * H * W || x.val().dim(1) != C)
        throw std::invalid_argument("rows_to_nchw: shape mismatch");
    Index plane = H * W;
    Tensor<S> y({B, C, H, W});
    for (Index nb = 0; nb < B; ++nb)
        y.mat_at(nb * C * plane, C, plane) = x.val().mat_at(nb * plane * C, plane, C).transpose();
    auto xn = x.node();
    return make_node<S>(std::move(y), {x}, [xn, B, C, plane](Node<S>& o) {
        if (!xn->requires_grad) return;
        for (Index nb = 0; nb < B; ++nb)
            xn->grad_ref().mat_at(nb * plane * C, plane, C) +=
                o.grad.mat_at(nb * C * plane, C, plane).transpose();
    });
}

}  // namespace simsyn
