#pragma once

#include <memory>
#include <vector>

#include "simsyn/core/errors.hpp"
#include "simsyn/nn/calibrate.hpp"

namespace simsyn {

struct LossConfig {
    double gamma = 2.0;        // focal focusing parameter
    double epsilon = 0.1;      // one-sided label smoothing
    double tau = 0.3;          // contrastive temperature
    Index negatives = 128;     // N per anchor
    Index anchors_per_image = 16;
    double lambda_gan = 1.0;
    double lambda_c = 100.0;
    double lambda_d = 10.0;
    Index embed_dim = 256;     // d_v
    double tau_div = 0.0;      // diversity cutoff; estimated when <= 0
    Index tau_div_batches = 200;  // paper-scale 5000
    bool class_weighting = true;
    double p_min = 1e-12;

    void validate() const {
        if (gamma < 0) throw ConfigError("losses: gamma must be >= 0");
        if (tau <= 0) throw ConfigError("losses: tau must be > 0");
        if (epsilon < 0 || epsilon >= 0.5) throw ConfigError("losses: epsilon must be in [0, 0.5)");
        if (negatives < 1) throw ConfigError("losses: need at least one negative");
    }
};

// Per-batch class weights: alpha_c = (total pixels) / (pixels of class c);
// classes absent from the batch get 0 and contribute no loss.
template <typename S>
std::vector<double> compute_class_weights(const Tensor<S>& one_hot) {
    if (one_hot.ndim() != 4) throw std::invalid_argument("class weights: need (B,C,H,W) one-hot");
    Index B = one_hot.dim(0), C = one_hot.dim(1), plane = one_hot.dim(2) * one_hot.dim(3);
    double total = static_cast<double>(B * plane);
    if (total < 1) throw std::invalid_argument("class weights: empty batch");
    std::vector<double> alpha(static_cast<size_t>(C), 0.0);
    for (Index c = 0; c < C; ++c) {
        double count = 0;
        for (Index n = 0; n < B; ++n)
            count += one_hot.mat_at(nchw_offset(one_hot.shape(), n, c), 1, plane)
                         .template cast<double>()
                         .sum();
        alpha[static_cast<size_t>(c)] = count > 0 ? total / count : 0.0;
    }
    return alpha;
}

// Scalar focal term -alpha (1-p)^gamma log p with the probability floor.
inline double focal_term(double p, double alpha, double gamma, double p_min = 1e-12) {
    if (p <= 0) p = p_min;
    return -alpha * std::pow(1.0 - p, gamma) * std::log(p);
}

namespace detail {

// (B,C+1,H,W) map of -(1-p)^gamma log p per class, p floored at p_min.
template <typename S>
Var<S> focal_map(Var<S> logits, S gamma, S p_min, Index* clamped = nullptr) {
    Var<S> p = softmax_channels(logits);
    if (clamped) *clamped = (p.val().array() <= p_min).count();
    p = clamp_min(p, p_min);
    return mul(powc(one_minus(p), gamma), neg(log_v(p)));
}

}  // namespace detail

// Pixel-wise focal GAN loss for the discriminator (mean over batch and
// pixels). Real term: class-weighted focal on true classes with one-sided
// smoothing putting the epsilon mass on the fake slot. Fake term: unweighted
// focal on the fake class.
template <typename S>
Var<S> discriminator_loss(Var<S> logits_real, Var<S> logits_fake, const Tensor<S>& t_onehot,
                          const std::vector<double>& alpha, const LossConfig& cfg,
                          Index* clamped = nullptr) {
    Index B = t_onehot.dim(0), C = t_onehot.dim(1), H = t_onehot.dim(2), W = t_onehot.dim(3);
    if (logits_real.val().shape() != Shape{B, C + 1, H, W} ||
        logits_fake.val().shape() != Shape{B, C + 1, H, W})
        throw std::invalid_argument("discriminator loss: logits " + shape_str(logits_real.shape()) +
                                    " do not match labels " + shape_str(t_onehot.shape()));
    const Index plane = H * W;
    const double inv_n = 1.0 / static_cast<double>(B * plane);
    const S eps = static_cast<S>(cfg.epsilon);

    // Constant weight masks over the (C+1)-class focal map.
    Tensor<S> wreal = Tensor<S>::zeros({B, C + 1, H, W});
    Tensor<S> wfake = Tensor<S>::zeros({B, C + 1, H, W});
    for (Index n = 0; n < B; ++n) {
        for (Index c = 0; c < C; ++c) {
            S a = static_cast<S>(alpha[static_cast<size_t>(c)]);
            auto src = t_onehot.mat_at(nchw_offset(t_onehot.shape(), n, c), 1, plane).array();
            wreal.mat_at(nchw_offset(wreal.shape(), n, c), 1, plane).array() =
                src * a * (S(1) - eps);
            if (eps > S(0))
                wreal.mat_at(nchw_offset(wreal.shape(), n, C), 1, plane).array() += src * a * eps;
        }
        wfake.mat_at(nchw_offset(wfake.shape(), n, C), 1, plane).array() = S(1);
    }

    Index cl_r = 0, cl_f = 0;
    Var<S> fr = detail::focal_map(logits_real, static_cast<S>(cfg.gamma),
                                  static_cast<S>(cfg.p_min), clamped ? &cl_r : nullptr);
    Var<S> ff = detail::focal_map(logits_fake, static_cast<S>(cfg.gamma),
                                  static_cast<S>(cfg.p_min), clamped ? &cl_f : nullptr);
    if (clamped) *clamped = cl_r + cl_f;
    Var<S> real = sum(mul(Var<S>::constant(wreal), fr));
    Var<S> fake = sum(mul(Var<S>::constant(wfake), ff));
    return scale(add(real, fake), static_cast<S>(inv_n));
}

// Pixel-wise focal loss for the generator: weighted focal on true classes of
// generated pixels, no fake term, no smoothing.
template <typename S>
Var<S> generator_adv_loss(Var<S> logits_fake, const Tensor<S>& t_onehot,
                          const std::vector<double>& alpha, const LossConfig& cfg,
                          Index* clamped = nullptr) {
    Index B = t_onehot.dim(0), C = t_onehot.dim(1), H = t_onehot.dim(2), W = t_onehot.dim(3);
    if (logits_fake.val().shape() != Shape{B, C + 1, H, W})
        throw std::invalid_argument("generator loss: logits/labels shape mismatch");
    const Index plane = H * W;
    Tensor<S> wg = Tensor<S>::zeros({B, C + 1, H, W});
    for (Index n = 0; n < B; ++n)
        for (Index c = 0; c < C; ++c)
            wg.mat_at(nchw_offset(wg.shape(), n, c), 1, plane).array() =
                t_onehot.mat_at(nchw_offset(t_onehot.shape(), n, c), 1, plane).array() *
                static_cast<S>(alpha[static_cast<size_t>(c)]);
    Var<S> fm = detail::focal_map(logits_fake, static_cast<S>(cfg.gamma),
                                  static_cast<S>(cfg.p_min), clamped);
    return scale(sum(mul(Var<S>::constant(wg), fm)),
                 static_cast<S>(1.0 / static_cast<double>(B * plane)));
}

// InfoNCE for one anchor: -log( e^{v.v+ / tau} / (e^{v.v+ / tau} + sum_n e^{v.v-_n / tau}) ).
// Log-sum-exp stabilized.
template <typename S>
Var<S> info_nce(Var<S> v, Var<S> v_pos, Var<S> v_neg, S tau) {
    if (v.val().ndim() != 2 || v.val().dim(0) != 1)
        throw std::invalid_argument("info_nce: anchor must be (1,d)");
    if (!v.val().same_shape(v_pos.val())) throw std::invalid_argument("info_nce: positive dim mismatch");
    if (v_neg.val().ndim() != 2 || v_neg.val().dim(1) != v.val().dim(1))
        throw std::invalid_argument("info_nce: negative dim mismatch");
    Var<S> s_pos = row_sums(mul(v, v_pos));                    // (1,1)
    Var<S> s_neg = matmul(v, v_neg, false, true);              // (1,N)
    Var<S> logits = scale(concat_cols(s_pos, s_neg), S(1) / tau);
    return sub(logsumexp_rows(logits), scale(s_pos, S(1) / tau));
}

// Hinged diversity loss over paired generations from the same label maps:
// mean_i [ tau_div - |sig(f1_i) - sig(f2_i)|_1 / |z1_i - z2_i|_1 ]^+ .
template <typename S>
Var<S> diversity_loss(Var<S> pre1, Var<S> pre2, const Tensor<S>& z1, const Tensor<S>& z2,
                      S tau_div) {
    if (!pre1.val().same_shape(pre2.val()))
        throw std::invalid_argument("diversity loss: feature shape mismatch");
    if (!z1.same_shape(z2)) throw std::invalid_argument("diversity loss: latent shape mismatch");
    Index B = pre1.val().dim(0);
    Index feat = pre1.val().numel() / B;
    Index dz = z1.numel() / B;
    Tensor<S> inv_zdist({B, 1});
    for (Index n = 0; n < B; ++n) {
        double d = 0;
        for (Index i = 0; i < dz; ++i)
            d += std::abs(static_cast<double>(z1[n * dz + i]) - static_cast<double>(z2[n * dz + i]));
        if (d == 0.0)
            throw std::invalid_argument("diversity loss: identical latents in pair " + std::to_string(n));
        inv_zdist[n] = static_cast<S>(1.0 / d);
    }
    Var<S> diff = abs_v(sub(sigmoid(pre1), sigmoid(pre2)));
    Var<S> feat_l1 = row_sums(reshape(diff, {B, feat}));  // (B,1)
    Var<S> ratio = mul(feat_l1, Var<S>::constant(inv_zdist));
    Var<S> hinge = clamp_min(add_scalar(neg(ratio), tau_div), S(0));
    return mean(hinge);
}

// Mean pairwise sigmoid-feature distance per unit latent distance within one
// batch (all unordered pairs).
template <typename S>
double pairwise_distance_ratio(const Tensor<S>& prefinal, const Tensor<S>& z) {
    Index B = prefinal.dim(0);
    if (B < 2) throw std::invalid_argument("distance ratio: need batch size >= 2");
    Index feat = prefinal.numel() / B;
    Index dz = z.numel() / B;
    double acc = 0;
    Index pairs = 0;
    for (Index i = 0; i < B; ++i)
        for (Index j = i + 1; j < B; ++j) {
            double df = 0, dzv = 0;
            for (Index k = 0; k < feat; ++k) {
                double a = 1.0 / (1.0 + std::exp(-static_cast<double>(prefinal[i * feat + k])));
                double b = 1.0 / (1.0 + std::exp(-static_cast<double>(prefinal[j * feat + k])));
                df += std::abs(a - b);
            }
            for (Index k = 0; k < dz; ++k)
                dzv += std::abs(static_cast<double>(z[i * dz + k]) - static_cast<double>(z[j * dz + k]));
            if (dzv > 0) {
                acc += df / dzv;
                ++pairs;
            }
        }
    return pairs > 0 ? acc / static_cast<double>(pairs) : 0.0;
}

// Diversity cutoff estimation: mean over batches of the pairwise ratio.
// `prefinal_fn` runs the generator (gradient-free) on a latent batch and
// returns the features entering the final convolution.
template <typename S, typename PrefinalFn>
double estimate_tau_div(PrefinalFn&& prefinal_fn, Index z_dim, Index batch_size,
                        Index num_batches, Rng& rng) {
    if (batch_size < 2) throw std::invalid_argument("tau_div estimation: batch size must be >= 2");
    if (num_batches < 1) throw std::invalid_argument("tau_div estimation: need at least one batch");
    double acc = 0;
    for (Index b = 0; b < num_batches; ++b) {
        Tensor<S> z({batch_size, z_dim});
        for (Index i = 0; i < z.numel(); ++i) z[i] = static_cast<S>(rng.normal());
        Tensor<S> f = prefinal_fn(z);
        acc += pairwise_distance_ratio(f, z);
    }
    return acc / static_cast<double>(num_batches);
}

// ---------------------------------------------------------------------------
// Patch contrastive machinery
// ---------------------------------------------------------------------------

// Frozen random multi-scale feature pyramid standing in for the pre-trained
// perceptual network at desk scale; emits feature maps at 1/4, 1/8, 1/16.
template <typename S>
class PerceptualExtractor : public Module<S> {
public:
    explicit PerceptualExtractor(std::uint64_t seed = 9181) : seed_(seed) {
        Rng rng(seed);
        std::vector<Index> chs = {16, 24, 32, 40};
        Index in = 3;
        for (size_t i = 0; i < chs.size(); ++i) {
            convs_.push_back(std::make_unique<Conv2d<S>>(in, chs[i], 3, 2, 1, rng,
                                                         /*spectral=*/false, /*bias=*/true,
                                                         /*trainable=*/false, /*he_init=*/true));
            this->add_child("conv" + std::to_string(i), convs_[i].get());
            in = chs[i];
        }
        channels_ = {24, 32, 40};
        calibrate_frozen_pyramid(convs_, calibration_probe<S>(seed ^ 0x5137));
    }

    // Returns maps at strides {4, 8, 16}.
    std::vector<Var<S>> forward(Var<S> x) {
        if (x.val().dim(2) % 16 != 0 || x.val().dim(3) % 16 != 0)
            throw std::invalid_argument("perceptual extractor: input must be divisible by 16");
        std::vector<Var<S>> out;
        Var<S> h = x;
        for (size_t i = 0; i < convs_.size(); ++i) {
            h = gelu(convs_[i]->forward(h));
            if (i >= 1) out.push_back(h);
        }
        return out;
    }

    const std::vector<Index>& scale_channels() const { return channels_; }
    std::vector<Index> scale_divisors() const { return {4, 8, 16}; }
    std::string id() const { return "rpyramid3/seed=" + std::to_string(seed_); }

private:
    std::uint64_t seed_;
    std::vector<std::unique_ptr<Conv2d<S>>> convs_;
    std::vector<Index> channels_;
};

// Trainable projection per scale: conv block then two linear layers, applied
// identically to generated-side and real-side features.
template <typename S>
class ContrastiveHeads : public Module<S> {
public:
    ContrastiveHeads(const std::vector<Index>& scale_channels, Index embed_dim, Rng& rng,
                     bool spectral) {
        for (size_t s = 0; s < scale_channels.size(); ++s) {
            Index c = scale_channels[s];
            auto conv = std::make_unique<Conv2d<S>>(c, c, 3, 1, 1, rng, spectral);
            auto l1 = std::make_unique<Linear<S>>(c, embed_dim, rng, spectral);
            auto l2 = std::make_unique<Linear<S>>(embed_dim, embed_dim, rng, spectral);
            this->add_child("conv" + std::to_string(s), conv.get());
            this->add_child("mlp1_" + std::to_string(s), l1.get());
            this->add_child("mlp2_" + std::to_string(s), l2.get());
            convs_.push_back(std::move(conv));
            mlp1_.push_back(std::move(l1));
            mlp2_.push_back(std::move(l2));
        }
    }

    // Projects gathered feature rows of scale s into the embedding space.
    Var<S> project(size_t s, Var<S> fmap, const std::vector<Index>& row_idx) {
        Var<S> conv = gelu(convs_[s]->forward(fmap));
        Var<S> rows = gather_rows(nchw_to_rows(conv), row_idx);
        Var<S> e = mlp2_[s]->forward(gelu(mlp1_[s]->forward(rows)));
        return l2_normalize_rows(e);
    }

    size_t scales() const { return convs_.size(); }

private:
    std::vector<std::unique_ptr<Conv2d<S>>> convs_;
    std::vector<std::unique_ptr<Linear<S>>> mlp1_, mlp2_;
};

// Multi-scale patch InfoNCE between a real image x and its generation g.
// Anchors come from H_g, positives at the same coordinates of H_x, negatives
// at distinct other coordinates of H_x (shared pool per image and scale,
// drawn without replacement when the map is large enough). Sum over scales of
// the per-anchor mean.
template <typename S>
Var<S> contrastive_loss(Var<S> x, Var<S> g, PerceptualExtractor<S>& extractor,
                        ContrastiveHeads<S>& heads, const LossConfig& cfg, Rng& rng) {
    if (!x.val().same_shape(g.val()))
        throw std::invalid_argument("contrastive loss: x and g resolutions differ");
    std::vector<Var<S>> hx = extractor.forward(x);
    std::vector<Var<S>> hg = extractor.forward(g);
    if (hx.size() != heads.scales())
        throw std::invalid_argument("contrastive loss: required feature scale unavailable");
    Index B = x.val().dim(0);
    const S inv_tau = S(1) / static_cast<S>(cfg.tau);

    Var<S> total;
    for (size_t s = 0; s < hx.size(); ++s) {
        Index h = hx[s].val().dim(2), w = hx[s].val().dim(3);
        Index hw = h * w;
        Index K = std::min<Index>(cfg.anchors_per_image, hw);
        std::vector<Index> anchor_idx, neg_idx;
        for (Index n = 0; n < B; ++n) {
            std::vector<Index> order(static_cast<size_t>(hw));
            for (Index i = 0; i < hw; ++i) order[static_cast<size_t>(i)] = i;
            for (Index i = hw - 1; i > 0; --i)
                std::swap(order[static_cast<size_t>(i)],
                          order[static_cast<size_t>(rng.uniform_int(static_cast<std::uint64_t>(i + 1)))]);
            for (Index k = 0; k < K; ++k) anchor_idx.push_back(n * hw + order[static_cast<size_t>(k)]);
            if (hw - K >= cfg.negatives) {
                // distinct coordinates, disjoint from the anchor set
                for (Index k = 0; k < cfg.negatives; ++k)
                    neg_idx.push_back(n * hw + order[static_cast<size_t>(K + k)]);
            } else {
                for (Index k = 0; k < cfg.negatives; ++k)
                    neg_idx.push_back(n * hw + static_cast<Index>(rng.uniform_int(static_cast<std::uint64_t>(hw))));
            }
        }

        Var<S> va = heads.project(s, hg[s], anchor_idx);   // (B*K, d)
        Var<S> vp = heads.project(s, hx[s], anchor_idx);   // (B*K, d)
        Var<S> vn = heads.project(s, hx[s], neg_idx);      // (B*N, d)

        Var<S> s_pos = row_sums(mul(va, vp));  // (B*K, 1)
        Var<S> s_neg;                          // (B*K, N) blockwise per image
        for (Index n = 0; n < B; ++n) {
            Var<S> blk = matmul(slice_rows(va, n * K, K), slice_rows(vn, n * cfg.negatives, cfg.negatives),
                                false, true);
            s_neg = n == 0 ? blk : concat_rows(s_neg, blk);
        }
        Var<S> logits = scale(concat_cols(s_pos, s_neg), inv_tau);
        Var<S> per_anchor = sub(logsumexp_rows(logits), scale(s_pos, inv_tau));
        Var<S> scale_loss = mean(per_anchor);
        total = s == 0 ? scale_loss : add(total, scale_loss);
    }
    return total;
}

}  // namespace simsyn
