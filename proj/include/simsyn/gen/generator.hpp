#pragma once

#include <map>
#include <memory>
#include <vector>

#include "simsyn/nn/layers.hpp"

namespace simsyn {

struct GeneratorConfig {
    Index image_size = 64;
    Index label_channels = 4;   // C semantic classes
    bool use_offsets = true;    // +2 instance offset channels
    Index z_dim = 64;
    Index w_tokens = 4;
    Index w_dim = 64;
    Index mlp_hidden = 128;
    std::vector<Index> pyramid_channels = {16, 24, 32, 48, 48};
    int attention_levels = 2;   // lowest-resolution pyramid blocks with attention
    std::vector<Index> synth_channels = {64, 64, 56, 40, 28, 20, 16};
    Index spade_hidden = 16;
    double leaky_slope = 0.2;
    bool spectral = true;
    Index max_attention_hw = 64 * 64;  // attention only at <= 64x64

    Index in_channels() const { return label_channels + (use_offsets ? 2 : 0); }
    Index levels() const { return static_cast<Index>(pyramid_channels.size()); }
    Index base_size() const { return image_size >> (levels() - 1); }
};

// Nearest-neighbor downsample of a constant NCHW tensor by integer factor.
template <typename S>
Tensor<S> downsample_nearest(const Tensor<S>& x, Index factor) {
    Index B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    Tensor<S> y({B, C, H / factor, W / factor});
    for (Index n = 0; n < B; ++n)
        for (Index c = 0; c < C; ++c)
            for (Index h = 0; h < H / factor; ++h)
                for (Index w = 0; w < W / factor; ++w)
                    y[((n * C + c) * (H / factor) + h) * (W / factor) + w] =
                        x[((n * C + c) * H + h * factor) * W + w * factor];
    return y;
}

// Gated residual cross-attention noise injection: h + eta * A(h, w).
template <typename S>
class CrossAttentionInject : public Module<S> {
public:
    CrossAttentionInject(Index ch, Index w_dim, Rng& rng, bool spectral, Index max_hw)
        : ch_(ch), dq_(ch / 2), max_hw_(max_hw) {
        q_conv_ = std::make_unique<Conv2d<S>>(ch, ch, 3, 1, 1, rng, spectral);
        q_lin_ = std::make_unique<Linear<S>>(ch, dq_, rng, spectral, true, /*orthogonal=*/true);
        k_lin_ = std::make_unique<Linear<S>>(w_dim, dq_, rng, spectral, true, true);
        v_lin_ = std::make_unique<Linear<S>>(w_dim, dq_, rng, spectral, true, true);
        out_lin_ = std::make_unique<Linear<S>>(dq_, ch, rng, spectral, true, true);
        this->add_child("q_conv", q_conv_.get());
        this->add_child("q_lin", q_lin_.get());
        this->add_child("k_lin", k_lin_.get());
        this->add_child("v_lin", v_lin_.get());
        this->add_child("out_lin", out_lin_.get());
        eta_ = this->add_param("eta", init_zeros<S>({1}));
    }

    // h: (B,ch,H,W), w_rows: (B*n_k, w_dim)
    Var<S> forward(Var<S> h, Var<S> w_rows) {
        Index B = h.val().dim(0), H = h.val().dim(2), W = h.val().dim(3);
        if (H * W > max_hw_)
            throw std::invalid_argument("noise injection: resolution " + std::to_string(H) + "x" +
                                        std::to_string(W) + " exceeds the attention limit");
        Var<S> q = q_lin_->forward(nchw_to_rows(q_conv_->forward(h)));
        Var<S> k = k_lin_->forward(w_rows);
        Var<S> v = v_lin_->forward(w_rows);
        Var<S> a = attention_batched(q, k, v, B);
        Var<S> out = rows_to_nchw(out_lin_->forward(a), B, ch_, H, W);
        return add(h, scale_by(out, eta_));
    }

    Var<S> eta() { return eta_; }
    // Attention contribution alone (for the gating-derivative property).
    Var<S> attention_term(Var<S> h, Var<S> w_rows) {
        Index B = h.val().dim(0), H = h.val().dim(2), W = h.val().dim(3);
        Var<S> q = q_lin_->forward(nchw_to_rows(q_conv_->forward(h)));
        Var<S> a = attention_batched(q, k_lin_->forward(w_rows), v_lin_->forward(w_rows), B);
        return rows_to_nchw(out_lin_->forward(a), B, ch_, H, W);
    }

private:
    Index ch_, dq_, max_hw_;
    std::unique_ptr<Conv2d<S>> q_conv_;
    std::unique_ptr<Linear<S>> q_lin_, k_lin_, v_lin_, out_lin_;
    Var<S> eta_;
};

// Residual single-head self-attention over spatial positions.
template <typename S>
class SelfAttentionBlock : public Module<S> {
public:
    SelfAttentionBlock(Index ch, Rng& rng, bool spectral) : ch_(ch), dq_(ch / 2) {
        q_ = std::make_unique<Linear<S>>(ch, dq_, rng, spectral, true, true);
        k_ = std::make_unique<Linear<S>>(ch, dq_, rng, spectral, true, true);
        v_ = std::make_unique<Linear<S>>(ch, dq_, rng, spectral, true, true);
        out_ = std::make_unique<Linear<S>>(dq_, ch, rng, spectral, true, true);
        this->add_child("q", q_.get());
        this->add_child("k", k_.get());
        this->add_child("v", v_.get());
        this->add_child("out", out_.get());
    }

    Var<S> forward(Var<S> x) {
        Index B = x.val().dim(0), H = x.val().dim(2), W = x.val().dim(3);
        Var<S> rows = nchw_to_rows(x);
        Var<S> a = attention_batched(q_->forward(rows), k_->forward(rows), v_->forward(rows), B);
        return add(x, rows_to_nchw(out_->forward(a), B, ch_, H, W));
    }

private:
    Index ch_, dq_;
    std::unique_ptr<Linear<S>> q_, k_, v_, out_;
};

// One label-encoding pyramid block. High-resolution blocks are convolutional;
// low-resolution blocks add cross-attention noise injection + self-attention.
template <typename S>
class PyramidBlock : public Module<S> {
public:
    PyramidBlock(Index in, Index out, Index stride, bool with_attention, Index w_dim, Rng& rng,
                 bool spectral, Index max_hw)
        : with_attention_(with_attention) {
        conv_in_ = std::make_unique<Conv2d<S>>(in, out, 3, stride, 1, rng, spectral);
        bn1_ = std::make_unique<BatchNorm2d<S>>(out, true);
        conv_out_ = std::make_unique<Conv2d<S>>(out, out, 1, 1, 0, rng, spectral);
        this->add_child("conv_in", conv_in_.get());
        this->add_child("bn1", bn1_.get());
        this->add_child("conv_out", conv_out_.get());
        if (with_attention_) {
            cross_ = std::make_unique<CrossAttentionInject<S>>(out, w_dim, rng, spectral, max_hw);
            bn2_ = std::make_unique<BatchNorm2d<S>>(out, true);
            self_ = std::make_unique<SelfAttentionBlock<S>>(out, rng, spectral);
            bn3_ = std::make_unique<BatchNorm2d<S>>(out, true);
            this->add_child("cross", cross_.get());
            this->add_child("bn2", bn2_.get());
            this->add_child("self", self_.get());
            this->add_child("bn3", bn3_.get());
        }
    }

    Var<S> forward(Var<S> x, Var<S> w_rows) {
        Var<S> h = gelu(bn1_->forward(conv_in_->forward(x)));
        if (with_attention_) {
            h = gelu(bn2_->forward(cross_->forward(h, w_rows)));
            h = bn3_->forward(gelu(self_->forward(h)));
        }
        return conv_out_->forward(h);
    }

    CrossAttentionInject<S>* cross() { return cross_.get(); }

private:
    bool with_attention_;
    std::unique_ptr<Conv2d<S>> conv_in_, conv_out_;
    std::unique_ptr<BatchNorm2d<S>> bn1_, bn2_, bn3_;
    std::unique_ptr<CrossAttentionInject<S>> cross_;
    std::unique_ptr<SelfAttentionBlock<S>> self_;
};

// Spatially adaptive normalization: parameter-free batch norm modulated by
// per-pixel scale/shift maps predicted from the conditioning input.
template <typename S>
class Spade : public Module<S> {
public:
    Spade(Index ch, Index cond_ch, Index hidden, Rng& rng, bool spectral) {
        bn_ = std::make_unique<BatchNorm2d<S>>(ch, /*affine=*/false);
        shared_ = std::make_unique<Conv2d<S>>(cond_ch, hidden, 3, 1, 1, rng, spectral);
        gamma_ = std::make_unique<Conv2d<S>>(hidden, ch, 1, 1, 0, rng, spectral);
        beta_ = std::make_unique<Conv2d<S>>(hidden, ch, 1, 1, 0, rng, spectral);
        this->add_child("bn", bn_.get());
        this->add_child("shared", shared_.get());
        this->add_child("gamma", gamma_.get());
        this->add_child("beta", beta_.get());
    }

    Var<S> forward(Var<S> x, Var<S> cond) {
        if (cond.val().dim(2) != x.val().dim(2) || cond.val().dim(3) != x.val().dim(3))
            throw std::invalid_argument("spade: conditioning size " + shape_str(cond.shape()) +
                                        " does not match features " + shape_str(x.shape()));
        Var<S> n = bn_->forward(x);
        Var<S> a = gelu(shared_->forward(cond));
        Var<S> g = gamma_->forward(a);
        Var<S> b = beta_->forward(a);
        // n * (1 + g) + b
        return add(add(n, mul(n, g)), b);
    }

private:
    std::unique_ptr<BatchNorm2d<S>> bn_;
    std::unique_ptr<Conv2d<S>> shared_, gamma_, beta_;
};

template <typename S>
class SpadeResBlock : public Module<S> {
public:
    SpadeResBlock(Index in, Index out, Index cond_ch, Index hidden, double slope, Rng& rng,
                  bool spectral)
        : slope_(static_cast<S>(slope)), learned_shortcut_(in != out) {
        Index mid = std::min(in, out);
        spade1_ = std::make_unique<Spade<S>>(in, cond_ch, hidden, rng, spectral);
        conv1_ = std::make_unique<Conv2d<S>>(in, mid, 3, 1, 1, rng, spectral);
        spade2_ = std::make_unique<Spade<S>>(mid, cond_ch, hidden, rng, spectral);
        conv2_ = std::make_unique<Conv2d<S>>(mid, out, 3, 1, 1, rng, spectral);
        this->add_child("spade1", spade1_.get());
        this->add_child("conv1", conv1_.get());
        this->add_child("spade2", spade2_.get());
        this->add_child("conv2", conv2_.get());
        if (learned_shortcut_) {
            spade_s_ = std::make_unique<Spade<S>>(in, cond_ch, hidden, rng, spectral);
            conv_s_ = std::make_unique<Conv2d<S>>(in, out, 1, 1, 0, rng, spectral, /*bias=*/false);
            this->add_child("spade_s", spade_s_.get());
            this->add_child("conv_s", conv_s_.get());
        }
    }

    Var<S> forward(Var<S> x, Var<S> cond) {
        Var<S> d = conv1_->forward(leaky_relu(spade1_->forward(x, cond), slope_));
        d = conv2_->forward(leaky_relu(spade2_->forward(d, cond), slope_));
        Var<S> s = learned_shortcut_ ? conv_s_->forward(spade_s_->forward(x, cond)) : x;
        return add(s, d);
    }

private:
    S slope_;
    bool learned_shortcut_;
    std::unique_ptr<Spade<S>> spade1_, spade2_, spade_s_;
    std::unique_ptr<Conv2d<S>> conv1_, conv2_, conv_s_;
};

template <typename S>
struct GeneratorOutput {
    Var<S> image;     // (B,3,H,W), no output squashing
    Var<S> prefinal;  // activations entering the final convolution
};

template <typename S>
class Generator : public Module<S> {
public:
    explicit Generator(const GeneratorConfig& cfg, Rng& rng) : cfg_(cfg) {
        if (cfg.image_size % (Index(1) << (cfg.levels() - 1)) != 0)
            throw std::invalid_argument("generator: image size not divisible by 2^(levels-1)");
        mapper_ = std::make_unique<NoiseMapper<S>>(cfg.z_dim, cfg.mlp_hidden, cfg.w_tokens,
                                                   cfg.w_dim, rng, cfg.spectral);
        this->add_child("mapper", mapper_.get());

        const Index L = cfg.levels();
        Index in_ch = cfg.in_channels();
        for (Index i = 0; i < L; ++i) {
            bool attn = i >= L - cfg.attention_levels;
            Index stride = (i == 0) ? 1 : 2;
            pyramid_.push_back(std::make_unique<PyramidBlock<S>>(
                in_ch, cfg.pyramid_channels[static_cast<size_t>(i)], stride, attn, cfg.w_dim, rng,
                cfg.spectral, cfg.max_attention_hw));
            this->add_child("pyramid" + std::to_string(i + 1), pyramid_.back().get());
            in_ch = cfg.pyramid_channels[static_cast<size_t>(i)];
        }

        const Index blocks = static_cast<Index>(cfg.synth_channels.size()) - 1;
        const Index ups = static_cast<Index>(std::log2(cfg.image_size / cfg.base_size()));
        if (blocks < ups + 1)
            throw std::invalid_argument("generator: too few synthesis blocks for resolution");
        start_ = std::make_unique<Conv2d<S>>(cfg.in_channels(), cfg.synth_channels[0], 3, 1, 1, rng,
                                             cfg.spectral);
        this->add_child("start", start_.get());
        Index res = cfg.base_size();
        const Index top_ch = cfg.pyramid_channels.back();
        for (Index b = 0; b < blocks; ++b) {
            bool up = b >= blocks - ups;
            if (up) res *= 2;
            block_res_.push_back(res);
            block_up_.push_back(up);
            Index lvl = level_for_res(res);
            Index cond_ch = cfg.pyramid_channels[static_cast<size_t>(lvl)] +
                            (lvl == L - 1 ? 0 : top_ch);
            synth_.push_back(std::make_unique<SpadeResBlock<S>>(
                cfg.synth_channels[static_cast<size_t>(b)],
                cfg.synth_channels[static_cast<size_t>(b + 1)], cond_ch, cfg.spade_hidden,
                cfg.leaky_slope, rng, cfg.spectral));
            this->add_child("synth" + std::to_string(b + 1), synth_.back().get());
        }
        head_ = std::make_unique<Conv2d<S>>(cfg.synth_channels.back(), 3, 3, 1, 1, rng, cfg.spectral);
        this->add_child("head", head_.get());
    }

    Var<S> map_noise(Var<S> z) { return mapper_->forward(z); }

    // Label-encoding pyramid; returns one feature map per level.
    std::vector<Var<S>> encode_pyramid(Var<S> t, Var<S> w_rows) {
        if (t.val().dim(2) % (Index(1) << (cfg_.levels() - 1)) != 0 ||
            t.val().dim(3) % (Index(1) << (cfg_.levels() - 1)) != 0)
            throw std::invalid_argument("pyramid: input resolution not divisible by 2^(levels-1)");
        std::vector<Var<S>> hs;
        Var<S> h = t;
        for (auto& blk : pyramid_) {
            h = blk->forward(h, w_rows);
            hs.push_back(h);
        }
        return hs;
    }

    GeneratorOutput<S> forward(Var<S> t, Var<S> z) {
        if (t.val().ndim() != 4 || t.val().dim(1) != cfg_.in_channels())
            throw std::invalid_argument("generator: label input must be (B," +
                                        std::to_string(cfg_.in_channels()) + ",H,W), got " +
                                        shape_str(t.shape()));
        if (z.val().ndim() != 2 || z.val().dim(0) != t.val().dim(0))
            throw std::invalid_argument("generator: latent batch mismatch");
        Var<S> w_rows = map_noise(z);
        std::vector<Var<S>> hs = encode_pyramid(t, w_rows);

        // SPADE conditioning: level map concatenated with the resized top map.
        Var<S> x = start_->forward(
            Var<S>::constant(downsample_nearest(t.val(), cfg_.image_size / cfg_.base_size())));
        const Index L = cfg_.levels();
        std::map<Index, Var<S>> cond_cache;
        for (size_t b = 0; b < synth_.size(); ++b) {
            if (block_up_[b]) x = upsample_nearest2(x);
            Index lvl = level_for_res(block_res_[b]);
            auto it = cond_cache.find(block_res_[b]);
            if (it == cond_cache.end()) {
                Var<S> cond = hs[static_cast<size_t>(lvl)];
                if (lvl != L - 1) {
                    Var<S> top = hs.back();
                    Index factor = block_res_[b] / cfg_.base_size();
                    for (Index f = 1; f < factor; f *= 2) top = upsample_nearest2(top);
                    cond = concat_channels(cond, top);
                }
                it = cond_cache.emplace(block_res_[b], cond).first;
            }
            x = synth_[b]->forward(x, it->second);
        }
        Var<S> pre = leaky_relu(x, static_cast<S>(cfg_.leaky_slope));
        Var<S> img = head_->forward(pre);
        forward_count_ += t.val().dim(0);
        return {img, pre};
    }

    const GeneratorConfig& config() const { return cfg_; }
    std::int64_t forward_count() const { return forward_count_; }
    void reset_forward_count() { forward_count_ = 0; }
    std::vector<std::unique_ptr<PyramidBlock<S>>>& pyramid_blocks() { return pyramid_; }
    NoiseMapper<S>& mapper() { return *mapper_; }

    // All gating parameters eta_i, in level order.
    std::vector<Var<S>> gates() {
        std::vector<Var<S>> out;
        for (auto& blk : pyramid_)
            if (blk->cross()) out.push_back(blk->cross()->eta());
        return out;
    }

private:
    Index level_for_res(Index res) const {
        Index lvl = 0;
        for (Index r = cfg_.image_size; r != res; r /= 2) ++lvl;
        return lvl;
    }

    GeneratorConfig cfg_;
    std::unique_ptr<NoiseMapper<S>> mapper_;
    std::vector<std::unique_ptr<PyramidBlock<S>>> pyramid_;
    std::unique_ptr<Conv2d<S>> start_, head_;
    std::vector<std::unique_ptr<SpadeResBlock<S>>> synth_;
    std::vector<Index> block_res_;
    std::vector<bool> block_up_;
    std::int64_t forward_count_ = 0;
};

}  // namespace simsyn
