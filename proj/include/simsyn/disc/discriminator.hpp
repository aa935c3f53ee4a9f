#pragma once

#include "simsyn/core/errors.hpp"
#include "simsyn/disc/backbone.hpp"

namespace simsyn {

struct DiscriminatorConfig {
    Index num_classes = 4;  // C; the decoder predicts C+1 with "fake" last
    std::string backbone = "tiny4";
    std::string backbone_weights;  // optional array-container path
    Index fullres_channels = 128;  // output width of the full-resolution path
    Index fullres_hidden = 16;
    std::vector<Index> decoder_channels = {64, 48, 40, 32};  // strides 32,16,8,4
    Index transition_channels = 28;                          // stride-2 stage
    Index penultimate_channels = 24;
    double leaky_slope = 0.2;
    double bn_momentum = 0.1;
    bool spectral = true;
};

// Sigmoid squash + parameter-free batch normalization per backbone level so
// no feature dominates the decoder by scale.
template <typename S>
class FeatureConditioner : public Module<S> {
public:
    FeatureConditioner(const std::vector<Index>& channels, double momentum) {
        for (size_t i = 0; i < channels.size(); ++i) {
            bns_.push_back(std::make_unique<BatchNorm2d<S>>(channels[i], /*affine=*/false, momentum));
            this->add_child("bn" + std::to_string(i + 1), bns_[i].get());
        }
    }

    Var<S> condition(Var<S> f, size_t level) {
        if (this->training() && f.val().dim(0) < 2)
            throw std::invalid_argument("feature conditioning: batch size >= 2 required in training mode");
        // clamp into the float-representable strict interior of (0,1); the
        // exact sigmoid saturates to 1.0f for inputs beyond ~17
        Var<S> s = clamp_max(clamp_min(sigmoid(f), S(1e-7)), S(1) - S(1e-6));
        return bns_[level]->forward(s);
    }

    std::vector<Var<S>> forward(const std::vector<Var<S>>& levels) {
        if (levels.size() != bns_.size())
            throw std::invalid_argument("feature conditioning: expected " +
                                        std::to_string(bns_.size()) + " levels");
        std::vector<Var<S>> out;
        for (size_t i = 0; i < levels.size(); ++i) out.push_back(condition(levels[i], i));
        return out;
    }

private:
    std::vector<std::unique_ptr<BatchNorm2d<S>>> bns_;
};

// Residual block used on the trainable discriminator paths:
// x + Conv1x1(LReLU(Conv3x3(x))) with a trailing LReLU inside the branch.
template <typename S>
class DiscResBlock : public Module<S> {
public:
    DiscResBlock(Index ch, double slope, Rng& rng, bool spectral) : slope_(static_cast<S>(slope)) {
        c3_ = std::make_unique<Conv2d<S>>(ch, ch, 3, 1, 1, rng, spectral);
        c1_ = std::make_unique<Conv2d<S>>(ch, ch, 1, 1, 0, rng, spectral);
        this->add_child("c3", c3_.get());
        this->add_child("c1", c1_.get());
    }

    Var<S> forward(Var<S> x) {
        Var<S> d = leaky_relu(c1_->forward(leaky_relu(c3_->forward(x), slope_)), slope_);
        return add(x, d);
    }

private:
    S slope_;
    std::unique_ptr<Conv2d<S>> c3_, c1_;
};

// Fully trainable path at image resolution: two shallow residual blocks, then
// a pointwise lift to the declared output width.
template <typename S>
class FullResPath : public Module<S> {
public:
    FullResPath(Index hidden, Index out, double slope, Rng& rng, bool spectral)
        : slope_(static_cast<S>(slope)) {
        conv_in_ = std::make_unique<Conv2d<S>>(3, hidden, 3, 1, 1, rng, spectral);
        rb1_ = std::make_unique<DiscResBlock<S>>(hidden, slope, rng, spectral);
        rb2_ = std::make_unique<DiscResBlock<S>>(hidden, slope, rng, spectral);
        conv_out_ = std::make_unique<Conv2d<S>>(hidden, out, 1, 1, 0, rng, spectral);
        this->add_child("conv_in", conv_in_.get());
        this->add_child("rb1", rb1_.get());
        this->add_child("rb2", rb2_.get());
        this->add_child("conv_out", conv_out_.get());
    }

    Var<S> forward(Var<S> x) {
        Var<S> h = leaky_relu(conv_in_->forward(x), slope_);
        h = rb2_->forward(rb1_->forward(h));
        return conv_out_->forward(h);
    }

private:
    S slope_;
    std::unique_ptr<Conv2d<S>> conv_in_, conv_out_;
    std::unique_ptr<DiscResBlock<S>> rb1_, rb2_;
};

// UNet decoder over the conditioned pyramid, merging each encoder level by
// concatenation + pointwise fuse + residual block, then joining the
// full-resolution path before the per-pixel (C+1)-way prediction.
template <typename S>
class Decoder : public Module<S> {
public:
    Decoder(const DiscriminatorConfig& cfg, const std::vector<Index>& enc_channels, Rng& rng)
        : slope_(static_cast<S>(cfg.leaky_slope)) {
        if (enc_channels.size() != 4)
            throw std::invalid_argument("decoder: expected a 4-level encoder pyramid");
        const auto& dc = cfg.decoder_channels;
        bool sp = cfg.spectral;
        entry_ = std::make_unique<Conv2d<S>>(enc_channels[3], dc[0], 1, 1, 0, rng, sp);
        rb_.push_back(std::make_unique<DiscResBlock<S>>(dc[0], cfg.leaky_slope, rng, sp));
        for (int l = 0; l < 3; ++l) {
            // merge level 3-l (channels enc[2-l]) after upsampling
            fuse_.push_back(std::make_unique<Conv2d<S>>(dc[static_cast<size_t>(l)] + enc_channels[static_cast<size_t>(2 - l)],
                                                        dc[static_cast<size_t>(l + 1)], 1, 1, 0, rng, sp));
            rb_.push_back(std::make_unique<DiscResBlock<S>>(dc[static_cast<size_t>(l + 1)], cfg.leaky_slope, rng, sp));
        }
        transition_ = std::make_unique<Conv2d<S>>(dc[3], cfg.transition_channels, 3, 1, 1, rng, sp);
        fullres_fuse_ = std::make_unique<Conv2d<S>>(cfg.transition_channels + cfg.fullres_channels,
                                                    cfg.penultimate_channels, 1, 1, 0, rng, sp);
        rb_.push_back(std::make_unique<DiscResBlock<S>>(cfg.penultimate_channels, cfg.leaky_slope, rng, sp));
        logits_ = std::make_unique<Conv2d<S>>(cfg.penultimate_channels, cfg.num_classes + 1, 1, 1, 0, rng, sp);

        this->add_child("entry", entry_.get());
        for (size_t i = 0; i < rb_.size(); ++i) this->add_child("rb" + std::to_string(i + 1), rb_[i].get());
        for (size_t i = 0; i < fuse_.size(); ++i) this->add_child("fuse" + std::to_string(i + 1), fuse_[i].get());
        this->add_child("transition", transition_.get());
        this->add_child("fullres_fuse", fullres_fuse_.get());
        this->add_child("logits", logits_.get());
    }

    Var<S> forward(const std::vector<Var<S>>& cond_levels, Var<S> fullres) {
        if (cond_levels.size() != 4)
            throw std::invalid_argument("decoder: expected 4 conditioned levels, got " +
                                        std::to_string(cond_levels.size()));
        Var<S> d = rb_[0]->forward(leaky_relu(entry_->forward(cond_levels[3]), slope_));
        for (int l = 0; l < 3; ++l) {
            d = upsample_nearest2(d);
            d = leaky_relu(fuse_[static_cast<size_t>(l)]->forward(
                               concat_channels(d, cond_levels[static_cast<size_t>(2 - l)])),
                           slope_);
            d = rb_[static_cast<size_t>(l + 1)]->forward(d);
        }
        d = leaky_relu(transition_->forward(upsample_nearest2(d)), slope_);  // stride 2
        d = upsample_nearest2(d);                                            // full resolution
        d = leaky_relu(fullres_fuse_->forward(concat_channels(d, fullres)), slope_);
        d = rb_[4]->forward(d);
        return logits_->forward(d);
    }

private:
    S slope_;
    std::unique_ptr<Conv2d<S>> entry_, transition_, fullres_fuse_, logits_;
    std::vector<std::unique_ptr<DiscResBlock<S>>> rb_;
    std::vector<std::unique_ptr<Conv2d<S>>> fuse_;
};

template <typename S>
class Discriminator : public Module<S> {
public:
    Discriminator(const DiscriminatorConfig& cfg, Rng& rng)
        : cfg_(cfg), backbone_(make_backbone<S>(cfg.backbone, cfg.backbone_weights)) {
        conditioner_ = std::make_unique<FeatureConditioner<S>>(backbone_->level_channels(),
                                                               cfg.bn_momentum);
        fullres_ = std::make_unique<FullResPath<S>>(cfg.fullres_hidden, cfg.fullres_channels,
                                                    cfg.leaky_slope, rng, cfg.spectral);
        decoder_ = std::make_unique<Decoder<S>>(cfg, backbone_->level_channels(), rng);
        this->add_child("backbone", backbone_.get());
        this->add_child("conditioner", conditioner_.get());
        this->add_child("fullres", fullres_.get());
        this->add_child("decoder", decoder_.get());
    }

    // x: raw images in [0,1]; returns per-pixel logits over C+1 classes.
    Var<S> forward(Var<S> x) {
        Var<S> xp = preprocess(x);
        std::vector<Var<S>> raw = backbone_->extract(xp);
        std::vector<Var<S>> cond = conditioner_->forward(raw);
        Var<S> fr = fullres_->forward(xp);
        return decoder_->forward(cond, fr);
    }

    Var<S> preprocess(Var<S> x) {
        const auto& r = backbone_->recipe();
        std::vector<double> m(r.mean.begin(), r.mean.end());
        std::vector<double> v = {r.stddev[0] * r.stddev[0], r.stddev[1] * r.stddev[1],
                                 r.stddev[2] * r.stddev[2]};
        return batchnorm_eval(x, Var<S>(), Var<S>(), m, v, S(0));
    }

    Backbone<S>& backbone() { return *backbone_; }
    FeatureConditioner<S>& conditioner() { return *conditioner_; }
    FullResPath<S>& fullres_path() { return *fullres_; }
    Decoder<S>& decoder() { return *decoder_; }
    const DiscriminatorConfig& config() const { return cfg_; }

    // Everything except the frozen encoder.
    std::vector<Var<S>> trainable_params() { return this->trainable_parameters(); }

private:
    DiscriminatorConfig cfg_;
    std::shared_ptr<Backbone<S>> backbone_;
    std::unique_ptr<FeatureConditioner<S>> conditioner_;
    std::unique_ptr<FullResPath<S>> fullres_;
    std::unique_ptr<Decoder<S>> decoder_;
};

}  // namespace simsyn
