#pragma once

#include <functional>
#include <map>
#include <memory>
#include <vector>

#include "simsyn/io/array_container.hpp"
#include "simsyn/nn/calibrate.hpp"

namespace simsyn {

// Input normalization applied before the frozen encoder.
struct PreprocessRecipe {
    std::array<double, 3> mean = {0.5, 0.5, 0.5};
    std::array<double, 3> stddev = {0.5, 0.5, 0.5};
    double input_lo = 0.0, input_hi = 1.0;
};

// A frozen pre-trained feature extractor exposing a fixed multi-scale pyramid.
// Weights never receive gradient updates; gradients still flow to the input.
template <typename S>
class Backbone : public Module<S> {
public:
    virtual std::vector<Var<S>> extract(Var<S> x) = 0;
    virtual std::vector<Index> level_channels() const = 0;
    virtual std::vector<Index> level_strides() const = 0;
    virtual const PreprocessRecipe& recipe() const = 0;
    virtual std::string name() const = 0;
    Index min_resolution() const { return level_strides().back(); }
};

// Small convolutional encoder with four stride-{4,8,16,32} levels. Weights
// come either from a portable array container or from a seeded random
// initialization (the offline-test fallback).
template <typename S>
class TinyConvBackbone : public Backbone<S> {
public:
    TinyConvBackbone(std::string name, std::vector<Index> channels, std::uint64_t seed)
        : name_(std::move(name)), channels_(std::move(channels)) {
        if (channels_.size() != 4) throw std::invalid_argument("backbone: expected 4 level channels");
        Rng rng(seed);
        Index stem = channels_[0] / 2 + 4;
        convs_.push_back(make_conv(3, stem, rng));
        convs_.push_back(make_conv(stem, channels_[0], rng));
        convs_.push_back(make_conv(channels_[0], channels_[1], rng));
        convs_.push_back(make_conv(channels_[1], channels_[2], rng));
        convs_.push_back(make_conv(channels_[2], channels_[3], rng));
        for (size_t i = 0; i < convs_.size(); ++i)
            this->add_child("conv" + std::to_string(i), convs_[i].get());
        calibrate_frozen_pyramid(convs_, calibration_probe<S>(seed ^ 0xabcddcba12344321ULL));
    }

    std::vector<Var<S>> extract(Var<S> x) override {
        if (x.val().ndim() != 4 || x.val().dim(1) != 3)
            throw std::invalid_argument("backbone: expected (B,3,H,W) input");
        if (x.val().dim(2) < min_res() || x.val().dim(3) < min_res())
            throw std::invalid_argument("backbone: input below minimum resolution " +
                                        std::to_string(min_res()));
        std::vector<Var<S>> levels;
        Var<S> h = x;
        for (size_t i = 0; i < convs_.size(); ++i) {
            h = gelu(convs_[i]->forward(h));
            if (i >= 1) levels.push_back(h);
        }
        return levels;
    }

    std::vector<Index> level_channels() const override { return channels_; }
    std::vector<Index> level_strides() const override { return {4, 8, 16, 32}; }
    const PreprocessRecipe& recipe() const override { return recipe_; }
    std::string name() const override { return name_; }

    // Loads published weights and the preprocessing recipe from a portable
    // array container (entries conv<i>/weight, conv<i>/bias; meta mean/std).
    void load_weights(const std::string& path) {
        ArrayContainer c = ArrayContainer::load(path);
        for (size_t i = 0; i < convs_.size(); ++i) {
            std::string key = "conv" + std::to_string(i);
            Tensor<S> w = c.template get_scalar_tensor<S>(key + "/weight");
            Tensor<S> b = c.template get_scalar_tensor<S>(key + "/bias");
            if (w.shape() != convs_[i]->weight().shape())
                throw DataError("backbone weights '" + path + "': " + key + " has shape " +
                                shape_str(w.shape()) + ", expected " +
                                shape_str(convs_[i]->weight().shape()));
            convs_[i]->weight().val_mut() = w;
            convs_[i]->bias().val_mut() = b;
        }
        if (c.meta.contains("mean"))
            for (int i = 0; i < 3; ++i) recipe_.mean[static_cast<size_t>(i)] = c.meta["mean"][i];
        if (c.meta.contains("std"))
            for (int i = 0; i < 3; ++i) recipe_.stddev[static_cast<size_t>(i)] = c.meta["std"][i];
        name_ += ":" + path;
    }

    // Writes the current weights as a portable container.
    void save_weights(const std::string& path) {
        ArrayContainer c;
        c.meta["format"] = "simsyn-backbone";
        c.meta["mean"] = {recipe_.mean[0], recipe_.mean[1], recipe_.mean[2]};
        c.meta["std"] = {recipe_.stddev[0], recipe_.stddev[1], recipe_.stddev[2]};
        c.meta["channels"] = channels_;
        for (size_t i = 0; i < convs_.size(); ++i) {
            std::string key = "conv" + std::to_string(i);
            c.template put_f32_or_f64<S>(key + "/weight", convs_[i]->weight().val());
            c.template put_f32_or_f64<S>(key + "/bias", convs_[i]->bias().val());
        }
        c.save(path);
    }

private:
    Index min_res() const { return 32; }
    std::unique_ptr<Conv2d<S>> make_conv(Index in, Index out, Rng& rng) {
        // Frozen: not trainable, no spectral norm, variance-preserving init.
        return std::make_unique<Conv2d<S>>(in, out, 3, 2, 1, rng, /*spectral=*/false,
                                           /*bias=*/true, /*trainable=*/false, /*he_init=*/true);
    }

    std::string name_;
    std::vector<Index> channels_;
    std::vector<std::unique_ptr<Conv2d<S>>> convs_;
    PreprocessRecipe recipe_;
};

// Registry keyed by name. `tiny4` is the desk-scale default; `tiny4w` is a
// wider variant. Both fall back to seeded random frozen weights (calibrated
// at construction); a portable array container can supply published weights
// plus the preprocessing recipe.
template <typename S>
std::shared_ptr<Backbone<S>> make_backbone(const std::string& name,
                                           const std::string& weights_path = "") {
    std::shared_ptr<TinyConvBackbone<S>> bb;
    if (name == "tiny4")
        bb = std::make_shared<TinyConvBackbone<S>>(name, std::vector<Index>{16, 32, 48, 64}, 2077);
    else if (name == "tiny4w")
        bb = std::make_shared<TinyConvBackbone<S>>(name, std::vector<Index>{24, 48, 64, 96}, 3737);
    else
        throw ConfigError("unknown backbone '" + name + "' (registered: tiny4, tiny4w)");
    if (!weights_path.empty()) bb->load_weights(weights_path);
    return bb;
}

inline std::vector<std::string> registered_backbones() { return {"tiny4", "tiny4w"}; }

}  // namespace simsyn
