#pragma once

#include <string>
#include <vector>

#include "simsyn/data/dataset.hpp"

namespace simsyn {

// Deterministic desk-scale scene generator: class-colored rectangles and
// ellipses over a textured background. The rendering rule doubles as a
// perfect segmentation oracle.
struct SyntheticSceneSpec {
    Index num_classes = 4;  // class 0 is background
    Index height = 64, width = 64;
    Index num_images = 512;
    std::vector<double> rarity;      // per-class inclusion probability; [0] ignored
    std::vector<double> size_scale;  // per-class shape size multiplier; empty = all 1
    double texture_amplitude = 0.05;
    double instance_jitter = 0.02;
    double min_shape_frac = 0.14, max_shape_frac = 0.34;
    std::uint64_t seed = 7;

    void validate() const;
};

// Fixed palette: background dark gray, classes on saturated distinct hues.
std::array<double, 3> synthetic_class_color(Index c, Index num_classes);
Palette synthetic_palette(Index num_classes);

struct RenderedScene {
    ImageU8 image;
    GridU16 labels;
    GridU16 instances;  // background 0, shapes 1..k in paint order
};

RenderedScene render_scene(const SyntheticSceneSpec& spec, Index image_index);

// Renders the whole set under <root>/{images,labels,instances} plus manifest,
// then loads it back as a DatasetIndex.
DatasetIndex generate_synthetic_dataset(const SyntheticSceneSpec& spec, const std::string& root);

// Pluggable segmentation interface for mIoU against generated images.
class SegmentationOracle {
public:
    virtual ~SegmentationOracle() = default;
    virtual GridU16 segment(const Tensor<float>& image_chw) const = 0;
    virtual std::string id() const = 0;
};

// Nearest-palette-color classifier; exact on clean renders because texture
// perturbations stay below half the minimum palette distance.
class SyntheticOracle : public SegmentationOracle {
public:
    explicit SyntheticOracle(Index num_classes) : num_classes_(num_classes) {}
    GridU16 segment(const Tensor<float>& image_chw) const override;
    std::string id() const override {
        return "synthetic-palette/C=" + std::to_string(num_classes_);
    }

private:
    Index num_classes_;
};

}  // namespace simsyn
