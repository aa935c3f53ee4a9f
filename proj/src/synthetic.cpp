#include "simsyn/data/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <set>

#include "simsyn/core/errors.hpp"
#include "simsyn/core/rng.hpp"

namespace fs = std::filesystem;

namespace simsyn {

namespace {

// Position-keyed noise so textures are independent of shape paint order.
double hash_noise(std::uint64_t seed, Index y, Index x, Index channel) {
    std::uint64_t h = seed ^ (static_cast<std::uint64_t>(y) * 0x9e3779b97f4a7c15ULL) ^
                      (static_cast<std::uint64_t>(x) * 0xbf58476d1ce4e5b9ULL) ^
                      (static_cast<std::uint64_t>(channel) * 0x94d049bb133111ebULL);
    h ^= h >> 30;
    h *= 0xbf58476d1ce4e5b9ULL;
    h ^= h >> 27;
    h *= 0x94d049bb133111ebULL;
    h ^= h >> 31;
    return static_cast<double>(h >> 11) * (1.0 / 9007199254740992.0) * 2.0 - 1.0;  // [-1,1)
}

std::array<double, 3> hsv_to_rgb(double h, double s, double v) {
    double c = v * s;
    double hp = h / 60.0;
    double x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
    double r = 0, g = 0, b = 0;
    if (hp < 1) { r = c; g = x; }
    else if (hp < 2) { r = x; g = c; }
    else if (hp < 3) { g = c; b = x; }
    else if (hp < 4) { g = x; b = c; }
    else if (hp < 5) { r = x; b = c; }
    else { r = c; b = x; }
    double m = v - c;
    return {r + m, g + m, b + m};
}

std::uint8_t to_u8(double v) {
    return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

}  // namespace

void SyntheticSceneSpec::validate() const {
    if (num_classes < 2) throw ConfigError("synthetic: need at least 2 classes");
    if (num_classes > 256) throw ConfigError("synthetic: palette limited to 256 classes");
    if (!rarity.empty() && rarity.size() != static_cast<size_t>(num_classes))
        throw ConfigError("synthetic: rarity profile must list every class");
    if (!size_scale.empty() && size_scale.size() != static_cast<size_t>(num_classes))
        throw ConfigError("synthetic: size_scale must list every class");
    if (num_images < 1) throw ConfigError("synthetic: need at least one image");
}

std::array<double, 3> synthetic_class_color(Index c, Index num_classes) {
    if (c == 0) return {0.16, 0.16, 0.16};
    double hue = 360.0 * static_cast<double>(c - 1) / static_cast<double>(num_classes - 1);
    return hsv_to_rgb(hue, 0.78, 0.85);
}

Palette synthetic_palette(Index num_classes) {
    Palette p;
    for (Index c = 0; c < num_classes; ++c) {
        auto rgb = synthetic_class_color(c, num_classes);
        p.rgb.push_back(to_u8(rgb[0]));
        p.rgb.push_back(to_u8(rgb[1]));
        p.rgb.push_back(to_u8(rgb[2]));
    }
    return p;
}

RenderedScene render_scene(const SyntheticSceneSpec& spec, Index image_index) {
    spec.validate();
    const Index H = spec.height, W = spec.width;
    Rng rng(spec.seed, 0x1000 + static_cast<std::uint64_t>(image_index));
    const std::uint64_t tex_seed = spec.seed * 0x2545f4914f6cdd1dULL + static_cast<std::uint64_t>(image_index);

    RenderedScene out;
    out.labels.height = out.instances.height = H;
    out.labels.width = out.instances.width = W;
    out.labels.v.assign(static_cast<size_t>(H * W), 0);
    out.instances.v.assign(static_cast<size_t>(H * W), 0);

    std::uint16_t next_instance = 1;
    for (Index c = 1; c < spec.num_classes; ++c) {
        double r = spec.rarity.empty() ? 1.0 : spec.rarity[static_cast<size_t>(c)];
        if (rng.uniform() >= r) continue;
        Index shapes = 1 + (rng.uniform() < 0.35 ? 1 : 0);
        double scale = spec.size_scale.empty() ? 1.0 : spec.size_scale[static_cast<size_t>(c)];
        for (Index s = 0; s < shapes; ++s) {
            bool ellipse = rng.uniform() < 0.5;
            double side = static_cast<double>(std::min(H, W));
            double hy = scale * side * rng.uniform(spec.min_shape_frac, spec.max_shape_frac) / 2.0;
            double hx = scale * side * rng.uniform(spec.min_shape_frac, spec.max_shape_frac) / 2.0;
            hy = std::max(1.0, hy);
            hx = std::max(1.0, hx);
            double cy = rng.uniform(hy, static_cast<double>(H) - hy);
            double cx = rng.uniform(hx, static_cast<double>(W) - hx);
            std::uint16_t inst = next_instance++;
            for (Index y = 0; y < H; ++y)
                for (Index x = 0; x < W; ++x) {
                    double dy = (static_cast<double>(y) - cy) / hy;
                    double dx = (static_cast<double>(x) - cx) / hx;
                    bool inside = ellipse ? (dy * dy + dx * dx <= 1.0)
                                          : (std::abs(dy) <= 1.0 && std::abs(dx) <= 1.0);
                    if (inside) {
                        out.labels.at(y, x) = static_cast<std::uint16_t>(c);
                        out.instances.at(y, x) = inst;
                    }
                }
        }
    }

    // Per-instance color jitter, resolved after occlusion.
    std::vector<std::array<double, 3>> jitter(static_cast<size_t>(next_instance), {0, 0, 0});
    for (std::uint16_t i = 1; i < next_instance; ++i)
        for (int ch = 0; ch < 3; ++ch)
            jitter[i][static_cast<size_t>(ch)] = rng.uniform(-spec.instance_jitter, spec.instance_jitter);

    out.image.height = H;
    out.image.width = W;
    out.image.rgb.resize(static_cast<size_t>(3 * H * W));
    for (Index y = 0; y < H; ++y)
        for (Index x = 0; x < W; ++x) {
            Index c = out.labels.at(y, x);
            std::uint16_t inst = out.instances.at(y, x);
            auto base = synthetic_class_color(c, spec.num_classes);
            std::uint8_t* px = out.image.px(y, x);
            for (int ch = 0; ch < 3; ++ch) {
                double v = base[static_cast<size_t>(ch)] +
                           spec.texture_amplitude * hash_noise(tex_seed, y, x, ch) +
                           jitter[inst][static_cast<size_t>(ch)];
                px[ch] = to_u8(v);
            }
        }
    return out;
}

DatasetIndex generate_synthetic_dataset(const SyntheticSceneSpec& spec, const std::string& root) {
    spec.validate();
    std::error_code ec;
    fs::create_directories(fs::path(root) / "images", ec);
    fs::create_directories(fs::path(root) / "labels", ec);
    fs::create_directories(fs::path(root) / "instances", ec);
    if (!fs::is_directory(fs::path(root) / "images"))
        throw DataError("cannot create dataset directory '" + root + "'");

    Palette palette = synthetic_palette(spec.num_classes);
    std::vector<DatasetRecord> records;
    char name[32];
    for (Index i = 0; i < spec.num_images; ++i) {
        RenderedScene scene = render_scene(spec, i);
        std::snprintf(name, sizeof(name), "%05lld", static_cast<long long>(i));
        DatasetRecord r;
        r.id = name;
        r.image_path = (fs::path(root) / "images" / (r.id + ".png")).string();
        r.label_path = (fs::path(root) / "labels" / (r.id + ".png")).string();
        r.instance_path = (fs::path(root) / "instances" / (r.id + ".png")).string();
        write_rgb_png(r.image_path, scene.image);
        write_palette_png(r.label_path, scene.labels, palette);
        write_gray16_png(r.instance_path, scene.instances);
        std::set<int> cs(scene.labels.v.begin(), scene.labels.v.end());
        r.class_set.assign(cs.begin(), cs.end());
        records.push_back(std::move(r));
    }
    write_manifest((fs::path(root) / "manifest.txt").string(), records);
    return load_dataset(root, /*require_instances=*/true);
}

GridU16 SyntheticOracle::segment(const Tensor<float>& image_chw) const {
    if (image_chw.ndim() != 3 || image_chw.dim(0) != 3)
        throw std::invalid_argument("oracle: need a (3,H,W) image");
    Index H = image_chw.dim(1), W = image_chw.dim(2);
    const Index plane = H * W;
    GridU16 out;
    out.height = H;
    out.width = W;
    out.v.resize(static_cast<size_t>(plane));
    std::vector<std::array<double, 3>> colors;
    for (Index c = 0; c < num_classes_; ++c) colors.push_back(synthetic_class_color(c, num_classes_));
    for (Index y = 0; y < H; ++y)
        for (Index x = 0; x < W; ++x) {
            double best = 1e18;
            Index arg = 0;
            for (Index c = 0; c < num_classes_; ++c) {
                double d = 0;
                for (Index ch = 0; ch < 3; ++ch) {
                    double diff = static_cast<double>(image_chw[ch * plane + y * W + x]) -
                                  colors[static_cast<size_t>(c)][static_cast<size_t>(ch)];
                    d += diff * diff;
                }
                if (d < best) {
                    best = d;
                    arg = c;
                }
            }
            out.at(y, x) = static_cast<std::uint16_t>(arg);
        }
    return out;
}

}  // namespace simsyn
