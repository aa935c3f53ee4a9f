#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "simsyn/core/tensor.hpp"

namespace simsyn {

// 8-bit RGB image, row-major HWC.
struct ImageU8 {
    Index height = 0, width = 0;
    std::vector<std::uint8_t> rgb;  // 3 * height * width

    std::uint8_t* px(Index y, Index x) { return rgb.data() + 3 * (y * width + x); }
    const std::uint8_t* px(Index y, Index x) const { return rgb.data() + 3 * (y * width + x); }
};

// Integer grid (labels or instance ids), row-major.
struct GridU16 {
    Index height = 0, width = 0;
    std::vector<std::uint16_t> v;

    std::uint16_t& at(Index y, Index x) { return v[static_cast<size_t>(y * width + x)]; }
    std::uint16_t at(Index y, Index x) const { return v[static_cast<size_t>(y * width + x)]; }
};

struct Palette {
    std::vector<std::uint8_t> rgb;  // 3 bytes per entry
    Index size() const { return static_cast<Index>(rgb.size() / 3); }
};

// PNG-backed storage: RGB8 for images, 8-bit palette for label maps (palette
// carries the class colors), 16-bit grayscale for instance ids. All lossless.
void write_rgb_png(const std::string& path, const ImageU8& img);
ImageU8 read_rgb_png(const std::string& path);

void write_palette_png(const std::string& path, const GridU16& grid, const Palette& palette);
GridU16 read_palette_png(const std::string& path, Palette* palette_out = nullptr);

void write_gray16_png(const std::string& path, const GridU16& grid);
GridU16 read_gray16_png(const std::string& path);

// Tensor conversions; image tensors are CHW in [0,1].
Tensor<float> image_to_tensor(const ImageU8& img);
ImageU8 tensor_to_image(const Tensor<float>& chw);  // clamps to [0,1]

}  // namespace simsyn
