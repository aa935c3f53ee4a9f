#include "simsyn/data/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cstdio>
#include <memory>

#include "simsyn/core/errors.hpp"

namespace simsyn {

namespace {

struct FileCloser {
    void operator()(FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<FILE, FileCloser>;

FilePtr open_file(const std::string& path, const char* mode) {
    FilePtr f(std::fopen(path.c_str(), mode));
    if (!f) throw DataError("cannot open '" + path + "'");
    return f;
}

struct PngWriter {
    png_structp png = nullptr;
    png_infop info = nullptr;
    PngWriter() {
        png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
        if (png) info = png_create_info_struct(png);
        if (!png || !info) throw DataError("libpng: writer allocation failed");
    }
    ~PngWriter() { png_destroy_write_struct(&png, &info); }
};

struct PngReader {
    png_structp png = nullptr;
    png_infop info = nullptr;
    PngReader() {
        png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
        if (png) info = png_create_info_struct(png);
        if (!png || !info) throw DataError("libpng: reader allocation failed");
    }
    ~PngReader() { png_destroy_read_struct(&png, &info, nullptr); }
};

}  // namespace

void write_rgb_png(const std::string& path, const ImageU8& img) {
    auto f = open_file(path, "wb");
    PngWriter w;
    if (setjmp(png_jmpbuf(w.png))) throw DataError("libpng: failed writing '" + path + "'");
    png_init_io(w.png, f.get());
    png_set_IHDR(w.png, w.info, static_cast<png_uint_32>(img.width),
                 static_cast<png_uint_32>(img.height), 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(w.png, w.info);
    std::vector<png_bytep> rows(static_cast<size_t>(img.height));
    for (Index y = 0; y < img.height; ++y)
        rows[static_cast<size_t>(y)] = const_cast<png_bytep>(img.rgb.data() + 3 * y * img.width);
    png_write_image(w.png, rows.data());
    png_write_end(w.png, nullptr);
}

ImageU8 read_rgb_png(const std::string& path) {
    auto f = open_file(path, "rb");
    PngReader r;
    if (setjmp(png_jmpbuf(r.png))) throw DataError("libpng: failed reading '" + path + "'");
    png_init_io(r.png, f.get());
    png_read_info(r.png, r.info);
    png_set_expand(r.png);
    png_set_strip_16(r.png);
    png_set_strip_alpha(r.png);
    if (png_get_color_type(r.png, r.info) == PNG_COLOR_TYPE_GRAY ||
        png_get_color_type(r.png, r.info) == PNG_COLOR_TYPE_GRAY_ALPHA)
        png_set_gray_to_rgb(r.png);
    png_read_update_info(r.png, r.info);
    ImageU8 img;
    img.width = png_get_image_width(r.png, r.info);
    img.height = png_get_image_height(r.png, r.info);
    if (png_get_rowbytes(r.png, r.info) != static_cast<size_t>(3 * img.width))
        throw DataError("'" + path + "': unexpected row size for RGB image");
    img.rgb.resize(static_cast<size_t>(3 * img.width * img.height));
    std::vector<png_bytep> rows(static_cast<size_t>(img.height));
    for (Index y = 0; y < img.height; ++y)
        rows[static_cast<size_t>(y)] = img.rgb.data() + 3 * y * img.width;
    png_read_image(r.png, rows.data());
    png_read_end(r.png, nullptr);
    return img;
}

void write_palette_png(const std::string& path, const GridU16& grid, const Palette& palette) {
    if (palette.size() < 1 || palette.size() > 256)
        throw DataError("palette PNG needs 1..256 entries");
    for (auto v : grid.v)
        if (v >= palette.size())
            throw DataError("label value " + std::to_string(v) + " outside palette");
    auto f = open_file(path, "wb");
    PngWriter w;
    if (setjmp(png_jmpbuf(w.png))) throw DataError("libpng: failed writing '" + path + "'");
    png_init_io(w.png, f.get());
    png_set_IHDR(w.png, w.info, static_cast<png_uint_32>(grid.width),
                 static_cast<png_uint_32>(grid.height), 8, PNG_COLOR_TYPE_PALETTE,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    std::vector<png_color> plte(static_cast<size_t>(palette.size()));
    for (Index i = 0; i < palette.size(); ++i) {
        plte[static_cast<size_t>(i)].red = palette.rgb[static_cast<size_t>(3 * i)];
        plte[static_cast<size_t>(i)].green = palette.rgb[static_cast<size_t>(3 * i + 1)];
        plte[static_cast<size_t>(i)].blue = palette.rgb[static_cast<size_t>(3 * i + 2)];
    }
    png_set_PLTE(w.png, w.info, plte.data(), static_cast<int>(plte.size()));
    png_write_info(w.png, w.info);
    std::vector<std::uint8_t> row(static_cast<size_t>(grid.width));
    for (Index y = 0; y < grid.height; ++y) {
        for (Index x = 0; x < grid.width; ++x)
            row[static_cast<size_t>(x)] = static_cast<std::uint8_t>(grid.at(y, x));
        png_write_row(w.png, row.data());
    }
    png_write_end(w.png, nullptr);
}

GridU16 read_palette_png(const std::string& path, Palette* palette_out) {
    auto f = open_file(path, "rb");
    PngReader r;
    if (setjmp(png_jmpbuf(r.png))) throw DataError("libpng: failed reading '" + path + "'");
    png_init_io(r.png, f.get());
    png_read_info(r.png, r.info);
    if (png_get_color_type(r.png, r.info) != PNG_COLOR_TYPE_PALETTE)
        throw DataError("'" + path + "': expected a palette PNG label map");
    if (png_get_bit_depth(r.png, r.info) < 8) png_set_packing(r.png);
    png_read_update_info(r.png, r.info);
    GridU16 grid;
    grid.width = png_get_image_width(r.png, r.info);
    grid.height = png_get_image_height(r.png, r.info);
    grid.v.resize(static_cast<size_t>(grid.width * grid.height));
    std::vector<std::uint8_t> row(static_cast<size_t>(grid.width));
    for (Index y = 0; y < grid.height; ++y) {
        png_read_row(r.png, row.data(), nullptr);
        for (Index x = 0; x < grid.width; ++x) grid.at(y, x) = row[static_cast<size_t>(x)];
    }
    if (palette_out) {
        png_colorp plte = nullptr;
        int n = 0;
        png_get_PLTE(r.png, r.info, &plte, &n);
        palette_out->rgb.clear();
        for (int i = 0; i < n; ++i) {
            palette_out->rgb.push_back(plte[i].red);
            palette_out->rgb.push_back(plte[i].green);
            palette_out->rgb.push_back(plte[i].blue);
        }
    }
    png_read_end(r.png, nullptr);
    return grid;
}

void write_gray16_png(const std::string& path, const GridU16& grid) {
    auto f = open_file(path, "wb");
    PngWriter w;
    if (setjmp(png_jmpbuf(w.png))) throw DataError("libpng: failed writing '" + path + "'");
    png_init_io(w.png, f.get());
    png_set_IHDR(w.png, w.info, static_cast<png_uint_32>(grid.width),
                 static_cast<png_uint_32>(grid.height), 16, PNG_COLOR_TYPE_GRAY,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(w.png, w.info);
    std::vector<std::uint8_t> row(static_cast<size_t>(2 * grid.width));
    for (Index y = 0; y < grid.height; ++y) {
        for (Index x = 0; x < grid.width; ++x) {
            std::uint16_t v = grid.at(y, x);
            row[static_cast<size_t>(2 * x)] = static_cast<std::uint8_t>(v >> 8);
            row[static_cast<size_t>(2 * x + 1)] = static_cast<std::uint8_t>(v & 0xff);
        }
        png_write_row(w.png, row.data());
    }
    png_write_end(w.png, nullptr);
}

GridU16 read_gray16_png(const std::string& path) {
    auto f = open_file(path, "rb");
    PngReader r;
    if (setjmp(png_jmpbuf(r.png))) throw DataError("libpng: failed reading '" + path + "'");
    png_init_io(r.png, f.get());
    png_read_info(r.png, r.info);
    if (png_get_color_type(r.png, r.info) != PNG_COLOR_TYPE_GRAY ||
        png_get_bit_depth(r.png, r.info) != 16)
        throw DataError("'" + path + "': expected 16-bit grayscale instance map");
    png_read_update_info(r.png, r.info);
    GridU16 grid;
    grid.width = png_get_image_width(r.png, r.info);
    grid.height = png_get_image_height(r.png, r.info);
    grid.v.resize(static_cast<size_t>(grid.width * grid.height));
    std::vector<std::uint8_t> row(static_cast<size_t>(2 * grid.width));
    for (Index y = 0; y < grid.height; ++y) {
        png_read_row(r.png, row.data(), nullptr);
        for (Index x = 0; x < grid.width; ++x)
            grid.at(y, x) = static_cast<std::uint16_t>(
                (static_cast<std::uint16_t>(row[static_cast<size_t>(2 * x)]) << 8) |
                row[static_cast<size_t>(2 * x + 1)]);
    }
    png_read_end(r.png, nullptr);
    return grid;
}

Tensor<float> image_to_tensor(const ImageU8& img) {
    Tensor<float> t({3, img.height, img.width});
    const Index plane = img.height * img.width;
    for (Index y = 0; y < img.height; ++y)
        for (Index x = 0; x < img.width; ++x) {
            const std::uint8_t* p = img.px(y, x);
            for (Index c = 0; c < 3; ++c)
                t[c * plane + y * img.width + x] = static_cast<float>(p[c]) / 255.0f;
        }
    return t;
}

ImageU8 tensor_to_image(const Tensor<float>& chw) {
    if (chw.ndim() != 3 || chw.dim(0) != 3)
        throw std::invalid_argument("tensor_to_image: need (3,H,W), got " + shape_str(chw.shape()));
    ImageU8 img;
    img.height = chw.dim(1);
    img.width = chw.dim(2);
    img.rgb.resize(static_cast<size_t>(3 * img.height * img.width));
    const Index plane = img.height * img.width;
    for (Index y = 0; y < img.height; ++y)
        for (Index x = 0; x < img.width; ++x) {
            std::uint8_t* p = img.px(y, x);
            for (Index c = 0; c < 3; ++c) {
                float v = std::clamp(chw[c * plane + y * img.width + x], 0.0f, 1.0f);
                p[c] = static_cast<std::uint8_t>(std::lround(v * 255.0f));
            }
        }
    return img;
}

}  // namespace simsyn
