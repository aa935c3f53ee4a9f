#pragma once

#include <array>
#include <cmath>
#include <map>

#include "simsyn/core/errors.hpp"
#include "simsyn/core/tensor.hpp"
#include "simsyn/data/image_io.hpp"

namespace simsyn {

// One-hot encode an HxW class grid to (C,H,W). Rejects out-of-range ids with
// the offending pixel coordinate.
template <typename S = float>
Tensor<S> encode_label_map(const GridU16& classes, Index num_classes) {
    Tensor<S> out = Tensor<S>::zeros({num_classes, classes.height, classes.width});
    const Index plane = classes.height * classes.width;
    for (Index y = 0; y < classes.height; ++y)
        for (Index x = 0; x < classes.width; ++x) {
            Index c = classes.at(y, x);
            if (c >= num_classes)
                throw DataError("label id " + std::to_string(c) + " out of range [0," +
                                std::to_string(num_classes) + ") at pixel (" + std::to_string(y) +
                                "," + std::to_string(x) + ")");
            out[c * plane + y * classes.width + x] = S(1);
        }
    return out;
}

template <typename S>
GridU16 decode_label_map(const Tensor<S>& one_hot) {
    if (one_hot.ndim() != 3) throw std::invalid_argument("decode: need (C,H,W)");
    Index C = one_hot.dim(0), H = one_hot.dim(1), W = one_hot.dim(2);
    const Index plane = H * W;
    GridU16 g;
    g.height = H;
    g.width = W;
    g.v.resize(static_cast<size_t>(plane));
    for (Index y = 0; y < H; ++y)
        for (Index x = 0; x < W; ++x) {
            Index best = 0;
            S bv = one_hot[y * W + x];
            for (Index c = 1; c < C; ++c) {
                S v = one_hot[c * plane + y * W + x];
                if (v > bv) {
                    bv = v;
                    best = c;
                }
            }
            g.at(y, x) = static_cast<std::uint16_t>(best);
        }
    return g;
}

// Per-pixel (vertical, horizontal) displacement to the containing instance's
// center of mass, normalized by max(H, W). Background pixels get zero.
template <typename S = float>
Tensor<S> compute_instance_offsets(const GridU16& instances, std::uint16_t background_id) {
    Index H = instances.height, W = instances.width;
    const Index plane = H * W;
    Tensor<S> out = Tensor<S>::zeros({2, H, W});

    // Center of mass per instance id.
    std::map<std::uint16_t, std::array<double, 3>> acc;  // id -> (sum_y, sum_x, count)
    for (Index y = 0; y < H; ++y)
        for (Index x = 0; x < W; ++x) {
            std::uint16_t id = instances.at(y, x);
            if (id == background_id) continue;
            auto& a = acc[id];
            a[0] += static_cast<double>(y);
            a[1] += static_cast<double>(x);
            a[2] += 1.0;
        }
    const double norm = static_cast<double>(std::max(H, W));
    for (Index y = 0; y < H; ++y)
        for (Index x = 0; x < W; ++x) {
            std::uint16_t id = instances.at(y, x);
            if (id == background_id) continue;
            const auto& a = acc[id];
            double cy = a[0] / a[2], cx = a[1] / a[2];
            out[0 * plane + y * W + x] = static_cast<S>((cy - static_cast<double>(y)) / norm);
            out[1 * plane + y * W + x] = static_cast<S>((cx - static_cast<double>(x)) / norm);
        }
    return out;
}

}  // namespace simsyn
