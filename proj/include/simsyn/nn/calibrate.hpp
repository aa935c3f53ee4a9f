#pragma once

#include "simsyn/nn/layers.hpp"

namespace simsyn {

// Deterministic structured probe: scene-like images (varied background
// luminance, rectangles and ellipses, a light texture-noise floor) in the
// preprocessed [-1,1] domain. White noise is useless for calibrating deep
// levels because every sample looks statistically identical after a few
// downsamplings; edge-free probes under-excite edge-selective channels.
template <typename S>
Tensor<S> calibration_probe(std::uint64_t seed, Index batch = 24, Index size = 64) {
    Rng sr(seed);
    Tensor<S> scenes = Tensor<S>::zeros({batch, 3, size, size});
    const Index plane = size * size;
    for (Index n = 0; n < batch; ++n) {
        // mix dark and bright backgrounds
        double base_l = (n % 3 == 0) ? sr.uniform(-0.9, -0.4) : sr.uniform(-0.5, 0.9);
        for (Index c = 0; c < 3; ++c)
            scenes.mat_at((n * 3 + c) * plane, 1, plane).array() =
                static_cast<S>(base_l + sr.uniform(-0.1, 0.1));
        int shapes = 3 + static_cast<int>(sr.uniform_int(3));
        for (int k = 0; k < shapes; ++k) {
            bool ellipse = sr.uniform() < 0.5;
            double cy = sr.uniform(0.1, 0.9) * static_cast<double>(size);
            double cx = sr.uniform(0.1, 0.9) * static_cast<double>(size);
            double hy = sr.uniform(0.06, 0.22) * static_cast<double>(size);
            double hx = sr.uniform(0.06, 0.22) * static_cast<double>(size);
            S col[3];
            for (int c = 0; c < 3; ++c) col[c] = static_cast<S>(sr.uniform(-1.0, 1.0));
            for (Index yy = 0; yy < size; ++yy)
                for (Index xx = 0; xx < size; ++xx) {
                    double dy = (static_cast<double>(yy) - cy) / hy;
                    double dx = (static_cast<double>(xx) - cx) / hx;
                    bool inside = ellipse ? (dy * dy + dx * dx <= 1.0)
                                          : (std::abs(dy) <= 1.0 && std::abs(dx) <= 1.0);
                    if (inside)
                        for (Index c = 0; c < 3; ++c)
                            scenes[(n * 3 + c) * plane + yy * size + xx] = col[c];
                }
        }
        // texture-noise floor, comparable to desk texture amplitude
        for (Index i = 0; i < 3 * plane; ++i)
            scenes[n * 3 * plane + i] += static_cast<S>(sr.uniform(-0.08, 0.08));
    }
    return scenes;
}

// Channel-wise statistics over (batch, spatial) of an NCHW tensor.
template <typename S>
void channel_stats(const Tensor<S>& t, Index c, double* mean, double* sd) {
    Index B = t.dim(0), C = t.dim(1), plane = t.dim(2) * t.dim(3);
    double s = 0, s2 = 0;
    for (Index n = 0; n < B; ++n) {
        auto p = t.mat_at(((n * C + c) * plane), 1, plane);
        s += p.template cast<double>().sum();
        s2 += p.template cast<double>().array().square().sum();
    }
    double n = static_cast<double>(B * plane);
    *mean = s / n;
    *sd = std::sqrt(std::max(1e-12, s2 / n - (*mean) * (*mean)));
}

// Layer-sequential calibration of a frozen conv+GELU pyramid: per channel,
// center/scale the pre-activation, then set the emitted (post-GELU) standard
// deviation to `target` so no channel collapses into a normalizer's epsilon
// guard downstream, even on data with fewer edges than the probe.
template <typename S>
void calibrate_frozen_pyramid(std::vector<std::unique_ptr<Conv2d<S>>>& convs,
                              Tensor<S> probe, double target = 2.5) {
    NoGradGuard ng;
    Var<S> x = Var<S>::constant(std::move(probe));
    for (auto& conv : convs) {
        Tensor<S> z = conv->forward(x).val();
        Index C = z.dim(1);
        const Index wblk = conv->weight().val().numel() / C;
        auto scale_channel = [&](Index c, S gain, S shift) {
            conv->weight().val_mut().mat_at(c * wblk, 1, wblk).array() *= gain;
            conv->bias().val_mut()[c] = conv->bias().val()[c] * gain + shift;
            Index B = z.dim(0), plane = z.dim(2) * z.dim(3);
            for (Index n = 0; n < B; ++n) {
                auto blk = z.mat_at((n * C + c) * plane, 1, plane);
                blk.array() = blk.array() * gain + shift;
            }
        };
        for (Index c = 0; c < C; ++c) {
            double m, sd;
            channel_stats(z, c, &m, &sd);
            scale_channel(c, static_cast<S>(1.0 / sd), static_cast<S>(-m / sd));
        }
        // Fixed-point passes on the emitted statistic.
        for (int it = 0; it < 3; ++it) {
            Tensor<S> g(z.shape());
            g.array() = z.array() * S(0.5) *
                        (S(1) + (z.array() * S(0.7071067811865475)).erf());
            for (Index c = 0; c < C; ++c) {
                double m, sd;
                channel_stats(g, c, &m, &sd);
                scale_channel(c, static_cast<S>(target / sd), S(0));
            }
        }
        Tensor<S> out(z.shape());
        out.array() = z.array() * S(0.5) * (S(1) + (z.array() * S(0.7071067811865475)).erf());
        x = Var<S>::constant(out);
    }
}

}  // namespace simsyn
