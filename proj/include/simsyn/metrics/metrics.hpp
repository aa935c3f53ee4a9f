#pragma once

#include <chrono>
#include <functional>
#include <vector>

#include "simsyn/core/errors.hpp"
#include "simsyn/data/image_io.hpp"
#include "simsyn/nn/calibrate.hpp"

namespace simsyn {

// ---------------------------------------------------------------------------
// Frechet distance / FID
// ---------------------------------------------------------------------------

struct FeatureStats {
    Eigen::VectorXd mean;
    Eigen::MatrixXd cov;  // regularized with eps*I at fit time
    Index count = 0;
};

inline FeatureStats fit_feature_stats(const std::vector<Eigen::VectorXd>& feats,
                                      double eps = 1e-6) {
    if (feats.size() < 2) throw std::invalid_argument("feature stats: need at least 2 samples");
    const Index d = feats[0].size();
    FeatureStats s;
    s.count = static_cast<Index>(feats.size());
    s.mean = Eigen::VectorXd::Zero(d);
    for (const auto& f : feats) s.mean += f;
    s.mean /= static_cast<double>(s.count);
    s.cov = Eigen::MatrixXd::Zero(d, d);
    for (const auto& f : feats) {
        Eigen::VectorXd c = f - s.mean;
        s.cov.noalias() += c * c.transpose();
    }
    s.cov /= static_cast<double>(s.count - 1);
    s.cov += eps * Eigen::MatrixXd::Identity(d, d);
    return s;
}

// |mu1-mu2|^2 + Tr(S1 + S2 - 2 (S1 S2)^{1/2}), matrix square root via
// eigendecomposition of the symmetrized product with negative-eigenvalue
// clamping; result clamped at 0.
inline double frechet_distance(const FeatureStats& a, const FeatureStats& b) {
    if (a.mean.size() != b.mean.size())
        throw std::invalid_argument("frechet: dimension mismatch");
    const Index d = a.mean.size();
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> ea(0.5 * (a.cov + a.cov.transpose()));
    if (ea.info() != Eigen::Success) throw NumericError("frechet: eigendecomposition failed");
    double min_eig = ea.eigenvalues().minCoeff();
    if (min_eig < -1e-6)
        throw NumericError("frechet: covariance not PSD after regularization (min eigenvalue " +
                           std::to_string(min_eig) + ")");
    Eigen::VectorXd sq = ea.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    Eigen::MatrixXd root_a = ea.eigenvectors() * sq.asDiagonal() * ea.eigenvectors().transpose();

    Eigen::MatrixXd m = root_a * (0.5 * (b.cov + b.cov.transpose())) * root_a;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> em(0.5 * (m + m.transpose()));
    if (em.info() != Eigen::Success) throw NumericError("frechet: product decomposition failed");
    double tr_sqrt = em.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();

    double d2 = (a.mean - b.mean).squaredNorm() + a.cov.trace() + b.cov.trace() - 2.0 * tr_sqrt;
    return std::max(0.0, d2);
}

// Fixed random-projection conv features for desk-scale FID; frozen seed,
// identity recorded in every report.
template <typename S>
class FidExtractor : public Module<S> {
public:
    explicit FidExtractor(std::uint64_t seed = 727, Index expected_size = 64)
        : seed_(seed), expected_(expected_size) {
        Rng rng(seed);
        std::vector<Index> chs = {24, 48, 64};
        Index in = 3;
        for (size_t i = 0; i < chs.size(); ++i) {
            convs_.push_back(std::make_unique<Conv2d<S>>(in, chs[i], 3, 2, 1, rng, false, true,
                                                         /*trainable=*/false, /*he_init=*/true));
            this->add_child("conv" + std::to_string(i), convs_[i].get());
            in = chs[i];
        }
        calibrate_frozen_pyramid(convs_, calibration_probe<S>(seed ^ 0x99, 16, expected_size));
    }

    // (3,H,W) image in [0,1] -> pooled feature vector.
    Eigen::VectorXd features(const Tensor<S>& image) {
        auto maps = feature_maps(image);
        const Tensor<S>& top = maps.back();
        Index C = top.dim(1), plane = top.dim(2) * top.dim(3);
        Eigen::VectorXd out(C);
        for (Index c = 0; c < C; ++c)
            out[c] = top.mat_at(c * plane, 1, plane).template cast<double>().mean();
        return out;
    }

    // All scale maps (for the multi-scale diversity distance).
    std::vector<Tensor<S>> feature_maps(const Tensor<S>& image) {
        if (image.ndim() != 3 || image.dim(0) != 3 || image.dim(1) != expected_ ||
            image.dim(2) != expected_)
            throw std::invalid_argument("fid extractor: expected a (3," + std::to_string(expected_) +
                                        "," + std::to_string(expected_) + ") image, got " +
                                        shape_str(image.shape()));
        NoGradGuard ng;
        Var<S> h = Var<S>::constant(image.reshaped({1, 3, expected_, expected_}));
        std::vector<Tensor<S>> maps;
        for (auto& c : convs_) {
            h = gelu(c->forward(h));
            maps.push_back(h.val());
        }
        return maps;
    }

    std::string id() const {
        return "rconv" + std::to_string(convs_.back()->out_channels()) + "/seed=" +
               std::to_string(seed_) + "/size=" + std::to_string(expected_);
    }
    Index expected_size() const { return expected_; }

private:
    std::uint64_t seed_;
    Index expected_;
    std::vector<std::unique_ptr<Conv2d<S>>> convs_;
};

template <typename S>
double fid(const std::vector<Tensor<S>>& real, const std::vector<Tensor<S>>& generated,
           FidExtractor<S>& extractor) {
    if (real.size() < 2 || generated.size() < 2)
        throw std::invalid_argument("fid: need at least 2 samples per side");
    std::vector<Eigen::VectorXd> fr, fg;
    for (const auto& img : real) fr.push_back(extractor.features(img));
    for (const auto& img : generated) fg.push_back(extractor.features(img));
    return frechet_distance(fit_feature_stats(fr), fit_feature_stats(fg));
}

// ---------------------------------------------------------------------------
// mIoU
// ---------------------------------------------------------------------------

class ConfusionAccumulator {
public:
    explicit ConfusionAccumulator(Index num_classes)
        : inter_(static_cast<size_t>(num_classes), 0), uni_(static_cast<size_t>(num_classes), 0) {}

    void add(const GridU16& pred, const GridU16& ref) {
        if (pred.height != ref.height || pred.width != ref.width)
            throw std::invalid_argument("miou: prediction/reference size mismatch");
        for (size_t i = 0; i < pred.v.size(); ++i) {
            Index p = pred.v[i], r = ref.v[i];
            if (p >= static_cast<Index>(inter_.size()) || r >= static_cast<Index>(inter_.size()))
                throw std::invalid_argument("miou: label out of range");
            if (p == r) inter_[static_cast<size_t>(p)] += 1;
            if (p == r) {
                uni_[static_cast<size_t>(p)] += 1;
            } else {
                uni_[static_cast<size_t>(p)] += 1;
                uni_[static_cast<size_t>(r)] += 1;
            }
        }
    }

    std::vector<double> per_class() const {
        std::vector<double> out(inter_.size(), -1.0);  // -1 marks empty union
        for (size_t c = 0; c < inter_.size(); ++c)
            if (uni_[c] > 0) out[c] = static_cast<double>(inter_[c]) / static_cast<double>(uni_[c]);
        return out;
    }

    double miou() const {
        double acc = 0;
        int n = 0;
        for (size_t c = 0; c < inter_.size(); ++c)
            if (uni_[c] > 0) {
                acc += static_cast<double>(inter_[c]) / static_cast<double>(uni_[c]);
                ++n;
            }
        if (n == 0) throw std::invalid_argument("miou: no class has nonzero union");
        return acc / n;
    }

private:
    std::vector<std::int64_t> inter_, uni_;
};

inline double miou(const std::vector<GridU16>& pred, const std::vector<GridU16>& ref,
                   Index num_classes, std::vector<double>* per_class = nullptr) {
    if (pred.size() != ref.size()) throw std::invalid_argument("miou: set size mismatch");
    ConfusionAccumulator acc(num_classes);
    for (size_t i = 0; i < pred.size(); ++i) acc.add(pred[i], ref[i]);
    if (per_class) *per_class = acc.per_class();
    return acc.miou();
}

// ---------------------------------------------------------------------------
// Diversity score and timing
// ---------------------------------------------------------------------------

// Multi-scale feature L2 distance under the FID extractor (the desk-scale
// stand-in for a perceptual distance).
template <typename S>
double feature_distance(FidExtractor<S>& ex, const Tensor<S>& a, const Tensor<S>& b) {
    auto ma = ex.feature_maps(a);
    auto mb = ex.feature_maps(b);
    double acc = 0;
    for (size_t s = 0; s < ma.size(); ++s) {
        double d2 = (ma[s].array() - mb[s].array()).template cast<double>().square().sum();
        acc += std::sqrt(d2 / static_cast<double>(ma[s].numel()));
    }
    return acc / static_cast<double>(ma.size());
}

// Mean pairwise distance across samples per label map, averaged over maps.
template <typename S>
double diversity_score(const std::vector<std::vector<Tensor<S>>>& samples_per_map,
                       const std::function<double(const Tensor<S>&, const Tensor<S>&)>& dist) {
    if (samples_per_map.empty()) throw std::invalid_argument("diversity: no label maps");
    double total = 0;
    for (const auto& samples : samples_per_map) {
        if (samples.size() < 2)
            throw std::invalid_argument("diversity: need at least 2 samples per map");
        double acc = 0;
        Index pairs = 0;
        for (size_t i = 0; i < samples.size(); ++i)
            for (size_t j = i + 1; j < samples.size(); ++j) {
                acc += dist(samples[i], samples[j]);
                ++pairs;
            }
        total += acc / static_cast<double>(pairs);
    }
    return total / static_cast<double>(samples_per_map.size());
}

struct TimingReport {
    double mean_seconds = 0;
    double std_seconds = 0;
    Index runs = 0;
    std::vector<double> samples;
};

// Wall-clock timing of single-image inference, warmup excluded.
inline TimingReport time_inference(const std::function<void()>& run_once, Index runs = 50,
                                   Index warmup = 3) {
    if (runs < 1) throw std::invalid_argument("timing: need at least one run");
    for (Index i = 0; i < warmup; ++i) run_once();
    TimingReport rep;
    rep.runs = runs;
    for (Index i = 0; i < runs; ++i) {
        auto t0 = std::chrono::steady_clock::now();
        run_once();
        rep.samples.push_back(
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    }
    double s = 0;
    for (double v : rep.samples) s += v;
    rep.mean_seconds = s / static_cast<double>(runs);
    if (runs > 1) {
        double sq = 0;
        for (double v : rep.samples) sq += (v - rep.mean_seconds) * (v - rep.mean_seconds);
        rep.std_seconds = std::sqrt(sq / static_cast<double>(runs - 1));
    }
    return rep;
}

}  // namespace simsyn
