#pragma once

#include <optional>
#include <string>
#include <vector>

#include "simsyn/core/rng.hpp"
#include "simsyn/core/tensor.hpp"
#include "simsyn/data/image_io.hpp"

namespace simsyn {

struct DatasetRecord {
    std::string id;
    std::string image_path;
    std::string label_path;
    std::string instance_path;  // empty when unavailable
    std::vector<int> class_set;
};

struct DatasetIndex {
    std::string root;
    Index num_classes = 0;
    std::vector<DatasetRecord> records;
    std::vector<double> class_frequencies;  // f_c, 0 for classes never present
    std::vector<double> sampling_weights;   // normalized, balanced rule

    size_t size() const { return records.size(); }
};

// f_c = (#images containing c) / (#images). Empty dataset rejected.
std::vector<double> compute_class_frequencies(const std::vector<std::vector<int>>& class_sets,
                                              Index num_classes);

// weight_i proportional to f_k^{-1/2} with k the sparsest class present in
// image i (classes with f=0 are dropped from consideration). Normalized.
std::vector<double> compute_sampling_weights(const std::vector<std::vector<int>>& class_sets,
                                             const std::vector<double>& frequencies);

// i.i.d. categorical draws, deterministic given the rng state.
std::vector<Index> sample_batch(const std::vector<double>& weights, Index batch_size, Rng& rng);

// Manifest: one line per record, "<id>\t<c0,c1,...>".
void write_manifest(const std::string& path, const std::vector<DatasetRecord>& records);
std::vector<std::pair<std::string, std::vector<int>>> read_manifest(const std::string& path);

// Scans <root>/{images,labels,instances}, computes/reads the manifest, and
// derives frequencies plus balanced sampling weights.
DatasetIndex load_dataset(const std::string& root, bool require_instances = false);

// Fully materialized training sample.
struct Sample {
    Tensor<float> image;    // (3,H,W) in [0,1]
    Tensor<float> one_hot;  // (C,H,W)
    Tensor<float> offsets;  // (2,H,W), zero-size if instances unavailable
};

class SampleLoader {
public:
    SampleLoader(const DatasetIndex& index, bool use_offsets, bool cache = true);
    Sample get(Index i) const;
    const DatasetIndex& index() const { return index_; }

private:
    const DatasetIndex& index_;
    bool use_offsets_;
    bool cache_;
    mutable std::vector<std::optional<Sample>> cache_store_;
};

}  // namespace simsyn
