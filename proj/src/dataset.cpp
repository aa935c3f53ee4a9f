#include "simsyn/data/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "simsyn/core/errors.hpp"
#include "simsyn/data/label_map.hpp"
#include "simsyn/io/array_container.hpp"

namespace fs = std::filesystem;

namespace simsyn {

std::vector<double> compute_class_frequencies(const std::vector<std::vector<int>>& class_sets,
                                              Index num_classes) {
    if (class_sets.empty()) throw DataError("class frequencies: empty dataset");
    std::vector<double> f(static_cast<size_t>(num_classes), 0.0);
    for (const auto& cs : class_sets)
        for (int c : cs) {
            if (c < 0 || c >= num_classes)
                throw DataError("class frequencies: class id " + std::to_string(c) + " out of range");
            f[static_cast<size_t>(c)] += 1.0;
        }
    for (auto& v : f) v /= static_cast<double>(class_sets.size());
    return f;
}

std::vector<double> compute_sampling_weights(const std::vector<std::vector<int>>& class_sets,
                                             const std::vector<double>& frequencies) {
    std::vector<double> w(class_sets.size(), 0.0);
    double total = 0.0;
    for (size_t i = 0; i < class_sets.size(); ++i) {
        double fmin = 2.0;
        for (int c : class_sets[i]) {
            double f = frequencies[static_cast<size_t>(c)];
            if (f > 0.0) fmin = std::min(fmin, f);
        }
        if (fmin > 1.0)
            throw DataError("sampling weights: record " + std::to_string(i) +
                            " has no class with positive frequency");
        w[i] = 1.0 / std::sqrt(fmin);
        total += w[i];
    }
    for (auto& v : w) v /= total;
    return w;
}

std::vector<Index> sample_batch(const std::vector<double>& weights, Index batch_size, Rng& rng) {
    if (batch_size < 1) throw std::invalid_argument("sample_batch: batch size must be >= 1");
    if (weights.empty()) throw std::invalid_argument("sample_batch: empty weight vector");
    std::vector<Index> out(static_cast<size_t>(batch_size));
    for (Index b = 0; b < batch_size; ++b) {
        double u = rng.uniform();
        double acc = 0.0;
        Index pick = static_cast<Index>(weights.size()) - 1;
        for (size_t i = 0; i < weights.size(); ++i) {
            acc += weights[i];
            if (u < acc) {
                pick = static_cast<Index>(i);
                break;
            }
        }
        out[static_cast<size_t>(b)] = pick;
    }
    return out;
}

void write_manifest(const std::string& path, const std::vector<DatasetRecord>& records) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw DataError("cannot write manifest '" + path + "'");
    for (const auto& r : records) {
        os << r.id << '\t';
        for (size_t i = 0; i < r.class_set.size(); ++i)
            os << r.class_set[i] << (i + 1 < r.class_set.size() ? "," : "");
        os << '\n';
    }
}

std::vector<std::pair<std::string, std::vector<int>>> read_manifest(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw DataError("cannot read manifest '" + path + "'");
    std::vector<std::pair<std::string, std::vector<int>>> out;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        auto tab = line.find('\t');
        if (tab == std::string::npos) throw DataError("manifest: malformed line '" + line + "'");
        std::vector<int> classes;
        std::stringstream ss(line.substr(tab + 1));
        std::string tok;
        while (std::getline(ss, tok, ','))
            if (!tok.empty()) classes.push_back(std::stoi(tok));
        out.emplace_back(line.substr(0, tab), std::move(classes));
    }
    return out;
}

DatasetIndex load_dataset(const std::string& root, bool require_instances) {
    DatasetIndex idx;
    idx.root = root;
    fs::path images = fs::path(root) / "images";
    fs::path labels = fs::path(root) / "labels";
    fs::path instances = fs::path(root) / "instances";
    if (!fs::is_directory(images) || !fs::is_directory(labels))
        throw DataError("dataset root '" + root + "' must contain images/ and labels/");

    std::vector<std::string> ids;
    for (const auto& e : fs::directory_iterator(images))
        if (e.path().extension() == ".png") ids.push_back(e.path().stem().string());
    std::sort(ids.begin(), ids.end());
    if (ids.empty()) throw DataError("dataset '" + root + "' has no images");

    std::vector<std::string> missing;
    std::map<std::string, std::vector<int>> manifest_classes;
    fs::path manifest = fs::path(root) / "manifest.txt";
    if (fs::exists(manifest))
        for (auto& [id, cs] : read_manifest(manifest.string())) manifest_classes[id] = cs;

    Index max_class = 0;
    for (const auto& id : ids) {
        DatasetRecord r;
        r.id = id;
        r.image_path = (images / (id + ".png")).string();
        fs::path lp = labels / (id + ".png");
        if (!fs::exists(lp)) {
            missing.push_back(id + " (label)");
            continue;
        }
        r.label_path = lp.string();
        fs::path ip = instances / (id + ".png");
        if (fs::exists(ip)) r.instance_path = ip.string();
        else if (require_instances) {
            missing.push_back(id + " (instances)");
            continue;
        }
        auto it = manifest_classes.find(id);
        if (it != manifest_classes.end()) {
            r.class_set = it->second;
        } else {
            GridU16 g = read_palette_png(r.label_path);
            std::set<int> cs(g.v.begin(), g.v.end());
            r.class_set.assign(cs.begin(), cs.end());
        }
        for (int c : r.class_set) max_class = std::max<Index>(max_class, c);
        idx.records.push_back(std::move(r));
    }
    if (!missing.empty()) {
        std::string msg = "dataset '" + root + "' has incomplete pairs:";
        for (const auto& m : missing) msg += " " + m;
        throw DataError(msg);
    }

    idx.num_classes = max_class + 1;
    std::vector<std::vector<int>> sets;
    for (const auto& r : idx.records) sets.push_back(r.class_set);
    idx.class_frequencies = compute_class_frequencies(sets, idx.num_classes);
    idx.sampling_weights = compute_sampling_weights(sets, idx.class_frequencies);
    return idx;
}

SampleLoader::SampleLoader(const DatasetIndex& index, bool use_offsets, bool cache)
    : index_(index), use_offsets_(use_offsets), cache_(cache) {
    if (cache_) cache_store_.resize(index.records.size());
}

Sample SampleLoader::get(Index i) const {
    if (i < 0 || static_cast<size_t>(i) >= index_.records.size())
        throw std::invalid_argument("sample loader: index out of range");
    if (cache_ && cache_store_[static_cast<size_t>(i)])
        return *cache_store_[static_cast<size_t>(i)];
    const DatasetRecord& r = index_.records[static_cast<size_t>(i)];
    Sample s;
    s.image = image_to_tensor(read_rgb_png(r.image_path));
    GridU16 labels = read_palette_png(r.label_path);
    s.one_hot = encode_label_map<float>(labels, index_.num_classes);
    if (use_offsets_) {
        if (r.instance_path.empty())
            throw DataError("record '" + r.id + "' has no instance map but offsets were requested");
        // Prefer the cached offsets written by `prepare`; recompute otherwise.
        fs::path cached = fs::path(index_.root) / "offsets" / (r.id + ".arr");
        if (fs::exists(cached)) {
            s.offsets = ArrayContainer::load(cached.string()).get_f32("offsets");
        } else {
            s.offsets = compute_instance_offsets<float>(read_gray16_png(r.instance_path), 0);
        }
    }
    if (cache_) cache_store_[static_cast<size_t>(i)] = s;
    return s;
}

}  // namespace simsyn
