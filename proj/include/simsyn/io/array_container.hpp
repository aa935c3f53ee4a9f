#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

// vendored single-header nlohmann/json
#include <json.hpp>

#include "simsyn/core/tensor.hpp"

namespace simsyn {

// Versioned container of named dense arrays plus a JSON metadata block.
// Used for checkpoints, cached offset maps, backbone weight files and
// evaluation feature dumps. Binary little-endian, deterministic layout.
class ArrayContainer {
public:
    enum class DType : std::uint8_t { F32 = 0, F64 = 1, I64 = 2 };

    struct Entry {
        DType dtype;
        Shape shape;
        std::vector<std::uint8_t> raw;
    };

    nlohmann::json meta = nlohmann::json::object();

    void put_f32(const std::string& name, const Tensor<float>& t);
    void put_f64(const std::string& name, const Tensor<double>& t);
    void put_i64(const std::string& name, const std::vector<std::int64_t>& v);

    Tensor<float> get_f32(const std::string& name) const;
    Tensor<double> get_f64(const std::string& name) const;
    std::vector<std::int64_t> get_i64(const std::string& name) const;

    // Scalar-type dispatch used by templated checkpoint code.
    template <typename S>
    void put_f32_or_f64(const std::string& name, const Tensor<S>& t) {
        if constexpr (std::is_same_v<S, float>) put_f32(name, t);
        else put_f64(name, t);
    }
    template <typename S>
    Tensor<S> get_scalar_tensor(const std::string& name) const {
        if constexpr (std::is_same_v<S, float>) return get_f32(name);
        else return get_f64(name);
    }

    bool has(const std::string& name) const { return entries_.count(name) > 0; }
    std::vector<std::string> names() const;
    size_t size() const { return entries_.size(); }

    void save(const std::string& path) const;
    static ArrayContainer load(const std::string& path);

private:
    const Entry& fetch(const std::string& name, DType want) const;
    std::map<std::string, Entry> entries_;  // ordered for deterministic output
};

}  // namespace simsyn
