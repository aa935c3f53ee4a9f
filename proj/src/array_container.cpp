#include "simsyn/io/array_container.hpp"

#include <cstring>
#include <fstream>

#include "simsyn/core/errors.hpp"

namespace simsyn {

namespace {

constexpr char kMagic[4] = {'S', 'S', 'A', 'R'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void put_raw(std::ostream& os, const T& v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get_raw(std::istream& is, const std::string& path) {
    T v;
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw DataError("'" + path + "': truncated array container");
    return v;
}

size_t dtype_size(ArrayContainer::DType d) {
    switch (d) {
        case ArrayContainer::DType::F32: return 4;
        case ArrayContainer::DType::F64: return 8;
        case ArrayContainer::DType::I64: return 8;
    }
    return 0;
}

}  // namespace

void ArrayContainer::put_f32(const std::string& name, const Tensor<float>& t) {
    Entry e;
    e.dtype = DType::F32;
    e.shape = t.shape();
    e.raw.resize(static_cast<size_t>(t.numel()) * 4);
    std::memcpy(e.raw.data(), t.data(), e.raw.size());
    entries_[name] = std::move(e);
}

void ArrayContainer::put_f64(const std::string& name, const Tensor<double>& t) {
    Entry e;
    e.dtype = DType::F64;
    e.shape = t.shape();
    e.raw.resize(static_cast<size_t>(t.numel()) * 8);
    std::memcpy(e.raw.data(), t.data(), e.raw.size());
    entries_[name] = std::move(e);
}

void ArrayContainer::put_i64(const std::string& name, const std::vector<std::int64_t>& v) {
    Entry e;
    e.dtype = DType::I64;
    e.shape = {static_cast<Index>(v.size())};
    e.raw.resize(v.size() * 8);
    std::memcpy(e.raw.data(), v.data(), e.raw.size());
    entries_[name] = std::move(e);
}

const ArrayContainer::Entry& ArrayContainer::fetch(const std::string& name, DType want) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw DataError("array container: missing entry '" + name + "'");
    if (it->second.dtype != want)
        throw DataError("array container: entry '" + name + "' has a different dtype");
    return it->second;
}

Tensor<float> ArrayContainer::get_f32(const std::string& name) const {
    const Entry& e = fetch(name, DType::F32);
    Tensor<float> t(e.shape);
    std::memcpy(t.data(), e.raw.data(), e.raw.size());
    return t;
}

Tensor<double> ArrayContainer::get_f64(const std::string& name) const {
    const Entry& e = fetch(name, DType::F64);
    Tensor<double> t(e.shape);
    std::memcpy(t.data(), e.raw.data(), e.raw.size());
    return t;
}

std::vector<std::int64_t> ArrayContainer::get_i64(const std::string& name) const {
    const Entry& e = fetch(name, DType::I64);
    std::vector<std::int64_t> v(e.raw.size() / 8);
    std::memcpy(v.data(), e.raw.data(), e.raw.size());
    return v;
}

std::vector<std::string> ArrayContainer::names() const {
    std::vector<std::string> out;
    for (const auto& [n, e] : entries_) out.push_back(n);
    return out;
}

void ArrayContainer::save(const std::string& path) const {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw DataError("cannot write '" + path + "'");
    os.write(kMagic, 4);
    put_raw(os, kVersion);
    const std::string meta_s = meta.dump();
    put_raw(os, static_cast<std::uint64_t>(meta_s.size()));
    os.write(meta_s.data(), static_cast<std::streamsize>(meta_s.size()));
    put_raw(os, static_cast<std::uint64_t>(entries_.size()));
    for (const auto& [name, e] : entries_) {
        put_raw(os, static_cast<std::uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        put_raw(os, static_cast<std::uint8_t>(e.dtype));
        put_raw(os, static_cast<std::uint32_t>(e.shape.size()));
        for (Index d : e.shape) put_raw(os, static_cast<std::uint64_t>(d));
        put_raw(os, static_cast<std::uint64_t>(e.raw.size()));
        os.write(reinterpret_cast<const char*>(e.raw.data()),
                 static_cast<std::streamsize>(e.raw.size()));
    }
    if (!os) throw DataError("failed writing '" + path + "'");
}

ArrayContainer ArrayContainer::load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open '" + path + "'");
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kMagic, 4) != 0)
        throw DataError("'" + path + "': not an array container");
    auto version = get_raw<std::uint32_t>(is, path);
    if (version != kVersion)
        throw DataError("'" + path + "': unsupported container version " + std::to_string(version));
    ArrayContainer c;
    auto meta_len = get_raw<std::uint64_t>(is, path);
    std::string meta_s(meta_len, '\0');
    is.read(meta_s.data(), static_cast<std::streamsize>(meta_len));
    if (!is) throw DataError("'" + path + "': truncated metadata");
    c.meta = nlohmann::json::parse(meta_s, nullptr, false);
    if (c.meta.is_discarded()) throw DataError("'" + path + "': corrupt metadata block");
    auto count = get_raw<std::uint64_t>(is, path);
    for (std::uint64_t i = 0; i < count; ++i) {
        auto name_len = get_raw<std::uint32_t>(is, path);
        std::string name(name_len, '\0');
        is.read(name.data(), name_len);
        Entry e;
        e.dtype = static_cast<DType>(get_raw<std::uint8_t>(is, path));
        if (dtype_size(e.dtype) == 0) throw DataError("'" + path + "': unknown dtype");
        auto ndim = get_raw<std::uint32_t>(is, path);
        Index numel = 1;
        for (std::uint32_t d = 0; d < ndim; ++d) {
            auto dim = get_raw<std::uint64_t>(is, path);
            e.shape.push_back(static_cast<Index>(dim));
            numel *= static_cast<Index>(dim);
        }
        auto byte_len = get_raw<std::uint64_t>(is, path);
        if (byte_len != static_cast<std::uint64_t>(numel) * dtype_size(e.dtype))
            throw DataError("'" + path + "': entry '" + name + "' has inconsistent size");
        e.raw.resize(byte_len);
        is.read(reinterpret_cast<char*>(e.raw.data()), static_cast<std::streamsize>(byte_len));
        if (!is) throw DataError("'" + path + "': truncated array data in '" + name + "'");
        c.entries_[name] = std::move(e);
    }
    return c;
}

}  // namespace simsyn
