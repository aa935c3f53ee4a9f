#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <vector>

namespace simsyn {

using Index = std::int64_t;
using Shape = std::vector<Index>;

inline Index shape_numel(const Shape& s) {
    Index n = 1;
    for (Index d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "(";
    for (size_t i = 0; i < s.size(); ++i) os << s[i] << (i + 1 < s.size() ? "," : "");
    os << ")";
    return os.str();
}

// Dense row-major nd array over a flat Eigen buffer. Layout for images is NCHW.
template <typename S>
class Tensor {
public:
    using ArrayX = Eigen::Array<S, Eigen::Dynamic, 1>;
    using MatrixRM = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    using MapM = Eigen::Map<MatrixRM>;
    using CMapM = Eigen::Map<const MatrixRM>;
    using MapA = Eigen::Map<ArrayX>;
    using CMapA = Eigen::Map<const ArrayX>;

    Tensor() = default;
    explicit Tensor(Shape shape) : shape_(std::move(shape)), data_(shape_numel(shape_)) {}
    Tensor(Shape shape, ArrayX data) : shape_(std::move(shape)), data_(std::move(data)) {
        if (data_.size() != shape_numel(shape_))
            throw std::invalid_argument("tensor: data size does not match shape " + shape_str(shape_));
    }

    static Tensor zeros(Shape shape) {
        Tensor t(std::move(shape));
        t.data_.setZero();
        return t;
    }
    static Tensor full(Shape shape, S v) {
        Tensor t(std::move(shape));
        t.data_.setConstant(v);
        return t;
    }
    static Tensor scalar(S v) { return full({1}, v); }
    static Tensor from(Shape shape, std::initializer_list<S> vals) {
        Tensor t(std::move(shape));
        if (static_cast<Index>(vals.size()) != t.numel())
            throw std::invalid_argument("tensor: initializer size mismatch");
        Index i = 0;
        for (S v : vals) t.data_[i++] = v;
        return t;
    }

    const Shape& shape() const { return shape_; }
    Index dim(int i) const { return shape_.at(static_cast<size_t>(i)); }
    int ndim() const { return static_cast<int>(shape_.size()); }
    Index numel() const { return data_.size(); }
    bool empty() const { return data_.size() == 0; }

    S* data() { return data_.data(); }
    const S* data() const { return data_.data(); }
    ArrayX& array() { return data_; }
    const ArrayX& array() const { return data_; }

    S& operator[](Index i) { return data_[i]; }
    S operator[](Index i) const { return data_[i]; }

    S item() const {
        if (numel() != 1) throw std::invalid_argument("tensor: item() on non-scalar " + shape_str(shape_));
        return data_[0];
    }

    // Flat views. Row-major matrix map of the whole buffer.
    MapM mat(Index rows, Index cols) {
        check_view(rows * cols);
        return MapM(data_.data(), rows, cols);
    }
    CMapM mat(Index rows, Index cols) const {
        check_view(rows * cols);
        return CMapM(data_.data(), rows, cols);
    }
    // Matrix map of a contiguous sub-block starting at flat offset.
    MapM mat_at(Index offset, Index rows, Index cols) {
        if (offset + rows * cols > numel()) throw std::invalid_argument("tensor: block view out of range");
        return MapM(data_.data() + offset, rows, cols);
    }
    CMapM mat_at(Index offset, Index rows, Index cols) const {
        if (offset + rows * cols > numel()) throw std::invalid_argument("tensor: block view out of range");
        return CMapM(data_.data() + offset, rows, cols);
    }

    Tensor reshaped(Shape s) const {
        if (shape_numel(s) != numel())
            throw std::invalid_argument("tensor: reshape " + shape_str(shape_) + " -> " + shape_str(s));
        return Tensor(std::move(s), data_);
    }

    template <typename T>
    Tensor<T> cast() const {
        Tensor<T> out(shape_);
        out.array() = data_.template cast<T>();
        return out;
    }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

private:
    void check_view(Index n) const {
        if (n != numel())
            throw std::invalid_argument("tensor: view size mismatch for " + shape_str(shape_));
    }

    Shape shape_;
    ArrayX data_;
};

// NCHW helpers.
inline Index nchw_offset(const Shape& s, Index n, Index c) {
    // s = {N, C, H, W}; returns flat offset of plane (n, c).
    return ((n * s[1] + c) * s[2]) * s[3];
}

}  // namespace simsyn
