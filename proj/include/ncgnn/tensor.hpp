#pragma once

#include <Eigen/Core>

#include <cassert>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <string>
#include <vector>

#include "ncgnn/error.hpp"

namespace ncgnn {

// Dense row-major tensor of doubles. Rank is dynamic; the last dimension is
// always contiguous. This is the value type flowing through the autodiff
// tape and all dense kernels.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<std::size_t> shape)
        : shape_(std::move(shape)), data_(count(shape_), 0.0) {}

    Tensor(std::vector<std::size_t> shape, std::vector<double> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        if (data_.size() != count(shape_))
            throw DimensionError("Tensor: data size does not match shape");
    }

    static Tensor zeros(std::vector<std::size_t> shape) { return Tensor(std::move(shape)); }

    static Tensor full(std::vector<std::size_t> shape, double v) {
        Tensor t(std::move(shape));
        std::fill(t.data_.begin(), t.data_.end(), v);
        return t;
    }

    static Tensor scalar(double v) { return Tensor({1}, {v}); }

    std::size_t rank() const { return shape_.size(); }
    std::size_t numel() const { return data_.size(); }
    const std::vector<std::size_t>& shape() const { return shape_; }

    std::size_t dim(std::size_t i) const {
        assert(i < shape_.size());
        return shape_[i];
    }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::vector<double>& raw() { return data_; }
    const std::vector<double>& raw() const { return data_; }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    double& at(std::size_t i, std::size_t j) {
        assert(rank() == 2);
        return data_[i * shape_[1] + j];
    }
    double at(std::size_t i, std::size_t j) const {
        assert(rank() == 2);
        return data_[i * shape_[1] + j];
    }
    double& at(std::size_t i, std::size_t j, std::size_t k) {
        assert(rank() == 3);
        return data_[(i * shape_[1] + j) * shape_[2] + k];
    }
    double at(std::size_t i, std::size_t j, std::size_t k) const {
        assert(rank() == 3);
        return data_[(i * shape_[1] + j) * shape_[2] + k];
    }
    double& at(std::size_t i, std::size_t j, std::size_t k, std::size_t l) {
        assert(rank() == 4);
        return data_[((i * shape_[1] + j) * shape_[2] + k) * shape_[3] + l];
    }
    double at(std::size_t i, std::size_t j, std::size_t k, std::size_t l) const {
        assert(rank() == 4);
        return data_[((i * shape_[1] + j) * shape_[2] + k) * shape_[3] + l];
    }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    bool all_finite() const {
        for (double v : data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

    void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

    std::string shape_str() const {
        std::string s = "[";
        for (std::size_t i = 0; i < shape_.size(); ++i) {
            if (i) s += ", ";
            s += std::to_string(shape_[i]);
        }
        return s + "]";
    }

private:
    static std::size_t count(const std::vector<std::size_t>& shape) {
        return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                               [](std::size_t a, std::size_t b) { return a * b; });
    }

    std::vector<std::size_t> shape_;
    std::vector<double> data_;
};

using MatrixRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<MatrixRM>;
using ConstMapRM = Eigen::Map<const MatrixRM>;
using StridedMapRM = Eigen::Map<MatrixRM, Eigen::Unaligned, Eigen::OuterStride<>>;
using ConstStridedMapRM = Eigen::Map<const MatrixRM, Eigen::Unaligned, Eigen::OuterStride<>>;

// View a tensor (or a sub-block) as a rows x cols row-major matrix.
inline MapRM mat_view(Tensor& t, std::size_t rows, std::size_t cols, std::size_t offset = 0) {
    assert(offset + rows * cols <= t.numel());
    return MapRM(t.data() + offset, static_cast<Eigen::Index>(rows),
                 static_cast<Eigen::Index>(cols));
}

inline ConstMapRM mat_view(const Tensor& t, std::size_t rows, std::size_t cols,
                           std::size_t offset = 0) {
    assert(offset + rows * cols <= t.numel());
    return ConstMapRM(t.data() + offset, static_cast<Eigen::Index>(rows),
                      static_cast<Eigen::Index>(cols));
}

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (!a.same_shape(b))
        throw DimensionError(std::string(op) + ": shape mismatch " + a.shape_str() + " vs " +
                             b.shape_str());
}

// Trailing-dimension product starting at axis `from`.
inline std::size_t trailing_numel(const Tensor& t, std::size_t from) {
    std::size_t n = 1;
    for (std::size_t i = from; i < t.rank(); ++i) n *= t.dim(i);
    return n;
}

}  // namespace ncgnn
