#pragma once

#include <cstdint>
#include <initializer_list>
#include <string>
#include <vector>

#include "tsvit/errors.hpp"
#include "tsvit/rng.hpp"

namespace tsvit {

// Dense row-major tensor of 64-bit floats. Shapes are immutable after
// construction; all math lives in free functions (kernels.hpp and the
// block modules).
class Tensor {
  public:
    Tensor() = default;

    explicit Tensor(std::vector<int64_t> shape) : shape_(std::move(shape)) {
        data_.assign(static_cast<size_t>(compute_size(shape_)), 0.0);
    }

    Tensor(std::vector<int64_t> shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
        if (compute_size(shape_) != static_cast<int64_t>(data_.size()))
            throw DimensionError("tensor data length does not match shape");
    }

    static Tensor zeros(std::vector<int64_t> shape) { return Tensor(std::move(shape)); }

    static Tensor full(std::vector<int64_t> shape, double value) {
        Tensor t(std::move(shape));
        for (double& x : t.data_) x = value;
        return t;
    }

    static Tensor random_normal(std::vector<int64_t> shape, Rng& rng, double stddev = 1.0) {
        Tensor t(std::move(shape));
        for (double& x : t.data_) x = rng.normal(0.0, stddev);
        return t;
    }

    static Tensor random_uniform(std::vector<int64_t> shape, Rng& rng, double lo, double hi) {
        Tensor t(std::move(shape));
        for (double& x : t.data_) x = rng.uniform(lo, hi);
        return t;
    }

    const std::vector<int64_t>& shape() const { return shape_; }
    int64_t ndim() const { return static_cast<int64_t>(shape_.size()); }
    int64_t extent(int axis) const { return shape_[static_cast<size_t>(axis)]; }
    int64_t size() const { return static_cast<int64_t>(data_.size()); }
    bool empty() const { return data_.empty(); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::vector<double>& values() { return data_; }
    const std::vector<double>& values() const { return data_; }

    double& at(int64_t i) { return data_[static_cast<size_t>(i)]; }
    double at(int64_t i) const { return data_[static_cast<size_t>(i)]; }

    double& at(int64_t i, int64_t j) { return data_[static_cast<size_t>(i * shape_[1] + j)]; }
    double at(int64_t i, int64_t j) const { return data_[static_cast<size_t>(i * shape_[1] + j)]; }

    double& at(int64_t i, int64_t j, int64_t k) {
        return data_[static_cast<size_t>((i * shape_[1] + j) * shape_[2] + k)];
    }
    double at(int64_t i, int64_t j, int64_t k) const {
        return data_[static_cast<size_t>((i * shape_[1] + j) * shape_[2] + k)];
    }

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

    std::string shape_string() const {
        std::string s = "[";
        for (size_t i = 0; i < shape_.size(); ++i) {
            if (i) s += "x";
            s += std::to_string(shape_[i]);
        }
        return s + "]";
    }

    static int64_t compute_size(const std::vector<int64_t>& shape) {
        int64_t n = 1;
        for (int64_t e : shape) {
            if (e < 0) throw DimensionError("negative extent");
            n *= e;
        }
        return n;
    }

  private:
    std::vector<int64_t> shape_;
    std::vector<double> data_;
};

inline void require_shape(const Tensor& t, const std::vector<int64_t>& shape, const char* what) {
    if (t.shape() != shape) throw DimensionError(std::string(what) + ": got " + t.shape_string());
}

// FNV-1a over the raw bytes; used for cheap determinism fingerprints.
inline uint64_t content_hash(const Tensor& t) {
    uint64_t h = 1469598103934665603ULL;
    const auto* bytes = reinterpret_cast<const unsigned char*>(t.data());
    for (int64_t i = 0; i < t.size() * 8; ++i) {
        h ^= bytes[i];
        h *= 1099511628211ULL;
    }
    return h;
}

}  // namespace tsvit
