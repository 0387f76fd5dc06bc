#pragma once

#include "voldet/errors.hpp"
#include "voldet/rng.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

namespace voldet {

/// Dense N-dimensional array. Activations use the canonical 5-D layout
/// batch x channel x z x y x x, row-major with x fastest. T is float for
/// storage/training and double for the verification mode.
template <typename T>
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<std::int64_t> shape) : shape_(std::move(shape)) {
        data_.assign(static_cast<std::size_t>(count(shape_)), T(0));
    }

    static Tensor zeros_like(const Tensor& other) { return Tensor(other.shape_); }

    const std::vector<std::int64_t>& shape() const { return shape_; }
    std::int64_t dim(std::size_t i) const { return shape_[i]; }
    std::size_t rank() const { return shape_.size(); }
    std::int64_t numel() const { return static_cast<std::int64_t>(data_.size()); }
    bool empty() const { return data_.empty(); }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }

    T& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
    const T& operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }
    void zero() { fill(T(0)); }

    /// Gaussian fill with given standard deviation (He-style callers pass
    /// sqrt(2 / fan_in)).
    void fill_gaussian(Rng& rng, double stddev) {
        for (auto& v : data_) v = static_cast<T>(rng.gaussian() * stddev);
    }

    bool all_finite() const {
        for (const T& v : data_)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

    void add_(const Tensor& other) {
        require_same_shape(other, "add_");
        for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
    }

    void scale_(T s) {
        for (auto& v : data_) v *= s;
    }

    template <typename U>
    Tensor<U> cast() const {
        Tensor<U> out(shape_);
        for (std::int64_t i = 0; i < numel(); ++i) out[i] = static_cast<U>(data_[static_cast<std::size_t>(i)]);
        return out;
    }

    static std::int64_t count(const std::vector<std::int64_t>& shape) {
        std::int64_t n = 1;
        for (std::int64_t d : shape) {
            if (d < 1) throw ShapeError("Tensor: non-positive dimension");
            n *= d;
        }
        return n;
    }

    std::string shape_str() const {
        std::string s = "[";
        for (std::size_t i = 0; i < shape_.size(); ++i) {
            if (i) s += "x";
            s += std::to_string(shape_[i]);
        }
        return s + "]";
    }

    void require_same_shape(const Tensor& other, const char* op) const {
        if (!same_shape(other))
            throw ShapeError(std::string(op) + ": shape mismatch " + shape_str() +
                             " vs " + other.shape_str());
    }

private:
    std::vector<std::int64_t> shape_;
    std::vector<T> data_;
};

} // namespace voldet
