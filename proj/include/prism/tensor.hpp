#pragma once

#include <algorithm>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <vector>

#include "prism/core.hpp"

namespace prism {

/// Dense row-major tensor with value semantics. Rank is dynamic (1..4 in
/// practice); a scalar is represented as shape {1}.
template <typename T>
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<int64_t> shape) : shape_(std::move(shape)) {
        data_.assign(size_t(numel_of(shape_)), T(0));
    }

    static Tensor zeros(std::vector<int64_t> shape) { return Tensor(std::move(shape)); }

    static Tensor full(std::vector<int64_t> shape, T v) {
        Tensor t(std::move(shape));
        std::fill(t.data_.begin(), t.data_.end(), v);
        return t;
    }

    static Tensor ones(std::vector<int64_t> shape) { return full(std::move(shape), T(1)); }

    static Tensor scalar(T v) { return full({1}, v); }

    static Tensor from(std::vector<int64_t> shape, std::vector<T> data) {
        PRISM_CHECK_SHAPE(numel_of(shape) == int64_t(data.size()),
                          "tensor data size does not match shape");
        Tensor t;
        t.shape_ = std::move(shape);
        t.data_ = std::move(data);
        return t;
    }

    template <typename Gen>
    static Tensor generate(std::vector<int64_t> shape, Gen&& gen) {
        Tensor t(std::move(shape));
        for (auto& v : t.data_) v = gen();
        return t;
    }

    const std::vector<int64_t>& shape() const { return shape_; }
    int ndim() const { return int(shape_.size()); }
    int64_t dim(int i) const { return shape_[size_t(i)]; }
    int64_t numel() const { return int64_t(data_.size()); }
    bool empty() const { return data_.empty(); }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }
    std::vector<T>& raw() { return data_; }
    const std::vector<T>& raw() const { return data_; }

    T& operator[](int64_t i) { return data_[size_t(i)]; }
    const T& operator[](int64_t i) const { return data_[size_t(i)]; }

    T& at(int64_t i, int64_t j) { return data_[size_t(i * shape_[1] + j)]; }
    const T& at(int64_t i, int64_t j) const { return data_[size_t(i * shape_[1] + j)]; }

    T& at(int64_t i, int64_t j, int64_t k) {
        return data_[size_t((i * shape_[1] + j) * shape_[2] + k)];
    }
    const T& at(int64_t i, int64_t j, int64_t k) const {
        return data_[size_t((i * shape_[1] + j) * shape_[2] + k)];
    }

    T& at(int64_t i, int64_t j, int64_t k, int64_t l) {
        return data_[size_t(((i * shape_[1] + j) * shape_[2] + k) * shape_[3] + l)];
    }
    const T& at(int64_t i, int64_t j, int64_t k, int64_t l) const {
        return data_[size_t(((i * shape_[1] + j) * shape_[2] + k) * shape_[3] + l)];
    }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    Tensor reshaped(std::vector<int64_t> new_shape) const {
        PRISM_CHECK_SHAPE(numel_of(new_shape) == numel(), "reshape changes element count");
        Tensor t = *this;
        t.shape_ = std::move(new_shape);
        return t;
    }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    void add_(const Tensor& o) {
        PRISM_CHECK_SHAPE(same_shape(o), "add_: shape mismatch");
        for (size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    }

    void scale_(T s) {
        for (auto& v : data_) v *= s;
    }

    bool all_finite() const {
        for (const T& v : data_)
            if (!std::isfinite(double(v))) return false;
        return true;
    }

    T sum() const { return std::accumulate(data_.begin(), data_.end(), T(0)); }

    std::string shape_str() const {
        std::ostringstream os;
        os << "[";
        for (size_t i = 0; i < shape_.size(); ++i) os << (i ? "x" : "") << shape_[i];
        os << "]";
        return os.str();
    }

    static int64_t numel_of(const std::vector<int64_t>& shape) {
        int64_t n = 1;
        for (int64_t d : shape) {
            PRISM_CHECK_SHAPE(d >= 0, "negative dimension");
            n *= d;
        }
        return n;
    }

private:
    std::vector<int64_t> shape_;
    std::vector<T> data_;
};

template <typename T>
Tensor<T> random_normal(std::vector<int64_t> shape, Rng& rng, T stddev = T(1), T mean = T(0)) {
    return Tensor<T>::generate(std::move(shape),
                               [&] { return T(rng.normal(double(mean), double(stddev))); });
}

template <typename T>
Tensor<T> random_uniform(std::vector<int64_t> shape, Rng& rng, T lo = T(0), T hi = T(1)) {
    return Tensor<T>::generate(std::move(shape),
                               [&] { return T(rng.uniform(double(lo), double(hi))); });
}

template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
    PRISM_CHECK_SHAPE(a.same_shape(b), "max_abs_diff: shape mismatch");
    T m = 0;
    for (int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

}  // namespace prism
