#pragma once

#include <cmath>
#include <cstddef>
#include <numeric>
#include <string>
#include <vector>

#include "taalm/common.hpp"
#include "taalm/rng.hpp"

namespace taalm {

// Dense row-major tensor. The project only ever needs vectors and matrices,
// but the shape is kept general. Scalar type is a template parameter; double
// is the default everywhere, float exists for the optional benchmark fast path.
template <typename T>
struct Tensor {
    std::vector<int> shape;
    std::vector<T> data;

    Tensor() = default;

    explicit Tensor(std::vector<int> s, T fill = T(0)) : shape(std::move(s)) {
        data.assign(count(shape), fill);
    }

    Tensor(std::vector<int> s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
        if (data.size() != count(shape)) {
            throw NumericError("tensor data length does not match shape");
        }
    }

    static std::size_t count(const std::vector<int>& s) {
        std::size_t n = 1;
        for (int d : s) {
            if (d <= 0) {
                throw NumericError("tensor dimensions must be positive");
            }
            n *= static_cast<std::size_t>(d);
        }
        return n;
    }

    std::size_t size() const { return data.size(); }
    int rows() const { return shape.empty() ? 1 : shape[0]; }
    int cols() const { return shape.size() < 2 ? (shape.empty() ? 1 : shape[0]) : shape[1]; }

    T& at(int r, int c) { return data[static_cast<std::size_t>(r) * shape[1] + c]; }
    const T& at(int r, int c) const { return data[static_cast<std::size_t>(r) * shape[1] + c]; }

    T& operator[](std::size_t i) { return data[i]; }
    const T& operator[](std::size_t i) const { return data[i]; }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    void fill(T v) { std::fill(data.begin(), data.end(), v); }

    bool all_finite() const {
        for (T v : data) {
            if (!std::isfinite(static_cast<double>(v))) {
                return false;
            }
        }
        return true;
    }

    void assert_finite(const char* what) const {
        if (!all_finite()) {
            throw NumericError(std::string("non-finite values in ") + what);
        }
    }

    static Tensor randn(std::vector<int> s, Rng& rng, T std_dev) {
        Tensor t(std::move(s));
        for (auto& v : t.data) {
            v = static_cast<T>(rng.normal() * static_cast<double>(std_dev));
        }
        return t;
    }

    static Tensor identity(int n) {
        Tensor t({n, n});
        for (int i = 0; i < n; ++i) {
            t.at(i, i) = T(1);
        }
        return t;
    }
};

template <typename T>
inline T dot(const Tensor<T>& a, const Tensor<T>& b) {
    T s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        s += a[i] * b[i];
    }
    return s;
}

template <typename T>
inline double l2_norm(const Tensor<T>& a) {
    double s = 0;
    for (T v : a.data) {
        s += static_cast<double>(v) * static_cast<double>(v);
    }
    return std::sqrt(s);
}

}  // namespace taalm
