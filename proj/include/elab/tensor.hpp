#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace elab {

/// Dense row-major tensor of rank <= 4. The shape is stored explicitly;
/// rank-2 views map onto Eigen matrices for GEMM-heavy code paths.
template <class T>
struct Tensor {
    std::vector<int> shape;
    std::vector<T> v;

    Tensor() = default;
    explicit Tensor(std::vector<int> s) : shape(std::move(s)), v(count(shape), T(0)) {}
    Tensor(std::vector<int> s, T fill) : shape(std::move(s)), v(count(shape), fill) {}

    static std::size_t count(const std::vector<int>& s) {
        std::size_t n = 1;
        for (int d : s) {
            if (d < 0) throw std::invalid_argument("negative tensor dimension");
            n *= static_cast<std::size_t>(d);
        }
        return n;
    }

    std::size_t size() const { return v.size(); }
    bool empty() const { return v.empty(); }
    int rank() const { return static_cast<int>(shape.size()); }
    int dim(int i) const { return shape.at(static_cast<std::size_t>(i)); }

    T* data() { return v.data(); }
    const T* data() const { return v.data(); }

    T& operator[](std::size_t i) { return v[i]; }
    const T& operator[](std::size_t i) const { return v[i]; }

    T& at2(int i, int j) { return v[static_cast<std::size_t>(i) * shape[1] + j]; }
    const T& at2(int i, int j) const { return v[static_cast<std::size_t>(i) * shape[1] + j]; }

    T& at4(int b, int i, int j, int c) {
        return v[((static_cast<std::size_t>(b) * shape[1] + i) * shape[2] + j) * shape[3] + c];
    }
    const T& at4(int b, int i, int j, int c) const {
        return v[((static_cast<std::size_t>(b) * shape[1] + i) * shape[2] + j) * shape[3] + c];
    }

    void fill(T x) { std::fill(v.begin(), v.end(), x); }
    void zero() { fill(T(0)); }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    Tensor& operator+=(const Tensor& o) {
        require_same(o, "+=");
        for (std::size_t i = 0; i < v.size(); ++i) v[i] += o.v[i];
        return *this;
    }
    Tensor& operator-=(const Tensor& o) {
        require_same(o, "-=");
        for (std::size_t i = 0; i < v.size(); ++i) v[i] -= o.v[i];
        return *this;
    }
    Tensor& operator*=(T s) {
        for (auto& x : v) x *= s;
        return *this;
    }

    void require_same(const Tensor& o, const char* what) const {
        if (!same_shape(o)) throw std::invalid_argument(std::string("tensor shape mismatch in ") + what);
    }

    using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    using MapMat = Eigen::Map<Mat>;
    using CMapMat = Eigen::Map<const Mat>;

    /// View the tensor as a (rows x cols) row-major matrix; total size must agree.
    MapMat mat(int rows, int cols) {
        if (static_cast<std::size_t>(rows) * cols != v.size()) throw std::invalid_argument("mat view size mismatch");
        return MapMat(v.data(), rows, cols);
    }
    CMapMat mat(int rows, int cols) const {
        if (static_cast<std::size_t>(rows) * cols != v.size()) throw std::invalid_argument("mat view size mismatch");
        return CMapMat(v.data(), rows, cols);
    }
};

template <class T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) {
    a.require_same(b, "-");
    Tensor<T> r(a.shape);
    for (std::size_t i = 0; i < a.size(); ++i) r.v[i] = a.v[i] - b.v[i];
    return r;
}

template <class T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) {
    a.require_same(b, "+");
    Tensor<T> r(a.shape);
    for (std::size_t i = 0; i < a.size(); ++i) r.v[i] = a.v[i] + b.v[i];
    return r;
}

template <class T>
Tensor<T> scaled(const Tensor<T>& a, T s) {
    Tensor<T> r(a.shape);
    for (std::size_t i = 0; i < a.size(); ++i) r.v[i] = a.v[i] * s;
    return r;
}

template <class T>
T mse(const Tensor<T>& a, const Tensor<T>& b) {
    a.require_same(b, "mse");
    T acc = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const T d = a.v[i] - b.v[i];
        acc += d * d;
    }
    return acc / static_cast<T>(a.size());
}

template <class T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
    a.require_same(b, "max_abs_diff");
    T m = 0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.v[i] - b.v[i]));
    return m;
}

template <class T>
bool bit_equal(const Tensor<T>& a, const Tensor<T>& b) {
    return a.shape == b.shape && std::equal(a.v.begin(), a.v.end(), b.v.begin());
}

/// FNV-1a over the raw little-endian bytes of the payload. Used for the
/// parameter-hash checks that guard the "weights untouched" contracts.
inline std::uint64_t fnv1a_bytes(const void* p, std::size_t n, std::uint64_t h = 1469598103934665603ULL) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= b[i];
        h *= 1099511628211ULL;
    }
    return h;
}

template <class T>
std::uint64_t tensor_hash(const Tensor<T>& t, std::uint64_t h = 1469598103934665603ULL) {
    return fnv1a_bytes(t.v.data(), t.v.size() * sizeof(T), h);
}

}  // namespace elab
