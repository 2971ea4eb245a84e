#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "metakgr/error.hpp"

namespace metakgr {

using Shape = std::vector<int>;

inline std::size_t numel(const Shape& shape) {
    std::size_t n = 1;
    for (int d : shape) {
        if (d < 0) throw ShapeError("negative dimension in shape");
        n *= static_cast<std::size_t>(d);
    }
    return n;
}

inline std::string shape_str(const Shape& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += "x";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

template <class T>
bool all_finite(std::span<const T> xs) {
    for (T x : xs)
        if (!std::isfinite(x)) return false;
    return true;
}

/// Plain owning tensor value: a shape plus a flat row-major buffer.
/// This is the storage type for parameters and gradients; tape-tracked
/// tensors are handles defined in autodiff.hpp.
template <class T>
struct Array {
    Shape shape;
    std::vector<T> v;

    Array() = default;
    explicit Array(Shape s) : shape(std::move(s)), v(numel(shape), T(0)) {}
    Array(Shape s, std::vector<T> values) : shape(std::move(s)), v(std::move(values)) {
        if (v.size() != numel(shape))
            throw ShapeError("value count " + std::to_string(v.size()) +
                             " does not match shape " + shape_str(shape));
    }

    std::size_t size() const { return v.size(); }

    int rows() const {
        if (shape.size() != 2) throw ShapeError("rows() on non-matrix " + shape_str(shape));
        return shape[0];
    }
    int cols() const {
        if (shape.size() != 2) throw ShapeError("cols() on non-matrix " + shape_str(shape));
        return shape[1];
    }

    T& at(std::size_t i) { return v[i]; }
    const T& at(std::size_t i) const { return v[i]; }

    T& at(int r, int c) { return v[static_cast<std::size_t>(r) * static_cast<std::size_t>(cols()) + static_cast<std::size_t>(c)]; }
    const T& at(int r, int c) const {
        return v[static_cast<std::size_t>(r) * static_cast<std::size_t>(cols()) + static_cast<std::size_t>(c)];
    }

    void fill(T x) { std::fill(v.begin(), v.end(), x); }
};

} // namespace metakgr
