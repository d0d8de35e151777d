#pragma once

#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "qtz/common.hpp"

namespace qtz {

// Dense row-major tensor. Activations use NHWC layout, conv weights
// [Kh, Kw, Cin, Cout], depthwise weights [Kh, Kw, C, multiplier],
// fully-connected weights [In, Out].
template <typename T>
struct TensorT {
    std::vector<std::int64_t> shape;
    std::vector<T> data;

    TensorT() = default;
    explicit TensorT(std::vector<std::int64_t> s, T fill = T{}) : shape(std::move(s)) {
        data.assign(static_cast<std::size_t>(numel_of(shape)), fill);
    }
    TensorT(std::vector<std::int64_t> s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
        if (static_cast<std::int64_t>(data.size()) != numel_of(shape))
            throw ShapeMismatch("tensor data size does not match shape");
    }

    static std::int64_t numel_of(const std::vector<std::int64_t>& s) {
        std::int64_t n = 1;
        for (auto d : s) n *= d;
        return n;
    }

    std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
    int rank() const { return static_cast<int>(shape.size()); }
    std::int64_t dim(int i) const { return shape[static_cast<std::size_t>(i)]; }

    T& operator[](std::int64_t i) { return data[static_cast<std::size_t>(i)]; }
    const T& operator[](std::int64_t i) const { return data[static_cast<std::size_t>(i)]; }

    // 4-d accessors (NHWC or Kh/Kw/Cin/Cout).
    T& at4(std::int64_t a, std::int64_t b, std::int64_t c, std::int64_t d) {
        return data[static_cast<std::size_t>(((a * shape[1] + b) * shape[2] + c) * shape[3] + d)];
    }
    const T& at4(std::int64_t a, std::int64_t b, std::int64_t c, std::int64_t d) const {
        return data[static_cast<std::size_t>(((a * shape[1] + b) * shape[2] + c) * shape[3] + d)];
    }
    T& at2(std::int64_t a, std::int64_t b) { return data[static_cast<std::size_t>(a * shape[1] + b)]; }
    const T& at2(std::int64_t a, std::int64_t b) const {
        return data[static_cast<std::size_t>(a * shape[1] + b)];
    }

    // Product of dims after `axis` (stride of one step along `axis`).
    std::int64_t inner_stride(int axis) const {
        std::int64_t s = 1;
        for (int i = axis + 1; i < rank(); ++i) s *= shape[static_cast<std::size_t>(i)];
        return s;
    }
};

using Tensor = TensorT<double>;
using CodeTensor = TensorT<std::int32_t>;

inline bool same_shape(const std::vector<std::int64_t>& a, const std::vector<std::int64_t>& b) {
    return a == b;
}

inline std::string shape_str(const std::vector<std::int64_t>& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

}  // namespace qtz
