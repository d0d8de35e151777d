#pragma once

#include <cstdint>

#include "qtz/common.hpp"

namespace qtz {

enum class Padding { Same, Valid };

struct Conv2DGeom {
    int stride_h = 1;
    int stride_w = 1;
    Padding padding = Padding::Same;
};

struct PoolGeom {
    int window_h = 2;
    int window_w = 2;
    int stride_h = 2;
    int stride_w = 2;
    Padding padding = Padding::Same;
};

// Output spatial extent plus the top/left zero padding (TF convention: SAME
// splits padding evenly with the extra row/column at the bottom/right).
struct PadInfo {
    std::int64_t out_h = 0;
    std::int64_t out_w = 0;
    std::int64_t pad_top = 0;
    std::int64_t pad_left = 0;
};

inline PadInfo conv_out_geom(std::int64_t in_h, std::int64_t in_w, std::int64_t k_h,
                             std::int64_t k_w, int stride_h, int stride_w, Padding padding) {
    PadInfo p;
    if (padding == Padding::Same) {
        p.out_h = (in_h + stride_h - 1) / stride_h;
        p.out_w = (in_w + stride_w - 1) / stride_w;
        const std::int64_t pad_h = std::max<std::int64_t>((p.out_h - 1) * stride_h + k_h - in_h, 0);
        const std::int64_t pad_w = std::max<std::int64_t>((p.out_w - 1) * stride_w + k_w - in_w, 0);
        p.pad_top = pad_h / 2;
        p.pad_left = pad_w / 2;
    } else {
        if (in_h < k_h || in_w < k_w) throw ShapeMismatch("VALID padding with kernel larger than input");
        p.out_h = (in_h - k_h) / stride_h + 1;
        p.out_w = (in_w - k_w) / stride_w + 1;
    }
    return p;
}

}  // namespace qtz
