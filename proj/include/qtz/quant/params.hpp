#pragma once

#include <cstdint>
#include <string>

#include "qtz/common.hpp"

namespace qtz {

enum class Scheme {
    Affine,             // arbitrary zero-point in [0, N-1]
    SymmetricSigned,    // zero-point 0, codes in [-N/2, N/2-1]
    SymmetricUnsigned,  // zero-point 0, codes in [0, N-1]
};

std::string scheme_name(Scheme s);
Scheme scheme_from_name(const std::string& name);

// Float range a quantizer has to cover.
struct RangeSpec {
    double x_min = 0.0;
    double x_max = 0.0;
};

// Relax a one-sided range to include zero so that zero quantizes exactly.
RangeSpec relax_range(RangeSpec r);

// Widen a degenerate (x_min == x_max) range so a positive scale exists.
// All-constant tensors (zero-initialized biases and the like) still quantize.
RangeSpec widen_degenerate(RangeSpec r, double eps = 1e-6);

// The (scale, zero-point, bit depth, scheme) tuple governing one quantizer.
struct QuantParams {
    double scale = 1.0;      // value units per code step, > 0
    std::int32_t zero_point = 0;
    int n_bits = 8;          // 4, 8 or 16
    Scheme scheme = Scheme::Affine;
    bool narrow_range = false;

    std::int64_t n_levels() const { return std::int64_t{1} << n_bits; }
    std::int32_t code_min() const;
    std::int32_t code_max() const;
    // Dequantized endpoints of the code range: the quantizer's effective
    // float range, which is what the straight-through gate tests against.
    double float_min() const { return (code_min() - zero_point) * scale; }
    double float_max() const { return (code_max() - zero_point) * scale; }

    void validate() const;
    bool operator==(const QuantParams&) const = default;
};

// scale = (x_max - x_min)/(N-1), zero_point = clamp(0, N-1, round(-x_min/scale)).
// Requires a relaxed, non-degenerate range.
QuantParams affine_params(RangeSpec r, int n_bits);

// zero_point = 0, scale = max_abs / largest positive code of the scheme.
QuantParams symmetric_params(double max_abs, int n_bits, Scheme scheme, bool narrow_range = false);

// Derive params for `scheme` from raw data min/max, applying zero relaxation
// (affine) or max-abs reduction (symmetric) plus the degenerate-range widening.
QuantParams params_from_minmax(double x_min, double x_max, int n_bits, Scheme scheme,
                               bool narrow_range = false);

// Quantization granularity for weight tensors.
struct Granularity {
    enum class Kind { PerLayer, PerChannel };
    Kind kind = Kind::PerLayer;
    int axis = -1;  // output-channel axis, only meaningful for PerChannel

    static Granularity per_layer() { return {Kind::PerLayer, -1}; }
    static Granularity per_channel(int axis) { return {Kind::PerChannel, axis}; }
    bool is_per_channel() const { return kind == Kind::PerChannel; }
    bool operator==(const Granularity&) const = default;
};

}  // namespace qtz
