#pragma once

#include <vector>

#include "qtz/quant/params.hpp"
#include "qtz/tensor.hpp"

namespace qtz {

// code = clamp(code_min, code_max, round(x/scale) + zero_point). Saturates.
std::int32_t quantize(double x, const QuantParams& qp);

// (code - zero_point) * scale. Throws CodeOutOfRange outside the scheme range.
double dequantize(std::int32_t code, const QuantParams& qp);

// Stochastic quantizer: round((x + eps)/scale) + zero_point with eps uniform
// over one code width (unit_noise in (-1/2, 1/2) scaled by the scale), so the
// dequantized expectation is a pass-through of x inside the range. The
// alternative reading of the formula, eps fixed in value units regardless of
// scale, would not be mean-preserving.
std::int32_t quantize_stochastic(double x, const QuantParams& qp, double unit_noise);

// Quantize-then-dequantize. Idempotent and saturating.
double sim_quant(double x, const QuantParams& qp);

// Straight-through estimator: gradient of clamp(x_min, x_max, x), i.e. the
// upstream gradient gated by x being inside the quantizer's float range.
double sim_quant_backward(double x, const RangeSpec& r, double upstream_grad);

// Result of quantizing one tensor: codes plus one QuantParams per layer or per
// channel slice.
struct TensorQuant {
    CodeTensor codes;
    std::vector<QuantParams> params;
    Granularity granularity;
};

// Derives params from each slice's own min/max (zero-relaxed / max-abs per
// scheme) and quantizes the slice with them.
TensorQuant quantize_tensor(const Tensor& t, Granularity gran, Scheme scheme, int n_bits,
                            bool narrow_range = false);

Tensor dequantize_tensor(const TensorQuant& tq);

// quantize_tensor followed by dequantize_tensor.
Tensor sim_quant_tensor(const Tensor& t, Granularity gran, Scheme scheme, int n_bits,
                        bool narrow_range = false);

// Params per slice without materializing codes (one entry for PerLayer).
std::vector<QuantParams> tensor_quant_params(const Tensor& t, Granularity gran, Scheme scheme,
                                             int n_bits, bool narrow_range = false);

// Per-slice min/max along `axis` (all elements when axis < 0).
struct MinMax {
    double lo;
    double hi;
};
std::vector<MinMax> slice_minmax(const Tensor& t, int axis);

// Channel index of flat element i for slicing along `axis`.
inline std::int64_t channel_of(const Tensor& t, std::int64_t i, int axis) {
    return (i / t.inner_stride(axis)) % t.shape[static_cast<std::size_t>(axis)];
}

}  // namespace qtz
