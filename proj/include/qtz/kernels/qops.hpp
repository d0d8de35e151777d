#pragma once

#include <vector>

#include "qtz/kernels/qconv.hpp"

namespace qtz {

// Element-wise add: both inputs are rescaled into a shared int32 fixed-point
// representation (left shift of 20 bits relative to twice the larger input
// scale), summed, then requantized to the output params.
CodeTensor qadd(const CodeTensor& a_q, const QuantParams& qp_a, const CodeTensor& b_q,
                const QuantParams& qp_b, const QuantParams& qp_y);

// Concat with per-input code-to-code rescaling into the output params.
CodeTensor qconcat(const std::vector<const CodeTensor*>& inputs,
                   const std::vector<QuantParams>& qps, int axis, const QuantParams& qp_y);

// Rescale a whole code tensor from one quantizer to another (identity when the
// params match).
CodeTensor requantize_tensor(const CodeTensor& x_q, const QuantParams& from, const QuantParams& to);

// clamp codes to [z, code_max]; real-valued result is max(0, x) exactly
// because z represents zero.
CodeTensor qrelu(const CodeTensor& x_q, const QuantParams& qp);
// clamp codes to [z, quantize(6.0)]
CodeTensor qrelu6(const CodeTensor& x_q, const QuantParams& qp);

// Average pool over valid (non-padded) elements with a single rounding into
// the output params.
CodeTensor qavgpool(const CodeTensor& x_q, const QuantParams& qp_x, const QuantParams& qp_y,
                    const PoolGeom& geom);

// Quantize/dequantize whole tensors with a single per-layer param set.
CodeTensor quantize_tensor_with(const Tensor& t, const QuantParams& qp);
Tensor dequantize_tensor_with(const CodeTensor& t, const QuantParams& qp);

}  // namespace qtz
