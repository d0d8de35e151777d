#pragma once

#include <optional>
#include <vector>

#include "qtz/kernels/geometry.hpp"
#include "qtz/kernels/requantize.hpp"
#include "qtz/quant/quantize.hpp"
#include "qtz/tensor.hpp"

namespace qtz {

// Precomputed integer-inference plan for one conv/depthwise/fc layer, built
// from the zero-point decomposition: everything that depends only on the
// constant weights (per-channel code sums, the count*z_x*z_w term, the int32
// bias, the requantization multipliers) is materialized once at plan time.
struct QConvPlan {
    bool depthwise = false;
    Conv2DGeom geom;
    CodeTensor w_q;
    std::vector<std::int32_t> z_w;      // per output channel
    std::vector<double> scale_w;        // per output channel
    QuantParams qp_x;
    QuantParams qp_y;
    std::vector<std::int32_t> weight_col_sums;  // per output channel
    std::vector<std::int32_t> bias_i32;         // scaled to scale_w[n]*scale_x
    std::vector<RequantSpec> requant;           // per output channel
    std::int64_t count = 0;  // codes per output-channel dot product
    bool symmetric_weights = false;

    std::int64_t out_channels() const { return static_cast<std::int64_t>(z_w.size()); }
};

// Builds the plan. qp_w holds one entry (per-layer) or one per output channel.
// bias_float may be empty. Throws MultiplierOutOfRange when
// scale_w*scale_x/scale_y >= 1 (inconsistent calibration).
QConvPlan plan_qconv(bool depthwise, const Conv2DGeom& geom, const CodeTensor& w_q,
                     const std::vector<QuantParams>& qp_w, const QuantParams& qp_x,
                     const QuantParams& qp_y, const std::vector<double>& bias_float);

// Same plan with the bias already in int32 (loading a converted artifact).
QConvPlan plan_qconv_i32(bool depthwise, const Conv2DGeom& geom, const CodeTensor& w_q,
                         const std::vector<QuantParams>& qp_w, const QuantParams& qp_x,
                         const QuantParams& qp_y, const std::vector<std::int32_t>& bias_i32);

// Integer convolution over NHWC codes. Zero padding is materialized as z_x
// codes, which dequantize to exactly zero. The activation sum over the
// receptive field is computed once per output position and shared across all
// output channels; a z_w == 0 fast path skips the zero-point cross terms
// entirely and is bit-identical to the general path. Accumulation uses 64-bit
// intermediates and throws AccumulatorOverflow if the decomposed accumulator
// leaves int32 (the int32-machine contract; with 8-bit codes this is
// guaranteed for Kh*Kw*Cin <= 33025, e.g. 7x7 kernels up to 674 channels).
CodeTensor qconv2d(const QConvPlan& plan, const CodeTensor& x_q);

// Fully connected as a 1x1 conv over [N, 1, 1, F] codes.
CodeTensor qfc(const QConvPlan& plan, const CodeTensor& x_q);
QConvPlan plan_qfc(const CodeTensor& w_q /* [In, Out] */, const std::vector<QuantParams>& qp_w,
                   const QuantParams& qp_x, const QuantParams& qp_y,
                   const std::vector<double>& bias_float);

}  // namespace qtz
