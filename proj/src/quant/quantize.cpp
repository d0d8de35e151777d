#include "qtz/quant/quantize.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace qtz {

std::int32_t quantize(double x, const QuantParams& qp) {
    const double t = x / qp.scale;
    // Keep the pre-clamp integer in 64 bits; huge inputs must saturate, not wrap.
    std::int64_t code;
    if (t >= 9.0e18)
        code = std::numeric_limits<std::int64_t>::max();
    else if (t <= -9.0e18)
        code = std::numeric_limits<std::int64_t>::min();
    else
        code = iround_half_away(t) + qp.zero_point;
    return static_cast<std::int32_t>(
        clamp_to<std::int64_t>(qp.code_min(), qp.code_max(), code));
}

double dequantize(std::int32_t code, const QuantParams& qp) {
    if (code < qp.code_min() || code > qp.code_max())
        throw CodeOutOfRange("code " + std::to_string(code) + " outside scheme range");
    return (static_cast<double>(code) - qp.zero_point) * qp.scale;
}

std::int32_t quantize_stochastic(double x, const QuantParams& qp, double unit_noise) {
    const double t = x / qp.scale + unit_noise;
    std::int64_t code;
    if (t >= 9.0e18)
        code = std::numeric_limits<std::int64_t>::max();
    else if (t <= -9.0e18)
        code = std::numeric_limits<std::int64_t>::min();
    else
        code = iround_half_away(t) + qp.zero_point;
    return static_cast<std::int32_t>(
        clamp_to<std::int64_t>(qp.code_min(), qp.code_max(), code));
}

double sim_quant(double x, const QuantParams& qp) {
    return dequantize(quantize(x, qp), qp);
}

double sim_quant_backward(double x, const RangeSpec& r, double upstream_grad) {
    return (x >= r.x_min && x <= r.x_max) ? upstream_grad : 0.0;
}

std::vector<MinMax> slice_minmax(const Tensor& t, int axis) {
    if (t.numel() == 0) throw NoData("slice_minmax on empty tensor");
    if (axis < 0) {
        MinMax mm{t.data[0], t.data[0]};
        for (double v : t.data) {
            mm.lo = std::min(mm.lo, v);
            mm.hi = std::max(mm.hi, v);
        }
        return {mm};
    }
    const std::int64_t channels = t.shape[static_cast<std::size_t>(axis)];
    std::vector<MinMax> out(static_cast<std::size_t>(channels),
                            {std::numeric_limits<double>::infinity(),
                             -std::numeric_limits<double>::infinity()});
    const std::int64_t stride = t.inner_stride(axis);
    for (std::int64_t i = 0; i < t.numel(); ++i) {
        auto& mm = out[static_cast<std::size_t>((i / stride) % channels)];
        mm.lo = std::min(mm.lo, t.data[static_cast<std::size_t>(i)]);
        mm.hi = std::max(mm.hi, t.data[static_cast<std::size_t>(i)]);
    }
    return out;
}

std::vector<QuantParams> tensor_quant_params(const Tensor& t, Granularity gran, Scheme scheme,
                                             int n_bits, bool narrow_range) {
    const int axis = gran.is_per_channel() ? gran.axis : -1;
    if (axis >= t.rank()) throw ShapeMismatch("per-channel axis out of bounds");
    std::vector<QuantParams> params;
    for (const MinMax& mm : slice_minmax(t, axis))
        params.push_back(params_from_minmax(mm.lo, mm.hi, n_bits, scheme, narrow_range));
    return params;
}

TensorQuant quantize_tensor(const Tensor& t, Granularity gran, Scheme scheme, int n_bits,
                            bool narrow_range) {
    TensorQuant tq;
    tq.granularity = gran;
    tq.params = tensor_quant_params(t, gran, scheme, n_bits, narrow_range);
    tq.codes = CodeTensor(t.shape);
    if (!gran.is_per_channel()) {
        const QuantParams& qp = tq.params[0];
        for (std::int64_t i = 0; i < t.numel(); ++i) tq.codes[i] = quantize(t[i], qp);
    } else {
        const std::int64_t stride = t.inner_stride(gran.axis);
        const std::int64_t channels = t.shape[static_cast<std::size_t>(gran.axis)];
        for (std::int64_t i = 0; i < t.numel(); ++i) {
            const auto& qp = tq.params[static_cast<std::size_t>((i / stride) % channels)];
            tq.codes[i] = quantize(t[i], qp);
        }
    }
    return tq;
}

Tensor dequantize_tensor(const TensorQuant& tq) {
    Tensor t(tq.codes.shape);
    if (!tq.granularity.is_per_channel()) {
        const QuantParams& qp = tq.params[0];
        for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = dequantize(tq.codes[i], qp);
    } else {
        const std::int64_t stride = tq.codes.inner_stride(tq.granularity.axis);
        const std::int64_t channels =
            tq.codes.shape[static_cast<std::size_t>(tq.granularity.axis)];
        for (std::int64_t i = 0; i < t.numel(); ++i) {
            const auto& qp = tq.params[static_cast<std::size_t>((i / stride) % channels)];
            t[i] = dequantize(tq.codes[i], qp);
        }
    }
    return t;
}

Tensor sim_quant_tensor(const Tensor& t, Granularity gran, Scheme scheme, int n_bits,
                        bool narrow_range) {
    return dequantize_tensor(quantize_tensor(t, gran, scheme, n_bits, narrow_range));
}

}  // namespace qtz
