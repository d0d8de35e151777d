#include "qtz/kernels/qops.hpp"

#include <algorithm>
#include <cmath>
#include <map>

namespace qtz {

namespace {
constexpr int kAddLeftShift = 20;  // int32 headroom for 8-bit inputs
}

CodeTensor qadd(const CodeTensor& a_q, const QuantParams& qp_a, const CodeTensor& b_q,
                const QuantParams& qp_b, const QuantParams& qp_y) {
    if (!same_shape(a_q.shape, b_q.shape))
        throw ShapeMismatch("qadd: " + shape_str(a_q.shape) + " vs " + shape_str(b_q.shape));
    const double s_max = std::max(qp_a.scale, qp_b.scale);
    const RequantSpec ma = quantize_multiplier(qp_a.scale / (2.0 * s_max));
    const RequantSpec mb = quantize_multiplier(qp_b.scale / (2.0 * s_max));
    const double m_out = 2.0 * s_max / ((std::int64_t{1} << kAddLeftShift) * qp_y.scale);
    const RequantSpec mo = quantize_multiplier(m_out);

    CodeTensor y(a_q.shape);
    const std::int32_t lo = qp_y.code_min(), hi = qp_y.code_max();
    for (std::int64_t i = 0; i < a_q.numel(); ++i) {
        const std::int64_t va =
            fixed_mul(static_cast<std::int64_t>(a_q[i] - qp_a.zero_point) << kAddLeftShift, ma);
        const std::int64_t vb =
            fixed_mul(static_cast<std::int64_t>(b_q[i] - qp_b.zero_point) << kAddLeftShift, mb);
        const std::int64_t r = fixed_mul(va + vb, mo) + qp_y.zero_point;
        y[i] = static_cast<std::int32_t>(clamp_to<std::int64_t>(lo, hi, r));
    }
    return y;
}

CodeTensor requantize_tensor(const CodeTensor& x_q, const QuantParams& from, const QuantParams& to) {
    if (from == to) return x_q;
    // code-to-code rescale with a 12-bit pre-shift so the multiplier stays < 1
    constexpr int kShift = 12;
    const RequantSpec m =
        quantize_multiplier(from.scale / (to.scale * (std::int64_t{1} << kShift)));
    CodeTensor y(x_q.shape);
    const std::int32_t lo = to.code_min(), hi = to.code_max();
    for (std::int64_t i = 0; i < x_q.numel(); ++i) {
        const std::int64_t v = static_cast<std::int64_t>(x_q[i] - from.zero_point) << kShift;
        const std::int64_t r = fixed_mul(v, m) + to.zero_point;
        y[i] = static_cast<std::int32_t>(clamp_to<std::int64_t>(lo, hi, r));
    }
    return y;
}

CodeTensor qconcat(const std::vector<const CodeTensor*>& inputs,
                   const std::vector<QuantParams>& qps, int axis, const QuantParams& qp_y) {
    if (inputs.empty()) throw ShapeMismatch("qconcat: no inputs");
    std::vector<CodeTensor> rescaled;
    rescaled.reserve(inputs.size());
    for (std::size_t i = 0; i < inputs.size(); ++i)
        rescaled.push_back(requantize_tensor(*inputs[i], qps[i], qp_y));

    std::vector<std::int64_t> shape = rescaled[0].shape;
    std::int64_t axis_total = 0;
    for (const CodeTensor& t : rescaled) {
        for (int d = 0; d < static_cast<int>(shape.size()); ++d)
            if (d != axis && t.shape[static_cast<std::size_t>(d)] != shape[static_cast<std::size_t>(d)])
                throw ShapeMismatch("qconcat: non-axis dims differ");
        axis_total += t.dim(axis);
    }
    shape[static_cast<std::size_t>(axis)] = axis_total;
    CodeTensor y(shape);
    const std::int64_t inner = y.inner_stride(axis);
    const std::int64_t outer = y.numel() / (inner * axis_total);
    std::int64_t off = 0;
    for (const CodeTensor& t : rescaled) {
        const std::int64_t ta = t.dim(axis);
        for (std::int64_t o = 0; o < outer; ++o)
            for (std::int64_t a = 0; a < ta; ++a)
                for (std::int64_t i = 0; i < inner; ++i)
                    y[(o * axis_total + off + a) * inner + i] = t[(o * ta + a) * inner + i];
        off += ta;
    }
    return y;
}

CodeTensor qrelu(const CodeTensor& x_q, const QuantParams& qp) {
    CodeTensor y(x_q.shape);
    const std::int32_t z = qp.zero_point, hi = qp.code_max();
    for (std::int64_t i = 0; i < x_q.numel(); ++i) y[i] = clamp_to(z, hi, x_q[i]);
    return y;
}

CodeTensor qrelu6(const CodeTensor& x_q, const QuantParams& qp) {
    CodeTensor y(x_q.shape);
    const std::int32_t z = qp.zero_point;
    const std::int32_t hi = quantize(6.0, qp);
    for (std::int64_t i = 0; i < x_q.numel(); ++i) y[i] = clamp_to(z, hi, x_q[i]);
    return y;
}

CodeTensor qavgpool(const CodeTensor& x_q, const QuantParams& qp_x, const QuantParams& qp_y,
                    const PoolGeom& geom) {
    const std::int64_t n = x_q.dim(0), h = x_q.dim(1), wd = x_q.dim(2), c = x_q.dim(3);
    const PadInfo p = conv_out_geom(h, wd, geom.window_h, geom.window_w, geom.stride_h,
                                    geom.stride_w, geom.padding);
    CodeTensor y({n, p.out_h, p.out_w, c});
    const std::int32_t lo = qp_y.code_min(), hi = qp_y.code_max();
    constexpr int kShift = 12;
    // one fixed-point multiplier per distinct window count keeps a single
    // rounding step per output element
    auto multiplier_for = [&](int count) {
        return quantize_multiplier(qp_x.scale /
                                   (qp_y.scale * count * (std::int64_t{1} << kShift)));
    };
    std::map<int, RequantSpec> mults;
    for (std::int64_t b = 0; b < n; ++b)
        for (std::int64_t oi = 0; oi < p.out_h; ++oi)
            for (std::int64_t oj = 0; oj < p.out_w; ++oj) {
                std::int64_t count = 0;
                for (int ki = 0; ki < geom.window_h; ++ki) {
                    const std::int64_t ii = oi * geom.stride_h + ki - p.pad_top;
                    if (ii < 0 || ii >= h) continue;
                    for (int kj = 0; kj < geom.window_w; ++kj) {
                        const std::int64_t jj = oj * geom.stride_w + kj - p.pad_left;
                        if (jj >= 0 && jj < wd) ++count;
                    }
                }
                auto it = mults.find(static_cast<int>(count));
                if (it == mults.end())
                    it = mults.emplace(static_cast<int>(count), multiplier_for(static_cast<int>(count)))
                             .first;
                const RequantSpec& m = it->second;
                for (std::int64_t ch = 0; ch < c; ++ch) {
                    std::int64_t sum = 0;
                    for (int ki = 0; ki < geom.window_h; ++ki) {
                        const std::int64_t ii = oi * geom.stride_h + ki - p.pad_top;
                        if (ii < 0 || ii >= h) continue;
                        for (int kj = 0; kj < geom.window_w; ++kj) {
                            const std::int64_t jj = oj * geom.stride_w + kj - p.pad_left;
                            if (jj < 0 || jj >= wd) continue;
                            sum += x_q.at4(b, ii, jj, ch);
                        }
                    }
                    const std::int64_t v = (sum - count * qp_x.zero_point) << kShift;
                    const std::int64_t r = fixed_mul(v, m) + qp_y.zero_point;
                    y.at4(b, oi, oj, ch) = static_cast<std::int32_t>(clamp_to<std::int64_t>(lo, hi, r));
                }
            }
    return y;
}

CodeTensor quantize_tensor_with(const Tensor& t, const QuantParams& qp) {
    CodeTensor y(t.shape);
    for (std::int64_t i = 0; i < t.numel(); ++i) y[i] = quantize(t[i], qp);
    return y;
}

Tensor dequantize_tensor_with(const CodeTensor& t, const QuantParams& qp) {
    Tensor y(t.shape);
    for (std::int64_t i = 0; i < t.numel(); ++i) y[i] = dequantize(t[i], qp);
    return y;
}

}  // namespace qtz
