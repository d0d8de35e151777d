#include "qtz/kernels/qconv.hpp"

#include <limits>

namespace qtz {

namespace {

std::vector<QuantParams> broadcast_params(const std::vector<QuantParams>& qp_w,
                                          std::int64_t channels) {
    if (static_cast<std::int64_t>(qp_w.size()) == channels) return qp_w;
    if (qp_w.size() != 1) throw ShapeMismatch("weight params: expected 1 or per-channel entries");
    return std::vector<QuantParams>(static_cast<std::size_t>(channels), qp_w[0]);
}

std::int32_t check_i32(std::int64_t acc) {
    if (acc > std::numeric_limits<std::int32_t>::max() ||
        acc < std::numeric_limits<std::int32_t>::min())
        throw AccumulatorOverflow("int32 accumulator exceeded: " + std::to_string(acc));
    return static_cast<std::int32_t>(acc);
}

QConvPlan plan_common(bool depthwise, const Conv2DGeom& geom, const CodeTensor& w_q,
                      const std::vector<QuantParams>& qp_w, const QuantParams& qp_x,
                      const QuantParams& qp_y) {
    QConvPlan plan;
    plan.depthwise = depthwise;
    plan.geom = geom;
    plan.w_q = w_q;
    plan.qp_x = qp_x;
    plan.qp_y = qp_y;
    const std::int64_t cout = depthwise ? w_q.dim(2) * w_q.dim(3) : w_q.dim(3);
    plan.count = depthwise ? w_q.dim(0) * w_q.dim(1) : w_q.dim(0) * w_q.dim(1) * w_q.dim(2);
    const auto params = broadcast_params(qp_w, cout);
    plan.z_w.resize(static_cast<std::size_t>(cout));
    plan.scale_w.resize(static_cast<std::size_t>(cout));
    plan.requant.resize(static_cast<std::size_t>(cout));
    for (std::int64_t n = 0; n < cout; ++n) {
        const auto& qp = params[static_cast<std::size_t>(n)];
        plan.z_w[static_cast<std::size_t>(n)] = qp.zero_point;
        plan.scale_w[static_cast<std::size_t>(n)] = qp.scale;
        const double m = qp.scale * qp_x.scale / qp_y.scale;
        plan.requant[static_cast<std::size_t>(n)] = quantize_multiplier(m);
    }
    plan.symmetric_weights = true;
    for (std::int32_t z : plan.z_w)
        if (z != 0) plan.symmetric_weights = false;

    plan.weight_col_sums.assign(static_cast<std::size_t>(cout), 0);
    std::vector<std::int64_t> sums(static_cast<std::size_t>(cout), 0);
    for (std::int64_t i = 0; i < w_q.numel(); ++i)
        sums[static_cast<std::size_t>(i % cout)] += w_q[i];
    for (std::int64_t n = 0; n < cout; ++n)
        plan.weight_col_sums[static_cast<std::size_t>(n)] = check_i32(sums[static_cast<std::size_t>(n)]);
    return plan;
}

}  // namespace

QConvPlan plan_qconv(bool depthwise, const Conv2DGeom& geom, const CodeTensor& w_q,
                     const std::vector<QuantParams>& qp_w, const QuantParams& qp_x,
                     const QuantParams& qp_y, const std::vector<double>& bias_float) {
    QConvPlan plan = plan_common(depthwise, geom, w_q, qp_w, qp_x, qp_y);
    const std::int64_t cout = plan.out_channels();
    plan.bias_i32.assign(static_cast<std::size_t>(cout), 0);
    if (!bias_float.empty()) {
        if (static_cast<std::int64_t>(bias_float.size()) != cout)
            throw ShapeMismatch("bias length vs output channels");
        for (std::int64_t n = 0; n < cout; ++n)
            plan.bias_i32[static_cast<std::size_t>(n)] = check_i32(iround_half_away(
                bias_float[static_cast<std::size_t>(n)] /
                (plan.scale_w[static_cast<std::size_t>(n)] * qp_x.scale)));
    }
    return plan;
}

QConvPlan plan_qconv_i32(bool depthwise, const Conv2DGeom& geom, const CodeTensor& w_q,
                         const std::vector<QuantParams>& qp_w, const QuantParams& qp_x,
                         const QuantParams& qp_y, const std::vector<std::int32_t>& bias_i32) {
    QConvPlan plan = plan_common(depthwise, geom, w_q, qp_w, qp_x, qp_y);
    plan.bias_i32 = bias_i32;
    if (plan.bias_i32.empty())
        plan.bias_i32.assign(static_cast<std::size_t>(plan.out_channels()), 0);
    return plan;
}

CodeTensor qconv2d(const QConvPlan& plan, const CodeTensor& x_q) {
    const CodeTensor& w = plan.w_q;
    const std::int64_t n = x_q.dim(0), h = x_q.dim(1), wd = x_q.dim(2), cin = x_q.dim(3);
    const std::int64_t kh = w.dim(0), kw = w.dim(1);
    const std::int64_t cout = plan.out_channels();
    if (plan.depthwise ? (w.dim(2) != cin) : (w.dim(2) != cin))
        throw ShapeMismatch("qconv2d: weight/input channel mismatch");
    const PadInfo p = conv_out_geom(h, wd, kh, kw, plan.geom.stride_h, plan.geom.stride_w,
                                    plan.geom.padding);

    // Zero padding enters as z_x codes: dequantize(z_x) == 0, so padding adds
    // exactly zero to the real-valued result while keeping the decomposition's
    // full-count bookkeeping intact.
    const std::int64_t pad_h_total =
        std::max<std::int64_t>((p.out_h - 1) * plan.geom.stride_h + kh - h, 0);
    const std::int64_t pad_w_total =
        std::max<std::int64_t>((p.out_w - 1) * plan.geom.stride_w + kw - wd, 0);
    CodeTensor xp({n, h + pad_h_total, wd + pad_w_total, cin}, plan.qp_x.zero_point);
    for (std::int64_t b = 0; b < n; ++b)
        for (std::int64_t i = 0; i < h; ++i)
            for (std::int64_t j = 0; j < wd; ++j)
                for (std::int64_t c = 0; c < cin; ++c)
                    xp.at4(b, i + p.pad_top, j + p.pad_left, c) = x_q.at4(b, i, j, c);

    CodeTensor y({n, p.out_h, p.out_w, cout});
    const std::int32_t z_x = plan.qp_x.zero_point;
    const std::int32_t lo = plan.qp_y.code_min(), hi = plan.qp_y.code_max();
    const std::int32_t z_y = plan.qp_y.zero_point;

    if (!plan.depthwise) {
        for (std::int64_t b = 0; b < n; ++b)
            for (std::int64_t oi = 0; oi < p.out_h; ++oi)
                for (std::int64_t oj = 0; oj < p.out_w; ++oj) {
                    const std::int64_t i0 = oi * plan.geom.stride_h;
                    const std::int64_t j0 = oj * plan.geom.stride_w;
                    // activation sum shared by all output channels
                    std::int64_t sum_x = 0;
                    if (!plan.symmetric_weights) {
                        for (std::int64_t ki = 0; ki < kh; ++ki)
                            for (std::int64_t kj = 0; kj < kw; ++kj)
                                for (std::int64_t m = 0; m < cin; ++m)
                                    sum_x += xp.at4(b, i0 + ki, j0 + kj, m);
                    }
                    for (std::int64_t oc = 0; oc < cout; ++oc) {
                        std::int64_t dot = 0;
                        for (std::int64_t ki = 0; ki < kh; ++ki)
                            for (std::int64_t kj = 0; kj < kw; ++kj)
                                for (std::int64_t m = 0; m < cin; ++m)
                                    dot += static_cast<std::int64_t>(w.at4(ki, kj, m, oc)) *
                                           xp.at4(b, i0 + ki, j0 + kj, m);
                        const auto c = static_cast<std::size_t>(oc);
                        std::int64_t acc = dot + plan.bias_i32[c] -
                                           static_cast<std::int64_t>(z_x) * plan.weight_col_sums[c];
                        if (!plan.symmetric_weights)
                            acc += -static_cast<std::int64_t>(plan.z_w[c]) * sum_x +
                                   plan.count * static_cast<std::int64_t>(z_x) * plan.z_w[c];
                        y.at4(b, oi, oj, oc) = requantize(check_i32(acc), plan.requant[c], z_y, lo, hi);
                    }
                }
        return y;
    }

    const std::int64_t mult = w.dim(3);
    for (std::int64_t b = 0; b < n; ++b)
        for (std::int64_t oi = 0; oi < p.out_h; ++oi)
            for (std::int64_t oj = 0; oj < p.out_w; ++oj) {
                const std::int64_t i0 = oi * plan.geom.stride_h;
                const std::int64_t j0 = oj * plan.geom.stride_w;
                for (std::int64_t ch = 0; ch < cin; ++ch) {
                    std::int64_t sum_x = 0;
                    if (!plan.symmetric_weights)
                        for (std::int64_t ki = 0; ki < kh; ++ki)
                            for (std::int64_t kj = 0; kj < kw; ++kj)
                                sum_x += xp.at4(b, i0 + ki, j0 + kj, ch);
                    for (std::int64_t m = 0; m < mult; ++m) {
                        const std::int64_t oc = ch * mult + m;
                        const auto c = static_cast<std::size_t>(oc);
                        std::int64_t dot = 0;
                        for (std::int64_t ki = 0; ki < kh; ++ki)
                            for (std::int64_t kj = 0; kj < kw; ++kj)
                                dot += static_cast<std::int64_t>(w.at4(ki, kj, ch, m)) *
                                       xp.at4(b, i0 + ki, j0 + kj, ch);
                        std::int64_t acc = dot + plan.bias_i32[c] -
                                           static_cast<std::int64_t>(z_x) * plan.weight_col_sums[c];
                        if (!plan.symmetric_weights)
                            acc += -static_cast<std::int64_t>(plan.z_w[c]) * sum_x +
                                   plan.count * static_cast<std::int64_t>(z_x) * plan.z_w[c];
                        y.at4(b, oi, oj, oc) = requantize(check_i32(acc), plan.requant[c], z_y, lo, hi);
                    }
                }
            }
    return y;
}

QConvPlan plan_qfc(const CodeTensor& w_q, const std::vector<QuantParams>& qp_w,
                   const QuantParams& qp_x, const QuantParams& qp_y,
                   const std::vector<double>& bias_float) {
    CodeTensor w4({1, 1, w_q.dim(0), w_q.dim(1)}, w_q.data);
    return plan_qconv(false, {1, 1, Padding::Valid}, w4, qp_w, qp_x, qp_y, bias_float);
}

CodeTensor qfc(const QConvPlan& plan, const CodeTensor& x_q) {
    const std::int64_t n = x_q.dim(0);
    std::int64_t f = 1;
    for (std::size_t i = 1; i < x_q.shape.size(); ++i) f *= x_q.shape[i];
    CodeTensor x4({n, 1, 1, f}, x_q.data);
    CodeTensor y4 = qconv2d(plan, x4);
    return CodeTensor({n, y4.dim(3)}, y4.data);
}

}  // namespace qtz
