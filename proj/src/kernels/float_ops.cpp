#include "qtz/kernels/float_ops.hpp"

#include <algorithm>
#include <cmath>

namespace qtz {

namespace {

std::int64_t flat_features(const std::vector<std::int64_t>& shape) {
    std::int64_t f = 1;
    for (std::size_t i = 1; i < shape.size(); ++i) f *= shape[i];
    return f;
}

}  // namespace

Tensor conv2d_fwd(const Tensor& x, const Tensor& w, const Tensor* bias, const Conv2DGeom& geom) {
    const std::int64_t n = x.dim(0), h = x.dim(1), wd = x.dim(2), cin = x.dim(3);
    const std::int64_t kh = w.dim(0), kw = w.dim(1), cout = w.dim(3);
    if (w.dim(2) != cin) throw ShapeMismatch("conv2d: weight Cin mismatch");
    const PadInfo p = conv_out_geom(h, wd, kh, kw, geom.stride_h, geom.stride_w, geom.padding);
    Tensor y({n, p.out_h, p.out_w, cout});
    for (std::int64_t b = 0; b < n; ++b)
        for (std::int64_t oi = 0; oi < p.out_h; ++oi)
            for (std::int64_t oj = 0; oj < p.out_w; ++oj)
                for (std::int64_t oc = 0; oc < cout; ++oc) {
                    double acc = bias ? (*bias)[oc] : 0.0;
                    for (std::int64_t ki = 0; ki < kh; ++ki) {
                        const std::int64_t ii = oi * geom.stride_h + ki - p.pad_top;
                        if (ii < 0 || ii >= h) continue;
                        for (std::int64_t kj = 0; kj < kw; ++kj) {
                            const std::int64_t jj = oj * geom.stride_w + kj - p.pad_left;
                            if (jj < 0 || jj >= wd) continue;
                            for (std::int64_t m = 0; m < cin; ++m)
                                acc += w.at4(ki, kj, m, oc) * x.at4(b, ii, jj, m);
                        }
                    }
                    y.at4(b, oi, oj, oc) = acc;
                }
    return y;
}

Tensor conv2d_bwd_input(const Tensor& gy, const Tensor& w, const std::vector<std::int64_t>& x_shape,
                        const Conv2DGeom& geom) {
    Tensor gx(x_shape, 0.0);
    const std::int64_t n = gy.dim(0), oh = gy.dim(1), ow = gy.dim(2), cout = gy.dim(3);
    const std::int64_t h = x_shape[1], wd = x_shape[2], cin = x_shape[3];
    const std::int64_t kh = w.dim(0), kw = w.dim(1);
    const PadInfo p = conv_out_geom(h, wd, kh, kw, geom.stride_h, geom.stride_w, geom.padding);
    for (std::int64_t b = 0; b < n; ++b)
        for (std::int64_t oi = 0; oi < oh; ++oi)
            for (std::int64_t oj = 0; oj < ow; ++oj)
                for (std::int64_t oc = 0; oc < cout; ++oc) {
                    const double g = gy.at4(b, oi, oj, oc);
                    if (g == 0.0) continue;
                    for (std::int64_t ki = 0; ki < kh; ++ki) {
                        const std::int64_t ii = oi * geom.stride_h + ki - p.pad_top;
                        if (ii < 0 || ii >= h) continue;
                        for (std::int64_t kj = 0; kj < kw; ++kj) {
                            const std::int64_t jj = oj * geom.stride_w + kj - p.pad_left;
                            if (jj < 0 || jj >= wd) continue;
                            for (std::int64_t m = 0; m < cin; ++m)
                                gx.at4(b, ii, jj, m) += g * w.at4(ki, kj, m, oc);
                        }
                    }
                }
    return gx;
}

Tensor conv2d_bwd_weights(const Tensor& gy, const Tensor& x, const std::vector<std::int64_t>& w_shape,
                          const Conv2DGeom& geom) {
    Tensor gw(w_shape, 0.0);
    const std::int64_t n = gy.dim(0), oh = gy.dim(1), ow = gy.dim(2), cout = gy.dim(3);
    const std::int64_t h = x.dim(1), wd = x.dim(2), cin = x.dim(3);
    const std::int64_t kh = w_shape[0], kw = w_shape[1];
    const PadInfo p = conv_out_geom(h, wd, kh, kw, geom.stride_h, geom.stride_w, geom.padding);
    for (std::int64_t b = 0; b < n; ++b)
        for (std::int64_t oi = 0; oi < oh; ++oi)
            for (std::int64_t oj = 0; oj < ow; ++oj)
                for (std::int64_t oc = 0; oc < cout; ++oc) {
                    const double g = gy.at4(b, oi, oj, oc);
                    if (g == 0.0) continue;
                    for (std::int64_t ki = 0; ki < kh; ++ki) {
                        const std::int64_t ii = oi * geom.stride_h + ki - p.pad_top;
                        if (ii < 0 || ii >= h) continue;
                        for (std::int64_t kj = 0; kj < kw; ++kj) {
                            const std::int64_t jj = oj * geom.stride_w + kj - p.pad_left;
                            if (jj < 0 || jj >= wd) continue;
                            for (std::int64_t m = 0; m < cin; ++m)
                                gw.at4(ki, kj, m, oc) += g * x.at4(b, ii, jj, m);
                        }
                    }
                }
    return gw;
}

Tensor depthwise_fwd(const Tensor& x, const Tensor& w, const Tensor* bias, const Conv2DGeom& geom) {
    const std::int64_t n = x.dim(0), h = x.dim(1), wd = x.dim(2), c = x.dim(3);
    const std::int64_t kh = w.dim(0), kw = w.dim(1), mult = w.dim(3);
    if (w.dim(2) != c) throw ShapeMismatch("depthwise: channel mismatch");
    const PadInfo p = conv_out_geom(h, wd, kh, kw, geom.stride_h, geom.stride_w, geom.padding);
    Tensor y({n, p.out_h, p.out_w, c * mult});
    for (std::int64_t b = 0; b < n; ++b)
        for (std::int64_t oi = 0; oi < p.out_h; ++oi)
            for (std::int64_t oj = 0; oj < p.out_w; ++oj)
                for (std::int64_t ch = 0; ch < c; ++ch)
                    for (std::int64_t m = 0; m < mult; ++m) {
                        const std::int64_t oc = ch * mult + m;
                        double acc = bias ? (*bias)[oc] : 0.0;
                        for (std::int64_t ki = 0; ki < kh; ++ki) {
                            const std::int64_t ii = oi * geom.stride_h + ki - p.pad_top;
                            if (ii < 0 || ii >= h) continue;
                            for (std::int64_t kj = 0; kj < kw; ++kj) {
                                const std::int64_t jj = oj * geom.stride_w + kj - p.pad_left;
                                if (jj < 0 || jj >= wd) continue;
                                acc += w.at4(ki, kj, ch, m) * x.at4(b, ii, jj, ch);
                            }
                        }
                        y.at4(b, oi, oj, oc) = acc;
                    }
    return y;
}

Tensor depthwise_bwd_input(const Tensor& gy, const Tensor& w,
                           const std::vector<std::int64_t>& x_shape, const Conv2DGeom& geom) {
    Tensor gx(x_shape, 0.0);
    const std::int64_t n = gy.dim(0), oh = gy.dim(1), ow = gy.dim(2);
    const std::int64_t h = x_shape[1], wd = x_shape[2], c = x_shape[3];
    const std::int64_t kh = w.dim(0), kw = w.dim(1), mult = w.dim(3);
    const PadInfo p = conv_out_geom(h, wd, kh, kw, geom.stride_h, geom.stride_w, geom.padding);
    for (std::int64_t b = 0; b < n; ++b)
        for (std::int64_t oi = 0; oi < oh; ++oi)
            for (std::int64_t oj = 0; oj < ow; ++oj)
                for (std::int64_t ch = 0; ch < c; ++ch)
                    for (std::int64_t m = 0; m < mult; ++m) {
                        const double g = gy.at4(b, oi, oj, ch * mult + m);
                        if (g == 0.0) continue;
                        for (std::int64_t ki = 0; ki < kh; ++ki) {
                            const std::int64_t ii = oi * geom.stride_h + ki - p.pad_top;
                            if (ii < 0 || ii >= h) continue;
                            for (std::int64_t kj = 0; kj < kw; ++kj) {
                                const std::int64_t jj = oj * geom.stride_w + kj - p.pad_left;
                                if (jj < 0 || jj >= wd) continue;
                                gx.at4(b, ii, jj, ch) += g * w.at4(ki, kj, ch, m);
                            }
                        }
                    }
    return gx;
}

Tensor depthwise_bwd_weights(const Tensor& gy, const Tensor& x,
                             const std::vector<std::int64_t>& w_shape, const Conv2DGeom& geom) {
    Tensor gw(w_shape, 0.0);
    const std::int64_t n = gy.dim(0), oh = gy.dim(1), ow = gy.dim(2);
    const std::int64_t h = x.dim(1), wd = x.dim(2), c = x.dim(3);
    const std::int64_t kh = w_shape[0], kw = w_shape[1], mult = w_shape[3];
    const PadInfo p = conv_out_geom(h, wd, kh, kw, geom.stride_h, geom.stride_w, geom.padding);
    for (std::int64_t b = 0; b < n; ++b)
        for (std::int64_t oi = 0; oi < oh; ++oi)
            for (std::int64_t oj = 0; oj < ow; ++oj)
                for (std::int64_t ch = 0; ch < c; ++ch)
                    for (std::int64_t m = 0; m < mult; ++m) {
                        const double g = gy.at4(b, oi, oj, ch * mult + m);
                        if (g == 0.0) continue;
                        for (std::int64_t ki = 0; ki < kh; ++ki) {
                            const std::int64_t ii = oi * geom.stride_h + ki - p.pad_top;
                            if (ii < 0 || ii >= h) continue;
                            for (std::int64_t kj = 0; kj < kw; ++kj) {
                                const std::int64_t jj = oj * geom.stride_w + kj - p.pad_left;
                                if (jj < 0 || jj >= wd) continue;
                                gw.at4(ki, kj, ch, m) += g * x.at4(b, ii, jj, ch);
                            }
                        }
                    }
    return gw;
}

Tensor fc_fwd(const Tensor& x, const Tensor& w, const Tensor* bias) {
    const std::int64_t n = x.dim(0), f = flat_features(x.shape);
    const std::int64_t fin = w.dim(0), out = w.dim(1);
    if (f != fin) throw ShapeMismatch("fc: feature count mismatch");
    Tensor y({n, out});
    for (std::int64_t b = 0; b < n; ++b)
        for (std::int64_t o = 0; o < out; ++o) {
            double acc = bias ? (*bias)[o] : 0.0;
            for (std::int64_t i = 0; i < f; ++i) acc += x[b * f + i] * w.at2(i, o);
            y.at2(b, o) = acc;
        }
    return y;
}

Tensor fc_bwd_input(const Tensor& gy, const Tensor& w, const std::vector<std::int64_t>& x_shape) {
    Tensor gx(x_shape, 0.0);
    const std::int64_t n = gy.dim(0), out = gy.dim(1), f = w.dim(0);
    for (std::int64_t b = 0; b < n; ++b)
        for (std::int64_t o = 0; o < out; ++o) {
            const double g = gy.at2(b, o);
            for (std::int64_t i = 0; i < f; ++i) gx[b * f + i] += g * w.at2(i, o);
        }
    return gx;
}

Tensor fc_bwd_weights(const Tensor& gy, const Tensor& x) {
    const std::int64_t n = gy.dim(0), out = gy.dim(1), f = flat_features(x.shape);
    Tensor gw({f, out}, 0.0);
    for (std::int64_t b = 0; b < n; ++b)
        for (std::int64_t o = 0; o < out; ++o) {
            const double g = gy.at2(b, o);
            for (std::int64_t i = 0; i < f; ++i) gw.at2(i, o) += g * x[b * f + i];
        }
    return gw;
}

Tensor avgpool_fwd(const Tensor& x, const PoolGeom& geom) {
    const std::int64_t n = x.dim(0), h = x.dim(1), wd = x.dim(2), c = x.dim(3);
    const PadInfo p = conv_out_geom(h, wd, geom.window_h, geom.window_w, geom.stride_h,
                                    geom.stride_w, geom.padding);
    Tensor y({n, p.out_h, p.out_w, c});
    for (std::int64_t b = 0; b < n; ++b)
        for (std::int64_t oi = 0; oi < p.out_h; ++oi)
            for (std::int64_t oj = 0; oj < p.out_w; ++oj)
                for (std::int64_t ch = 0; ch < c; ++ch) {
                    double acc = 0.0;
                    int count = 0;
                    for (int ki = 0; ki < geom.window_h; ++ki) {
                        const std::int64_t ii = oi * geom.stride_h + ki - p.pad_top;
                        if (ii < 0 || ii >= h) continue;
                        for (int kj = 0; kj < geom.window_w; ++kj) {
                            const std::int64_t jj = oj * geom.stride_w + kj - p.pad_left;
                            if (jj < 0 || jj >= wd) continue;
                            acc += x.at4(b, ii, jj, ch);
                            ++count;
                        }
                    }
                    y.at4(b, oi, oj, ch) = acc / count;
                }
    return y;
}

Tensor avgpool_bwd(const Tensor& gy, const std::vector<std::int64_t>& x_shape, const PoolGeom& geom) {
    Tensor gx(x_shape, 0.0);
    const std::int64_t n = gy.dim(0), oh = gy.dim(1), ow = gy.dim(2), c = gy.dim(3);
    const std::int64_t h = x_shape[1], wd = x_shape[2];
    const PadInfo p = conv_out_geom(h, wd, geom.window_h, geom.window_w, geom.stride_h,
                                    geom.stride_w, geom.padding);
    for (std::int64_t b = 0; b < n; ++b)
        for (std::int64_t oi = 0; oi < oh; ++oi)
            for (std::int64_t oj = 0; oj < ow; ++oj) {
                int count = 0;
                for (int ki = 0; ki < geom.window_h; ++ki) {
                    const std::int64_t ii = oi * geom.stride_h + ki - p.pad_top;
                    if (ii < 0 || ii >= h) continue;
                    for (int kj = 0; kj < geom.window_w; ++kj) {
                        const std::int64_t jj = oj * geom.stride_w + kj - p.pad_left;
                        if (jj >= 0 && jj < wd) ++count;
                    }
                }
                for (std::int64_t ch = 0; ch < c; ++ch) {
                    const double g = gy.at4(b, oi, oj, ch) / count;
                    for (int ki = 0; ki < geom.window_h; ++ki) {
                        const std::int64_t ii = oi * geom.stride_h + ki - p.pad_top;
                        if (ii < 0 || ii >= h) continue;
                        for (int kj = 0; kj < geom.window_w; ++kj) {
                            const std::int64_t jj = oj * geom.stride_w + kj - p.pad_left;
                            if (jj < 0 || jj >= wd) continue;
                            gx.at4(b, ii, jj, ch) += g;
                        }
                    }
                }
            }
    return gx;
}

Tensor relu_fwd(const Tensor& x) {
    Tensor y(x.shape);
    for (std::int64_t i = 0; i < x.numel(); ++i) y[i] = x[i] > 0.0 ? x[i] : 0.0;
    return y;
}

Tensor relu_bwd(const Tensor& gy, const Tensor& x) {
    Tensor gx(x.shape);
    for (std::int64_t i = 0; i < x.numel(); ++i) gx[i] = x[i] > 0.0 ? gy[i] : 0.0;
    return gx;
}

Tensor relu6_fwd(const Tensor& x) {
    Tensor y(x.shape);
    for (std::int64_t i = 0; i < x.numel(); ++i) y[i] = clamp_to(0.0, 6.0, x[i]);
    return y;
}

Tensor relu6_bwd(const Tensor& gy, const Tensor& x) {
    Tensor gx(x.shape);
    for (std::int64_t i = 0; i < x.numel(); ++i) gx[i] = (x[i] > 0.0 && x[i] < 6.0) ? gy[i] : 0.0;
    return gx;
}

Tensor add_fwd(const Tensor& a, const Tensor& b) {
    if (!same_shape(a.shape, b.shape))
        throw ShapeMismatch("add: " + shape_str(a.shape) + " vs " + shape_str(b.shape));
    Tensor y(a.shape);
    for (std::int64_t i = 0; i < a.numel(); ++i) y[i] = a[i] + b[i];
    return y;
}

Tensor concat_fwd(const std::vector<const Tensor*>& inputs, int axis) {
    if (inputs.empty()) throw ShapeMismatch("concat: no inputs");
    std::vector<std::int64_t> shape = inputs[0]->shape;
    std::int64_t axis_total = 0;
    for (const Tensor* t : inputs) {
        for (int d = 0; d < static_cast<int>(shape.size()); ++d)
            if (d != axis && t->shape[static_cast<std::size_t>(d)] != shape[static_cast<std::size_t>(d)])
                throw ShapeMismatch("concat: non-axis dims differ");
        axis_total += t->dim(axis);
    }
    shape[static_cast<std::size_t>(axis)] = axis_total;
    Tensor y(shape);
    const std::int64_t inner = y.inner_stride(axis);
    const std::int64_t outer = y.numel() / (inner * axis_total);
    std::int64_t axis_off = 0;
    for (const Tensor* t : inputs) {
        const std::int64_t ta = t->dim(axis);
        for (std::int64_t o = 0; o < outer; ++o)
            for (std::int64_t a = 0; a < ta; ++a)
                for (std::int64_t i = 0; i < inner; ++i)
                    y[(o * axis_total + axis_off + a) * inner + i] = (*t)[(o * ta + a) * inner + i];
        axis_off += ta;
    }
    return y;
}

std::vector<Tensor> concat_bwd(const Tensor& gy, const std::vector<std::vector<std::int64_t>>& in_shapes,
                               int axis) {
    std::vector<Tensor> grads;
    const std::int64_t axis_total = gy.dim(axis);
    const std::int64_t inner = gy.inner_stride(axis);
    const std::int64_t outer = gy.numel() / (inner * axis_total);
    std::int64_t axis_off = 0;
    for (const auto& shape : in_shapes) {
        Tensor g(shape);
        const std::int64_t ta = shape[static_cast<std::size_t>(axis)];
        for (std::int64_t o = 0; o < outer; ++o)
            for (std::int64_t a = 0; a < ta; ++a)
                for (std::int64_t i = 0; i < inner; ++i)
                    g[(o * ta + a) * inner + i] = gy[(o * axis_total + axis_off + a) * inner + i];
        axis_off += ta;
        grads.push_back(std::move(g));
    }
    return grads;
}

void moments_per_channel(const Tensor& x, std::vector<double>& mean, std::vector<double>& var) {
    const std::int64_t c = x.shape.back();
    const std::int64_t m = x.numel() / c;
    mean.assign(static_cast<std::size_t>(c), 0.0);
    var.assign(static_cast<std::size_t>(c), 0.0);
    for (std::int64_t i = 0; i < x.numel(); ++i) mean[static_cast<std::size_t>(i % c)] += x[i];
    for (auto& v : mean) v /= static_cast<double>(m);
    for (std::int64_t i = 0; i < x.numel(); ++i) {
        const double d = x[i] - mean[static_cast<std::size_t>(i % c)];
        var[static_cast<std::size_t>(i % c)] += d * d;
    }
    for (auto& v : var) v /= static_cast<double>(m);
}

Tensor bn_apply(const Tensor& x, const std::vector<double>& gamma, const std::vector<double>& beta,
                const std::vector<double>& mean, const std::vector<double>& sigma) {
    const std::int64_t c = x.shape.back();
    Tensor y(x.shape);
    for (std::int64_t i = 0; i < x.numel(); ++i) {
        const auto ch = static_cast<std::size_t>(i % c);
        y[i] = gamma[ch] * ((x[i] - mean[ch]) / sigma[ch]) + beta[ch];
    }
    return y;
}

Tensor bn_bwd_batch(const Tensor& gy, const Tensor& x, const std::vector<double>& gamma,
                    const std::vector<double>& mean, const std::vector<double>& sigma,
                    std::vector<double>& ggamma, std::vector<double>& gbeta) {
    const std::int64_t c = x.shape.back();
    const double m = static_cast<double>(x.numel() / c);
    std::vector<double> sum_g(static_cast<std::size_t>(c), 0.0);
    std::vector<double> sum_gxh(static_cast<std::size_t>(c), 0.0);
    for (std::int64_t i = 0; i < x.numel(); ++i) {
        const auto ch = static_cast<std::size_t>(i % c);
        const double xh = (x[i] - mean[ch]) / sigma[ch];
        sum_g[ch] += gy[i];
        sum_gxh[ch] += gy[i] * xh;
    }
    for (std::size_t ch = 0; ch < static_cast<std::size_t>(c); ++ch) {
        gbeta[ch] += sum_g[ch];
        ggamma[ch] += sum_gxh[ch];
    }
    Tensor gx(x.shape);
    for (std::int64_t i = 0; i < x.numel(); ++i) {
        const auto ch = static_cast<std::size_t>(i % c);
        const double xh = (x[i] - mean[ch]) / sigma[ch];
        gx[i] = gamma[ch] / sigma[ch] * (gy[i] - sum_g[ch] / m - xh * sum_gxh[ch] / m);
    }
    return gx;
}

Tensor bn_bwd_frozen(const Tensor& gy, const Tensor& x, const std::vector<double>& gamma,
                     const std::vector<double>& mean, const std::vector<double>& sigma,
                     std::vector<double>& ggamma, std::vector<double>& gbeta) {
    const std::int64_t c = x.shape.back();
    Tensor gx(x.shape);
    for (std::int64_t i = 0; i < x.numel(); ++i) {
        const auto ch = static_cast<std::size_t>(i % c);
        const double xh = (x[i] - mean[ch]) / sigma[ch];
        gbeta[ch] += gy[i];
        ggamma[ch] += gy[i] * xh;
        gx[i] = gy[i] * gamma[ch] / sigma[ch];
    }
    return gx;
}

double softmax_xent(const Tensor& logits, const std::vector<int>& labels, Tensor* dlogits) {
    const std::int64_t n = logits.dim(0), k = logits.dim(1);
    if (dlogits) *dlogits = Tensor(logits.shape);
    double loss = 0.0;
    for (std::int64_t b = 0; b < n; ++b) {
        double mx = logits.at2(b, 0);
        for (std::int64_t j = 1; j < k; ++j) mx = std::max(mx, logits.at2(b, j));
        double denom = 0.0;
        for (std::int64_t j = 0; j < k; ++j) denom += std::exp(logits.at2(b, j) - mx);
        const double logz = std::log(denom) + mx;
        loss += logz - logits.at2(b, labels[static_cast<std::size_t>(b)]);
        if (dlogits) {
            for (std::int64_t j = 0; j < k; ++j) {
                const double p = std::exp(logits.at2(b, j) - logz);
                dlogits->at2(b, j) =
                    (p - (j == labels[static_cast<std::size_t>(b)] ? 1.0 : 0.0)) / static_cast<double>(n);
            }
        }
    }
    return loss / static_cast<double>(n);
}

std::vector<int> argmax_rows(const Tensor& logits) {
    const std::int64_t n = logits.dim(0), k = logits.dim(1);
    std::vector<int> out(static_cast<std::size_t>(n));
    for (std::int64_t b = 0; b < n; ++b) {
        int best = 0;
        for (std::int64_t j = 1; j < k; ++j)
            if (logits.at2(b, j) > logits.at2(b, best)) best = static_cast<int>(j);
        out[static_cast<std::size_t>(b)] = best;
    }
    return out;
}

}  // namespace qtz
