#include "qtz/train/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "qtz/quant/quantize.hpp"

namespace qtz {

namespace {

std::vector<double> sigma_of(const Tensor& var, double eps) {
    std::vector<double> s(var.data.size());
    for (std::size_t i = 0; i < s.size(); ++i) s[i] = std::sqrt(var.data[i] + eps);
    return s;
}

// scale a weight tensor per output channel (last-axis channel index works for
// conv [..,Cout], depthwise [..,C,M] flattened and fc [..,Out] alike)
Tensor scale_channels(const Tensor& w, const std::vector<double>& f) {
    Tensor out = w;
    const std::int64_t c = static_cast<std::int64_t>(f.size());
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] *= f[static_cast<std::size_t>(i % c)];
    return out;
}

std::vector<double> channel_sums(const Tensor& t, std::int64_t channels) {
    std::vector<double> s(static_cast<std::size_t>(channels), 0.0);
    for (std::int64_t i = 0; i < t.numel(); ++i) s[static_cast<std::size_t>(i % channels)] += t[i];
    return s;
}

struct WeightQuantResult {
    Tensor wq;
    std::vector<RangeSpec> ranges;
    int axis = -1;
    CodeTensor codes;
};

// Simulated (or stochastic or surrogate) quantization of a weight tensor with
// ranges derived from the tensor itself.
WeightQuantResult quantize_weights(const Tensor& w, const FakeQuantAttrs& attrs, FqMode mode,
                                   bool stochastic, Rng* rng, bool track_codes) {
    WeightQuantResult r;
    r.axis = attrs.granularity.is_per_channel() ? attrs.granularity.axis : -1;
    const auto params =
        tensor_quant_params(w, attrs.granularity, attrs.scheme, attrs.n_bits, attrs.narrow_range);
    r.ranges.reserve(params.size());
    for (const auto& qp : params) r.ranges.push_back({qp.float_min(), qp.float_max()});
    if (mode == FqMode::Off) {
        r.wq = w;
        return r;
    }
    r.wq = Tensor(w.shape);
    if (track_codes) r.codes = CodeTensor(w.shape);
    const std::int64_t stride = r.axis >= 0 ? w.inner_stride(r.axis) : 0;
    const std::int64_t channels = r.axis >= 0 ? w.shape[static_cast<std::size_t>(r.axis)] : 1;
    for (std::int64_t i = 0; i < w.numel(); ++i) {
        const QuantParams& qp =
            r.axis >= 0 ? params[static_cast<std::size_t>((i / stride) % channels)] : params[0];
        if (mode == FqMode::ClampSurrogate) {
            r.wq[i] = clamp_to(qp.float_min(), qp.float_max(), w[i]);
        } else {
            const std::int32_t code = stochastic
                                          ? quantize_stochastic(w[i], qp, rng->uniform() - 0.5)
                                          : quantize(w[i], qp);
            r.wq[i] = dequantize(code, qp);
            if (track_codes) r.codes[i] = code;
        }
    }
    return r;
}

Tensor ste_gate(const Tensor& grad, const Tensor& x, const std::vector<RangeSpec>& ranges,
                int axis) {
    Tensor out(grad.shape);
    const std::int64_t stride = axis >= 0 ? x.inner_stride(axis) : 0;
    const std::int64_t channels = axis >= 0 ? x.shape[static_cast<std::size_t>(axis)] : 1;
    for (std::int64_t i = 0; i < grad.numel(); ++i) {
        const RangeSpec& r =
            axis >= 0 ? ranges[static_cast<std::size_t>((i / stride) % channels)] : ranges[0];
        out[i] = sim_quant_backward(x[i], r, grad[i]);
    }
    return out;
}

void accumulate(std::map<std::string, Tensor>& grads, const std::string& name, const Tensor& g) {
    auto it = grads.find(name);
    if (it == grads.end()) {
        grads[name] = g;
        return;
    }
    Tensor& t = it->second;
    for (std::int64_t i = 0; i < g.numel(); ++i) t[i] += g[i];
}

bool is_frozen(const TrainState& st, const Node& n) {
    return n.fold->freeze || st.bn_frozen;
}

Tensor conv_like_fwd(const Node& n, const Tensor& x, const Tensor& w, const Tensor* bias) {
    switch (n.kind) {
        case OpKind::Conv2D: return conv2d_fwd(x, w, bias, n.conv);
        case OpKind::DepthwiseConv2D: return depthwise_fwd(x, w, bias, n.conv);
        case OpKind::FullyConnected: return fc_fwd(x, w, bias);
        default: throw Error("not conv-like");
    }
}

Tensor conv_like_bwd_input(const Node& n, const Tensor& gy, const Tensor& w,
                           const std::vector<std::int64_t>& x_shape) {
    switch (n.kind) {
        case OpKind::Conv2D: return conv2d_bwd_input(gy, w, x_shape, n.conv);
        case OpKind::DepthwiseConv2D: return depthwise_bwd_input(gy, w, x_shape, n.conv);
        case OpKind::FullyConnected: return fc_bwd_input(gy, w, x_shape);
        default: throw Error("not conv-like");
    }
}

Tensor conv_like_bwd_weights(const Node& n, const Tensor& gy, const Tensor& x,
                             const std::vector<std::int64_t>& w_shape) {
    switch (n.kind) {
        case OpKind::Conv2D: return conv2d_bwd_weights(gy, x, w_shape, n.conv);
        case OpKind::DepthwiseConv2D: return depthwise_bwd_weights(gy, x, w_shape, n.conv);
        case OpKind::FullyConnected: return fc_bwd_weights(gy, x);
        default: throw Error("not conv-like");
    }
}

}  // namespace

TrainState make_train_state(const Graph& float_graph, const TrainConfig& cfg) {
    cfg.validate();
    TrainState st;
    st.base_graph = float_graph;
    st.graph = insert_fake_quant(fold_bn_training(float_graph, false), cfg.quant_config());
    st.rng = Rng(cfg.rng_seed);
    for (const Node& n : st.graph.nodes) {
        if (n.is_conv_like()) {
            st.learnable.push_back(n.fold ? n.inputs[1]
                                          : st.graph.producer(n.inputs[1])
                                                ? st.graph.producer(n.inputs[1])->inputs[0]
                                                : n.inputs[1]);
            if (n.inputs.size() > 2) st.learnable.push_back(n.inputs[2]);
            if (n.fold) {
                st.learnable.push_back(n.fold->bn.gamma);
                st.learnable.push_back(n.fold->bn.beta);
            }
        } else if (n.kind == OpKind::BatchNorm) {
            st.learnable.push_back(n.bn->gamma);
            st.learnable.push_back(n.bn->beta);
        }
    }
    for (const std::string& name : st.learnable) st.ema[name] = st.graph.params.at(name);
    return st;
}

ForwardCache forward_train(TrainState& st, const Tensor& images, const std::vector<int>& labels,
                           const TrainConfig& cfg, const ForwardOptions& opts) {
    ForwardCache cache;
    cache.labels = labels;
    const bool quant_on = st.step >= cfg.quant_delay;
    cache.fq_mode = opts.mode.value_or(quant_on ? FqMode::Quantize : FqMode::Off);
    const FqMode mode = cache.fq_mode;
    auto& env = cache.values;
    const Graph& g = st.graph;
    auto& params = st.graph.params;

    auto value_of = [&](const std::string& name) -> const Tensor& {
        auto it = env.find(name);
        if (it != env.end()) return it->second;
        auto pit = params.find(name);
        if (pit != params.end()) return pit->second;
        throw Error("trainer: tensor not available: " + name);
    };

    for (const Node& n : g.nodes) {
        switch (n.kind) {
            case OpKind::Input:
                env[n.output] = images;
                break;
            case OpKind::Output:
                break;
            case OpKind::ReLU:
                env[n.output] = relu_fwd(value_of(n.inputs[0]));
                break;
            case OpKind::ReLU6:
                env[n.output] = relu6_fwd(value_of(n.inputs[0]));
                break;
            case OpKind::Add:
                env[n.output] = add_fwd(value_of(n.inputs[0]), value_of(n.inputs[1]));
                break;
            case OpKind::Concat: {
                std::vector<const Tensor*> ins;
                for (const std::string& in : n.inputs) ins.push_back(&value_of(in));
                env[n.output] = concat_fwd(ins, n.concat_axis);
                break;
            }
            case OpKind::AvgPool:
                env[n.output] = avgpool_fwd(value_of(n.inputs[0]), n.pool);
                break;
            case OpKind::BatchNorm: {
                // unfolded batch norm (training semantics with batch stats)
                const BNRefs& refs = *n.bn;
                const Tensor& x = value_of(n.inputs[0]);
                NodeCache& nc = cache.per_node[n.id];
                std::vector<double> var_b;
                moments_per_channel(x, nc.mu_b, var_b);
                nc.sigma_b.resize(var_b.size());
                for (std::size_t c = 0; c < var_b.size(); ++c)
                    nc.sigma_b[c] = std::sqrt(var_b[c] + refs.epsilon);
                env[n.output] = bn_apply(x, params.at(refs.gamma).data, params.at(refs.beta).data,
                                         nc.mu_b, nc.sigma_b);
                break;
            }
            case OpKind::FakeQuant: {
                const Tensor& x = value_of(n.inputs[0]);
                NodeCache& nc = cache.per_node[n.id];
                if (n.fq.is_weight) {
                    WeightQuantResult r = quantize_weights(x, n.fq, mode, cfg.stochastic_weights,
                                                           &st.rng, opts.track_codes);
                    nc.w_ranges = r.ranges;
                    nc.w_axis = r.axis;
                    if (opts.track_codes) nc.w_codes = std::move(r.codes);
                    env[n.output] = std::move(r.wq);
                } else {
                    auto& stats = st.act_stats[n.inputs[0]];
                    stats.momentum = cfg.act_momentum;
                    if (opts.update_stats && !st.bn_frozen) update_activation_ranges(stats, x);
                    if (mode == FqMode::Off || stats.sample_count == 0) {
                        nc.act_range = {-1e30, 1e30};
                        env[n.output] = x;
                    } else {
                        const RangeSpec r = stats.range();
                        const QuantParams qp =
                            params_from_minmax(r.x_min, r.x_max, n.fq.n_bits, n.fq.scheme);
                        nc.act_range = {qp.float_min(), qp.float_max()};
                        env[n.output] = fake_quant_apply(x, {qp}, -1, mode);
                    }
                }
                break;
            }
            case OpKind::Conv2D:
            case OpKind::DepthwiseConv2D:
            case OpKind::FullyConnected: {
                const Tensor& x = value_of(n.inputs[0]);
                if (!n.fold) {
                    const Tensor& w = value_of(n.inputs[1]);
                    const Tensor* bias = n.inputs.size() > 2 ? &value_of(n.inputs[2]) : nullptr;
                    env[n.output] = conv_like_fwd(n, x, w, bias);
                    break;
                }
                const FoldAttrs& fold = *n.fold;
                NodeCache& nc = cache.per_node[n.id];
                nc.frozen = is_frozen(st, n);
                const Tensor& w = params.at(n.inputs[1]);
                const Tensor* bias = n.inputs.size() > 2 ? &params.at(n.inputs[2]) : nullptr;
                const Tensor& gamma = params.at(fold.bn.gamma);
                const Tensor& beta = params.at(fold.bn.beta);
                const Tensor& mean = params.at(fold.bn.mean);
                const std::vector<double> sigma = sigma_of(params.at(fold.bn.var), fold.bn.epsilon);
                const std::size_t channels = gamma.data.size();
                const std::int64_t ch = static_cast<std::int64_t>(channels);
                const bool quant_active = mode != FqMode::Off && fold.weight_fq.has_value();

                if (!nc.frozen) {
                    nc.s = conv_like_fwd(n, x, w, bias);
                    moments_per_channel(nc.s, nc.mu_b, nc.var_b);
                    nc.sigma_b.resize(channels);
                    for (std::size_t c = 0; c < channels; ++c)
                        nc.sigma_b[c] = std::sqrt(nc.var_b[c] + fold.bn.epsilon);
                    if (!quant_active) {
                        nc.textbook_path = true;
                        env[n.output] =
                            bn_apply(nc.s, gamma.data, beta.data, nc.mu_b, nc.sigma_b);
                        break;
                    }
                    // corrected path: weights folded to the long-term statistics
                    // (or to batch statistics in the naive baseline)
                    std::vector<double> factor(channels);
                    for (std::size_t c = 0; c < channels; ++c)
                        factor[c] = gamma.data[c] /
                                    (cfg.naive_bn_fold ? nc.sigma_b[c] : sigma[c]);
                    nc.u = scale_channels(w, factor);
                    WeightQuantResult r = quantize_weights(nc.u, *fold.weight_fq, mode,
                                                           cfg.stochastic_weights, &st.rng,
                                                           opts.track_codes);
                    nc.w_ranges = r.ranges;
                    nc.w_axis = r.axis;
                    nc.wq = std::move(r.wq);
                    if (opts.track_codes) nc.w_codes = std::move(r.codes);
                    nc.y = conv_like_fwd(n, x, nc.wq, nullptr);
                    Tensor y = nc.y;
                    for (std::int64_t i = 0; i < y.numel(); ++i) {
                        const auto c = static_cast<std::size_t>(i % ch);
                        const double b0 = bias ? bias->data[c] : 0.0;
                        const double bias_term =
                            beta.data[c] + gamma.data[c] * (b0 - nc.mu_b[c]) / nc.sigma_b[c];
                        const double corr = cfg.naive_bn_fold ? 1.0 : sigma[c] / nc.sigma_b[c];
                        y[i] = y[i] * corr + bias_term;
                    }
                    env[n.output] = std::move(y);
                    break;
                }
                // frozen: long-term statistics, no correction on the output
                std::vector<double> factor(channels);
                for (std::size_t c = 0; c < channels; ++c) factor[c] = gamma.data[c] / sigma[c];
                nc.u = scale_channels(w, factor);
                if (quant_active) {
                    WeightQuantResult r = quantize_weights(nc.u, *fold.weight_fq, mode,
                                                           cfg.stochastic_weights, &st.rng,
                                                           opts.track_codes);
                    nc.w_ranges = r.ranges;
                    nc.w_axis = r.axis;
                    nc.wq = std::move(r.wq);
                    if (opts.track_codes) nc.w_codes = std::move(r.codes);
                } else {
                    nc.wq = nc.u;
                }
                Tensor y = conv_like_fwd(n, x, nc.wq, nullptr);
                for (std::int64_t i = 0; i < y.numel(); ++i) {
                    const auto c = static_cast<std::size_t>(i % ch);
                    const double b0 = bias ? bias->data[c] : 0.0;
                    y[i] += beta.data[c] + gamma.data[c] * (b0 - mean.data[c]) / sigma[c];
                }
                env[n.output] = std::move(y);
                break;
            }
        }
    }

    const Tensor& logits = env.at(g.outputs[0]);
    Tensor dlogits;
    cache.loss = softmax_xent(logits, labels, &dlogits);
    if (!std::isfinite(cache.loss)) throw NonFiniteLoss("loss is not finite");
    env["__dlogits"] = std::move(dlogits);
    return cache;
}

std::map<std::string, Tensor> backward_update(TrainState& st, const ForwardCache& cache,
                                              const TrainConfig& cfg, bool apply) {
    const Graph& g = st.graph;
    auto& params = st.graph.params;
    std::map<std::string, Tensor> grads;  // tensor-name keyed (activations and params)
    grads[g.outputs[0]] = cache.values.at("__dlogits");

    auto value_of = [&](const std::string& name) -> const Tensor& {
        auto it = cache.values.find(name);
        if (it != cache.values.end()) return it->second;
        return params.at(name);
    };

    for (auto it = g.nodes.rbegin(); it != g.nodes.rend(); ++it) {
        const Node& n = *it;
        if (n.kind == OpKind::Input || n.kind == OpKind::Output) continue;
        auto git = grads.find(n.output);
        if (git == grads.end()) continue;
        const Tensor gy = git->second;

        switch (n.kind) {
            case OpKind::ReLU:
                accumulate(grads, n.inputs[0], relu_bwd(gy, value_of(n.inputs[0])));
                break;
            case OpKind::ReLU6:
                accumulate(grads, n.inputs[0], relu6_bwd(gy, value_of(n.inputs[0])));
                break;
            case OpKind::Add:
                accumulate(grads, n.inputs[0], gy);
                accumulate(grads, n.inputs[1], gy);
                break;
            case OpKind::Concat: {
                std::vector<std::vector<std::int64_t>> shapes;
                for (const std::string& in : n.inputs) shapes.push_back(value_of(in).shape);
                auto parts = concat_bwd(gy, shapes, n.concat_axis);
                for (std::size_t i = 0; i < parts.size(); ++i)
                    accumulate(grads, n.inputs[i], parts[i]);
                break;
            }
            case OpKind::AvgPool:
                accumulate(grads, n.inputs[0], avgpool_bwd(gy, value_of(n.inputs[0]).shape, n.pool));
                break;
            case OpKind::BatchNorm: {
                const BNRefs& refs = *n.bn;
                const NodeCache& nc = cache.per_node.at(n.id);
                const Tensor& x = value_of(n.inputs[0]);
                std::vector<double> ggamma(nc.mu_b.size(), 0.0), gbeta(nc.mu_b.size(), 0.0);
                Tensor gx = bn_bwd_batch(gy, x, params.at(refs.gamma).data, nc.mu_b, nc.sigma_b,
                                         ggamma, gbeta);
                accumulate(grads, n.inputs[0], gx);
                accumulate(grads, refs.gamma,
                           Tensor({static_cast<std::int64_t>(ggamma.size())}, ggamma));
                accumulate(grads, refs.beta,
                           Tensor({static_cast<std::int64_t>(gbeta.size())}, gbeta));
                break;
            }
            case OpKind::FakeQuant: {
                const NodeCache& nc = cache.per_node.at(n.id);
                const Tensor& x = value_of(n.inputs[0]);
                if (n.fq.is_weight)
                    accumulate(grads, n.inputs[0], ste_gate(gy, x, nc.w_ranges, nc.w_axis));
                else
                    accumulate(grads, n.inputs[0], ste_gate(gy, x, {nc.act_range}, -1));
                break;
            }
            case OpKind::Conv2D:
            case OpKind::DepthwiseConv2D:
            case OpKind::FullyConnected: {
                const Tensor& x = value_of(n.inputs[0]);
                if (!n.fold) {
                    const Tensor& w = value_of(n.inputs[1]);
                    accumulate(grads, n.inputs[0], conv_like_bwd_input(n, gy, w, x.shape));
                    accumulate(grads, n.inputs[1], conv_like_bwd_weights(n, gy, x, w.shape));
                    if (n.inputs.size() > 2) {
                        const std::int64_t ch = value_of(n.inputs[2]).numel();
                        accumulate(grads, n.inputs[2], Tensor({ch}, channel_sums(gy, ch)));
                    }
                    break;
                }
                const FoldAttrs& fold = *n.fold;
                const NodeCache& nc = cache.per_node.at(n.id);
                const Tensor& w = params.at(n.inputs[1]);
                const Tensor* bias = n.inputs.size() > 2 ? &params.at(n.inputs[2]) : nullptr;
                const Tensor& gamma = params.at(fold.bn.gamma);
                const Tensor& mean = params.at(fold.bn.mean);
                const std::vector<double> sigma = sigma_of(params.at(fold.bn.var), fold.bn.epsilon);
                const std::size_t channels = gamma.data.size();
                const std::int64_t ch = static_cast<std::int64_t>(channels);

                std::vector<double> ggamma(channels, 0.0), gbeta(channels, 0.0),
                    gbias(channels, 0.0);

                if (nc.textbook_path) {
                    Tensor ds = bn_bwd_batch(gy, nc.s, gamma.data, nc.mu_b, nc.sigma_b, ggamma,
                                             gbeta);
                    accumulate(grads, n.inputs[0], conv_like_bwd_input(n, ds, w, x.shape));
                    accumulate(grads, n.inputs[1], conv_like_bwd_weights(n, ds, x, w.shape));
                    if (bias) {
                        const auto bs = channel_sums(ds, ch);
                        accumulate(grads, n.inputs[2], Tensor({ch}, bs));
                    }
                    accumulate(grads, fold.bn.gamma, Tensor({ch}, ggamma));
                    accumulate(grads, fold.bn.beta, Tensor({ch}, gbeta));
                    break;
                }

                if (!nc.frozen) {
                    // corrected (or naive) path with quantization active
                    const bool naive = cfg.naive_bn_fold;
                    const std::vector<double> t2 = channel_sums(gy, ch);
                    // dy and the bias-term partials
                    Tensor dy(gy.shape);
                    std::vector<double> dmu(channels, 0.0), dsig(channels, 0.0);
                    std::vector<double> t1(channels, 0.0);
                    for (std::int64_t i = 0; i < gy.numel(); ++i) {
                        const auto c = static_cast<std::size_t>(i % ch);
                        const double corr = naive ? 1.0 : sigma[c] / nc.sigma_b[c];
                        dy[i] = gy[i] * corr;
                    }
                    if (!naive)
                        for (std::int64_t i = 0; i < gy.numel(); ++i)
                            t1[static_cast<std::size_t>(i % ch)] += gy[i] * nc.y[i];
                    for (std::size_t c = 0; c < channels; ++c) {
                        const double b0 = bias ? bias->data[c] : 0.0;
                        gbeta[c] += t2[c];
                        ggamma[c] += t2[c] * (b0 - nc.mu_b[c]) / nc.sigma_b[c];
                        gbias[c] += t2[c] * gamma.data[c] / nc.sigma_b[c];
                        dmu[c] = -t2[c] * gamma.data[c] / nc.sigma_b[c];
                        dsig[c] = -t2[c] * gamma.data[c] * (b0 - nc.mu_b[c]) /
                                  (nc.sigma_b[c] * nc.sigma_b[c]);
                        if (!naive)
                            dsig[c] += -t1[c] * sigma[c] / (nc.sigma_b[c] * nc.sigma_b[c]);
                    }
                    // through the quantized weights
                    Tensor dwq = conv_like_bwd_weights(n, dy, x, w.shape);
                    Tensor du = ste_gate(dwq, nc.u, nc.w_ranges, nc.w_axis);
                    Tensor dw(w.shape);
                    for (std::int64_t i = 0; i < w.numel(); ++i) {
                        const auto c = static_cast<std::size_t>(i % ch);
                        const double denom = naive ? nc.sigma_b[c] : sigma[c];
                        dw[i] = du[i] * gamma.data[c] / denom;
                        ggamma[c] += du[i] * w[i] / denom;
                        if (naive)
                            dsig[c] += -du[i] * gamma.data[c] * w[i] /
                                       (nc.sigma_b[c] * nc.sigma_b[c]);
                    }
                    // through the batch statistics into the raw conv output
                    const double m = static_cast<double>(nc.s.numel() / ch);
                    Tensor ds(nc.s.shape);
                    for (std::int64_t i = 0; i < nc.s.numel(); ++i) {
                        const auto c = static_cast<std::size_t>(i % ch);
                        const double dvar = dsig[c] / (2.0 * nc.sigma_b[c]);
                        ds[i] = dmu[c] / m + dvar * 2.0 * (nc.s[i] - nc.mu_b[c]) / m;
                    }
                    accumulate(grads, n.inputs[0],
                               add_fwd(conv_like_bwd_input(n, dy, nc.wq, x.shape),
                                       conv_like_bwd_input(n, ds, w, x.shape)));
                    Tensor dw2 = conv_like_bwd_weights(n, ds, x, w.shape);
                    for (std::int64_t i = 0; i < dw.numel(); ++i) dw[i] += dw2[i];
                    accumulate(grads, n.inputs[1], dw);
                    if (bias) {
                        const auto bs = channel_sums(ds, ch);
                        for (std::size_t c = 0; c < channels; ++c) gbias[c] += bs[c];
                        accumulate(grads, n.inputs[2], Tensor({ch}, gbias));
                    }
                    accumulate(grads, fold.bn.gamma, Tensor({ch}, ggamma));
                    accumulate(grads, fold.bn.beta, Tensor({ch}, gbeta));
                    break;
                }

                // frozen path
                const std::vector<double> t2 = channel_sums(gy, ch);
                for (std::size_t c = 0; c < channels; ++c) {
                    const double b0 = bias ? bias->data[c] : 0.0;
                    gbeta[c] += t2[c];
                    ggamma[c] += t2[c] * (b0 - mean.data[c]) / sigma[c];
                    gbias[c] += t2[c] * gamma.data[c] / sigma[c];
                }
                Tensor dwq = conv_like_bwd_weights(n, gy, x, w.shape);
                Tensor du = (cache.fq_mode != FqMode::Off && fold.weight_fq)
                                ? ste_gate(dwq, nc.u, nc.w_ranges, nc.w_axis)
                                : dwq;
                Tensor dw(w.shape);
                for (std::int64_t i = 0; i < w.numel(); ++i) {
                    const auto c = static_cast<std::size_t>(i % ch);
                    dw[i] = du[i] * gamma.data[c] / sigma[c];
                    ggamma[c] += du[i] * w[i] / sigma[c];
                }
                accumulate(grads, n.inputs[0], conv_like_bwd_input(n, gy, nc.wq, x.shape));
                accumulate(grads, n.inputs[1], dw);
                if (bias) accumulate(grads, n.inputs[2], Tensor({ch}, gbias));
                accumulate(grads, fold.bn.gamma, Tensor({ch}, ggamma));
                accumulate(grads, fold.bn.beta, Tensor({ch}, gbeta));
                break;
            }
            default:
                break;
        }
    }

    std::map<std::string, Tensor> param_grads;
    for (const std::string& name : st.learnable) {
        auto it = grads.find(name);
        if (it == grads.end()) {
            param_grads[name] = Tensor(params.at(name).shape, 0.0);
            continue;
        }
        for (double v : it->second.data)
            if (!std::isfinite(v)) throw NonFiniteGradient("gradient of " + name + " is not finite");
        param_grads[name] = it->second;
    }

    if (apply) {
        for (const std::string& name : st.learnable) {
            Tensor& p = params.at(name);
            const Tensor& gp = param_grads.at(name);
            for (std::int64_t i = 0; i < p.numel(); ++i) p[i] -= cfg.learning_rate * gp[i];
        }
    }
    return param_grads;
}

void update_bn_statistics(TrainState& st, const ForwardCache& cache, const TrainConfig& cfg) {
    const bool freeze = st.step >= cfg.freeze_bn_delay;
    for (const Node& n : st.graph.nodes) {
        if (!n.fold) continue;
        if (freeze || st.bn_frozen) continue;  // frozen: long-term averages stay put
        auto it = cache.per_node.find(n.id);
        if (it == cache.per_node.end()) continue;
        const NodeCache& nc = it->second;
        if (nc.mu_b.empty()) continue;
        const double momentum = n.fold->bn.momentum;
        Tensor& mean = st.graph.params.at(n.fold->bn.mean);
        Tensor& var = st.graph.params.at(n.fold->bn.var);
        for (std::size_t c = 0; c < nc.mu_b.size(); ++c) {
            mean.data[c] = momentum * mean.data[c] + (1.0 - momentum) * nc.mu_b[c];
            var.data[c] = momentum * var.data[c] + (1.0 - momentum) * nc.var_b[c];
        }
    }
    if (freeze) st.bn_frozen = true;
}

std::map<std::string, RangeSpec> activation_ranges(const TrainState& st) {
    std::map<std::string, RangeSpec> out;
    for (const auto& [name, stats] : st.act_stats)
        if (stats.sample_count > 0) out[name] = stats.range();
    return out;
}

Graph make_eval_graph(const TrainState& st, const TrainConfig& cfg, bool use_ema, bool quantized) {
    Graph base = st.base_graph;
    base.params = st.graph.params;
    if (use_ema)
        for (const auto& [name, t] : st.ema) base.params[name] = t;
    Graph folded = fold_bn_eval(base);
    if (!quantized) return folded;
    return insert_fake_quant(folded, cfg.quant_config());
}

double eval_accuracy(const TrainState& st, const Dataset& data, const TrainConfig& cfg,
                     bool use_ema, bool quantized, std::int64_t max_samples) {
    const Graph eval_graph = make_eval_graph(st, cfg, use_ema, quantized);
    const std::map<std::string, RangeSpec> ranges = activation_ranges(st);
    ExecOptions opts;
    opts.fq_mode = quantized ? FqMode::Quantize : FqMode::Off;
    opts.act_ranges = &ranges;

    const std::int64_t total =
        max_samples > 0 ? std::min<std::int64_t>(max_samples, data.size()) : data.size();
    std::int64_t correct = 0;
    const std::int64_t chunk = 64;
    for (std::int64_t start = 0; start < total; start += chunk) {
        const std::int64_t count = std::min(chunk, total - start);
        std::vector<std::int64_t> idx(static_cast<std::size_t>(count));
        std::iota(idx.begin(), idx.end(), start);
        Tensor batch = data.batch_images(idx);
        const Tensor logits =
            run_graph(eval_graph, {{eval_graph.inputs[0], batch}}, opts).at(eval_graph.outputs[0]);
        const std::vector<int> pred = argmax_rows(logits);
        for (std::int64_t i = 0; i < count; ++i)
            if (pred[static_cast<std::size_t>(i)] == data.labels[static_cast<std::size_t>(start + i)])
                ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(total);
}

TrainResult train(TrainState& st, const Dataset& train_data, const Dataset& eval_data,
                  const TrainConfig& cfg) {
    cfg.validate();
    if (train_data.size() == 0) throw DataExhausted("training dataset is empty");
    TrainResult result;
    if (cfg.total_steps == 0) return result;

    std::vector<std::int64_t> order(static_cast<std::size_t>(train_data.size()));
    std::iota(order.begin(), order.end(), 0);
    std::size_t cursor = order.size();  // triggers a shuffle on first use

    for (st.step = 0; st.step < cfg.total_steps; ++st.step) {
        st.bn_frozen = st.bn_frozen || st.step >= cfg.freeze_bn_delay;

        std::vector<std::int64_t> idx;
        idx.reserve(static_cast<std::size_t>(cfg.batch_size));
        for (std::int64_t i = 0; i < cfg.batch_size; ++i) {
            if (cursor >= order.size()) {
                for (std::size_t j = order.size(); j > 1; --j)
                    std::swap(order[j - 1], order[static_cast<std::size_t>(st.rng.integer(
                                                static_cast<std::int64_t>(j)))]);
                cursor = 0;
            }
            idx.push_back(order[cursor++]);
        }

        ForwardOptions fopts;
        fopts.track_codes = true;
        ForwardCache cache =
            forward_train(st, train_data.batch_images(idx), train_data.batch_labels(idx), cfg, fopts);
        backward_update(st, cache, cfg);
        update_bn_statistics(st, cache, cfg);
        if (cfg.ema_enabled) ema_update(st.ema, st.graph.params, st.learnable, cfg.ema_decay);

        // weight-code churn: fraction of quantized weight codes that changed
        std::int64_t changed = 0, total_codes = 0;
        for (auto& [id, nc] : cache.per_node) {
            if (nc.w_codes.numel() == 0) continue;
            const std::string key = "node" + std::to_string(id);
            auto pit = st.prev_codes.find(key);
            if (pit != st.prev_codes.end() && pit->second.numel() == nc.w_codes.numel())
                for (std::int64_t i = 0; i < nc.w_codes.numel(); ++i)
                    changed += pit->second[i] != nc.w_codes[i];
            total_codes += nc.w_codes.numel();
            st.prev_codes[key] = nc.w_codes;
        }
        st.last_churn = total_codes > 0 && st.step > 0
                            ? static_cast<double>(changed) / static_cast<double>(total_codes)
                            : 0.0;

        MetricsRow row;
        row.step = st.step;
        row.loss = cache.loss;
        row.bn_frozen = st.bn_frozen;
        row.weight_code_churn = st.last_churn;
        const bool do_eval = cfg.eval_every > 0 && (st.step + 1) % cfg.eval_every == 0;
        if (do_eval) {
            const bool q = st.step >= cfg.quant_delay;
            row.eval_acc_inst = eval_accuracy(st, eval_data, cfg, false, q, cfg.eval_samples);
            row.eval_acc_ema = cfg.ema_enabled
                                   ? eval_accuracy(st, eval_data, cfg, true, q, cfg.eval_samples)
                                   : row.eval_acc_inst;
        }
        result.metrics.push_back(row);
    }

    const bool q = cfg.quant_delay < cfg.total_steps;
    result.final_acc_inst = eval_accuracy(st, eval_data, cfg, false, q, 0);
    result.final_acc_ema =
        cfg.ema_enabled ? eval_accuracy(st, eval_data, cfg, true, q, 0) : result.final_acc_inst;
    return result;
}

}  // namespace qtz
