#include "qtz/graph/execute.hpp"

#include <cmath>

#include "qtz/quant/quantize.hpp"

namespace qtz {

namespace {

std::vector<double> to_vec(const Tensor& t) { return t.data; }

std::vector<double> sigma_of(const Tensor& var, double eps) {
    std::vector<double> s(var.data.size());
    for (std::size_t i = 0; i < s.size(); ++i) s[i] = std::sqrt(var.data[i] + eps);
    return s;
}

}  // namespace

Tensor fake_quant_apply(const Tensor& t, const std::vector<QuantParams>& params, int axis,
                        FqMode mode) {
    if (mode == FqMode::Off) return t;
    Tensor out(t.shape);
    const bool per_channel = axis >= 0;
    const std::int64_t stride = per_channel ? t.inner_stride(axis) : 0;
    const std::int64_t channels = per_channel ? t.shape[static_cast<std::size_t>(axis)] : 1;
    for (std::int64_t i = 0; i < t.numel(); ++i) {
        const QuantParams& qp =
            per_channel ? params[static_cast<std::size_t>((i / stride) % channels)] : params[0];
        out[i] = mode == FqMode::Quantize ? sim_quant(t[i], qp)
                                          : clamp_to(qp.float_min(), qp.float_max(), t[i]);
    }
    return out;
}

QuantParams resolve_activation_params(const Node& fq_node, const ExecOptions& opt) {
    const FakeQuantAttrs& fq = fq_node.fq;
    RangeSpec r;
    if (!fq.ranges.empty()) {
        r = fq.ranges[0];
    } else {
        if (!opt.act_ranges)
            throw MissingRange("no range for activation tensor " + fq_node.inputs[0]);
        auto it = opt.act_ranges->find(fq_node.inputs[0]);
        if (it == opt.act_ranges->end())
            throw MissingRange("no range for activation tensor " + fq_node.inputs[0]);
        r = it->second;
    }
    return params_from_minmax(r.x_min, r.x_max, fq.n_bits, fq.scheme, fq.narrow_range);
}

Tensor folded_weights(const Graph& g, const Node& conv, const std::map<std::string, Tensor>& params) {
    (void)g;
    const FoldAttrs& fold = *conv.fold;
    Tensor w = params.at(conv.inputs[1]);
    const Tensor& gamma = params.at(fold.bn.gamma);
    const std::vector<double> sigma = sigma_of(params.at(fold.bn.var), fold.bn.epsilon);
    const std::size_t channels = gamma.data.size();
    std::vector<double> factor(channels);
    for (std::size_t c = 0; c < channels; ++c) factor[c] = gamma.data[c] / sigma[c];
    const std::int64_t ch = static_cast<std::int64_t>(channels);
    for (std::int64_t i = 0; i < w.numel(); ++i)
        w[i] *= factor[static_cast<std::size_t>(i % ch)];
    return w;
}

namespace {

// One conv-like forward, including the folded-batch-norm training semantics.
template <typename Lookup>
Tensor run_conv_like(const Node& n, const Tensor& x, const Lookup& value_of, const Graph& g,
                     const ExecOptions& opt) {
    auto conv_do = [&](const Tensor& w, const Tensor* bias) {
        switch (n.kind) {
            case OpKind::Conv2D: return conv2d_fwd(x, w, bias, n.conv);
            case OpKind::DepthwiseConv2D: return depthwise_fwd(x, w, bias, n.conv);
            case OpKind::FullyConnected: return fc_fwd(x, w, bias);
            default: throw Error("not conv-like");
        }
    };
    const Tensor& w = value_of(n.inputs[1]);
    const Tensor* bias = n.inputs.size() > 2 ? &value_of(n.inputs[2]) : nullptr;

    if (!n.fold) return conv_do(w, bias);

    const std::map<std::string, Tensor>& params = g.params;
    const FoldAttrs& fold = *n.fold;
    const Tensor& gamma = params.at(fold.bn.gamma);
    const Tensor& beta = params.at(fold.bn.beta);
    const Tensor& mean = params.at(fold.bn.mean);
    const std::vector<double> sigma = sigma_of(params.at(fold.bn.var), fold.bn.epsilon);
    const std::size_t channels = gamma.data.size();

    const bool quant_active = opt.fq_mode != FqMode::Off && fold.weight_fq.has_value();

    auto quantized_folded_weights = [&]() {
        Tensor u = folded_weights(g, n, params);
        const FakeQuantAttrs& wfq = *fold.weight_fq;
        const int axis = wfq.granularity.is_per_channel() ? wfq.granularity.axis : -1;
        const auto qps = tensor_quant_params(u, wfq.granularity, wfq.scheme, wfq.n_bits,
                                             wfq.narrow_range);
        return fake_quant_apply(u, qps, axis, opt.fq_mode);
    };

    if (!fold.freeze) {
        // batch statistics come from the raw conv output (bias included)
        Tensor s = conv_do(w, bias);
        std::vector<double> mu_b, var_b;
        moments_per_channel(s, mu_b, var_b);
        std::vector<double> sigma_b(channels);
        for (std::size_t c = 0; c < channels; ++c)
            sigma_b[c] = std::sqrt(var_b[c] + fold.bn.epsilon);
        if (!quant_active) {
            // the division by the correction factor cancels algebraically;
            // computing straight batch norm realizes that cancellation exactly
            return bn_apply(s, to_vec(gamma), to_vec(beta), mu_b, sigma_b);
        }
        Tensor y = conv_do(quantized_folded_weights(), nullptr);
        const std::int64_t ch = static_cast<std::int64_t>(channels);
        std::vector<double> bias_term(channels);
        for (std::size_t c = 0; c < channels; ++c) {
            const double b0 = bias ? bias->data[c] : 0.0;
            bias_term[c] = beta.data[c] + gamma.data[c] * (b0 - mu_b[c]) / sigma_b[c];
        }
        for (std::int64_t i = 0; i < y.numel(); ++i) {
            const auto c = static_cast<std::size_t>(i % ch);
            y[i] = y[i] * (sigma[c] / sigma_b[c]) + bias_term[c];
        }
        return y;
    }

    // frozen: long-term statistics throughout, no output correction
    Tensor wq = quant_active ? quantized_folded_weights() : folded_weights(g, n, params);
    Tensor y = conv_do(wq, nullptr);
    const std::int64_t ch = static_cast<std::int64_t>(channels);
    std::vector<double> bias_term(channels);
    for (std::size_t c = 0; c < channels; ++c) {
        const double b0 = bias ? bias->data[c] : 0.0;
        bias_term[c] = beta.data[c] + gamma.data[c] * (b0 - mean.data[c]) / sigma[c];
    }
    for (std::int64_t i = 0; i < y.numel(); ++i)
        y[i] += bias_term[static_cast<std::size_t>(i % ch)];
    return y;
}

}  // namespace

std::map<std::string, Tensor> run_graph(const Graph& g, const std::map<std::string, Tensor>& feeds,
                                        const ExecOptions& opt) {
    std::map<std::string, Tensor> env;

    auto value_of = [&](const std::string& name) -> const Tensor& {
        auto it = env.find(name);
        if (it != env.end()) return it->second;
        auto pit = g.params.find(name);
        if (pit != g.params.end()) return pit->second;
        throw Error("executor: tensor not available: " + name);
    };

    auto maybe_capture = [&](const std::string& name, const Tensor& t) {
        if (opt.capture_set && opt.capture_out && opt.capture_set->count(name))
            (*opt.capture_out)[name] = t;
    };

    for (const Node& n : g.nodes) {
        switch (n.kind) {
            case OpKind::Input: {
                auto it = feeds.find(n.output);
                if (it == feeds.end()) throw NoData("missing feed for graph input " + n.output);
                env[n.output] = it->second;
                break;
            }
            case OpKind::Output:
                break;
            case OpKind::Conv2D:
            case OpKind::DepthwiseConv2D:
            case OpKind::FullyConnected:
                env[n.output] = run_conv_like(n, value_of(n.inputs[0]), value_of, g, opt);
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
            case OpKind::ReLU:
                env[n.output] = relu_fwd(value_of(n.inputs[0]));
                break;
            case OpKind::ReLU6:
                env[n.output] = relu6_fwd(value_of(n.inputs[0]));
                break;
            case OpKind::BatchNorm: {
                const BNRefs& refs = *n.bn;
                const Tensor& x = value_of(n.inputs[0]);
                const std::vector<double> gamma = to_vec(g.params.at(refs.gamma));
                const std::vector<double> beta = to_vec(g.params.at(refs.beta));
                if (opt.training_bn) {
                    std::vector<double> mu_b, var_b;
                    moments_per_channel(x, mu_b, var_b);
                    std::vector<double> sigma_b(var_b.size());
                    for (std::size_t c = 0; c < var_b.size(); ++c)
                        sigma_b[c] = std::sqrt(var_b[c] + refs.epsilon);
                    env[n.output] = bn_apply(x, gamma, beta, mu_b, sigma_b);
                } else {
                    env[n.output] = bn_apply(x, gamma, beta, to_vec(g.params.at(refs.mean)),
                                             sigma_of(g.params.at(refs.var), refs.epsilon));
                }
                break;
            }
            case OpKind::AvgPool:
                env[n.output] = avgpool_fwd(value_of(n.inputs[0]), n.pool);
                break;
            case OpKind::FakeQuant: {
                const Tensor& x = value_of(n.inputs[0]);
                if (n.fq.is_weight) {
                    const int axis =
                        n.fq.granularity.is_per_channel() ? n.fq.granularity.axis : -1;
                    const auto qps = tensor_quant_params(x, n.fq.granularity, n.fq.scheme,
                                                         n.fq.n_bits, n.fq.narrow_range);
                    env[n.output] = fake_quant_apply(x, qps, axis, opt.fq_mode);
                } else {
                    if (opt.fq_mode == FqMode::Off) {
                        env[n.output] = x;
                    } else {
                        const QuantParams qp = resolve_activation_params(n, opt);
                        env[n.output] = fake_quant_apply(x, {qp}, -1, opt.fq_mode);
                    }
                }
                break;
            }
        }
        if (n.kind != OpKind::Output && !n.output.empty()) maybe_capture(n.output, env[n.output]);
    }

    std::map<std::string, Tensor> outputs;
    for (const std::string& o : g.outputs) outputs[o] = value_of(o);
    return outputs;
}

}  // namespace qtz
