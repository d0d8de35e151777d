#include "qtz/runtime/qmodel.hpp"

#include <chrono>

#include "qtz/graph/execute.hpp"
#include "qtz/graph/rewrites.hpp"

namespace qtz {

namespace {

bool is_activation(OpKind k) { return k == OpKind::ReLU || k == OpKind::ReLU6; }

}  // namespace

QModelRuntime::QModelRuntime(QuantizedModel model) : model_(std::move(model)) {
    if (model_.weights_only)
        throw Error("weight-only artifact has no integer execution path");
    const Graph& g = model_.graph;

    // effective quantizer per tensor: boundary params, propagated back through
    // a fused activation to the producing op's output
    for (const Node& n : g.nodes) {
        if (n.kind == OpKind::Output) continue;
        const std::string& t = n.output;
        auto it = model_.act_qp.find(t);
        if (it != model_.act_qp.end()) {
            eff_qp_[t] = it->second;
            continue;
        }
    }
    // walk backwards so relu chains resolve
    for (auto it = g.nodes.rbegin(); it != g.nodes.rend(); ++it) {
        const Node& n = *it;
        if (n.kind == OpKind::Output || eff_qp_.count(n.output)) continue;
        const auto consumers = g.consumers(n.output);
        if (consumers.size() == 1 &&
            is_activation(g.nodes[static_cast<std::size_t>(consumers[0])].kind)) {
            const std::string& down = g.nodes[static_cast<std::size_t>(consumers[0])].output;
            auto dit = eff_qp_.find(down);
            if (dit != eff_qp_.end()) {
                eff_qp_[n.output] = dit->second;
                continue;
            }
        }
        throw MissingRange("no quantizer for tensor " + n.output);
    }

    for (const Node& n : g.nodes) {
        if (!n.is_conv_like()) continue;
        const TensorQuant& w = model_.weights.at(n.inputs[1]);
        const QuantParams& qp_x = eff_qp_.at(n.inputs[0]);
        const QuantParams& qp_y = eff_qp_.at(n.output);
        auto bit = model_.bias_i32.find(n.name);
        const std::vector<std::int32_t> bias =
            bit != model_.bias_i32.end() ? bit->second : std::vector<std::int32_t>{};
        if (n.kind == OpKind::FullyConnected) {
            plans_.emplace(n.id, plan_qconv_i32(false,
                                                Conv2DGeom{1, 1, Padding::Valid},
                                                CodeTensor({1, 1, w.codes.dim(0), w.codes.dim(1)},
                                                           w.codes.data),
                                                w.params, qp_x, qp_y, bias));
        } else {
            plans_.emplace(n.id, plan_qconv_i32(n.kind == OpKind::DepthwiseConv2D, n.conv, w.codes,
                                                w.params, qp_x, qp_y, bias));
        }
    }
}

Tensor QModelRuntime::run(const Tensor& input) {
    const Graph& g = model_.graph;
    std::map<std::string, CodeTensor> env;

    auto timed = [&](const std::string& name, auto&& fn) {
        const auto t0 = std::chrono::steady_clock::now();
        auto result = fn();
        const auto t1 = std::chrono::steady_clock::now();
        layer_seconds_[name] += std::chrono::duration<double>(t1 - t0).count();
        return result;
    };

    for (const Node& n : g.nodes) {
        switch (n.kind) {
            case OpKind::Input:
                env[n.output] = quantize_tensor_with(input, eff_qp_.at(n.output));
                break;
            case OpKind::Output:
                break;
            case OpKind::Conv2D:
            case OpKind::DepthwiseConv2D:
                env[n.output] = timed(n.name, [&] {
                    return qconv2d(plans_.at(n.id), env.at(n.inputs[0]));
                });
                break;
            case OpKind::FullyConnected:
                env[n.output] = timed(n.name, [&] {
                    return qfc(plans_.at(n.id), env.at(n.inputs[0]));
                });
                break;
            case OpKind::ReLU:
                env[n.output] = timed(n.name, [&] {
                    return qrelu(env.at(n.inputs[0]), eff_qp_.at(n.output));
                });
                break;
            case OpKind::ReLU6:
                env[n.output] = timed(n.name, [&] {
                    return qrelu6(env.at(n.inputs[0]), eff_qp_.at(n.output));
                });
                break;
            case OpKind::Add:
                env[n.output] = timed(n.name, [&] {
                    return qadd(env.at(n.inputs[0]), eff_qp_.at(n.inputs[0]), env.at(n.inputs[1]),
                                eff_qp_.at(n.inputs[1]), eff_qp_.at(n.output));
                });
                break;
            case OpKind::Concat:
                env[n.output] = timed(n.name, [&] {
                    std::vector<const CodeTensor*> ins;
                    std::vector<QuantParams> qps;
                    for (const std::string& in : n.inputs) {
                        ins.push_back(&env.at(in));
                        qps.push_back(eff_qp_.at(in));
                    }
                    return qconcat(ins, qps, n.concat_axis, eff_qp_.at(n.output));
                });
                break;
            case OpKind::AvgPool:
                env[n.output] = timed(n.name, [&] {
                    return qavgpool(env.at(n.inputs[0]), eff_qp_.at(n.inputs[0]),
                                    eff_qp_.at(n.output), n.pool);
                });
                break;
            case OpKind::BatchNorm:
            case OpKind::FakeQuant:
                throw UnsupportedTopology("converted model contains " + op_kind_name(n.kind));
        }
    }
    return dequantize_tensor_with(env.at(g.outputs[0]), eff_qp_.at(g.outputs[0]));
}

Graph weights_only_float_graph(const QuantizedModel& qm) {
    Graph g = qm.graph;
    for (const auto& [name, tq] : qm.weights) g.params[name] = dequantize_tensor(tq);
    for (const auto& [name, t] : qm.float_params) g.params[name] = t;
    return g;
}

Tensor run_weights_only(const QuantizedModel& qm, const Tensor& input) {
    Graph g = weights_only_float_graph(qm);
    ExecOptions opts;
    opts.fq_mode = FqMode::Off;
    return run_graph(g, {{g.inputs[0], input}}, opts).at(g.outputs[0]);
}

}  // namespace qtz
