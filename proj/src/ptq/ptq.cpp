#include "qtz/ptq/ptq.hpp"

#include <algorithm>
#include <numeric>
#include <set>

#include "qtz/graph/execute.hpp"
#include "qtz/train/state.hpp"

namespace qtz {

namespace {

Granularity weight_granularity(const PTQConfig& cfg, OpKind kind) {
    return cfg.weight_per_channel ? Granularity::per_channel(weight_channel_axis(kind))
                                  : Granularity::per_layer();
}

void require_no_batchnorm(const Graph& g) {
    for (const Node& n : g.nodes)
        if (n.kind == OpKind::BatchNorm || n.fold)
            throw UnsupportedTopology("model must be BN-folded first (fold_bn_eval)");
}

}  // namespace

WeightQuantization quantize_weights_only(const Graph& folded_model, const PTQConfig& cfg) {
    cfg.validate();
    require_no_batchnorm(folded_model);
    WeightQuantization out;
    out.model = folded_model;
    for (const Node& n : folded_model.nodes) {
        if (!n.is_conv_like()) continue;
        const Tensor& w = folded_model.params.at(n.inputs[1]);
        TensorQuant tq = quantize_tensor(w, weight_granularity(cfg, n.kind), cfg.weight_scheme,
                                         cfg.weight_bits, cfg.weight_narrow);
        out.model.params.at(n.inputs[1]) = dequantize_tensor(tq);
        out.codes.emplace(n.inputs[1], std::move(tq));
    }
    return out;
}

std::map<std::string, RangeSpec> calibrate(const Graph& folded_model, const Dataset& data,
                                           const PTQConfig& cfg) {
    cfg.validate();
    require_no_batchnorm(folded_model);
    if (data.size() == 0) throw NoData("calibration dataset is empty");

    const std::vector<std::string> boundary_list = activation_boundaries(folded_model);
    const std::set<std::string> boundaries(boundary_list.begin(), boundary_list.end());
    std::map<std::string, CalibrationStats> stats;
    for (const std::string& b : boundary_list) stats[b].momentum = cfg.act_momentum;

    std::map<std::string, Tensor> captured;
    ExecOptions opts;
    opts.fq_mode = FqMode::Off;
    opts.capture_set = &boundaries;
    opts.capture_out = &captured;

    std::int64_t cursor = 0;
    for (std::int64_t batch = 0; batch < cfg.calibration_batches; ++batch) {
        std::vector<std::int64_t> idx(static_cast<std::size_t>(cfg.calibration_batch_size));
        for (auto& v : idx) {
            v = cursor;
            cursor = (cursor + 1) % data.size();
        }
        captured.clear();
        run_graph(folded_model, {{folded_model.inputs[0], data.batch_images(idx)}}, opts);
        for (const std::string& b : boundary_list) {
            const Tensor& t = captured.at(b);
            if (cfg.global_minmax) {
                double lo = t[0], hi = t[0];
                for (std::int64_t i = 1; i < t.numel(); ++i) {
                    lo = std::min(lo, t[i]);
                    hi = std::max(hi, t[i]);
                }
                auto& s = stats[b];
                if (s.sample_count == 0) {
                    s.moving_min = lo;
                    s.moving_max = hi;
                } else {
                    s.moving_min = std::min(s.moving_min, lo);
                    s.moving_max = std::max(s.moving_max, hi);
                }
                ++s.sample_count;
            } else {
                update_activation_ranges(stats[b], t);
            }
        }
    }

    std::map<std::string, RangeSpec> ranges;
    for (const auto& [name, s] : stats) ranges[name] = s.range();  // relaxed after the final EMA
    return ranges;
}

QuantizedModel convert(const Graph& folded_model, const std::map<std::string, RangeSpec>& ranges,
                       const PTQConfig& cfg) {
    cfg.validate();
    require_no_batchnorm(folded_model);
    QuantizedModel qm;
    qm.weights_only = false;
    qm.weight_bits = cfg.weight_bits;
    qm.graph = folded_model;
    qm.graph.params.clear();

    for (const std::string& b : activation_boundaries(folded_model)) {
        auto it = ranges.find(b);
        if (it == ranges.end()) throw MissingRange("no calibrated range for tensor " + b);
        const RangeSpec r = it->second;
        qm.act_qp[b] = params_from_minmax(r.x_min, r.x_max, cfg.act_bits, Scheme::Affine);
    }

    for (const Node& n : folded_model.nodes) {
        if (!n.is_conv_like()) continue;
        const Tensor& w = folded_model.params.at(n.inputs[1]);
        TensorQuant tq = quantize_tensor(w, weight_granularity(cfg, n.kind), cfg.weight_scheme,
                                         cfg.weight_bits, cfg.weight_narrow);

        // int32 bias at scale_w[n] * scale_x
        if (n.inputs.size() > 2) {
            const Tensor& b = folded_model.params.at(n.inputs[2]);
            // the conv input is an activation boundary (or reaches one through
            // a fused activation producer); resolve its params
            auto qx = qm.act_qp.find(n.inputs[0]);
            if (qx == qm.act_qp.end()) throw MissingRange("no range for tensor " + n.inputs[0]);
            const std::int64_t cout = b.numel();
            std::vector<std::int32_t> bias(static_cast<std::size_t>(cout));
            for (std::int64_t c = 0; c < cout; ++c) {
                const QuantParams& wqp =
                    tq.params.size() > 1 ? tq.params[static_cast<std::size_t>(c)] : tq.params[0];
                bias[static_cast<std::size_t>(c)] = static_cast<std::int32_t>(
                    iround_half_away(b[c] / (wqp.scale * qx->second.scale)));
            }
            qm.bias_i32.emplace(n.name, std::move(bias));
        }
        qm.weights.emplace(n.inputs[1], std::move(tq));
    }
    return qm;
}

QuantizedModel convert_weights_only(const Graph& folded_model, const PTQConfig& cfg) {
    cfg.validate();
    require_no_batchnorm(folded_model);
    QuantizedModel qm;
    qm.weights_only = true;
    qm.weight_bits = cfg.weight_bits;
    qm.graph = folded_model;
    qm.graph.params.clear();
    for (const Node& n : folded_model.nodes) {
        if (!n.is_conv_like()) continue;
        const Tensor& w = folded_model.params.at(n.inputs[1]);
        qm.weights.emplace(n.inputs[1],
                           quantize_tensor(w, weight_granularity(cfg, n.kind), cfg.weight_scheme,
                                           cfg.weight_bits, cfg.weight_narrow));
        if (n.inputs.size() > 2)
            qm.float_params.emplace(n.inputs[2], folded_model.params.at(n.inputs[2]));
    }
    return qm;
}

}  // namespace qtz
