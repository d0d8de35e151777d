#pragma once

#include <map>
#include <string>

#include "qtz/graph/graph.hpp"
#include "qtz/kernels/qconv.hpp"
#include "qtz/kernels/qops.hpp"

namespace qtz {

// A converted integer model: the folded graph topology plus code tensors,
// per-tensor quantizers and int32 biases. Weight-only artifacts keep float
// biases and no activation quantizers; they execute in float.
struct QuantizedModel {
    Graph graph;  // folded; params empty (weights live below as codes)
    bool weights_only = false;
    int weight_bits = 8;
    std::map<std::string, QuantParams> act_qp;            // boundary tensor -> params
    std::map<std::string, TensorQuant> weights;           // weight name -> codes+params
    std::map<std::string, std::vector<std::int32_t>> bias_i32;  // conv node name -> bias
    std::map<std::string, Tensor> float_params;           // weight-only biases
};

// Prepared execution state: per-layer plans and the effective output
// quantizer of every tensor (activation quantizers propagate backwards
// through fused ReLU/ReLU6 consumers).
class QModelRuntime {
public:
    explicit QModelRuntime(QuantizedModel model);

    // Quantizes the float input, runs the integer graph, dequantizes the
    // output. Per-layer wall times accumulate into layer_seconds.
    Tensor run(const Tensor& input);

    const QuantizedModel& model() const { return model_; }
    const std::map<std::string, double>& layer_seconds() const { return layer_seconds_; }
    const QuantParams& tensor_params(const std::string& tensor) const { return eff_qp_.at(tensor); }

private:
    QuantizedModel model_;
    std::map<int, QConvPlan> plans_;
    std::map<std::string, QuantParams> eff_qp_;
    std::map<std::string, double> layer_seconds_;
};

// Weight-only path: dequantize the stored codes back to floats and run the
// float executor.
Tensor run_weights_only(const QuantizedModel& qm, const Tensor& input);

// Reconstruct a float graph from a weight-only artifact (weights dequantized).
Graph weights_only_float_graph(const QuantizedModel& qm);

}  // namespace qtz
