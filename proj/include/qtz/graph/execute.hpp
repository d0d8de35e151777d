#pragma once

#include <map>
#include <set>

#include "qtz/graph/graph.hpp"

namespace qtz {

enum class FqMode {
    Off,             // pass-through (float semantics)
    Quantize,        // quantize-then-dequantize
    ClampSurrogate,  // clamp to the quantizer's float range; the surface the STE differentiates
};

struct ExecOptions {
    bool training_bn = false;  // BatchNorm and unfrozen folded convs use batch statistics
    FqMode fq_mode = FqMode::Quantize;
    // Dynamic activation ranges, keyed by the observed tensor name. Consulted
    // when a FakeQuant node carries no resolved ranges.
    const std::map<std::string, RangeSpec>* act_ranges = nullptr;
    // Capture intermediate tensors by name (calibration taps).
    const std::set<std::string>* capture_set = nullptr;
    std::map<std::string, Tensor>* capture_out = nullptr;
};

// Pure forward pass. Feeds are the graph-input tensors; returns the output
// tensors by name. Single threaded and deterministic.
std::map<std::string, Tensor> run_graph(const Graph& g, const std::map<std::string, Tensor>& feeds,
                                        const ExecOptions& opt = {});

// Apply a fake-quant transfer function elementwise given resolved params.
Tensor fake_quant_apply(const Tensor& t, const std::vector<QuantParams>& params, int axis,
                        FqMode mode);

// Resolve the QuantParams of an activation fake-quant node from its attrs and
// (if needed) the dynamic range table.
QuantParams resolve_activation_params(const Node& fq_node, const ExecOptions& opt);

// Folded training weights gamma*W/sigma for a conv-like node.
Tensor folded_weights(const Graph& g, const Node& conv, const std::map<std::string, Tensor>& params);

}  // namespace qtz
