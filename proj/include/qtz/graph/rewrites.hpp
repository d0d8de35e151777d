#pragma once

#include "qtz/graph/graph.hpp"

namespace qtz {

// Weight/activation quantizer configuration shared by the training rewrite,
// calibration and conversion. Activations are always per-layer affine.
struct QuantConfig {
    Scheme weight_scheme = Scheme::SymmetricSigned;
    bool weight_narrow = false;
    bool weight_per_channel = true;
    int weight_bits = 8;
    int act_bits = 8;
};

// Activation tensors that materialize at inference time and therefore carry a
// quantizer: graph inputs, ReLU/ReLU6 outputs, and compute-op outputs that are
// not consumed solely by a fused activation (or a foldable batch norm). The
// order follows the node order.
std::vector<std::string> activation_boundaries(const Graph& g);

// Insert simulated-quantization ops: one on every weight input of a
// conv/depthwise/fc node and one on every activation boundary. Nothing goes
// between an op and the activation it fuses with at inference. Rejects graphs
// that already contain FakeQuant nodes.
Graph insert_fake_quant(const Graph& g, const QuantConfig& cfg);

// Inference-time batch-norm folding: removes every BatchNorm node and rewrites
// the producing op's weights to gamma*W/sigma and bias to beta - gamma*mu/sigma,
// with sigma = sqrt(moving_var + epsilon).
Graph fold_bn_eval(const Graph& g);

// Training-time folding with correction: replaces conv+BN pairs by a folded
// conv whose execution applies the correction-factor scheme. Must run before
// insert_fake_quant.
Graph fold_bn_training(const Graph& g, bool freeze);

// Flip the freeze flag on every training-folded conv.
Graph set_fold_freeze(const Graph& g, bool freeze);

}  // namespace qtz
