#pragma once

#include <map>

#include "qtz/graph/rewrites.hpp"
#include "qtz/io/dataset.hpp"
#include "qtz/runtime/qmodel.hpp"

namespace qtz {

// Post-training quantization configuration. Activations are always per-layer
// affine; about 100 calibration mini-batches suffice for the range estimates.
struct PTQConfig {
    Scheme weight_scheme = Scheme::SymmetricSigned;
    bool weight_narrow = false;
    bool weight_per_channel = true;
    int weight_bits = 8;
    int act_bits = 8;
    std::int64_t calibration_batches = 100;
    std::int64_t calibration_batch_size = 32;
    double act_momentum = 0.99;
    bool global_minmax = false;  // use the global min/max instead of the moving average

    void validate() const {
        if (weight_bits != 4 && weight_bits != 8) throw ConfigError("weight_bits must be 4 or 8");
        if (act_bits != 4 && act_bits != 8) throw ConfigError("act_bits must be 4 or 8");
        if (calibration_batches < 1) throw ConfigError("calibration_batches must be >= 1");
    }

    QuantConfig quant_config() const {
        QuantConfig q;
        q.weight_scheme = weight_scheme;
        q.weight_narrow = weight_narrow;
        q.weight_per_channel = weight_per_channel;
        q.weight_bits = weight_bits;
        q.act_bits = act_bits;
        return q;
    }
};

// Weight-only quantization of a BN-folded float model: every conv/fc weight
// tensor is replaced by its quantize-then-dequantize image; the model still
// executes in float and no data is needed.
struct WeightQuantization {
    Graph model;                                // weights sim-quantized in place
    std::map<std::string, TensorQuant> codes;   // weight name -> codes+params
};
WeightQuantization quantize_weights_only(const Graph& folded_model, const PTQConfig& cfg);

// Run calibration batches through the float model, feeding per-boundary
// moving min/max stats; returns the zero-relaxed ranges.
std::map<std::string, RangeSpec> calibrate(const Graph& folded_model, const Dataset& data,
                                           const PTQConfig& cfg);

// Build the integer model: weight codes, activation quantizers from the
// calibrated ranges, int32 biases. Throws MissingRange naming any activation
// boundary without a range.
QuantizedModel convert(const Graph& folded_model, const std::map<std::string, RangeSpec>& ranges,
                       const PTQConfig& cfg);

// Weight-only artifact (codes + params, float biases, activations left float).
QuantizedModel convert_weights_only(const Graph& folded_model, const PTQConfig& cfg);

}  // namespace qtz
