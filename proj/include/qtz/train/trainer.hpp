#pragma once

#include <optional>

#include "qtz/graph/execute.hpp"
#include "qtz/graph/rewrites.hpp"
#include "qtz/io/dataset.hpp"
#include "qtz/rng.hpp"
#include "qtz/train/config.hpp"
#include "qtz/train/state.hpp"

namespace qtz {

// Per-node values saved by the forward pass for the hand-written backward.
struct NodeCache {
    Tensor s;                          // raw conv output (batch-stat path)
    std::vector<double> mu_b, var_b, sigma_b;  // batch statistics of s
    Tensor u;                          // folded float weights before quantization
    Tensor wq;                         // weights actually convolved
    Tensor y;                          // main-path conv output before correction/bias
    std::vector<RangeSpec> w_ranges;   // per-slice STE gate ranges
    int w_axis = -1;
    bool textbook_path = false;        // pre-freeze float path (plain batch norm)
    bool frozen = false;
    RangeSpec act_range{0.0, 0.0};     // activation fake-quant gate
    CodeTensor w_codes;                // quantized weight codes (churn metric)
};

struct ForwardCache {
    std::map<std::string, Tensor> values;
    std::map<int, NodeCache> per_node;
    double loss = 0.0;
    std::vector<int> labels;
    FqMode fq_mode = FqMode::Off;
};

// The trainable model: the training graph (folded + fake-quantized), the
// original float graph it derives from, master float parameters, EMA copies,
// activation statistics, and the step counter. Quantized weights are always a
// pure function of the current float parameters.
struct TrainState {
    Graph base_graph;   // unfolded float graph
    Graph graph;        // training graph
    std::map<std::string, Tensor> ema;
    std::map<std::string, CalibrationStats> act_stats;
    std::vector<std::string> learnable;
    std::int64_t step = 0;
    bool bn_frozen = false;
    Rng rng{1};
    double last_churn = 0.0;
    std::map<std::string, CodeTensor> prev_codes;
};

TrainState make_train_state(const Graph& float_graph, const TrainConfig& cfg);

struct ForwardOptions {
    std::optional<FqMode> mode;  // default: Quantize after quant_delay, Off before
    bool update_stats = true;
    bool track_codes = false;
};

// Forward pass with caches. Weights pass through simulated quantization (per
// config granularity), activation boundaries through per-layer affine
// quantizers fed by the moving ranges; the batch-norm path follows the
// correction-and-freeze scheme.
ForwardCache forward_train(TrainState& st, const Tensor& images, const std::vector<int>& labels,
                           const TrainConfig& cfg, const ForwardOptions& opts = {});

// Straight-through backward pass. Returns the parameter gradients; applies the
// SGD update to the master float weights when `apply` is true.
std::map<std::string, Tensor> backward_update(TrainState& st, const ForwardCache& cache,
                                              const TrainConfig& cfg, bool apply = true);

// Moving-average update (or freeze) of every folded batch norm from the batch
// statistics cached by the forward pass.
void update_bn_statistics(TrainState& st, const ForwardCache& cache, const TrainConfig& cfg);

struct MetricsRow {
    std::int64_t step = 0;
    double loss = 0.0;
    double eval_acc_inst = -1.0;  // -1: not evaluated this step
    double eval_acc_ema = -1.0;
    bool bn_frozen = false;
    double weight_code_churn = 0.0;
};

struct TrainResult {
    std::vector<MetricsRow> metrics;
    double final_acc_inst = 0.0;
    double final_acc_ema = 0.0;
};

TrainResult train(TrainState& st, const Dataset& train_data, const Dataset& eval_data,
                  const TrainConfig& cfg);

// Accuracy of the eval-rewritten model (fold_bn_eval + insert_fake_quant) on a
// dataset, using instantaneous or EMA weights.
double eval_accuracy(const TrainState& st, const Dataset& data, const TrainConfig& cfg,
                     bool use_ema, bool quantized, std::int64_t max_samples = 0);

// The eval graph for the current (or EMA) parameters.
Graph make_eval_graph(const TrainState& st, const TrainConfig& cfg, bool use_ema, bool quantized);

// Activation ranges table (zero-relaxed) for executor/conversion use.
std::map<std::string, RangeSpec> activation_ranges(const TrainState& st);

}  // namespace qtz
