#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "qtz/kernels/float_ops.hpp"
#include "qtz/quant/params.hpp"
#include "qtz/tensor.hpp"

namespace qtz {

enum class OpKind {
    Input,
    Output,
    Conv2D,
    DepthwiseConv2D,
    FullyConnected,
    Add,
    Concat,
    ReLU,
    ReLU6,
    BatchNorm,
    AvgPool,
    FakeQuant,
};

std::string op_kind_name(OpKind k);
OpKind op_kind_from_name(const std::string& name);

// Names of the batch-norm parameter tensors plus the numeric attributes.
struct BNRefs {
    std::string gamma;
    std::string beta;
    std::string mean;  // long-term mean
    std::string var;   // long-term variance; sigma = sqrt(var + epsilon)
    double epsilon = 1e-3;
    double momentum = 0.9;
};

struct FakeQuantAttrs {
    Scheme scheme = Scheme::Affine;
    int n_bits = 8;
    bool narrow_range = false;
    Granularity granularity = Granularity::per_layer();
    bool is_weight = false;
    // Resolved float ranges (one per slice). Empty means dynamic: weights
    // derive ranges from the tensor itself, activations from supplied stats.
    std::vector<RangeSpec> ranges;
};

// A batch-norm folded into its producing conv for training. The weights are
// scaled by the correction factor to the long-term statistics before
// quantization; before the freeze the output is divided by the correction so
// the result matches regular batch norm, after it the long-term statistics
// take over entirely.
struct FoldAttrs {
    BNRefs bn;
    bool freeze = false;
    std::optional<FakeQuantAttrs> weight_fq;  // set by insert_fake_quant
};

struct Node {
    int id = -1;
    OpKind kind = OpKind::Input;
    std::string name;
    std::vector<std::string> inputs;  // data input first, then weight/bias
    std::string output;

    // attributes; only those matching `kind` are meaningful
    Conv2DGeom conv;
    std::optional<BNRefs> bn;
    std::optional<FoldAttrs> fold;
    FakeQuantAttrs fq;
    PoolGeom pool;
    int concat_axis = 3;
    std::vector<std::int64_t> input_shape;  // Input nodes

    bool is_conv_like() const {
        return kind == OpKind::Conv2D || kind == OpKind::DepthwiseConv2D ||
               kind == OpKind::FullyConnected;
    }
};

struct Graph {
    std::vector<Node> nodes;  // topological order
    std::vector<std::string> inputs;
    std::vector<std::string> outputs;
    std::map<std::string, Tensor> params;
    std::map<std::string, std::vector<std::int64_t>> shapes;  // filled by infer_shapes

    const Node* producer(const std::string& tensor) const;
    std::vector<int> consumers(const std::string& tensor) const;
    bool has_fake_quant() const;
    int next_id() const;

    // Structural validation: unique producers, inputs resolve to an earlier
    // node, a param or a graph input (enforces acyclicity for an ordered list).
    void validate() const;
};

// Output-channel axis of a weight tensor: Conv2D [Kh,Kw,Cin,Cout] -> 3,
// DepthwiseConv2D [Kh,Kw,C,M] -> 2 (one kernel per input channel),
// FullyConnected [In,Out] -> 1.
int weight_channel_axis(OpKind kind);

// Shape inference over NHWC tensors. Returns a copy of the graph with
// `shapes` filled for every tensor; throws ShapeMismatch naming the node.
Graph infer_shapes(const Graph& g);

class GraphBuilder {
public:
    std::string input(const std::string& name, std::vector<std::int64_t> shape);
    std::string conv2d(const std::string& name, const std::string& x, Tensor w,
                       std::optional<Tensor> bias, Conv2DGeom geom);
    std::string depthwise_conv2d(const std::string& name, const std::string& x, Tensor w,
                                 std::optional<Tensor> bias, Conv2DGeom geom);
    std::string fully_connected(const std::string& name, const std::string& x, Tensor w,
                                std::optional<Tensor> bias);
    std::string batch_norm(const std::string& name, const std::string& x, Tensor gamma, Tensor beta,
                           Tensor mean, Tensor var, double epsilon = 1e-3, double momentum = 0.9);
    std::string relu(const std::string& name, const std::string& x);
    std::string relu6(const std::string& name, const std::string& x);
    std::string add(const std::string& name, const std::string& a, const std::string& b);
    std::string concat(const std::string& name, const std::vector<std::string>& xs, int axis);
    std::string avg_pool(const std::string& name, const std::string& x, PoolGeom geom);
    void mark_output(const std::string& tensor);
    Graph build();

private:
    Node& append(OpKind kind, const std::string& name, std::vector<std::string> inputs);
    Graph g_;
    int id_ = 0;
};

}  // namespace qtz
