#include "qtz/graph/graph.hpp"

#include <algorithm>
#include <set>

namespace qtz {

std::string op_kind_name(OpKind k) {
    switch (k) {
        case OpKind::Input: return "Input";
        case OpKind::Output: return "Output";
        case OpKind::Conv2D: return "Conv2D";
        case OpKind::DepthwiseConv2D: return "DepthwiseConv2D";
        case OpKind::FullyConnected: return "FullyConnected";
        case OpKind::Add: return "Add";
        case OpKind::Concat: return "Concat";
        case OpKind::ReLU: return "ReLU";
        case OpKind::ReLU6: return "ReLU6";
        case OpKind::BatchNorm: return "BatchNorm";
        case OpKind::AvgPool: return "AvgPool";
        case OpKind::FakeQuant: return "FakeQuant";
    }
    return "Input";
}

OpKind op_kind_from_name(const std::string& name) {
    static const std::map<std::string, OpKind> table = {
        {"Input", OpKind::Input},       {"Output", OpKind::Output},
        {"Conv2D", OpKind::Conv2D},     {"DepthwiseConv2D", OpKind::DepthwiseConv2D},
        {"FullyConnected", OpKind::FullyConnected},
        {"Add", OpKind::Add},           {"Concat", OpKind::Concat},
        {"ReLU", OpKind::ReLU},         {"ReLU6", OpKind::ReLU6},
        {"BatchNorm", OpKind::BatchNorm}, {"AvgPool", OpKind::AvgPool},
        {"FakeQuant", OpKind::FakeQuant},
    };
    auto it = table.find(name);
    if (it == table.end()) throw FormatError("unknown op kind: " + name);
    return it->second;
}

int weight_channel_axis(OpKind kind) {
    switch (kind) {
        case OpKind::Conv2D: return 3;
        case OpKind::DepthwiseConv2D: return 2;
        case OpKind::FullyConnected: return 1;
        default: throw Error("op has no weight tensor");
    }
}

const Node* Graph::producer(const std::string& tensor) const {
    for (const Node& n : nodes)
        if (n.output == tensor) return &n;
    return nullptr;
}

std::vector<int> Graph::consumers(const std::string& tensor) const {
    std::vector<int> out;
    for (std::size_t i = 0; i < nodes.size(); ++i)
        for (const std::string& in : nodes[i].inputs)
            if (in == tensor) {
                out.push_back(static_cast<int>(i));
                break;
            }
    return out;
}

bool Graph::has_fake_quant() const {
    for (const Node& n : nodes)
        if (n.kind == OpKind::FakeQuant || (n.fold && n.fold->weight_fq)) return true;
    return false;
}

int Graph::next_id() const {
    int id = 0;
    for (const Node& n : nodes) id = std::max(id, n.id + 1);
    return id;
}

void Graph::validate() const {
    std::set<std::string> available(inputs.begin(), inputs.end());
    for (const auto& [name, t] : params) {
        (void)t;
        if (!available.insert(name).second) throw Error("param name collides with input: " + name);
    }
    std::set<std::string> produced;
    for (const Node& n : nodes) {
        if (n.kind == OpKind::Input) {
            if (std::find(inputs.begin(), inputs.end(), n.output) == inputs.end())
                throw Error("Input node output not in graph inputs: " + n.output);
            continue;
        }
        for (const std::string& in : n.inputs)
            if (!available.count(in))
                throw Error("node " + n.name + " consumes unavailable tensor " + in);
        if (n.kind != OpKind::Output) {
            if (!available.insert(n.output).second)
                throw Error("tensor produced twice: " + n.output);
            produced.insert(n.output);
        }
    }
    for (const std::string& out : outputs)
        if (!available.count(out)) throw Error("graph output unavailable: " + out);
}

Graph infer_shapes(const Graph& g) {
    Graph out = g;
    auto& shapes = out.shapes;
    shapes.clear();
    for (const auto& [name, t] : g.params) shapes[name] = t.shape;

    auto shape_of = [&](const Node& n, const std::string& tensor) -> const std::vector<std::int64_t>& {
        auto it = shapes.find(tensor);
        if (it == shapes.end())
            throw ShapeMismatch("node " + std::to_string(n.id) + " (" + n.name + "): no shape for " +
                                tensor);
        return it->second;
    };

    for (const Node& n : out.nodes) {
        switch (n.kind) {
            case OpKind::Input:
                shapes[n.output] = n.input_shape;
                break;
            case OpKind::Output:
                break;
            case OpKind::Conv2D:
            case OpKind::DepthwiseConv2D: {
                const auto& xs = shape_of(n, n.inputs[0]);
                const auto& ws = shape_of(n, n.inputs[1]);
                if (xs.size() != 4 || ws.size() != 4)
                    throw ShapeMismatch("node " + std::to_string(n.id) + ": conv expects rank-4");
                if (ws[2] != xs[3])
                    throw ShapeMismatch("node " + std::to_string(n.id) + " (" + n.name +
                                        "): weight channel dim " + std::to_string(ws[2]) +
                                        " vs input channels " + std::to_string(xs[3]));
                const PadInfo p = conv_out_geom(xs[1], xs[2], ws[0], ws[1], n.conv.stride_h,
                                                n.conv.stride_w, n.conv.padding);
                const std::int64_t cout = n.kind == OpKind::Conv2D ? ws[3] : ws[2] * ws[3];
                shapes[n.output] = {xs[0], p.out_h, p.out_w, cout};
                break;
            }
            case OpKind::FullyConnected: {
                const auto& xs = shape_of(n, n.inputs[0]);
                const auto& ws = shape_of(n, n.inputs[1]);
                std::int64_t f = 1;
                for (std::size_t i = 1; i < xs.size(); ++i) f *= xs[i];
                if (ws.size() != 2 || ws[0] != f)
                    throw ShapeMismatch("node " + std::to_string(n.id) + " (" + n.name +
                                        "): fc weight rows " + std::to_string(ws[0]) +
                                        " vs flattened features " + std::to_string(f));
                shapes[n.output] = {xs[0], ws[1]};
                break;
            }
            case OpKind::Add: {
                const auto& a = shape_of(n, n.inputs[0]);
                const auto& b = shape_of(n, n.inputs[1]);
                if (a != b)
                    throw ShapeMismatch("node " + std::to_string(n.id) + " (" + n.name + "): add " +
                                        shape_str(a) + " vs " + shape_str(b));
                shapes[n.output] = a;
                break;
            }
            case OpKind::Concat: {
                auto shape = shape_of(n, n.inputs[0]);
                std::int64_t total = 0;
                for (const std::string& in : n.inputs) {
                    const auto& s = shape_of(n, in);
                    if (s.size() != shape.size())
                        throw ShapeMismatch("node " + std::to_string(n.id) + ": concat rank mismatch");
                    for (std::size_t d = 0; d < s.size(); ++d)
                        if (static_cast<int>(d) != n.concat_axis && s[d] != shape[d])
                            throw ShapeMismatch("node " + std::to_string(n.id) +
                                                ": concat non-axis dims differ");
                    total += s[static_cast<std::size_t>(n.concat_axis)];
                }
                shape[static_cast<std::size_t>(n.concat_axis)] = total;
                shapes[n.output] = shape;
                break;
            }
            case OpKind::ReLU:
            case OpKind::ReLU6:
            case OpKind::FakeQuant:
                shapes[n.output] = shape_of(n, n.inputs[0]);
                break;
            case OpKind::BatchNorm: {
                const auto& xs = shape_of(n, n.inputs[0]);
                const auto& gs = shape_of(n, n.bn->gamma);
                if (gs.size() != 1 || gs[0] != xs.back())
                    throw ShapeMismatch("node " + std::to_string(n.id) + " (" + n.name +
                                        "): batch-norm vector length vs channels");
                shapes[n.output] = xs;
                break;
            }
            case OpKind::AvgPool: {
                const auto& xs = shape_of(n, n.inputs[0]);
                const PadInfo p = conv_out_geom(xs[1], xs[2], n.pool.window_h, n.pool.window_w,
                                                n.pool.stride_h, n.pool.stride_w, n.pool.padding);
                shapes[n.output] = {xs[0], p.out_h, p.out_w, xs[3]};
                break;
            }
        }
    }
    return out;
}

Node& GraphBuilder::append(OpKind kind, const std::string& name, std::vector<std::string> inputs) {
    Node n;
    n.id = id_++;
    n.kind = kind;
    n.name = name;
    n.inputs = std::move(inputs);
    n.output = name;
    g_.nodes.push_back(std::move(n));
    return g_.nodes.back();
}

std::string GraphBuilder::input(const std::string& name, std::vector<std::int64_t> shape) {
    Node& n = append(OpKind::Input, name, {});
    n.input_shape = std::move(shape);
    g_.inputs.push_back(name);
    return name;
}

std::string GraphBuilder::conv2d(const std::string& name, const std::string& x, Tensor w,
                                 std::optional<Tensor> bias, Conv2DGeom geom) {
    std::vector<std::string> ins = {x, name + "_w"};
    g_.params[name + "_w"] = std::move(w);
    if (bias) {
        g_.params[name + "_b"] = std::move(*bias);
        ins.push_back(name + "_b");
    }
    Node& n = append(OpKind::Conv2D, name, std::move(ins));
    n.conv = geom;
    return n.output;
}

std::string GraphBuilder::depthwise_conv2d(const std::string& name, const std::string& x, Tensor w,
                                           std::optional<Tensor> bias, Conv2DGeom geom) {
    std::vector<std::string> ins = {x, name + "_w"};
    g_.params[name + "_w"] = std::move(w);
    if (bias) {
        g_.params[name + "_b"] = std::move(*bias);
        ins.push_back(name + "_b");
    }
    Node& n = append(OpKind::DepthwiseConv2D, name, std::move(ins));
    n.conv = geom;
    return n.output;
}

std::string GraphBuilder::fully_connected(const std::string& name, const std::string& x, Tensor w,
                                          std::optional<Tensor> bias) {
    std::vector<std::string> ins = {x, name + "_w"};
    g_.params[name + "_w"] = std::move(w);
    if (bias) {
        g_.params[name + "_b"] = std::move(*bias);
        ins.push_back(name + "_b");
    }
    append(OpKind::FullyConnected, name, std::move(ins));
    return name;
}

std::string GraphBuilder::batch_norm(const std::string& name, const std::string& x, Tensor gamma,
                                     Tensor beta, Tensor mean, Tensor var, double epsilon,
                                     double momentum) {
    BNRefs refs{name + "_gamma", name + "_beta", name + "_mean", name + "_var", epsilon, momentum};
    g_.params[refs.gamma] = std::move(gamma);
    g_.params[refs.beta] = std::move(beta);
    g_.params[refs.mean] = std::move(mean);
    g_.params[refs.var] = std::move(var);
    Node& n = append(OpKind::BatchNorm, name, {x});
    n.bn = refs;
    return name;
}

std::string GraphBuilder::relu(const std::string& name, const std::string& x) {
    return append(OpKind::ReLU, name, {x}).output;
}

std::string GraphBuilder::relu6(const std::string& name, const std::string& x) {
    return append(OpKind::ReLU6, name, {x}).output;
}

std::string GraphBuilder::add(const std::string& name, const std::string& a, const std::string& b) {
    return append(OpKind::Add, name, {a, b}).output;
}

std::string GraphBuilder::concat(const std::string& name, const std::vector<std::string>& xs,
                                 int axis) {
    Node& n = append(OpKind::Concat, name, xs);
    n.concat_axis = axis;
    return n.output;
}

std::string GraphBuilder::avg_pool(const std::string& name, const std::string& x, PoolGeom geom) {
    Node& n = append(OpKind::AvgPool, name, {x});
    n.pool = geom;
    return n.output;
}

void GraphBuilder::mark_output(const std::string& tensor) {
    Node& n = append(OpKind::Output, tensor + "_out", {tensor});
    n.output.clear();
    g_.outputs.push_back(tensor);
}

Graph GraphBuilder::build() {
    g_.validate();
    return std::move(g_);
}

}  // namespace qtz
