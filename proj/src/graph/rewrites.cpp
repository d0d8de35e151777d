#include "qtz/graph/rewrites.hpp"

#include <algorithm>
#include <cmath>
#include <set>

namespace qtz {

namespace {

bool is_activation(OpKind k) { return k == OpKind::ReLU || k == OpKind::ReLU6; }

bool is_compute(OpKind k) {
    switch (k) {
        case OpKind::Conv2D:
        case OpKind::DepthwiseConv2D:
        case OpKind::FullyConnected:
        case OpKind::Add:
        case OpKind::Concat:
        case OpKind::AvgPool:
            return true;
        default:
            return false;
    }
}

// Per-output-channel scale/offset applied to a weight tensor in place.
void scale_weight_channels(Tensor& w, OpKind kind, const std::vector<double>& factor) {
    if (kind == OpKind::Conv2D) {
        const std::int64_t cout = w.dim(3);
        for (std::int64_t i = 0; i < w.numel(); ++i)
            w[i] *= factor[static_cast<std::size_t>(i % cout)];
    } else if (kind == OpKind::DepthwiseConv2D) {
        // output channel of element (kh, kw, c, m) is c*M + m
        const std::int64_t c = w.dim(2), mult = w.dim(3);
        for (std::int64_t i = 0; i < w.numel(); ++i)
            w[i] *= factor[static_cast<std::size_t>(i % (c * mult))];
    } else if (kind == OpKind::FullyConnected) {
        const std::int64_t out = w.dim(1);
        for (std::int64_t i = 0; i < w.numel(); ++i)
            w[i] *= factor[static_cast<std::size_t>(i % out)];
    } else {
        throw Error("scale_weight_channels: not a weight op");
    }
}

struct FoldSite {
    int conv_idx;
    int bn_idx;
};

// Find conv+BN pairs, checking the topology the fold supports.
std::vector<FoldSite> find_fold_sites(const Graph& g) {
    std::vector<FoldSite> sites;
    for (std::size_t i = 0; i < g.nodes.size(); ++i) {
        const Node& bn = g.nodes[i];
        if (bn.kind != OpKind::BatchNorm) continue;
        const Node* prod = g.producer(bn.inputs[0]);
        if (!prod || !prod->is_conv_like())
            throw UnsupportedTopology("batch norm '" + bn.name +
                                      "' does not follow a conv/depthwise/fc op");
        if (prod->fold)
            throw UnsupportedTopology("batch norm '" + bn.name + "' follows an already-folded op");
        if (g.consumers(prod->output).size() != 1)
            throw UnsupportedTopology("conv '" + prod->name +
                                      "' output has other consumers besides its batch norm");
        int conv_idx = -1;
        for (std::size_t j = 0; j < g.nodes.size(); ++j)
            if (&g.nodes[j] == prod) conv_idx = static_cast<int>(j);
        sites.push_back({conv_idx, static_cast<int>(i)});
    }
    return sites;
}

std::vector<double> sigma_from_var(const Tensor& var, double epsilon) {
    std::vector<double> s(var.data.size());
    for (std::size_t i = 0; i < s.size(); ++i) s[i] = std::sqrt(var.data[i] + epsilon);
    return s;
}

}  // namespace

std::vector<std::string> activation_boundaries(const Graph& g) {
    std::vector<std::string> out;
    for (const Node& n : g.nodes) {
        if (n.kind == OpKind::Input) {
            out.push_back(n.output);
            continue;
        }
        if (is_activation(n.kind)) {
            out.push_back(n.output);
            continue;
        }
        const bool folded_conv = n.is_conv_like() && n.fold.has_value();
        if (is_compute(n.kind) || folded_conv) {
            const std::vector<int> cons = g.consumers(n.output);
            // fused with a following activation (or a batch norm that will
            // fold into this op): the boundary moves past the consumer
            if (cons.size() == 1) {
                const OpKind ck = g.nodes[static_cast<std::size_t>(cons[0])].kind;
                if (is_activation(ck) || ck == OpKind::BatchNorm) continue;
            }
            out.push_back(n.output);
            continue;
        }
        if (n.kind == OpKind::BatchNorm) {
            const std::vector<int> cons = g.consumers(n.output);
            if (cons.size() == 1 && is_activation(g.nodes[static_cast<std::size_t>(cons[0])].kind))
                continue;
            out.push_back(n.output);
        }
    }
    return out;
}

Graph insert_fake_quant(const Graph& g, const QuantConfig& cfg) {
    if (g.has_fake_quant()) throw AlreadyQuantized("graph already contains FakeQuant nodes");

    const std::vector<std::string> boundary_list = activation_boundaries(g);
    const std::set<std::string> boundaries(boundary_list.begin(), boundary_list.end());

    Graph out;
    out.inputs = g.inputs;
    out.outputs = g.outputs;
    out.params = g.params;

    int id = g.next_id();
    std::map<std::string, std::string> rename;  // old tensor -> quantized tensor

    auto weight_fq_attrs = [&](OpKind kind) {
        FakeQuantAttrs attrs;
        attrs.scheme = cfg.weight_scheme;
        attrs.n_bits = cfg.weight_bits;
        attrs.narrow_range = cfg.weight_narrow;
        attrs.granularity = cfg.weight_per_channel
                                ? Granularity::per_channel(weight_channel_axis(kind))
                                : Granularity::per_layer();
        attrs.is_weight = true;
        return attrs;
    };

    for (const Node& n : g.nodes) {
        Node node = n;
        for (std::string& in : node.inputs) {
            auto it = rename.find(in);
            if (it != rename.end()) in = it->second;
        }
        if (node.is_conv_like()) {
            if (node.fold) {
                // the quantizer applies to the folded weights inside the op
                node.fold->weight_fq = weight_fq_attrs(node.kind);
            } else {
                Node wq;
                wq.id = id++;
                wq.kind = OpKind::FakeQuant;
                wq.name = node.name + "_wq";
                wq.inputs = {node.inputs[1]};
                wq.output = node.inputs[1] + "__q";
                wq.fq = weight_fq_attrs(node.kind);
                node.inputs[1] = wq.output;
                out.nodes.push_back(std::move(wq));
            }
        }
        const std::string produced = node.output;
        out.nodes.push_back(std::move(node));
        if (!produced.empty() && boundaries.count(produced)) {
            Node aq;
            aq.id = id++;
            aq.kind = OpKind::FakeQuant;
            aq.name = produced + "_aq";
            aq.inputs = {produced};
            aq.output = produced + "__q";
            aq.fq.scheme = Scheme::Affine;
            aq.fq.n_bits = cfg.act_bits;
            aq.fq.granularity = Granularity::per_layer();
            aq.fq.is_weight = false;
            rename[produced] = aq.output;
            out.nodes.push_back(std::move(aq));
        }
    }
    for (std::string& o : out.outputs) {
        auto it = rename.find(o);
        if (it != rename.end()) o = it->second;
    }
    out.validate();
    return out;
}

Graph fold_bn_eval(const Graph& g) {
    const std::vector<FoldSite> sites = find_fold_sites(g);
    Graph out = g;
    std::set<int> drop;
    for (const FoldSite& site : sites) {
        Node& conv = out.nodes[static_cast<std::size_t>(site.conv_idx)];
        const Node& bn = out.nodes[static_cast<std::size_t>(site.bn_idx)];
        const BNRefs& refs = *bn.bn;
        const Tensor& gamma = out.params.at(refs.gamma);
        const Tensor& beta = out.params.at(refs.beta);
        const Tensor& mean = out.params.at(refs.mean);
        const std::vector<double> sigma = sigma_from_var(out.params.at(refs.var), refs.epsilon);
        const std::size_t channels = gamma.data.size();

        std::vector<double> factor(channels);
        for (std::size_t c = 0; c < channels; ++c) factor[c] = gamma.data[c] / sigma[c];
        scale_weight_channels(out.params.at(conv.inputs[1]), conv.kind, factor);

        Tensor bias({static_cast<std::int64_t>(channels)}, 0.0);
        if (conv.inputs.size() > 2) bias = out.params.at(conv.inputs[2]);
        for (std::size_t c = 0; c < channels; ++c)
            bias.data[c] = beta.data[c] + factor[c] * (bias.data[c] - mean.data[c]);
        const std::string bias_name = conv.name + "_b_folded";
        out.params[bias_name] = std::move(bias);
        if (conv.inputs.size() > 2)
            conv.inputs[2] = bias_name;
        else
            conv.inputs.push_back(bias_name);

        conv.output = bn.output;  // downstream consumers see the same tensor
        out.params.erase(refs.gamma);
        out.params.erase(refs.beta);
        out.params.erase(refs.mean);
        out.params.erase(refs.var);
        drop.insert(site.bn_idx);
    }
    Graph result;
    result.inputs = out.inputs;
    result.outputs = out.outputs;
    result.params = std::move(out.params);
    for (std::size_t i = 0; i < out.nodes.size(); ++i)
        if (!drop.count(static_cast<int>(i))) result.nodes.push_back(std::move(out.nodes[i]));
    result.validate();
    return result;
}

Graph fold_bn_training(const Graph& g, bool freeze) {
    if (g.has_fake_quant())
        throw AlreadyQuantized("fold_bn_training must run before insert_fake_quant");
    const std::vector<FoldSite> sites = find_fold_sites(g);
    Graph out = g;
    std::set<int> drop;
    for (const FoldSite& site : sites) {
        Node& conv = out.nodes[static_cast<std::size_t>(site.conv_idx)];
        const Node& bn = out.nodes[static_cast<std::size_t>(site.bn_idx)];
        conv.fold = FoldAttrs{*bn.bn, freeze, std::nullopt};
        conv.output = bn.output;
        drop.insert(site.bn_idx);
    }
    Graph result;
    result.inputs = out.inputs;
    result.outputs = out.outputs;
    result.params = std::move(out.params);
    for (std::size_t i = 0; i < out.nodes.size(); ++i)
        if (!drop.count(static_cast<int>(i))) result.nodes.push_back(std::move(out.nodes[i]));
    result.validate();
    return result;
}

Graph set_fold_freeze(const Graph& g, bool freeze) {
    Graph out = g;
    for (Node& n : out.nodes)
        if (n.fold) n.fold->freeze = freeze;
    return out;
}

}  // namespace qtz
