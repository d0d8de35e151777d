#include "qtz/io/artifact.hpp"

#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>

#include "json.hpp"

namespace qtz {

namespace {

using nlohmann::json;

constexpr std::uint64_t kAlign = 64;

// ------------------------------- blob writer -------------------------------

enum class Dtype { F32, U8, I8, I32 };

std::string dtype_name(Dtype d) {
    switch (d) {
        case Dtype::F32: return "f32";
        case Dtype::U8: return "u8";
        case Dtype::I8: return "i8";
        case Dtype::I32: return "i32";
    }
    return "f32";
}

Dtype dtype_from_name(const std::string& s) {
    if (s == "f32") return Dtype::F32;
    if (s == "u8") return Dtype::U8;
    if (s == "i8") return Dtype::I8;
    if (s == "i32") return Dtype::I32;
    throw FormatError("unknown dtype " + s);
}

std::size_t dtype_size(Dtype d) { return d == Dtype::F32 || d == Dtype::I32 ? 4 : 1; }

struct BlobWriter {
    std::vector<unsigned char> bytes;

    std::uint64_t append(const void* data, std::size_t len) {
        while (bytes.size() % kAlign != 0) bytes.push_back(0);
        const std::uint64_t offset = bytes.size();
        const auto* p = static_cast<const unsigned char*>(data);
        bytes.insert(bytes.end(), p, p + len);
        return offset;
    }
};

json tensor_entry(BlobWriter& blob, const std::string& name, Dtype dtype,
                  const std::vector<std::int64_t>& shape, const void* data, std::size_t len) {
    json t;
    t["name"] = name;
    t["dtype"] = dtype_name(dtype);
    t["shape"] = shape;
    t["offset"] = blob.append(data, len);
    t["length"] = len;
    return t;
}

json float_tensor_entry(BlobWriter& blob, const std::string& name, const Tensor& t) {
    std::vector<float> f(t.data.size());
    for (std::size_t i = 0; i < f.size(); ++i) f[i] = static_cast<float>(t.data[i]);
    return tensor_entry(blob, name, Dtype::F32, t.shape, f.data(), f.size() * 4);
}

json code_tensor_entry(BlobWriter& blob, const std::string& name, const CodeTensor& t,
                       bool is_signed, int n_bits) {
    (void)n_bits;  // 4-bit codes are stored one per byte (no packing)
    if (is_signed) {
        std::vector<signed char> b(t.data.size());
        for (std::size_t i = 0; i < b.size(); ++i) b[i] = static_cast<signed char>(t.data[i]);
        return tensor_entry(blob, name, Dtype::I8, t.shape, b.data(), b.size());
    }
    std::vector<unsigned char> b(t.data.size());
    for (std::size_t i = 0; i < b.size(); ++i) b[i] = static_cast<unsigned char>(t.data[i]);
    return tensor_entry(blob, name, Dtype::U8, t.shape, b.data(), b.size());
}

// ------------------------------- blob reader -------------------------------

struct BlobReader {
    std::vector<unsigned char> bytes;

    explicit BlobReader(const std::string& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw NoData("cannot open blob file " + path);
        in.seekg(0, std::ios::end);
        bytes.resize(static_cast<std::size_t>(in.tellg()));
        in.seekg(0);
        in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    }

    const unsigned char* at(std::uint64_t offset, std::uint64_t len) const {
        if (offset + len > bytes.size()) throw FormatError("blob offset out of bounds");
        return bytes.data() + offset;
    }
};

Tensor read_float_tensor(const BlobReader& blob, const json& t) {
    const std::vector<std::int64_t> shape = t.at("shape").get<std::vector<std::int64_t>>();
    const std::uint64_t offset = t.at("offset");
    const std::uint64_t len = t.at("length");
    Tensor out(shape);
    if (len != static_cast<std::uint64_t>(out.numel()) * 4) throw FormatError("f32 length mismatch");
    const unsigned char* p = blob.at(offset, len);
    for (std::int64_t i = 0; i < out.numel(); ++i) {
        float f;
        std::memcpy(&f, p + i * 4, 4);
        out[i] = f;
    }
    return out;
}

CodeTensor read_code_tensor(const BlobReader& blob, const json& t) {
    const std::vector<std::int64_t> shape = t.at("shape").get<std::vector<std::int64_t>>();
    const std::uint64_t offset = t.at("offset");
    const std::uint64_t len = t.at("length");
    const Dtype d = dtype_from_name(t.at("dtype"));
    CodeTensor out(shape);
    const unsigned char* p = blob.at(offset, len);
    if (d == Dtype::I8) {
        for (std::int64_t i = 0; i < out.numel(); ++i)
            out[i] = static_cast<signed char>(p[static_cast<std::size_t>(i)]);
    } else if (d == Dtype::U8) {
        for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = p[static_cast<std::size_t>(i)];
    } else {
        throw FormatError("expected code tensor dtype");
    }
    return out;
}

// ------------------------------ quant params -------------------------------

json qp_to_json(const QuantParams& qp) {
    json j;
    j["scale"] = qp.scale;
    j["zero_point"] = qp.zero_point;
    j["n_bits"] = qp.n_bits;
    j["scheme"] = scheme_name(qp.scheme);
    j["narrow_range"] = qp.narrow_range;
    return j;
}

QuantParams qp_from_json(const json& j) {
    QuantParams qp;
    qp.scale = j.at("scale");
    qp.zero_point = j.at("zero_point");
    qp.n_bits = j.at("n_bits");
    qp.scheme = scheme_from_name(j.at("scheme"));
    qp.narrow_range = j.at("narrow_range");
    qp.validate();
    return qp;
}

// --------------------------------- graph -----------------------------------

json fq_to_json(const FakeQuantAttrs& fq) {
    json j;
    j["scheme"] = scheme_name(fq.scheme);
    j["n_bits"] = fq.n_bits;
    j["narrow_range"] = fq.narrow_range;
    j["per_channel"] = fq.granularity.is_per_channel();
    j["axis"] = fq.granularity.axis;
    j["is_weight"] = fq.is_weight;
    if (!fq.ranges.empty()) {
        json rs = json::array();
        for (const RangeSpec& r : fq.ranges) rs.push_back(json{{"min", r.x_min}, {"max", r.x_max}});
        j["ranges"] = rs;
    }
    return j;
}

FakeQuantAttrs fq_from_json(const json& j) {
    FakeQuantAttrs fq;
    fq.scheme = scheme_from_name(j.at("scheme"));
    fq.n_bits = j.at("n_bits");
    fq.narrow_range = j.at("narrow_range");
    fq.granularity = j.at("per_channel").get<bool>() ? Granularity::per_channel(j.at("axis"))
                                                     : Granularity::per_layer();
    fq.is_weight = j.at("is_weight");
    if (j.contains("ranges"))
        for (const json& r : j.at("ranges"))
            fq.ranges.push_back({r.at("min"), r.at("max")});
    return fq;
}

json bn_to_json(const BNRefs& bn) {
    return json{{"gamma", bn.gamma},     {"beta", bn.beta},         {"mean", bn.mean},
                {"var", bn.var},         {"epsilon", bn.epsilon},   {"momentum", bn.momentum}};
}

BNRefs bn_from_json(const json& j) {
    BNRefs bn;
    bn.gamma = j.at("gamma");
    bn.beta = j.at("beta");
    bn.mean = j.at("mean");
    bn.var = j.at("var");
    bn.epsilon = j.at("epsilon");
    bn.momentum = j.at("momentum");
    return bn;
}

std::string padding_name(Padding p) { return p == Padding::Same ? "SAME" : "VALID"; }
Padding padding_from_name(const std::string& s) {
    if (s == "SAME") return Padding::Same;
    if (s == "VALID") return Padding::Valid;
    throw FormatError("unknown padding " + s);
}

json node_to_json(const Node& n) {
    json j;
    j["id"] = n.id;
    j["kind"] = op_kind_name(n.kind);
    j["name"] = n.name;
    j["inputs"] = n.inputs;
    j["output"] = n.output;
    switch (n.kind) {
        case OpKind::Conv2D:
        case OpKind::DepthwiseConv2D:
            j["stride"] = {n.conv.stride_h, n.conv.stride_w};
            j["padding"] = padding_name(n.conv.padding);
            break;
        case OpKind::AvgPool:
            j["window"] = {n.pool.window_h, n.pool.window_w};
            j["stride"] = {n.pool.stride_h, n.pool.stride_w};
            j["padding"] = padding_name(n.pool.padding);
            break;
        case OpKind::Concat:
            j["axis"] = n.concat_axis;
            break;
        case OpKind::BatchNorm:
            j["bn"] = bn_to_json(*n.bn);
            break;
        case OpKind::FakeQuant:
            j["fq"] = fq_to_json(n.fq);
            break;
        case OpKind::Input:
            j["shape"] = n.input_shape;
            break;
        default:
            break;
    }
    if (n.fold) {
        json f;
        f["bn"] = bn_to_json(n.fold->bn);
        f["freeze"] = n.fold->freeze;
        if (n.fold->weight_fq) f["weight_fq"] = fq_to_json(*n.fold->weight_fq);
        j["fold"] = f;
    }
    return j;
}

Node node_from_json(const json& j) {
    Node n;
    n.id = j.at("id");
    n.kind = op_kind_from_name(j.at("kind"));
    n.name = j.at("name");
    n.inputs = j.at("inputs").get<std::vector<std::string>>();
    n.output = j.at("output");
    switch (n.kind) {
        case OpKind::Conv2D:
        case OpKind::DepthwiseConv2D:
            n.conv.stride_h = j.at("stride")[0];
            n.conv.stride_w = j.at("stride")[1];
            n.conv.padding = padding_from_name(j.at("padding"));
            break;
        case OpKind::AvgPool:
            n.pool.window_h = j.at("window")[0];
            n.pool.window_w = j.at("window")[1];
            n.pool.stride_h = j.at("stride")[0];
            n.pool.stride_w = j.at("stride")[1];
            n.pool.padding = padding_from_name(j.at("padding"));
            break;
        case OpKind::Concat:
            n.concat_axis = j.at("axis");
            break;
        case OpKind::BatchNorm:
            n.bn = bn_from_json(j.at("bn"));
            break;
        case OpKind::FakeQuant:
            n.fq = fq_from_json(j.at("fq"));
            break;
        case OpKind::Input:
            n.input_shape = j.at("shape").get<std::vector<std::int64_t>>();
            break;
        default:
            break;
    }
    if (j.contains("fold")) {
        FoldAttrs f;
        f.bn = bn_from_json(j.at("fold").at("bn"));
        f.freeze = j.at("fold").at("freeze");
        if (j.at("fold").contains("weight_fq")) f.weight_fq = fq_from_json(j.at("fold").at("weight_fq"));
        n.fold = f;
    }
    return n;
}

json graph_to_json(const Graph& g) {
    json j;
    j["inputs"] = g.inputs;
    j["outputs"] = g.outputs;
    json nodes = json::array();
    for (const Node& n : g.nodes) nodes.push_back(node_to_json(n));
    j["nodes"] = nodes;
    return j;
}

Graph graph_from_json(const json& j) {
    Graph g;
    g.inputs = j.at("inputs").get<std::vector<std::string>>();
    g.outputs = j.at("outputs").get<std::vector<std::string>>();
    for (const json& n : j.at("nodes")) g.nodes.push_back(node_from_json(n));
    return g;
}

std::string blob_name(const std::string& manifest_path) {
    return std::filesystem::path(manifest_path).filename().string() + ".bin";
}

void write_files(const std::string& path, json& manifest, const BlobWriter& blob) {
    manifest["blob"] = blob_name(path);
    std::ofstream mb(std::filesystem::path(path).parent_path().empty()
                         ? blob_name(path)
                         : (std::filesystem::path(path).parent_path() / blob_name(path)).string(),
                     std::ios::binary);
    if (!mb) throw Error("cannot write blob for " + path);
    mb.write(reinterpret_cast<const char*>(blob.bytes.data()),
             static_cast<std::streamsize>(blob.bytes.size()));
    mb.close();
    std::ofstream mf(path, std::ios::binary);
    if (!mf) throw Error("cannot write " + path);
    mf << manifest.dump();
}

json read_manifest(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw NoData("cannot open " + path);
    json j;
    in >> j;
    if (j.at("version") != "qtz-v1") throw FormatError("unsupported format version");
    return j;
}

BlobReader read_blob_for(const std::string& path, const json& manifest) {
    const std::string name = manifest.at("blob");
    const auto dir = std::filesystem::path(path).parent_path();
    return BlobReader(dir.empty() ? name : (dir / name).string());
}

}  // namespace

void save_float_model(const std::string& path, const Graph& g, const TrainingExtras* extras) {
    json manifest;
    manifest["version"] = "qtz-v1";
    manifest["kind"] = "float";
    manifest["graph"] = graph_to_json(g);
    BlobWriter blob;
    json tensors = json::array();
    for (const auto& [name, t] : g.params) tensors.push_back(float_tensor_entry(blob, name, t));
    if (extras) {
        json tr;
        tr["step"] = extras->step;
        tr["bn_frozen"] = extras->bn_frozen;
        json stats = json::object();
        for (const auto& [name, s] : extras->act_stats)
            stats[name] = json{{"moving_min", s.moving_min},
                               {"moving_max", s.moving_max},
                               {"momentum", s.momentum},
                               {"sample_count", s.sample_count}};
        tr["act_stats"] = stats;
        json ema_names = json::array();
        for (const auto& [name, t] : extras->ema) {
            tensors.push_back(float_tensor_entry(blob, "__ema__" + name, t));
            ema_names.push_back(name);
        }
        tr["ema"] = ema_names;
        manifest["training"] = tr;
    }
    manifest["tensors"] = tensors;
    write_files(path, manifest, blob);
}

LoadedModel load_float_model(const std::string& path) {
    const json manifest = read_manifest(path);
    if (manifest.at("kind") != "float") throw FormatError(path + " is not a float model artifact");
    const BlobReader blob = read_blob_for(path, manifest);
    LoadedModel out;
    out.graph = graph_from_json(manifest.at("graph"));
    std::map<std::string, Tensor> ema;
    for (const json& t : manifest.at("tensors")) {
        const std::string name = t.at("name");
        if (name.rfind("__ema__", 0) == 0)
            ema[name.substr(7)] = read_float_tensor(blob, t);
        else
            out.graph.params[name] = read_float_tensor(blob, t);
    }
    out.graph.validate();
    if (manifest.contains("training")) {
        TrainingExtras ex;
        const json& tr = manifest.at("training");
        ex.step = tr.at("step");
        ex.bn_frozen = tr.at("bn_frozen");
        for (auto it = tr.at("act_stats").begin(); it != tr.at("act_stats").end(); ++it) {
            CalibrationStats s;
            s.moving_min = it.value().at("moving_min");
            s.moving_max = it.value().at("moving_max");
            s.momentum = it.value().at("momentum");
            s.sample_count = it.value().at("sample_count");
            ex.act_stats[it.key()] = s;
        }
        ex.ema = std::move(ema);
        out.extras = std::move(ex);
    }
    return out;
}

void save_quantized_model(const std::string& path, const QuantizedModel& qm) {
    json manifest;
    manifest["version"] = "qtz-v1";
    manifest["kind"] = qm.weights_only ? "weights-only" : "quantized";
    manifest["weight_bits"] = qm.weight_bits;
    manifest["graph"] = graph_to_json(qm.graph);
    BlobWriter blob;
    json tensors = json::array();

    for (const auto& [name, tq] : qm.weights) {
        const bool s = tq.params[0].scheme == Scheme::SymmetricSigned;
        json t = code_tensor_entry(blob, name, tq.codes, s, tq.params[0].n_bits);
        json qps = json::array();
        for (const QuantParams& qp : tq.params) qps.push_back(qp_to_json(qp));
        t["quant"] = qps;
        t["per_channel"] = tq.granularity.is_per_channel();
        t["axis"] = tq.granularity.axis;
        tensors.push_back(t);
    }
    for (const auto& [node_name, bias] : qm.bias_i32) {
        json t = tensor_entry(blob, "__bias__" + node_name, Dtype::I32,
                              {static_cast<std::int64_t>(bias.size())}, bias.data(),
                              bias.size() * 4);
        tensors.push_back(t);
    }
    for (const auto& [name, t] : qm.float_params) tensors.push_back(float_tensor_entry(blob, name, t));
    manifest["tensors"] = tensors;

    json act = json::object();
    for (const auto& [name, qp] : qm.act_qp) act[name] = qp_to_json(qp);
    manifest["activations"] = act;

    write_files(path, manifest, blob);
}

QuantizedModel load_quantized_model(const std::string& path) {
    const json manifest = read_manifest(path);
    const std::string kind = manifest.at("kind");
    if (kind != "quantized" && kind != "weights-only")
        throw FormatError(path + " is not a quantized model artifact");
    const BlobReader blob = read_blob_for(path, manifest);
    QuantizedModel qm;
    qm.weights_only = kind == "weights-only";
    qm.weight_bits = manifest.at("weight_bits");
    qm.graph = graph_from_json(manifest.at("graph"));

    for (const json& t : manifest.at("tensors")) {
        const std::string name = t.at("name");
        const Dtype d = dtype_from_name(t.at("dtype"));
        if (name.rfind("__bias__", 0) == 0) {
            const std::uint64_t offset = t.at("offset");
            const std::uint64_t len = t.at("length");
            const unsigned char* p = blob.at(offset, len);
            std::vector<std::int32_t> bias(len / 4);
            std::memcpy(bias.data(), p, len);
            qm.bias_i32[name.substr(8)] = std::move(bias);
        } else if (d == Dtype::F32) {
            qm.float_params[name] = read_float_tensor(blob, t);
        } else {
            TensorQuant tq;
            tq.codes = read_code_tensor(blob, t);
            for (const json& qp : t.at("quant")) tq.params.push_back(qp_from_json(qp));
            tq.granularity = t.at("per_channel").get<bool>() ? Granularity::per_channel(t.at("axis"))
                                                             : Granularity::per_layer();
            qm.weights[name] = std::move(tq);
        }
    }
    if (manifest.contains("activations"))
        for (auto it = manifest.at("activations").begin(); it != manifest.at("activations").end();
             ++it)
            qm.act_qp[it.key()] = qp_from_json(it.value());
    return qm;
}

std::string artifact_kind(const std::string& path) {
    return read_manifest(path).at("kind");
}

void save_ranges_json(const std::string& path, const std::map<std::string, RangeSpec>& ranges) {
    json j;
    j["version"] = "qtz-v1";
    json r = json::object();
    for (const auto& [name, range] : ranges)
        r[name] = json{{"min", range.x_min}, {"max", range.x_max}};
    j["ranges"] = r;
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write " + path);
    out << j.dump(1);
}

std::map<std::string, RangeSpec> load_ranges_json(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw NoData("cannot open " + path);
    json j;
    in >> j;
    std::map<std::string, RangeSpec> ranges;
    for (auto it = j.at("ranges").begin(); it != j.at("ranges").end(); ++it)
        ranges[it.key()] = {it.value().at("min"), it.value().at("max")};
    return ranges;
}

void write_metrics_csv(const std::string& path, const std::vector<MetricsRow>& rows) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write " + path);
    out << "step,loss,eval_acc_inst,eval_acc_ema,bn_frozen,weight_code_churn\n";
    for (const MetricsRow& r : rows) {
        out << r.step << ',' << r.loss << ',';
        if (r.eval_acc_inst >= 0) out << r.eval_acc_inst;
        out << ',';
        if (r.eval_acc_ema >= 0) out << r.eval_acc_ema;
        out << ',' << (r.bn_frozen ? 1 : 0) << ',' << r.weight_code_churn << '\n';
    }
}

ArtifactSizes artifact_sizes(const std::string& path) {
    const json manifest = read_manifest(path);
    ArtifactSizes sizes;
    // weight tensors = second input of every conv/depthwise/fc node
    const Graph g = graph_from_json(manifest.at("graph"));
    std::set<std::string> weight_names;
    for (const Node& n : g.nodes)
        if (n.is_conv_like()) weight_names.insert(n.inputs[1]);
    for (const json& t : manifest.at("tensors"))
        if (weight_names.count(t.at("name").get<std::string>()))
            sizes.weight_payload += t.at("length").get<std::uint64_t>();
    const auto dir = std::filesystem::path(path).parent_path();
    const std::string blob =
        dir.empty() ? manifest.at("blob").get<std::string>()
                    : (dir / manifest.at("blob").get<std::string>()).string();
    sizes.total = std::filesystem::file_size(path) + std::filesystem::file_size(blob);
    return sizes;
}

}  // namespace qtz
