#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "qtz/analysis/analysis.hpp"
#include "qtz/graph/execute.hpp"
#include "qtz/io/artifact.hpp"
#include "qtz/model/reference.hpp"
#include "qtz/ptq/ptq.hpp"
#include "qtz/train/trainer.hpp"

namespace py = pybind11;
using namespace qtz;

namespace {

Tensor tensor_from_array(const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
    std::vector<std::int64_t> shape(a.ndim());
    for (py::ssize_t i = 0; i < a.ndim(); ++i) shape[static_cast<std::size_t>(i)] = a.shape(i);
    Tensor t(shape);
    std::copy(a.data(), a.data() + a.size(), t.data.begin());
    return t;
}

py::array_t<double> array_from_tensor(const Tensor& t) {
    py::array_t<double> a(t.shape);
    std::copy(t.data.begin(), t.data.end(), a.mutable_data());
    return a;
}

py::array_t<std::int32_t> array_from_codes(const CodeTensor& t) {
    py::array_t<std::int32_t> a(t.shape);
    std::copy(t.data.begin(), t.data.end(), a.mutable_data());
    return a;
}

Granularity gran_of(bool per_channel, int axis) {
    return per_channel ? Granularity::per_channel(axis) : Granularity::per_layer();
}

Dataset dataset_from_arrays(const py::array_t<double, py::array::c_style | py::array::forcecast>& images,
                            const std::vector<int>& labels) {
    Dataset ds;
    ds.images = tensor_from_array(images);
    ds.labels = labels;
    return ds;
}

}  // namespace

PYBIND11_MODULE(_qtz, m) {
    m.doc() = "Integer quantization toolkit: quantizer math, graph rewrites, integer kernels";

    py::register_exception<DegenerateRange>(m, "DegenerateRangeError");
    py::register_exception<MissingRange>(m, "MissingRangeError");
    py::register_exception<ShapeMismatch>(m, "ShapeMismatchError");

    py::enum_<Scheme>(m, "Scheme")
        .value("AFFINE", Scheme::Affine)
        .value("SYMMETRIC_SIGNED", Scheme::SymmetricSigned)
        .value("SYMMETRIC_UNSIGNED", Scheme::SymmetricUnsigned);

    py::class_<QuantParams>(m, "QuantParams")
        .def(py::init<>())
        .def_readwrite("scale", &QuantParams::scale)
        .def_readwrite("zero_point", &QuantParams::zero_point)
        .def_readwrite("n_bits", &QuantParams::n_bits)
        .def_readwrite("scheme", &QuantParams::scheme)
        .def_readwrite("narrow_range", &QuantParams::narrow_range)
        .def("code_min", &QuantParams::code_min)
        .def("code_max", &QuantParams::code_max)
        .def("float_min", &QuantParams::float_min)
        .def("float_max", &QuantParams::float_max)
        .def("__repr__", [](const QuantParams& qp) {
            return "QuantParams(scale=" + std::to_string(qp.scale) +
                   ", zero_point=" + std::to_string(qp.zero_point) +
                   ", n_bits=" + std::to_string(qp.n_bits) + ", scheme=" + scheme_name(qp.scheme) +
                   ")";
        });

    m.def("relax_range", [](double lo, double hi) {
        const RangeSpec r = relax_range({lo, hi});
        return py::make_tuple(r.x_min, r.x_max);
    });
    m.def(
        "affine_params",
        [](double lo, double hi, int n_bits) { return affine_params({lo, hi}, n_bits); },
        py::arg("x_min"), py::arg("x_max"), py::arg("n_bits") = 8);
    m.def("symmetric_params", &symmetric_params, py::arg("max_abs"), py::arg("n_bits") = 8,
          py::arg("scheme") = Scheme::SymmetricSigned, py::arg("narrow_range") = false);
    m.def("params_from_minmax", &params_from_minmax, py::arg("x_min"), py::arg("x_max"),
          py::arg("n_bits") = 8, py::arg("scheme") = Scheme::Affine,
          py::arg("narrow_range") = false);

    m.def("quantize", &quantize);
    m.def("dequantize", &dequantize);
    m.def("sim_quant", &sim_quant);
    m.def("quantize_stochastic", &quantize_stochastic);
    m.def("sim_quant_backward", [](double x, double lo, double hi, double upstream) {
        return sim_quant_backward(x, {lo, hi}, upstream);
    });

    m.def(
        "quantize_array",
        [](const py::array_t<double, py::array::c_style | py::array::forcecast>& a,
           const QuantParams& qp) {
            const Tensor t = tensor_from_array(a);
            CodeTensor codes(t.shape);
            for (std::int64_t i = 0; i < t.numel(); ++i) codes[i] = quantize(t[i], qp);
            return array_from_codes(codes);
        },
        "quantize every element with one param set");
    m.def("sim_quant_array",
          [](const py::array_t<double, py::array::c_style | py::array::forcecast>& a,
             const QuantParams& qp) {
              Tensor t = tensor_from_array(a);
              for (auto& v : t.data) v = sim_quant(v, qp);
              return array_from_tensor(t);
          });

    m.def(
        "quantize_tensor",
        [](const py::array_t<double, py::array::c_style | py::array::forcecast>& a,
           bool per_channel, int axis, Scheme scheme, int n_bits, bool narrow_range) {
            TensorQuant tq = quantize_tensor(tensor_from_array(a), gran_of(per_channel, axis),
                                             scheme, n_bits, narrow_range);
            return py::make_tuple(array_from_codes(tq.codes), tq.params);
        },
        py::arg("array"), py::arg("per_channel") = false, py::arg("axis") = -1,
        py::arg("scheme") = Scheme::SymmetricSigned, py::arg("n_bits") = 8,
        py::arg("narrow_range") = false);

    m.def(
        "sqnr",
        [](const py::array_t<double, py::array::c_style | py::array::forcecast>& a, int channel_axis,
           Scheme scheme, bool per_channel, int n_bits) {
            return sqnr(tensor_from_array(a), channel_axis, scheme,
                        gran_of(per_channel, channel_axis), n_bits);
        },
        py::arg("array"), py::arg("channel_axis"), py::arg("scheme") = Scheme::SymmetricSigned,
        py::arg("per_channel") = true, py::arg("n_bits") = 8,
        "per-output-channel SQNR in dB (capped at 100)");

    py::class_<Graph>(m, "Graph")
        .def("num_nodes", [](const Graph& g) { return g.nodes.size(); })
        .def("input_names", [](const Graph& g) { return g.inputs; })
        .def("output_names", [](const Graph& g) { return g.outputs; })
        .def("param_names",
             [](const Graph& g) {
                 std::vector<std::string> names;
                 for (const auto& [name, t] : g.params) names.push_back(name);
                 return names;
             })
        .def("param", [](const Graph& g, const std::string& name) {
            return array_from_tensor(g.params.at(name));
        });

    m.def("build_reference_model", &build_reference_model, py::arg("seed") = 1,
          py::arg("conv1_ch") = 32, py::arg("conv2_ch") = 64, py::arg("classes") = 10,
          py::arg("bn_momentum") = 0.9);
    m.def("fold_bn_eval", &fold_bn_eval);
    m.def("fold_bn_training", &fold_bn_training, py::arg("graph"), py::arg("freeze") = false);
    m.def(
        "insert_fake_quant",
        [](const Graph& g, Scheme weight_scheme, bool weight_per_channel, int weight_bits,
           int act_bits, bool weight_narrow) {
            QuantConfig cfg;
            cfg.weight_scheme = weight_scheme;
            cfg.weight_per_channel = weight_per_channel;
            cfg.weight_bits = weight_bits;
            cfg.act_bits = act_bits;
            cfg.weight_narrow = weight_narrow;
            return insert_fake_quant(g, cfg);
        },
        py::arg("graph"), py::arg("weight_scheme") = Scheme::SymmetricSigned,
        py::arg("weight_per_channel") = true, py::arg("weight_bits") = 8, py::arg("act_bits") = 8,
        py::arg("weight_narrow") = false);
    m.def("activation_boundaries", &activation_boundaries);

    m.def(
        "run_float_graph",
        [](const Graph& g,
           const py::array_t<double, py::array::c_style | py::array::forcecast>& input,
           bool training_bn) {
            ExecOptions opts;
            opts.training_bn = training_bn;
            opts.fq_mode = FqMode::Off;
            return array_from_tensor(
                run_graph(g, {{g.inputs[0], tensor_from_array(input)}}, opts).at(g.outputs[0]));
        },
        py::arg("graph"), py::arg("input"), py::arg("training_bn") = false);

    py::class_<Dataset>(m, "Dataset")
        .def_property_readonly("size", &Dataset::size)
        .def_property_readonly("images", [](const Dataset& d) { return array_from_tensor(d.images); })
        .def_property_readonly("labels", [](const Dataset& d) { return d.labels; });
    m.def("synthesize_dataset", &synthesize_dataset, py::arg("count"), py::arg("seed"),
          py::arg("noise") = 0.18);
    m.def("load_idx_dir", &load_idx_dir, py::arg("dir"), py::arg("train") = true);

    m.def(
        "calibrate",
        [](const Graph& folded, const Dataset& data, std::int64_t batches, std::int64_t batch_size) {
            PTQConfig cfg;
            cfg.calibration_batches = batches;
            cfg.calibration_batch_size = batch_size;
            std::map<std::string, std::pair<double, double>> out;
            for (const auto& [name, r] : calibrate(folded, data, cfg))
                out[name] = {r.x_min, r.x_max};
            return out;
        },
        py::arg("folded_graph"), py::arg("dataset"), py::arg("batches") = 100,
        py::arg("batch_size") = 32);

    py::class_<QuantizedModel>(m, "QuantizedModel")
        .def_readonly("weights_only", &QuantizedModel::weights_only)
        .def_readonly("weight_bits", &QuantizedModel::weight_bits);

    m.def(
        "convert",
        [](const Graph& folded, const std::map<std::string, std::pair<double, double>>& ranges,
           Scheme weight_scheme, bool weight_per_channel, int weight_bits, int act_bits) {
            PTQConfig cfg;
            cfg.weight_scheme = weight_scheme;
            cfg.weight_per_channel = weight_per_channel;
            cfg.weight_bits = weight_bits;
            cfg.act_bits = act_bits;
            std::map<std::string, RangeSpec> rs;
            for (const auto& [name, r] : ranges) rs[name] = {r.first, r.second};
            return convert(folded, rs, cfg);
        },
        py::arg("folded_graph"), py::arg("ranges"), py::arg("weight_scheme") = Scheme::SymmetricSigned,
        py::arg("weight_per_channel") = true, py::arg("weight_bits") = 8, py::arg("act_bits") = 8);
    m.def(
        "convert_weights_only",
        [](const Graph& folded, Scheme weight_scheme, bool weight_per_channel, int weight_bits) {
            PTQConfig cfg;
            cfg.weight_scheme = weight_scheme;
            cfg.weight_per_channel = weight_per_channel;
            cfg.weight_bits = weight_bits;
            return convert_weights_only(folded, cfg);
        },
        py::arg("folded_graph"), py::arg("weight_scheme") = Scheme::SymmetricSigned,
        py::arg("weight_per_channel") = true, py::arg("weight_bits") = 8);

    py::class_<QModelRuntime>(m, "QModelRuntime")
        .def(py::init<QuantizedModel>())
        .def("run",
             [](QModelRuntime& rt,
                const py::array_t<double, py::array::c_style | py::array::forcecast>& input) {
                 return array_from_tensor(rt.run(tensor_from_array(input)));
             })
        .def("layer_seconds", &QModelRuntime::layer_seconds);

    m.def("save_float_model",
          [](const std::string& path, const Graph& g) { save_float_model(path, g); });
    m.def("load_float_model",
          [](const std::string& path) { return load_float_model(path).graph; });
    m.def("save_quantized_model", &save_quantized_model);
    m.def("load_quantized_model", &load_quantized_model);

    m.def(
        "train_reference",
        [](Graph model, const Dataset& train_data, const Dataset& eval_data, py::kwargs kwargs) {
            TrainConfig cfg;
            auto geti = [&](const char* k, std::int64_t d) {
                return kwargs.contains(k) ? kwargs[k].cast<std::int64_t>() : d;
            };
            auto getd = [&](const char* k, double d) {
                return kwargs.contains(k) ? kwargs[k].cast<double>() : d;
            };
            cfg.total_steps = geti("total_steps", 100);
            cfg.batch_size = geti("batch_size", 32);
            cfg.quant_delay = geti("quant_delay", 0);
            cfg.freeze_bn_delay = geti("freeze_bn_delay", cfg.freeze_bn_delay);
            cfg.learning_rate = getd("learning_rate", 0.01);
            cfg.weight_bits = static_cast<int>(geti("weight_bits", 8));
            cfg.act_bits = static_cast<int>(geti("act_bits", 8));
            cfg.rng_seed = static_cast<std::uint64_t>(geti("rng_seed", 1));
            if (kwargs.contains("weight_per_channel"))
                cfg.weight_per_channel = kwargs["weight_per_channel"].cast<bool>();
            TrainState st = make_train_state(model, cfg);
            TrainResult r = train(st, train_data, eval_data, cfg);
            Graph out = st.base_graph;
            out.params = st.graph.params;
            std::map<std::string, std::pair<double, double>> ranges;
            for (const auto& [name, rr] : activation_ranges(st)) ranges[name] = {rr.x_min, rr.x_max};
            return py::make_tuple(out, r.final_acc_inst, ranges);
        },
        py::arg("model"), py::arg("train_data"), py::arg("eval_data"),
        "quantization-aware training; returns (trained_graph, accuracy, activation_ranges)");
}
