#include <filesystem>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "json.hpp"
#include "qtz/analysis/analysis.hpp"
#include "qtz/graph/execute.hpp"
#include "qtz/io/artifact.hpp"
#include "qtz/model/reference.hpp"
#include "qtz/ptq/ptq.hpp"
#include "qtz/train/trainer.hpp"

using nlohmann::json;
using namespace qtz;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitMissingRange = 4;

Scheme parse_scheme(const std::string& s) {
    if (s == "affine" || s == "asymmetric") return Scheme::Affine;
    if (s == "symmetric" || s == "symmetric_signed") return Scheme::SymmetricSigned;
    if (s == "symmetric_unsigned") return Scheme::SymmetricUnsigned;
    throw ConfigError("unknown scheme: " + s);
}

bool parse_per_channel(const std::string& s) {
    if (s == "per-channel" || s == "per_channel") return true;
    if (s == "per-layer" || s == "per_layer") return false;
    throw ConfigError("unknown granularity: " + s);
}

// Folded float graph from a .qtzg artifact (folds batch norms when present).
Graph load_folded(const std::string& path) {
    LoadedModel m = load_float_model(path);
    bool has_bn = false;
    for (const Node& n : m.graph.nodes) has_bn |= n.kind == OpKind::BatchNorm;
    return has_bn ? fold_bn_eval(m.graph) : m.graph;
}

double float_graph_accuracy(const Graph& g, const Dataset& data) {
    std::int64_t correct = 0;
    for (std::int64_t start = 0; start < data.size(); start += 64) {
        std::vector<std::int64_t> idx;
        for (std::int64_t i = start; i < std::min<std::int64_t>(start + 64, data.size()); ++i)
            idx.push_back(i);
        Tensor logits = run_graph(g, {{g.inputs[0], data.batch_images(idx)}}).at(g.outputs[0]);
        const auto pred = argmax_rows(logits);
        for (std::size_t i = 0; i < pred.size(); ++i)
            correct += pred[i] == data.labels[static_cast<std::size_t>(idx[i])];
    }
    return static_cast<double>(correct) / static_cast<double>(data.size());
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"qtz: integer quantization toolkit for small CNNs"};
    app.require_subcommand(1);

    // ---------------------------------------------------------------- gen-data
    auto* gen = app.add_subcommand("gen-data", "write a synthetic IDX-format dataset");
    std::string gen_out;
    std::int64_t gen_train = 4096, gen_test = 1024;
    std::uint64_t gen_seed = 1;
    double gen_noise = 0.18;
    gen->add_option("--out", gen_out, "output directory")->required();
    gen->add_option("--train", gen_train, "training sample count");
    gen->add_option("--test", gen_test, "test sample count");
    gen->add_option("--seed", gen_seed, "generator seed");
    gen->add_option("--noise", gen_noise, "additive noise level");

    // ------------------------------------------------------------------- train
    auto* tr = app.add_subcommand("train", "train or fine-tune the reference model");
    TrainConfig tcfg;
    std::string tr_weight_scheme = "symmetric", tr_weight_gran = "per-channel";
    std::int64_t tr_conv1 = 32, tr_conv2 = 64;
    std::uint64_t tr_init_seed = 1;
    std::string tr_data, tr_out, tr_init, tr_metrics;
    tr->set_config("--config", "", "TOML config mirroring the training options");
    tr->add_option("--data", tr_data, "IDX dataset directory")->required();
    tr->add_option("--out", tr_out, "output checkpoint (.qtzg)")->required();
    tr->add_option("--init-from", tr_init, "float checkpoint to fine-tune from");
    tr->add_option("--metrics", tr_metrics, "metrics CSV path (default <out>.metrics.csv)");
    tr->add_option("--learning_rate", tcfg.learning_rate);
    tr->add_option("--total_steps,--steps", tcfg.total_steps);
    tr->add_option("--batch_size", tcfg.batch_size);
    tr->add_option("--quant_delay", tcfg.quant_delay);
    tr->add_option("--freeze_bn_delay", tcfg.freeze_bn_delay);
    tr->add_option("--ema_decay", tcfg.ema_decay);
    tr->add_flag("--ema_enabled,!--no-ema", tcfg.ema_enabled);
    tr->add_flag("--stochastic_weights", tcfg.stochastic_weights);
    tr->add_option("--weight_scheme", tr_weight_scheme);
    tr->add_option("--weight_granularity", tr_weight_gran);
    tr->add_option("--weight_bits", tcfg.weight_bits);
    tr->add_flag("--weight_narrow", tcfg.weight_narrow);
    tr->add_option("--act_bits", tcfg.act_bits);
    tr->add_option("--rng_seed,--seed", tcfg.rng_seed);
    tr->add_option("--bn_momentum", tcfg.bn_momentum);
    tr->add_option("--act_momentum", tcfg.act_momentum);
    tr->add_flag("--naive_bn_fold", tcfg.naive_bn_fold);
    tr->add_option("--eval_every", tcfg.eval_every);
    tr->add_option("--eval_samples", tcfg.eval_samples);
    tr->add_option("--conv1_channels", tr_conv1);
    tr->add_option("--conv2_channels", tr_conv2);
    tr->add_option("--init_seed", tr_init_seed);

    // -------------------------------------------------------- quantize-weights
    auto* qw = app.add_subcommand("quantize-weights", "weight-only post-training quantization");
    std::string qw_model, qw_out, qw_scheme = "symmetric", qw_gran = "per-channel";
    int qw_bits = 8;
    qw->add_option("--model", qw_model, "float model (.qtzg)")->required();
    qw->add_option("--scheme", qw_scheme, "affine | symmetric");
    qw->add_option("--granularity", qw_gran, "per-layer | per-channel");
    qw->add_option("--bits", qw_bits, "4 | 8");
    qw->add_option("--out", qw_out, "output artifact (.qtzm)")->required();

    // --------------------------------------------------------------- calibrate
    auto* cal = app.add_subcommand("calibrate", "estimate activation ranges on sample data");
    std::string cal_model, cal_data, cal_out;
    std::int64_t cal_batches = 100, cal_batch_size = 32;
    bool cal_global = false;
    cal->add_option("--model", cal_model)->required();
    cal->add_option("--data", cal_data)->required();
    cal->add_option("--batches", cal_batches, "calibration mini-batches (default 100)");
    cal->add_option("--batch_size", cal_batch_size);
    cal->add_flag("--global-minmax", cal_global, "global min/max instead of moving average");
    cal->add_option("--out", cal_out, "ranges JSON path")->required();

    // ----------------------------------------------------------------- convert
    auto* cv = app.add_subcommand("convert", "build the integer model artifact");
    std::string cv_model, cv_ranges, cv_out, cv_scheme = "symmetric", cv_gran = "per-channel";
    int cv_bits = 8, cv_act_bits = 8;
    cv->add_option("--model", cv_model)->required();
    cv->add_option("--ranges", cv_ranges, "ranges JSON (default: checkpoint activation stats)");
    cv->add_option("--scheme", cv_scheme);
    cv->add_option("--granularity", cv_gran);
    cv->add_option("--bits", cv_bits);
    cv->add_option("--act-bits", cv_act_bits);
    cv->add_option("--out", cv_out)->required();

    // --------------------------------------------------------------------- run
    auto* run = app.add_subcommand("run", "execute a model on a dataset and report accuracy");
    std::string run_model, run_data, run_report;
    bool run_train_split = false;
    run->add_option("--model", run_model, ".qtzm or .qtzg artifact")->required();
    run->add_option("--data", run_data)->required();
    run->add_option("--report", run_report, "per-layer timing CSV");
    run->add_flag("--train-split", run_train_split, "evaluate on the training split");

    // ----------------------------------------------------------------- analyze
    auto* an = app.add_subcommand("analyze", "SQNR and weight-power diagnostics");
    std::string an_model, an_out;
    an->add_option("--model", an_model)->required();
    an->add_option("--out", an_out, "output directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : kExitConfig;
    }

    try {
        if (*gen) {
            std::filesystem::create_directories(gen_out);
            Dataset train = synthesize_dataset(gen_train, gen_seed, gen_noise);
            Dataset test = synthesize_dataset(gen_test, gen_seed + 0x51ed, gen_noise);
            save_idx_dataset(train, gen_out + "/train-images-idx3-ubyte",
                             gen_out + "/train-labels-idx1-ubyte");
            save_idx_dataset(test, gen_out + "/t10k-images-idx3-ubyte",
                             gen_out + "/t10k-labels-idx1-ubyte");
            std::cout << json{{"train", gen_train}, {"test", gen_test}, {"dir", gen_out}}.dump()
                      << "\n";
            return 0;
        }

        if (*tr) {
            tcfg.weight_scheme = parse_scheme(tr_weight_scheme);
            tcfg.weight_per_channel = parse_per_channel(tr_weight_gran);
            tcfg.validate();
            Dataset train_data = load_idx_dir(tr_data, true);
            Dataset test_data = load_idx_dir(tr_data, false);

            Graph model =
                build_reference_model(tr_init_seed, tr_conv1, tr_conv2, 10, tcfg.bn_momentum);
            if (!tr_init.empty()) model = load_float_model(tr_init).graph;

            TrainState st = make_train_state(model, tcfg);
            TrainResult result = train(st, train_data, test_data, tcfg);

            TrainingExtras extras;
            extras.step = st.step;
            extras.bn_frozen = st.bn_frozen;
            extras.act_stats = st.act_stats;
            extras.ema = st.ema;
            Graph final_graph = st.base_graph;
            final_graph.params = st.graph.params;
            save_float_model(tr_out, final_graph, &extras);
            write_metrics_csv(tr_metrics.empty() ? tr_out + ".metrics.csv" : tr_metrics,
                              result.metrics);
            std::cout << json{{"checkpoint", tr_out},
                              {"steps", tcfg.total_steps},
                              {"eval_acc", result.final_acc_inst},
                              {"eval_acc_ema", result.final_acc_ema}}
                             .dump()
                      << "\n";
            return 0;
        }

        if (*qw) {
            if (artifact_kind(qw_model) != "float")
                throw ConfigError("input is already a quantized artifact: " + qw_model);
            Graph folded = load_folded(qw_model);
            PTQConfig cfg;
            cfg.weight_scheme = parse_scheme(qw_scheme);
            cfg.weight_per_channel = parse_per_channel(qw_gran);
            cfg.weight_bits = qw_bits;
            QuantizedModel qm = convert_weights_only(folded, cfg);
            save_quantized_model(qw_out, qm);

            // size-reduction report against the same folded float model
            const std::string ftmp = qw_out + ".float_ref.qtzg";
            save_float_model(ftmp, folded);
            const ArtifactSizes fs = artifact_sizes(ftmp);
            const ArtifactSizes qs = artifact_sizes(qw_out);
            std::filesystem::remove(ftmp);
            std::filesystem::remove(ftmp + ".bin");
            std::cout << json{{"artifact", qw_out},
                              {"weight_payload_ratio",
                               static_cast<double>(qs.weight_payload) /
                                   static_cast<double>(fs.weight_payload)},
                              {"logical_bits_ratio", qw_bits / 32.0},
                              {"total_ratio",
                               static_cast<double>(qs.total) / static_cast<double>(fs.total)}}
                             .dump()
                      << "\n";
            return 0;
        }

        if (*cal) {
            Graph folded = load_folded(cal_model);
            Dataset data = load_idx_dir(cal_data, true);
            PTQConfig cfg;
            cfg.calibration_batches = cal_batches;
            cfg.calibration_batch_size = cal_batch_size;
            cfg.global_minmax = cal_global;
            auto ranges = calibrate(folded, data, cfg);
            save_ranges_json(cal_out, ranges);
            std::cout << json{{"ranges", cal_out},
                              {"tensors", ranges.size()},
                              {"batches", cal_batches}}
                             .dump()
                      << "\n";
            return 0;
        }

        if (*cv) {
            LoadedModel m = load_float_model(cv_model);
            std::map<std::string, RangeSpec> ranges;
            if (!cv_ranges.empty()) {
                ranges = load_ranges_json(cv_ranges);
            } else if (m.extras && !m.extras->act_stats.empty()) {
                for (const auto& [name, s] : m.extras->act_stats)
                    if (s.sample_count > 0) ranges[name] = s.range();
            } else {
                throw MissingRange("no --ranges given and the checkpoint has no activation stats");
            }
            bool has_bn = false;
            for (const Node& n : m.graph.nodes) has_bn |= n.kind == OpKind::BatchNorm;
            Graph folded = has_bn ? fold_bn_eval(m.graph) : m.graph;
            PTQConfig cfg;
            cfg.weight_scheme = parse_scheme(cv_scheme);
            cfg.weight_per_channel = parse_per_channel(cv_gran);
            cfg.weight_bits = cv_bits;
            cfg.act_bits = cv_act_bits;
            QuantizedModel qm = convert(folded, ranges, cfg);
            save_quantized_model(cv_out, qm);
            std::cout << json{{"artifact", cv_out}, {"weight_bits", cv_bits}}.dump() << "\n";
            return 0;
        }

        if (*run) {
            Dataset data = load_idx_dir(run_data, run_train_split);
            const std::string kind = artifact_kind(run_model);
            double acc = 0.0;
            json timing = json::object();
            if (kind == "quantized") {
                QModelRuntime rt(load_quantized_model(run_model));
                std::int64_t correct = 0;
                for (std::int64_t start = 0; start < data.size(); start += 64) {
                    std::vector<std::int64_t> idx;
                    for (std::int64_t i = start;
                         i < std::min<std::int64_t>(start + 64, data.size()); ++i)
                        idx.push_back(i);
                    const auto pred = argmax_rows(rt.run(data.batch_images(idx)));
                    for (std::size_t i = 0; i < pred.size(); ++i)
                        correct += pred[i] == data.labels[static_cast<std::size_t>(idx[i])];
                }
                acc = static_cast<double>(correct) / static_cast<double>(data.size());
                for (const auto& [name, sec] : rt.layer_seconds()) timing[name] = sec;
            } else if (kind == "weights-only") {
                Graph g = weights_only_float_graph(load_quantized_model(run_model));
                acc = float_graph_accuracy(g, data);
            } else {
                acc = float_graph_accuracy(load_folded(run_model), data);
            }
            if (!run_report.empty()) {
                std::ofstream rep(run_report);
                rep << "layer,seconds\n";
                for (auto it = timing.begin(); it != timing.end(); ++it)
                    rep << it.key() << ',' << it.value().get<double>() << '\n';
            }
            std::cout << json{{"accuracy", acc}, {"samples", data.size()}, {"kind", kind}}.dump()
                      << "\n";
            return 0;
        }

        if (*an) {
            LoadedModel m = load_float_model(an_model);
            bool has_bn = false;
            for (const Node& n : m.graph.nodes) has_bn |= n.kind == OpKind::BatchNorm;
            Graph folded = has_bn ? fold_bn_eval(m.graph) : m.graph;
            std::filesystem::create_directories(an_out);

            const auto reports = compare_schemes(folded);
            {
                std::ofstream csv(an_out + "/sqnr.csv");
                csv << sqnr_reports_csv(reports);
            }
            json jr = json::array();
            for (const auto& r : reports) {
                json entry;
                entry["layer"] = r.layer;
                entry["scheme"] = r.scheme_desc;
                entry["sqnr_db"] = r.per_channel_db;
                jr.push_back(entry);
            }
            {
                std::ofstream js(an_out + "/sqnr.json");
                js << json{{"version", "qtz-v1"}, {"reports", jr}}.dump(1);
            }
            // weight-power series before and after folding, one file per layer
            for (const Node& n : folded.nodes) {
                if (!n.is_conv_like()) continue;
                auto write_hist = [&](const std::string& path, const Tensor& w) {
                    Histogram h = weight_power_histogram(w, 50);
                    std::ofstream out(path);
                    out << "bin_lo,bin_hi,count\n";
                    for (std::size_t b = 0; b < h.counts.size(); ++b)
                        out << h.edges[b] << ',' << h.edges[b + 1] << ',' << h.counts[b] << '\n';
                };
                write_hist(an_out + "/power_" + n.name + "_folded.csv",
                           folded.params.at(n.inputs[1]));
                if (m.graph.params.count(n.inputs[1]))
                    write_hist(an_out + "/power_" + n.name + "_float.csv",
                               m.graph.params.at(n.inputs[1]));
            }
            std::cout << json{{"out", an_out}, {"layers", jr.size() / 3}}.dump() << "\n";
            return 0;
        }
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const MissingRange& e) {
        std::cerr << "missing range: " << e.what() << "\n";
        return kExitMissingRange;
    } catch (const NoData& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return kExitData;
    } catch (const DataExhausted& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return kExitData;
    } catch (const FormatError& e) {
        std::cerr << "format error: " << e.what() << "\n";
        return kExitData;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
