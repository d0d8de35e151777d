#include <cstdio>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "qtz/io/artifact.hpp"
#include "qtz/model/reference.hpp"
#include "qtz/ptq/ptq.hpp"
#include "test_util.hpp"

using namespace qtz;
using namespace qtz::testutil;

namespace {

std::string tmpdir() {
    const auto dir = std::filesystem::temp_directory_path() / "qtz_io_test";
    std::filesystem::create_directories(dir);
    return dir.string();
}

std::vector<unsigned char> file_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("idx dataset round trip") {
    Dataset ds = synthesize_dataset(32, 5);
    const std::string dir = tmpdir();
    save_idx_dataset(ds, dir + "/imgs", dir + "/lbls");
    Dataset back = load_idx_dataset(dir + "/imgs", dir + "/lbls");
    CHECK(back.size() == 32);
    CHECK(back.labels == ds.labels);
    // u8 round trip quantizes to 1/255 steps
    CHECK(max_abs_diff(back.images, ds.images) <= 0.5 / 255.0 + 1e-12);

    SUBCASE("bad magic is rejected") {
        std::ofstream bad(dir + "/bad", std::ios::binary);
        const char junk[16] = {0};
        bad.write(junk, 16);
        bad.close();
        CHECK_THROWS_AS(load_idx_dataset(dir + "/bad", dir + "/lbls"), FormatError);
    }
}

TEST_CASE("float model artifact round trip is bit-exact") {
    Graph g = build_reference_model(3, 4, 6);
    const std::string dir = tmpdir();
    const std::string path = dir + "/model.qtzg";
    save_float_model(path, g);
    LoadedModel loaded = load_float_model(path);
    CHECK(loaded.graph.nodes.size() == g.nodes.size());
    for (const auto& [name, t] : g.params) {
        const Tensor& lt = loaded.graph.params.at(name);
        // parameters travel as f32
        for (std::int64_t i = 0; i < t.numel(); ++i)
            CHECK(lt[i] == static_cast<double>(static_cast<float>(t[i])));
    }

    // save -> load -> save reproduces identical bytes
    const std::string path2 = dir + "/model2.qtzg";
    save_float_model(path2, loaded.graph);
    auto m1 = file_bytes(path);
    auto m2 = file_bytes(path2);
    // manifests differ only in the blob filename; normalize it
    std::string s1(m1.begin(), m1.end()), s2(m2.begin(), m2.end());
    const auto pos1 = s1.find("model.qtzg.bin");
    const auto pos2 = s2.find("model2.qtzg.bin");
    REQUIRE(pos1 != std::string::npos);
    REQUIRE(pos2 != std::string::npos);
    s1.replace(pos1, 14, "B");
    s2.replace(pos2, 15, "B");
    CHECK(s1 == s2);
    CHECK(file_bytes(path + ".bin") == file_bytes(path2 + ".bin"));
}

TEST_CASE("checkpoint extras round trip") {
    Graph g = build_reference_model(5, 4, 6);
    TrainingExtras extras;
    extras.step = 123;
    extras.bn_frozen = true;
    CalibrationStats s;
    s.update(-1.5, 2.5);
    s.update(-1.0, 3.0);
    extras.act_stats["relu1"] = s;
    extras.ema["conv1_w"] = g.params.at("conv1_w");
    const std::string path = tmpdir() + "/ckpt.qtzg";
    save_float_model(path, g, &extras);
    LoadedModel loaded = load_float_model(path);
    REQUIRE(loaded.extras.has_value());
    CHECK(loaded.extras->step == 123);
    CHECK(loaded.extras->bn_frozen);
    CHECK(loaded.extras->act_stats.at("relu1").moving_max ==
          extras.act_stats.at("relu1").moving_max);
    CHECK(loaded.extras->act_stats.at("relu1").sample_count == 2);
    CHECK(loaded.extras->ema.count("conv1_w") == 1);
}

TEST_CASE("quantized artifact round trip") {
    Graph folded = fold_bn_eval(build_reference_model(7, 4, 6));
    Dataset data = synthesize_dataset(64, 9);
    PTQConfig cfg;
    cfg.calibration_batches = 4;
    cfg.calibration_batch_size = 8;
    auto ranges = calibrate(folded, data, cfg);
    QuantizedModel qm = convert(folded, ranges, cfg);

    const std::string dir = tmpdir();
    const std::string path = dir + "/model.qtzm";
    save_quantized_model(path, qm);
    CHECK(artifact_kind(path) == "quantized");
    QuantizedModel back = load_quantized_model(path);

    // integer execution must be bit-identical before and after the round trip
    QModelRuntime rt1(qm), rt2(back);
    std::vector<std::int64_t> idx = {0, 1, 2, 3};
    Tensor in = data.batch_images(idx);
    CHECK(bit_equal(rt1.run(in), rt2.run(in)));

    // save -> load -> save byte stability (modulo the blob name)
    const std::string path2 = dir + "/model2.qtzm";
    save_quantized_model(path2, back);
    auto b1 = file_bytes(path + ".bin");
    auto b2 = file_bytes(path2 + ".bin");
    CHECK(b1 == b2);

    SUBCASE("ranges json round trip") {
        const std::string rpath = dir + "/ranges.json";
        save_ranges_json(rpath, ranges);
        auto back_ranges = load_ranges_json(rpath);
        REQUIRE(back_ranges.size() == ranges.size());
        for (const auto& [name, r] : ranges) {
            CHECK(back_ranges.at(name).x_min == r.x_min);
            CHECK(back_ranges.at(name).x_max == r.x_max);
        }
    }
}

TEST_CASE("weight-only artifact sizes") {
    Graph folded = fold_bn_eval(build_reference_model(11));  // full-size reference model
    const std::string dir = tmpdir();
    const std::string fpath = dir + "/float.qtzg";
    save_float_model(fpath, folded);

    PTQConfig cfg;
    cfg.weight_per_channel = false;
    QuantizedModel qm = convert_weights_only(folded, cfg);
    const std::string qpath = dir + "/w8.qtzm";
    save_quantized_model(qpath, qm);
    CHECK(artifact_kind(qpath) == "weights-only");

    const ArtifactSizes fs = artifact_sizes(fpath);
    const ArtifactSizes qs = artifact_sizes(qpath);
    // 8-bit codes are exactly a quarter of the f32 weight payload
    CHECK(qs.weight_payload * 4 == fs.weight_payload);
    CHECK(static_cast<double>(qs.total) < 0.30 * static_cast<double>(fs.total));

    // the artifact still executes
    Dataset data = synthesize_dataset(8, 13);
    QuantizedModel back = load_quantized_model(qpath);
    std::vector<std::int64_t> idx = {0, 1};
    Tensor y = run_weights_only(back, data.batch_images(idx));
    CHECK(y.dim(0) == 2);
}

TEST_CASE("metrics csv") {
    std::vector<MetricsRow> rows(2);
    rows[0].step = 0;
    rows[0].loss = 2.5;
    rows[1].step = 1;
    rows[1].loss = 2.25;
    rows[1].eval_acc_inst = 0.5;
    rows[1].eval_acc_ema = 0.25;
    rows[1].bn_frozen = true;
    rows[1].weight_code_churn = 0.125;
    const std::string path = tmpdir() + "/metrics.csv";
    write_metrics_csv(path, rows);
    std::ifstream in(path);
    std::string line;
    std::getline(in, line);
    CHECK(line == "step,loss,eval_acc_inst,eval_acc_ema,bn_frozen,weight_code_churn");
    std::getline(in, line);
    CHECK(line == "0,2.5,,,0,0");
    std::getline(in, line);
    CHECK(line == "1,2.25,0.5,0.25,1,0.125");
}
