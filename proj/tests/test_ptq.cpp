#include <cmath>

#include "doctest.h"
#include "qtz/graph/execute.hpp"
#include "qtz/model/reference.hpp"
#include "qtz/ptq/ptq.hpp"
#include "test_util.hpp"

using namespace qtz;
using namespace qtz::testutil;

namespace {

Graph folded_reference(std::uint64_t seed) {
    return fold_bn_eval(build_reference_model(seed, 4, 6));
}

}  // namespace

TEST_CASE("quantize_weights_only") {
    PTQConfig cfg;

    SUBCASE("weights already on code points stay bit-identical") {
        Rng rng(1);
        GraphBuilder b;
        auto x = b.input("x", {1, 4, 4, 1});
        // values on exact code points of a symmetric 8-bit quantizer
        Tensor w({1, 1, 1, 2});
        QuantParams qp = symmetric_params(1.27, 8, Scheme::SymmetricSigned);
        w[0] = dequantize(64, qp);
        w[1] = dequantize(-127, qp);
        auto c = b.conv2d("conv", x, w, std::nullopt, {1, 1, Padding::Same});
        b.mark_output(c);
        Graph g = b.build();
        WeightQuantization wq = quantize_weights_only(g, cfg);
        CHECK(bit_equal(wq.model.params.at("conv_w"), g.params.at("conv_w")));
    }

    SUBCASE("model still executes in float and tracks the original closely") {
        Graph g = folded_reference(3);
        WeightQuantization wq = quantize_weights_only(g, cfg);
        Rng rng(5);
        Tensor in = random_tensor({2, 28, 28, 1}, rng, 0.0, 1.0);
        Tensor y0 = run_graph(g, {{"x", in}}).at("fc");
        Tensor y1 = run_graph(wq.model, {{"x", in}}).at("fc");
        CHECK(max_abs_diff(y0, y1) < 0.1);
        CHECK(max_abs_diff(y0, y1) > 0.0);  // something was actually quantized
    }

    SUBCASE("requires a folded model") {
        Graph g = build_reference_model(4, 4, 6);
        CHECK_THROWS_AS(quantize_weights_only(g, cfg), UnsupportedTopology);
    }
}

TEST_CASE("calibrate") {
    PTQConfig cfg;
    cfg.calibration_batches = 4;
    cfg.calibration_batch_size = 8;
    Graph g = folded_reference(7);
    Dataset data = synthesize_dataset(64, 11);

    SUBCASE("single batch equals that batch's min/max, zero-relaxed") {
        PTQConfig one = cfg;
        one.calibration_batches = 1;
        auto ranges = calibrate(g, data, one);
        // recompute by capturing directly
        std::vector<std::int64_t> idx;
        for (std::int64_t i = 0; i < one.calibration_batch_size; ++i) idx.push_back(i);
        std::map<std::string, Tensor> captured;
        std::set<std::string> caps = {"relu1"};
        ExecOptions opts;
        opts.capture_set = &caps;
        opts.capture_out = &captured;
        run_graph(g, {{"x", data.batch_images(idx)}}, opts);
        double lo = 1e30, hi = -1e30;
        for (double v : captured.at("relu1").data) {
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
        const RangeSpec expect = relax_range({lo, hi});
        CHECK(ranges.at("relu1").x_min == expect.x_min);
        CHECK(ranges.at("relu1").x_max == expect.x_max);
    }

    SUBCASE("relu outputs give non-negative zero-relaxed ranges") {
        auto ranges = calibrate(g, data, cfg);
        CHECK(ranges.at("relu1").x_min == 0.0);
        CHECK(ranges.at("relu2").x_min == 0.0);
        CHECK(ranges.at("relu1").x_max > 0.0);
    }

    SUBCASE("relu6 outputs are confined to [0, 6]") {
        Rng rng(8);
        GraphBuilder b;
        auto x = b.input("x", {-1, 6, 6, 1});
        auto c = b.conv2d("conv", x, normal_tensor({3, 3, 1, 4}, rng, 3.0), std::nullopt,
                          {1, 1, Padding::Same});
        auto r = b.relu6("act", c);
        b.mark_output(r);
        Graph g6 = b.build();
        auto ranges = calibrate(g6, data, cfg);
        CHECK(ranges.at("act").x_min >= 0.0);
        CHECK(ranges.at("act").x_max <= 6.0);
    }

    SUBCASE("deterministic given fixed data order") {
        auto r1 = calibrate(g, data, cfg);
        auto r2 = calibrate(g, data, cfg);
        REQUIRE(r1.size() == r2.size());
        for (const auto& [name, r] : r1) {
            CHECK(r.x_min == r2.at(name).x_min);
            CHECK(r.x_max == r2.at(name).x_max);
        }
    }

    SUBCASE("batch order only moves ranges within the batch-statistic spread") {
        // permuted data: both EMAs are convex combinations of per-batch
        // extrema, so they stay inside the [min,max] envelope of those extrema
        Dataset shuffled = data;
        Rng rng(9);
        for (std::size_t i = shuffled.labels.size(); i > 1; --i) {
            const auto j = static_cast<std::size_t>(rng.integer(static_cast<std::int64_t>(i)));
            std::swap(shuffled.labels[i - 1], shuffled.labels[j]);
            for (std::int64_t k = 0; k < 28 * 28; ++k)
                std::swap(shuffled.images[static_cast<std::int64_t>(i - 1) * 28 * 28 + k],
                          shuffled.images[static_cast<std::int64_t>(j) * 28 * 28 + k]);
        }
        auto r1 = calibrate(g, data, cfg);
        auto r2 = calibrate(g, shuffled, cfg);
        // envelope of per-batch maxima for relu1 over both orders
        double spread = 0.0;
        for (const auto& [name, r] : r1) {
            (void)name;
            spread = std::max(spread, std::fabs(r.x_max));
        }
        CHECK(std::fabs(r1.at("relu1").x_max - r2.at("relu1").x_max) <= spread);
    }

    SUBCASE("no data") {
        Dataset empty;
        empty.images = Tensor({0, 28, 28, 1});
        CHECK_THROWS_AS(calibrate(g, empty, cfg), NoData);
    }
}

TEST_CASE("convert and integer execution") {
    PTQConfig cfg;
    cfg.calibration_batches = 8;
    cfg.calibration_batch_size = 8;
    Graph g = folded_reference(13);
    Dataset data = synthesize_dataset(128, 17);
    auto ranges = calibrate(g, data, cfg);

    SUBCASE("missing range names the tensor") {
        auto broken = ranges;
        broken.erase("relu1");
        CHECK_THROWS_WITH_AS(convert(g, broken, cfg),
                             doctest::Contains("relu1"), MissingRange);
    }

    SUBCASE("top-1 agreement with the sim-quant float model") {
        QuantizedModel qm = convert(g, ranges, cfg);
        QModelRuntime rt(qm);

        Graph simq = insert_fake_quant(g, cfg.quant_config());
        ExecOptions opts;
        opts.fq_mode = FqMode::Quantize;
        opts.act_ranges = &ranges;

        std::int64_t agree = 0;
        const std::int64_t n = 64;
        for (std::int64_t i = 0; i < n; i += 8) {
            std::vector<std::int64_t> idx;
            for (std::int64_t k = i; k < i + 8; ++k) idx.push_back(k);
            Tensor batch = data.batch_images(idx);
            const std::vector<int> p_int = argmax_rows(rt.run(batch));
            const std::vector<int> p_float =
                argmax_rows(run_graph(simq, {{"x", batch}}, opts).at(simq.outputs[0]));
            for (std::size_t k = 0; k < p_int.size(); ++k) agree += p_int[k] == p_float[k];
        }
        CHECK(static_cast<double>(agree) / static_cast<double>(n) >= 0.99);
    }

    SUBCASE("weight-only artifact executes in float") {
        QuantizedModel qm = convert_weights_only(g, cfg);
        CHECK(qm.weights_only);
        Rng rng(19);
        Tensor in = random_tensor({2, 28, 28, 1}, rng, 0.0, 1.0);
        Tensor y = run_weights_only(qm, in);
        Tensor y0 = run_graph(g, {{"x", in}}).at("fc");
        CHECK(max_abs_diff(y, y0) < 0.1);
    }
}
