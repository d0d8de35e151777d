#include <cmath>

#include "doctest.h"
#include "qtz/analysis/analysis.hpp"
#include "qtz/graph/rewrites.hpp"
#include "test_util.hpp"

using namespace qtz;
using namespace qtz::testutil;

TEST_CASE("sqnr basics") {
    SUBCASE("weights already on code points hit the cap") {
        QuantParams qp = symmetric_params(1.27, 8, Scheme::SymmetricSigned);
        Tensor w({1, 1, 1, 2});
        w[0] = dequantize(100, qp);
        w[1] = dequantize(127, qp);
        const auto db = sqnr(w, 3, Scheme::SymmetricSigned, Granularity::per_layer(), 8);
        // per-layer params derive max_abs from the data itself, so the code
        // points land exactly and the error is zero
        CHECK(db[0] == kSqnrCapDb);
        CHECK(db[1] == kSqnrCapDb);
    }

    SUBCASE("uniform random channel matches the classical uniform-quantization level") {
        // uniform signal exactly spanning a symmetric 8-bit quantizer:
        // SQNR = 10*log10(E x^2 / (scale^2/12)) = 10*log10(4*127^2) ~ 48.1 dB
        Rng rng(3);
        Tensor w({1, 1, 1000000, 1});
        for (auto& v : w.data) v = rng.uniform(-1.0, 1.0);
        const auto db = sqnr(w, 3, Scheme::SymmetricSigned, Granularity::per_channel(3), 8);
        const double expect = 10.0 * std::log10(4.0 * 127.0 * 127.0);
        CHECK(db[0] == doctest::Approx(expect).epsilon(0.01));
    }

    SUBCASE("100x scale spread: per-channel beats per-layer on the small channel by >= 20 dB") {
        Rng rng(5);
        Tensor w({1, 1, 256, 2});
        for (std::int64_t i = 0; i < 256; ++i) {
            w.at4(0, 0, i, 0) = rng.uniform(-1.0, 1.0) * 0.01;
            w.at4(0, 0, i, 1) = rng.uniform(-1.0, 1.0);
        }
        const auto per_channel =
            sqnr(w, 3, Scheme::SymmetricSigned, Granularity::per_channel(3), 8);
        const auto per_layer = sqnr(w, 3, Scheme::Affine, Granularity::per_layer(), 8);
        CHECK(per_channel[0] - per_layer[0] >= 20.0);
    }
}

TEST_CASE("per-channel sqnr dominates per-layer on every channel") {
    Rng rng(7);
    for (int trial = 0; trial < 20; ++trial) {
        const std::int64_t ch = 2 + rng.integer(6);
        Tensor w({3, 3, 4, ch});
        for (std::int64_t i = 0; i < w.numel(); ++i) {
            const double scale = std::pow(10.0, static_cast<double>(i % ch) / 2.0);
            w[i] = rng.uniform(-1.0, 1.0) * scale;
        }
        for (Scheme scheme : {Scheme::Affine, Scheme::SymmetricSigned}) {
            const auto pc = sqnr(w, 3, scheme, Granularity::per_channel(3), 8);
            const auto pl = sqnr(w, 3, scheme, Granularity::per_layer(), 8);
            for (std::size_t c = 0; c < pc.size(); ++c) CHECK(pc[c] >= pl[c] - 1e-9);
        }
    }
}

TEST_CASE("about 6 dB per extra bit on smooth distributions") {
    Rng rng(9);
    Tensor w({1, 1, 20000, 1});
    for (auto& v : w.data) v = rng.uniform(-1.0, 1.0);
    double prev = 0.0;
    for (int bits : {4, 8}) {
        const auto db = sqnr(w, 3, Scheme::SymmetricSigned, Granularity::per_channel(3), bits);
        if (bits > 4) {
            const double per_bit = (db[0] - prev) / 4.0;
            CHECK(per_bit >= 5.0);
            CHECK(per_bit <= 7.0);
        }
        prev = db[0];
    }
}

TEST_CASE("weight_power_histogram") {
    SUBCASE("all-equal weights concentrate at normalized power 1") {
        Tensor w({8}, 0.5);
        Histogram h = weight_power_histogram(w, 10);
        CHECK(h.max_value == doctest::Approx(1.0));
        std::int64_t total = 0;
        for (auto c : h.counts) total += c;
        CHECK(total == 8);  // mass equals element count
        CHECK(h.counts.back() == 8);
    }

    SUBCASE("all-zero tensor is degenerate") {
        Tensor w({8}, 0.0);
        CHECK_THROWS_AS(weight_power_histogram(w, 10), DegenerateTensor);
    }

    SUBCASE("standard normal: about 1% of mass above 6.63") {
        Rng rng(11);
        Tensor w({1000000});
        for (auto& v : w.data) v = rng.normal();
        double mean_power = 0.0;
        for (double v : w.data) mean_power += v * v;
        mean_power /= static_cast<double>(w.numel());
        std::int64_t above = 0;
        for (double v : w.data) above += (v * v / mean_power) > 6.63;
        const double frac = static_cast<double>(above) / static_cast<double>(w.numel());
        CHECK(frac == doctest::Approx(0.01).epsilon(0.15));
    }

    SUBCASE("folding a spread batch norm fattens the power tail") {
        Rng rng(13);
        Graph g = random_conv_bn_model(rng);
        // inject a 30x gamma spread on bn1
        Tensor& gamma = g.params.at("bn1_gamma");
        for (std::int64_t c = 0; c < gamma.numel(); ++c)
            gamma[c] = (c == 0) ? 0.1 : 3.0 * static_cast<double>(c);
        const Histogram before = weight_power_histogram(g.params.at("conv1_w"), 40);
        Graph folded = fold_bn_eval(g);
        const Histogram after = weight_power_histogram(folded.params.at("conv1_w"), 40);
        CHECK(after.max_value > before.max_value);
    }
}

TEST_CASE("compare_schemes") {
    SUBCASE("identity batch norm: all schemes within 2 dB per layer") {
        Rng rng(15);
        GraphBuilder b;
        auto x = b.input("x", {1, 6, 6, 2});
        auto c = b.conv2d("conv", x, normal_tensor({3, 3, 2, 4}, rng, 0.5), std::nullopt,
                          {1, 1, Padding::Same});
        const double eps = 1e-3;
        auto bn = b.batch_norm("bn", c, Tensor({4}, 1.0), Tensor({4}, 0.0), Tensor({4}, 0.0),
                               Tensor({4}, 1.0 - eps), eps);
        b.mark_output(bn);
        Graph folded = fold_bn_eval(b.build());
        const auto reports = compare_schemes(folded);
        REQUIRE(reports.size() == 3);
        // compare mean SQNR across schemes
        std::vector<double> means;
        for (const auto& r : reports) {
            double m = 0.0;
            for (double v : r.per_channel_db) m += v;
            means.push_back(m / static_cast<double>(r.per_channel_db.size()));
        }
        for (double m : means) CHECK(std::fabs(m - means[0]) < 2.0);
    }

    SUBCASE("100x gamma spread: per-channel dominates per-layer on every layer") {
        Rng rng(17);
        Graph g = random_conv_bn_model(rng);
        for (const char* name : {"bn1_gamma", "bn2_gamma"}) {
            Tensor& gamma = g.params.at(name);
            for (std::int64_t c = 0; c < gamma.numel(); ++c)
                gamma[c] = c == 0 ? 0.05 : 5.0 * static_cast<double>(c);
        }
        Graph folded = fold_bn_eval(g);
        const auto reports = compare_schemes(folded);
        // group per layer: per-layer asymmetric first, then the two per-channel rows
        for (std::size_t i = 0; i + 2 < reports.size(); i += 3) {
            double pl = 0.0, sc = 0.0, ac = 0.0;
            for (double v : reports[i].per_channel_db) pl += v;
            for (double v : reports[i + 1].per_channel_db) sc += v;
            for (double v : reports[i + 2].per_channel_db) ac += v;
            if (reports[i].layer == "fc") continue;  // no batch norm on the classifier
            CHECK(sc > pl);
            CHECK(ac > pl);
        }
    }

    SUBCASE("empty model gives an empty report") {
        GraphBuilder b;
        auto x = b.input("x", {1, 4, 4, 1});
        auto p = b.avg_pool("pool", x, {2, 2, 2, 2, Padding::Same});
        b.mark_output(p);
        CHECK(compare_schemes(b.build()).empty());
    }

    SUBCASE("csv emission has one row per layer/scheme/channel") {
        Rng rng(19);
        Graph folded = fold_bn_eval(random_conv_bn_model(rng));
        const auto reports = compare_schemes(folded);
        const std::string csv = sqnr_reports_csv(reports);
        std::int64_t expected_rows = 1;  // header
        for (const auto& r : reports)
            expected_rows += static_cast<std::int64_t>(r.per_channel_db.size());
        CHECK(std::count(csv.begin(), csv.end(), '\n') == expected_rows);
    }
}
