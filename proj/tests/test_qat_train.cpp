#include <cmath>

#include "doctest.h"
#include "qtz/model/reference.hpp"
#include "qtz/quant/quantize.hpp"
#include "qtz/train/trainer.hpp"
#include "test_util.hpp"

using namespace qtz;
using namespace qtz::testutil;

namespace {

// 2-layer toy model: conv+BN+relu then fc, the smallest thing that exercises
// the corrected-fold backward end to end.
Graph toy_model(std::uint64_t seed) {
    Rng rng(seed);
    GraphBuilder b;
    auto x = b.input("x", {-1, 6, 6, 1});
    auto c1 = b.conv2d("conv1", x, normal_tensor({3, 3, 1, 3}, rng, 0.6), std::nullopt,
                       {2, 2, Padding::Same});
    Tensor g({3}), be({3}), mu({3}), var({3});
    for (auto& v : g.data) v = rng.uniform(0.6, 1.5);
    for (auto& v : be.data) v = rng.uniform(-0.2, 0.2);
    for (auto& v : mu.data) v = rng.uniform(-0.3, 0.3);
    for (auto& v : var.data) v = rng.uniform(0.5, 2.0);
    auto bn1 = b.batch_norm("bn1", c1, g, be, mu, var);
    auto r1 = b.relu("relu1", bn1);
    auto logits = b.fully_connected("fc", r1, normal_tensor({27, 4}, rng, 0.4),
                                    random_tensor({4}, rng, -0.1, 0.1));
    b.mark_output(logits);
    return b.build();
}

Graph toy_model_mixed(std::uint64_t seed) {
    // depthwise + add + concat + relu6 + avgpool coverage
    Rng rng(seed);
    GraphBuilder b;
    auto x = b.input("x", {-1, 6, 6, 2});
    auto dw = b.depthwise_conv2d("dw", x, normal_tensor({3, 3, 2, 1}, rng, 0.5), std::nullopt,
                                 {1, 1, Padding::Same});
    Tensor g({2}), be({2}), mu({2}), var({2});
    for (auto& v : g.data) v = rng.uniform(0.6, 1.5);
    for (auto& v : be.data) v = rng.uniform(-0.2, 0.2);
    for (auto& v : mu.data) v = rng.uniform(-0.3, 0.3);
    for (auto& v : var.data) v = rng.uniform(0.5, 2.0);
    auto bn = b.batch_norm("bn", dw, g, be, mu, var);
    auto r = b.relu6("r6", bn);
    auto sum = b.add("sum", r, x);
    auto cat = b.concat("cat", {sum, x}, 3);
    auto pool = b.avg_pool("pool", cat, {2, 2, 2, 2, Padding::Same});
    auto logits = b.fully_connected("fc", pool, normal_tensor({36, 3}, rng, 0.4),
                                    random_tensor({3}, rng, -0.1, 0.1));
    b.mark_output(logits);
    return b.build();
}

struct GradCheckSetup {
    TrainState st;
    TrainConfig cfg;
    Tensor images;
    std::vector<int> labels;
};

GradCheckSetup make_setup(const Graph& model, bool naive, std::int64_t freeze_delay) {
    GradCheckSetup s;
    s.cfg.learning_rate = 0.05;
    s.cfg.total_steps = 100;
    s.cfg.quant_delay = 0;
    s.cfg.freeze_bn_delay = freeze_delay;
    s.cfg.naive_bn_fold = naive;
    s.cfg.weight_scheme = Scheme::SymmetricSigned;
    s.cfg.weight_per_channel = true;
    s.cfg.rng_seed = 99;
    s.st = make_train_state(model, s.cfg);
    Rng rng(7);
    const std::int64_t cin = model.params.count("conv1_w") ? 1 : 2;
    s.images = random_tensor({4, 6, 6, cin}, rng, 0.0, 1.0);
    for (int i = 0; i < 4; ++i) s.labels.push_back(static_cast<int>(rng.integer(3)));
    return s;
}

// Central-difference check of d(loss)/d(param) against the analytic backward.
// `mode` selects the forward surface; for quantized training the surface the
// STE differentiates is the clamp surrogate.
void gradient_check(GradCheckSetup& s, FqMode mode, double tol) {
    // populate activation ranges, then freeze them for a stable surface
    ForwardOptions warm;
    warm.mode = FqMode::Quantize;
    warm.update_stats = true;
    forward_train(s.st, s.images, s.labels, s.cfg, warm);

    ForwardOptions opts;
    opts.mode = mode;
    opts.update_stats = false;

    ForwardCache cache = forward_train(s.st, s.images, s.labels, s.cfg, opts);
    auto grads = backward_update(s.st, cache, s.cfg, /*apply=*/false);

    const double h = 1e-5;
    int checked = 0;
    Rng pick(12345);
    for (const std::string& name : s.st.learnable) {
        Tensor& p = s.st.graph.params.at(name);
        const Tensor& g = grads.at(name);
        const std::int64_t samples = std::min<std::int64_t>(p.numel(), 6);
        for (std::int64_t k = 0; k < samples; ++k) {
            const std::int64_t i = pick.integer(p.numel());
            const double orig = p[i];
            p[i] = orig + h;
            const double lp = forward_train(s.st, s.images, s.labels, s.cfg, opts).loss;
            p[i] = orig - h;
            const double lm = forward_train(s.st, s.images, s.labels, s.cfg, opts).loss;
            p[i] = orig;
            const double fd = (lp - lm) / (2 * h);
            const double err = std::fabs(g[i] - fd) / std::max(1e-3, std::fabs(fd));
            INFO(name, "[", i, "]: analytic ", g[i], " fd ", fd);
            CHECK(err < tol);
            ++checked;
        }
    }
    CHECK(checked > 0);
}

}  // namespace

TEST_CASE("gradient check: float pre-freeze (textbook batch norm path)") {
    auto s = make_setup(toy_model(1), false, 1000);
    gradient_check(s, FqMode::Off, 1e-4);
}

TEST_CASE("gradient check: quantized pre-freeze (corrected fold, clamp surrogate)") {
    auto s = make_setup(toy_model(2), false, 1000);
    gradient_check(s, FqMode::ClampSurrogate, 1e-4);
}

TEST_CASE("gradient check: quantized post-freeze") {
    auto s = make_setup(toy_model(3), false, 0);
    s.st.bn_frozen = true;
    gradient_check(s, FqMode::ClampSurrogate, 1e-4);
}

TEST_CASE("gradient check: naive batch-stat folding") {
    auto s = make_setup(toy_model(4), true, 1000);
    gradient_check(s, FqMode::ClampSurrogate, 1e-4);
}

TEST_CASE("gradient check: depthwise/add/concat/relu6/avgpool model") {
    auto s = make_setup(toy_model_mixed(5), false, 1000);
    gradient_check(s, FqMode::Off, 1e-4);
    auto s2 = make_setup(toy_model_mixed(6), false, 1000);
    gradient_check(s2, FqMode::ClampSurrogate, 1e-4);
}

TEST_CASE("quant delay gates to a pure float forward") {
    Graph model = toy_model(7);
    TrainConfig cfg;
    cfg.quant_delay = 10;
    cfg.freeze_bn_delay = 100;
    TrainState st = make_train_state(model, cfg);
    Rng rng(3);
    Tensor images = random_tensor({4, 6, 6, 1}, rng, 0.0, 1.0);
    std::vector<int> labels = {0, 1, 2, 3};
    st.step = 0;  // < quant_delay
    ForwardCache cache = forward_train(st, images, labels, cfg);

    ExecOptions opts;
    opts.training_bn = true;
    opts.fq_mode = FqMode::Off;
    Tensor expect = run_graph(model, {{"x", images}}, opts).at("fc");
    CHECK(bit_equal(cache.values.at(st.graph.outputs[0]), expect));
}

TEST_CASE("pre-freeze updates behave like plain SGD before quant_delay") {
    Graph model = toy_model(8);
    TrainConfig cfg;
    cfg.quant_delay = 1000;
    cfg.learning_rate = 0.1;
    TrainState st = make_train_state(model, cfg);
    Rng rng(5);
    Tensor images = random_tensor({8, 6, 6, 1}, rng, 0.0, 1.0);
    std::vector<int> labels;
    for (int i = 0; i < 8; ++i) labels.push_back(static_cast<int>(rng.integer(4)));
    const double l0 = forward_train(st, images, labels, cfg).loss;
    for (int i = 0; i < 20; ++i) {
        ForwardCache c = forward_train(st, images, labels, cfg);
        backward_update(st, c, cfg);
    }
    const double l1 = forward_train(st, images, labels, cfg).loss;
    CHECK(l1 < l0);  // same-batch SGD descends
}

TEST_CASE("batch-norm statistics updates and freezing") {
    Graph model = toy_model(9);
    TrainConfig cfg;
    cfg.freeze_bn_delay = 5;
    cfg.bn_momentum = 0.5;
    TrainState st = make_train_state(model, cfg);
    Rng rng(6);
    Tensor images = random_tensor({8, 6, 6, 1}, rng, 0.0, 1.0);
    std::vector<int> labels(8, 0);

    SUBCASE("momentum 1 never changes the moving statistics") {
        for (Node& n : st.graph.nodes)
            if (n.fold) n.fold->bn.momentum = 1.0;
        const Tensor before = st.graph.params.at("bn1_mean");
        ForwardCache c = forward_train(st, images, labels, cfg);
        update_bn_statistics(st, c, cfg);
        CHECK(bit_equal(st.graph.params.at("bn1_mean"), before));
    }

    SUBCASE("constant batches converge geometrically at rate momentum^t") {
        for (Node& n : st.graph.nodes)
            if (n.fold) n.fold->bn.momentum = 0.5;
        ForwardCache c = forward_train(st, images, labels, cfg);
        const auto& nc = c.per_node.at(st.graph.producer("bn1")->id);
        const double target = nc.mu_b[0];
        const double start = st.graph.params.at("bn1_mean")[0];
        for (int t = 1; t <= 4; ++t) {
            update_bn_statistics(st, c, cfg);
            const double expect = target + std::pow(0.5, t) * (start - target);
            CHECK(st.graph.params.at("bn1_mean")[0] == doctest::Approx(expect).epsilon(1e-12));
            st.step = t;
        }
    }

    SUBCASE("statistics freeze at freeze_bn_delay and stay bit-identical") {
        st.step = 5;
        ForwardCache c = forward_train(st, images, labels, cfg);
        update_bn_statistics(st, c, cfg);
        CHECK(st.bn_frozen);
        const Tensor frozen_mean = st.graph.params.at("bn1_mean");
        for (int t = 0; t < 3; ++t) {
            st.step = 6 + t;
            ForwardCache c2 = forward_train(st, images, labels, cfg);
            update_bn_statistics(st, c2, cfg);
            CHECK(bit_equal(st.graph.params.at("bn1_mean"), frozen_mean));
        }
    }
}

TEST_CASE("update_activation_ranges") {
    CalibrationStats stats;
    stats.momentum = 0.9;
    Tensor t({4}, {-1.0, 0.5, 2.0, 1.0});
    update_activation_ranges(stats, t);
    CHECK(stats.moving_min == -1.0);  // first batch initializes directly
    CHECK(stats.moving_max == 2.0);

    SUBCASE("a constant stream is a fixed point") {
        Tensor c({2}, {0.0, 6.0});
        CalibrationStats s2;
        s2.momentum = 0.9;
        for (int i = 0; i < 200; ++i) update_activation_ranges(s2, c);
        CHECK(s2.moving_min == doctest::Approx(0.0));
        CHECK(s2.moving_max == doctest::Approx(6.0));
    }

    SUBCASE("alternating batches settle around the mean with EMA ripple") {
        // EMA limit cycle of alternating maxima 1, 3 with momentum m:
        // after the 3-batch, x = (m*1 + 3)/(1+m); after the 1-batch, (m*3 + 1)/(1+m)
        CalibrationStats s2;
        s2.momentum = 0.9;
        Tensor a({2}, {0.0, 1.0}), b({2}, {0.0, 3.0});
        for (int i = 0; i < 500; ++i) {
            update_activation_ranges(s2, a);
            update_activation_ranges(s2, b);
        }
        const double hi = (0.9 * 1.0 + 3.0) / 1.9;
        CHECK(s2.moving_max == doctest::Approx(hi).epsilon(1e-6));
        update_activation_ranges(s2, a);
        const double lo = (0.9 * 3.0 + 1.0) / 1.9;
        CHECK(s2.moving_max == doctest::Approx(lo).epsilon(1e-6));
        CHECK(std::fabs((hi + lo) / 2 - 2.0) < 0.03);
    }
}

TEST_CASE("ema of weights") {
    SUBCASE("decay 0 copies the instantaneous weights") {
        std::map<std::string, Tensor> params{{"w", Tensor({2}, {1.0, -2.0})}};
        std::map<std::string, Tensor> ema{{"w", Tensor({2}, {5.0, 5.0})}};
        ema_update(ema, params, {"w"}, 0.0);
        CHECK(bit_equal(ema.at("w"), params.at("w")));
    }

    SUBCASE("constant weights are a fixed point") {
        std::map<std::string, Tensor> params{{"w", Tensor({1}, {0.7})}};
        std::map<std::string, Tensor> ema{{"w", Tensor({1}, {0.0})}};
        for (int i = 0; i < 2000; ++i) ema_update(ema, params, {"w"}, 0.99);
        CHECK(ema.at("w")[0] == doctest::Approx(0.7).epsilon(1e-6));
    }

    SUBCASE("a boundary-straddling EMA lands one full code away") {
        // w_float sits just above a code boundary, its EMA just below: the
        // quantized weights differ by one full step
        QuantParams qp = affine_params({-1.0, 1.0}, 8);
        const double boundary = qp.float_min() + 10.5 * qp.scale;
        const double w_inst = boundary + 1e-6;
        const double w_ema = boundary - 1e-6;
        CHECK(sim_quant(w_inst, qp) - sim_quant(w_ema, qp) == doctest::Approx(qp.scale));
    }
}

TEST_CASE("master-weight purity: forward quantization is a pure function of the floats") {
    Graph model = toy_model(10);
    TrainConfig cfg;
    cfg.quant_delay = 0;
    cfg.freeze_bn_delay = 2;
    TrainState st = make_train_state(model, cfg);
    Rng rng(8);
    Tensor images = random_tensor({4, 6, 6, 1}, rng, 0.0, 1.0);
    std::vector<int> labels = {0, 1, 2, 0};
    for (int step = 0; step < 4; ++step) {
        st.step = step;
        st.bn_frozen = st.bn_frozen || step >= cfg.freeze_bn_delay;
        ForwardCache c = forward_train(st, images, labels, cfg);
        backward_update(st, c, cfg);
        update_bn_statistics(st, c, cfg);
    }
    // recompute folded weights + sim-quant from the master floats; a fresh
    // forward must use exactly that tensor
    ForwardOptions opts;
    opts.update_stats = false;
    ForwardCache c = forward_train(st, images, labels, cfg, opts);
    const Node* conv = st.graph.producer("bn1");
    const NodeCache& nc = c.per_node.at(conv->id);
    Tensor u = folded_weights(st.graph, *conv, st.graph.params);
    const auto qps = tensor_quant_params(u, Granularity::per_channel(3), cfg.weight_scheme,
                                         cfg.weight_bits, cfg.weight_narrow);
    Tensor expect = fake_quant_apply(u, qps, 3, FqMode::Quantize);
    CHECK(bit_equal(nc.wq, expect));
}

TEST_CASE("deterministic training given a fixed seed") {
    Dataset data = synthesize_dataset(64, 77);
    auto run_once = [&]() {
        Graph model = build_reference_model(21, 4, 6);
        TrainConfig cfg;
        cfg.total_steps = 6;
        cfg.batch_size = 8;
        cfg.quant_delay = 2;
        cfg.freeze_bn_delay = 4;
        cfg.learning_rate = 0.05;
        cfg.rng_seed = 5;
        TrainState st = make_train_state(model, cfg);
        train(st, data, data, cfg);
        return st.graph.params;
    };
    auto p1 = run_once();
    auto p2 = run_once();
    REQUIRE(p1.size() == p2.size());
    for (const auto& [name, t] : p1) CHECK(bit_equal(t, p2.at(name)));
}

TEST_CASE("post-freeze training forward matches the eval-graph forward") {
    Dataset data = synthesize_dataset(64, 33);
    Graph model = build_reference_model(22, 4, 6);
    TrainConfig cfg;
    cfg.total_steps = 8;
    cfg.batch_size = 8;
    cfg.quant_delay = 0;
    cfg.freeze_bn_delay = 4;
    cfg.learning_rate = 0.02;
    TrainState st = make_train_state(model, cfg);
    train(st, data, data, cfg);
    REQUIRE(st.bn_frozen);

    std::vector<std::int64_t> idx = {0, 1, 2, 3};
    Tensor images = data.batch_images(idx);
    ForwardOptions opts;
    opts.update_stats = false;
    ForwardCache c = forward_train(st, images, data.batch_labels(idx), cfg, opts);
    const Tensor& train_out = c.values.at(st.graph.outputs[0]);

    Graph eval_graph = make_eval_graph(st, cfg, false, true);
    auto ranges = activation_ranges(st);
    ExecOptions eopts;
    eopts.fq_mode = FqMode::Quantize;
    eopts.act_ranges = &ranges;
    Tensor eval_out = run_graph(eval_graph, {{"x", images}}, eopts).at(eval_graph.outputs[0]);
    CHECK(max_rel_diff(train_out, eval_out, 1e-2) < 1e-5);
}

TEST_CASE("total_steps 0 returns the model unchanged") {
    Graph model = toy_model(11);
    TrainConfig cfg;
    cfg.total_steps = 0;
    TrainState st = make_train_state(model, cfg);
    const auto before = st.graph.params;
    Dataset data = synthesize_dataset(8, 1);
    train(st, data, data, cfg);
    for (const auto& [name, t] : before) CHECK(bit_equal(t, st.graph.params.at(name)));
}
