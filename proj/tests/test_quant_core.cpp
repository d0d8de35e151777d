#include <cmath>
#include <map>

#include "doctest.h"
#include "qtz/quant/quantize.hpp"
#include "qtz/rng.hpp"

using namespace qtz;

TEST_CASE("relax_range includes zero") {
    RangeSpec r = relax_range({2.1, 3.5});
    CHECK(r.x_min == 0.0);
    CHECK(r.x_max == 3.5);

    r = relax_range({-1.0, 2.0});
    CHECK(r.x_min == -1.0);
    CHECK(r.x_max == 2.0);

    r = relax_range({-3.5, -2.1});
    CHECK(r.x_min == -3.5);
    CHECK(r.x_max == 0.0);
}

TEST_CASE("affine_params formulas") {
    QuantParams qp = affine_params({0.0, 6.0}, 8);
    CHECK(qp.scale == 6.0 / 255.0);
    CHECK(qp.zero_point == 0);

    // -x_min/scale = 127.5, round half away from zero gives 128
    qp = affine_params({-1.0, 1.0}, 8);
    CHECK(qp.scale == 2.0 / 255.0);
    CHECK(qp.zero_point == 128);

    qp = affine_params({-6.0, 0.0}, 8);
    CHECK(qp.scale == 6.0 / 255.0);
    CHECK(qp.zero_point == 255);

    CHECK_THROWS_AS(affine_params({1.0, 1.0}, 8), DegenerateRange);
}

TEST_CASE("symmetric_params code ranges") {
    QuantParams qp = symmetric_params(1.27, 8, Scheme::SymmetricSigned);
    CHECK(qp.scale == doctest::Approx(0.01).epsilon(1e-12));
    CHECK(qp.zero_point == 0);
    CHECK(qp.code_min() == -128);
    CHECK(qp.code_max() == 127);

    qp = symmetric_params(7.0, 4, Scheme::SymmetricSigned);
    CHECK(qp.scale == 1.0);
    CHECK(qp.code_min() == -8);
    CHECK(qp.code_max() == 7);

    qp = symmetric_params(7.0, 4, Scheme::SymmetricSigned, /*narrow=*/true);
    CHECK(qp.code_min() == -7);

    qp = symmetric_params(2.55, 8, Scheme::SymmetricUnsigned, /*narrow=*/true);
    CHECK(qp.scale == 2.55 / 254.0);
    CHECK(qp.code_min() == 0);
    CHECK(qp.code_max() == 254);

    CHECK_THROWS_AS(symmetric_params(0.0, 8, Scheme::SymmetricSigned), DegenerateRange);
}

TEST_CASE("quantize and dequantize basics") {
    QuantParams qp;
    qp.scale = 0.5;
    qp.zero_point = 10;
    qp.n_bits = 8;
    qp.scheme = Scheme::Affine;

    CHECK(quantize(0.0, qp) == 10);  // zero maps to the zero-point exactly
    CHECK(quantize(1.0, qp) == 12);
    CHECK(dequantize(12, qp) == 1.0);
    CHECK(dequantize(10, qp) == 0.0);

    QuantParams sat = affine_params({0.0, 6.0}, 8);
    CHECK(quantize(1000.0, sat) == 255);
    CHECK(quantize(-1000.0, sat) == 0);
    CHECK(quantize(1e300, sat) == 255);

    CHECK_THROWS_AS(dequantize(256, sat), CodeOutOfRange);
    CHECK_THROWS_AS(dequantize(-1, sat), CodeOutOfRange);
}

TEST_CASE("quantizer properties over randomized params") {
    Rng rng(42);
    const Scheme schemes[] = {Scheme::Affine, Scheme::SymmetricSigned, Scheme::SymmetricUnsigned};
    for (Scheme scheme : schemes) {
        for (int trial = 0; trial < 300; ++trial) {
            const int n_bits = (trial % 3 == 0) ? 4 : 8;
            const bool narrow = (trial % 5 == 0);
            double a = rng.uniform(-50.0, 50.0);
            double b = rng.uniform(-50.0, 50.0);
            QuantParams qp = params_from_minmax(std::min(a, b), std::max(a, b), n_bits, scheme,
                                                scheme == Scheme::Affine ? false : narrow);

            // exact zero: bit-exact round trip of 0
            CHECK(dequantize(quantize(0.0, qp), qp) == 0.0);

            const double lo = qp.float_min();
            const double hi = qp.float_max();
            double prev_code = quantize(lo - 1.0, qp);
            for (int k = 0; k <= 50; ++k) {
                const double x = lo + (hi - lo) * k / 50.0;
                // round trip within half a step
                CHECK(std::fabs(sim_quant(x, qp) - x) <= qp.scale / 2 + 1e-12);
                // idempotence, bit exact
                CHECK(sim_quant(sim_quant(x, qp), qp) == sim_quant(x, qp));
                // monotone in x
                const double code = quantize(x, qp);
                CHECK(code >= prev_code);
                prev_code = code;
            }
            // saturation on both tails
            CHECK(quantize(hi + qp.scale, qp) == qp.code_max());
            CHECK(quantize(hi + 1e6, qp) == qp.code_max());
            CHECK(quantize(lo - qp.scale, qp) == qp.code_min());
            CHECK(quantize(lo - 1e6, qp) == qp.code_min());
        }
    }
}

TEST_CASE("sim_quant saturates to a constant above the range") {
    QuantParams qp = affine_params({-1.0, 1.0}, 8);
    const double top = sim_quant(qp.float_max(), qp);
    CHECK(sim_quant(qp.float_max() + 0.1, qp) == top);
    CHECK(sim_quant(qp.float_max() + 100.0, qp) == top);
    CHECK(sim_quant(0.0, qp) == 0.0);
}

TEST_CASE("sim_quant_backward is the clamp derivative") {
    RangeSpec r{-1.0, 2.0};
    CHECK(sim_quant_backward(0.5, r, 1.0) == 1.0);
    CHECK(sim_quant_backward(2.1, r, 1.0) == 0.0);
    CHECK(sim_quant_backward(-1.0, r, 0.7) == 0.7);  // boundary inclusive
    CHECK(sim_quant_backward(2.0, r, 0.7) == 0.7);

    // central differences of clamp(x_min, x_max, x) at non-boundary points
    Rng rng(7);
    const double h = 1e-4;
    for (int i = 0; i < 2000; ++i) {
        double x = rng.uniform(-3.0, 4.0);
        if (std::fabs(x - r.x_min) < 2 * h || std::fabs(x - r.x_max) < 2 * h) continue;
        auto clamp_fn = [&](double v) { return clamp_to(r.x_min, r.x_max, v); };
        const double fd = (clamp_fn(x + h) - clamp_fn(x - h)) / (2 * h);
        CHECK(sim_quant_backward(x, r, 1.0) == doctest::Approx(fd).epsilon(1e-6));
    }
}

TEST_CASE("stochastic quantizer") {
    QuantParams qp = affine_params({-2.0, 2.0}, 8);
    Rng rng(3);

    SUBCASE("far outside the range saturates regardless of noise") {
        for (int i = 0; i < 100; ++i) {
            CHECK(quantize_stochastic(100.0, qp, rng.uniform() - 0.5) == qp.code_max());
            CHECK(quantize_stochastic(-100.0, qp, rng.uniform() - 0.5) == qp.code_min());
        }
    }

    SUBCASE("mean of dequantized codes passes through in-range values") {
        for (double x : {-1.234, -0.2, 0.0, 0.77, 1.9}) {
            const int n = 200000;
            double sum = 0.0;
            for (int i = 0; i < n; ++i)
                sum += dequantize(quantize_stochastic(x, qp, rng.uniform() - 0.5), qp);
            const double mean = sum / n;
            // 3 standard errors of a uniform residual over one step
            const double se = qp.scale / std::sqrt(12.0 * n);
            CHECK(std::fabs(mean - x) <= 3.0 * se + 1e-12);
        }
    }

    SUBCASE("a value on a code boundary lands on both neighbors about half the time") {
        const double boundary = qp.scale * 0.5;  // halfway between codes z and z+1
        std::map<std::int32_t, int> hist;
        const int n = 100000;
        for (int i = 0; i < n; ++i) ++hist[quantize_stochastic(boundary, qp, rng.uniform() - 0.5)];
        CHECK(hist.size() == 2);
        for (auto& [code, count] : hist) {
            (void)code;
            CHECK(count > n / 2 - 2000);
            CHECK(count < n / 2 + 2000);
        }
    }
}

TEST_CASE("quantize_tensor granularities") {
    // two channels along the last axis with a 100x scale spread
    Tensor t({1, 1, 4, 2});
    const double ch0[] = {-1.0, 1.0, 0.5, -0.25};
    const double ch1[] = {-100.0, 100.0, 50.0, -25.0};
    for (int i = 0; i < 4; ++i) {
        t.at4(0, 0, i, 0) = ch0[i];
        t.at4(0, 0, i, 1) = ch1[i];
    }

    SUBCASE("per-channel symmetric gives each channel its own scale") {
        TensorQuant tq =
            quantize_tensor(t, Granularity::per_channel(3), Scheme::SymmetricSigned, 8);
        REQUIRE(tq.params.size() == 2);
        CHECK(tq.params[0].scale == doctest::Approx(1.0 / 127).epsilon(1e-12));
        CHECK(tq.params[1].scale == doctest::Approx(100.0 / 127).epsilon(1e-12));
    }

    SUBCASE("per-layer symmetric squeezes the small channel into a few codes") {
        TensorQuant tq = quantize_tensor(t, Granularity::per_layer(), Scheme::SymmetricSigned, 8);
        REQUIRE(tq.params.size() == 1);
        CHECK(tq.params[0].scale == doctest::Approx(100.0 / 127).epsilon(1e-12));
        for (int i = 0; i < 4; ++i) {
            const std::int32_t code = tq.codes.at4(0, 0, i, 0);
            CHECK(code >= -1);
            CHECK(code <= 1);
        }
    }

    SUBCASE("an all-zeros channel still quantizes and dequantizes to exact zeros") {
        Tensor z({2, 3});
        z.at2(0, 0) = 1.0;
        z.at2(0, 1) = -2.0;
        z.at2(0, 2) = 0.5;  // row 1 stays all zero
        TensorQuant tq = quantize_tensor(z, Granularity::per_channel(0), Scheme::SymmetricSigned, 8);
        Tensor back = dequantize_tensor(tq);
        for (int j = 0; j < 3; ++j) CHECK(back.at2(1, j) == 0.0);
    }
}
