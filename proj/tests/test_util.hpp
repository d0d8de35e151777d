#pragma once

#include <cmath>

#include "qtz/graph/graph.hpp"
#include "qtz/rng.hpp"

namespace qtz::testutil {

inline Tensor random_tensor(std::vector<std::int64_t> shape, Rng& rng, double lo = -1.0,
                            double hi = 1.0) {
    Tensor t(std::move(shape));
    for (auto& v : t.data) v = rng.uniform(lo, hi);
    return t;
}

inline Tensor normal_tensor(std::vector<std::int64_t> shape, Rng& rng, double stddev = 1.0) {
    Tensor t(std::move(shape));
    for (auto& v : t.data) v = stddev * rng.normal();
    return t;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
    double m = 0.0;
    for (std::int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::fabs(a[i] - b[i]));
    return m;
}

inline double max_rel_diff(const Tensor& a, const Tensor& b, double floor = 1e-9) {
    double m = 0.0;
    for (std::int64_t i = 0; i < a.numel(); ++i)
        m = std::max(m, std::fabs(a[i] - b[i]) / std::max(floor, std::fabs(b[i])));
    return m;
}

inline bool bit_equal(const Tensor& a, const Tensor& b) {
    if (!same_shape(a.shape, b.shape)) return false;
    for (std::int64_t i = 0; i < a.numel(); ++i)
        if (a[i] != b[i]) return false;
    return true;
}

// A conv+BN+ReLU / conv+BN+ReLU6 / fc model with randomized parameters and
// per-channel batch-norm statistics, the shape every fold rewrite has to chew.
inline Graph random_conv_bn_model(Rng& rng, std::int64_t cin = 3, std::int64_t c1 = 4,
                                  std::int64_t c2 = 5, std::int64_t hw = 8) {
    GraphBuilder b;
    auto x = b.input("x", {1, hw, hw, cin});
    auto conv1 = b.conv2d("conv1", x, normal_tensor({3, 3, cin, c1}, rng, 0.5), std::nullopt,
                          {1, 1, Padding::Same});
    Tensor g1({c1}), be1({c1}), mu1({c1}), var1({c1});
    for (auto& v : g1.data) v = rng.uniform(0.5, 2.0);
    for (auto& v : be1.data) v = rng.uniform(-0.5, 0.5);
    for (auto& v : mu1.data) v = rng.uniform(-1.0, 1.0);
    for (auto& v : var1.data) v = rng.uniform(0.1, 4.0);
    auto bn1 = b.batch_norm("bn1", conv1, g1, be1, mu1, var1);
    auto r1 = b.relu("relu1", bn1);
    auto conv2 = b.conv2d("conv2", r1, normal_tensor({3, 3, c1, c2}, rng, 0.5), std::nullopt,
                          {2, 2, Padding::Same});
    Tensor g2({c2}), be2({c2}), mu2({c2}), var2({c2});
    for (auto& v : g2.data) v = rng.uniform(0.5, 2.0);
    for (auto& v : be2.data) v = rng.uniform(-0.5, 0.5);
    for (auto& v : mu2.data) v = rng.uniform(-1.0, 1.0);
    for (auto& v : var2.data) v = rng.uniform(0.1, 4.0);
    auto bn2 = b.batch_norm("bn2", conv2, g2, be2, mu2, var2);
    auto r2 = b.relu6("relu2", bn2);
    auto pooled = b.avg_pool("pool", r2, {2, 2, 2, 2, Padding::Same});
    const std::int64_t feat = ((hw + 1) / 2 + 1) / 2 * (((hw + 1) / 2 + 1) / 2) * c2;
    auto logits = b.fully_connected("fc", pooled, normal_tensor({feat, 3}, rng, 0.3),
                                    random_tensor({3}, rng, -0.1, 0.1));
    b.mark_output(logits);
    return b.build();
}

}  // namespace qtz::testutil
