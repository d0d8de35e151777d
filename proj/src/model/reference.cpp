#include "qtz/model/reference.hpp"

#include <cmath>

#include "qtz/rng.hpp"

namespace qtz {

namespace {

Tensor he_normal(std::vector<std::int64_t> shape, std::int64_t fan_in, Rng& rng) {
    Tensor t(std::move(shape));
    const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
    for (auto& v : t.data) v = stddev * rng.normal();
    return t;
}

}  // namespace

Graph build_reference_model(std::uint64_t seed, std::int64_t conv1_ch, std::int64_t conv2_ch,
                            std::int64_t classes, double bn_momentum) {
    Rng rng(seed);
    GraphBuilder b;
    auto x = b.input("x", {-1, 28, 28, 1});

    auto c1 = b.conv2d("conv1", x, he_normal({3, 3, 1, conv1_ch}, 9, rng), std::nullopt,
                       {2, 2, Padding::Same});
    auto bn1 = b.batch_norm("bn1", c1, Tensor({conv1_ch}, 1.0), Tensor({conv1_ch}, 0.0),
                            Tensor({conv1_ch}, 0.0), Tensor({conv1_ch}, 1.0), 1e-3, bn_momentum);
    auto r1 = b.relu("relu1", bn1);

    auto c2 = b.conv2d("conv2", r1, he_normal({3, 3, conv1_ch, conv2_ch}, 9 * conv1_ch, rng),
                       std::nullopt, {2, 2, Padding::Same});
    auto bn2 = b.batch_norm("bn2", c2, Tensor({conv2_ch}, 1.0), Tensor({conv2_ch}, 0.0),
                            Tensor({conv2_ch}, 0.0), Tensor({conv2_ch}, 1.0), 1e-3, bn_momentum);
    auto r2 = b.relu("relu2", bn2);

    auto pooled = b.avg_pool("pool", r2, {2, 2, 2, 2, Padding::Same});
    const std::int64_t feat = 4 * 4 * conv2_ch;
    auto logits = b.fully_connected("fc", pooled, he_normal({feat, classes}, feat, rng),
                                    Tensor({classes}, 0.0));
    b.mark_output(logits);
    return b.build();
}

}  // namespace qtz
