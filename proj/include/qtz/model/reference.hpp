#pragma once

#include <cstdint>

#include "qtz/graph/graph.hpp"

namespace qtz {

// The reference CNN: two Conv3x3+BN+ReLU blocks (stride 2), an AvgPool and a
// fully connected classifier over 28x28 grayscale inputs. Small enough to
// train on a laptop CPU, large enough to exercise every rewrite.
Graph build_reference_model(std::uint64_t seed, std::int64_t conv1_ch = 32,
                            std::int64_t conv2_ch = 64, std::int64_t classes = 10,
                            double bn_momentum = 0.9);

}  // namespace qtz
