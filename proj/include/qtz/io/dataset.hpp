#pragma once

#include <string>
#include <vector>

#include "qtz/rng.hpp"
#include "qtz/tensor.hpp"

namespace qtz {

// Labeled image set; images are NHWC floats in [0, 1].
struct Dataset {
    Tensor images;  // [N, H, W, C]
    std::vector<int> labels;

    std::int64_t size() const { return images.dim(0); }
    Tensor batch_images(const std::vector<std::int64_t>& idx) const;
    std::vector<int> batch_labels(const std::vector<std::int64_t>& idx) const;
};

// IDX-format files (MNIST layout): images magic 0x00000803, labels magic
// 0x00000801, big-endian header fields, u8 payload.
Dataset load_idx_dataset(const std::string& images_path, const std::string& labels_path);
void save_idx_dataset(const Dataset& ds, const std::string& images_path,
                      const std::string& labels_path);

// Locate train/test IDX files under a directory using the standard MNIST
// names (train-images-idx3-ubyte etc).
Dataset load_idx_dir(const std::string& dir, bool train);

// Self-contained synthetic 10-class task in MNIST shape: smooth per-class
// template patterns with random shifts, contrast jitter and additive noise.
Dataset synthesize_dataset(std::int64_t count, std::uint64_t seed, double noise = 0.18);

}  // namespace qtz
