#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "oscqat/tensor.hpp"

namespace oscqat {

struct Dataset {
    Tensor images;            // [N, C, H, W], values in [0,1]
    std::vector<int> labels;  // [N]
    std::size_t num_classes = 0;

    std::size_t size() const { return labels.size(); }
    std::size_t channels() const { return images.shape[1]; }
    std::size_t height() const { return images.shape[2]; }
    std::size_t width() const { return images.shape[3]; }

    // Copies the given sample indices into a batch tensor + label vector.
    std::pair<Tensor, std::vector<int>> batch(const std::vector<std::size_t>& idx) const;
    // Contiguous batch [first, first+count).
    std::pair<Tensor, std::vector<int>> batch_range(std::size_t first, std::size_t count) const;
};

// IDX image/label file pair (big-endian magic 0x00000803 / 0x00000801).
// Parse failures report the byte offset.
Dataset load_idx(const std::string& images_path, const std::string& labels_path);

// Seeded Gaussian-blob classification set for fully offline runs.
struct SyntheticSpec {
    std::size_t classes = 4;
    std::size_t height = 16;
    std::size_t width = 16;
    std::size_t samples = 2048;
    double noise = 0.25;
    std::uint64_t seed = 7;
};
Dataset make_synthetic(const SyntheticSpec& spec);

}  // namespace oscqat
