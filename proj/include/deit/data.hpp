#pragma once

#include <array>
#include <string>
#include <string_view>
#include <vector>

#include "deit/rng.hpp"
#include "deit/tensor.hpp"

namespace deit::data {

// Images are stored channel-planar ([3,r,r] per sample) on the [0,1] pixel
// scale; channel statistics live alongside so the pipeline can normalize and
// invert exactly.
struct Dataset {
    i64 count = 0;
    i64 resolution = 0;
    i64 num_classes = 0;
    std::vector<float> images;
    std::vector<i64> labels;
    std::array<float, 3> channel_mean{0.f, 0.f, 0.f};
    std::array<float, 3> channel_std{1.f, 1.f, 1.f};

    i64 image_numel() const { return 3 * resolution * resolution; }
    const float* image(i64 i) const { return images.data() + i * image_numel(); }
    float* image(i64 i) { return images.data() + i * image_numel(); }

    // First n samples (train-subset experiments).
    Dataset take(i64 n) const;
    // Contiguous sample range [start, start+n); keeps this split's stats.
    Dataset slice(i64 start, i64 n) const;
    // Adopt another split's normalization statistics.
    void use_stats_of(const Dataset& other);
};

void compute_channel_stats(Dataset& ds);

void normalize_image(float* img, i64 resolution, const std::array<float, 3>& mean,
                     const std::array<float, 3>& stddev);
void denormalize_image(float* img, i64 resolution, const std::array<float, 3>& mean,
                       const std::array<float, 3>& stddev);

// Standard CIFAR-10 binary records: 1 label byte + 3072 pixel bytes (R,G,B
// planes, row-major). `path` may be a single .bin file or a directory holding
// data_batch_*.bin. Pixels are scaled to [0,1]; channel stats are computed
// from the loaded split.
Dataset load_cifar10(const std::string& path);

enum class SynthKind { GaussianBlobs, StripedPatterns };
SynthKind synth_kind_from_string(std::string_view s);

// Deterministic separable-by-construction datasets for desk-scale runs.
Dataset synth_dataset(SynthKind kind, i64 n, i64 num_classes, i64 resolution, std::uint64_t seed);

// Writes the dataset in the CIFAR-10 record layout (requires resolution 32,
// 10 or fewer classes fit the label byte either way).
void export_cifar_format(const Dataset& ds, const std::string& path);

// Bilinear rescale of every image (e.g. the 224-parity experiment).
void rescale_dataset(Dataset& ds, i64 new_resolution);

}  // namespace deit::data
