#pragma once

#include <cstdint>
#include <vector>

#include "deit/data.hpp"
#include "deit/rng.hpp"
#include "deit/tensor.hpp"

namespace deit::augment {

struct AugPolicy {
    bool enabled = true;
    double mixup_prob = 0.8;
    double mixup_alpha = 0.8;
    double cutmix_prob = 1.0;
    double cutmix_alpha = 1.0;
    double erasing_prob = 0.25;
    int randaug_magnitude = 9;
    int randaug_layers = 2;
    double randaug_prob = 0.5;  // per-op application probability
    int repeated_aug_m = 3;
    double hflip_prob = 0.5;

    void validate() const;
};

struct Batch {
    Tensor<float> images;   // [B,3,r,r], channel-normalized
    Tensor<float> targets;  // [B,C], rows sum to 1
    std::vector<i64> indices;
    std::vector<std::uint64_t> sample_seeds;  // RNG provenance per occurrence
};

// Repeated-augmentation batching: each batch holds batch_size/m distinct
// indices, each repeated m times; an epoch emits floor(n/batch_size) batches
// off one shuffled stream, so about n/m distinct images appear per epoch.
class RepeatedAugSampler {
public:
    RepeatedAugSampler(i64 dataset_size, i64 batch_size, int m);

    i64 batches_per_epoch() const { return dataset_size_ / batch_size_; }
    i64 distinct_per_epoch() const { return batches_per_epoch() * (batch_size_ / m_); }
    i64 batch_size() const { return batch_size_; }
    int repetitions() const { return m_; }

    std::vector<std::vector<i64>> epoch(std::uint64_t master_seed, i64 epoch_index) const;

private:
    i64 dataset_size_;
    i64 batch_size_;
    int m_;
};

// Single-image transforms; images are contiguous [3,r,r].
void horizontal_flip(float* img, i64 resolution);
// Reduced op set {identity, hflip, translate-x/y, rotate, brightness,
// contrast, solarize, posterize}; strengths scale with magnitude/10 and every
// op degenerates to the identity at magnitude 0. Operates on the [0,1] scale.
void rand_augment_lite(float* img, i64 resolution, int magnitude, int layers, double op_prob, Rng& rng);
// Rectangle of per-pixel normal noise; area fraction in [0.02,0.33], aspect
// in [0.3,3.3]. Runs on normalized pixels.
void random_erasing(float* img, i64 resolution, double prob, Rng& rng);

// Whole-batch mixes (one lambda / one box per batch, partner via a cyclic
// shift). The *_with forms take the draw explicitly; the rng forms sample
// lambda ~ Beta(alpha, alpha) and are applied unconditionally -- the pipeline
// rolls the dice.
void mixup_with(Batch& batch, double lambda, i64 shift);
void mixup(Batch& batch, double alpha, Rng& rng);

// Pastes the partner's pixels inside the clipped box [y0,y1) x [x0,x1) and
// mixes targets by the realized area fraction; returns that fraction
// (lambda-hat = 1 - box_area / r^2).
float cutmix_with(Batch& batch, i64 y0, i64 y1, i64 x0, i64 x1, i64 shift);
void cutmix(Batch& batch, double alpha, Rng& rng);

// Assembles an augmented, normalized batch for the given dataset indices.
// Per-occurrence RNG streams derive from (master_seed, epoch, index, slot) so
// repeated-augmentation copies get independent draws and the result does not
// depend on worker scheduling. With policy.enabled == false this reduces to
// normalization plus one-hot targets.
Batch make_batch(const data::Dataset& ds, const std::vector<i64>& indices, const AugPolicy& policy,
                 std::uint64_t master_seed, i64 epoch_index, i64 batch_index);

}  // namespace deit::augment
