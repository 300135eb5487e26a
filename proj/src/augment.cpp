#include "deit/augment.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "deit/distill.hpp"
#include "deit/error.hpp"

namespace deit::augment {

void AugPolicy::validate() const {
    for (double p : {mixup_prob, cutmix_prob, erasing_prob, randaug_prob, hflip_prob}) {
        if (p < 0.0 || p > 1.0) throw ParamError("augment: probabilities must be in [0,1]");
    }
    if (randaug_magnitude < 0 || randaug_magnitude > 10) {
        throw ParamError("augment: randaug magnitude must be in [0,10]");
    }
    if (randaug_layers < 0) throw ParamError("augment: randaug layers must be >= 0");
    if (repeated_aug_m < 1) throw ParamError("augment: repeated_aug_m must be >= 1");
    if (!(mixup_alpha > 0.0) || !(cutmix_alpha > 0.0)) {
        throw ParamError("augment: beta parameters must be > 0");
    }
}

RepeatedAugSampler::RepeatedAugSampler(i64 dataset_size, i64 batch_size, int m)
    : dataset_size_(dataset_size), batch_size_(batch_size), m_(m) {
    if (dataset_size < 1) throw ParamError("sampler: empty dataset");
    if (m < 1) throw ParamError("sampler: m must be >= 1");
    if (batch_size < 1 || batch_size % m != 0) {
        throw ParamError("sampler: batch_size " + std::to_string(batch_size) +
                         " not divisible by m " + std::to_string(m));
    }
    if (batch_size > dataset_size * m) throw ParamError("sampler: batch_size exceeds dataset capacity");
}

std::vector<std::vector<i64>> RepeatedAugSampler::epoch(std::uint64_t master_seed, i64 epoch_index) const {
    std::vector<i64> stream(static_cast<std::size_t>(dataset_size_));
    for (i64 i = 0; i < dataset_size_; ++i) stream[static_cast<std::size_t>(i)] = i;
    Rng rng(seed_combine(master_seed, 0x5a3f9e1dULL, static_cast<std::uint64_t>(epoch_index)));
    rng.shuffle(stream);

    const i64 distinct_per_batch = batch_size_ / m_;
    std::vector<std::vector<i64>> batches;
    batches.reserve(static_cast<std::size_t>(batches_per_epoch()));
    i64 cursor = 0;
    for (i64 b = 0; b < batches_per_epoch(); ++b) {
        std::vector<i64> batch;
        batch.reserve(static_cast<std::size_t>(batch_size_));
        for (i64 d = 0; d < distinct_per_batch; ++d) {
            const i64 idx = stream[static_cast<std::size_t>(cursor++)];
            for (int rep = 0; rep < m_; ++rep) batch.push_back(idx);
        }
        batches.push_back(std::move(batch));
    }
    return batches;
}

void horizontal_flip(float* img, i64 r) {
    for (int c = 0; c < 3; ++c) {
        float* plane = img + c * r * r;
        for (i64 y = 0; y < r; ++y) {
            float* row = plane + y * r;
            for (i64 x = 0; x < r / 2; ++x) std::swap(row[x], row[r - 1 - x]);
        }
    }
}

namespace {

void translate_plane(float* plane, i64 r, i64 dx, i64 dy) {
    std::vector<float> out(static_cast<std::size_t>(r * r), 0.0f);
    for (i64 y = 0; y < r; ++y) {
        const i64 sy = y - dy;
        if (sy < 0 || sy >= r) continue;
        for (i64 x = 0; x < r; ++x) {
            const i64 sx = x - dx;
            if (sx >= 0 && sx < r) out[y * r + x] = plane[sy * r + sx];
        }
    }
    std::memcpy(plane, out.data(), static_cast<std::size_t>(r * r) * sizeof(float));
}

void rotate_plane(float* plane, i64 r, double degrees) {
    const double rad = degrees * M_PI / 180.0;
    const double ca = std::cos(rad), sa = std::sin(rad);
    const double cx = 0.5 * double(r - 1);
    std::vector<float> out(static_cast<std::size_t>(r * r), 0.0f);
    for (i64 y = 0; y < r; ++y) {
        for (i64 x = 0; x < r; ++x) {
            // inverse-rotate the output coordinate into the source image
            const double xr = ca * (double(x) - cx) + sa * (double(y) - cx) + cx;
            const double yr = -sa * (double(x) - cx) + ca * (double(y) - cx) + cx;
            const i64 x0 = static_cast<i64>(std::floor(xr));
            const i64 y0 = static_cast<i64>(std::floor(yr));
            const double fx = xr - double(x0), fy = yr - double(y0);
            double acc = 0.0;
            for (int dy = 0; dy <= 1; ++dy) {
                for (int dx = 0; dx <= 1; ++dx) {
                    const i64 xs = x0 + dx, ys = y0 + dy;
                    if (xs < 0 || xs >= r || ys < 0 || ys >= r) continue;
                    const double wgt = (dx ? fx : 1.0 - fx) * (dy ? fy : 1.0 - fy);
                    acc += wgt * plane[ys * r + xs];
                }
            }
            out[y * r + x] = static_cast<float>(acc);
        }
    }
    std::memcpy(plane, out.data(), static_cast<std::size_t>(r * r) * sizeof(float));
}

enum RandOp : int {
    kIdentity = 0,
    kHFlip,
    kTranslateX,
    kTranslateY,
    kRotate,
    kBrightness,
    kContrast,
    kSolarize,
    kPosterize,
    kNumRandOps
};

constexpr double kMaxRotateDeg = 30.0;
constexpr double kMaxTranslateFrac = 0.3;
constexpr double kMaxEnhanceDelta = 0.6;

}  // namespace

void rand_augment_lite(float* img, i64 r, int magnitude, int layers, double op_prob, Rng& rng) {
    if (magnitude < 0 || magnitude > 10) throw ParamError("rand_augment: magnitude must be in [0,10]");
    const double strength = double(magnitude) / 10.0;
    const i64 plane = r * r;

    for (int layer = 0; layer < layers; ++layer) {
        const int op = static_cast<int>(rng.uniform_int(kNumRandOps));
        const bool fire = rng.bernoulli(op_prob);
        if (!fire) continue;
        switch (op) {
            case kIdentity:
                break;
            case kHFlip:
                // all-or-nothing op, still gated so magnitude 0 is an identity
                if (magnitude > 0) horizontal_flip(img, r);
                break;
            case kTranslateX:
            case kTranslateY: {
                const double sign = rng.bernoulli(0.5) ? 1.0 : -1.0;
                const i64 shift = static_cast<i64>(std::lround(sign * strength * kMaxTranslateFrac * double(r)));
                if (shift == 0) break;
                for (int c = 0; c < 3; ++c) {
                    translate_plane(img + c * plane, r, op == kTranslateX ? shift : 0,
                                    op == kTranslateY ? shift : 0);
                }
                break;
            }
            case kRotate: {
                const double sign = rng.bernoulli(0.5) ? 1.0 : -1.0;
                const double deg = sign * strength * kMaxRotateDeg;
                if (deg == 0.0) break;  // rotate by zero stays the identity bit-exactly
                for (int c = 0; c < 3; ++c) rotate_plane(img + c * plane, r, deg);
                break;
            }
            case kBrightness: {
                const double sign = rng.bernoulli(0.5) ? 1.0 : -1.0;
                const float factor = static_cast<float>(1.0 + sign * strength * kMaxEnhanceDelta);
                for (i64 j = 0; j < 3 * plane; ++j) img[j] = std::clamp(img[j] * factor, 0.0f, 1.0f);
                break;
            }
            case kContrast: {
                const double sign = rng.bernoulli(0.5) ? 1.0 : -1.0;
                const float factor = static_cast<float>(1.0 + sign * strength * kMaxEnhanceDelta);
                double mean = 0.0;
                for (i64 j = 0; j < 3 * plane; ++j) mean += img[j];
                const float m = static_cast<float>(mean / double(3 * plane));
                for (i64 j = 0; j < 3 * plane; ++j) {
                    img[j] = std::clamp(m + factor * (img[j] - m), 0.0f, 1.0f);
                }
                break;
            }
            case kSolarize: {
                // threshold 1 at magnitude 0: nothing inverts
                const float threshold = static_cast<float>(1.0 - 0.9 * strength);
                for (i64 j = 0; j < 3 * plane; ++j) {
                    if (img[j] > threshold) img[j] = 1.0f - img[j];
                }
                break;
            }
            case kPosterize: {
                const int bits = 8 - static_cast<int>(std::lround(strength * 4.0));
                if (bits >= 8) break;  // full depth is the identity
                const float levels = static_cast<float>(1 << bits);
                for (i64 j = 0; j < 3 * plane; ++j) {
                    img[j] = std::min(std::floor(img[j] * levels), levels - 1.0f) / levels;
                }
                break;
            }
            default:
                break;
        }
    }
}

void random_erasing(float* img, i64 r, double prob, Rng& rng) {
    if (prob < 0.0 || prob > 1.0) throw ParamError("random_erasing: prob must be in [0,1]");
    if (!rng.bernoulli(prob)) return;

    i64 bh = 0, bw = 0;
    for (int attempt = 0; attempt < 10; ++attempt) {
        const double area = rng.uniform(0.02, 0.33) * double(r * r);
        const double aspect = std::exp(rng.uniform(std::log(0.3), std::log(3.3)));
        const i64 h = static_cast<i64>(std::lround(std::sqrt(area * aspect)));
        const i64 w = static_cast<i64>(std::lround(std::sqrt(area / aspect)));
        if (h >= 1 && w >= 1 && h < r && w < r) {
            bh = h;
            bw = w;
            break;
        }
    }
    if (bh == 0) {  // degenerate geometry: clamp a square patch
        bh = bw = std::max<i64>(1, r / 4);
    }
    const i64 top = rng.uniform_int(r - bh + 1);
    const i64 left = rng.uniform_int(r - bw + 1);
    const i64 plane = r * r;
    for (int c = 0; c < 3; ++c) {
        for (i64 y = top; y < top + bh; ++y) {
            for (i64 x = left; x < left + bw; ++x) {
                img[c * plane + y * r + x] = static_cast<float>(rng.normal());
            }
        }
    }
}

void mixup_with(Batch& batch, double lambda, i64 shift) {
    const i64 b = batch.images.dim(0);
    if (b < 2) throw ParamError("mixup: batch must hold at least 2 samples");
    const float lam = static_cast<float>(lambda);
    const i64 img_n = batch.images.numel() / b;
    const i64 tgt_n = batch.targets.numel() / b;

    Tensor<float> mixed_img = batch.images.clone();
    Tensor<float> mixed_tgt = batch.targets.clone();
    for (i64 i = 0; i < b; ++i) {
        const i64 j = (i + shift) % b;
        float* xi = mixed_img.data() + i * img_n;
        const float* xj = batch.images.data() + j * img_n;
        for (i64 k = 0; k < img_n; ++k) xi[k] = lam * xi[k] + (1.0f - lam) * xj[k];
        float* ti = mixed_tgt.data() + i * tgt_n;
        const float* tj = batch.targets.data() + j * tgt_n;
        for (i64 k = 0; k < tgt_n; ++k) ti[k] = lam * ti[k] + (1.0f - lam) * tj[k];
    }
    batch.images = mixed_img;
    batch.targets = mixed_tgt;
}

void mixup(Batch& batch, double alpha, Rng& rng) {
    const i64 b = batch.images.dim(0);
    if (b < 2) throw ParamError("mixup: batch must hold at least 2 samples");
    const double lam = rng.beta(alpha, alpha);
    const i64 shift = 1 + rng.uniform_int(b - 1);
    mixup_with(batch, lam, shift);
}

float cutmix_with(Batch& batch, i64 y0, i64 y1, i64 x0, i64 x1, i64 shift) {
    const i64 b = batch.images.dim(0);
    if (b < 2) throw ParamError("cutmix: batch must hold at least 2 samples");
    const i64 r = batch.images.dim(2);
    y0 = std::clamp<i64>(y0, 0, r);
    y1 = std::clamp<i64>(y1, 0, r);
    x0 = std::clamp<i64>(x0, 0, r);
    x1 = std::clamp<i64>(x1, 0, r);
    // target weight from the realized, clipped box
    const double box_area = double(std::max<i64>(0, y1 - y0) * std::max<i64>(0, x1 - x0));
    const float lam_hat = static_cast<float>(1.0 - box_area / double(r * r));

    const i64 plane = r * r;
    const i64 img_n = batch.images.numel() / b;
    const i64 tgt_n = batch.targets.numel() / b;
    Tensor<float> mixed_img = batch.images.clone();
    Tensor<float> mixed_tgt = batch.targets.clone();
    for (i64 i = 0; i < b; ++i) {
        const i64 j = (i + shift) % b;
        float* xi = mixed_img.data() + i * img_n;
        const float* xj = batch.images.data() + j * img_n;
        for (int c = 0; c < 3; ++c) {
            for (i64 y = y0; y < y1; ++y) {
                for (i64 x = x0; x < x1; ++x) {
                    xi[c * plane + y * r + x] = xj[c * plane + y * r + x];
                }
            }
        }
        float* ti = mixed_tgt.data() + i * tgt_n;
        const float* tj = batch.targets.data() + j * tgt_n;
        for (i64 k = 0; k < tgt_n; ++k) ti[k] = lam_hat * ti[k] + (1.0f - lam_hat) * tj[k];
    }
    batch.images = mixed_img;
    batch.targets = mixed_tgt;
    return lam_hat;
}

void cutmix(Batch& batch, double alpha, Rng& rng) {
    const i64 b = batch.images.dim(0);
    if (b < 2) throw ParamError("cutmix: batch must hold at least 2 samples");
    const i64 r = batch.images.dim(2);
    const double lam = rng.beta(alpha, alpha);
    const double cut = std::sqrt(1.0 - lam);
    const i64 side = static_cast<i64>(std::lround(double(r) * cut));
    const i64 cy = rng.uniform_int(r);
    const i64 cx = rng.uniform_int(r);
    const i64 shift = 1 + rng.uniform_int(b - 1);
    cutmix_with(batch, cy - side / 2, cy + (side + 1) / 2, cx - side / 2, cx + (side + 1) / 2, shift);
}

Batch make_batch(const data::Dataset& ds, const std::vector<i64>& indices, const AugPolicy& policy,
                 std::uint64_t master_seed, i64 epoch_index, i64 batch_index) {
    policy.validate();
    const i64 b = static_cast<i64>(indices.size());
    if (b < 1) throw ParamError("make_batch: empty index list");
    const i64 r = ds.resolution;

    Batch batch;
    batch.indices = indices;
    batch.images = Tensor<float>({b, 3, r, r});
    batch.targets = distill::one_hot<float>(
        [&] {
            std::vector<i64> labels(static_cast<std::size_t>(b));
            for (i64 i = 0; i < b; ++i) labels[static_cast<std::size_t>(i)] = ds.labels[static_cast<std::size_t>(indices[static_cast<std::size_t>(i)])];
            return labels;
        }(),
        ds.num_classes);
    batch.sample_seeds.resize(static_cast<std::size_t>(b));

    // occurrence slots: n-th appearance of the same index inside this batch
    std::vector<i64> slot(static_cast<std::size_t>(b), 0);
    for (i64 i = 0; i < b; ++i) {
        i64 s = 0;
        for (i64 j = 0; j < i; ++j) {
            if (indices[static_cast<std::size_t>(j)] == indices[static_cast<std::size_t>(i)]) ++s;
        }
        slot[static_cast<std::size_t>(i)] = s;
    }

    for (i64 i = 0; i < b; ++i) {
        const i64 idx = indices[static_cast<std::size_t>(i)];
        const std::uint64_t sseed =
            seed_combine(master_seed, static_cast<std::uint64_t>(epoch_index),
                         static_cast<std::uint64_t>(idx), static_cast<std::uint64_t>(slot[static_cast<std::size_t>(i)]));
        batch.sample_seeds[static_cast<std::size_t>(i)] = sseed;

        float* img = batch.images.data() + i * ds.image_numel();
        std::copy(ds.image(idx), ds.image(idx) + ds.image_numel(), img);

        if (policy.enabled) {
            Rng srng(sseed);
            rand_augment_lite(img, r, policy.randaug_magnitude, policy.randaug_layers,
                              policy.randaug_prob, srng);
            if (srng.bernoulli(policy.hflip_prob)) horizontal_flip(img, r);
        }
        data::normalize_image(img, r, ds.channel_mean, ds.channel_std);
    }

    if (policy.enabled && b >= 2) {
        Rng brng(seed_combine(master_seed, static_cast<std::uint64_t>(epoch_index),
                              static_cast<std::uint64_t>(batch_index), 0xba7c4ULL));
        const bool fire_mix = brng.bernoulli(policy.mixup_prob);
        const bool fire_cut = brng.bernoulli(policy.cutmix_prob);
        // when both fire, alternate by a fair pick
        if (fire_mix && fire_cut) {
            if (brng.bernoulli(0.5)) cutmix(batch, policy.cutmix_alpha, brng);
            else mixup(batch, policy.mixup_alpha, brng);
        } else if (fire_cut) {
            cutmix(batch, policy.cutmix_alpha, brng);
        } else if (fire_mix) {
            mixup(batch, policy.mixup_alpha, brng);
        }
    }

    if (policy.enabled && policy.erasing_prob > 0.0) {
        for (i64 i = 0; i < b; ++i) {
            Rng erng(seed_combine(batch.sample_seeds[static_cast<std::size_t>(i)], 0xe7a5eULL));
            random_erasing(batch.images.data() + i * ds.image_numel(), r, policy.erasing_prob, erng);
        }
    }
    return batch;
}

}  // namespace deit::augment
