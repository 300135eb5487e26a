#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "deit/analysis.hpp"
#include "deit/resolution.hpp"
#include "deit/trainer.hpp"
#include "testutil.hpp"

using namespace deit;
using namespace deit::resolution;

namespace {

template <typename T>
std::vector<double> vector_norms(const Tensor<T>& grid) {
    const i64 n = grid.dim(0), d = grid.dim(1);
    std::vector<double> norms(static_cast<std::size_t>(n));
    for (i64 i = 0; i < n; ++i) {
        double s = 0.0;
        for (i64 c = 0; c < d; ++c) s += double(grid[i * d + c]) * double(grid[i * d + c]);
        norms[static_cast<std::size_t>(i)] = std::sqrt(s);
    }
    return norms;
}

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

TEST_CASE("bicubic resample: identity at the same size, grid shape law") {
    Rng rng(61);
    auto pos = testutil::random_tensor<float>({8 * 8, 16}, rng);
    auto same = interpolate_pos_embed(pos, 8);
    for (i64 i = 0; i < pos.numel(); ++i) CHECK(std::abs(same[i] - pos[i]) <= 1e-6f);

    // 14x14 -> 24x24 is the published 224->384 adaptation at patch 16
    auto grid14 = testutil::random_tensor<float>({196, 8}, rng);
    auto grid24 = interpolate_pos_embed(grid14, 24);
    CHECK(grid24.shape() == std::vector<i64>{576, 8});

    CHECK_THROWS_AS(interpolate_pos_embed(testutil::random_tensor<float>({1, 4}, rng), 2), ParamError);
    CHECK_THROWS_AS(interpolate_pos_embed(testutil::random_tensor<float>({6, 4}, rng), 2), ShapeError);
    CHECK_THROWS_AS(interpolate_pos_embed(pos, 0), ParamError);
}

TEST_CASE("interpolation is linear in the embedding argument (64-bit)") {
    Rng rng(63);
    auto a = testutil::random_tensor<double>({36, 12}, rng);
    auto b = testutil::random_tensor<double>({36, 12}, rng);
    const double alpha = 0.7, beta = -1.3;
    auto mix = Tensor<double>::zeros({36, 12});
    for (i64 i = 0; i < mix.numel(); ++i) mix[i] = alpha * a[i] + beta * b[i];

    auto lhs = interpolate_pos_embed(mix, 9);
    auto ia = interpolate_pos_embed(a, 9);
    auto ib = interpolate_pos_embed(b, 9);
    for (i64 i = 0; i < lhs.numel(); ++i) {
        CHECK(lhs[i] == doctest::Approx(alpha * ia[i] + beta * ib[i]).epsilon(1e-12));
    }
}

TEST_CASE("kernel partition of unity keeps channel-constant grids constant") {
    auto grid = Tensor<double>::zeros({49, 3});
    for (i64 i = 0; i < 49; ++i) {
        grid[i * 3 + 0] = 2.5;
        grid[i * 3 + 1] = -0.75;
        grid[i * 3 + 2] = 10.0;
    }
    for (i64 target : {i64(3), i64(9), i64(13)}) {
        auto out = interpolate_pos_embed(grid, target);
        for (i64 i = 0; i < target * target; ++i) {
            CHECK(out[i * 3 + 0] == doctest::Approx(2.5).epsilon(1e-12));
            CHECK(out[i * 3 + 1] == doctest::Approx(-0.75).epsilon(1e-12));
            CHECK(out[i * 3 + 2] == doctest::Approx(10.0).epsilon(1e-12));
        }
    }
}

TEST_CASE("norm preservation: bicubic stays near 1, bilinear shrinks more") {
    // Positional grids behave like smooth fields, not white noise: each
    // channel is a random plane wave over the grid (plus mild noise). On such
    // grids bicubic resampling keeps vector norms near 1 while bilinear
    // averaging visibly shrinks them.
    Rng rng(65);
    const i64 g = 8, d = 64;
    auto pos = Tensor<float>::zeros({g * g, d});
    for (i64 c = 0; c < d; ++c) {
        const double amp = rng.uniform(0.5, 1.5);
        const double fx = rng.uniform(0.3, 1.4), fy = rng.uniform(0.3, 1.4);
        const double phase = rng.uniform(0.0, 2.0 * M_PI);
        for (i64 y = 0; y < g; ++y) {
            for (i64 x = 0; x < g; ++x) {
                const double wave = amp * std::sin(2.0 * M_PI * (fx * x + fy * y) / double(g) + phase);
                pos[(y * g + x) * d + c] = static_cast<float>(wave + 0.05 * rng.normal());
            }
        }
    }
    const double in_norm = median(vector_norms(pos));

    auto cubic = interpolate_pos_embed(pos, 12);
    auto linear = interpolate_pos_embed_bilinear(pos, 12);
    const double cubic_ratio = median(vector_norms(cubic)) / in_norm;
    const double linear_ratio = median(vector_norms(linear)) / in_norm;

    CHECK(cubic_ratio >= 0.9);
    CHECK(cubic_ratio <= 1.1);
    CHECK(linear_ratio < cubic_ratio);  // the bilinear route loses norm
}

TEST_CASE("model adaptation: 32 -> 48 runs, same-size adaptation is a no-op") {
    Rng rng(67);
    auto cfg = model::preset("deit-micro");
    cfg.num_classes = 4;
    auto m = model::DeiTModelT<float>::init(cfg, rng);
    auto imgs32 = testutil::random_tensor<float>({2, 3, 32, 32}, rng);

    auto m48 = m.clone();
    adapt_to_resolution(m48, 48);
    CHECK(m48.config.image_size == 48);
    CHECK(m48.pos_embed.shape() == std::vector<i64>{144, 64});  // (48/4)^2 patches
    auto fwd = m48.forward(testutil::random_tensor<float>({2, 3, 48, 48}, rng));
    CHECK(fwd.class_logits.shape() == std::vector<i64>{2, 4});
    for (i64 i = 0; i < fwd.class_logits.numel(); ++i) CHECK(std::isfinite(fwd.class_logits[i]));

    // same-resolution adaptation leaves the forward bit-identical
    auto m_same = m.clone();
    adapt_to_resolution(m_same, 32);
    CHECK(m_same.forward(imgs32).class_logits.values() == m.forward(imgs32).class_logits.values());

    CHECK_THROWS_AS(adapt_to_resolution(m48, 33), ParamError);
}

TEST_CASE("zero-step fine-tune leaves frozen eval accuracy unchanged") {
    auto train = data::synth_dataset(data::SynthKind::GaussianBlobs, 96, 3, 32, 21);
    auto eval_set = data::synth_dataset(data::SynthKind::GaussianBlobs, 60, 3, 32, 22);
    eval_set.use_stats_of(train);

    // train a couple of epochs, checkpoint, then a 0-epoch fine-tune at the
    // same resolution must reproduce the frozen accuracy
    trainer::RunConfig rc;
    rc.arch = "deit";
    rc.model = model::preset("deit-micro");
    rc.optim.total_epochs = 2;
    rc.optim.batch_size = 24;
    rc.optim.base_lr = 0.005;
    rc.out_dir = "/tmp/deit_test_noop_ft";
    std::filesystem::remove_all(rc.out_dir);
    auto trained = trainer::train_run_on(rc, train, eval_set);

    trainer::RunConfig ft = rc;
    ft.out_dir.clear();
    ft.optim.total_epochs = 0;
    ft.dataset = "synth:blobs,n=96,c=3,res=32,seed=21";
    ft.eval_dataset = "synth:blobs,n=60,c=3,res=32,seed=22";
    auto res = trainer::finetune_run(ft, trained.checkpoint_path, 32);
    CHECK(res.final_eval.class_top1 == trained.final_eval.class_top1);
    std::filesystem::remove_all(rc.out_dir);
}
