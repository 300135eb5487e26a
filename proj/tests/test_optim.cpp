#include "doctest.h"

#include <cmath>
#include <set>

#include "deit/model.hpp"
#include "deit/optim.hpp"
#include "deit/trainer.hpp"
#include "testutil.hpp"

using namespace deit;
using namespace deit::optim;

TEST_CASE("lr scaling rule") {
    CHECK(scaled_lr(5e-4, 512) == doctest::Approx(5e-4));
    CHECK(scaled_lr(5e-4, 1024) == doctest::Approx(1e-3));
    CHECK(scaled_lr(5e-4, 64) == doctest::Approx(6.25e-5));
    CHECK_THROWS_AS(scaled_lr(5e-4, 0), ParamError);
}

TEST_CASE("warmup + cosine schedule: knots, midpoint, monotonicity") {
    OptimConfig cfg;
    cfg.base_lr = 5e-4;
    cfg.batch_size = 512;
    cfg.warmup_epochs = 1;
    cfg.total_epochs = 3;
    const i64 spe = 10;  // warmup 10 steps, total 30, span 19
    const double peak = scaled_lr(cfg.base_lr, cfg.batch_size);

    CHECK(lr_at(0, spe, cfg) == 0.0);
    CHECK(lr_at(10, spe, cfg) == doctest::Approx(peak));  // end of warmup hits the peak exactly
    CHECK(lr_at(29, spe, cfg) == doctest::Approx(cfg.cosine_floor));

    // the knot jump is at most one warmup increment
    CHECK(std::abs(lr_at(10, spe, cfg) - lr_at(9, spe, cfg)) <= peak / 10 + 1e-12);

    // non-increasing after the knot
    for (i64 s = 10; s + 1 < 30; ++s) CHECK(lr_at(s + 1, spe, cfg) <= lr_at(s, spe, cfg) + 1e-15);

    // exact midpoint of the cosine span: floor + (peak - floor)/2
    OptimConfig mid;
    mid.base_lr = 5e-4;
    mid.batch_size = 512;
    mid.warmup_epochs = 0;
    mid.total_epochs = 3;
    const i64 spe2 = 7;  // span 20, u = 0.5 at step 10
    CHECK(lr_at(10, spe2, mid) ==
          doctest::Approx(mid.cosine_floor + (peak - mid.cosine_floor) / 2).epsilon(1e-12));

    CHECK_THROWS_AS(lr_at(-1, spe, cfg), ContractError);
    CHECK_THROWS_AS(lr_at(30, spe, cfg), ContractError);
}

TEST_CASE("adamw: decay-only path, bias-corrected first step, descent") {
    // zero grad: theta <- theta (1 - lr wd)
    auto theta = Tensor<double>::from_data({1}, {1.0});
    theta.set_requires_grad(true);
    theta.ensure_grad();
    OptimConfig cfg;
    cfg.weight_decay = 0.05;
    AdamW<double> opt({{"w.weight", theta}}, cfg);
    opt.step(0.1);
    CHECK(theta[0] == doctest::Approx(1.0 * (1.0 - 0.005)).epsilon(1e-12));

    // scalar theta=1, grad=1, first step, lr=0.1, wd=0
    auto t2 = Tensor<double>::from_data({1}, {1.0});
    t2.set_requires_grad(true);
    t2.ensure_grad();
    t2.grad()[0] = 1.0;
    OptimConfig cfg2;
    cfg2.weight_decay = 0.0;
    AdamW<double> opt2({{"w.weight", t2}}, cfg2);
    opt2.step(0.1);
    CHECK(t2[0] == doctest::Approx(1.0 - 0.1 * (1.0 / (1.0 + 1e-8))).epsilon(1e-12));

    // two steps on f(theta) = theta^2 strictly decrease f
    auto t3 = Tensor<double>::from_data({1}, {1.0});
    t3.set_requires_grad(true);
    OptimConfig cfg3;
    cfg3.weight_decay = 0.0;
    AdamW<double> opt3({{"w.weight", t3}}, cfg3);
    double prev = t3[0] * t3[0];
    for (int s = 0; s < 2; ++s) {
        t3.ensure_grad();
        t3.grad()[0] = 2.0 * t3[0];
        opt3.step(0.05);
        const double f = t3[0] * t3[0];
        CHECK(f < prev);
        prev = f;
        t3.zero_grad();
    }
}

TEST_CASE("adamw with wd=0 equals a plain Adam oracle, 64-bit exact") {
    Rng rng(51);
    auto w = testutil::random_tensor<double>({3, 4}, rng);
    auto shadow = w.clone();
    w.set_requires_grad(true);
    OptimConfig cfg;
    cfg.weight_decay = 0.0;
    AdamW<double> opt({{"w.weight", w}}, cfg);

    // independent plain-Adam recurrence
    const double b1 = 0.9, b2 = 0.999;
    std::vector<double> m(12, 0.0), v(12, 0.0);
    for (int step = 1; step <= 5; ++step) {
        w.ensure_grad();
        for (i64 i = 0; i < 12; ++i) w.grad()[i] = std::sin(0.37 * step + double(i));
        const double lr = 1e-3;
        for (i64 i = 0; i < 12; ++i) {
            const double g = w.grad()[i];
            m[static_cast<std::size_t>(i)] = b1 * m[static_cast<std::size_t>(i)] + (1.0 - b1) * g;
            v[static_cast<std::size_t>(i)] = b2 * v[static_cast<std::size_t>(i)] + (1.0 - b2) * g * g;
            const double mhat = m[static_cast<std::size_t>(i)] / (1.0 - std::pow(b1, step));
            const double vhat = v[static_cast<std::size_t>(i)] / (1.0 - std::pow(b2, step));
            shadow[i] = shadow[i] - lr * mhat / (std::sqrt(vhat) + 1e-8);
        }
        opt.step(1e-3);
        for (i64 i = 0; i < 12; ++i) CHECK(w[i] == shadow[i]);
        w.zero_grad();
    }
}

TEST_CASE("weight-decay exemptions match the expected parameter set exactly") {
    model::DeiTConfig cfg = model::preset("deit-micro");
    cfg.use_distill_token = true;
    Rng rng(3);
    auto m = model::DeiTModelT<float>::init(cfg, rng);

    // independently constructed expected set: norms, biases, tokens, positions
    std::set<std::string> expected = {"cls_token", "dist_token", "pos_embed", "norm.weight", "norm.bias"};
    for (i64 i = 0; i < cfg.num_layers; ++i) {
        const std::string pre = "blocks." + std::to_string(i) + ".";
        for (const char* n : {"norm1", "norm2"}) {
            expected.insert(pre + n + ".weight");
            expected.insert(pre + n + ".bias");
        }
        for (const char* n : {"attn.qkv", "attn.proj", "mlp.fc1", "mlp.fc2"}) {
            expected.insert(pre + n + ".bias");
        }
    }
    expected.insert("patch_embed.bias");
    expected.insert("head.bias");
    expected.insert("head_dist.bias");

    for (const auto& p : m.named_parameters()) {
        CHECK(is_decay_exempt(p.name) == (expected.count(p.name) > 0));
    }
}

TEST_CASE("ema update: copy at 0, frozen at 1, formula") {
    auto p = Tensor<float>::from_data({2}, {1.0f, -2.0f});
    std::vector<model::NamedParam<float>> params = {{"w", p}};
    Ema<float> ema(params);
    for (auto& s : ema.shadow()) std::fill(s.tensor.data(), s.tensor.data() + s.tensor.numel(), 0.f);

    ema.update(params, 0.9);
    CHECK(ema.shadow()[0].tensor[0] == doctest::Approx(0.1f));

    ema.update(params, 1.0);  // frozen
    CHECK(ema.shadow()[0].tensor[0] == doctest::Approx(0.1f));

    ema.update(params, 0.0);  // copy
    CHECK(ema.shadow()[0].tensor[0] == 1.0f);
    CHECK(ema.shadow()[0].tensor[1] == -2.0f);

    auto q = Tensor<float>::zeros({3});
    std::vector<model::NamedParam<float>> wrong = {{"w", q}};
    CHECK_THROWS_AS(ema.update(wrong, 0.5), ShapeError);
}

TEST_CASE("gradient clipping and NaN detection") {
    Rng rng(53);
    auto w = testutil::random_tensor<float>({8}, rng);
    w.set_requires_grad(true);
    w.ensure_grad();
    for (i64 i = 0; i < 8; ++i) w.grad()[i] = 3.0f;
    std::vector<model::NamedParam<float>> params = {{"w.weight", w}};

    CHECK(global_grad_norm(params) == doctest::Approx(std::sqrt(8.0 * 9.0)));
    clip_gradients(params, 1.0);
    CHECK(global_grad_norm(params) == doctest::Approx(1.0).epsilon(1e-5));

    // below the bound nothing changes
    const float before = w.grad()[0];
    clip_gradients(params, 10.0);
    CHECK(w.grad()[0] == before);

    w.grad()[3] = std::numeric_limits<float>::quiet_NaN();
    OptimConfig cfg;
    AdamW<float> opt(params, cfg);
    try {
        opt.step(1e-3);
        FAIL("expected ContractError");
    } catch (const ContractError& e) {
        CHECK(std::string(e.what()).find("w.weight") != std::string::npos);
    }
}

TEST_CASE("200-step smoke: the optimizer/model stack separates two blobs") {
    auto train = data::synth_dataset(data::SynthKind::GaussianBlobs, 240, 2, 32, 9);
    trainer::RunConfig cfg;
    cfg.arch = "deit";
    cfg.preset = "deit-micro";
    cfg.model = model::preset("deit-micro");
    cfg.optim.total_epochs = 20;  // 10 batches/epoch -> 200 steps
    cfg.optim.batch_size = 24;
    cfg.optim.base_lr = 0.02;
    cfg.optim.warmup_epochs = 2;
    cfg.seed = 1;
    cfg.out_dir.clear();
    cfg.eval_every = 20;

    data::Dataset train_eval = train;  // train accuracy is the smoke metric
    auto result = trainer::train_run_on(cfg, train, train_eval);
    CHECK(result.final_eval.class_top1 >= 0.95);
}
