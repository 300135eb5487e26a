#include "doctest.h"

#include <cmath>
#include <filesystem>

#include "deit/ops.hpp"
#include "deit/teacher.hpp"
#include "deit/trainer.hpp"
#include "testutil.hpp"

using namespace deit;
using namespace deit::teacher;

TEST_CASE("im2col-backed convolution equals a direct nested-loop oracle") {
    Rng rng(71);
    constexpr Tape<float>* kNoTape = nullptr;
    const i64 c_in = 2, c_out = 3, h = 8, w = 8, kernel = 3, pad = 1;
    for (i64 stride : {i64(1), i64(2)}) {
        auto x = testutil::random_tensor<float>({1, c_in, h, w}, rng);
        auto weight = testutil::random_tensor<float>({c_in * kernel * kernel, c_out}, rng, -0.5, 0.5);

        auto cols = ops::im2col(x, kernel, stride, pad, kNoTape);
        auto lin = ops::matmul(cols, weight, kNoTape);  // [1, L, c_out]

        const i64 out_h = (h + 2 * pad - kernel) / stride + 1;
        const i64 out_w = (w + 2 * pad - kernel) / stride + 1;
        for (i64 oc = 0; oc < c_out; ++oc) {
            for (i64 oy = 0; oy < out_h; ++oy) {
                for (i64 ox = 0; ox < out_w; ++ox) {
                    double acc = 0.0;
                    for (i64 ic = 0; ic < c_in; ++ic) {
                        for (i64 ky = 0; ky < kernel; ++ky) {
                            for (i64 kx = 0; kx < kernel; ++kx) {
                                const i64 iy = oy * stride - pad + ky;
                                const i64 ix = ox * stride - pad + kx;
                                if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
                                const double xv = x[(ic * h + iy) * w + ix];
                                const double wv = weight[((ic * kernel + ky) * kernel + kx) * c_out + oc];
                                acc += xv * wv;
                            }
                        }
                    }
                    const float got = lin[(oy * out_w + ox) * c_out + oc];
                    CHECK(std::abs(got - acc) <= 1e-5);
                }
            }
        }
    }
}

TEST_CASE("tiny convnet: shapes, determinism, resolution rebinding") {
    Rng rng(73);
    auto net = TinyConvNet::init(7, 32, rng);
    CHECK(net.named_parameters().size() == 8);  // 3 conv stages + head

    auto images = testutil::random_tensor<float>({4, 3, 32, 32}, rng);
    auto logits = net.forward(images, nullptr);
    CHECK(logits.shape() == std::vector<i64>{4, 7});
    for (i64 i = 0; i < logits.numel(); ++i) CHECK(std::isfinite(logits[i]));

    auto again = net.forward(images, nullptr);
    CHECK(again.values() == logits.values());
    CHECK(!logits.has_grad());

    // global pooling makes the stack size-agnostic
    auto net48 = net.with_resolution(48);
    CHECK(net48.resolution == 48);
    auto big = net48.forward(testutil::random_tensor<float>({2, 3, 48, 48}, rng), nullptr);
    CHECK(big.shape() == std::vector<i64>{2, 7});

    CHECK_THROWS_AS(net.forward(Tensor<float>::zeros({2, 1, 32, 32}), nullptr), ShapeError);
    CHECK_THROWS_AS(TinyConvNet::init(7, 4, rng), ParamError);
}

TEST_CASE("train_teacher: blobs are learned fast and the teacher comes back frozen") {
    auto both = data::synth_dataset(data::SynthKind::GaussianBlobs, 700, 4, 32, 81);
    auto train = both.slice(0, 500);
    data::compute_channel_stats(train);
    TeacherTrainOptions opts;
    opts.epochs = 5;
    opts.batch_size = 48;
    opts.base_lr = 0.02;
    opts.seed = 4;

    auto teach = train_teacher(TeacherKind::Convnet, train, opts);
    REQUIRE(teach != nullptr);
    CHECK(teach->resolution() == 32);
    CHECK(teach->num_classes() == 4);

    // evaluation is deterministic and grad-free (held-out slice of one task)
    auto eval_set = both.slice(500, 200);
    eval_set.use_stats_of(train);
    auto acc = analysis::evaluate_logits([&](const Tensor<float>& x) { return teach->logits(x); },
                                         eval_set, 48);
    CHECK(acc >= 0.95);

    augment::AugPolicy off;
    off.enabled = false;
    auto batch = augment::make_batch(eval_set, {0, 1, 2}, off, 0, 0, 0);
    auto l1 = teach->logits(batch.images);
    auto l2 = teach->logits(batch.images);
    CHECK(l1.values() == l2.values());
    CHECK(!l1.requires_grad());
    CHECK(!l1.has_grad());

    // frozen weights: no gradient buffers and no requires_grad flags
    auto* conv = dynamic_cast<const ConvNetTeacher*>(teach.get());
    REQUIRE(conv != nullptr);
    for (const auto& p : conv->net().named_parameters()) {
        CHECK(!p.tensor.requires_grad());
        CHECK(!p.tensor.has_grad());
    }
}

TEST_CASE("teacher checkpoints round-trip through the Teacher interface") {
    const std::string dir = "/tmp/deit_test_teacher";
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);

    Rng rng(91);
    auto net = TinyConvNet::init(5, 32, rng);
    std::array<float, 3> mean{0.5f, 0.4f, 0.3f}, stddev{0.2f, 0.2f, 0.2f};
    trainer::save_convnet_checkpoint(dir + "/teacher.ckpt", net, mean, stddev, nullptr);

    auto loaded = trainer::load_teacher_checkpoint(dir + "/teacher.ckpt", 32);
    auto images = testutil::random_tensor<float>({3, 3, 32, 32}, rng);
    auto a = net.forward(images, nullptr);
    auto b = loaded->logits(images);
    CHECK(a.values() == b.values());

    // adapted load serves a larger student
    auto up = trainer::load_teacher_checkpoint(dir + "/teacher.ckpt", 48);
    CHECK(up->resolution() == 48);
    auto big = up->logits(testutil::random_tensor<float>({2, 3, 48, 48}, rng));
    CHECK(big.shape() == std::vector<i64>{2, 5});

    std::filesystem::remove_all(dir);
}

TEST_CASE("transformer teacher kind wraps a trained deit model") {
    auto train = data::synth_dataset(data::SynthKind::GaussianBlobs, 120, 3, 32, 83);
    TeacherTrainOptions opts;
    opts.epochs = 1;
    opts.batch_size = 24;
    opts.seed = 5;
    auto teach = train_teacher(TeacherKind::Transformer, train, opts);
    REQUIRE(teach != nullptr);
    CHECK(teach->resolution() == 32);
    Rng img_rng(5);
    auto logits = teach->logits(testutil::random_tensor<float>({2, 3, 32, 32}, img_rng));
    CHECK(logits.shape() == std::vector<i64>{2, 3});
    CHECK_THROWS_AS(teacher_kind_from_string("resnet"), ParamError);
}
