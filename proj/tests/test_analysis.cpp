#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>

#include "deit/analysis.hpp"
#include "deit/augment.hpp"
#include "deit/distill.hpp"
#include "testutil.hpp"

using namespace deit;
using namespace deit::analysis;

namespace {

Classifier fixed_prediction(i64 label) {
    return [label](const data::Dataset& ds) { return std::vector<i64>(static_cast<std::size_t>(ds.count), label); };
}

Classifier seeded_random(std::uint64_t seed, i64 classes) {
    return [seed, classes](const data::Dataset& ds) {
        Rng rng(seed);
        std::vector<i64> out(static_cast<std::size_t>(ds.count));
        for (auto& v : out) v = rng.uniform_int(classes);
        return out;
    };
}

}  // namespace

TEST_CASE("disagreement matrix: diagonal, extremes, brute-force recount, pseudometric") {
    auto ds = data::synth_dataset(data::SynthKind::GaussianBlobs, 100, 4, 8, 3);

    std::vector<std::pair<std::string, Classifier>> cls;
    cls.emplace_back("groundtruth", groundtruth_classifier());
    cls.emplace_back("self", groundtruth_classifier());
    cls.emplace_back("always0", fixed_prediction(0));
    cls.emplace_back("always1", fixed_prediction(1));
    cls.emplace_back("rngA", seeded_random(1, 4));
    cls.emplace_back("rngB", seeded_random(2, 4));

    auto m = disagreement_matrix(cls, ds);
    REQUIRE(m.names.size() == 6);
    CHECK(m.sample_count == 100);

    // identical classifiers disagree on nothing; constant 0 vs constant 1 on everything
    CHECK(m.at(0, 1) == 0.0);
    CHECK(m.at(2, 3) == 1.0);
    for (std::size_t i = 0; i < 6; ++i) CHECK(m.at(i, i) == 0.0);
    for (std::size_t i = 0; i < 6; ++i)
        for (std::size_t j = 0; j < 6; ++j) CHECK(m.at(i, j) == m.at(j, i));

    // brute-force recount
    std::vector<std::vector<i64>> preds;
    for (auto& [name, fn] : cls) preds.push_back(fn(ds));
    for (std::size_t i = 0; i < 6; ++i) {
        for (std::size_t j = 0; j < 6; ++j) {
            i64 differ = 0;
            for (i64 s = 0; s < 100; ++s) differ += preds[i][static_cast<std::size_t>(s)] != preds[j][static_cast<std::size_t>(s)];
            CHECK(m.at(i, j) == double(differ) / 100.0);
        }
    }

    // disagreement is a pseudometric over prediction vectors
    for (std::size_t a = 0; a < 6; ++a)
        for (std::size_t b = 0; b < 6; ++b)
            for (std::size_t c = 0; c < 6; ++c) CHECK(m.at(a, c) <= m.at(a, b) + m.at(b, c) + 1e-12);

    CHECK_THROWS_AS(disagreement_matrix({cls[0]}, ds), ParamError);
}

TEST_CASE("random classifier accuracy sits in the binomial band") {
    auto ds = data::synth_dataset(data::SynthKind::GaussianBlobs, 1000, 10, 8, 5);
    auto preds = seeded_random(7, 10)(ds);
    i64 hits = 0;
    for (i64 i = 0; i < ds.count; ++i) hits += preds[static_cast<std::size_t>(i)] == ds.labels[static_cast<std::size_t>(i)];
    const double acc = double(hits) / double(ds.count);
    CHECK(acc >= 0.07);
    CHECK(acc <= 0.13);
}

TEST_CASE("evaluate: perfect predictions, counting, fused recount") {
    auto ds = data::synth_dataset(data::SynthKind::GaussianBlobs, 40, 4, 16, 9);

    // an oracle forward that emits one-hot logits of the true labels
    // (evaluation walks the dataset in order, so a cursor recovers indices)
    auto cursor = std::make_shared<i64>(0);
    auto perfect = [&ds, cursor](const Tensor<float>& images) {
        const i64 b = images.dim(0);
        Tensor<float> logits = Tensor<float>::zeros({b, 4});
        for (i64 i = 0; i < b; ++i) {
            logits[i * 4 + ds.labels[static_cast<std::size_t>((*cursor + i) % ds.count)]] = 10.0f;
        }
        *cursor = (*cursor + b) % ds.count;
        return logits;
    };
    CHECK(evaluate_logits(perfect, ds, 16) == doctest::Approx(1.0));

    // fused micro model: predictions equal the argmax of summed softmaxes
    Rng rng(11);
    auto cfg = model::preset("deit-micro");
    cfg.num_classes = 4;
    cfg.image_size = 16;
    cfg.use_distill_token = true;
    auto net = model::DeiTModelT<float>::init(cfg, rng);

    auto small = ds.take(10);
    auto fused_preds = predict(net, small, Head::Fused, 4);
    augment::AugPolicy off;
    off.enabled = false;
    for (i64 i = 0; i < 10; ++i) {
        auto batch = augment::make_batch(small, {i}, off, 0, 0, 0);
        auto fwd = net.forward(batch.images);
        // hand fusion in double precision
        double best = -1e30;
        i64 arg = 0;
        std::vector<double> score(4, 0.0);
        const Tensor<float>* heads[2] = {&fwd.class_logits, &fwd.distill_logits};
        for (const Tensor<float>* logits : heads) {
            double mx = -1e30, sum = 0.0;
            for (i64 c = 0; c < 4; ++c) mx = std::max(mx, double((*logits)[c]));
            std::vector<double> e(4);
            for (i64 c = 0; c < 4; ++c) {
                e[static_cast<std::size_t>(c)] = std::exp(double((*logits)[c]) - mx);
                sum += e[static_cast<std::size_t>(c)];
            }
            for (i64 c = 0; c < 4; ++c) score[static_cast<std::size_t>(c)] += e[static_cast<std::size_t>(c)] / sum;
        }
        for (i64 c = 0; c < 4; ++c) {
            if (score[static_cast<std::size_t>(c)] > best) {
                best = score[static_cast<std::size_t>(c)];
                arg = c;
            }
        }
        CHECK(fused_preds[static_cast<std::size_t>(i)] == arg);
    }

    // per-head report is consistent with the prediction routes
    auto rep = evaluate(net, small, 4);
    CHECK(rep.has_distill);
    CHECK(rep.class_top1 >= 0.0);
    CHECK(rep.fusion_top1 <= 1.0);

    // resolution mismatch
    auto ds32 = data::synth_dataset(data::SynthKind::GaussianBlobs, 8, 4, 32, 1);
    CHECK_THROWS_AS(evaluate(net, ds32, 4), ContractError);
}

TEST_CASE("token cosine: parameter-level extremes and activation trace shape") {
    Rng rng(13);
    auto cfg = model::preset("deit-micro");
    cfg.num_classes = 4;
    cfg.image_size = 16;
    cfg.use_distill_token = true;
    auto net = model::DeiTModelT<float>::init(cfg, rng);
    auto ds = data::synth_dataset(data::SynthKind::GaussianBlobs, 12, 4, 16, 15);

    // identical token parameters -> cosine exactly 1
    net.dist_token = net.cls_token.clone();
    auto rep = token_cosine_similarity(net, ds, 6);
    CHECK(rep.input_cosine == doctest::Approx(1.0));
    CHECK(rep.per_layer.size() == 2);
    for (double v : rep.per_layer) {
        CHECK(v >= -1.0 - 1e-6);
        CHECK(v <= 1.0 + 1e-6);
    }

    // orthogonal token parameters -> cosine 0
    auto a = Tensor<float>::zeros({1, 64});
    auto b = Tensor<float>::zeros({1, 64});
    a[0] = 1.0f;
    b[1] = 1.0f;
    net.cls_token = a;
    net.dist_token = b;
    CHECK(std::abs(token_cosine_similarity(net, ds, 6).input_cosine) <= 1e-7);

    auto plain_cfg = model::preset("deit-micro");
    plain_cfg.num_classes = 4;
    plain_cfg.image_size = 16;
    auto plain = model::DeiTModelT<float>::init(plain_cfg, rng);
    CHECK_THROWS_AS(token_cosine_similarity(plain, ds, 6), ContractError);
}

TEST_CASE("throughput bench: positive, stable, ordered by model cost") {
    Rng rng(17);
    auto micro = model::DeiTModelT<float>::init(
        [] {
            auto c = model::preset("deit-micro");
            c.num_classes = 10;
            return c;
        }(),
        rng);

    auto rows = throughput_bench(micro, {2, 4}, 2, 8);
    REQUIRE(rows.size() == 2);
    for (const auto& r : rows) {
        CHECK(r.ok);
        CHECK(r.images_per_sec > 0.0);
        CHECK(std::isfinite(r.images_per_sec));
    }

    // doubling the measured iterations moves the mean by less than 20%
    auto a = throughput_bench(micro, {4}, 3, 15);
    auto b = throughput_bench(micro, {4}, 3, 30);
    CHECK(std::abs(a[0].mean_seconds - b[0].mean_seconds) / b[0].mean_seconds < 0.20);

    // a strictly smaller model processes more images per second at the same
    // batch and resolution
    auto small_cfg = model::preset("deit-s");
    small_cfg.image_size = 32;  // 32 % 16 == 0
    small_cfg.num_classes = 10;
    auto deit_s = model::DeiTModelT<float>::init(small_cfg, rng);
    auto micro32 = model::DeiTModelT<float>::init(
        [] {
            auto c = model::preset("deit-micro");
            c.num_classes = 10;
            return c;
        }(),
        rng);
    auto fast = throughput_bench(micro32, {4}, 2, 8);
    auto slow = throughput_bench(deit_s, {4}, 2, 8);
    CHECK(fast[0].images_per_sec > slow[0].images_per_sec);
}

TEST_CASE("csv writers emit the documented schemas") {
    const std::string dir = "/tmp/deit_test_csv";
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);

    DisagreementMatrix m;
    m.names = {"a", "b"};
    m.rates = {0.0, 0.25, 0.25, 0.0};
    m.sample_count = 4;
    write_disagreement_csv(dir + "/d.csv", m);
    std::ifstream d(dir + "/d.csv");
    std::string line;
    std::getline(d, line);
    CHECK(line == "classifier,a,b");
    std::getline(d, line);
    CHECK(line == "a,0.000000,0.250000");

    TokenCosineReport rep;
    rep.input_cosine = 0.5;
    rep.per_layer = {0.25, 0.75};
    write_token_cosine_csv(dir + "/t.csv", rep);
    std::ifstream t(dir + "/t.csv");
    std::getline(t, line);
    CHECK(line == "layer,cosine");
    std::getline(t, line);
    CHECK(line == "input,0.500000");

    std::filesystem::remove_all(dir);
}
