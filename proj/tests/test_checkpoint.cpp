#include "doctest.h"

#include <cstring>
#include <filesystem>
#include <fstream>

#include <zlib.h>

#include "deit/checkpoint.hpp"
#include "deit/optim.hpp"
#include "deit/trainer.hpp"
#include "testutil.hpp"

using namespace deit;
namespace fs = std::filesystem;

namespace {

const std::string kDir = "/tmp/deit_test_ckpt";

struct TmpDir {
    TmpDir() {
        fs::remove_all(kDir);
        fs::create_directories(kDir);
    }
    ~TmpDir() { fs::remove_all(kDir); }
};

std::string read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

void write_file(const std::string& path, const std::string& bytes) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace

TEST_CASE("checkpoint round-trip is bitwise exact, sections included") {
    TmpDir tmp;
    Rng rng(101);
    auto cfg = model::preset("deit-micro");
    cfg.num_classes = 6;
    cfg.use_distill_token = true;
    auto m = model::DeiTModelT<float>::init(cfg, rng);

    auto params = m.named_parameters();
    for (auto& p : params) p.tensor.set_requires_grad(true);
    optim::OptimConfig ocfg;
    optim::AdamW<float> opt(params, ocfg);
    // a couple of steps give the moments non-trivial content
    for (int s = 0; s < 2; ++s) {
        for (auto& p : params) {
            p.tensor.ensure_grad();
            for (i64 i = 0; i < p.tensor.numel(); ++i) p.tensor.grad()[i] = 0.01f * float(i % 7) - 0.02f;
        }
        opt.step(1e-3);
    }
    optim::Ema<float> ema(params);
    ema.update(params, 0.9);

    const std::string path = kDir + "/model.ckpt";
    trainer::save_deit_checkpoint(path, m, {0.1f, 0.2f, 0.3f}, {0.9f, 0.8f, 0.7f}, "student", &opt, &ema);
    CHECK(!fs::exists(path + ".tmp"));  // atomic rename leaves no droppings

    auto loaded = trainer::load_model(path);
    CHECK(loaded.arch == "deit");
    CHECK(loaded.role == "student");
    CHECK(loaded.resolution == 32);
    CHECK(loaded.channel_mean[1] == 0.2f);

    auto loaded_params = loaded.deit.named_parameters();
    REQUIRE(loaded_params.size() == params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
        CHECK(loaded_params[i].name == params[i].name);
        CHECK(loaded_params[i].tensor.values() == params[i].tensor.values());
    }

    auto raw = checkpoint::load(path);
    CHECK(raw.has_optimizer);
    CHECK(raw.optimizer_step == 2);
    CHECK(raw.optimizer_tensors.size() == 2 * params.size());
    CHECK(raw.has_ema);
    CHECK(raw.ema_tensors.size() == params.size());
    // optimizer moments round-trip bitwise too
    CHECK(raw.optimizer_tensors[0].name.rfind("opt.m.", 0) == 0);
    CHECK(raw.optimizer_tensors[0].tensor.values() == opt.state()[0].m.values());
}

TEST_CASE("corruption and version gates") {
    TmpDir tmp;
    Rng rng(103);
    auto cfg = model::preset("deit-micro");
    cfg.num_classes = 3;
    auto m = model::DeiTModelT<float>::init(cfg, rng);
    const std::string path = kDir + "/m.ckpt";
    trainer::save_deit_checkpoint(path, m, {0, 0, 0}, {1, 1, 1}, "student", nullptr, nullptr);

    const std::string good = read_file(path);

    // truncating one byte breaks the CRC
    write_file(kDir + "/trunc.ckpt", good.substr(0, good.size() - 1));
    CHECK_THROWS_AS(checkpoint::load(kDir + "/trunc.ckpt"), CorruptionError);

    // flipping a payload byte breaks the CRC
    std::string flipped = good;
    flipped[flipped.size() / 2] = static_cast<char>(flipped[flipped.size() / 2] ^ 0x5a);
    write_file(kDir + "/flip.ckpt", flipped);
    CHECK_THROWS_AS(checkpoint::load(kDir + "/flip.ckpt"), CorruptionError);

    // a future format version (with a fixed-up CRC) is rejected as such
    std::string future = good;
    future[4] = 99;  // little-endian version field
    const std::string body = future.substr(0, future.size() - 4);
    const std::uint32_t crc = static_cast<std::uint32_t>(
        crc32(0L, reinterpret_cast<const Bytef*>(body.data()), static_cast<uInt>(body.size())));
    for (int i = 0; i < 4; ++i) future[body.size() + i] = static_cast<char>((crc >> (8 * i)) & 0xff);
    write_file(kDir + "/future.ckpt", future);
    CHECK_THROWS_AS(checkpoint::load(kDir + "/future.ckpt"), VersionError);

    // not a checkpoint at all
    write_file(kDir + "/garbage.ckpt", "definitely not a checkpoint, not even close!");
    CHECK_THROWS(checkpoint::load(kDir + "/garbage.ckpt"));
}

TEST_CASE("shape mismatches name the first offending tensor") {
    Rng rng(105);
    auto small = model::preset("deit-micro");
    small.num_classes = 3;
    auto wide = small;
    wide.embed_dim = 32;
    wide.num_heads = 2;

    auto m_small = model::DeiTModelT<float>::init(small, rng);
    auto m_wide = model::DeiTModelT<float>::init(wide, rng);

    auto dst = m_small.named_parameters();
    auto src = m_wide.named_parameters();
    try {
        checkpoint::load_into(dst, src);
        FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
        CHECK(std::string(e.what()).find("patch_embed.weight") != std::string::npos);
    }

    // missing tensors are named too
    auto truncated = src;
    truncated.pop_back();
    auto dst2 = m_wide.named_parameters();
    CHECK_THROWS_AS(checkpoint::load_into(dst2, truncated), FormatError);
}

TEST_CASE("run directory lock guards concurrent training") {
    TmpDir tmp;
    const std::string run_dir = kDir + "/run";
    fs::create_directories(run_dir);
    {
        std::ofstream lock(run_dir + "/.lock");
    }
    trainer::RunConfig cfg;
    cfg.arch = "deit";
    cfg.model = model::preset("deit-micro");
    cfg.optim.total_epochs = 1;
    cfg.optim.batch_size = 6;
    cfg.out_dir = run_dir;
    auto train = data::synth_dataset(data::SynthKind::GaussianBlobs, 24, 3, 32, 1);
    data::Dataset no_eval;
    CHECK_THROWS_AS(trainer::train_run_on(cfg, train, no_eval), IoError);
}
