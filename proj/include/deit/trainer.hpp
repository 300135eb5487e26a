#pragma once

#include <array>
#include <memory>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"

#include "deit/analysis.hpp"
#include "deit/augment.hpp"
#include "deit/checkpoint.hpp"
#include "deit/data.hpp"
#include "deit/distill.hpp"
#include "deit/model.hpp"
#include "deit/optim.hpp"
#include "deit/teacher.hpp"

namespace deit::trainer {

// One run's full configuration. Defaults reproduce the published recipe
// (300 epochs, batch 1024, AdamW, full augmentation); desk-scale commands
// override epochs/batch via flags.
struct RunConfig {
    std::string arch = "deit";  // deit | convnet
    std::string preset = "deit-b";
    model::DeiTConfig model = model::preset("deit-b");
    distill::DistillConfig distill;
    augment::AugPolicy augment;
    optim::OptimConfig optim;
    std::string dataset;
    std::string eval_dataset;  // derived for synthetic sets when empty
    std::uint64_t seed = 42;
    std::string out_dir;  // empty: train in memory, write nothing
    std::string teacher_path;
    std::string optimizer = "adamw";  // adamw | sgd
    i64 rescale = 0;                  // 0 = native dataset resolution
    i64 eval_every = 1;
    double finetune_lr_divisor = 10.0;

    RunConfig() { model.drop_path_rate = 0.1; }
};

// Flat dotted-key config file support. Unknown keys fail with the nearest
// valid key named.
std::vector<std::string> config_keys();
void apply_config_json(RunConfig& cfg, const nlohmann::json& flat);
nlohmann::json config_to_json(const RunConfig& cfg);

// Dataset specs: "synth:blobs,n=2000,c=4,res=32,seed=1", "synth:stripes,...",
// "cifar:<file-or-dir>", or a bare path (treated as cifar).
data::Dataset load_dataset_spec(const std::string& spec);

struct SplitDatasets {
    data::Dataset train;
    data::Dataset eval;  // carries the train split's channel stats
};

// Loads the train/eval pair for a run. An explicit eval spec is loaded as
// given; synthetic train specs without one generate train+eval from a single
// stream (same task, disjoint samples) and split it.
SplitDatasets load_run_datasets(const RunConfig& cfg);

struct RunResult {
    std::string arch;
    model::DeiTModel deit;          // when arch == deit
    teacher::TinyConvNet convnet;   // when arch == convnet
    analysis::EvalReport final_eval;
    std::string checkpoint_path;
    std::string metrics_path;
};

// train / distill: the distillation mode in cfg decides whether a teacher is
// loaded and which loss runs.
RunResult train_run(const RunConfig& cfg, std::ostream* log = nullptr);

// Same loop over datasets already in memory (an empty eval set skips
// evaluation). The eval set should carry the train split's channel stats.
RunResult train_run_on(const RunConfig& cfg, const data::Dataset& train_set,
                       const data::Dataset& eval_set, std::ostream* log = nullptr);

// Loads a checkpoint, interpolates the positional grid to the new resolution
// and resumes training at cfg.optim.base_lr / cfg.finetune_lr_divisor.
RunResult finetune_run(RunConfig cfg, const std::string& checkpoint_path, i64 new_resolution,
                       std::ostream* log = nullptr);

struct LoadedModel {
    std::string arch;
    std::string role;
    nlohmann::json config;
    model::DeiTModel deit;
    teacher::TinyConvNet convnet;
    std::array<float, 3> channel_mean{0.f, 0.f, 0.f};
    std::array<float, 3> channel_std{1.f, 1.f, 1.f};
    i64 resolution = 0;
};

LoadedModel load_model(const std::string& path);

// Wraps a checkpoint behind the Teacher interface, adapting it to the given
// resolution (pooled convnets rebind; transformers get their positional grid
// interpolated).
std::shared_ptr<distill::Teacher> load_teacher_checkpoint(const std::string& path, i64 resolution);

void save_deit_checkpoint(const std::string& path, const model::DeiTModel& m,
                          const std::array<float, 3>& mean, const std::array<float, 3>& stddev,
                          const std::string& role, optim::AdamW<float>* opt, optim::Ema<float>* ema);
void save_convnet_checkpoint(const std::string& path, const teacher::TinyConvNet& net,
                             const std::array<float, 3>& mean, const std::array<float, 3>& stddev,
                             optim::AdamW<float>* opt);

}  // namespace deit::trainer
