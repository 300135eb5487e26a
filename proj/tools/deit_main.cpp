// Command-line surface: train, distill, finetune, eval, analyze, bench.

#include <omp.h>

#include <cstdlib>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "json.hpp"

#include "deit/analysis.hpp"
#include "deit/trainer.hpp"

using namespace deit;
using nlohmann::json;

namespace {

struct CommonOpts {
    std::string config_path;
    std::string dataset;
    std::string eval_dataset;
    std::string preset;
    std::string mode;
    std::string out_dir;
    std::string teacher;
    std::string optimizer;
    long long epochs = -1;
    long long batch = -1;
    long long seed = -1;
    long long rescale = -1;
    long long eval_every = -1;
    double lr = -1.0;
    bool ema = false;
    std::string arch;
};

void add_common(CLI::App* cmd, CommonOpts& o, bool dataset_required) {
    cmd->add_option("--config", o.config_path, "flat JSON config file (dotted keys)");
    auto* ds = cmd->add_option("--dataset", o.dataset, "synth:blobs,n=...,c=...,res=...  or  cifar:<path>");
    if (dataset_required) ds->required();
    cmd->add_option("--eval-dataset", o.eval_dataset, "held-out split (derived for synth when omitted)");
    cmd->add_option("--preset", o.preset, "deit-ti | deit-s | deit-b | deit-micro");
    cmd->add_option("--out", o.out_dir, "output directory (metrics.csv, last.ckpt)");
    cmd->add_option("--epochs", o.epochs, "training epochs");
    cmd->add_option("--batch", o.batch, "batch size");
    cmd->add_option("--seed", o.seed, "master seed");
    cmd->add_option("--lr", o.lr, "base learning rate (before the /512 batch scaling)");
    cmd->add_option("--rescale", o.rescale, "bilinear-rescale the dataset to this resolution first");
    cmd->add_option("--eval-every", o.eval_every, "evaluate every k epochs");
    cmd->add_option("--optimizer", o.optimizer, "adamw | sgd");
    cmd->add_flag("--ema", o.ema, "track an exponential moving average of the weights");
    cmd->add_option("--arch", o.arch, "deit | convnet (convnet trains a teacher)");
}

trainer::RunConfig resolve_config(const CommonOpts& o) {
    trainer::RunConfig cfg;
    if (!o.config_path.empty()) {
        std::ifstream f(o.config_path);
        if (!f) throw IoError("cannot open config '" + o.config_path + "'");
        json flat = json::parse(f);
        trainer::apply_config_json(cfg, flat);
    }
    json overrides = json::object();
    if (!o.preset.empty()) overrides["model.preset"] = o.preset;
    if (!o.dataset.empty()) overrides["run.dataset"] = o.dataset;
    if (!o.eval_dataset.empty()) overrides["run.eval_dataset"] = o.eval_dataset;
    if (!o.out_dir.empty()) overrides["run.out_dir"] = o.out_dir;
    if (!o.teacher.empty()) overrides["run.teacher"] = o.teacher;
    if (!o.mode.empty()) overrides["distill.mode"] = o.mode;
    if (!o.optimizer.empty()) overrides["run.optimizer"] = o.optimizer;
    if (!o.arch.empty()) overrides["run.arch"] = o.arch;
    if (o.epochs >= 0) overrides["run.epochs"] = o.epochs;
    if (o.batch >= 0) overrides["run.batch_size"] = o.batch;
    if (o.seed >= 0) overrides["run.seed"] = o.seed;
    if (o.rescale >= 0) overrides["run.rescale"] = o.rescale;
    if (o.eval_every >= 0) overrides["run.eval_every"] = o.eval_every;
    if (o.lr >= 0.0) overrides["optim.base_lr"] = o.lr;
    if (o.ema) overrides["optim.ema_enabled"] = true;
    trainer::apply_config_json(cfg, overrides);
    return cfg;
}

void print_eval(const analysis::EvalReport& rep) {
    std::cout << "class head top-1:   " << rep.class_top1 << "\n";
    if (rep.has_distill) std::cout << "distill head top-1: " << rep.distill_top1 << "\n";
    std::cout << "late fusion top-1:  " << rep.fusion_top1 << "\n";
}

data::Dataset eval_dataset_for(const trainer::LoadedModel& loaded, const std::string& spec, i64 rescale) {
    data::Dataset ds = trainer::load_dataset_spec(spec);
    if (rescale > 0) data::rescale_dataset(ds, rescale);
    if (ds.resolution != loaded.resolution) data::rescale_dataset(ds, loaded.resolution);
    ds.channel_mean = loaded.channel_mean;  // checkpointed train-split stats
    ds.channel_std = loaded.channel_std;
    return ds;
}

}  // namespace

int main(int argc, char** argv) {
    if (const char* threads = std::getenv("DEIT_NUM_THREADS")) {
        const int n = std::atoi(threads);
        if (n > 0) omp_set_num_threads(n);
    }

    CLI::App app{"data-efficient image transformer training and analysis"};
    app.require_subcommand(1);

    CommonOpts train_o, distill_o, finetune_o, bench_o;
    std::string eval_ckpt, eval_data, analyze_ckpt, analyze_data, analyze_out, analyze_teacher;
    std::string finetune_ckpt, bench_ckpt, bench_out, bench_sizes = "1,8,32";
    long long finetune_res = 0, eval_rescale = -1, analyze_rescale = -1;

    auto* train_cmd = app.add_subcommand("train", "train a model from scratch");
    add_common(train_cmd, train_o, true);
    train_cmd->add_option("--mode", train_o.mode, "distillation mode (none|soft|hard|token)");
    train_cmd->add_option("--teacher", train_o.teacher, "teacher checkpoint (for distillation modes)");

    auto* distill_cmd = app.add_subcommand("distill", "train a student against a teacher");
    add_common(distill_cmd, distill_o, true);
    distill_cmd->add_option("--mode", distill_o.mode, "soft | hard | token")->default_val("token");
    distill_cmd->add_option("--teacher", distill_o.teacher, "teacher checkpoint")->required();

    auto* finetune_cmd = app.add_subcommand("finetune", "resume a checkpoint at a new resolution");
    add_common(finetune_cmd, finetune_o, true);
    finetune_cmd->add_option("--checkpoint", finetune_ckpt, "input checkpoint")->required();
    finetune_cmd->add_option("--resolution", finetune_res, "target resolution")->required();
    finetune_cmd->add_option("--mode", finetune_o.mode, "override the checkpointed distillation mode");
    finetune_cmd->add_option("--teacher", finetune_o.teacher, "teacher checkpoint at/adapted to the target resolution");

    auto* eval_cmd = app.add_subcommand("eval", "report per-head and fused accuracy");
    eval_cmd->add_option("--checkpoint", eval_ckpt, "model checkpoint")->required();
    eval_cmd->add_option("--dataset", eval_data, "evaluation dataset")->required();
    eval_cmd->add_option("--rescale", eval_rescale, "rescale dataset first");

    auto* analyze_cmd = app.add_subcommand("analyze", "write disagreement/cosine/accuracy CSVs");
    analyze_cmd->add_option("--checkpoint", analyze_ckpt, "model checkpoint")->required();
    analyze_cmd->add_option("--dataset", analyze_data, "evaluation dataset")->required();
    analyze_cmd->add_option("--out", analyze_out, "output directory")->required();
    analyze_cmd->add_option("--teacher", analyze_teacher, "teacher checkpoint to include in the comparison");
    analyze_cmd->add_option("--rescale", analyze_rescale, "rescale dataset first");

    auto* bench_cmd = app.add_subcommand("bench", "forward throughput (images/sec)");
    bench_cmd->add_option("--preset", bench_o.preset, "model preset to benchmark");
    bench_cmd->add_option("--checkpoint", bench_ckpt, "or an existing checkpoint");
    bench_cmd->add_option("--batch-sizes", bench_sizes, "comma-separated batch sizes")->capture_default_str();
    bench_cmd->add_option("--out", bench_out, "CSV output path");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*train_cmd || *distill_cmd) {
            CommonOpts& o = *train_cmd ? train_o : distill_o;
            trainer::RunConfig cfg = resolve_config(o);
            if (cfg.distill.mode != distill::Mode::None && cfg.teacher_path.empty()) {
                std::cerr << "error: --teacher is required for distillation mode "
                          << distill::mode_to_string(cfg.distill.mode) << "\n";
                return 2;
            }
            auto result = trainer::train_run(cfg, &std::cout);
            print_eval(result.final_eval);
            if (!result.checkpoint_path.empty()) {
                std::cout << "checkpoint: " << result.checkpoint_path << "\n";
            }
        } else if (*finetune_cmd) {
            trainer::RunConfig cfg = resolve_config(finetune_o);
            if (finetune_o.mode.empty()) {
                // carry the distillation settings of the checkpoint over
                auto loaded = checkpoint::load(finetune_ckpt);
                if (loaded.config.contains("distill")) {
                    cfg.distill.mode =
                        distill::mode_from_string(loaded.config["distill"]["mode"].get<std::string>());
                }
            }
            if (cfg.distill.mode != distill::Mode::None && cfg.teacher_path.empty()) {
                std::cerr << "error: --teacher is required for distillation mode "
                          << distill::mode_to_string(cfg.distill.mode) << "\n";
                return 2;
            }
            if (cfg.optim.total_epochs == 300 && finetune_o.epochs < 0) {
                cfg.optim.total_epochs = 25;  // published fine-tune budget
            }
            auto result = trainer::finetune_run(cfg, finetune_ckpt, finetune_res, &std::cout);
            print_eval(result.final_eval);
            if (!result.checkpoint_path.empty()) {
                std::cout << "checkpoint: " << result.checkpoint_path << "\n";
            }
        } else if (*eval_cmd) {
            auto loaded = trainer::load_model(eval_ckpt);
            auto ds = eval_dataset_for(loaded, eval_data, eval_rescale > 0 ? eval_rescale : 0);
            if (loaded.arch == "deit") {
                print_eval(analysis::evaluate(loaded.deit, ds));
            } else {
                analysis::EvalReport rep;
                rep.class_top1 = rep.fusion_top1 = analysis::evaluate_logits(
                    [&](const Tensor<float>& x) { return loaded.convnet.forward(x, nullptr); }, ds);
                print_eval(rep);
            }
        } else if (*analyze_cmd) {
            auto loaded = trainer::load_model(analyze_ckpt);
            if (loaded.arch != "deit") throw ContractError("analyze expects a deit checkpoint");
            auto ds = eval_dataset_for(loaded, analyze_data, analyze_rescale > 0 ? analyze_rescale : 0);
            std::filesystem::create_directories(analyze_out);
            const auto& m = loaded.deit;

            auto rep = analysis::evaluate(m, ds);
            analysis::write_accuracy_csv(analyze_out + "/accuracy.csv", rep);

            std::vector<std::pair<std::string, analysis::Classifier>> classifiers;
            classifiers.emplace_back("groundtruth", analysis::groundtruth_classifier());
            classifiers.emplace_back("class_head", [&](const data::Dataset& d) {
                return analysis::predict(m, d, analysis::Head::Class);
            });
            if (m.config.use_distill_token) {
                classifiers.emplace_back("distill_head", [&](const data::Dataset& d) {
                    return analysis::predict(m, d, analysis::Head::Distill);
                });
            }
            classifiers.emplace_back("fused", [&](const data::Dataset& d) {
                return analysis::predict(m, d, analysis::Head::Fused);
            });
            if (!analyze_teacher.empty()) {
                auto teach = trainer::load_teacher_checkpoint(analyze_teacher, loaded.resolution);
                classifiers.emplace_back("teacher", [teach](const data::Dataset& d) {
                    return analysis::predict_logits(
                        [&](const Tensor<float>& x) { return teach->logits(x); }, d);
                });
            }
            analysis::write_disagreement_csv(analyze_out + "/disagreement.csv",
                                             analysis::disagreement_matrix(classifiers, ds));
            if (m.config.use_distill_token) {
                analysis::write_token_cosine_csv(analyze_out + "/token_cosine.csv",
                                                 analysis::token_cosine_similarity(m, ds));
            }
            std::cout << "analysis written to " << analyze_out << "\n";
        } else if (*bench_cmd) {
            model::DeiTModel m;
            if (!bench_ckpt.empty()) {
                auto loaded = trainer::load_model(bench_ckpt);
                if (loaded.arch != "deit") throw ContractError("bench expects a deit checkpoint");
                m = loaded.deit;
            } else {
                Rng rng(0);
                m = model::DeiTModel::init(model::preset(bench_o.preset.empty() ? "deit-micro"
                                                                                : bench_o.preset),
                                           rng);
            }
            std::vector<i64> sizes;
            std::size_t pos = 0;
            while (pos < bench_sizes.size()) {
                std::size_t comma = bench_sizes.find(',', pos);
                if (comma == std::string::npos) comma = bench_sizes.size();
                sizes.push_back(std::stoll(bench_sizes.substr(pos, comma - pos)));
                pos = comma + 1;
            }
            auto rows = analysis::throughput_bench(m, sizes);
            for (const auto& r : rows) {
                if (r.ok) {
                    std::cout << "batch " << r.batch_size << ": " << r.images_per_sec << " images/sec\n";
                } else {
                    std::cout << "batch " << r.batch_size << ": out of memory\n";
                }
            }
            if (!bench_out.empty()) analysis::write_throughput_csv(bench_out, rows);
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
