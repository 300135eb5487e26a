#include "deit/trainer.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <unordered_map>

#include "deit/ops.hpp"
#include "deit/resolution.hpp"

namespace deit::trainer {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// config file keys

namespace {

struct KeyHandler {
    const char* key;
    std::function<void(RunConfig&, const json&)> set;
    std::function<json(const RunConfig&)> get;
};

const std::vector<KeyHandler>& key_table() {
    static const std::vector<KeyHandler> table = {
        {"run.arch", [](RunConfig& c, const json& v) { c.arch = v.get<std::string>(); },
         [](const RunConfig& c) { return json(c.arch); }},
        {"model.preset",
         [](RunConfig& c, const json& v) {
             c.preset = v.get<std::string>();
             const bool keep_distill = c.model.use_distill_token;
             c.model = model::preset(c.preset);
             c.model.use_distill_token = keep_distill;
             c.model.drop_path_rate = 0.1;
         },
         [](const RunConfig& c) { return json(c.preset); }},
        {"model.embed_dim", [](RunConfig& c, const json& v) { c.model.embed_dim = v.get<i64>(); },
         [](const RunConfig& c) { return json(c.model.embed_dim); }},
        {"model.num_heads", [](RunConfig& c, const json& v) { c.model.num_heads = v.get<i64>(); },
         [](const RunConfig& c) { return json(c.model.num_heads); }},
        {"model.num_layers", [](RunConfig& c, const json& v) { c.model.num_layers = v.get<i64>(); },
         [](const RunConfig& c) { return json(c.model.num_layers); }},
        {"model.patch_size", [](RunConfig& c, const json& v) { c.model.patch_size = v.get<i64>(); },
         [](const RunConfig& c) { return json(c.model.patch_size); }},
        {"model.image_size", [](RunConfig& c, const json& v) { c.model.image_size = v.get<i64>(); },
         [](const RunConfig& c) { return json(c.model.image_size); }},
        {"model.num_classes", [](RunConfig& c, const json& v) { c.model.num_classes = v.get<i64>(); },
         [](const RunConfig& c) { return json(c.model.num_classes); }},
        {"model.drop_path_rate", [](RunConfig& c, const json& v) { c.model.drop_path_rate = v.get<double>(); },
         [](const RunConfig& c) { return json(c.model.drop_path_rate); }},
        {"model.dropout_rate", [](RunConfig& c, const json& v) { c.model.dropout_rate = v.get<double>(); },
         [](const RunConfig& c) { return json(c.model.dropout_rate); }},
        {"model.use_distill_token",
         [](RunConfig& c, const json& v) { c.model.use_distill_token = v.get<bool>(); },
         [](const RunConfig& c) { return json(c.model.use_distill_token); }},
        {"model.init_std", [](RunConfig& c, const json& v) { c.model.init_std = v.get<double>(); },
         [](const RunConfig& c) { return json(c.model.init_std); }},
        {"distill.mode",
         [](RunConfig& c, const json& v) { c.distill.mode = distill::mode_from_string(v.get<std::string>()); },
         [](const RunConfig& c) { return json(distill::mode_to_string(c.distill.mode)); }},
        {"distill.tau", [](RunConfig& c, const json& v) { c.distill.tau = v.get<double>(); },
         [](const RunConfig& c) { return json(c.distill.tau); }},
        {"distill.lambda", [](RunConfig& c, const json& v) { c.distill.lambda = v.get<double>(); },
         [](const RunConfig& c) { return json(c.distill.lambda); }},
        {"distill.epsilon", [](RunConfig& c, const json& v) { c.distill.epsilon = v.get<double>(); },
         [](const RunConfig& c) { return json(c.distill.epsilon); }},
        {"distill.kl_order",
         [](RunConfig& c, const json& v) {
             const std::string s = v.get<std::string>();
             if (s == "student_first") c.distill.kl_order = distill::KlOrder::StudentFirst;
             else if (s == "teacher_first") c.distill.kl_order = distill::KlOrder::TeacherFirst;
             else throw ParamError("distill.kl_order must be student_first or teacher_first");
         },
         [](const RunConfig& c) {
             return json(c.distill.kl_order == distill::KlOrder::StudentFirst ? "student_first"
                                                                              : "teacher_first");
         }},
        {"augment.enabled", [](RunConfig& c, const json& v) { c.augment.enabled = v.get<bool>(); },
         [](const RunConfig& c) { return json(c.augment.enabled); }},
        {"augment.mixup_prob", [](RunConfig& c, const json& v) { c.augment.mixup_prob = v.get<double>(); },
         [](const RunConfig& c) { return json(c.augment.mixup_prob); }},
        {"augment.mixup_alpha", [](RunConfig& c, const json& v) { c.augment.mixup_alpha = v.get<double>(); },
         [](const RunConfig& c) { return json(c.augment.mixup_alpha); }},
        {"augment.cutmix_prob", [](RunConfig& c, const json& v) { c.augment.cutmix_prob = v.get<double>(); },
         [](const RunConfig& c) { return json(c.augment.cutmix_prob); }},
        {"augment.cutmix_alpha", [](RunConfig& c, const json& v) { c.augment.cutmix_alpha = v.get<double>(); },
         [](const RunConfig& c) { return json(c.augment.cutmix_alpha); }},
        {"augment.erasing_prob", [](RunConfig& c, const json& v) { c.augment.erasing_prob = v.get<double>(); },
         [](const RunConfig& c) { return json(c.augment.erasing_prob); }},
        {"augment.randaug_magnitude",
         [](RunConfig& c, const json& v) { c.augment.randaug_magnitude = v.get<int>(); },
         [](const RunConfig& c) { return json(c.augment.randaug_magnitude); }},
        {"augment.randaug_layers", [](RunConfig& c, const json& v) { c.augment.randaug_layers = v.get<int>(); },
         [](const RunConfig& c) { return json(c.augment.randaug_layers); }},
        {"augment.randaug_prob", [](RunConfig& c, const json& v) { c.augment.randaug_prob = v.get<double>(); },
         [](const RunConfig& c) { return json(c.augment.randaug_prob); }},
        {"augment.repeated_aug_m", [](RunConfig& c, const json& v) { c.augment.repeated_aug_m = v.get<int>(); },
         [](const RunConfig& c) { return json(c.augment.repeated_aug_m); }},
        {"augment.hflip_prob", [](RunConfig& c, const json& v) { c.augment.hflip_prob = v.get<double>(); },
         [](const RunConfig& c) { return json(c.augment.hflip_prob); }},
        {"optim.base_lr", [](RunConfig& c, const json& v) { c.optim.base_lr = v.get<double>(); },
         [](const RunConfig& c) { return json(c.optim.base_lr); }},
        {"optim.weight_decay", [](RunConfig& c, const json& v) { c.optim.weight_decay = v.get<double>(); },
         [](const RunConfig& c) { return json(c.optim.weight_decay); }},
        {"optim.beta1", [](RunConfig& c, const json& v) { c.optim.beta1 = v.get<double>(); },
         [](const RunConfig& c) { return json(c.optim.beta1); }},
        {"optim.beta2", [](RunConfig& c, const json& v) { c.optim.beta2 = v.get<double>(); },
         [](const RunConfig& c) { return json(c.optim.beta2); }},
        {"optim.eps", [](RunConfig& c, const json& v) { c.optim.eps = v.get<double>(); },
         [](const RunConfig& c) { return json(c.optim.eps); }},
        {"optim.warmup_epochs", [](RunConfig& c, const json& v) { c.optim.warmup_epochs = v.get<i64>(); },
         [](const RunConfig& c) { return json(c.optim.warmup_epochs); }},
        {"optim.cosine_floor", [](RunConfig& c, const json& v) { c.optim.cosine_floor = v.get<double>(); },
         [](const RunConfig& c) { return json(c.optim.cosine_floor); }},
        {"optim.grad_clip",
         [](RunConfig& c, const json& v) {
             const double b = v.get<double>();
             if (b > 0.0) c.optim.grad_clip = b;
             else c.optim.grad_clip.reset();
         },
         [](const RunConfig& c) { return json(c.optim.grad_clip.value_or(0.0)); }},
        {"optim.ema_enabled", [](RunConfig& c, const json& v) { c.optim.ema_enabled = v.get<bool>(); },
         [](const RunConfig& c) { return json(c.optim.ema_enabled); }},
        {"optim.ema_decay", [](RunConfig& c, const json& v) { c.optim.ema_decay = v.get<double>(); },
         [](const RunConfig& c) { return json(c.optim.ema_decay); }},
        {"optim.sgd_momentum", [](RunConfig& c, const json& v) { c.optim.sgd_momentum = v.get<double>(); },
         [](const RunConfig& c) { return json(c.optim.sgd_momentum); }},
        {"run.dataset", [](RunConfig& c, const json& v) { c.dataset = v.get<std::string>(); },
         [](const RunConfig& c) { return json(c.dataset); }},
        {"run.eval_dataset", [](RunConfig& c, const json& v) { c.eval_dataset = v.get<std::string>(); },
         [](const RunConfig& c) { return json(c.eval_dataset); }},
        {"run.epochs", [](RunConfig& c, const json& v) { c.optim.total_epochs = v.get<i64>(); },
         [](const RunConfig& c) { return json(c.optim.total_epochs); }},
        {"run.batch_size", [](RunConfig& c, const json& v) { c.optim.batch_size = v.get<i64>(); },
         [](const RunConfig& c) { return json(c.optim.batch_size); }},
        {"run.seed", [](RunConfig& c, const json& v) { c.seed = v.get<std::uint64_t>(); },
         [](const RunConfig& c) { return json(c.seed); }},
        {"run.out_dir", [](RunConfig& c, const json& v) { c.out_dir = v.get<std::string>(); },
         [](const RunConfig& c) { return json(c.out_dir); }},
        {"run.teacher", [](RunConfig& c, const json& v) { c.teacher_path = v.get<std::string>(); },
         [](const RunConfig& c) { return json(c.teacher_path); }},
        {"run.optimizer", [](RunConfig& c, const json& v) { c.optimizer = v.get<std::string>(); },
         [](const RunConfig& c) { return json(c.optimizer); }},
        {"run.rescale", [](RunConfig& c, const json& v) { c.rescale = v.get<i64>(); },
         [](const RunConfig& c) { return json(c.rescale); }},
        {"run.eval_every", [](RunConfig& c, const json& v) { c.eval_every = v.get<i64>(); },
         [](const RunConfig& c) { return json(c.eval_every); }},
        {"run.finetune_lr_divisor",
         [](RunConfig& c, const json& v) { c.finetune_lr_divisor = v.get<double>(); },
         [](const RunConfig& c) { return json(c.finetune_lr_divisor); }},
    };
    return table;
}

std::size_t levenshtein(std::string_view a, std::string_view b) {
    std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
    for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
    for (std::size_t i = 1; i <= a.size(); ++i) {
        cur[0] = i;
        for (std::size_t j = 1; j <= b.size(); ++j) {
            const std::size_t sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
            cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
        }
        std::swap(prev, cur);
    }
    return prev[b.size()];
}

}  // namespace

std::vector<std::string> config_keys() {
    std::vector<std::string> keys;
    for (const auto& h : key_table()) keys.emplace_back(h.key);
    return keys;
}

void apply_config_json(RunConfig& cfg, const json& flat) {
    if (!flat.is_object()) throw ParamError("config must be a flat JSON object with dotted keys");
    // Unknown keys fail before anything is applied.
    for (const auto& [key, value] : flat.items()) {
        (void)value;
        bool known = false;
        for (const auto& h : key_table()) known = known || key == h.key;
        if (!known) {
            std::size_t best = SIZE_MAX;
            std::string nearest;
            for (const auto& h : key_table()) {
                const std::size_t d = levenshtein(key, h.key);
                if (d < best) {
                    best = d;
                    nearest = h.key;
                }
            }
            throw ParamError("unknown config key '" + key + "'; nearest valid key is '" + nearest + "'");
        }
    }
    // Table order puts the preset before the model overrides.
    for (const auto& h : key_table()) {
        auto it = flat.find(h.key);
        if (it != flat.end()) h.set(cfg, *it);
    }
}

json config_to_json(const RunConfig& cfg) {
    json out = json::object();
    for (const auto& h : key_table()) out[h.key] = h.get(cfg);
    return out;
}

// ---------------------------------------------------------------------------
// dataset specs

namespace {

std::unordered_map<std::string, std::string> parse_kv(const std::string& s) {
    std::unordered_map<std::string, std::string> kv;
    std::size_t pos = 0;
    while (pos < s.size()) {
        std::size_t comma = s.find(',', pos);
        if (comma == std::string::npos) comma = s.size();
        const std::string item = s.substr(pos, comma - pos);
        const std::size_t eq = item.find('=');
        if (eq == std::string::npos) throw ParamError("dataset spec: expected key=value, got '" + item + "'");
        kv[item.substr(0, eq)] = item.substr(eq + 1);
        pos = comma + 1;
    }
    return kv;
}

i64 kv_i64(const std::unordered_map<std::string, std::string>& kv, const std::string& key, i64 fallback) {
    auto it = kv.find(key);
    return it == kv.end() ? fallback : std::stoll(it->second);
}

}  // namespace

data::Dataset load_dataset_spec(const std::string& spec) {
    if (spec.empty()) throw ParamError("empty dataset spec");
    if (spec.rfind("synth:", 0) == 0) {
        const std::string rest = spec.substr(6);
        const std::size_t comma = rest.find(',');
        const std::string kind = rest.substr(0, comma);
        auto kv = comma == std::string::npos
                      ? std::unordered_map<std::string, std::string>{}
                      : parse_kv(rest.substr(comma + 1));
        return data::synth_dataset(data::synth_kind_from_string(kind), kv_i64(kv, "n", 2000),
                                   kv_i64(kv, "c", 10), kv_i64(kv, "res", 32),
                                   static_cast<std::uint64_t>(kv_i64(kv, "seed", 1)));
    }
    if (spec.rfind("cifar:", 0) == 0) return data::load_cifar10(spec.substr(6));
    return data::load_cifar10(spec);
}

SplitDatasets load_run_datasets(const RunConfig& cfg) {
    SplitDatasets out;
    if (!cfg.eval_dataset.empty()) {
        out.train = load_dataset_spec(cfg.dataset);
        out.eval = load_dataset_spec(cfg.eval_dataset);
    } else if (cfg.dataset.rfind("synth:", 0) == 0) {
        // Same task (same seed, hence same class structure), disjoint
        // samples: generate train+eval in one stream and split it.
        const std::string rest = cfg.dataset.substr(6);
        const std::size_t comma = rest.find(',');
        const std::string kind = rest.substr(0, comma);
        auto kv = comma == std::string::npos
                      ? std::unordered_map<std::string, std::string>{}
                      : parse_kv(rest.substr(comma + 1));
        const i64 n_train = kv_i64(kv, "n", 2000);
        const i64 n_eval = std::max<i64>(kv_i64(kv, "c", 10) * 10, n_train / 5);
        auto both = data::synth_dataset(data::synth_kind_from_string(kind), n_train + n_eval,
                                        kv_i64(kv, "c", 10), kv_i64(kv, "res", 32),
                                        static_cast<std::uint64_t>(kv_i64(kv, "seed", 1)));
        out.train = both.slice(0, n_train);
        data::compute_channel_stats(out.train);
        out.eval = both.slice(n_train, n_eval);
    } else {
        throw ParamError("no eval dataset: pass run.eval_dataset (e.g. the cifar test_batch.bin)");
    }
    if (cfg.rescale > 0) {
        data::rescale_dataset(out.train, cfg.rescale);
        data::rescale_dataset(out.eval, cfg.rescale);
    }
    out.eval.use_stats_of(out.train);
    return out;
}

// ---------------------------------------------------------------------------
// checkpoints

namespace {

json stats_json(const std::array<float, 3>& mean, const std::array<float, 3>& stddev) {
    return json{{"mean", {mean[0], mean[1], mean[2]}}, {"std", {stddev[0], stddev[1], stddev[2]}}};
}

void stats_from_json(const json& j, std::array<float, 3>& mean, std::array<float, 3>& stddev) {
    for (int c = 0; c < 3; ++c) {
        mean[c] = j.at("mean").at(c).get<float>();
        stddev[c] = j.at("std").at(c).get<float>();
    }
}

json deit_config_json(const model::DeiTConfig& m) {
    return json{{"embed_dim", m.embed_dim},
                {"num_heads", m.num_heads},
                {"num_layers", m.num_layers},
                {"patch_size", m.patch_size},
                {"image_size", m.image_size},
                {"num_classes", m.num_classes},
                {"drop_path_rate", m.drop_path_rate},
                {"dropout_rate", m.dropout_rate},
                {"use_distill_token", m.use_distill_token},
                {"init_std", m.init_std}};
}

model::DeiTConfig deit_config_from_json(const json& j) {
    model::DeiTConfig m;
    m.embed_dim = j.at("embed_dim").get<i64>();
    m.num_heads = j.at("num_heads").get<i64>();
    m.num_layers = j.at("num_layers").get<i64>();
    m.patch_size = j.at("patch_size").get<i64>();
    m.image_size = j.at("image_size").get<i64>();
    m.num_classes = j.at("num_classes").get<i64>();
    m.drop_path_rate = j.at("drop_path_rate").get<double>();
    m.dropout_rate = j.at("dropout_rate").get<double>();
    m.use_distill_token = j.at("use_distill_token").get<bool>();
    m.init_std = j.at("init_std").get<double>();
    return m;
}

void append_optimizer_section(checkpoint::Checkpoint& ckpt, optim::AdamW<float>* opt) {
    if (opt == nullptr) return;
    ckpt.has_optimizer = true;
    ckpt.optimizer_step = opt->step_count();
    for (auto& s : opt->state()) {
        ckpt.optimizer_tensors.push_back({"opt.m." + s.name, s.m});
        ckpt.optimizer_tensors.push_back({"opt.v." + s.name, s.v});
    }
}

}  // namespace

void save_deit_checkpoint(const std::string& path, const model::DeiTModel& m,
                          const std::array<float, 3>& mean, const std::array<float, 3>& stddev,
                          const std::string& role, optim::AdamW<float>* opt, optim::Ema<float>* ema) {
    checkpoint::Checkpoint ckpt;
    ckpt.config = json{{"arch", "deit"},
                       {"role", role},
                       {"resolution", m.config.image_size},
                       {"data_stats", stats_json(mean, stddev)},
                       {"model", deit_config_json(m.config)}};
    ckpt.tensors = m.named_parameters();
    append_optimizer_section(ckpt, opt);
    if (ema != nullptr) {
        ckpt.has_ema = true;
        for (auto& s : ema->shadow()) ckpt.ema_tensors.push_back({"ema." + s.name, s.tensor});
    }
    checkpoint::save(path, ckpt);
}

void save_convnet_checkpoint(const std::string& path, const teacher::TinyConvNet& net,
                             const std::array<float, 3>& mean, const std::array<float, 3>& stddev,
                             optim::AdamW<float>* opt) {
    checkpoint::Checkpoint ckpt;
    ckpt.config = json{{"arch", "convnet"},
                       {"role", "teacher"},
                       {"resolution", net.resolution},
                       {"data_stats", stats_json(mean, stddev)},
                       {"model", json{{"num_classes", net.num_classes}, {"resolution", net.resolution}}}};
    ckpt.tensors = net.named_parameters();
    append_optimizer_section(ckpt, opt);
    checkpoint::save(path, ckpt);
}

LoadedModel load_model(const std::string& path) {
    checkpoint::Checkpoint ckpt = checkpoint::load(path);
    LoadedModel out;
    out.config = ckpt.config;
    out.arch = ckpt.config.at("arch").get<std::string>();
    out.role = ckpt.config.value("role", "student");
    out.resolution = ckpt.config.at("resolution").get<i64>();
    if (ckpt.config.contains("data_stats")) {
        stats_from_json(ckpt.config.at("data_stats"), out.channel_mean, out.channel_std);
    }
    Rng rng(0);
    if (out.arch == "deit") {
        out.deit = model::DeiTModel::init(deit_config_from_json(ckpt.config.at("model")), rng);
        auto params = out.deit.named_parameters();
        checkpoint::load_into(params, ckpt.tensors);
    } else if (out.arch == "convnet") {
        const auto& m = ckpt.config.at("model");
        out.convnet = teacher::TinyConvNet::init(m.at("num_classes").get<i64>(),
                                                 m.at("resolution").get<i64>(), rng);
        auto params = out.convnet.named_parameters();
        checkpoint::load_into(params, ckpt.tensors);
    } else {
        throw FormatError("checkpoint has unknown arch '" + out.arch + "'");
    }
    return out;
}

std::shared_ptr<distill::Teacher> load_teacher_checkpoint(const std::string& path, i64 target_resolution) {
    LoadedModel loaded = load_model(path);
    if (loaded.arch == "convnet") {
        teacher::TinyConvNet net = loaded.convnet;
        if (net.resolution != target_resolution) net = net.with_resolution(target_resolution);
        return std::make_shared<teacher::ConvNetTeacher>(std::move(net));
    }
    model::DeiTModel m = loaded.deit;
    if (m.config.image_size != target_resolution) {
        resolution::adapt_to_resolution(m, target_resolution);
    }
    return std::make_shared<teacher::DeiTTeacher>(std::move(m));
}

// ---------------------------------------------------------------------------
// the shared training loop

namespace {

// Exclusive run-directory ownership via an O_EXCL lock file.
class DirLock {
public:
    explicit DirLock(const std::string& dir) {
        if (dir.empty()) return;
        path_ = dir + "/.lock";
        const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
        if (fd < 0) {
            throw IoError("output directory '" + dir + "' is locked by another run (found " + path_ + ")");
        }
        ::close(fd);
        held_ = true;
    }
    ~DirLock() {
        if (held_) ::unlink(path_.c_str());
    }
    DirLock(const DirLock&) = delete;
    DirLock& operator=(const DirLock&) = delete;

private:
    std::string path_;
    bool held_ = false;
};

struct AnyModel {
    std::string arch;
    model::DeiTModel deit;
    teacher::TinyConvNet convnet;

    bool is_deit() const { return arch == "deit"; }

    model::ForwardResult<float> forward(const Tensor<float>& x, const model::ForwardOptions& o,
                                        Tape<float>* t) const {
        if (is_deit()) return deit.forward(x, o, t);
        model::ForwardResult<float> r;
        r.class_logits = convnet.forward(x, t);
        return r;
    }
    std::vector<model::NamedParam<float>> params() const {
        return is_deit() ? deit.named_parameters() : convnet.named_parameters();
    }
    i64 resolution() const { return is_deit() ? deit.config.image_size : convnet.resolution; }
    AnyModel clone() const {
        AnyModel m;
        m.arch = arch;
        if (is_deit()) m.deit = deit.clone();
        else m.convnet = convnet.clone();
        return m;
    }
};

analysis::EvalReport eval_any(const AnyModel& m, const data::Dataset& ds) {
    if (m.is_deit()) return analysis::evaluate(m.deit, ds);
    analysis::EvalReport rep;
    rep.class_top1 = analysis::evaluate_logits(
        [&](const Tensor<float>& x) { return m.convnet.forward(x, nullptr); }, ds);
    rep.fusion_top1 = rep.class_top1;
    rep.distill_top1 = std::numeric_limits<double>::quiet_NaN();
    rep.has_distill = false;
    return rep;
}

std::string fmt(double v) {
    char buf[48];
    std::snprintf(buf, sizeof(buf), "%.6g", v);
    return buf;
}

// When `injected` is non-null the loop resumes from those weights instead of
// drawing a fresh initialization (fine-tuning, warm starts).
RunResult train_core(RunConfig cfg, const data::Dataset& train_set, const data::Dataset& eval_set,
                     std::ostream* log, AnyModel* injected = nullptr) {
    // Short desk-scale runs keep a proportional warmup instead of the
    // 5-of-300 default.
    cfg.optim.warmup_epochs = std::min(cfg.optim.warmup_epochs, cfg.optim.total_epochs / 2);
    cfg.augment.validate();
    cfg.optim.validate();

    const bool to_disk = !cfg.out_dir.empty();
    if (to_disk) fs::create_directories(cfg.out_dir);
    DirLock lock(cfg.out_dir);

    // model shaped by the dataset
    AnyModel net;
    net.arch = cfg.arch;
    Rng init_rng(cfg.seed);
    if (injected != nullptr) {
        net = *injected;
        if (net.resolution() != train_set.resolution) {
            throw ParamError("injected model resolution " + std::to_string(net.resolution()) +
                             " does not match dataset resolution " + std::to_string(train_set.resolution));
        }
    } else if (cfg.arch == "deit") {
        model::DeiTConfig mc = cfg.model;
        mc.num_classes = train_set.num_classes;
        if (cfg.distill.mode == distill::Mode::Token) mc.use_distill_token = true;
        if (mc.image_size != train_set.resolution) {
            throw ParamError("model resolution " + std::to_string(mc.image_size) +
                             " does not match dataset resolution " + std::to_string(train_set.resolution) +
                             "; pick a matching preset or use run.rescale");
        }
        net.deit = model::DeiTModel::init(mc, init_rng);
    } else if (cfg.arch == "convnet") {
        if (cfg.distill.mode != distill::Mode::None) {
            throw ParamError("the convnet arch trains without distillation (it is the teacher)");
        }
        net.convnet = teacher::TinyConvNet::init(train_set.num_classes, train_set.resolution, init_rng);
    } else {
        throw ParamError("unknown arch '" + cfg.arch + "' (deit|convnet)");
    }

    // teacher
    std::shared_ptr<distill::Teacher> teach;
    if (cfg.distill.mode != distill::Mode::None) {
        if (cfg.teacher_path.empty()) {
            throw ContractError("distillation mode '" + distill::mode_to_string(cfg.distill.mode) +
                                "' requires a teacher checkpoint");
        }
        teach = load_teacher_checkpoint(cfg.teacher_path, net.resolution());
        distill::check_teacher_compatible(*teach, net.resolution(), train_set.num_classes);
    }

    auto params = net.params();
    for (auto& p : params) p.tensor.set_requires_grad(true);

    augment::RepeatedAugSampler sampler(train_set.count, cfg.optim.batch_size, cfg.augment.repeated_aug_m);
    const i64 steps_per_epoch = sampler.batches_per_epoch();
    if (steps_per_epoch < 1) throw ParamError("batch size exceeds the dataset");

    std::unique_ptr<optim::AdamW<float>> adamw;
    std::unique_ptr<optim::SgdMomentum<float>> sgd;
    if (cfg.optimizer == "adamw") adamw = std::make_unique<optim::AdamW<float>>(params, cfg.optim);
    else if (cfg.optimizer == "sgd") sgd = std::make_unique<optim::SgdMomentum<float>>(params, cfg.optim);
    else throw ParamError("unknown optimizer '" + cfg.optimizer + "' (adamw|sgd)");

    std::unique_ptr<optim::Ema<float>> ema;
    if (cfg.optim.ema_enabled) ema = std::make_unique<optim::Ema<float>>(params);

    // teacher logit cache (hard mode, augmentation off: views never change)
    const bool cache_teacher = teach && !cfg.augment.enabled && cfg.distill.mode == distill::Mode::Hard;
    std::unordered_map<i64, std::vector<float>> teacher_cache;

    std::ofstream metrics;
    const std::string metrics_path = to_disk ? cfg.out_dir + "/metrics.csv" : "";
    if (to_disk) {
        std::ofstream cfg_out(cfg.out_dir + "/config.json", std::ios::trunc);
        cfg_out << config_to_json(cfg).dump(2) << "\n";
        metrics.open(metrics_path, std::ios::trunc);
        if (!metrics) throw IoError("cannot write " + metrics_path);
        metrics << "epoch,lr,train_loss,eval_top1,class_top1,distill_top1,ema_top1,distinct_images_seen\n";
    }

    const std::string ckpt_path = to_disk ? cfg.out_dir + "/last.ckpt" : "";
    const bool has_eval = eval_set.count > 0;
    analysis::EvalReport final_eval;
    if (cfg.optim.total_epochs == 0 && has_eval) final_eval = eval_any(net, eval_set);
    i64 global_step = 0;

    for (i64 epoch = 0; epoch < cfg.optim.total_epochs; ++epoch) {
        const auto batches = sampler.epoch(cfg.seed, epoch);
        double loss_sum = 0.0;
        double last_lr = 0.0;
        for (std::size_t bi = 0; bi < batches.size(); ++bi) {
            auto batch = augment::make_batch(train_set, batches[bi], cfg.augment, cfg.seed, epoch,
                                             static_cast<i64>(bi));

            Tensor<float> teacher_logits;
            if (teach) {
                if (cache_teacher) {
                    const i64 c = train_set.num_classes;
                    teacher_logits = Tensor<float>({batch.images.dim(0), c});
                    for (i64 i = 0; i < batch.images.dim(0); ++i) {
                        const i64 idx = batch.indices[static_cast<std::size_t>(i)];
                        auto it = teacher_cache.find(idx);
                        if (it == teacher_cache.end()) {
                            auto one = ops::slice(batch.images, 0, i, 1, static_cast<Tape<float>*>(nullptr));
                            auto lg = teach->logits(one);
                            std::vector<float> row(lg.data(), lg.data() + c);
                            it = teacher_cache.emplace(idx, std::move(row)).first;
                        }
                        std::copy(it->second.begin(), it->second.end(), teacher_logits.data() + i * c);
                    }
                } else {
                    teacher_logits = teach->logits(batch.images);
                }
            }

            Rng step_rng(seed_combine(cfg.seed, 0xd70bULL, static_cast<std::uint64_t>(epoch),
                                      static_cast<std::uint64_t>(bi)));
            model::ForwardOptions fo;
            fo.training = true;
            fo.rng = &step_rng;

            Tape<float> tape;
            auto fwd = net.forward(batch.images, fo, &tape);
            auto loss = distill::training_loss(cfg.distill, fwd.class_logits, fwd.distill_logits,
                                               batch.targets, teacher_logits, &tape);
            optim::zero_gradients(params);
            tape.backward(loss);
            if (cfg.optim.grad_clip) optim::clip_gradients(params, *cfg.optim.grad_clip);

            last_lr = optim::lr_at(global_step, steps_per_epoch, cfg.optim);
            if (adamw) adamw->step(last_lr);
            else sgd->step(last_lr);
            if (ema) ema->update(params, cfg.optim.ema_decay);

            loss_sum += double(loss.item());
            ++global_step;
        }

        const double train_loss = loss_sum / double(steps_per_epoch);
        const bool do_eval = has_eval && (epoch % cfg.eval_every == 0 || epoch + 1 == cfg.optim.total_epochs);
        std::optional<analysis::EvalReport> eval;
        std::optional<double> ema_top1;
        if (do_eval) {
            eval = eval_any(net, eval_set);
            final_eval = *eval;
            if (ema) {
                AnyModel shadow = net.clone();
                auto sp = shadow.params();
                ema->copy_to(sp);
                ema_top1 = eval_any(shadow, eval_set).fusion_top1;
            }
        }

        if (to_disk) {
            metrics << epoch << "," << fmt(last_lr) << "," << fmt(train_loss) << ",";
            if (eval) {
                metrics << fmt(eval->fusion_top1) << "," << fmt(eval->class_top1) << ","
                        << (eval->has_distill ? fmt(eval->distill_top1) : "") << ",";
            } else {
                metrics << ",,,";
            }
            metrics << (ema_top1 ? fmt(*ema_top1) : "") << ","
                    << (epoch + 1) * sampler.distinct_per_epoch() << "\n";
            metrics.flush();

            if (net.is_deit()) {
                save_deit_checkpoint(ckpt_path, net.deit, train_set.channel_mean, train_set.channel_std,
                                     "student", adamw.get(), ema.get());
            } else {
                save_convnet_checkpoint(ckpt_path, net.convnet, train_set.channel_mean,
                                        train_set.channel_std, adamw.get());
            }
        }
        if (log) {
            (*log) << "epoch " << epoch << " loss " << fmt(train_loss);
            if (eval) (*log) << " top1 " << fmt(eval->fusion_top1);
            (*log) << "\n";
        }
    }

    RunResult result;
    result.arch = cfg.arch;
    result.deit = net.deit;
    result.convnet = net.convnet;
    result.final_eval = final_eval;
    result.checkpoint_path = ckpt_path;
    result.metrics_path = metrics_path;
    return result;
}

}  // namespace

RunResult train_run(const RunConfig& cfg, std::ostream* log) {
    SplitDatasets ds = load_run_datasets(cfg);
    return train_core(cfg, ds.train, ds.eval, log);
}

RunResult train_run_on(const RunConfig& cfg, const data::Dataset& train_set,
                       const data::Dataset& eval_set, std::ostream* log) {
    return train_core(cfg, train_set, eval_set, log);
}

RunResult finetune_run(RunConfig cfg, const std::string& checkpoint_path, i64 new_resolution,
                       std::ostream* log) {
    LoadedModel loaded = load_model(checkpoint_path);
    if (loaded.arch != "deit") throw ContractError("finetune requires a deit checkpoint");

    AnyModel net;
    net.arch = "deit";
    net.deit = loaded.deit;
    resolution::adapt_to_resolution(net.deit, new_resolution);

    SplitDatasets ds = load_run_datasets(cfg);
    if (ds.train.resolution != new_resolution) data::rescale_dataset(ds.train, new_resolution);
    if (ds.eval.resolution != new_resolution) data::rescale_dataset(ds.eval, new_resolution);
    ds.eval.use_stats_of(ds.train);

    cfg.arch = "deit";
    cfg.model = net.deit.config;
    cfg.optim.base_lr /= cfg.finetune_lr_divisor;
    return train_core(cfg, ds.train, ds.eval, log, &net);
}

}  // namespace deit::trainer

// train_teacher lives here so that the teacher module can reuse the shared
// training loop without a circular dependency.
namespace deit::teacher {

std::shared_ptr<distill::Teacher> train_teacher(TeacherKind kind, const data::Dataset& train_set,
                                                const TeacherTrainOptions& opts) {
    trainer::RunConfig cfg;
    cfg.arch = kind == TeacherKind::Convnet ? "convnet" : "deit";
    cfg.distill.mode = distill::Mode::None;
    cfg.augment.enabled = opts.augment_enabled;
    if (!opts.augment_enabled) cfg.augment.repeated_aug_m = 1;
    cfg.optim.total_epochs = opts.epochs;
    cfg.optim.batch_size = opts.batch_size;
    cfg.optim.base_lr = opts.base_lr;
    cfg.optim.warmup_epochs = opts.epochs >= 5 ? 1 : 0;
    cfg.seed = opts.seed;
    cfg.out_dir.clear();
    if (kind == TeacherKind::Transformer) {
        cfg.model = model::preset("deit-micro");
        cfg.model.image_size = train_set.resolution;
        cfg.model.drop_path_rate = 0.1;
    }

    data::Dataset no_eval;
    trainer::RunResult res = trainer::train_run_on(cfg, train_set, no_eval);
    if (kind == TeacherKind::Convnet) {
        res.convnet.set_requires_grad(false);  // freeze
        return std::make_shared<ConvNetTeacher>(std::move(res.convnet));
    }
    res.deit.set_requires_grad(false);
    return std::make_shared<DeiTTeacher>(std::move(res.deit));
}

}  // namespace deit::teacher
