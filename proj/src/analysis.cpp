#include "deit/analysis.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>

#include "deit/augment.hpp"
#include "deit/distill.hpp"
#include "deit/error.hpp"

namespace deit::analysis {

DisagreementMatrix disagreement_matrix(
    const std::vector<std::pair<std::string, Classifier>>& classifiers, const data::Dataset& ds) {
    if (classifiers.size() < 2) throw ParamError("disagreement_matrix: need at least 2 classifiers");
    if (ds.count < 1) throw ParamError("disagreement_matrix: empty dataset");

    const std::size_t k = classifiers.size();
    std::vector<std::vector<i64>> preds;
    preds.reserve(k);
    DisagreementMatrix m;
    m.sample_count = ds.count;
    for (const auto& [name, fn] : classifiers) {
        m.names.push_back(name);
        auto p = fn(ds);
        if (static_cast<i64>(p.size()) != ds.count) {
            throw ContractError("classifier '" + name + "' returned " + std::to_string(p.size()) +
                                " predictions for " + std::to_string(ds.count) + " samples");
        }
        preds.push_back(std::move(p));
    }
    m.rates.assign(k * k, 0.0);
    for (std::size_t i = 0; i < k; ++i) {
        for (std::size_t j = i + 1; j < k; ++j) {
            i64 differ = 0;
            for (i64 s = 0; s < ds.count; ++s) {
                if (preds[i][static_cast<std::size_t>(s)] != preds[j][static_cast<std::size_t>(s)]) ++differ;
            }
            const double rate = double(differ) / double(ds.count);
            m.rates[i * k + j] = rate;
            m.rates[j * k + i] = rate;
        }
    }
    return m;
}

Classifier groundtruth_classifier() {
    return [](const data::Dataset& ds) { return ds.labels; };
}

namespace {

// Normalized eval batches without augmentation.
augment::AugPolicy eval_policy() {
    augment::AugPolicy p;
    p.enabled = false;
    return p;
}

template <typename LogitsFn>
void for_each_eval_batch(const data::Dataset& ds, i64 batch_size, LogitsFn fn) {
    const augment::AugPolicy policy = eval_policy();
    for (i64 start = 0; start < ds.count; start += batch_size) {
        const i64 b = std::min(batch_size, ds.count - start);
        std::vector<i64> idx(static_cast<std::size_t>(b));
        for (i64 i = 0; i < b; ++i) idx[static_cast<std::size_t>(i)] = start + i;
        auto batch = augment::make_batch(ds, idx, policy, 0, 0, 0);
        fn(start, batch.images);
    }
}

}  // namespace

std::vector<i64> predict(const model::DeiTModel& m, const data::Dataset& ds, Head head, i64 batch_size) {
    if (ds.resolution != m.config.image_size) {
        throw ContractError("predict: dataset resolution " + std::to_string(ds.resolution) +
                            " does not match model resolution " + std::to_string(m.config.image_size));
    }
    if (head == Head::Distill && !m.config.use_distill_token) {
        throw ContractError("predict: model has no distillation head");
    }
    std::vector<i64> out(static_cast<std::size_t>(ds.count));
    for_each_eval_batch(ds, batch_size, [&](i64 start, const Tensor<float>& images) {
        auto fwd = m.forward(images);
        std::vector<i64> labels;
        if (head == Head::Class) {
            labels = distill::argmax_rows(fwd.class_logits);
        } else if (head == Head::Distill) {
            if (!fwd.distill_logits.defined()) throw ContractError("predict: model has no distillation head");
            labels = distill::argmax_rows(fwd.distill_logits);
        } else {
            auto joint = distill::joint_predict(fwd.class_logits, fwd.distill_logits);
            labels = distill::argmax_rows(joint.scores);
        }
        for (std::size_t i = 0; i < labels.size(); ++i) out[static_cast<std::size_t>(start) + i] = labels[i];
    });
    return out;
}

std::vector<i64> predict_logits(const std::function<Tensor<float>(const Tensor<float>&)>& forward,
                                const data::Dataset& ds, i64 batch_size) {
    std::vector<i64> out(static_cast<std::size_t>(ds.count));
    for_each_eval_batch(ds, batch_size, [&](i64 start, const Tensor<float>& images) {
        const auto labels = distill::argmax_rows(forward(images));
        for (std::size_t i = 0; i < labels.size(); ++i) out[static_cast<std::size_t>(start) + i] = labels[i];
    });
    return out;
}

EvalReport evaluate(const model::DeiTModel& m, const data::Dataset& ds, i64 batch_size) {
    if (ds.resolution != m.config.image_size) {
        throw ContractError("evaluate: dataset resolution " + std::to_string(ds.resolution) +
                            " does not match model resolution " + std::to_string(m.config.image_size));
    }
    EvalReport rep;
    rep.has_distill = m.config.use_distill_token;
    i64 ok_class = 0, ok_dist = 0, ok_fused = 0;
    for_each_eval_batch(ds, batch_size, [&](i64 start, const Tensor<float>& images) {
        auto fwd = m.forward(images);
        const auto cls = distill::argmax_rows(fwd.class_logits);
        const auto joint = distill::joint_predict(fwd.class_logits, fwd.distill_logits);
        const auto fused = distill::argmax_rows(joint.scores);
        std::vector<i64> dist;
        if (rep.has_distill) dist = distill::argmax_rows(fwd.distill_logits);
        for (std::size_t i = 0; i < cls.size(); ++i) {
            const i64 truth = ds.labels[static_cast<std::size_t>(start) + i];
            ok_class += cls[i] == truth;
            ok_fused += fused[i] == truth;
            if (rep.has_distill) ok_dist += dist[i] == truth;
        }
    });
    rep.class_top1 = double(ok_class) / double(ds.count);
    rep.fusion_top1 = double(ok_fused) / double(ds.count);
    rep.distill_top1 =
        rep.has_distill ? double(ok_dist) / double(ds.count) : std::numeric_limits<double>::quiet_NaN();
    return rep;
}

double evaluate_logits(const std::function<Tensor<float>(const Tensor<float>&)>& forward,
                       const data::Dataset& ds, i64 batch_size) {
    i64 ok = 0;
    for_each_eval_batch(ds, batch_size, [&](i64 start, const Tensor<float>& images) {
        const auto labels = distill::argmax_rows(forward(images));
        for (std::size_t i = 0; i < labels.size(); ++i) {
            ok += labels[i] == ds.labels[static_cast<std::size_t>(start) + i];
        }
    });
    return double(ok) / double(ds.count);
}

namespace {

double cosine(const float* a, const float* b, i64 n) {
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (i64 i = 0; i < n; ++i) {
        dot += double(a[i]) * double(b[i]);
        na += double(a[i]) * double(a[i]);
        nb += double(b[i]) * double(b[i]);
    }
    const double denom = std::sqrt(na) * std::sqrt(nb);
    return denom > 0.0 ? dot / denom : 0.0;
}

}  // namespace

TokenCosineReport token_cosine_similarity(const model::DeiTModel& m, const data::Dataset& ds,
                                          i64 batch_size, i64 max_samples) {
    if (!m.config.use_distill_token) {
        throw ContractError("token_cosine_similarity: model has no distillation token");
    }
    TokenCosineReport rep;
    rep.input_cosine = cosine(m.cls_token.data(), m.dist_token.data(), m.config.embed_dim);
    rep.per_layer.assign(static_cast<std::size_t>(m.config.num_layers), 0.0);

    const data::Dataset subset = ds.count > max_samples ? ds.take(max_samples) : ds;
    const i64 d = m.config.embed_dim;
    i64 seen = 0;
    model::ForwardOptions opts;
    opts.collect_block_tokens = true;
    for_each_eval_batch(subset, batch_size, [&](i64, const Tensor<float>& images) {
        auto fwd = m.forward(images, opts);
        const i64 b = images.dim(0);
        const i64 s = m.config.seq_len();
        for (std::size_t layer = 0; layer < fwd.block_tokens.size(); ++layer) {
            const float* base = fwd.block_tokens[layer].data();
            double acc = 0.0;
            for (i64 i = 0; i < b; ++i) {
                const float* cls_tok = base + (i * s + 0) * d;
                const float* dist_tok = base + (i * s + 1) * d;
                acc += cosine(cls_tok, dist_tok, d);
            }
            rep.per_layer[layer] += acc;
        }
        seen += b;
    });
    for (auto& v : rep.per_layer) v /= double(seen);
    return rep;
}

std::vector<ThroughputRow> throughput_bench(const model::DeiTModel& m,
                                            const std::vector<i64>& batch_sizes, int warmup,
                                            int iters) {
    using clock = std::chrono::steady_clock;
    std::vector<ThroughputRow> rows;
    Rng rng(123);
    const i64 r = m.config.image_size;
    for (i64 bs : batch_sizes) {
        ThroughputRow row;
        row.batch_size = bs;
        try {
            Tensor<float> images({bs, 3, r, r});
            for (i64 i = 0; i < images.numel(); ++i) {
                images[i] = static_cast<float>(rng.uniform(-1.0, 1.0));
            }
            for (int i = 0; i < warmup; ++i) (void)m.forward(images);
            const auto start = clock::now();
            for (int i = 0; i < iters; ++i) (void)m.forward(images);
            const auto stop = clock::now();
            row.mean_seconds = std::chrono::duration<double>(stop - start).count() / double(iters);
            row.images_per_sec = double(bs) / row.mean_seconds;
            row.ok = true;
        } catch (const std::bad_alloc&) {
            row.ok = false;  // reported, not fatal
        }
        rows.push_back(row);
    }
    return rows;
}

void write_disagreement_csv(const std::string& path, const DisagreementMatrix& m) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("cannot write '" + path + "'");
    f << "classifier";
    for (const auto& n : m.names) f << "," << n;
    f << "\n";
    char buf[64];
    for (std::size_t i = 0; i < m.names.size(); ++i) {
        f << m.names[i];
        for (std::size_t j = 0; j < m.names.size(); ++j) {
            std::snprintf(buf, sizeof(buf), "%.6f", m.at(i, j));
            f << "," << buf;
        }
        f << "\n";
    }
}

void write_token_cosine_csv(const std::string& path, const TokenCosineReport& r) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("cannot write '" + path + "'");
    f << "layer,cosine\n";
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.6f", r.input_cosine);
    f << "input," << buf << "\n";
    for (std::size_t i = 0; i < r.per_layer.size(); ++i) {
        std::snprintf(buf, sizeof(buf), "%.6f", r.per_layer[i]);
        f << i << "," << buf << "\n";
    }
}

void write_accuracy_csv(const std::string& path, const EvalReport& r) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("cannot write '" + path + "'");
    f << "head,top1\n";
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.6f", r.class_top1);
    f << "class," << buf << "\n";
    if (r.has_distill) {
        std::snprintf(buf, sizeof(buf), "%.6f", r.distill_top1);
        f << "distill," << buf << "\n";
    }
    std::snprintf(buf, sizeof(buf), "%.6f", r.fusion_top1);
    f << "fused," << buf << "\n";
}

void write_throughput_csv(const std::string& path, const std::vector<ThroughputRow>& rows) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("cannot write '" + path + "'");
    f << "batch_size,mean_seconds,images_per_sec,status\n";
    char buf[96];
    for (const auto& r : rows) {
        if (r.ok) {
            std::snprintf(buf, sizeof(buf), "%lld,%.6f,%.2f,ok", static_cast<long long>(r.batch_size),
                          r.mean_seconds, r.images_per_sec);
        } else {
            std::snprintf(buf, sizeof(buf), "%lld,,,oom", static_cast<long long>(r.batch_size));
        }
        f << buf << "\n";
    }
}

}  // namespace deit::analysis
