#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "deit/data.hpp"
#include "deit/model.hpp"

namespace deit::analysis {

// A classifier is anything that maps a dataset to per-sample label
// predictions; the groundtruth itself joins the comparison as a
// pseudo-classifier row.
using Classifier = std::function<std::vector<i64>(const data::Dataset&)>;

struct DisagreementMatrix {
    std::vector<std::string> names;
    std::vector<double> rates;  // row-major square matrix
    i64 sample_count = 0;

    double at(std::size_t i, std::size_t j) const { return rates[i * names.size() + j]; }
};

// Pairwise fraction of differing predictions; zero diagonal, symmetric.
// Predictions are computed once per classifier and reused.
DisagreementMatrix disagreement_matrix(
    const std::vector<std::pair<std::string, Classifier>>& classifiers, const data::Dataset& ds);

Classifier groundtruth_classifier();

// Batched eval-mode predictions; images are normalized with the dataset's
// stored channel stats.
enum class Head { Class, Distill, Fused };
std::vector<i64> predict(const model::DeiTModel& m, const data::Dataset& ds, Head head,
                         i64 batch_size = 64);

// Argmax predictions of an arbitrary logits function (e.g. a frozen teacher).
std::vector<i64> predict_logits(const std::function<Tensor<float>(const Tensor<float>&)>& forward,
                                const data::Dataset& ds, i64 batch_size = 64);

struct EvalReport {
    double class_top1 = 0.0;
    double distill_top1 = 0.0;  // NaN when the model has one head
    double fusion_top1 = 0.0;   // equals class_top1 when the model has one head
    bool has_distill = false;
};

EvalReport evaluate(const model::DeiTModel& m, const data::Dataset& ds, i64 batch_size = 64);

// Generic single-head variant used for non-transformer classifiers.
double evaluate_logits(const std::function<Tensor<float>(const Tensor<float>&)>& forward,
                       const data::Dataset& ds, i64 batch_size = 64);

struct TokenCosineReport {
    double input_cosine = 0.0;        // between the learned token parameters
    std::vector<double> per_layer;    // mean activation cosine after each block
};

// Mean cosine between the class-token and distillation-token activations.
TokenCosineReport token_cosine_similarity(const model::DeiTModel& m, const data::Dataset& ds,
                                          i64 batch_size = 64, i64 max_samples = 512);

struct ThroughputRow {
    i64 batch_size = 0;
    double mean_seconds = 0.0;
    double images_per_sec = 0.0;
    bool ok = true;  // false when the batch did not fit in memory
};

// Wall-clock forward throughput: warmup runs, then the mean over timed runs
// on a monotonic clock; data creation is excluded.
std::vector<ThroughputRow> throughput_bench(const model::DeiTModel& m,
                                            const std::vector<i64>& batch_sizes, int warmup = 5,
                                            int iters = 30);

void write_disagreement_csv(const std::string& path, const DisagreementMatrix& m);
void write_token_cosine_csv(const std::string& path, const TokenCosineReport& r);
void write_accuracy_csv(const std::string& path, const EvalReport& r);
void write_throughput_csv(const std::string& path, const std::vector<ThroughputRow>& rows);

}  // namespace deit::analysis
