#pragma once

#include <string>
#include <string_view>
#include <vector>

#include "deit/ops.hpp"
#include "deit/tensor.hpp"

namespace deit::distill {

enum class Mode { None, Soft, Hard, Token };

// KL argument order of the soft objective. The printed equation puts the
// student distribution first; the conventional direction puts the teacher
// first. Default follows the printed form.
enum class KlOrder { StudentFirst, TeacherFirst };

Mode mode_from_string(std::string_view s);
std::string mode_to_string(Mode m);

struct DistillConfig {
    Mode mode = Mode::None;
    double tau = 3.0;
    double lambda = 0.1;
    double epsilon = 0.1;
    KlOrder kl_order = KlOrder::StudentFirst;
};

// Frozen classifier supplying supervision. Implementations must be safe to
// share read-only across threads and must not allocate gradient state.
class Teacher {
public:
    virtual ~Teacher() = default;
    virtual Tensor<float> logits(const Tensor<float>& images) const = 0;
    virtual i64 resolution() const = 0;
    virtual i64 num_classes() const = 0;
};

// ContractError when the teacher cannot supervise a student operating at the
// given resolution / class count (used by pre-training and fine-tuning).
void check_teacher_compatible(const Teacher& teacher, i64 resolution, i64 num_classes);

// Row argmax with ties resolved to the lowest class index.
template <typename T>
std::vector<i64> argmax_rows(const Tensor<T>& logits);

// Smoothed target map: the true class keeps 1-eps, the remaining eps is
// shared across the other C-1 classes. Applied as an affine map so that
// pre-mixed soft targets commute with the smoothing.
template <typename T>
Tensor<T> smooth_targets(const Tensor<T>& targets, double eps);

template <typename T>
Tensor<T> one_hot(const std::vector<i64>& labels, i64 num_classes);

// Mean over the batch of -sum_c smoothed(t)_c log softmax(z)_c.
template <typename T>
Tensor<T> cross_entropy_smoothed(const Tensor<T>& logits, const Tensor<T>& targets, double eps,
                                 Tape<T>* tape);
template <typename T>
Tensor<T> cross_entropy_smoothed(const Tensor<T>& logits, const std::vector<i64>& labels, double eps,
                                 Tape<T>* tape);

// (1-lambda) CE(softmax(Zs), y) + lambda tau^2 KL over temperature-scaled
// distributions. Teacher logits must be detached.
template <typename T>
Tensor<T> soft_distill_loss(const Tensor<T>& student_logits, const Tensor<T>& teacher_logits,
                            const Tensor<T>& targets, double tau, double lambda, double eps,
                            KlOrder order, Tape<T>* tape);

// 1/2 CE against the true targets + 1/2 CE against the teacher argmax label.
// Plain hard mode passes the same student logits for both heads; token mode
// routes the true-label half to the class head and the teacher half to the
// distillation head. Smoothing applies to both halves.
template <typename T>
Tensor<T> hard_distill_loss(const Tensor<T>& class_logits, const Tensor<T>& distill_logits,
                            const Tensor<T>& targets, const Tensor<T>& teacher_logits, double eps,
                            Tape<T>* tape);

template <typename T>
struct JointPrediction {
    Tensor<T> scores;         // softmax(class) + softmax(distill); rows sum to 2
    bool fused = false;       // false when the distill head was missing
};

// Late fusion of the two classifier heads.
template <typename T>
JointPrediction<T> joint_predict(const Tensor<T>& class_logits, const Tensor<T>& distill_logits);

// Dispatches on the configured mode; the one loss family is shared by
// pre-training and fine-tuning.
template <typename T>
Tensor<T> training_loss(const DistillConfig& cfg, const Tensor<T>& class_logits,
                        const Tensor<T>& distill_logits, const Tensor<T>& targets,
                        const Tensor<T>& teacher_logits, Tape<T>* tape);

}  // namespace deit::distill
