#include "deit/distill.hpp"

#include <cmath>

namespace deit::distill {

Mode mode_from_string(std::string_view s) {
    if (s == "none") return Mode::None;
    if (s == "soft") return Mode::Soft;
    if (s == "hard") return Mode::Hard;
    if (s == "token") return Mode::Token;
    throw ParamError("unknown distillation mode '" + std::string(s) + "' (none|soft|hard|token)");
}

std::string mode_to_string(Mode m) {
    switch (m) {
        case Mode::None: return "none";
        case Mode::Soft: return "soft";
        case Mode::Hard: return "hard";
        case Mode::Token: return "token";
    }
    return "none";
}

void check_teacher_compatible(const Teacher& teacher, i64 resolution, i64 num_classes) {
    if (teacher.resolution() != resolution) {
        throw ContractError("teacher operates at resolution " + std::to_string(teacher.resolution()) +
                            " but the student needs " + std::to_string(resolution));
    }
    if (teacher.num_classes() != num_classes) {
        throw ContractError("teacher has " + std::to_string(teacher.num_classes()) +
                            " classes but the student has " + std::to_string(num_classes));
    }
}

template <typename T>
std::vector<i64> argmax_rows(const Tensor<T>& logits) {
    const i64 c = logits.shape().back();
    const i64 rows = logits.numel() / c;
    std::vector<i64> out(static_cast<std::size_t>(rows));
    for (i64 r = 0; r < rows; ++r) {
        const T* row = logits.data() + r * c;
        i64 best = 0;
        for (i64 j = 1; j < c; ++j) {
            if (row[j] > row[best]) best = j;  // strict: ties keep the lowest index
        }
        out[static_cast<std::size_t>(r)] = best;
    }
    return out;
}

namespace {

template <typename T>
void validate_target_rows(const Tensor<T>& targets) {
    const i64 c = targets.shape().back();
    const i64 rows = targets.numel() / c;
    for (i64 r = 0; r < rows; ++r) {
        double s = 0.0;
        for (i64 j = 0; j < c; ++j) s += targets[r * c + j];
        if (std::abs(s - 1.0) > 1e-5) {
            throw ContractError("target row " + std::to_string(r) + " sums to " + std::to_string(s) +
                                ", expected 1");
        }
    }
}

template <typename T>
void require_detached(const Tensor<T>& teacher_logits) {
    if (teacher_logits.requires_grad()) {
        throw ContractError("teacher logits must be detached from gradient flow");
    }
}

}  // namespace

template <typename T>
Tensor<T> smooth_targets(const Tensor<T>& targets, double eps) {
    if (eps < 0.0 || eps >= 1.0) throw ParamError("label smoothing eps must be in [0,1)");
    if (eps == 0.0) return targets;
    const i64 c = targets.shape().back();
    if (c < 2) throw ParamError("label smoothing needs at least 2 classes");
    const T a = static_cast<T>(1.0 - eps * double(c) / double(c - 1));
    const T b = static_cast<T>(eps / double(c - 1));
    Tensor<T> out(targets.shape());
    for (i64 i = 0; i < targets.numel(); ++i) out[i] = a * targets[i] + b;
    return out;
}

template <typename T>
Tensor<T> one_hot(const std::vector<i64>& labels, i64 num_classes) {
    Tensor<T> t({static_cast<i64>(labels.size()), num_classes});
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] < 0 || labels[i] >= num_classes) {
            throw ParamError("label " + std::to_string(labels[i]) + " outside [0," +
                             std::to_string(num_classes) + ")");
        }
        t[static_cast<i64>(i) * num_classes + labels[i]] = T(1);
    }
    return t;
}

template <typename T>
Tensor<T> cross_entropy_smoothed(const Tensor<T>& logits, const Tensor<T>& targets, double eps,
                                 Tape<T>* tape) {
    if (logits.shape() != targets.shape()) {
        throw ShapeError("cross_entropy: logits " + shape_str(logits.shape()) + " vs targets " +
                         shape_str(targets.shape()));
    }
    validate_target_rows(targets);
    const i64 batch = logits.numel() / logits.shape().back();
    Tensor<T> smoothed = smooth_targets(targets, eps);
    auto log_probs = ops::log_softmax_rows(logits, tape);
    auto weighted = ops::mul(smoothed, log_probs, tape);
    return ops::scale(ops::reduce_sum(weighted, tape), static_cast<T>(-1.0 / double(batch)), tape);
}

template <typename T>
Tensor<T> cross_entropy_smoothed(const Tensor<T>& logits, const std::vector<i64>& labels, double eps,
                                 Tape<T>* tape) {
    return cross_entropy_smoothed(logits, one_hot<T>(labels, logits.shape().back()), eps, tape);
}

template <typename T>
Tensor<T> soft_distill_loss(const Tensor<T>& student_logits, const Tensor<T>& teacher_logits,
                            const Tensor<T>& targets, double tau, double lambda, double eps,
                            KlOrder order, Tape<T>* tape) {
    if (!(tau > 0.0)) throw ParamError("distillation temperature tau must be > 0");
    require_detached(teacher_logits);
    if (student_logits.shape() != teacher_logits.shape()) {
        throw ShapeError("soft_distill: student " + shape_str(student_logits.shape()) + " vs teacher " +
                         shape_str(teacher_logits.shape()));
    }
    const i64 batch = student_logits.numel() / student_logits.shape().back();
    const T inv_tau = static_cast<T>(1.0 / tau);

    auto ce = cross_entropy_smoothed(student_logits, targets, eps, tape);

    // Teacher distribution is a constant.
    Tape<T>* no_tape = nullptr;
    Tensor<T> scaled_t = ops::scale(teacher_logits, inv_tau, no_tape);
    Tensor<T> q = ops::softmax_rows(scaled_t, no_tape);
    Tensor<T> log_q = ops::log_softmax_rows(scaled_t, no_tape);

    auto scaled_s = ops::scale(student_logits, inv_tau, tape);
    auto p = ops::softmax_rows(scaled_s, tape);
    auto log_p = ops::log_softmax_rows(scaled_s, tape);

    Tensor<T> kl_sum;  // batch-summed KL
    if (order == KlOrder::StudentFirst) {
        // KL(p||q) = sum p (log p - log q)
        kl_sum = ops::reduce_sum(ops::mul(p, ops::sub(log_p, log_q, tape), tape), tape);
    } else {
        // KL(q||p) = sum q log q - sum q log p
        T qlogq = 0;
        for (i64 i = 0; i < q.numel(); ++i) qlogq += q[i] * log_q[i];
        auto cross = ops::reduce_sum(ops::mul(q, log_p, tape), tape);
        kl_sum = ops::add(Tensor<T>::from_data({1}, {qlogq}), ops::scale(cross, T(-1), tape), tape);
    }
    const T kl_weight = static_cast<T>(lambda * tau * tau / double(batch));
    return ops::add(ops::scale(ce, static_cast<T>(1.0 - lambda), tape),
                    ops::scale(kl_sum, kl_weight, tape), tape);
}

template <typename T>
Tensor<T> hard_distill_loss(const Tensor<T>& class_logits, const Tensor<T>& distill_logits,
                            const Tensor<T>& targets, const Tensor<T>& teacher_logits, double eps,
                            Tape<T>* tape) {
    require_detached(teacher_logits);
    const std::vector<i64> teacher_labels = argmax_rows(teacher_logits);
    auto ce_true = cross_entropy_smoothed(class_logits, targets, eps, tape);
    auto ce_teacher = cross_entropy_smoothed(distill_logits, teacher_labels, eps, tape);
    return ops::add(ops::scale(ce_true, T(0.5), tape), ops::scale(ce_teacher, T(0.5), tape), tape);
}

template <typename T>
JointPrediction<T> joint_predict(const Tensor<T>& class_logits, const Tensor<T>& distill_logits) {
    JointPrediction<T> out;
    auto p_class = ops::softmax_rows(class_logits, static_cast<Tape<T>*>(nullptr));
    if (!distill_logits.defined()) {
        out.scores = p_class;
        out.fused = false;
        return out;
    }
    auto p_dist = ops::softmax_rows(distill_logits, static_cast<Tape<T>*>(nullptr));
    out.scores = ops::add(p_class, p_dist, static_cast<Tape<T>*>(nullptr));
    out.fused = true;
    return out;
}

template <typename T>
Tensor<T> training_loss(const DistillConfig& cfg, const Tensor<T>& class_logits,
                        const Tensor<T>& distill_logits, const Tensor<T>& targets,
                        const Tensor<T>& teacher_logits, Tape<T>* tape) {
    switch (cfg.mode) {
        case Mode::None:
            return cross_entropy_smoothed(class_logits, targets, cfg.epsilon, tape);
        case Mode::Soft:
            if (!teacher_logits.defined()) throw ContractError("soft distillation needs teacher logits");
            return soft_distill_loss(class_logits, teacher_logits, targets, cfg.tau, cfg.lambda,
                                     cfg.epsilon, cfg.kl_order, tape);
        case Mode::Hard:
            if (!teacher_logits.defined()) throw ContractError("hard distillation needs teacher logits");
            return hard_distill_loss(class_logits, class_logits, targets, teacher_logits, cfg.epsilon, tape);
        case Mode::Token:
            if (!teacher_logits.defined()) throw ContractError("token distillation needs teacher logits");
            if (!distill_logits.defined()) {
                throw ContractError("token distillation needs a model with a distillation head");
            }
            return hard_distill_loss(class_logits, distill_logits, targets, teacher_logits, cfg.epsilon, tape);
    }
    throw ContractError("unreachable distillation mode");
}

#define DEIT_INSTANTIATE_DISTILL(T)                                                                     \
    template std::vector<i64> argmax_rows<T>(const Tensor<T>&);                                         \
    template Tensor<T> smooth_targets<T>(const Tensor<T>&, double);                                     \
    template Tensor<T> one_hot<T>(const std::vector<i64>&, i64);                                        \
    template Tensor<T> cross_entropy_smoothed<T>(const Tensor<T>&, const Tensor<T>&, double, Tape<T>*); \
    template Tensor<T> cross_entropy_smoothed<T>(const Tensor<T>&, const std::vector<i64>&, double,     \
                                                 Tape<T>*);                                             \
    template Tensor<T> soft_distill_loss<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,       \
                                            double, double, double, KlOrder, Tape<T>*);                 \
    template Tensor<T> hard_distill_loss<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,       \
                                            const Tensor<T>&, double, Tape<T>*);                        \
    template JointPrediction<T> joint_predict<T>(const Tensor<T>&, const Tensor<T>&);                   \
    template Tensor<T> training_loss<T>(const DistillConfig&, const Tensor<T>&, const Tensor<T>&,       \
                                        const Tensor<T>&, const Tensor<T>&, Tape<T>*);

DEIT_INSTANTIATE_DISTILL(float)
DEIT_INSTANTIATE_DISTILL(double)

#undef DEIT_INSTANTIATE_DISTILL

}  // namespace deit::distill
