#pragma once

#include <memory>
#include <string>

#include "deit/data.hpp"
#include "deit/distill.hpp"
#include "deit/model.hpp"
#include "deit/rng.hpp"

namespace deit::teacher {

// Small convolutional classifier built from the im2col + matmul primitives:
// three 3x3 conv stages with GeLU, global average pooling and a linear head.
// Global pooling makes the stack resolution-agnostic, so the same weights can
// supervise a fine-tuned student at a larger input size.
struct TinyConvNet {
    struct ConvStage {
        Tensor<float> weight;  // [in*k*k, out]
        Tensor<float> bias;    // [out]
        i64 in_ch = 0, out_ch = 0, stride = 1;
    };

    std::vector<ConvStage> stages;
    model::LinearT<float> head;
    i64 resolution = 32;
    i64 num_classes = 10;

    static TinyConvNet init(i64 num_classes, i64 resolution, Rng& rng);

    Tensor<float> forward(const Tensor<float>& images, Tape<float>* tape) const;

    std::vector<model::NamedParam<float>> named_parameters() const;
    void set_requires_grad(bool flag);

    // Same weights bound to a different input size.
    TinyConvNet with_resolution(i64 new_resolution) const;

    // Deep copy (buffers, not handles).
    TinyConvNet clone() const;
};

// Teacher adapters. Both evaluate without a tape and so allocate no gradient
// state.
class ConvNetTeacher : public distill::Teacher {
public:
    explicit ConvNetTeacher(TinyConvNet net) : net_(std::move(net)) {}
    Tensor<float> logits(const Tensor<float>& images) const override {
        return net_.forward(images, nullptr);
    }
    i64 resolution() const override { return net_.resolution; }
    i64 num_classes() const override { return net_.num_classes; }
    const TinyConvNet& net() const { return net_; }

private:
    TinyConvNet net_;
};

class DeiTTeacher : public distill::Teacher {
public:
    explicit DeiTTeacher(model::DeiTModel m) : model_(std::move(m)) {}
    Tensor<float> logits(const Tensor<float>& images) const override {
        return model_.forward(images).class_logits;
    }
    i64 resolution() const override { return model_.config.image_size; }
    i64 num_classes() const override { return model_.config.num_classes; }
    const model::DeiTModel& net() const { return model_; }

private:
    model::DeiTModel model_;
};

enum class TeacherKind { Convnet, Transformer };
TeacherKind teacher_kind_from_string(std::string_view s);

struct TeacherTrainOptions {
    i64 epochs = 10;
    i64 batch_size = 64;
    double base_lr = 5e-4;
    std::uint64_t seed = 7;
    bool augment_enabled = true;  // same pipeline as the student
};

// Trains a fresh teacher of the given kind on the dataset with the student's
// augmentation pipeline. The transformer kind trains a distillation-free
// deit-micro shaped to the dataset. Defined in trainer.cpp, which owns the
// shared training loop.
std::shared_ptr<distill::Teacher> train_teacher(TeacherKind kind, const data::Dataset& train_set,
                                                const TeacherTrainOptions& opts);

}  // namespace deit::teacher
