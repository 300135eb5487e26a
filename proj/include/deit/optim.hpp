#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "deit/model.hpp"
#include "deit/tensor.hpp"

namespace deit::optim {

struct OptimConfig {
    double base_lr = 5e-4;
    double weight_decay = 0.05;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    i64 warmup_epochs = 5;
    i64 total_epochs = 300;
    i64 batch_size = 1024;
    double cosine_floor = 1e-5;
    std::optional<double> grad_clip;  // global-norm bound; the recipe leaves it off
    bool ema_enabled = false;
    double ema_decay = 0.99996;
    double sgd_momentum = 0.9;

    void validate() const;
};

// lr_scaled = base_lr * batchsize / 512
double scaled_lr(double base_lr, i64 batch_size);

// Linear warmup from 0 to the scaled lr, then cosine decay to the floor at
// the final step.
double lr_at(i64 step, i64 steps_per_epoch, const OptimConfig& cfg);

// Layer-norm parameters, biases and the token/position embeddings are kept
// out of weight decay.
bool is_decay_exempt(std::string_view param_name);

template <typename T>
double global_grad_norm(const std::vector<model::NamedParam<T>>& params);

template <typename T>
void clip_gradients(std::vector<model::NamedParam<T>>& params, double bound);

template <typename T>
void zero_gradients(std::vector<model::NamedParam<T>>& params);

// Decoupled-weight-decay Adam with bias correction.
template <typename T>
class AdamW {
public:
    AdamW(std::vector<model::NamedParam<T>> params, OptimConfig cfg);

    void step(double lr);

    i64 step_count() const { return step_; }
    void set_step_count(i64 s) { step_ = s; }

    struct State {
        std::string name;
        Tensor<T> m;
        Tensor<T> v;
    };
    std::vector<State>& state() { return state_; }
    std::vector<model::NamedParam<T>>& params() { return params_; }

private:
    std::vector<model::NamedParam<T>> params_;
    std::vector<State> state_;
    OptimConfig cfg_;
    i64 step_ = 0;
};

// Plain SGD with momentum and the same decoupled decay/exemption rules;
// kept for the fine-tuning ablation.
template <typename T>
class SgdMomentum {
public:
    SgdMomentum(std::vector<model::NamedParam<T>> params, OptimConfig cfg);
    void step(double lr);

private:
    std::vector<model::NamedParam<T>> params_;
    std::vector<Tensor<T>> velocity_;
    OptimConfig cfg_;
};

// Exponential moving average of parameters, updated after each optimizer step.
template <typename T>
class Ema {
public:
    explicit Ema(const std::vector<model::NamedParam<T>>& params);

    void update(const std::vector<model::NamedParam<T>>& params, double decay);

    // Copies the shadow values into the given (same-named) parameters.
    void copy_to(std::vector<model::NamedParam<T>>& params) const;

    std::vector<model::NamedParam<T>>& shadow() { return shadow_; }
    const std::vector<model::NamedParam<T>>& shadow() const { return shadow_; }

private:
    std::vector<model::NamedParam<T>> shadow_;
};

}  // namespace deit::optim
