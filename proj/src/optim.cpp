#include "deit/optim.hpp"

#include <cmath>

namespace deit::optim {

void OptimConfig::validate() const {
    if (warmup_epochs < 0 || total_epochs < 0 || warmup_epochs > total_epochs) {
        throw ParamError("optim: warmup_epochs must lie in [0, total_epochs]");
    }
    if (batch_size < 1) throw ParamError("optim: batch_size must be >= 1");
    if (weight_decay < 0.0) throw ParamError("optim: weight_decay must be >= 0");
    if (ema_decay < 0.0 || ema_decay > 1.0) throw ParamError("optim: ema_decay must be in [0,1]");
    if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0) {
        throw ParamError("optim: betas must be in [0,1)");
    }
}

double scaled_lr(double base_lr, i64 batch_size) {
    if (batch_size < 1) throw ParamError("scaled_lr: batch_size must be >= 1");
    return base_lr * double(batch_size) / 512.0;
}

double lr_at(i64 step, i64 steps_per_epoch, const OptimConfig& cfg) {
    cfg.validate();
    if (steps_per_epoch < 1) throw ParamError("lr_at: steps_per_epoch must be >= 1");
    const i64 total = cfg.total_epochs * steps_per_epoch;
    const i64 warmup = cfg.warmup_epochs * steps_per_epoch;
    if (step < 0 || step >= total) {
        throw ContractError("lr_at: step " + std::to_string(step) + " outside [0," + std::to_string(total) + ")");
    }
    const double peak = scaled_lr(cfg.base_lr, cfg.batch_size);
    if (step < warmup) {
        return peak * double(step) / double(warmup);
    }
    const double floor = cfg.cosine_floor;
    const i64 span = total - 1 - warmup;  // u hits 1 at the final step
    const double u = span > 0 ? double(step - warmup) / double(span) : 0.0;
    return floor + (peak - floor) * 0.5 * (1.0 + std::cos(M_PI * u));
}

bool is_decay_exempt(std::string_view name) {
    if (name.size() >= 5 && name.substr(name.size() - 5) == ".bias") return true;
    if (name.find("norm") != std::string_view::npos) return true;
    return name == "cls_token" || name == "dist_token" || name == "pos_embed";
}

template <typename T>
double global_grad_norm(const std::vector<model::NamedParam<T>>& params) {
    double sq = 0.0;
    for (const auto& p : params) {
        if (!p.tensor.has_grad()) continue;
        const T* g = p.tensor.grad();
        for (i64 i = 0; i < p.tensor.numel(); ++i) sq += double(g[i]) * double(g[i]);
    }
    return std::sqrt(sq);
}

template <typename T>
void clip_gradients(std::vector<model::NamedParam<T>>& params, double bound) {
    const double norm = global_grad_norm(params);
    if (norm <= bound || norm == 0.0) return;
    const T f = static_cast<T>(bound / norm);
    for (auto& p : params) {
        if (!p.tensor.has_grad()) continue;
        T* g = p.tensor.grad();
        for (i64 i = 0; i < p.tensor.numel(); ++i) g[i] *= f;
    }
}

template <typename T>
void zero_gradients(std::vector<model::NamedParam<T>>& params) {
    for (auto& p : params) p.tensor.zero_grad();
}

template <typename T>
AdamW<T>::AdamW(std::vector<model::NamedParam<T>> params, OptimConfig cfg)
    : params_(std::move(params)), cfg_(std::move(cfg)) {
    cfg_.validate();
    state_.reserve(params_.size());
    for (const auto& p : params_) {
        state_.push_back({p.name, Tensor<T>::zeros(p.tensor.shape()), Tensor<T>::zeros(p.tensor.shape())});
    }
}

template <typename T>
void AdamW<T>::step(double lr) {
    ++step_;
    const double b1 = cfg_.beta1, b2 = cfg_.beta2;
    const double bc1 = 1.0 - std::pow(b1, double(step_));
    const double bc2 = 1.0 - std::pow(b2, double(step_));
    for (std::size_t pi = 0; pi < params_.size(); ++pi) {
        auto& p = params_[pi].tensor;
        p.ensure_grad();
        const T* g = p.grad();
        T* m = state_[pi].m.data();
        T* v = state_[pi].v.data();
        T* w = p.data();
        const double wd = is_decay_exempt(params_[pi].name) ? 0.0 : cfg_.weight_decay;
        const i64 n = p.numel();
        for (i64 i = 0; i < n; ++i) {
            if (std::isnan(double(g[i]))) {
                throw ContractError("NaN gradient in parameter '" + params_[pi].name + "'");
            }
            m[i] = static_cast<T>(b1 * m[i] + (1.0 - b1) * g[i]);
            v[i] = static_cast<T>(b2 * v[i] + (1.0 - b2) * double(g[i]) * double(g[i]));
            const double mhat = double(m[i]) / bc1;
            const double vhat = double(v[i]) / bc2;
            const double update = lr * mhat / (std::sqrt(vhat) + cfg_.eps) + lr * wd * double(w[i]);
            w[i] = static_cast<T>(double(w[i]) - update);
        }
    }
}

template <typename T>
SgdMomentum<T>::SgdMomentum(std::vector<model::NamedParam<T>> params, OptimConfig cfg)
    : params_(std::move(params)), cfg_(std::move(cfg)) {
    cfg_.validate();
    velocity_.reserve(params_.size());
    for (const auto& p : params_) velocity_.push_back(Tensor<T>::zeros(p.tensor.shape()));
}

template <typename T>
void SgdMomentum<T>::step(double lr) {
    const double mu = cfg_.sgd_momentum;
    for (std::size_t pi = 0; pi < params_.size(); ++pi) {
        auto& p = params_[pi].tensor;
        p.ensure_grad();
        const T* g = p.grad();
        T* v = velocity_[pi].data();
        T* w = p.data();
        const double wd = is_decay_exempt(params_[pi].name) ? 0.0 : cfg_.weight_decay;
        const i64 n = p.numel();
        for (i64 i = 0; i < n; ++i) {
            if (std::isnan(double(g[i]))) {
                throw ContractError("NaN gradient in parameter '" + params_[pi].name + "'");
            }
            v[i] = static_cast<T>(mu * v[i] + double(g[i]));
            w[i] = static_cast<T>(double(w[i]) - lr * double(v[i]) - lr * wd * double(w[i]));
        }
    }
}

template <typename T>
Ema<T>::Ema(const std::vector<model::NamedParam<T>>& params) {
    shadow_.reserve(params.size());
    for (const auto& p : params) shadow_.push_back({p.name, p.tensor.clone()});
}

template <typename T>
void Ema<T>::update(const std::vector<model::NamedParam<T>>& params, double decay) {
    if (params.size() != shadow_.size()) throw ShapeError("ema: parameter list size changed");
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& s = shadow_[i].tensor;
        const auto& p = params[i].tensor;
        if (s.shape() != p.shape()) {
            throw ShapeError("ema: shape mismatch for '" + shadow_[i].name + "': " +
                             shape_str(s.shape()) + " vs " + shape_str(p.shape()));
        }
        T* sd = s.data();
        const T* pd = p.data();
        for (i64 j = 0; j < s.numel(); ++j) {
            sd[j] = static_cast<T>(decay * double(sd[j]) + (1.0 - decay) * double(pd[j]));
        }
    }
}

template <typename T>
void Ema<T>::copy_to(std::vector<model::NamedParam<T>>& params) const {
    if (params.size() != shadow_.size()) throw ShapeError("ema: parameter list size changed");
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& p = params[i].tensor;
        const auto& s = shadow_[i].tensor;
        if (s.shape() != p.shape()) throw ShapeError("ema: shape mismatch for '" + shadow_[i].name + "'");
        std::copy(s.data(), s.data() + s.numel(), p.data());
    }
}

#define DEIT_INSTANTIATE_OPTIM(T)                                                   \
    template double global_grad_norm<T>(const std::vector<model::NamedParam<T>>&);  \
    template void clip_gradients<T>(std::vector<model::NamedParam<T>>&, double);    \
    template void zero_gradients<T>(std::vector<model::NamedParam<T>>&);            \
    template class AdamW<T>;                                                        \
    template class SgdMomentum<T>;                                                  \
    template class Ema<T>;

DEIT_INSTANTIATE_OPTIM(float)
DEIT_INSTANTIATE_OPTIM(double)

#undef DEIT_INSTANTIATE_OPTIM

}  // namespace deit::optim
