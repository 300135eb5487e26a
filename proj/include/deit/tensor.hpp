#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "deit/error.hpp"
#include "deit/rng.hpp"

namespace deit {

using i64 = std::int64_t;

namespace detail {

// std::allocator whose default-construct is a no-op for trivial types, so
// vector::resize skips the zero fill when the caller overwrites everything.
template <typename T>
struct UninitAlloc : std::allocator<T> {
    template <typename U>
    struct rebind {
        using other = UninitAlloc<U>;
    };
    template <typename U>
    void construct(U* p) noexcept(std::is_nothrow_default_constructible_v<U>) {
        ::new (static_cast<void*>(p)) U;
    }
    template <typename U, typename... Args>
    void construct(U* p, Args&&... args) {
        ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
    }
};

}  // namespace detail

template <typename T>
using Buffer = std::vector<T, detail::UninitAlloc<T>>;

inline i64 shape_numel(const std::vector<i64>& shape) {
    i64 n = 1;
    for (i64 d : shape) n *= d;
    return n;
}

inline std::string shape_str(const std::vector<i64>& shape) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ",";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

// Dense row-major tensor. Copying a Tensor copies the handle, not the buffer;
// clone() copies the buffer. A tensor whose requires_grad flag is set owns a
// same-shape grad buffer that primitives accumulate into during backward.
// reshape_view() produces a different-shape tensor over the same value and
// grad buffers, so reshapes cost nothing in either pass.
template <typename T>
class Tensor {
public:
    Tensor() : s_(std::make_shared<Storage>()) {}

    explicit Tensor(std::vector<i64> shape) : s_(std::make_shared<Storage>()) {
        s_->shape = std::move(shape);
        s_->values->assign(static_cast<std::size_t>(shape_numel(s_->shape)), T(0));
    }

    // Skips the zero fill; every element must be written before being read.
    static Tensor uninit(std::vector<i64> shape) {
        Tensor t;
        t.s_->shape = std::move(shape);
        t.s_->values->resize(static_cast<std::size_t>(shape_numel(t.s_->shape)));
        return t;
    }

    static Tensor zeros(std::vector<i64> shape) { return Tensor(std::move(shape)); }

    static Tensor full(std::vector<i64> shape, T value) {
        Tensor t = uninit(std::move(shape));
        std::fill(t.data(), t.data() + t.numel(), value);
        return t;
    }

    static Tensor from_data(std::vector<i64> shape, const std::vector<T>& values) {
        if (shape_numel(shape) != static_cast<i64>(values.size())) {
            throw ShapeError("from_data: shape " + shape_str(shape) + " does not match " +
                             std::to_string(values.size()) + " values");
        }
        Tensor t;
        t.s_->shape = std::move(shape);
        t.s_->values->assign(values.begin(), values.end());
        return t;
    }

    static Tensor from_buffer(std::vector<i64> shape, Buffer<T> values) {
        if (shape_numel(shape) != static_cast<i64>(values.size())) {
            throw ShapeError("from_buffer: shape " + shape_str(shape) + " does not match " +
                             std::to_string(values.size()) + " values");
        }
        Tensor t;
        t.s_->shape = std::move(shape);
        *t.s_->values = std::move(values);
        return t;
    }

    // Shares value and grad buffers under a new shape (same numel).
    Tensor reshape_view(std::vector<i64> new_shape) const {
        if (shape_numel(new_shape) != numel()) {
            throw ShapeError("reshape: cannot view " + shape_str(shape()) + " as " + shape_str(new_shape));
        }
        Tensor t;
        t.s_->shape = std::move(new_shape);
        t.s_->values = s_->values;
        t.s_->grad = s_->grad;
        t.s_->requires_grad = s_->requires_grad;
        return t;
    }

    const std::vector<i64>& shape() const { return s_->shape; }
    std::size_t ndim() const { return s_->shape.size(); }
    i64 dim(std::size_t i) const { return s_->shape[i]; }
    i64 numel() const { return static_cast<i64>(s_->values->size()); }
    bool defined() const { return !s_->shape.empty() || !s_->values->empty(); }

    T* data() { return s_->values->data(); }
    const T* data() const { return s_->values->data(); }
    Buffer<T>& values() { return *s_->values; }
    const Buffer<T>& values() const { return *s_->values; }

    T& operator[](i64 i) { return (*s_->values)[static_cast<std::size_t>(i)]; }
    const T& operator[](i64 i) const { return (*s_->values)[static_cast<std::size_t>(i)]; }

    T item() const {
        if (numel() != 1) throw ContractError("item() requires a scalar tensor, shape is " + shape_str(shape()));
        return (*s_->values)[0];
    }

    bool requires_grad() const { return s_->requires_grad; }

    // Marks participation in the autodiff graph. Grad buffers are allocated
    // lazily on first accumulation, so branches no gradient reaches stay free.
    Tensor& set_requires_grad(bool flag) {
        s_->requires_grad = flag;
        if (!flag) s_->grad->clear();
        return *this;
    }

    bool has_grad() const { return !s_->grad->empty(); }

    T* grad() { return s_->grad->data(); }
    const T* grad() const { return s_->grad->data(); }
    Buffer<T>& grad_values() { return *s_->grad; }

    void ensure_grad() {
        if (s_->grad->size() != s_->values->size()) s_->grad->assign(s_->values->size(), T(0));
    }

    void zero_grad() {
        if (!s_->grad->empty()) std::fill(s_->grad->begin(), s_->grad->end(), T(0));
    }

    void accumulate_grad(const T* g) {
        ensure_grad();
        T* dst = s_->grad->data();
        const std::size_t n = s_->grad->size();
        for (std::size_t i = 0; i < n; ++i) dst[i] += g[i];
    }

    Tensor clone() const {
        Tensor t;
        t.s_->shape = s_->shape;
        *t.s_->values = *s_->values;
        return t;
    }

    // Same storage identity (shared handle) check.
    bool same_storage(const Tensor& other) const { return s_ == other.s_; }

private:
    struct Storage {
        std::vector<i64> shape;
        std::shared_ptr<Buffer<T>> values = std::make_shared<Buffer<T>>();
        std::shared_ptr<Buffer<T>> grad = std::make_shared<Buffer<T>>();
        bool requires_grad = false;
    };
    std::shared_ptr<Storage> s_;
};

// Ordered record of primitive applications. Nodes are appended in execution
// order, which is a topological order by construction; backward walks the
// record once in reverse. A tape is owned by a single training step.
template <typename T>
class Tape {
public:
    void record(std::function<void()> backward_fn) {
        nodes_.push_back(std::move(backward_fn));
    }

    std::size_t size() const { return nodes_.size(); }
    void clear() { nodes_.clear(); }

    void backward(Tensor<T> loss) {
        if (loss.numel() != 1) {
            throw ContractError("backward requires a scalar loss, shape is " + shape_str(loss.shape()));
        }
        if (nodes_.empty()) {
            throw ContractError("backward on an empty tape: loss is detached from any recorded primitive");
        }
        if (!loss.requires_grad()) {
            throw ContractError("backward: loss does not participate in the recorded graph");
        }
        loss.ensure_grad();
        loss.grad()[0] += T(1);
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
            (*it)();
        }
    }

private:
    std::vector<std::function<void()>> nodes_;
};

// Normal(0, std^2) restricted to [-cutoff*std, +cutoff*std] by rejection.
template <typename T>
Tensor<T> init_truncated_normal(std::vector<i64> shape, double std_dev, double cutoff, Rng& rng) {
    if (!(std_dev > 0.0)) throw ParamError("init_truncated_normal: std must be > 0");
    if (!(cutoff > 0.0)) throw ParamError("init_truncated_normal: cutoff must be > 0");
    Tensor<T> t(std::move(shape));
    T* p = t.data();
    const i64 n = t.numel();
    for (i64 i = 0; i < n; ++i) {
        double z;
        do {
            z = rng.normal();
        } while (z < -cutoff || z > cutoff);
        p[i] = static_cast<T>(z * std_dev);
    }
    return t;
}

}  // namespace deit
