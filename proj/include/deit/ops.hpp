#pragma once

#include <vector>

#include "deit/tensor.hpp"

// Differentiable primitive set. Each op validates shapes, runs the forward
// kernel, and, when a tape is supplied and any input participates in the
// graph, records a backward node. Passing tape == nullptr gives a pure
// inference evaluation that allocates no gradient state.

namespace deit::ops {

inline constexpr double kLayerNormEps = 1e-6;

// a: [M,K] or [B,M,K]; b: [K,N] (shared) or [B,K,N] (batched).
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, Tape<T>* tape);

// Fused affine map y = x w + bias over the last axis; x: [..., K], w: [K,N],
// bias: [N]. One kernel pass forward, dedicated column-sum bias gradient.
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias, Tape<T>* tape);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b, Tape<T>* tape);
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b, Tape<T>* tape);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b, Tape<T>* tape);

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor, Tape<T>* tape);

template <typename T>
Tensor<T> transpose(const Tensor<T>& a, std::size_t axis0, std::size_t axis1, Tape<T>* tape);

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, std::vector<i64> new_shape, Tape<T>* tape);

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis, Tape<T>* tape);

template <typename T>
Tensor<T> slice(const Tensor<T>& a, std::size_t axis, i64 start, i64 len, Tape<T>* tape);

template <typename T>
Tensor<T> broadcast_to(const Tensor<T>& a, std::vector<i64> shape, Tape<T>* tape);

// Softmax over the last axis, max-subtracted.
template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& a, Tape<T>* tape);

// Log-softmax over the last axis; the stable route for cross-entropy-style
// losses (log of a softmax underflows to -inf on confident logits).
template <typename T>
Tensor<T> log_softmax_rows(const Tensor<T>& a, Tape<T>* tape);

// Layer norm over the last axis with affine gamma/beta.
template <typename T>
Tensor<T> layernorm(const Tensor<T>& a, const Tensor<T>& gamma, const Tensor<T>& beta, Tape<T>* tape);

// Exact erf-form GeLU.
template <typename T>
Tensor<T> gelu(const Tensor<T>& a, Tape<T>* tape);

template <typename T>
Tensor<T> log(const Tensor<T>& a, Tape<T>* tape);
template <typename T>
Tensor<T> exp(const Tensor<T>& a, Tape<T>* tape);

// Reductions over all elements, result shape [1].
template <typename T>
Tensor<T> reduce_sum(const Tensor<T>& a, Tape<T>* tape);
template <typename T>
Tensor<T> reduce_mean(const Tensor<T>& a, Tape<T>* tape);

// x: [B,C,H,W] -> [B, out_h*out_w, C*kernel*kernel].
template <typename T>
Tensor<T> im2col(const Tensor<T>& x, i64 kernel, i64 stride, i64 pad, Tape<T>* tape);

}  // namespace deit::ops
