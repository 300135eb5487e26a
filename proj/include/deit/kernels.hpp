#pragma once

#include <cstdint>

// Hot data-parallel loops. Every kernel comes in two flavours: the default
// OpenMP-parallel entry point and a `*_serial` reference that runs the same
// per-element code without threading. The pair is bit-identical for any
// thread count because each output element is always reduced in the same
// order by exactly one thread; tests assert that, and tools/bench_kernels
// compares their throughput.

namespace deit::kernels {

using i64 = std::int64_t;

// c[m,n] = a[m,k] * b[k,n], row-major.
template <typename T>
void matmul_nn(const T* a, const T* b, T* c, i64 m, i64 k, i64 n);
template <typename T>
void matmul_nn_serial(const T* a, const T* b, T* c, i64 m, i64 k, i64 n);

// c[m,n] = a[m,k] * b[k,n] + bias[n]: the bias seeds the accumulator row, so
// the add costs nothing extra.
template <typename T>
void matmul_nn_bias(const T* a, const T* b, const T* bias, T* c, i64 m, i64 k, i64 n);

// out[j] += sum_r a[r,j] (column sums, the bias gradient).
template <typename T>
void col_sum_accum(const T* a, T* out, i64 rows, i64 cols);

// c[m,n] = a[m,k] * b[n,k]^T  (b stored row-major as [n,k]).
template <typename T>
void matmul_nt(const T* a, const T* b, T* c, i64 m, i64 k, i64 n);
template <typename T>
void matmul_nt_serial(const T* a, const T* b, T* c, i64 m, i64 k, i64 n);

// c[m,n] = a[k,m]^T * b[k,n]  (a stored row-major as [k,m]).
template <typename T>
void matmul_tn(const T* a, const T* b, T* c, i64 m, i64 k, i64 n);
template <typename T>
void matmul_tn_serial(const T* a, const T* b, T* c, i64 m, i64 k, i64 n);

// Accumulating variants (c += product) for the backward pass.
template <typename T>
void matmul_nt_accum(const T* a, const T* b, T* c, i64 m, i64 k, i64 n);
template <typename T>
void matmul_tn_accum(const T* a, const T* b, T* c, i64 m, i64 k, i64 n);

// Patch/window extraction: x[c,h,w] -> cols[out_h*out_w, c*kh*kw], one output
// row per window position in row-major scan order, channel-major within a row.
// Out-of-bounds taps (padding) read as zero.
template <typename T>
void im2col(const T* x, T* cols, i64 channels, i64 height, i64 width,
            i64 kernel, i64 stride, i64 pad);
template <typename T>
void im2col_serial(const T* x, T* cols, i64 channels, i64 height, i64 width,
                   i64 kernel, i64 stride, i64 pad);

// Scatter-add adjoint of im2col: accumulates into x (caller zeroes it).
template <typename T>
void col2im(const T* cols, T* x, i64 channels, i64 height, i64 width,
            i64 kernel, i64 stride, i64 pad);

// Row softmax with max subtraction, x/y: [rows, cols].
template <typename T>
void softmax_rows(const T* x, T* y, i64 rows, i64 cols);
template <typename T>
void softmax_rows_serial(const T* x, T* y, i64 rows, i64 cols);

// Row log-softmax (x - logsumexp), finite for any finite input.
template <typename T>
void log_softmax_rows(const T* x, T* y, i64 rows, i64 cols);
template <typename T>
void log_softmax_rows_serial(const T* x, T* y, i64 rows, i64 cols);

// Layer norm over the last axis with affine, eps inside the sqrt.
// Saves per-row mean and 1/std for the backward pass.
template <typename T>
void layernorm_rows(const T* x, const T* gamma, const T* beta, T* y,
                    T* mean, T* rstd, i64 rows, i64 cols, T eps);
template <typename T>
void layernorm_rows_serial(const T* x, const T* gamma, const T* beta, T* y,
                           T* mean, T* rstd, i64 rows, i64 cols, T eps);

// Erf-form GeLU and its derivative. The float overloads run on a
// vectorizable erf/exp pair accurate to ~1.5e-7; the double overloads use
// libm and back every 64-bit oracle.
float gelu_scalar(float x);
double gelu_scalar(double x);
float gelu_grad_scalar(float x);
double gelu_grad_scalar(double x);

template <typename T>
void gelu(const T* x, T* y, i64 n);
template <typename T>
void gelu_serial(const T* x, T* y, i64 n);

// dx[i] += gelu'(x[i]) * dy[i]
template <typename T>
void gelu_grad_accum(const T* x, const T* dy, T* dx, i64 n);

// dx_row += y_row (dy_row - <dy_row, y_row>), accumulated per row.
template <typename T>
void softmax_backward_accum(const T* y, const T* dy, T* dx, i64 rows, i64 cols);

// Accumulates dgamma/dbeta (when non-null) and dx (when non-null) for the
// layer-norm forward saved as (mean, rstd).
template <typename T>
void layernorm_backward_accum(const T* x, const T* gamma, const T* dy, const T* mean, const T* rstd,
                              T* dgamma, T* dbeta, T* dx, i64 rows, i64 cols);

}  // namespace deit::kernels
