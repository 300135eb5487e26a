#include "deit/kernels.hpp"

#include <malloc.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>

namespace deit::kernels {

namespace {

// Activation buffers run into multiple MB; raising the mmap threshold keeps
// glibc reusing arena memory instead of mapping and faulting fresh pages on
// every allocation.
struct MallocTuning {
    MallocTuning() {
        mallopt(M_MMAP_THRESHOLD, 512 * 1024 * 1024);
        mallopt(M_TRIM_THRESHOLD, 512 * 1024 * 1024);
    }
};
const MallocTuning g_malloc_tuning;

}  // namespace

namespace {

// One output row of matmul_nn: c_row[n] = seed + sum_k a_row[k] * b[k,n],
// k ascending. The seed is zero or the bias row; the j loop is the
// vectorizable one and the accumulation order per element is fixed.
template <typename T>
inline void seed_row(T* __restrict__ c_row, const T* __restrict__ bias, i64 n) {
    if (bias == nullptr) std::memset(c_row, 0, static_cast<std::size_t>(n) * sizeof(T));
    else std::memcpy(c_row, bias, static_cast<std::size_t>(n) * sizeof(T));
}

template <typename T>
inline void nn_row(const T* __restrict__ a_row, const T* __restrict__ b,
                   const T* __restrict__ bias, T* __restrict__ c_row, i64 k, i64 n) {
    seed_row(c_row, bias, n);
    for (i64 kk = 0; kk < k; ++kk) {
        const T av = a_row[kk];
        const T* __restrict__ b_row = b + kk * n;
#pragma omp simd
        for (i64 j = 0; j < n; ++j) {
            c_row[j] += av * b_row[j];
        }
    }
}

// Four output rows per sweep over b: one b-row load feeds four FMAs. The
// per-element accumulation order stays k-ascending, so results are
// bit-identical to nn_row.
template <typename T>
inline void nn_row4(const T* __restrict__ a, const T* __restrict__ b,
                    const T* __restrict__ bias, T* __restrict__ c, i64 i0, i64 k, i64 n) {
    T* __restrict__ c0 = c + (i0 + 0) * n;
    T* __restrict__ c1 = c + (i0 + 1) * n;
    T* __restrict__ c2 = c + (i0 + 2) * n;
    T* __restrict__ c3 = c + (i0 + 3) * n;
    seed_row(c0, bias, n);
    seed_row(c1, bias, n);
    seed_row(c2, bias, n);
    seed_row(c3, bias, n);
    const T* __restrict__ a0 = a + (i0 + 0) * k;
    const T* __restrict__ a1 = a + (i0 + 1) * k;
    const T* __restrict__ a2 = a + (i0 + 2) * k;
    const T* __restrict__ a3 = a + (i0 + 3) * k;
    for (i64 kk = 0; kk < k; ++kk) {
        const T v0 = a0[kk], v1 = a1[kk], v2 = a2[kk], v3 = a3[kk];
        const T* __restrict__ b_row = b + kk * n;
#pragma omp simd
        for (i64 j = 0; j < n; ++j) {
            const T bj = b_row[j];
            c0[j] += v0 * bj;
            c1[j] += v1 * bj;
            c2[j] += v2 * bj;
            c3[j] += v3 * bj;
        }
    }
}

template <typename T>
inline T dot(const T* __restrict__ x, const T* __restrict__ y, i64 k) {
    T acc = T(0);
#pragma omp simd reduction(+ : acc)
    for (i64 i = 0; i < k; ++i) acc += x[i] * y[i];
    return acc;
}

// c[i, j..j+3] in one pass over a_row.
template <typename T>
inline void dot4(const T* __restrict__ x, const T* __restrict__ b, i64 j0, i64 k, T* __restrict__ out) {
    const T* __restrict__ y0 = b + (j0 + 0) * k;
    const T* __restrict__ y1 = b + (j0 + 1) * k;
    const T* __restrict__ y2 = b + (j0 + 2) * k;
    const T* __restrict__ y3 = b + (j0 + 3) * k;
    T a0 = T(0), a1 = T(0), a2 = T(0), a3 = T(0);
#pragma omp simd reduction(+ : a0, a1, a2, a3)
    for (i64 i = 0; i < k; ++i) {
        const T xv = x[i];
        a0 += xv * y0[i];
        a1 += xv * y1[i];
        a2 += xv * y2[i];
        a3 += xv * y3[i];
    }
    out[0] = a0;
    out[1] = a1;
    out[2] = a2;
    out[3] = a3;
}

// exp(x) for float via exponent splitting and a degree-6 polynomial on the
// reduced range; ~2 ulp, branch-free, vectorizes under omp simd.
inline float fast_expf(float x) {
    x = std::min(88.0f, std::max(-87.0f, x));
    const float n = std::floor(x * 1.44269504088896341f + 0.5f);
    // two-part ln2 keeps the reduction exact
    float r = x - n * 0.693359375f;
    r -= n * -2.12194440e-4f;
    const float r2 = r * r;
    float p = 1.0f / 720.0f;
    p = p * r + 1.0f / 120.0f;
    p = p * r + 1.0f / 24.0f;
    p = p * r + 1.0f / 6.0f;
    p = p * r + 0.5f;
    const float res = p * r2 + r + 1.0f;
    const float scale = std::bit_cast<float>((static_cast<std::int32_t>(n) + 127) << 23);
    return res * scale;
}

inline float exp_eval(float x) { return fast_expf(x); }
inline double exp_eval(double x) { return std::exp(x); }

// erf via the Abramowitz-Stegun 7.1.26 rational form (max abs error 1.5e-7).
inline float erf_approx(float z) {
    const float az = std::fabs(z);
    const float t = 1.0f / (1.0f + 0.3275911f * az);
    float p = 1.061405429f;
    p = p * t - 1.453152027f;
    p = p * t + 1.421413741f;
    p = p * t - 0.284496736f;
    p = p * t + 0.254829592f;
    const float e = 1.0f - p * t * fast_expf(-az * az);
    return std::copysign(e, z);
}

template <typename T>
inline void softmax_row(const T* __restrict__ x, T* __restrict__ y, i64 cols) {
    T mx = x[0];
    for (i64 j = 1; j < cols; ++j) mx = std::max(mx, x[j]);
    T sum = T(0);
#pragma omp simd reduction(+ : sum)
    for (i64 j = 0; j < cols; ++j) {
        y[j] = exp_eval(x[j] - mx);
        sum += y[j];
    }
    const T inv = T(1) / sum;
    for (i64 j = 0; j < cols; ++j) y[j] *= inv;
}

// log softmax stays finite for any finite input: x - max - log(sum exp).
template <typename T>
inline void log_softmax_row(const T* __restrict__ x, T* __restrict__ y, i64 cols) {
    T mx = x[0];
    for (i64 j = 1; j < cols; ++j) mx = std::max(mx, x[j]);
    T sum = T(0);
#pragma omp simd reduction(+ : sum)
    for (i64 j = 0; j < cols; ++j) sum += exp_eval(x[j] - mx);
    const T lse = std::log(sum) + mx;
    for (i64 j = 0; j < cols; ++j) y[j] = x[j] - lse;
}

template <typename T>
inline void layernorm_row(const T* x, const T* gamma, const T* beta, T* y,
                          T* mean_out, T* rstd_out, i64 cols, T eps) {
    T mean = T(0);
    for (i64 j = 0; j < cols; ++j) mean += x[j];
    mean /= static_cast<T>(cols);
    T var = T(0);
    for (i64 j = 0; j < cols; ++j) {
        const T d = x[j] - mean;
        var += d * d;
    }
    var /= static_cast<T>(cols);
    const T rstd = T(1) / std::sqrt(var + eps);
    for (i64 j = 0; j < cols; ++j) {
        y[j] = (x[j] - mean) * rstd * gamma[j] + beta[j];
    }
    *mean_out = mean;
    *rstd_out = rstd;
}

// One window row of im2col. cols_row has channels*kernel*kernel entries.
template <typename T>
inline void im2col_row(const T* x, T* cols_row, i64 channels, i64 height, i64 width,
                       i64 kernel, i64 h0, i64 w0) {
    i64 out = 0;
    for (i64 c = 0; c < channels; ++c) {
        const T* plane = x + c * height * width;
        for (i64 kh = 0; kh < kernel; ++kh) {
            const i64 h = h0 + kh;
            for (i64 kw = 0; kw < kernel; ++kw) {
                const i64 w = w0 + kw;
                const bool in = (h >= 0 && h < height && w >= 0 && w < width);
                cols_row[out++] = in ? plane[h * width + w] : T(0);
            }
        }
    }
}

}  // namespace

// Row blocks are aligned to absolute index 0 in both the serial and parallel
// entry points, so every output element goes through the same code path and
// the two variants stay bit-identical.
template <typename T>
void matmul_nn(const T* a, const T* b, T* c, i64 m, i64 k, i64 n) {
    const i64 blocks = m / 4;
#pragma omp parallel for schedule(static) if (blocks > 1 && m * k * n > 16384)
    for (i64 bi = 0; bi < blocks; ++bi) {
        nn_row4<T>(a, b, nullptr, c, bi * 4, k, n);
    }
    for (i64 i = blocks * 4; i < m; ++i) {
        nn_row<T>(a + i * k, b, nullptr, c + i * n, k, n);
    }
}

template <typename T>
void matmul_nn_serial(const T* a, const T* b, T* c, i64 m, i64 k, i64 n) {
    const i64 blocks = m / 4;
    for (i64 bi = 0; bi < blocks; ++bi) {
        nn_row4<T>(a, b, nullptr, c, bi * 4, k, n);
    }
    for (i64 i = blocks * 4; i < m; ++i) {
        nn_row<T>(a + i * k, b, nullptr, c + i * n, k, n);
    }
}

template <typename T>
void matmul_nn_bias(const T* a, const T* b, const T* bias, T* c, i64 m, i64 k, i64 n) {
    const i64 blocks = m / 4;
#pragma omp parallel for schedule(static) if (blocks > 1 && m * k * n > 16384)
    for (i64 bi = 0; bi < blocks; ++bi) {
        nn_row4(a, b, bias, c, bi * 4, k, n);
    }
    for (i64 i = blocks * 4; i < m; ++i) {
        nn_row(a + i * k, b, bias, c + i * n, k, n);
    }
}

template <typename T>
void col_sum_accum(const T* __restrict__ a, T* __restrict__ out, i64 rows, i64 cols) {
    for (i64 r = 0; r < rows; ++r) {
        const T* __restrict__ row = a + r * cols;
#pragma omp simd
        for (i64 j = 0; j < cols; ++j) out[j] += row[j];
    }
}

namespace {

template <bool Accum, typename T>
inline void nt_row(const T* __restrict__ a_row, const T* __restrict__ b, T* __restrict__ c_row,
                   i64 k, i64 n) {
    const i64 jblocks = n / 4;
    T four[4];
    for (i64 jb = 0; jb < jblocks; ++jb) {
        dot4(a_row, b, jb * 4, k, four);
        if constexpr (Accum) {
            for (int t = 0; t < 4; ++t) c_row[jb * 4 + t] += four[t];
        } else {
            for (int t = 0; t < 4; ++t) c_row[jb * 4 + t] = four[t];
        }
    }
    for (i64 j = jblocks * 4; j < n; ++j) {
        if constexpr (Accum) c_row[j] += dot(a_row, b + j * k, k);
        else c_row[j] = dot(a_row, b + j * k, k);
    }
}

}  // namespace

template <typename T>
void matmul_nt(const T* a, const T* b, T* c, i64 m, i64 k, i64 n) {
#pragma omp parallel for schedule(static) if (m > 1 && m * k * n > 16384)
    for (i64 i = 0; i < m; ++i) {
        nt_row<false>(a + i * k, b, c + i * n, k, n);
    }
}

template <typename T>
void matmul_nt_serial(const T* a, const T* b, T* c, i64 m, i64 k, i64 n) {
    for (i64 i = 0; i < m; ++i) {
        nt_row<false>(a + i * k, b, c + i * n, k, n);
    }
}

template <typename T>
void matmul_nt_accum(const T* a, const T* b, T* c, i64 m, i64 k, i64 n) {
#pragma omp parallel for schedule(static) if (m > 1 && m * k * n > 16384)
    for (i64 i = 0; i < m; ++i) {
        nt_row<true>(a + i * k, b, c + i * n, k, n);
    }
}

namespace {

template <bool Accum, typename T>
inline void tn_row(const T* __restrict__ a, const T* __restrict__ b, T* __restrict__ c_row,
                   i64 i, i64 m, i64 k, i64 n) {
    if constexpr (!Accum) std::memset(c_row, 0, static_cast<std::size_t>(n) * sizeof(T));
    for (i64 kk = 0; kk < k; ++kk) {
        const T av = a[kk * m + i];
        const T* __restrict__ b_row = b + kk * n;
#pragma omp simd
        for (i64 j = 0; j < n; ++j) {
            c_row[j] += av * b_row[j];
        }
    }
}

// Four output rows per pass; av loads are strided but the b-row loads are
// shared, same per-element order as tn_row.
template <bool Accum, typename T>
inline void tn_row4(const T* __restrict__ a, const T* __restrict__ b, T* __restrict__ c,
                    i64 i0, i64 m, i64 k, i64 n) {
    T* __restrict__ c0 = c + (i0 + 0) * n;
    T* __restrict__ c1 = c + (i0 + 1) * n;
    T* __restrict__ c2 = c + (i0 + 2) * n;
    T* __restrict__ c3 = c + (i0 + 3) * n;
    if constexpr (!Accum) std::memset(c0, 0, static_cast<std::size_t>(4 * n) * sizeof(T));
    for (i64 kk = 0; kk < k; ++kk) {
        const T* __restrict__ a_col = a + kk * m + i0;
        const T v0 = a_col[0], v1 = a_col[1], v2 = a_col[2], v3 = a_col[3];
        const T* __restrict__ b_row = b + kk * n;
#pragma omp simd
        for (i64 j = 0; j < n; ++j) {
            const T bj = b_row[j];
            c0[j] += v0 * bj;
            c1[j] += v1 * bj;
            c2[j] += v2 * bj;
            c3[j] += v3 * bj;
        }
    }
}

}  // namespace

template <typename T>
void matmul_tn(const T* a, const T* b, T* c, i64 m, i64 k, i64 n) {
    const i64 blocks = m / 4;
#pragma omp parallel for schedule(static) if (blocks > 1 && m * k * n > 16384)
    for (i64 bi = 0; bi < blocks; ++bi) {
        tn_row4<false>(a, b, c, bi * 4, m, k, n);
    }
    for (i64 i = blocks * 4; i < m; ++i) {
        tn_row<false>(a, b, c + i * n, i, m, k, n);
    }
}

template <typename T>
void matmul_tn_serial(const T* a, const T* b, T* c, i64 m, i64 k, i64 n) {
    const i64 blocks = m / 4;
    for (i64 bi = 0; bi < blocks; ++bi) {
        tn_row4<false>(a, b, c, bi * 4, m, k, n);
    }
    for (i64 i = blocks * 4; i < m; ++i) {
        tn_row<false>(a, b, c + i * n, i, m, k, n);
    }
}

template <typename T>
void matmul_tn_accum(const T* a, const T* b, T* c, i64 m, i64 k, i64 n) {
    const i64 blocks = m / 4;
#pragma omp parallel for schedule(static) if (blocks > 1 && m * k * n > 16384)
    for (i64 bi = 0; bi < blocks; ++bi) {
        tn_row4<true>(a, b, c, bi * 4, m, k, n);
    }
    for (i64 i = blocks * 4; i < m; ++i) {
        tn_row<true>(a, b, c + i * n, i, m, k, n);
    }
}

template <typename T>
void im2col(const T* x, T* cols, i64 channels, i64 height, i64 width,
            i64 kernel, i64 stride, i64 pad) {
    const i64 out_h = (height + 2 * pad - kernel) / stride + 1;
    const i64 out_w = (width + 2 * pad - kernel) / stride + 1;
    const i64 row_len = channels * kernel * kernel;
#pragma omp parallel for schedule(static) if (out_h * out_w > 64)
    for (i64 r = 0; r < out_h * out_w; ++r) {
        const i64 h0 = (r / out_w) * stride - pad;
        const i64 w0 = (r % out_w) * stride - pad;
        im2col_row(x, cols + r * row_len, channels, height, width, kernel, h0, w0);
    }
}

template <typename T>
void im2col_serial(const T* x, T* cols, i64 channels, i64 height, i64 width,
                   i64 kernel, i64 stride, i64 pad) {
    const i64 out_h = (height + 2 * pad - kernel) / stride + 1;
    const i64 out_w = (width + 2 * pad - kernel) / stride + 1;
    const i64 row_len = channels * kernel * kernel;
    for (i64 r = 0; r < out_h * out_w; ++r) {
        const i64 h0 = (r / out_w) * stride - pad;
        const i64 w0 = (r % out_w) * stride - pad;
        im2col_row(x, cols + r * row_len, channels, height, width, kernel, h0, w0);
    }
}

// Scatter side stays serial per image: windows overlap, so parallelizing the
// row loop would race on x.
template <typename T>
void col2im(const T* cols, T* x, i64 channels, i64 height, i64 width,
            i64 kernel, i64 stride, i64 pad) {
    const i64 out_h = (height + 2 * pad - kernel) / stride + 1;
    const i64 out_w = (width + 2 * pad - kernel) / stride + 1;
    const i64 row_len = channels * kernel * kernel;
    for (i64 r = 0; r < out_h * out_w; ++r) {
        const i64 h0 = (r / out_w) * stride - pad;
        const i64 w0 = (r % out_w) * stride - pad;
        const T* row = cols + r * row_len;
        i64 in = 0;
        for (i64 c = 0; c < channels; ++c) {
            T* plane = x + c * height * width;
            for (i64 kh = 0; kh < kernel; ++kh) {
                const i64 h = h0 + kh;
                for (i64 kw = 0; kw < kernel; ++kw) {
                    const i64 w = w0 + kw;
                    if (h >= 0 && h < height && w >= 0 && w < width) {
                        plane[h * width + w] += row[in];
                    }
                    ++in;
                }
            }
        }
    }
}

template <typename T>
void softmax_rows(const T* x, T* y, i64 rows, i64 cols) {
#pragma omp parallel for schedule(static) if (rows > 8)
    for (i64 r = 0; r < rows; ++r) {
        softmax_row(x + r * cols, y + r * cols, cols);
    }
}

template <typename T>
void softmax_rows_serial(const T* x, T* y, i64 rows, i64 cols) {
    for (i64 r = 0; r < rows; ++r) {
        softmax_row(x + r * cols, y + r * cols, cols);
    }
}

template <typename T>
void log_softmax_rows(const T* x, T* y, i64 rows, i64 cols) {
#pragma omp parallel for schedule(static) if (rows > 8)
    for (i64 r = 0; r < rows; ++r) {
        log_softmax_row(x + r * cols, y + r * cols, cols);
    }
}

template <typename T>
void log_softmax_rows_serial(const T* x, T* y, i64 rows, i64 cols) {
    for (i64 r = 0; r < rows; ++r) {
        log_softmax_row(x + r * cols, y + r * cols, cols);
    }
}

template <typename T>
void layernorm_rows(const T* x, const T* gamma, const T* beta, T* y,
                    T* mean, T* rstd, i64 rows, i64 cols, T eps) {
#pragma omp parallel for schedule(static) if (rows > 8)
    for (i64 r = 0; r < rows; ++r) {
        layernorm_row(x + r * cols, gamma, beta, y + r * cols, mean + r, rstd + r, cols, eps);
    }
}

template <typename T>
void layernorm_rows_serial(const T* x, const T* gamma, const T* beta, T* y,
                           T* mean, T* rstd, i64 rows, i64 cols, T eps) {
    for (i64 r = 0; r < rows; ++r) {
        layernorm_row(x + r * cols, gamma, beta, y + r * cols, mean + r, rstd + r, cols, eps);
    }
}

float gelu_scalar(float x) {
    return 0.5f * x * (1.0f + erf_approx(x * 0.70710678118654752f));
}

double gelu_scalar(double x) {
    return 0.5 * x * (1.0 + std::erf(x * 0.7071067811865475244));
}

float gelu_grad_scalar(float x) {
    const float cdf = 0.5f * (1.0f + erf_approx(x * 0.70710678118654752f));
    const float pdf = fast_expf(-0.5f * x * x) * 0.39894228040143268f;
    return cdf + x * pdf;
}

double gelu_grad_scalar(double x) {
    const double cdf = 0.5 * (1.0 + std::erf(x * 0.7071067811865475244));
    const double pdf = std::exp(-0.5 * x * x) * 0.3989422804014326779;
    return cdf + x * pdf;
}

template <typename T>
void gelu(const T* x, T* y, i64 n) {
#pragma omp parallel for simd schedule(static) if (n > 16384)
    for (i64 i = 0; i < n; ++i) {
        y[i] = gelu_scalar(x[i]);
    }
}

template <typename T>
void gelu_serial(const T* x, T* y, i64 n) {
#pragma omp simd
    for (i64 i = 0; i < n; ++i) {
        y[i] = gelu_scalar(x[i]);
    }
}

template <typename T>
void gelu_grad_accum(const T* __restrict__ x, const T* __restrict__ dy, T* __restrict__ dx, i64 n) {
#pragma omp simd
    for (i64 i = 0; i < n; ++i) {
        dx[i] += gelu_grad_scalar(x[i]) * dy[i];
    }
}

template <typename T>
void softmax_backward_accum(const T* __restrict__ y, const T* __restrict__ dy, T* __restrict__ dx,
                            i64 rows, i64 cols) {
#pragma omp parallel for schedule(static) if (rows > 64)
    for (i64 r = 0; r < rows; ++r) {
        const T* __restrict__ yr = y + r * cols;
        const T* __restrict__ gr = dy + r * cols;
        T* __restrict__ dr = dx + r * cols;
        T dot_ = T(0);
#pragma omp simd reduction(+ : dot_)
        for (i64 j = 0; j < cols; ++j) dot_ += yr[j] * gr[j];
#pragma omp simd
        for (i64 j = 0; j < cols; ++j) dr[j] += yr[j] * (gr[j] - dot_);
    }
}

template <typename T>
void layernorm_backward_accum(const T* __restrict__ x, const T* __restrict__ gamma,
                              const T* __restrict__ dy, const T* __restrict__ mean,
                              const T* __restrict__ rstd, T* __restrict__ dgamma,
                              T* __restrict__ dbeta, T* __restrict__ dx, i64 rows, i64 cols) {
    const T inv_n = T(1) / static_cast<T>(cols);
    for (i64 r = 0; r < rows; ++r) {
        const T mu = mean[r], rs = rstd[r];
        const T* __restrict__ xr = x + r * cols;
        const T* __restrict__ gr = dy + r * cols;
        if (dgamma != nullptr) {
#pragma omp simd
            for (i64 j = 0; j < cols; ++j) dgamma[j] += gr[j] * (xr[j] - mu) * rs;
        }
        if (dbeta != nullptr) {
#pragma omp simd
            for (i64 j = 0; j < cols; ++j) dbeta[j] += gr[j];
        }
        if (dx != nullptr) {
            T sum_h = T(0), sum_hx = T(0);
#pragma omp simd reduction(+ : sum_h, sum_hx)
            for (i64 j = 0; j < cols; ++j) {
                const T h = gr[j] * gamma[j];
                sum_h += h;
                sum_hx += h * (xr[j] - mu) * rs;
            }
            T* __restrict__ dr = dx + r * cols;
#pragma omp simd
            for (i64 j = 0; j < cols; ++j) {
                const T h = gr[j] * gamma[j];
                const T xhat = (xr[j] - mu) * rs;
                dr[j] += rs * (h - inv_n * sum_h - xhat * inv_n * sum_hx);
            }
        }
    }
}

#define DEIT_INSTANTIATE_KERNELS(T)                                                              \
    template void matmul_nn<T>(const T*, const T*, T*, i64, i64, i64);                           \
    template void matmul_nn_serial<T>(const T*, const T*, T*, i64, i64, i64);                    \
    template void matmul_nn_bias<T>(const T*, const T*, const T*, T*, i64, i64, i64);            \
    template void col_sum_accum<T>(const T*, T*, i64, i64);                                      \
    template void matmul_nt<T>(const T*, const T*, T*, i64, i64, i64);                           \
    template void matmul_nt_serial<T>(const T*, const T*, T*, i64, i64, i64);                    \
    template void matmul_nt_accum<T>(const T*, const T*, T*, i64, i64, i64);                     \
    template void matmul_tn<T>(const T*, const T*, T*, i64, i64, i64);                           \
    template void matmul_tn_serial<T>(const T*, const T*, T*, i64, i64, i64);                    \
    template void matmul_tn_accum<T>(const T*, const T*, T*, i64, i64, i64);                     \
    template void im2col<T>(const T*, T*, i64, i64, i64, i64, i64, i64);                         \
    template void im2col_serial<T>(const T*, T*, i64, i64, i64, i64, i64, i64);                  \
    template void col2im<T>(const T*, T*, i64, i64, i64, i64, i64, i64);                         \
    template void softmax_rows<T>(const T*, T*, i64, i64);                                       \
    template void softmax_rows_serial<T>(const T*, T*, i64, i64);                                \
    template void log_softmax_rows<T>(const T*, T*, i64, i64);                                   \
    template void log_softmax_rows_serial<T>(const T*, T*, i64, i64);                            \
    template void layernorm_rows<T>(const T*, const T*, const T*, T*, T*, T*, i64, i64, T);      \
    template void layernorm_rows_serial<T>(const T*, const T*, const T*, T*, T*, T*, i64, i64, T); \
    template void gelu<T>(const T*, T*, i64);                                                    \
    template void gelu_serial<T>(const T*, T*, i64);                                             \
    template void gelu_grad_accum<T>(const T*, const T*, T*, i64);                               \
    template void softmax_backward_accum<T>(const T*, const T*, T*, i64, i64);                   \
    template void layernorm_backward_accum<T>(const T*, const T*, const T*, const T*, const T*,  \
                                              T*, T*, T*, i64, i64);

DEIT_INSTANTIATE_KERNELS(float)
DEIT_INSTANTIATE_KERNELS(double)

#undef DEIT_INSTANTIATE_KERNELS

}  // namespace deit::kernels
