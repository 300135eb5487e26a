#include "deit/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "deit/kernels.hpp"

namespace deit::ops {

namespace {

template <typename T>
bool track(Tape<T>* tape, const Tensor<T>& a) {
    return tape != nullptr && a.requires_grad();
}

template <typename T>
bool track(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
    return tape != nullptr && (a.requires_grad() || b.requires_grad());
}

// Broadcast bookkeeping: shapes are left-padded with 1s to a common rank,
// per-axis element strides are 0 on broadcast axes.
struct Bcast {
    std::vector<i64> out_shape;
    std::vector<i64> a_stride;
    std::vector<i64> b_stride;
};

inline std::vector<i64> contiguous_strides(const std::vector<i64>& shape) {
    std::vector<i64> s(shape.size(), 1);
    for (i64 i = static_cast<i64>(shape.size()) - 2; i >= 0; --i) {
        s[static_cast<std::size_t>(i)] = s[static_cast<std::size_t>(i) + 1] * shape[static_cast<std::size_t>(i) + 1];
    }
    return s;
}

inline Bcast make_bcast(const std::vector<i64>& a, const std::vector<i64>& b, const char* op) {
    const std::size_t nd = std::max(a.size(), b.size());
    std::vector<i64> ap(nd, 1), bp(nd, 1);
    std::copy(a.begin(), a.end(), ap.begin() + (nd - a.size()));
    std::copy(b.begin(), b.end(), bp.begin() + (nd - b.size()));

    Bcast bc;
    bc.out_shape.resize(nd);
    for (std::size_t i = 0; i < nd; ++i) {
        if (ap[i] == bp[i]) bc.out_shape[i] = ap[i];
        else if (ap[i] == 1) bc.out_shape[i] = bp[i];
        else if (bp[i] == 1) bc.out_shape[i] = ap[i];
        else
            throw ShapeError(std::string(op) + ": shapes " + shape_str(a) + " and " + shape_str(b) +
                             " do not broadcast");
    }
    const auto as = contiguous_strides(ap);
    const auto bs = contiguous_strides(bp);
    bc.a_stride.resize(nd);
    bc.b_stride.resize(nd);
    for (std::size_t i = 0; i < nd; ++i) {
        bc.a_stride[i] = (ap[i] == 1 && bc.out_shape[i] != 1) ? 0 : as[i];
        bc.b_stride[i] = (bp[i] == 1 && bc.out_shape[i] != 1) ? 0 : bs[i];
    }
    return bc;
}

// Walks the output row-major; Row(a_base, b_base, y_row, inner, as, bs) is
// called once per innermost run with the two base offsets.
template <typename Row>
void bcast_rows(const Bcast& bc, Row row_fn) {
    const std::size_t nd = bc.out_shape.size();
    const i64 inner = bc.out_shape[nd - 1];
    const i64 as_last = bc.a_stride[nd - 1];
    const i64 bs_last = bc.b_stride[nd - 1];
    i64 rows = 1;
    for (std::size_t i = 0; i + 1 < nd; ++i) rows *= bc.out_shape[i];

    std::vector<i64> idx(nd > 0 ? nd - 1 : 0, 0);
    for (i64 r = 0; r < rows; ++r) {
        i64 a_base = 0, b_base = 0;
        for (std::size_t d = 0; d + 1 < nd; ++d) {
            a_base += idx[d] * bc.a_stride[d];
            b_base += idx[d] * bc.b_stride[d];
        }
        row_fn(r * inner, a_base, b_base, inner, as_last, bs_last);
        for (i64 d = static_cast<i64>(idx.size()) - 1; d >= 0; --d) {
            if (++idx[static_cast<std::size_t>(d)] < bc.out_shape[static_cast<std::size_t>(d)]) break;
            idx[static_cast<std::size_t>(d)] = 0;
        }
    }
}

enum class BinKind { Add, Sub, Mul };

// Same-shape pairs skip the broadcast bookkeeping entirely.
template <typename T>
Tensor<T> binary_op_same(const Tensor<T>& a, const Tensor<T>& b, Tape<T>* tape, BinKind kind) {
    Tensor<T> out = Tensor<T>::uninit(a.shape());
    const T* __restrict__ pa = a.data();
    const T* __restrict__ pb = b.data();
    T* __restrict__ py = out.data();
    const i64 n = a.numel();
    if (kind == BinKind::Add)
        for (i64 i = 0; i < n; ++i) py[i] = pa[i] + pb[i];
    else if (kind == BinKind::Sub)
        for (i64 i = 0; i < n; ++i) py[i] = pa[i] - pb[i];
    else
        for (i64 i = 0; i < n; ++i) py[i] = pa[i] * pb[i];

    if (track(tape, a, b)) {
        out.set_requires_grad(true);
        Tensor<T> ac = a, bc = b, oc = out;
        tape->record([ac, bc, oc, kind]() mutable {
            if (!oc.has_grad()) return;
            const T* dy = oc.grad();
            const i64 nn = oc.numel();
            if (ac.requires_grad()) {
                ac.ensure_grad();
                T* __restrict__ da = ac.grad();
                if (kind == BinKind::Mul) {
                    const T* pb2 = bc.data();
                    for (i64 i = 0; i < nn; ++i) da[i] += dy[i] * pb2[i];
                } else {
                    for (i64 i = 0; i < nn; ++i) da[i] += dy[i];
                }
            }
            if (bc.requires_grad()) {
                bc.ensure_grad();
                T* __restrict__ db = bc.grad();
                if (kind == BinKind::Mul) {
                    const T* pa2 = ac.data();
                    for (i64 i = 0; i < nn; ++i) db[i] += dy[i] * pa2[i];
                } else if (kind == BinKind::Sub) {
                    for (i64 i = 0; i < nn; ++i) db[i] -= dy[i];
                } else {
                    for (i64 i = 0; i < nn; ++i) db[i] += dy[i];
                }
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> binary_op(const Tensor<T>& a, const Tensor<T>& b, Tape<T>* tape, BinKind kind, const char* name) {
    if (a.shape() == b.shape()) return binary_op_same(a, b, tape, kind);
    const Bcast bc = make_bcast(a.shape(), b.shape(), name);
    Tensor<T> out = Tensor<T>::uninit(bc.out_shape);
    const T* pa = a.data();
    const T* pb = b.data();
    T* py = out.data();

    bcast_rows(bc, [&](i64 y0, i64 a0, i64 b0, i64 inner, i64 as, i64 bs) {
        if (kind == BinKind::Add) {
            if (as == 1 && bs == 1)
                for (i64 i = 0; i < inner; ++i) py[y0 + i] = pa[a0 + i] + pb[b0 + i];
            else if (as == 1 && bs == 0)
                for (i64 i = 0; i < inner; ++i) py[y0 + i] = pa[a0 + i] + pb[b0];
            else
                for (i64 i = 0; i < inner; ++i) py[y0 + i] = pa[a0 + i * as] + pb[b0 + i * bs];
        } else if (kind == BinKind::Sub) {
            if (as == 1 && bs == 1)
                for (i64 i = 0; i < inner; ++i) py[y0 + i] = pa[a0 + i] - pb[b0 + i];
            else if (as == 1 && bs == 0)
                for (i64 i = 0; i < inner; ++i) py[y0 + i] = pa[a0 + i] - pb[b0];
            else
                for (i64 i = 0; i < inner; ++i) py[y0 + i] = pa[a0 + i * as] - pb[b0 + i * bs];
        } else {
            if (as == 1 && bs == 1)
                for (i64 i = 0; i < inner; ++i) py[y0 + i] = pa[a0 + i] * pb[b0 + i];
            else if (as == 1 && bs == 0)
                for (i64 i = 0; i < inner; ++i) py[y0 + i] = pa[a0 + i] * pb[b0];
            else
                for (i64 i = 0; i < inner; ++i) py[y0 + i] = pa[a0 + i * as] * pb[b0 + i * bs];
        }
    });

    if (track(tape, a, b)) {
        out.set_requires_grad(true);
        Tensor<T> ac = a, bc_t = b, oc = out;
        tape->record([ac, bc_t, oc, bc, kind]() mutable {
            if (!oc.has_grad()) return;
            const T* dy = oc.grad();
            if (ac.requires_grad()) {
                ac.ensure_grad();
                T* da = ac.grad();
                const T* pb2 = bc_t.data();
                bcast_rows(bc, [&](i64 y0, i64 a0, i64 b0, i64 inner, i64 as, i64 bs) {
                    if (kind != BinKind::Mul && as == 1) {
                        for (i64 i = 0; i < inner; ++i) da[a0 + i] += dy[y0 + i];
                    } else if (kind == BinKind::Mul && as == 1 && bs == 1) {
                        for (i64 i = 0; i < inner; ++i) da[a0 + i] += dy[y0 + i] * pb2[b0 + i];
                    } else if (kind == BinKind::Mul && as == 1 && bs == 0) {
                        const T bv = pb2[b0];
                        for (i64 i = 0; i < inner; ++i) da[a0 + i] += dy[y0 + i] * bv;
                    } else {
                        for (i64 i = 0; i < inner; ++i) {
                            const T g = dy[y0 + i];
                            da[a0 + i * as] += (kind == BinKind::Mul) ? g * pb2[b0 + i * bs] : g;
                        }
                    }
                });
            }
            if (bc_t.requires_grad()) {
                bc_t.ensure_grad();
                T* db = bc_t.grad();
                const T* pa2 = ac.data();
                bcast_rows(bc, [&](i64 y0, i64 a0, i64 b0, i64 inner, i64 as, i64 bs) {
                    if (kind == BinKind::Add && bs == 1) {
                        for (i64 i = 0; i < inner; ++i) db[b0 + i] += dy[y0 + i];
                    } else if (kind == BinKind::Sub && bs == 1) {
                        for (i64 i = 0; i < inner; ++i) db[b0 + i] -= dy[y0 + i];
                    } else if (kind == BinKind::Mul && bs == 1 && as == 1) {
                        for (i64 i = 0; i < inner; ++i) db[b0 + i] += dy[y0 + i] * pa2[a0 + i];
                    } else {
                        for (i64 i = 0; i < inner; ++i) {
                            const T g = dy[y0 + i];
                            if (kind == BinKind::Mul) db[b0 + i * bs] += g * pa2[a0 + i * as];
                            else if (kind == BinKind::Sub) db[b0 + i * bs] -= g;
                            else db[b0 + i * bs] += g;
                        }
                    }
                });
            }
        });
    }
    return out;
}

}  // namespace

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, Tape<T>* tape) {
    const auto& sa = a.shape();
    const auto& sb = b.shape();
    const bool a3 = sa.size() == 3;
    const bool b3 = sb.size() == 3;
    if ((sa.size() != 2 && !a3) || (sb.size() != 2 && !b3) || (b3 && !a3)) {
        throw ShapeError("matmul: unsupported ranks for " + shape_str(sa) + " x " + shape_str(sb));
    }
    const i64 k = sa.back();
    const i64 kb = b3 ? sb[1] : sb[0];
    if (k != kb || (a3 && b3 && sa[0] != sb[0])) {
        throw ShapeError("matmul: shapes " + shape_str(sa) + " and " + shape_str(sb) + " do not conform");
    }
    const i64 m = sa[sa.size() - 2];
    const i64 n = b3 ? sb[2] : sb[1];
    const i64 batch = a3 ? sa[0] : 1;

    std::vector<i64> out_shape = a3 ? std::vector<i64>{batch, m, n} : std::vector<i64>{m, n};
    Tensor<T> out = Tensor<T>::uninit(std::move(out_shape));

    if (!b3) {
        // [B,M,K] x [K,N] collapses to one 2D product over B*M rows.
        kernels::matmul_nn(a.data(), b.data(), out.data(), batch * m, k, n);
    } else {
        for (i64 i = 0; i < batch; ++i) {
            kernels::matmul_nn(a.data() + i * m * k, b.data() + i * k * n, out.data() + i * m * n, m, k, n);
        }
    }

    if (track(tape, a, b)) {
        out.set_requires_grad(true);
        Tensor<T> ac = a, bcp = b, oc = out;
        tape->record([ac, bcp, oc, batch, m, k, n, b3]() mutable {
            if (!oc.has_grad()) return;
            const T* dy = oc.grad();
            if (ac.requires_grad()) {
                ac.ensure_grad();
                T* da = ac.grad();
                if (!b3) {
                    kernels::matmul_nt_accum(dy, bcp.data(), da, batch * m, n, k);
                } else {
                    for (i64 i = 0; i < batch; ++i) {
                        kernels::matmul_nt_accum(dy + i * m * n, bcp.data() + i * k * n,
                                                 da + i * m * k, m, n, k);
                    }
                }
            }
            if (bcp.requires_grad()) {
                bcp.ensure_grad();
                T* db = bcp.grad();
                // dB = A^T dY; the flattened view sums over the batch for the
                // shared-weight case.
                if (!b3) {
                    kernels::matmul_tn_accum(ac.data(), dy, db, k, batch * m, n);
                } else {
                    for (i64 i = 0; i < batch; ++i) {
                        kernels::matmul_tn_accum(ac.data() + i * m * k, dy + i * m * n,
                                                 db + i * k * n, k, m, n);
                    }
                }
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias, Tape<T>* tape) {
    const auto& sx = x.shape();
    if (sx.size() < 2 || w.ndim() != 2 || bias.ndim() != 1) {
        throw ShapeError("linear: expected x [...,K], w [K,N], bias [N]; got " + shape_str(sx) + ", " +
                         shape_str(w.shape()) + ", " + shape_str(bias.shape()));
    }
    const i64 k = sx.back();
    const i64 n = w.dim(1);
    if (w.dim(0) != k || bias.dim(0) != n) {
        throw ShapeError("linear: shapes " + shape_str(sx) + ", " + shape_str(w.shape()) + ", " +
                         shape_str(bias.shape()) + " do not conform");
    }
    const i64 rows = x.numel() / k;
    std::vector<i64> out_shape = sx;
    out_shape.back() = n;
    Tensor<T> out = Tensor<T>::uninit(std::move(out_shape));
    kernels::matmul_nn_bias(x.data(), w.data(), bias.data(), out.data(), rows, k, n);

    const bool need = tape && (x.requires_grad() || w.requires_grad() || bias.requires_grad());
    if (need) {
        out.set_requires_grad(true);
        Tensor<T> xc = x, wc = w, bc = bias, oc = out;
        tape->record([xc, wc, bc, oc, rows, k, n]() mutable {
            if (!oc.has_grad()) return;
            const T* dy = oc.grad();
            if (xc.requires_grad()) {
                xc.ensure_grad();
                kernels::matmul_nt_accum(dy, wc.data(), xc.grad(), rows, n, k);
            }
            if (wc.requires_grad()) {
                wc.ensure_grad();
                kernels::matmul_tn_accum(xc.data(), dy, wc.grad(), k, rows, n);
            }
            if (bc.requires_grad()) {
                bc.ensure_grad();
                kernels::col_sum_accum(dy, bc.grad(), rows, n);
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b, Tape<T>* tape) {
    return binary_op(a, b, tape, BinKind::Add, "add");
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b, Tape<T>* tape) {
    return binary_op(a, b, tape, BinKind::Sub, "sub");
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b, Tape<T>* tape) {
    return binary_op(a, b, tape, BinKind::Mul, "mul");
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor, Tape<T>* tape) {
    Tensor<T> out = Tensor<T>::uninit(a.shape());
    const T* pa = a.data();
    T* py = out.data();
    const i64 n = a.numel();
    for (i64 i = 0; i < n; ++i) py[i] = pa[i] * factor;

    if (track(tape, a)) {
        out.set_requires_grad(true);
        Tensor<T> ac = a, oc = out;
        tape->record([ac, oc, factor]() mutable {
            if (!oc.has_grad()) return;
            ac.ensure_grad();
            T* da = ac.grad();
            const T* dy = oc.grad();
            const i64 nn = ac.numel();
            for (i64 i = 0; i < nn; ++i) da[i] += factor * dy[i];
        });
    }
    return out;
}

namespace {

// Strided two-axis swap copy shared by forward and backward.
template <typename T>
void transpose_copy(const T* src, T* dst, const std::vector<i64>& src_shape,
                    std::size_t ax0, std::size_t ax1) {
    std::vector<i64> dst_shape = src_shape;
    std::swap(dst_shape[ax0], dst_shape[ax1]);
    const auto ss = contiguous_strides(src_shape);
    std::vector<i64> src_stride_in_dst = ss;
    std::swap(src_stride_in_dst[ax0], src_stride_in_dst[ax1]);

    const std::size_t nd = dst_shape.size();
    const i64 inner = dst_shape[nd - 1];
    const i64 inner_s = src_stride_in_dst[nd - 1];
    i64 rows = 1;
    for (std::size_t i = 0; i + 1 < nd; ++i) rows *= dst_shape[i];

    std::vector<i64> idx(nd - 1, 0);
    i64 out = 0;
    for (i64 r = 0; r < rows; ++r) {
        i64 base = 0;
        for (std::size_t d = 0; d + 1 < nd; ++d) base += idx[d] * src_stride_in_dst[d];
        if (inner_s == 1) {  // untouched trailing axis copies whole rows
            std::memcpy(dst + out, src + base, static_cast<std::size_t>(inner) * sizeof(T));
            out += inner;
        } else {
            for (i64 i = 0; i < inner; ++i) dst[out++] = src[base + i * inner_s];
        }
        for (i64 d = static_cast<i64>(idx.size()) - 1; d >= 0; --d) {
            if (++idx[static_cast<std::size_t>(d)] < dst_shape[static_cast<std::size_t>(d)]) break;
            idx[static_cast<std::size_t>(d)] = 0;
        }
    }
}

}  // namespace

template <typename T>
Tensor<T> transpose(const Tensor<T>& a, std::size_t axis0, std::size_t axis1, Tape<T>* tape) {
    if (axis0 >= a.ndim() || axis1 >= a.ndim()) {
        throw ShapeError("transpose: axes out of range for " + shape_str(a.shape()));
    }
    std::vector<i64> out_shape = a.shape();
    std::swap(out_shape[axis0], out_shape[axis1]);
    Tensor<T> out = Tensor<T>::uninit(out_shape);
    transpose_copy(a.data(), out.data(), a.shape(), axis0, axis1);

    if (track(tape, a)) {
        out.set_requires_grad(true);
        Tensor<T> ac = a, oc = out;
        tape->record([ac, oc, out_shape, axis0, axis1]() mutable {
            if (!oc.has_grad()) return;
            Buffer<T> tmp(static_cast<std::size_t>(ac.numel()));
            transpose_copy(oc.grad(), tmp.data(), out_shape, axis0, axis1);
            ac.accumulate_grad(tmp.data());
        });
    }
    return out;
}

// Zero-copy: the view shares the value and grad buffers, so gradients flow
// through without a tape node.
template <typename T>
Tensor<T> reshape(const Tensor<T>& a, std::vector<i64> new_shape, Tape<T>* tape) {
    Tensor<T> out = a.reshape_view(std::move(new_shape));
    if (track(tape, a)) out.set_requires_grad(true);
    return out;
}

namespace {

// outer/axis/inner decomposition for concat and slice.
inline void axis_split(const std::vector<i64>& shape, std::size_t axis, i64& outer, i64& inner) {
    outer = 1;
    inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
    for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
}

}  // namespace

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis, Tape<T>* tape) {
    if (parts.empty()) throw ParamError("concat: no inputs");
    const auto& ref = parts[0].shape();
    if (axis >= ref.size()) throw ShapeError("concat: axis out of range for " + shape_str(ref));
    i64 axis_total = 0;
    for (const auto& p : parts) {
        if (p.ndim() != ref.size()) {
            throw ShapeError("concat: rank mismatch between " + shape_str(ref) + " and " + shape_str(p.shape()));
        }
        for (std::size_t d = 0; d < ref.size(); ++d) {
            if (d != axis && p.shape()[d] != ref[d]) {
                throw ShapeError("concat: shapes " + shape_str(ref) + " and " + shape_str(p.shape()) +
                                 " differ off-axis");
            }
        }
        axis_total += p.shape()[axis];
    }
    std::vector<i64> out_shape = ref;
    out_shape[axis] = axis_total;
    Tensor<T> out = Tensor<T>::uninit(out_shape);

    i64 outer, inner;
    axis_split(out_shape, axis, outer, inner);
    T* py = out.data();
    i64 offset = 0;
    for (const auto& p : parts) {
        const i64 len = p.shape()[axis];
        const T* pp = p.data();
        for (i64 o = 0; o < outer; ++o) {
            std::memcpy(py + (o * axis_total + offset) * inner, pp + o * len * inner,
                        static_cast<std::size_t>(len * inner) * sizeof(T));
        }
        offset += len;
    }

    bool any = false;
    for (const auto& p : parts) any = any || p.requires_grad();
    if (tape && any) {
        out.set_requires_grad(true);
        std::vector<Tensor<T>> pc = parts;
        Tensor<T> oc = out;
        tape->record([pc, oc, axis_total, outer, inner, axis]() mutable {
            if (!oc.has_grad()) return;
            const T* dy = oc.grad();
            i64 off = 0;
            for (auto& p : pc) {
                const i64 len = p.shape()[axis];
                if (p.requires_grad()) {
                    p.ensure_grad();
                    T* dp = p.grad();
                    for (i64 o = 0; o < outer; ++o) {
                        const T* src = dy + (o * axis_total + off) * inner;
                        T* dst = dp + o * len * inner;
                        for (i64 i = 0; i < len * inner; ++i) dst[i] += src[i];
                    }
                }
                off += len;
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> slice(const Tensor<T>& a, std::size_t axis, i64 start, i64 len, Tape<T>* tape) {
    if (axis >= a.ndim()) throw ShapeError("slice: axis out of range for " + shape_str(a.shape()));
    const i64 extent = a.shape()[axis];
    if (start < 0 || len < 1 || start + len > extent) {
        throw ShapeError("slice: range [" + std::to_string(start) + "," + std::to_string(start + len) +
                         ") out of bounds for " + shape_str(a.shape()));
    }
    std::vector<i64> out_shape = a.shape();
    out_shape[axis] = len;
    Tensor<T> out = Tensor<T>::uninit(out_shape);

    i64 outer, inner;
    axis_split(a.shape(), axis, outer, inner);
    const T* pa = a.data();
    T* py = out.data();
    for (i64 o = 0; o < outer; ++o) {
        std::memcpy(py + o * len * inner, pa + (o * extent + start) * inner,
                    static_cast<std::size_t>(len * inner) * sizeof(T));
    }

    if (track(tape, a)) {
        out.set_requires_grad(true);
        Tensor<T> ac = a, oc = out;
        tape->record([ac, oc, outer, inner, extent, start, len]() mutable {
            if (!oc.has_grad()) return;
            ac.ensure_grad();
            T* da = ac.grad();
            const T* dy = oc.grad();
            for (i64 o = 0; o < outer; ++o) {
                T* dst = da + (o * extent + start) * inner;
                const T* src = dy + o * len * inner;
                for (i64 i = 0; i < len * inner; ++i) dst[i] += src[i];
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> broadcast_to(const Tensor<T>& a, std::vector<i64> shape, Tape<T>* tape) {
    const Bcast bc = make_bcast(a.shape(), shape, "broadcast_to");
    if (bc.out_shape != shape) {
        throw ShapeError("broadcast_to: " + shape_str(a.shape()) + " does not broadcast to " + shape_str(shape));
    }
    Tensor<T> out = Tensor<T>::uninit(shape);
    const T* pa = a.data();
    T* py = out.data();
    bcast_rows(bc, [&](i64 y0, i64 a0, i64, i64 inner, i64 as, i64) {
        if (as == 1)
            std::memcpy(py + y0, pa + a0, static_cast<std::size_t>(inner) * sizeof(T));
        else
            for (i64 i = 0; i < inner; ++i) py[y0 + i] = pa[a0 + i * as];
    });

    if (track(tape, a)) {
        out.set_requires_grad(true);
        Tensor<T> ac = a, oc = out;
        tape->record([ac, oc, bc]() mutable {
            if (!oc.has_grad()) return;
            ac.ensure_grad();
            T* da = ac.grad();
            const T* dy = oc.grad();
            bcast_rows(bc, [&](i64 y0, i64 a0, i64, i64 inner, i64 as, i64) {
                for (i64 i = 0; i < inner; ++i) da[a0 + i * as] += dy[y0 + i];
            });
        });
    }
    return out;
}

template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& a, Tape<T>* tape) {
    if (a.ndim() < 1) throw ShapeError("softmax_rows: scalar input");
    const i64 cols = a.shape().back();
    const i64 rows = a.numel() / cols;
    Tensor<T> out = Tensor<T>::uninit(a.shape());
    kernels::softmax_rows(a.data(), out.data(), rows, cols);

    if (track(tape, a)) {
        out.set_requires_grad(true);
        Tensor<T> ac = a, oc = out;
        tape->record([ac, oc, rows, cols]() mutable {
            if (!oc.has_grad()) return;
            ac.ensure_grad();
            kernels::softmax_backward_accum(oc.data(), oc.grad(), ac.grad(), rows, cols);
        });
    }
    return out;
}

template <typename T>
Tensor<T> log_softmax_rows(const Tensor<T>& a, Tape<T>* tape) {
    if (a.ndim() < 1) throw ShapeError("log_softmax_rows: scalar input");
    const i64 cols = a.shape().back();
    const i64 rows = a.numel() / cols;
    Tensor<T> out = Tensor<T>::uninit(a.shape());
    kernels::log_softmax_rows(a.data(), out.data(), rows, cols);

    if (track(tape, a)) {
        out.set_requires_grad(true);
        Tensor<T> ac = a, oc = out;
        tape->record([ac, oc, rows, cols]() mutable {
            if (!oc.has_grad()) return;
            ac.ensure_grad();
            T* da = ac.grad();
            const T* lsm = oc.data();
            const T* dy = oc.grad();
            // dz = dy - softmax * sum(dy) per row; softmax = exp(lsm)
            for (i64 r = 0; r < rows; ++r) {
                const T* lr = lsm + r * cols;
                const T* gr = dy + r * cols;
                T sum = T(0);
                for (i64 j = 0; j < cols; ++j) sum += gr[j];
                T* dr = da + r * cols;
                for (i64 j = 0; j < cols; ++j) dr[j] += gr[j] - std::exp(lr[j]) * sum;
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> layernorm(const Tensor<T>& a, const Tensor<T>& gamma, const Tensor<T>& beta, Tape<T>* tape) {
    if (a.ndim() < 1) throw ShapeError("layernorm: scalar input");
    const i64 cols = a.shape().back();
    if (gamma.numel() != cols || beta.numel() != cols) {
        throw ShapeError("layernorm: affine shapes " + shape_str(gamma.shape()) + "/" + shape_str(beta.shape()) +
                         " do not match last axis of " + shape_str(a.shape()));
    }
    const i64 rows = a.numel() / cols;
    Tensor<T> out = Tensor<T>::uninit(a.shape());
    auto mean = std::make_shared<std::vector<T>>(static_cast<std::size_t>(rows));
    auto rstd = std::make_shared<std::vector<T>>(static_cast<std::size_t>(rows));
    kernels::layernorm_rows(a.data(), gamma.data(), beta.data(), out.data(),
                            mean->data(), rstd->data(), rows, cols, static_cast<T>(kLayerNormEps));

    const bool need = tape && (a.requires_grad() || gamma.requires_grad() || beta.requires_grad());
    if (need) {
        out.set_requires_grad(true);
        Tensor<T> ac = a, gc = gamma, bc2 = beta, oc = out;
        tape->record([ac, gc, bc2, oc, mean, rstd, rows, cols]() mutable {
            if (!oc.has_grad()) return;
            T* dgamma = nullptr;
            T* dbeta = nullptr;
            T* dx = nullptr;
            if (gc.requires_grad()) {
                gc.ensure_grad();
                dgamma = gc.grad();
            }
            if (bc2.requires_grad()) {
                bc2.ensure_grad();
                dbeta = bc2.grad();
            }
            if (ac.requires_grad()) {
                ac.ensure_grad();
                dx = ac.grad();
            }
            kernels::layernorm_backward_accum(ac.data(), gc.data(), oc.grad(), mean->data(),
                                              rstd->data(), dgamma, dbeta, dx, rows, cols);
        });
    }
    return out;
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& a, Tape<T>* tape) {
    Tensor<T> out = Tensor<T>::uninit(a.shape());
    kernels::gelu(a.data(), out.data(), a.numel());

    if (track(tape, a)) {
        out.set_requires_grad(true);
        Tensor<T> ac = a, oc = out;
        tape->record([ac, oc]() mutable {
            if (!oc.has_grad()) return;
            ac.ensure_grad();
            kernels::gelu_grad_accum(ac.data(), oc.grad(), ac.grad(), ac.numel());
        });
    }
    return out;
}

template <typename T>
Tensor<T> log(const Tensor<T>& a, Tape<T>* tape) {
    Tensor<T> out = Tensor<T>::uninit(a.shape());
    const T* pa = a.data();
    T* py = out.data();
    const i64 n = a.numel();
    for (i64 i = 0; i < n; ++i) py[i] = std::log(pa[i]);

    if (track(tape, a)) {
        out.set_requires_grad(true);
        Tensor<T> ac = a, oc = out;
        tape->record([ac, oc]() mutable {
            if (!oc.has_grad()) return;
            ac.ensure_grad();
            T* da = ac.grad();
            const T* x = ac.data();
            const T* dy = oc.grad();
            const i64 nn = ac.numel();
            for (i64 i = 0; i < nn; ++i) da[i] += dy[i] / x[i];
        });
    }
    return out;
}

template <typename T>
Tensor<T> exp(const Tensor<T>& a, Tape<T>* tape) {
    Tensor<T> out = Tensor<T>::uninit(a.shape());
    const T* pa = a.data();
    T* py = out.data();
    const i64 n = a.numel();
    for (i64 i = 0; i < n; ++i) py[i] = std::exp(pa[i]);

    if (track(tape, a)) {
        out.set_requires_grad(true);
        Tensor<T> ac = a, oc = out;
        tape->record([ac, oc]() mutable {
            if (!oc.has_grad()) return;
            ac.ensure_grad();
            T* da = ac.grad();
            const T* y = oc.data();
            const T* dy = oc.grad();
            const i64 nn = ac.numel();
            for (i64 i = 0; i < nn; ++i) da[i] += y[i] * dy[i];
        });
    }
    return out;
}

template <typename T>
Tensor<T> reduce_sum(const Tensor<T>& a, Tape<T>* tape) {
    Tensor<T> out({1});
    const T* pa = a.data();
    T acc = T(0);
    const i64 n = a.numel();
    for (i64 i = 0; i < n; ++i) acc += pa[i];
    out[0] = acc;

    if (track(tape, a)) {
        out.set_requires_grad(true);
        Tensor<T> ac = a, oc = out;
        tape->record([ac, oc]() mutable {
            if (!oc.has_grad()) return;
            ac.ensure_grad();
            T* da = ac.grad();
            const T g = oc.grad()[0];
            const i64 nn = ac.numel();
            for (i64 i = 0; i < nn; ++i) da[i] += g;
        });
    }
    return out;
}

template <typename T>
Tensor<T> reduce_mean(const Tensor<T>& a, Tape<T>* tape) {
    Tensor<T> out({1});
    const T* pa = a.data();
    T acc = T(0);
    const i64 n = a.numel();
    for (i64 i = 0; i < n; ++i) acc += pa[i];
    out[0] = acc / static_cast<T>(n);

    if (track(tape, a)) {
        out.set_requires_grad(true);
        Tensor<T> ac = a, oc = out;
        tape->record([ac, oc]() mutable {
            if (!oc.has_grad()) return;
            ac.ensure_grad();
            T* da = ac.grad();
            const T g = oc.grad()[0] / static_cast<T>(ac.numel());
            const i64 nn = ac.numel();
            for (i64 i = 0; i < nn; ++i) da[i] += g;
        });
    }
    return out;
}

template <typename T>
Tensor<T> im2col(const Tensor<T>& x, i64 kernel, i64 stride, i64 pad, Tape<T>* tape) {
    if (x.ndim() != 4) throw ShapeError("im2col: expected [B,C,H,W], got " + shape_str(x.shape()));
    if (kernel < 1 || stride < 1 || pad < 0) throw ParamError("im2col: bad kernel/stride/pad");
    const i64 b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    const i64 out_h = (h + 2 * pad - kernel) / stride + 1;
    const i64 out_w = (w + 2 * pad - kernel) / stride + 1;
    if (out_h < 1 || out_w < 1) {
        throw ShapeError("im2col: kernel " + std::to_string(kernel) + " does not fit " + shape_str(x.shape()));
    }
    const i64 rows = out_h * out_w;
    const i64 row_len = c * kernel * kernel;
    Tensor<T> out = Tensor<T>::uninit({b, rows, row_len});
    for (i64 i = 0; i < b; ++i) {
        kernels::im2col(x.data() + i * c * h * w, out.data() + i * rows * row_len,
                        c, h, w, kernel, stride, pad);
    }

    if (track(tape, x)) {
        out.set_requires_grad(true);
        Tensor<T> xc = x, oc = out;
        tape->record([xc, oc, b, c, h, w, kernel, stride, pad, rows, row_len]() mutable {
            if (!oc.has_grad()) return;
            xc.ensure_grad();
            const T* dy = oc.grad();
            T* dx = xc.grad();
            for (i64 i = 0; i < b; ++i) {
                kernels::col2im(dy + i * rows * row_len, dx + i * c * h * w,
                                c, h, w, kernel, stride, pad);
            }
        });
    }
    return out;
}

#define DEIT_INSTANTIATE_OPS(T)                                                                      \
    template Tensor<T> matmul<T>(const Tensor<T>&, const Tensor<T>&, Tape<T>*);                      \
    template Tensor<T> linear<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, Tape<T>*);    \
    template Tensor<T> add<T>(const Tensor<T>&, const Tensor<T>&, Tape<T>*);                         \
    template Tensor<T> sub<T>(const Tensor<T>&, const Tensor<T>&, Tape<T>*);                         \
    template Tensor<T> mul<T>(const Tensor<T>&, const Tensor<T>&, Tape<T>*);                         \
    template Tensor<T> scale<T>(const Tensor<T>&, T, Tape<T>*);                                      \
    template Tensor<T> transpose<T>(const Tensor<T>&, std::size_t, std::size_t, Tape<T>*);           \
    template Tensor<T> reshape<T>(const Tensor<T>&, std::vector<i64>, Tape<T>*);                     \
    template Tensor<T> concat<T>(const std::vector<Tensor<T>>&, std::size_t, Tape<T>*);              \
    template Tensor<T> slice<T>(const Tensor<T>&, std::size_t, i64, i64, Tape<T>*);                  \
    template Tensor<T> broadcast_to<T>(const Tensor<T>&, std::vector<i64>, Tape<T>*);                \
    template Tensor<T> softmax_rows<T>(const Tensor<T>&, Tape<T>*);                                  \
    template Tensor<T> log_softmax_rows<T>(const Tensor<T>&, Tape<T>*);                              \
    template Tensor<T> layernorm<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, Tape<T>*); \
    template Tensor<T> gelu<T>(const Tensor<T>&, Tape<T>*);                                          \
    template Tensor<T> log<T>(const Tensor<T>&, Tape<T>*);                                           \
    template Tensor<T> exp<T>(const Tensor<T>&, Tape<T>*);                                           \
    template Tensor<T> reduce_sum<T>(const Tensor<T>&, Tape<T>*);                                    \
    template Tensor<T> reduce_mean<T>(const Tensor<T>&, Tape<T>*);                                   \
    template Tensor<T> im2col<T>(const Tensor<T>&, i64, i64, i64, Tape<T>*);

DEIT_INSTANTIATE_OPS(float)
DEIT_INSTANTIATE_OPS(double)

#undef DEIT_INSTANTIATE_OPS

}  // namespace deit::ops
