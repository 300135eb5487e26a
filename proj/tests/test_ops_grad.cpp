#include "doctest.h"

#include <functional>
#include <vector>

#include "deit/ops.hpp"
#include "testutil.hpp"

using namespace deit;
using testutil::check_gradients;
using testutil::grad_tol;
using testutil::random_tensor;

// Finite-difference sweep: every primitive, >= 50 random small shapes, in both
// 32-bit and 64-bit mode. Losses contract the op output against a fixed random
// weighting so that every output element influences the scalar.

namespace {

template <typename T>
Tensor<T> contract_loss(const Tensor<T>& out, const Tensor<T>& w, Tape<T>* tape) {
    return ops::reduce_sum(ops::mul(out, w, tape), tape);
}

template <typename T>
std::vector<i64> random_shape(Rng& rng, int max_rank = 3, i64 max_dim = 5) {
    const int rank = 1 + static_cast<int>(rng.uniform_int(max_rank));
    std::vector<i64> s(static_cast<std::size_t>(rank));
    for (auto& d : s) d = 1 + rng.uniform_int(max_dim);
    return s;
}

}  // namespace

TEST_CASE_TEMPLATE("fd: matmul (2d, batched-shared, batched)", T, float, double) {
    Rng rng(101);
    for (int rep = 0; rep < 51; ++rep) {
        const i64 m = 1 + rng.uniform_int(4), k = 1 + rng.uniform_int(4), n = 1 + rng.uniform_int(4);
        const int kind = rep % 3;
        Tensor<T> a, b, w;
        if (kind == 0) {
            a = random_tensor<T>({m, k}, rng);
            b = random_tensor<T>({k, n}, rng);
            w = random_tensor<T>({m, n}, rng);
        } else {
            const i64 bb = 1 + rng.uniform_int(3);
            a = random_tensor<T>({bb, m, k}, rng);
            b = kind == 1 ? random_tensor<T>({k, n}, rng) : random_tensor<T>({bb, k, n}, rng);
            w = random_tensor<T>({bb, m, n}, rng);
        }
        auto loss = [&](Tape<T>* tape) { return contract_loss(ops::matmul(a, b, tape), w, tape); };
        CHECK(check_gradients<T>(loss, {a, b}) <= grad_tol<T>());
    }
}

TEST_CASE_TEMPLATE("fd: add/sub/mul with broadcasting", T, float, double) {
    Rng rng(102);
    for (int rep = 0; rep < 51; ++rep) {
        const i64 b = 1 + rng.uniform_int(3), s = 1 + rng.uniform_int(4), d = 1 + rng.uniform_int(4);
        Tensor<T> x = random_tensor<T>({b, s, d}, rng);
        Tensor<T> y;
        switch (rep % 4) {
            case 0: y = random_tensor<T>({b, s, d}, rng); break;   // same shape
            case 1: y = random_tensor<T>({d}, rng); break;         // row broadcast
            case 2: y = random_tensor<T>({b, 1, 1}, rng); break;   // per-sample broadcast
            default: y = random_tensor<T>({1}, rng); break;        // scalar
        }
        Tensor<T> w = random_tensor<T>({b, s, d}, rng);
        const int which = rep % 3;
        auto loss = [&](Tape<T>* tape) {
            Tensor<T> out = which == 0   ? ops::add(x, y, tape)
                            : which == 1 ? ops::sub(x, y, tape)
                                         : ops::mul(x, y, tape);
            return contract_loss(out, w, tape);
        };
        CHECK(check_gradients<T>(loss, {x, y}) <= grad_tol<T>());
    }
}

TEST_CASE_TEMPLATE("fd: scale, gelu, log, exp", T, float, double) {
    Rng rng(103);
    for (int rep = 0; rep < 51; ++rep) {
        auto shape = random_shape<T>(rng);
        Tensor<T> w = random_tensor<T>(shape, rng);
        const int which = rep % 4;
        Tensor<T> x = which == 2 ? random_tensor<T>(shape, rng, 0.35, 2.5)  // log domain
                                 : random_tensor<T>(shape, rng);
        const T factor = static_cast<T>(rng.uniform(-2.0, 2.0));
        auto loss = [&](Tape<T>* tape) {
            Tensor<T> out;
            switch (which) {
                case 0: out = ops::scale(x, factor, tape); break;
                case 1: out = ops::gelu(x, tape); break;
                case 2: out = ops::log(x, tape); break;
                default: out = ops::exp(x, tape); break;
            }
            return contract_loss(out, w, tape);
        };
        CHECK(check_gradients<T>(loss, {x}) <= grad_tol<T>());
    }
}

TEST_CASE_TEMPLATE("fd: transpose, reshape, broadcast_to, slice, concat", T, float, double) {
    Rng rng(104);
    for (int rep = 0; rep < 51; ++rep) {
        const i64 a = 1 + rng.uniform_int(3), b = 1 + rng.uniform_int(3), c = 1 + rng.uniform_int(3);
        Tensor<T> x = random_tensor<T>({a, b, c}, rng);
        switch (rep % 5) {
            case 0: {
                const std::size_t ax0 = static_cast<std::size_t>(rng.uniform_int(3));
                const std::size_t ax1 = static_cast<std::size_t>(rng.uniform_int(3));
                std::vector<i64> os = x.shape();
                std::swap(os[ax0], os[ax1]);
                Tensor<T> w = random_tensor<T>(os, rng);
                auto loss = [&](Tape<T>* tape) {
                    return contract_loss(ops::transpose(x, ax0, ax1, tape), w, tape);
                };
                CHECK(check_gradients<T>(loss, {x}) <= grad_tol<T>());
                break;
            }
            case 1: {
                Tensor<T> w = random_tensor<T>({a * b * c}, rng);
                auto loss = [&](Tape<T>* tape) {
                    return contract_loss(ops::reshape(x, {a * b * c}, tape), w, tape);
                };
                CHECK(check_gradients<T>(loss, {x}) <= grad_tol<T>());
                break;
            }
            case 2: {
                Tensor<T> small = random_tensor<T>({1, b, 1}, rng);
                Tensor<T> w = random_tensor<T>({a, b, c}, rng);
                auto loss = [&](Tape<T>* tape) {
                    return contract_loss(ops::broadcast_to(small, {a, b, c}, tape), w, tape);
                };
                CHECK(check_gradients<T>(loss, {small}) <= grad_tol<T>());
                break;
            }
            case 3: {
                const std::size_t axis = static_cast<std::size_t>(rng.uniform_int(3));
                const i64 extent = x.shape()[axis];
                const i64 start = rng.uniform_int(extent);
                const i64 len = 1 + rng.uniform_int(extent - start);
                std::vector<i64> os = x.shape();
                os[axis] = len;
                Tensor<T> w = random_tensor<T>(os, rng);
                auto loss = [&](Tape<T>* tape) {
                    return contract_loss(ops::slice(x, axis, start, len, tape), w, tape);
                };
                CHECK(check_gradients<T>(loss, {x}) <= grad_tol<T>());
                break;
            }
            default: {
                Tensor<T> x2 = random_tensor<T>({a, b, c}, rng);
                const std::size_t axis = static_cast<std::size_t>(rng.uniform_int(3));
                std::vector<i64> os = x.shape();
                os[axis] *= 2;
                Tensor<T> w = random_tensor<T>(os, rng);
                auto loss = [&](Tape<T>* tape) {
                    return contract_loss(ops::concat({x, x2}, axis, tape), w, tape);
                };
                CHECK(check_gradients<T>(loss, {x, x2}) <= grad_tol<T>());
                break;
            }
        }
    }
}

TEST_CASE_TEMPLATE("fd: softmax_rows and layernorm", T, float, double) {
    Rng rng(105);
    for (int rep = 0; rep < 51; ++rep) {
        const i64 r = 1 + rng.uniform_int(4), d = 3 + rng.uniform_int(6);
        Tensor<T> x = random_tensor<T>({r, d}, rng, -2.0, 2.0);
        Tensor<T> w = random_tensor<T>({r, d}, rng);
        if (rep % 2 == 0) {
            auto loss = [&](Tape<T>* tape) { return contract_loss(ops::softmax_rows(x, tape), w, tape); };
            CHECK(check_gradients<T>(loss, {x}) <= grad_tol<T>());
        } else {
            Tensor<T> gamma = random_tensor<T>({d}, rng, 0.5, 1.5);
            Tensor<T> beta = random_tensor<T>({d}, rng, -0.5, 0.5);
            auto loss = [&](Tape<T>* tape) {
                return contract_loss(ops::layernorm(x, gamma, beta, tape), w, tape);
            };
            CHECK(check_gradients<T>(loss, {x, gamma, beta}) <= grad_tol<T>());
        }
    }
}

TEST_CASE_TEMPLATE("fd: reductions and im2col", T, float, double) {
    Rng rng(106);
    for (int rep = 0; rep < 51; ++rep) {
        if (rep % 3 != 2) {
            auto shape = random_shape<T>(rng);
            Tensor<T> x = random_tensor<T>(shape, rng);
            auto loss = [&](Tape<T>* tape) {
                return rep % 3 == 0 ? ops::reduce_sum(x, tape) : ops::reduce_mean(x, tape);
            };
            CHECK(check_gradients<T>(loss, {x}) <= grad_tol<T>());
        } else {
            const i64 b = 1 + rng.uniform_int(2), c = 1 + rng.uniform_int(2);
            const i64 h = 3 + rng.uniform_int(3), w_ = 3 + rng.uniform_int(3);
            const i64 kernel = 1 + rng.uniform_int(2), stride = 1 + rng.uniform_int(2);
            const i64 pad = rng.uniform_int(2);
            if ((h + 2 * pad - kernel) < 0 || (w_ + 2 * pad - kernel) < 0) continue;
            Tensor<T> x = random_tensor<T>({b, c, h, w_}, rng);
            const i64 rows = ((h + 2 * pad - kernel) / stride + 1) * ((w_ + 2 * pad - kernel) / stride + 1);
            Tensor<T> w = random_tensor<T>({b, rows, c * kernel * kernel}, rng);
            auto loss = [&](Tape<T>* tape) {
                return contract_loss(ops::im2col(x, kernel, stride, pad, tape), w, tape);
            };
            CHECK(check_gradients<T>(loss, {x}) <= grad_tol<T>());
        }
    }
}

// A composite graph touching every primitive at once.
TEST_CASE_TEMPLATE("fd: three-stage graph using the full primitive set", T, float, double) {
    Rng rng(107);
    Tensor<T> img = random_tensor<T>({2, 3, 4, 4}, rng);
    Tensor<T> w1 = random_tensor<T>({12, 8}, rng, -0.6, 0.6);
    Tensor<T> b1 = random_tensor<T>({8}, rng, -0.3, 0.3);
    Tensor<T> gamma = random_tensor<T>({8}, rng, 0.7, 1.3);
    Tensor<T> beta = random_tensor<T>({8}, rng, -0.2, 0.2);
    Tensor<T> wc = random_tensor<T>({12, 8}, rng);
    Tensor<T> gain = random_tensor<T>({1, 8}, rng, 0.5, 1.5);

    auto loss = [&](Tape<T>* tape) -> Tensor<T> {
        auto cols = ops::im2col(img, 2, 2, 0, tape);               // [2,4,12]
        auto h = ops::add(ops::matmul(cols, w1, tape), b1, tape);  // [2,4,8]
        h = ops::layernorm(h, gamma, beta, tape);
        h = ops::gelu(h, tape);
        auto ht = ops::transpose(h, 0, 1, tape);                   // [4,2,8]
        auto flat = ops::reshape(ht, {8, 8}, tape);
        auto both = ops::concat({flat, ops::slice(flat, 0, 0, 4, tape)}, 0, tape);  // [12,8]
        auto g = ops::broadcast_to(gain, {12, 8}, tape);
        auto sm = ops::softmax_rows(ops::scale(ops::mul(both, g, tape), T(0.8), tape), tape);
        auto pos = ops::exp(ops::scale(both, T(0.2), tape), tape);
        auto lg = ops::log(pos, tape);
        auto l1 = ops::reduce_sum(ops::mul(sm, wc, tape), tape);
        auto l2 = ops::reduce_mean(lg, tape);
        return ops::add(l1, ops::scale(l2, T(0.5), tape), tape);
    };
    CHECK(check_gradients<T>(loss, {img, w1, b1, gamma, beta, gain}) <= grad_tol<T>());
}
