#include "doctest.h"

#include <cmath>

#include "deit/ops.hpp"
#include "deit/tensor.hpp"
#include "testutil.hpp"

using namespace deit;

namespace {
double norm_cdf(double x) { return 0.5 * (1.0 + std::erf(x / std::sqrt(2.0))); }
constexpr Tape<float>* kNoTape = nullptr;
}  // namespace

TEST_CASE("truncated normal init: bound, mean and tail-mass oracles") {
    Rng rng(1);
    auto small = init_truncated_normal<float>({4}, 0.02, 2.0, rng);
    for (i64 i = 0; i < 4; ++i) CHECK(std::abs(small[i]) <= 0.04f);

    const i64 n = 100000;
    auto big = init_truncated_normal<double>({n}, 0.02, 2.0, rng);
    double mean = 0.0;
    i64 outside_1sigma = 0;
    for (i64 i = 0; i < n; ++i) {
        CHECK(std::abs(big[i]) <= 0.04);
        mean += big[i];
        if (std::abs(big[i]) > 0.02) ++outside_1sigma;
    }
    mean /= double(n);

    // Variance of the truncation to [-c,c] sigma: 1 - 2c phi(c) / (2 Phi(c) - 1).
    const double c = 2.0;
    const double phi_c = std::exp(-0.5 * c * c) / std::sqrt(2.0 * M_PI);
    const double mass = 2.0 * norm_cdf(c) - 1.0;
    const double trunc_var = 1.0 - 2.0 * c * phi_c / mass;
    const double sigma_trunc = 0.02 * std::sqrt(trunc_var);
    CHECK(std::abs(mean) <= 4.0 * sigma_trunc / std::sqrt(double(n)));

    // Fraction outside 1 sigma, conditioned on the surviving mass.
    const double expect = (2.0 * (1.0 - norm_cdf(1.0)) - 2.0 * (1.0 - norm_cdf(2.0))) / mass;
    CHECK(std::abs(double(outside_1sigma) / double(n) - expect) <= 0.01);

    CHECK_THROWS_AS(init_truncated_normal<float>({2}, 0.0, 2.0, rng), ParamError);
    CHECK_THROWS_AS(init_truncated_normal<float>({2}, 0.02, -1.0, rng), ParamError);
}

TEST_CASE("backward basics: x*x at 3, CE-softmax closed form, error contracts") {
    // d(x*x)/dx at 3 is 6
    auto x = Tensor<double>::from_data({1}, {3.0});
    x.set_requires_grad(true);
    Tape<double> tape;
    auto loss = ops::reduce_sum(ops::mul(x, x, &tape), &tape);
    tape.backward(loss);
    CHECK(x.grad()[0] == doctest::Approx(6.0));

    // grad of CE(softmax(z), onehot) is softmax(z) - y
    auto z = Tensor<float>::from_data({1, 4}, {0.3f, -1.2f, 2.0f, 0.1f});
    z.set_requires_grad(true);
    auto onehot = Tensor<float>::from_data({1, 4}, {0.f, 0.f, 1.f, 0.f});
    Tape<float> t2;
    auto p = ops::softmax_rows(z, &t2);
    auto ce = ops::scale(ops::reduce_sum(ops::mul(onehot, ops::log(p, &t2), &t2), &t2), -1.0f, &t2);
    t2.backward(ce);
    for (i64 j = 0; j < 4; ++j) {
        const float expect = p[j] - onehot[j];
        CHECK(z.grad()[j] == doctest::Approx(expect).epsilon(1e-5));
    }

    // non-scalar loss
    Rng rng(3);
    Tape<float> t3;
    auto v = testutil::random_tensor<float>({3}, rng);
    v.set_requires_grad(true);
    auto y = ops::scale(v, 2.0f, &t3);
    CHECK_THROWS_AS(t3.backward(y), ContractError);

    // detached loss -> empty tape
    Tape<float> t4;
    auto detached = Tensor<float>::from_data({1}, {1.0f});
    detached.set_requires_grad(true);
    CHECK_THROWS_AS(t4.backward(detached), ContractError);
}

TEST_CASE("grad accumulation over k uses equals sum of single-use grads (64-bit exact)") {
    // Integer and power-of-two data keeps every product and sum exactly
    // representable, so equality can be checked bitwise.
    auto w1 = Tensor<double>::from_data({4}, {1, 2, 3, 4});
    auto w2 = Tensor<double>::from_data({4}, {8, -2, 0.5, 16});
    auto w3 = Tensor<double>::from_data({4}, {-4, 0.25, 2, 1});
    auto make_x = [] { return Tensor<double>::from_data({4}, {2, -3, 5, 0.5}); };

    auto x = make_x();
    x.set_requires_grad(true);
    Tape<double> tape;
    auto l1 = ops::reduce_sum(ops::mul(x, w1, &tape), &tape);
    auto l2 = ops::reduce_sum(ops::mul(x, w2, &tape), &tape);
    auto l3 = ops::reduce_sum(ops::mul(x, w3, &tape), &tape);
    auto loss = ops::add(ops::add(l1, l2, &tape), l3, &tape);
    tape.backward(loss);

    for (i64 i = 0; i < 4; ++i) {
        double single_sum = 0.0;
        for (const auto& w : {w1, w2, w3}) {
            auto xi = make_x();
            xi.set_requires_grad(true);
            Tape<double> t;
            auto l = ops::reduce_sum(ops::mul(xi, w, &t), &t);
            t.backward(l);
            single_sum += xi.grad()[i];
        }
        CHECK(x.grad()[i] == single_sum);
    }
}

TEST_CASE("softmax rows sum to one for |x| <= 50") {
    Rng rng(11);
    for (int rep = 0; rep < 10; ++rep) {
        auto x = testutil::random_tensor<float>({8, 7}, rng, -50.0, 50.0);
        x[0] = 50.0f;
        x[1] = -50.0f;
        auto y = ops::softmax_rows(x, kNoTape);
        for (i64 r = 0; r < 8; ++r) {
            double s = 0.0;
            for (i64 j = 0; j < 7; ++j) {
                const float v = y[r * 7 + j];
                CHECK(std::isfinite(v));
                s += v;
            }
            CHECK(s >= 1.0 - 1e-6);
            CHECK(s <= 1.0 + 1e-6);
        }
    }
    // symmetry: softmax of a constant row is uniform
    auto z = Tensor<float>::from_data({1, 3}, {0.f, 0.f, 0.f});
    auto u = ops::softmax_rows(z, kNoTape);
    for (i64 j = 0; j < 3; ++j) CHECK(u[j] == doctest::Approx(1.0f / 3.0f));
}

TEST_CASE("layernorm pre-affine is zero on constant rows; normalized stats") {
    auto x = Tensor<float>::from_data({1, 3}, {2.f, 2.f, 2.f});
    auto gamma = Tensor<float>::full({3}, 1.0f);
    auto beta = Tensor<float>::zeros({3});
    auto y = ops::layernorm(x, gamma, beta, kNoTape);
    for (i64 j = 0; j < 3; ++j) CHECK(std::abs(y[j]) < 1e-4f);

    Rng rng(5);
    auto r = testutil::random_tensor<float>({6, 16}, rng);
    auto g16 = Tensor<float>::full({16}, 1.0f);
    auto b16 = Tensor<float>::zeros({16});
    auto yn = ops::layernorm(r, g16, b16, kNoTape);
    for (i64 row = 0; row < 6; ++row) {
        double m = 0, v = 0;
        for (i64 j = 0; j < 16; ++j) m += yn[row * 16 + j];
        m /= 16;
        for (i64 j = 0; j < 16; ++j) v += (yn[row * 16 + j] - m) * (yn[row * 16 + j] - m);
        v /= 16;
        CHECK(std::abs(m) < 1e-5);
        CHECK(std::abs(v - 1.0) < 1e-4);
    }
}

TEST_CASE("reshape and transpose round-trips are bit-exact") {
    Rng rng(13);
    auto x = testutil::random_tensor<float>({3, 4, 5}, rng);
    auto r = ops::reshape(ops::reshape(x, {12, 5}, kNoTape), {3, 4, 5}, kNoTape);
    CHECK(r.values() == x.values());

    auto t = ops::transpose(ops::transpose(x, 0, 2, kNoTape), 0, 2, kNoTape);
    CHECK(t.values() == x.values());
}

TEST_CASE("shape errors name both shapes") {
    auto a = Tensor<float>::zeros({2, 3});
    auto b = Tensor<float>::zeros({4, 5});
    try {
        ops::matmul(a, b, kNoTape);
        FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("[2,3]") != std::string::npos);
        CHECK(msg.find("[4,5]") != std::string::npos);
    }
    CHECK_THROWS_AS(ops::add(a, b, kNoTape), ShapeError);
}

TEST_CASE("inference path allocates no gradient state") {
    Rng rng(17);
    auto x = testutil::random_tensor<float>({4, 4}, rng);
    auto w = testutil::random_tensor<float>({4, 4}, rng);
    auto y = ops::matmul(x, w, kNoTape);
    CHECK(!y.requires_grad());
    CHECK(!y.has_grad());

    // requires_grad inputs without a tape still do not track
    w.set_requires_grad(true);
    auto y2 = ops::matmul(x, w, kNoTape);
    CHECK(!y2.requires_grad());
    CHECK(!y2.has_grad());
}
