// Compares the OpenMP kernels against their serial references.

#include <omp.h>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <vector>

#include "deit/kernels.hpp"
#include "deit/rng.hpp"

using namespace deit;
namespace k = deit::kernels;
using k::i64;

namespace {

using clock_t_ = std::chrono::steady_clock;

template <typename Fn>
double time_best_of(Fn fn, int reps) {
    double best = 1e30;
    for (int i = 0; i < reps; ++i) {
        const auto t0 = clock_t_::now();
        fn();
        const auto t1 = clock_t_::now();
        best = std::min(best, std::chrono::duration<double>(t1 - t0).count());
    }
    return best;
}

std::vector<float> random_vec(i64 n, Rng& rng) {
    std::vector<float> v(static_cast<std::size_t>(n));
    for (auto& x : v) x = static_cast<float>(rng.uniform(-1.0, 1.0));
    return v;
}

void report(const char* name, double serial_s, double parallel_s, double work) {
    std::printf("%-22s serial %8.3f ms (%6.2f GF/s)   omp %8.3f ms (%6.2f GF/s)   speedup %.2fx\n",
                name, serial_s * 1e3, work / serial_s * 1e-9, parallel_s * 1e3,
                work / parallel_s * 1e-9, serial_s / parallel_s);
}

}  // namespace

int main(int argc, char** argv) {
    const i64 n = argc > 1 ? std::atoll(argv[1]) : 512;
    const int reps = 5;
    std::printf("threads: %d, square size: %lld\n", omp_get_max_threads(), static_cast<long long>(n));

    Rng rng(1);
    auto a = random_vec(n * n, rng);
    auto b = random_vec(n * n, rng);
    std::vector<float> c(static_cast<std::size_t>(n * n));

    {
        const double work = 2.0 * double(n) * double(n) * double(n);
        const double ts = time_best_of([&] { k::matmul_nn_serial(a.data(), b.data(), c.data(), n, n, n); }, reps);
        const double tp = time_best_of([&] { k::matmul_nn(a.data(), b.data(), c.data(), n, n, n); }, reps);
        report("matmul_nn", ts, tp, work);
    }
    {
        const double work = 2.0 * double(n) * double(n) * double(n);
        const double ts = time_best_of([&] { k::matmul_nt_serial(a.data(), b.data(), c.data(), n, n, n); }, reps);
        const double tp = time_best_of([&] { k::matmul_nt(a.data(), b.data(), c.data(), n, n, n); }, reps);
        report("matmul_nt", ts, tp, work);
    }
    {
        const double work = 2.0 * double(n) * double(n) * double(n);
        const double ts = time_best_of([&] { k::matmul_tn_serial(a.data(), b.data(), c.data(), n, n, n); }, reps);
        const double tp = time_best_of([&] { k::matmul_tn(a.data(), b.data(), c.data(), n, n, n); }, reps);
        report("matmul_tn", ts, tp, work);
    }
    {
        const i64 rows = n, cols = n;
        std::vector<float> y(static_cast<std::size_t>(rows * cols));
        const double work = 4.0 * double(rows) * double(cols);
        const double ts = time_best_of([&] { k::softmax_rows_serial(a.data(), y.data(), rows, cols); }, reps);
        const double tp = time_best_of([&] { k::softmax_rows(a.data(), y.data(), rows, cols); }, reps);
        report("softmax_rows", ts, tp, work);
    }
    {
        const i64 rows = n, cols = n;
        std::vector<float> y(static_cast<std::size_t>(rows * cols)), mean(rows), rstd(rows);
        auto gamma = random_vec(cols, rng);
        auto beta = random_vec(cols, rng);
        const double work = 6.0 * double(rows) * double(cols);
        const double ts = time_best_of(
            [&] { k::layernorm_rows_serial(a.data(), gamma.data(), beta.data(), y.data(), mean.data(), rstd.data(), rows, cols, 1e-6f); },
            reps);
        const double tp = time_best_of(
            [&] { k::layernorm_rows(a.data(), gamma.data(), beta.data(), y.data(), mean.data(), rstd.data(), rows, cols, 1e-6f); },
            reps);
        report("layernorm_rows", ts, tp, work);
    }
    {
        const i64 ch = 16, h = n / 4, w = n / 4, kernel = 3, stride = 1, pad = 1;
        auto x = random_vec(ch * h * w, rng);
        const i64 out_rows = h * w;
        std::vector<float> cols(static_cast<std::size_t>(out_rows * ch * kernel * kernel));
        const double work = double(cols.size());
        const double ts = time_best_of(
            [&] { k::im2col_serial(x.data(), cols.data(), ch, h, w, kernel, stride, pad); }, reps);
        const double tp =
            time_best_of([&] { k::im2col(x.data(), cols.data(), ch, h, w, kernel, stride, pad); }, reps);
        report("im2col", ts, tp, work);
    }
    {
        std::vector<float> y(a.size());
        const double work = double(a.size());
        const double ts = time_best_of([&] { k::gelu_serial(a.data(), y.data(), i64(a.size())); }, reps);
        const double tp = time_best_of([&] { k::gelu(a.data(), y.data(), i64(a.size())); }, reps);
        report("gelu", ts, tp, work);
    }
    return 0;
}
