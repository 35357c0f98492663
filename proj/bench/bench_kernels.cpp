// Parallel kernels against their serial references at the shapes the toy
// backbone actually runs (64x64 input, channel plan 8/16/32/64).

#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "svf/kernels.hpp"
#include "svf/tensor.hpp"

namespace {

std::vector<double> random_values(std::size_t n, unsigned seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> d;
    std::vector<double> v(n);
    for (auto& x : v) x = d(rng);
    return v;
}

template <bool Parallel>
void BM_GemmNN(benchmark::State& state) {
    const auto m = static_cast<std::size_t>(state.range(0));
    const auto k = static_cast<std::size_t>(state.range(1));
    const auto n = static_cast<std::size_t>(state.range(2));
    const auto a = random_values(m * k, 1);
    const auto b = random_values(k * n, 2);
    std::vector<double> c(m * n);
    for (auto _ : state) {
        std::fill(c.begin(), c.end(), 0.0);
        if constexpr (Parallel)
            svf::kernels::gemm_nn(m, n, k, a.data(), b.data(), c.data());
        else
            svf::kernels::reference::gemm_nn(m, n, k, a.data(), b.data(), c.data());
        benchmark::DoNotOptimize(c.data());
    }
    state.counters["MAC/s"] = benchmark::Counter(static_cast<double>(m * n * k), benchmark::Counter::kIsIterationInvariantRate);
}

template <bool Parallel>
void BM_Im2col(benchmark::State& state) {
    const auto c = static_cast<std::size_t>(state.range(0));
    const auto hw = static_cast<std::size_t>(state.range(1));
    const svf::kernels::Im2colShape s{c, hw, hw, 3, 3, 1, 1, 1, 1, hw, hw};
    const auto img = random_values(c * hw * hw, 3);
    std::vector<double> cols(s.col_rows() * s.col_cols());
    for (auto _ : state) {
        if constexpr (Parallel)
            svf::kernels::im2col(s, img.data(), cols.data());
        else
            svf::kernels::reference::im2col(s, img.data(), cols.data());
        benchmark::DoNotOptimize(cols.data());
    }
}

void BM_Conv2dStage(benchmark::State& state) {
    const auto c = static_cast<std::size_t>(state.range(0));
    const auto hw = static_cast<std::size_t>(state.range(1));
    const svf::Tensor4 x({4, c, hw, hw}, random_values(4 * c * hw * hw, 4));
    const svf::Tensor4 w({c, c, 3, 3}, random_values(c * c * 9, 5));
    for (auto _ : state) benchmark::DoNotOptimize(svf::conv2d(x, w, svf::ConvGeometry::square(3, 1, 1)));
}

}  // namespace

BENCHMARK(BM_GemmNN<true>)->Args({8, 72, 4096})->Args({64, 576, 64})->Args({16, 144, 1024});
BENCHMARK(BM_GemmNN<false>)->Args({8, 72, 4096})->Args({64, 576, 64})->Args({16, 144, 1024});
BENCHMARK(BM_Im2col<true>)->Args({8, 64})->Args({64, 8});
BENCHMARK(BM_Im2col<false>)->Args({8, 64})->Args({64, 8});
BENCHMARK(BM_Conv2dStage)->Args({8, 64})->Args({16, 32})->Args({32, 16})->Args({64, 8});

BENCHMARK_MAIN();
