#include <benchmark/benchmark.h>

#include <random>

#include "fastgc/layers.hpp"
#include "fastgc/tensor.hpp"

namespace {

fastgc::Tensor rand_tensor(fastgc::Shape shape, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> dist(-1.0, 1.0);
    std::size_t n = 1;
    for (std::size_t e : shape) n *= e;
    std::vector<double> buf(n);
    for (double& v : buf) v = dist(rng);
    return fastgc::Tensor(std::move(shape), std::move(buf));
}

void BM_Bmm(benchmark::State& state) {
    const auto tau = static_cast<std::size_t>(state.range(0));
    fastgc::Tensor a = rand_tensor({tau, 64, 64}, 1);
    fastgc::Tensor b = rand_tensor({tau, 64, 64}, 2);
    for (auto _ : state) {
        benchmark::DoNotOptimize(fastgc::bmm(a, b));
    }
    state.SetComplexityN(static_cast<std::int64_t>(tau));
}
BENCHMARK(BM_Bmm)->RangeMultiplier(2)->Range(8, 128)->Complexity();

void BM_Im2Col(benchmark::State& state) {
    const auto tau = static_cast<std::size_t>(state.range(0));
    fastgc::Tensor x = rand_tensor({tau, 20, 24, 24}, 3);
    for (auto _ : state) {
        benchmark::DoNotOptimize(fastgc::im2col(x, 5, 5, 1));
    }
}
BENCHMARK(BM_Im2Col)->RangeMultiplier(2)->Range(8, 64);

// Goodfellow shortcut vs materializing the per-example weight gradients.
void BM_LinearSqNormFast(benchmark::State& state) {
    const auto tau = static_cast<std::size_t>(state.range(0));
    fastgc::Tensor dz = rand_tensor({tau, 256}, 4);
    fastgc::Tensor x = rand_tensor({tau, 784}, 5);
    for (auto _ : state) {
        benchmark::DoNotOptimize(fastgc::linear_pe_sqnorm(dz, x));
    }
}
BENCHMARK(BM_LinearSqNormFast)->RangeMultiplier(2)->Range(16, 128);

void BM_LinearSqNormMaterialized(benchmark::State& state) {
    const auto tau = static_cast<std::size_t>(state.range(0));
    fastgc::Tensor dz = rand_tensor({tau, 256}, 4);
    fastgc::Tensor x = rand_tensor({tau, 784}, 5);
    for (auto _ : state) {
        fastgc::LinearPeGrads g = fastgc::linear_pe_grad(dz, x);
        benchmark::DoNotOptimize(fastgc::sq_norm_rows(g.grad_w));
    }
}
BENCHMARK(BM_LinearSqNormMaterialized)->RangeMultiplier(2)->Range(16, 128);

void BM_Conv2dPeGrad(benchmark::State& state) {
    const auto tau = static_cast<std::size_t>(state.range(0));
    fastgc::Tensor dz = rand_tensor({tau, 20, 24, 24}, 6);
    fastgc::Tensor x = rand_tensor({tau, 1, 28, 28}, 7);
    for (auto _ : state) {
        benchmark::DoNotOptimize(fastgc::conv2d_pe_grad(dz, x, 5, 5));
    }
}
BENCHMARK(BM_Conv2dPeGrad)->RangeMultiplier(2)->Range(8, 64);

}  // namespace

BENCHMARK_MAIN();
