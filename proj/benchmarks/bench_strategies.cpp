#include <benchmark/benchmark.h>

#include "fastgc/bench.hpp"
#include "fastgc/clipping.hpp"

namespace {

struct StepSetup {
    fastgc::Model model;
    fastgc::Batch batch;

    explicit StepSetup(std::size_t tau) {
        fastgc::Dataset data = fastgc::bench_dataset("mlp", std::max<std::size_t>(tau, 16), 42);
        std::vector<std::size_t> idx(tau);
        for (std::size_t i = 0; i < tau; ++i) idx[i] = i;
        batch = fastgc::gather(data, idx);
        model = fastgc::build_reference_model("mlp", 2, {1, 28, 28}, 10, 42);
    }
};

void run_strategy(benchmark::State& state, fastgc::Strategy strategy) {
    StepSetup setup(static_cast<std::size_t>(state.range(0)));
    fastgc::ClipConfig cfg{1.0, strategy, false};
    for (auto _ : state) {
        benchmark::DoNotOptimize(fastgc::clipped_batch_gradient(setup.model, setup.batch, cfg));
    }
}

void BM_NonPrivate(benchmark::State& state) { run_strategy(state, fastgc::Strategy::NonPrivate); }
void BM_NxBp(benchmark::State& state) { run_strategy(state, fastgc::Strategy::NxBp); }
void BM_MultiLoss(benchmark::State& state) { run_strategy(state, fastgc::Strategy::MultiLoss); }
void BM_Reweight(benchmark::State& state) { run_strategy(state, fastgc::Strategy::Reweight); }

}  // namespace

BENCHMARK(BM_NonPrivate)->Arg(16)->Arg(64)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_NxBp)->Arg(16)->Arg(64)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_MultiLoss)->Arg(16)->Arg(64)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_Reweight)->Arg(16)->Arg(64)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
