#include <random>
#include <vector>

#include <benchmark/benchmark.h>

#include "loanrisk/kernels.hpp"
#include "loanrisk/network.hpp"

namespace {

using namespace loanrisk;

constexpr std::size_t kInputs = 60;

MlpParams bench_params() {
  Architecture arch;
  arch.input_dim = kInputs;
  arch.hidden = {200, 140, 140, 140, 140};
  return init_params(arch, 7);
}

RowMatrix bench_inputs(Eigen::Index n) {
  std::mt19937_64 rng(11);
  std::normal_distribution<double> z;
  RowMatrix x(n, static_cast<Eigen::Index>(kInputs));
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = z(rng);
  return x;
}

std::vector<State> bench_targets(Eigen::Index n) {
  std::vector<State> t(static_cast<std::size_t>(n));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<State>(i % kNumStates);
  return t;
}

void BM_ProbsSerial(benchmark::State& st) {
  const auto p = bench_params();
  const auto x = bench_inputs(st.range(0));
  RowMatrix probs;
  for (auto _ : st) {
    kernels::batch_probs_serial(p, x, probs);
    benchmark::DoNotOptimize(probs.data());
  }
  st.SetItemsProcessed(st.iterations() * st.range(0));
}

void BM_ProbsParallel(benchmark::State& st) {
  const auto p = bench_params();
  const auto x = bench_inputs(st.range(0));
  kernels::set_worker_threads(static_cast<int>(st.range(1)));
  RowMatrix probs;
  for (auto _ : st) {
    kernels::batch_probs(p, x, probs);
    benchmark::DoNotOptimize(probs.data());
  }
  kernels::set_worker_threads(0);
  st.SetItemsProcessed(st.iterations() * st.range(0));
}

void BM_GradientSerial(benchmark::State& st) {
  const auto p = bench_params();
  const auto x = bench_inputs(st.range(0));
  const auto t = bench_targets(st.range(0));
  for (auto _ : st) {
    auto g = kernels::batch_gradient_serial(p, x, t);
    benchmark::DoNotOptimize(g.loss_sum);
  }
  st.SetItemsProcessed(st.iterations() * st.range(0));
}

void BM_GradientParallel(benchmark::State& st) {
  const auto p = bench_params();
  const auto x = bench_inputs(st.range(0));
  const auto t = bench_targets(st.range(0));
  kernels::set_worker_threads(static_cast<int>(st.range(1)));
  for (auto _ : st) {
    auto g = kernels::batch_gradient(p, x, t);
    benchmark::DoNotOptimize(g.loss_sum);
  }
  kernels::set_worker_threads(0);
  st.SetItemsProcessed(st.iterations() * st.range(0));
}

void BM_InputGradientSerial(benchmark::State& st) {
  const auto p = bench_params();
  const auto x = bench_inputs(st.range(0));
  RowMatrix g;
  for (auto _ : st) {
    kernels::batch_input_gradient_serial(p, x, State::kPaidOff, g);
    benchmark::DoNotOptimize(g.data());
  }
  st.SetItemsProcessed(st.iterations() * st.range(0));
}

void BM_InputGradientParallel(benchmark::State& st) {
  const auto p = bench_params();
  const auto x = bench_inputs(st.range(0));
  kernels::set_worker_threads(static_cast<int>(st.range(1)));
  RowMatrix g;
  for (auto _ : st) {
    kernels::batch_input_gradient(p, x, State::kPaidOff, g);
    benchmark::DoNotOptimize(g.data());
  }
  kernels::set_worker_threads(0);
  st.SetItemsProcessed(st.iterations() * st.range(0));
}

}  // namespace

BENCHMARK(BM_ProbsSerial)->Arg(4096)->Unit(benchmark::kMillisecond)->UseRealTime();
BENCHMARK(BM_ProbsParallel)->Args({4096, 1})->Args({4096, 2})->Args({4096, 4})->Unit(benchmark::kMillisecond)->UseRealTime();
BENCHMARK(BM_GradientSerial)->Arg(4096)->Unit(benchmark::kMillisecond)->UseRealTime();
BENCHMARK(BM_GradientParallel)->Args({4096, 1})->Args({4096, 2})->Args({4096, 4})->Unit(benchmark::kMillisecond)->UseRealTime();
BENCHMARK(BM_InputGradientSerial)->Arg(2048)->Unit(benchmark::kMillisecond)->UseRealTime();
BENCHMARK(BM_InputGradientParallel)->Args({2048, 1})->Args({2048, 4})->Unit(benchmark::kMillisecond)->UseRealTime();

BENCHMARK_MAIN();
