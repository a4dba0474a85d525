// SPDX-License-Identifier: Apache-2.0
// OpenMP GEMM kernels against the serial reference, at shapes the model hits.
#include "paracnn/kernels.hpp"

#include <benchmark/benchmark.h>

#include <random>
#include <vector>

namespace {

using Kernel = void (*)(std::span<const double>, std::span<const double>,
                        std::span<double>, std::size_t, std::size_t,
                        std::size_t, bool);

std::vector<double> random_matrix(std::size_t n, unsigned seed) {
  std::mt19937_64 gen(seed);
  std::uniform_real_distribution<double> dist(-1.0, 1.0);
  std::vector<double> v(n);
  for (auto &x : v)
    x = dist(gen);
  return v;
}

template <Kernel K> void run(benchmark::State &state) {
  const auto m = static_cast<std::size_t>(state.range(0));
  const auto k = static_cast<std::size_t>(state.range(1));
  const auto n = static_cast<std::size_t>(state.range(2));
  const auto a = random_matrix(m * k, 1);
  const auto b = random_matrix(k * n, 2);
  std::vector<double> c(m * n);
  for (auto _ : state) {
    K(a, b, c, m, k, n, false);
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * m * k * n));
  state.counters["threads"] = paracnn::kernels::max_threads();
}

// rows × inner × cols: word-stack frames, attention scores, the output layer
void shapes(benchmark::internal::Benchmark *b) {
  b->Args({384, 320, 128})->Args({64, 64, 64})->Args({384, 64, 60})
      ->Args({1024, 512, 512});
}

} // namespace

BENCHMARK(run<paracnn::kernels::gemm_nn>)->Name("gemm_nn/omp")->Apply(shapes);
BENCHMARK(run<paracnn::kernels::reference::gemm_nn>)
    ->Name("gemm_nn/reference")->Apply(shapes);
BENCHMARK(run<paracnn::kernels::gemm_nt>)->Name("gemm_nt/omp")->Apply(shapes);
BENCHMARK(run<paracnn::kernels::reference::gemm_nt>)
    ->Name("gemm_nt/reference")->Apply(shapes);
BENCHMARK(run<paracnn::kernels::gemm_tn>)->Name("gemm_tn/omp")->Apply(shapes);
BENCHMARK(run<paracnn::kernels::reference::gemm_tn>)
    ->Name("gemm_tn/reference")->Apply(shapes);

BENCHMARK_MAIN();
