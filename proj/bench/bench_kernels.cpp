// Serial reference kernels vs their OpenMP counterparts, plus exact top-k
// scoring under both execution policies. Thread count follows OMP_NUM_THREADS.

#include <benchmark/benchmark.h>

#include <random>
#include <string>

#include "cona/numerics.hpp"
#include "cona/retrieval.hpp"

namespace {

cona::Matrix random_matrix(std::size_t rows, std::size_t cols, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd;
  cona::Matrix m(rows, cols);
  for (double& v : m.values()) v = nd(rng);
  return m;
}

using Kernel = cona::Matrix (*)(const cona::Matrix&, const cona::Matrix&);

// Shapes mirror training: a batch of n rows against n rows (similarity) or
// weight gradients of width 64.
template <Kernel K>
void BM_MatmulT(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const cona::Matrix a = random_matrix(n, 64, 1), b = random_matrix(n, 64, 2);
  for (auto _ : state) benchmark::DoNotOptimize(K(a, b));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n * n * 64));
}

template <Kernel K>
void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const cona::Matrix a = random_matrix(n, n, 3), b = random_matrix(n, 64, 4);
  for (auto _ : state) benchmark::DoNotOptimize(K(a, b));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n * n * 64));
}

template <Kernel K>
void BM_MatmulTN(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const cona::Matrix a = random_matrix(n, 64, 5), b = random_matrix(n, 64, 6);
  for (auto _ : state) benchmark::DoNotOptimize(K(a, b));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n * 64 * 64));
}

BENCHMARK(BM_MatmulT<cona::serial::matmul_t>)->Name("matmul_t/serial")->RangeMultiplier(4)->Range(64, 1024);
BENCHMARK(BM_MatmulT<cona::parallel::matmul_t>)->Name("matmul_t/parallel")->RangeMultiplier(4)->Range(64, 1024);
BENCHMARK(BM_Matmul<cona::serial::matmul>)->Name("matmul/serial")->RangeMultiplier(4)->Range(64, 1024);
BENCHMARK(BM_Matmul<cona::parallel::matmul>)->Name("matmul/parallel")->RangeMultiplier(4)->Range(64, 1024);
BENCHMARK(BM_MatmulTN<cona::serial::matmul_tn>)->Name("matmul_tn/serial")->RangeMultiplier(4)->Range(64, 1024);
BENCHMARK(BM_MatmulTN<cona::parallel::matmul_tn>)->Name("matmul_tn/parallel")->RangeMultiplier(4)->Range(64, 1024);

void BM_TopkBatch(benchmark::State& state) {
  const auto exec = state.range(1) ? cona::Exec::Parallel : cona::Exec::Serial;
  const auto g = static_cast<std::size_t>(state.range(0));
  std::vector<std::string> ids;
  for (std::size_t i = 0; i < g; ++i) ids.push_back(std::to_string(i));
  const cona::RetrievalIndex index =
      cona::build_index(ids, cona::EmbeddingBatch::normalized(random_matrix(g, 32, 7)));
  const auto queries = cona::EmbeddingBatch::normalized(random_matrix(256, 32, 8));
  cona::ExecScope scope(exec);
  for (auto _ : state) benchmark::DoNotOptimize(cona::topk_batch(index, queries, 10));
  state.SetLabel(state.range(1) ? "parallel" : "serial");
}
BENCHMARK(BM_TopkBatch)->ArgsProduct({{1024, 10000}, {0, 1}});

}  // namespace

BENCHMARK_MAIN();
