// Serial reference kernels against their OpenMP counterparts, and the
// message-passing E step against dense conditioning.

#include "treeshift/em_engine.hpp"
#include "treeshift/model_selection.hpp"
#include "treeshift/simstudy.hpp"
#include "treeshift/yule.hpp"

#include <benchmark/benchmark.h>

#include <map>

using namespace treeshift;

namespace {

struct Problem {
  PhyloTree tree;
  Eigen::VectorXd Y;
  std::vector<GridCell> cells;
};

const Problem& problem(int n) {
  static std::map<int, Problem> cache;
  auto it = cache.find(n);
  if (it == cache.end()) {
    PhyloTree t = simulate_yule(n, 0.1, 7);
    Eigen::VectorXd Y = simulate_scenario(t, Scenario{}, 11).Y;
    std::vector<GridCell> cells;
    for (int K = 0; K <= default_K_max(n, 0.9); ++K) {
      for (double a : default_alpha_grid(t)) cells.push_back({K, a});
    }
    it = cache.emplace(n, Problem{std::move(t), std::move(Y), std::move(cells)}).first;
  }
  return it->second;
}

void BM_GridSerial(benchmark::State& state) {
  const Problem& p = problem(static_cast<int>(state.range(0)));
  for (auto _ : state) {
    benchmark::DoNotOptimize(fit_cells_serial(p.tree, p.Y, ProcessKind::OU, p.cells, {}));
  }
  state.counters["cells"] = static_cast<double>(p.cells.size());
}

void BM_GridParallel(benchmark::State& state) {
  const Problem& p = problem(static_cast<int>(state.range(0)));
  for (auto _ : state) {
    benchmark::DoNotOptimize(fit_cells_parallel(p.tree, p.Y, ProcessKind::OU, p.cells, {}));
  }
  state.counters["cells"] = static_cast<double>(p.cells.size());
}

void study(benchmark::State& state, bool parallel) {
  StudyConfig cfg;
  cfg.replicates = 4;
  cfg.cells = {{32, Scenario{}}};
  cfg.selection.alpha_grid_size = 3;
  cfg.parallel = parallel;
  for (auto _ : state) benchmark::DoNotOptimize(run_study(cfg));
}

void BM_StudySerial(benchmark::State& state) { study(state, false); }
void BM_StudyParallel(benchmark::State& state) { study(state, true); }

void BM_EStepMessagePassing(benchmark::State& state) {
  const Problem& p = problem(static_cast<int>(state.range(0)));
  const ModelParams params = initialize(p.tree, p.Y, 3, ProcessKind::OU, FitOptions{.alpha = 3.0});
  for (auto _ : state) benchmark::DoNotOptimize(e_step(p.tree, params, p.Y));
  state.SetComplexityN(state.range(0));
}

void BM_EStepDense(benchmark::State& state) {
  const Problem& p = problem(static_cast<int>(state.range(0)));
  const ModelParams params = initialize(p.tree, p.Y, 3, ProcessKind::OU, FitOptions{.alpha = 3.0});
  for (auto _ : state) benchmark::DoNotOptimize(e_step_dense(p.tree, params, p.Y));
  state.SetComplexityN(state.range(0));
}

}  // namespace

BENCHMARK(BM_GridSerial)->Arg(32)->Arg(64)->Unit(benchmark::kMillisecond)->UseRealTime();
BENCHMARK(BM_GridParallel)->Arg(32)->Arg(64)->Unit(benchmark::kMillisecond)->UseRealTime();
BENCHMARK(BM_StudySerial)->Unit(benchmark::kMillisecond)->UseRealTime();
BENCHMARK(BM_StudyParallel)->Unit(benchmark::kMillisecond)->UseRealTime();
BENCHMARK(BM_EStepMessagePassing)->RangeMultiplier(2)->Range(16, 256)->Complexity();
BENCHMARK(BM_EStepDense)->RangeMultiplier(2)->Range(16, 256)->Complexity();

BENCHMARK_MAIN();
