#include "treeshift/simstudy.hpp"

#include "treeshift/em_engine.hpp"
#include "treeshift/errors.hpp"
#include "treeshift/parsimony.hpp"
#include "treeshift/yule.hpp"

#include <omp.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <map>
#include <random>

namespace treeshift {

namespace {

double choose2(double x) { return 0.5 * x * (x - 1.0); }

}  // namespace

double adjusted_rand_index(std::span<const int> a, std::span<const int> b) {
  if (a.size() != b.size()) throw ValidationError("partitions must cover the same items");
  std::map<std::pair<int, int>, long> joint;
  std::map<int, long> rows, cols;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ++joint[{a[i], b[i]}];
    ++rows[a[i]];
    ++cols[b[i]];
  }
  double index = 0.0, sum_rows = 0.0, sum_cols = 0.0;
  for (const auto& [key, count] : joint) index += choose2(static_cast<double>(count));
  for (const auto& [key, count] : rows) sum_rows += choose2(static_cast<double>(count));
  for (const auto& [key, count] : cols) sum_cols += choose2(static_cast<double>(count));
  const double total = choose2(static_cast<double>(a.size()));
  const double expected = total > 0.0 ? sum_rows * sum_cols / total : 0.0;
  const double max_index = 0.5 * (sum_rows + sum_cols);
  const double denom = max_index - expected;
  if (denom == 0.0) return index == expected ? 1.0 : 0.0;
  return (index - expected) / denom;
}

std::vector<int> tip_partition(const PhyloTree& tree, const ShiftConfig& shifts) {
  std::vector<char> marked(tree.n_nodes(), 0);
  marked[0] = 1;
  for (NodeId s : shifts.support()) marked[s] = 1;
  std::vector<NodeId> regime(tree.n_nodes(), 0);
  for (NodeId v : tree.preorder()) regime[v] = marked[v] ? v : regime[tree.parent(v)];
  std::vector<int> raw(tree.n_tips());
  for (int k = 0; k < tree.n_tips(); ++k) raw[k] = regime[tree.tip_node(k)];
  return TipColoring::canonical(raw).colors;
}

std::vector<NodeId> balanced_shift_positions(const PhyloTree& tree, int K, Rng& rng) {
  if (K < 0 || K > tree.n_tips() - 1) throw ValidationError("K must lie in [0, n - 1]");
  if (K == 0) return {};
  const double h = tree.height();
  std::vector<std::vector<NodeId>> crossing(K);
  for (int k = 0; k < K; ++k) {
    const double lo = h * k / K;
    const double hi = h * (k + 1) / K;
    for (NodeId v = 1; v < tree.n_nodes(); ++v) {
      if (tree.time(tree.parent(v)) < hi && tree.time(v) > lo) crossing[k].push_back(v);
    }
    if (crossing[k].empty()) throw ValidationError("a height segment contains no edge");
  }
  for (int attempt = 0; attempt < 10000; ++attempt) {
    std::vector<NodeId> support;
    for (int k = 0; k < K; ++k) {
      std::uniform_int_distribution<std::size_t> pick(0, crossing[k].size() - 1);
      support.push_back(crossing[k][pick(rng)]);
    }
    if (support_is_parsimonious(tree, support)) {
      std::sort(support.begin(), support.end());
      return support;
    }
  }
  throw ValidationError("could not draw a parsimonious balanced placement of " +
                        std::to_string(K) + " shifts");
}

SimulatedTraits simulate_scenario(const PhyloTree& tree, const Scenario& scenario, std::uint64_t seed) {
  Rng rng = make_rng(seed, "shifts");
  const auto support = balanced_shift_positions(tree, scenario.K, rng);
  ShiftConfig shifts = ShiftConfig::none(tree.n_nodes(), scenario.root_value);
  std::bernoulli_distribution sign(0.5);
  std::normal_distribution<double> size(scenario.mixture.mean, scenario.mixture.sd);
  for (NodeId j : support) {
    const double v = size(rng);
    shifts.delta[j] = sign(rng) ? v : -v;
  }
  SimulatedTraits out;
  out.truth = scenario.kind == ProcessKind::OU ? ModelParams::ou(shifts, scenario.alpha, scenario.gamma2)
                                               : ModelParams::bm(shifts, scenario.sigma2);
  out.nodes = simulate_traits(tree, out.truth, seed);
  out.Y = tip_values(tree, out.nodes);
  return out;
}

SupportScores support_scores(const PhyloTree& tree, std::span<const NodeId> truth,
                             std::span<const NodeId> fitted) {
  std::vector<char> is_true(tree.n_nodes(), 0);
  for (NodeId t : truth) is_true[t] = 1;
  int tp = 0, fp = 0;
  for (NodeId f : fitted) (is_true[f] ? tp : fp)++;
  SupportScores s;
  const double k_true = static_cast<double>(truth.size());
  s.sensitivity = truth.empty() ? 1.0 : tp / k_true;
  s.fpr = fp / (tree.n_nodes() - k_true);
  return s;
}

ReplicateResult run_replicate(const PhyloTree& tree, const Scenario& scenario,
                              const SelectionConfig& config, std::uint64_t seed, int replicate) {
  ReplicateResult r;
  r.replicate = replicate;
  r.seed = seed;
  r.K_true = scenario.K;
  try {
    const SimulatedTraits data = simulate_scenario(tree, scenario, seed);
    SelectionConfig cfg = config;
    cfg.fit.seed = derive_seed(seed, stream_id("fit"));
    const SelectionResult sel = select(tree, data.Y, scenario.kind, cfg);
    const FitResult& f = sel.best;
    r.K_hat = sel.K_hat;
    const auto truth_partition = tip_partition(tree, data.truth.shifts);
    const auto fit_partition = tip_partition(tree, f.params.shifts);
    r.ari = adjusted_rand_index(truth_partition, fit_partition);
    r.alpha_hat = f.params.alpha;
    r.gamma2_hat = f.params.kind == ProcessKind::OU ? f.params.gamma2 : f.params.sigma2;
    r.root_hat = f.params.shifts.root_value();
    r.loglik = f.loglik;
    r.n_equivalent = f.equivalents.class_size.str();
    r.unambiguous = f.equivalents.class_size == 1 && !f.equivalents.homoplasy;

    const auto truth_support = data.truth.shifts.support();
    const auto fit_support = f.params.shifts.support();
    const SupportScores own = support_scores(tree, truth_support, fit_support);
    if (r.unambiguous) {
      r.sensitivity = own.sensitivity;
      r.fpr = own.fpr;
    }
    r.best_sensitivity = own.sensitivity;
    r.best_fpr = own.fpr;
    for (const auto& s : f.equivalents.solutions) {
      const auto supp = s.support();
      const SupportScores sc = support_scores(tree, truth_support, supp);
      if (sc.sensitivity > r.best_sensitivity ||
          (sc.sensitivity == r.best_sensitivity && sc.fpr < r.best_fpr)) {
        r.best_sensitivity = sc.sensitivity;
        r.best_fpr = sc.fpr;
      }
    }
  } catch (const std::exception& e) {
    r.error = e.what();
    spdlog::warn("replicate {} failed: {}", replicate, e.what());
  }
  return r;
}

PhyloTree study_tree(const StudyConfig& config, int n_tips) {
  const std::uint64_t tree_seed = derive_seed(config.seed, stream_id("tree"));
  return simulate_yule(n_tips, config.birth_rate, derive_seed(tree_seed, static_cast<std::uint64_t>(n_tips)));
}

CellSummary summarize(const StudyCell& cell, std::vector<ReplicateResult> replicates) {
  CellSummary s;
  s.cell = cell;
  s.replicates = std::move(replicates);
  std::vector<double> aris;
  int le = 0, eq = 0;
  double sens = 0.0, fpr = 0.0;
  for (const auto& r : s.replicates) {
    if (!r.error.empty()) {
      ++s.n_failed;
      continue;
    }
    aris.push_back(r.ari);
    if (r.K_hat <= r.K_true) ++le;
    if (r.K_hat == r.K_true) ++eq;
    if (r.K_hat >= static_cast<int>(s.K_hat_histogram.size())) s.K_hat_histogram.resize(r.K_hat + 1, 0);
    ++s.K_hat_histogram[r.K_hat];
    if (r.unambiguous) {
      ++s.n_unambiguous;
      sens += r.sensitivity;
      fpr += r.fpr;
    }
  }
  const auto ok = static_cast<double>(aris.size());
  if (!aris.empty()) {
    std::sort(aris.begin(), aris.end());
    const std::size_t m = aris.size();
    s.median_ari = m % 2 ? aris[m / 2] : 0.5 * (aris[m / 2 - 1] + aris[m / 2]);
    s.frac_K_hat_le_true = le / ok;
    s.frac_K_hat_eq_true = eq / ok;
  }
  if (s.n_unambiguous > 0) {
    s.mean_sensitivity = sens / s.n_unambiguous;
    s.mean_fpr = fpr / s.n_unambiguous;
  }
  return s;
}

std::vector<CellSummary> run_study(const StudyConfig& config) {
  if (config.cells.empty()) throw ValidationError("the study needs at least one cell");
  if (config.replicates < 1) throw ValidationError("the study needs at least one replicate");
  std::map<int, PhyloTree> trees;
  for (const auto& cell : config.cells) {
    if (!trees.count(cell.n_tips)) trees.emplace(cell.n_tips, study_tree(config, cell.n_tips));
  }
  const int reps = config.replicates;
  const long total = static_cast<long>(config.cells.size()) * reps;
  std::vector<ReplicateResult> results(total);
  SelectionConfig inner = config.selection;
  if (config.parallel) inner.parallel = false;

  auto run = [&](long idx) {
    const std::size_t c = static_cast<std::size_t>(idx / reps);
    const int r = static_cast<int>(idx % reps);
    const std::uint64_t seed = derive_seed(config.seed, (static_cast<std::uint64_t>(c) << 32) | static_cast<std::uint64_t>(r));
    results[idx] = run_replicate(trees.at(config.cells[c].n_tips), config.cells[c].scenario, inner, seed, r);
  };
  if (config.parallel) {
    const int threads = config.jobs > 0 ? config.jobs : omp_get_max_threads();
#pragma omp parallel for schedule(dynamic) num_threads(threads)
    for (long i = 0; i < total; ++i) run(i);
  } else {
    for (long i = 0; i < total; ++i) run(i);
  }

  std::vector<CellSummary> out;
  for (std::size_t c = 0; c < config.cells.size(); ++c) {
    std::vector<ReplicateResult> cell_results(results.begin() + static_cast<long>(c) * reps,
                                              results.begin() + static_cast<long>(c + 1) * reps);
    out.push_back(summarize(config.cells[c], std::move(cell_results)));
  }
  return out;
}

}  // namespace treeshift
