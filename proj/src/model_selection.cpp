#include "treeshift/model_selection.hpp"

#include "treeshift/errors.hpp"
#include "treeshift/numerics.hpp"
#include "treeshift/parsimony.hpp"

#include <omp.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <limits>

namespace treeshift {

int penalty_dimension_bound(int n, double kappa) {
  const double a = kappa * n / (2.0 + std::log(2.0) + std::log(static_cast<double>(n)));
  return static_cast<int>(std::floor(std::min(a, n - 7.0)));
}

int default_K_max(int n, double kappa) {
  const int root_n = static_cast<int>(std::floor(std::sqrt(static_cast<double>(n))));
  int k = std::min(root_n, penalty_dimension_bound(n, kappa) - 1);
  k = std::min(k, n - 3);
  return std::max(k, 0);
}

std::vector<double> default_alpha_grid(const PhyloTree& tree, int count) {
  if (count < 1) throw ValidationError("alpha grid needs at least one value");
  const double h = tree.height();
  std::vector<double> grid;
  for (int k = 0; k < count; ++k) {
    const double frac = count == 1 ? 0.2 : std::exp(std::log(0.02) + (std::log(2.0) - std::log(0.02)) * k / (count - 1));
    grid.push_back(std::log(2.0) / (frac * h));
  }
  std::sort(grid.begin(), grid.end());
  return grid;
}

std::vector<double> complexity_log_table(const PhyloTree& tree, int K_max) {
  if (K_max < 0) throw ValidationError("K must be nonnegative");
  const PartitionCounts counts = count_partitions(tree, K_max + 1);
  std::vector<double> out(K_max + 1);
  for (int K = 0; K <= K_max; ++K) out[K] = log_bigint(counts.N[K + 1]);
  return out;
}

double complexity_log(const PhyloTree& tree, int K) { return complexity_log_table(tree, K).back(); }

Penalty penalty(int K, int n, double complexity_log_K, const SelectionConfig& config) {
  if (K < 0 || n - K - 2 < 1) {
    throw ValidationError("penalty needs n - K - 2 >= 1 (n=" + std::to_string(n) +
                          ", K=" + std::to_string(K) + ")");
  }
  if (!(config.A > 1.0)) throw ValidationError("the penalty constant A must exceed 1");
  Penalty p;
  p.L = complexity_log_K + 2.0 * std::log(K + 2.0);
  const int D = config.df == DfConvention::Theorem ? K + 2 : K;
  const int N = n - K - 2;
  const double x = D > 0 ? edkhi_log(D, N, -p.L) : 0.0;
  p.pen = config.A * (n - K - 1.0) / (n - K - 2.0) * x;
  p.pen_prime = n * std::log1p(p.pen / (n - K - 1.0));
  return p;
}

WeightCheck weight_sum_check(const PhyloTree& tree, int p) {
  WeightCheck c;
  if (p < 1) return c;
  const auto logs = complexity_log_table(tree, p - 1);
  for (int K = 0; K < p; ++K) {
    const double L = logs[K] + 2.0 * std::log(K + 2.0);
    c.sum += (K + 2.0) * std::exp(-L);
  }
  c.bound = std::log(static_cast<double>(p));
  c.holds = c.sum <= c.bound;
  return c;
}

namespace {

CellOutcome run_cell(const PhyloTree& tree, const Eigen::VectorXd& Y, ProcessKind kind,
                     const GridCell& cell, const FitOptions& options) {
  CellOutcome out;
  FitOptions opts = options;
  if (kind == ProcessKind::OU) {
    opts.alpha = cell.alpha;
    opts.estimate_alpha = false;
  }
  try {
    out.fit = fit(tree, Y, cell.K, kind, opts);
  } catch (const std::exception& e) {
    out.error = e.what();
  }
  return out;
}

}  // namespace

std::vector<CellOutcome> fit_cells_serial(const PhyloTree& tree, const Eigen::VectorXd& Y,
                                          ProcessKind kind, const std::vector<GridCell>& cells,
                                          const FitOptions& options) {
  std::vector<CellOutcome> out(cells.size());
  for (std::size_t i = 0; i < cells.size(); ++i) out[i] = run_cell(tree, Y, kind, cells[i], options);
  return out;
}

std::vector<CellOutcome> fit_cells_parallel(const PhyloTree& tree, const Eigen::VectorXd& Y,
                                            ProcessKind kind, const std::vector<GridCell>& cells,
                                            const FitOptions& options, int jobs) {
  std::vector<CellOutcome> out(cells.size());
  const auto count = static_cast<long>(cells.size());
  const int threads = jobs > 0 ? jobs : omp_get_max_threads();
#pragma omp parallel for schedule(dynamic) num_threads(threads)
  for (long i = 0; i < count; ++i) out[i] = run_cell(tree, Y, kind, cells[i], options);
  return out;
}

FitResult fit_alpha_grid(const PhyloTree& tree, const Eigen::VectorXd& Y, int K,
                         const std::vector<double>& grid, const FitOptions& options,
                         bool parallel, int jobs) {
  std::vector<GridCell> cells;
  for (double a : grid) cells.push_back({K, a});
  const auto outcomes = parallel ? fit_cells_parallel(tree, Y, ProcessKind::OU, cells, options, jobs)
                                 : fit_cells_serial(tree, Y, ProcessKind::OU, cells, options);
  std::optional<FitResult> best;
  std::string last_error;
  for (const auto& o : outcomes) {
    if (!o.fit) {
      last_error = o.error;
      continue;
    }
    if (!best || o.fit->loglik > best->loglik) best = *o.fit;
  }
  if (!best) throw NumericalError("every fit on the alpha grid failed: " + last_error);
  return *best;
}

double mahalanobis_rss(const PhyloTree& tree, const ModelParams& params, const Eigen::VectorXd& Y) {
  const CovarianceModel cov = covariance(tree, params.kind, params.alpha, 1.0);
  const Whitener w(cov.correlation);
  return w.mahalanobis2(Y - tip_means(tree, params));
}

double unit_det_rss(const PhyloTree& tree, const ModelParams& params, const Eigen::VectorXd& Y) {
  const CovarianceModel cov = covariance(tree, params.kind, params.alpha, 1.0);
  const Whitener w(cov.correlation);
  return w.mahalanobis2(Y - tip_means(tree, params)) * std::exp(w.log_det() / Y.size());
}

SelectionResult select(const PhyloTree& tree, const Eigen::VectorXd& Y, ProcessKind kind,
                       const SelectionConfig& config) {
  const int n = tree.n_tips();
  if (Y.size() != n) throw ValidationError("trait vector does not match the tree");
  if (n < 3) throw ValidationError("model selection needs at least 3 tips");
  int K_max = config.K_max ? *config.K_max : default_K_max(n, config.kappa);
  if (K_max < 0 || n - K_max - 2 < 1) {
    throw ValidationError("K_max must satisfy 0 <= K_max <= n - 3");
  }
  const std::vector<double> grid =
      kind == ProcessKind::BM ? std::vector<double>{0.0}
                              : (config.alpha_grid.empty() ? default_alpha_grid(tree, config.alpha_grid_size)
                                                           : config.alpha_grid);
  std::vector<GridCell> cells;
  for (int K = 0; K <= K_max; ++K) {
    for (double a : grid) cells.push_back({K, a});
  }
  const auto outcomes = config.parallel
                            ? fit_cells_parallel(tree, Y, kind, cells, config.fit, config.jobs)
                            : fit_cells_serial(tree, Y, kind, cells, config.fit);

  SelectionResult result;
  result.fits.assign(K_max + 1, std::nullopt);
  std::vector<std::string> errors(K_max + 1);
  for (std::size_t i = 0; i < cells.size(); ++i) {
    const int K = cells[i].K;
    const auto& o = outcomes[i];
    if (!o.fit) {
      errors[K] = o.error;
      spdlog::warn("fit K={} alpha={} failed: {}", K, cells[i].alpha, o.error);
      continue;
    }
    if (!result.fits[K] || o.fit->loglik > result.fits[K]->loglik) result.fits[K] = *o.fit;
  }

  const auto logs = complexity_log_table(tree, K_max);
  int best_K = -1;
  for (int K = 0; K <= K_max; ++K) {
    CriterionRow row;
    row.K = K;
    const Penalty p = penalty(K, n, logs[K], config);
    row.L = p.L;
    row.pen = p.pen;
    row.pen_prime = p.pen_prime;
    if (result.fits[K]) {
      const FitResult& f = *result.fits[K];
      row.fitted = true;
      row.alpha = f.params.kind == ProcessKind::OU ? f.params.alpha : 0.0;
      row.loglik = f.loglik;
      row.rss = mahalanobis_rss(tree, f.params, Y);
      row.rss_unit_det = unit_det_rss(tree, f.params, Y);
      row.crit = 0.5 * n * std::log(row.rss_unit_det / n) + 0.5 * row.pen_prime;
      row.crit_ls = row.rss_unit_det * (1.0 + row.pen / (n - K - 1.0));
      if (best_K < 0 || row.crit < result.table[best_K].crit) best_K = K;
    } else {
      row.error = errors[K];
    }
    result.table.push_back(row);
  }
  if (best_K < 0) throw NumericalError("every fit failed during model selection");
  result.K_hat = best_K;
  result.best = *result.fits[best_K];
  return result;
}

}  // namespace treeshift
