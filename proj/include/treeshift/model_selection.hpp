#pragma once

#include "treeshift/em_engine.hpp"
#include "treeshift/phylo_tree.hpp"

#include <optional>
#include <string>
#include <vector>

namespace treeshift {

// Degrees of freedom used in EDkhi[D, N, q] for K shifts.
enum class DfConvention {
  Theorem,      // (K + 2, n - K - 2), from the oracle inequality with D = K + 1
  Proposition,  // (K, n - K - 2), as written in the penalty statement
};

struct SelectionConfig {
  double A = 1.1;
  double kappa = 0.9;
  std::optional<int> K_max;
  DfConvention df = DfConvention::Theorem;
  std::vector<double> alpha_grid;  // empty: default_alpha_grid(tree, alpha_grid_size)
  int alpha_grid_size = 6;
  FitOptions fit;
  bool parallel = true;
  int jobs = 0;  // 0: OpenMP default
};

// p = floor(min(kappa n / (2 + log 2 + log n), n - 7)).
int penalty_dimension_bound(int n, double kappa);
// min(floor(sqrt(n)), p - 1), never negative and never above n - 3.
int default_K_max(int n, double kappa);

// ln 2 / t for 6 (or `count`) half-lives log-spaced over [2%, 200%] of the
// tree height.
std::vector<double> default_alpha_grid(const PhyloTree& tree, int count = 6);

// log N_{K+1}(tree) for K = 0..K_max: log of the number of parsimonious
// configurations with K shifts.
std::vector<double> complexity_log_table(const PhyloTree& tree, int K_max);
double complexity_log(const PhyloTree& tree, int K);

struct Penalty {
  double L = 0.0;  // log complexity + 2 log(K + 2)
  double pen = 0.0;
  double pen_prime = 0.0;
};

Penalty penalty(int K, int n, double complexity_log_K, const SelectionConfig& config = {});

// sum_K (K + 2) exp(-L_K) for K = 0..p-1, compared with log p.
struct WeightCheck {
  double sum = 0.0;
  double bound = 0.0;
  bool holds = false;
};

WeightCheck weight_sum_check(const PhyloTree& tree, int p);

struct CriterionRow {
  int K = 0;
  bool fitted = false;
  std::string error;
  double alpha = 0.0;
  double loglik = 0.0;
  double rss = 0.0;           // Mahalanobis RSS under the fit's own V(alpha)
  double rss_unit_det = 0.0;  // same residual in the metric of V / det(V)^(1/n)
  double L = 0.0;
  double pen = 0.0;
  double pen_prime = 0.0;
  // (n/2) log(rss_unit_det / n) + pen' / 2, which is -loglik + pen' / 2 up to
  // a constant, so rows fitted at different alphas stay comparable
  double crit = 0.0;
  double crit_ls = 0.0;  // rss_unit_det (1 + pen / (n - K - 1))
};

struct SelectionResult {
  std::vector<CriterionRow> table;
  int K_hat = 0;
  FitResult best;
  std::vector<std::optional<FitResult>> fits;  // best fit per K
};

// A single (K, alpha) fit; alpha is ignored for BM.
struct GridCell {
  int K = 0;
  double alpha = 0.0;
};

struct CellOutcome {
  std::optional<FitResult> fit;
  std::string error;
};

// Independent fits over a list of cells. The parallel map uses OpenMP with
// dynamic scheduling; both return outcomes in cell order.
std::vector<CellOutcome> fit_cells_serial(const PhyloTree& tree, const Eigen::VectorXd& Y,
                                          ProcessKind kind, const std::vector<GridCell>& cells,
                                          const FitOptions& options);
std::vector<CellOutcome> fit_cells_parallel(const PhyloTree& tree, const Eigen::VectorXd& Y,
                                            ProcessKind kind, const std::vector<GridCell>& cells,
                                            const FitOptions& options, int jobs = 0);

// Best-likelihood fit over a fixed-alpha grid.
FitResult fit_alpha_grid(const PhyloTree& tree, const Eigen::VectorXd& Y, int K,
                         const std::vector<double>& grid, const FitOptions& options,
                         bool parallel = true, int jobs = 0);

double mahalanobis_rss(const PhyloTree& tree, const ModelParams& params, const Eigen::VectorXd& Y);
// Mahalanobis RSS for the covariance rescaled to unit determinant.
double unit_det_rss(const PhyloTree& tree, const ModelParams& params, const Eigen::VectorXd& Y);

SelectionResult select(const PhyloTree& tree, const Eigen::VectorXd& Y, ProcessKind kind,
                       const SelectionConfig& config = {});

}  // namespace treeshift
