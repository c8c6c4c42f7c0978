#pragma once

#include "treeshift/numerics.hpp"
#include "treeshift/parsimony.hpp"
#include "treeshift/phylo_tree.hpp"
#include "treeshift/shift_model.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <optional>
#include <vector>

namespace treeshift {

// Moments of X given the tip values Y.
struct ConditionalMoments {
  Eigen::VectorXd mean;        // E[X_j | Y]
  Eigen::VectorXd var;         // Var[X_j | Y]
  Eigen::VectorXd cov_parent;  // Cov(X_j, X_pa(j) | Y); 0 at the root

  // Var[X_j - e X_pa(j) | Y]
  double var_increment(const PhyloTree& tree, NodeId j, double e = 1.0) const {
    const NodeId p = tree.parent(j);
    return var(j) + e * e * var(p) - 2.0 * e * cov_parent(j);
  }
};

// Two-pass Gaussian message passing, linear in the number of nodes.
ConditionalMoments e_step(const PhyloTree& tree, const ModelParams& params,
                          const Eigen::VectorXd& Y);

// Same moments by dense conditioning of the joint Gaussian (test oracle).
ConditionalMoments e_step_dense(const PhyloTree& tree, const ModelParams& params,
                                const Eigen::VectorXd& Y);

// Expected complete log-likelihood Q and its decomposition. `costs(j)` is
// C_j^BM = (E_j - E_pa - Delta_j)^2 / l_j (the BM root is the fixed value
// mu) or C_j^OU = (E_j - e_j E_pa - beta_j (1 - e_j))^2 / c_j with
// c_j = 1 - e_j^2 and C_0^OU = (E_0 - beta_0)^2.
struct CompleteLoglik {
  double value = 0.0;
  Eigen::VectorXd costs;
  double variance_term = 0.0;  // expected sum of squared innovations from the variances
};

CompleteLoglik expected_complete_loglik(const PhyloTree& tree, const ModelParams& params,
                                        const ConditionalMoments& moments);

// Exact maximiser of Q over the K shift positions, mu and sigma2.
ModelParams m_step_bm(const PhyloTree& tree, const ConditionalMoments& moments, int K);

struct OuStepReport {
  bool moved = false;
  bool lasso_used = false;
  double cost_before = 0.0;
  double cost_after = 0.0;
};

// Generalized M step for the OU model at fixed alpha: the incumbent is kept
// unless the Lasso candidate or a single-shift relocation lowers C^OU.
ModelParams m_step_ou(const PhyloTree& tree, const ConditionalMoments& moments, int K,
                      const ModelParams& incumbent, OuStepReport* report = nullptr);

struct AlphaUpdate {
  double alpha = 0.0;
  bool at_boundary = false;
  double q_before = 0.0;
  double q_after = 0.0;
};

// Maximises Q over alpha in [1e-4 / h, 1e3 / h] with the other parameters
// fixed; returns the incoming alpha unless Q increases.
AlphaUpdate update_alpha(const PhyloTree& tree, const ConditionalMoments& moments,
                         const ModelParams& params);

struct FitOptions {
  std::optional<double> alpha;  // OU: fixed selection strength
  bool estimate_alpha = false;  // OU: update alpha inside the EM loop
  int max_iter = 1000;
  double tol = 1e-6;            // relative change of the observed log-likelihood
  int restarts = 2;             // perturbed restarts on top of the Lasso and forward starts
  bool relocate = true;         // single-shift relocation search between EM runs
  std::uint64_t seed = 0;
  std::size_t max_solutions = 1000;
  bool dense_e_step = false;
};

// Starting values: Lasso with exactly K shifts on the whitened linear model,
// alpha from the pairwise regression when it is not fixed.
ModelParams initialize(const PhyloTree& tree, const Eigen::VectorXd& Y, int K, ProcessKind kind,
                       const FitOptions& options = {});

struct EquivalenceSummary {
  BigInt class_size = 1;
  std::vector<ShiftConfig> solutions;
  bool truncated = false;
  bool homoplasy = false;
};

struct FitResult {
  ModelParams params;
  int K = 0;
  double loglik = 0.0;
  int iterations = 0;
  bool converged = false;
  bool alpha_at_boundary = false;
  std::vector<double> trace;  // observed log-likelihood after each iteration
  EquivalenceSummary equivalents;
};

// Observed log-likelihood of the tip values.
double observed_loglik(const PhyloTree& tree, const ModelParams& params, const Eigen::VectorXd& Y);

FitResult fit(const PhyloTree& tree, const Eigen::VectorXd& Y, int K, ProcessKind kind,
              const FitOptions& options = {});

// Every parsimonious shift configuration with the same tip means as
// `params`, up to `max_solutions`.
EquivalenceSummary equivalent_solutions(const PhyloTree& tree, const ModelParams& params,
                                        std::size_t max_solutions);

// Support helpers shared by the M steps.
bool support_is_parsimonious(const PhyloTree& tree, std::span<const NodeId> support);

}  // namespace treeshift
