#pragma once

#include "treeshift/phylo_tree.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace treeshift {

enum class ProcessKind { BM, OU };

std::string_view to_string(ProcessKind kind);
ProcessKind parse_process_kind(std::string_view text);

// Shift vector over all nodes. Entry 0 holds the root value (mu for BM,
// beta_1 for OU); entry i > 0 is the shift at the start of the branch above
// node i, zero when there is none.
struct ShiftConfig {
  std::vector<double> delta;

  static ShiftConfig none(int n_nodes, double root_value);

  double root_value() const { return delta.front(); }
  // Shifted branches (child node ids), ascending.
  std::vector<NodeId> support() const;
  int n_shifts() const;
};

struct ModelParams {
  ProcessKind kind = ProcessKind::BM;
  ShiftConfig shifts;
  double sigma2 = 1.0;  // BM rate; derived as 2 * alpha * gamma2 for OU
  double alpha = 0.0;   // OU selection strength
  double gamma2 = 1.0;  // OU stationary variance

  static ModelParams bm(ShiftConfig shifts, double sigma2);
  static ModelParams ou(ShiftConfig shifts, double alpha, double gamma2);

  // Multiplier of the correlation structure: Var(Y) = scale() * V.
  double scale() const { return kind == ProcessKind::OU ? gamma2 : sigma2; }
  double bm_rate() const { return kind == ProcessKind::OU ? 2.0 * alpha * gamma2 : sigma2; }

  // Throws ValidationError for non-positive rates, wrong vector size, or an
  // OU model on a non-ultrametric tree.
  void validate(const PhyloTree& tree) const;
};

// +1 at internal node i, -1 at each of its children.
Eigen::VectorXi kernel_vector(const PhyloTree& tree, NodeId i);

// Diagonal of W(alpha): 1 at the root, 1 - exp(-alpha (h - t_pa(i))) elsewhere.
Eigen::VectorXd ou_weights(const PhyloTree& tree, double alpha);

// Expected trait value at every node (Z then Y).
Eigen::VectorXd node_means(const PhyloTree& tree, const ModelParams& params);

// Expected tip values: T Delta (BM) or T W(alpha) Delta (OU).
Eigen::VectorXd tip_means(const PhyloTree& tree, const ModelParams& params);

// Primary optimum on every branch (OU): beta = U Delta.
Eigen::VectorXd branch_optima(const PhyloTree& tree, const ShiftConfig& shifts);

// Var(Y) = scale * correlation.
struct CovarianceModel {
  Eigen::MatrixXd correlation;
  double scale = 1.0;

  Eigen::MatrixXd matrix() const { return scale * correlation; }
};

// Tip covariance: t_ij (BM) or exp(-alpha d_ij) (OU).
CovarianceModel covariance(const PhyloTree& tree, const ModelParams& params);
CovarianceModel covariance(const PhyloTree& tree, ProcessKind kind, double alpha, double scale);

// Full (m+n) x (m+n) covariance of X over all nodes. The BM root is fixed so
// its row and column are zero.
Eigen::MatrixXd node_covariance(const PhyloTree& tree, const ModelParams& params);

enum class SimilarityDirection { BmToOu, OuToBm };

// BM and OU shift vectors with identical tip means: Delta_OU = W(alpha)^-1 Delta_BM.
ShiftConfig similar_shifts(const PhyloTree& tree, const ShiftConfig& shifts, double alpha,
                           SimilarityDirection direction);

// Draws X over all nodes. Each node's standard normal comes from its own
// stream keyed by (seed, node id).
Eigen::VectorXd simulate_traits(const PhyloTree& tree, const ModelParams& params,
                                std::uint64_t seed);

inline Eigen::VectorXd tip_values(const PhyloTree& tree, const Eigen::VectorXd& all_nodes) {
  return all_nodes.tail(tree.n_tips());
}

}  // namespace treeshift
