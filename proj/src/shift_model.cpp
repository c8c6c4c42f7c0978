#include "treeshift/shift_model.hpp"

#include "treeshift/errors.hpp"
#include "treeshift/rng.hpp"

#include <cmath>
#include <random>

namespace treeshift {

std::string_view to_string(ProcessKind kind) { return kind == ProcessKind::OU ? "ou" : "bm"; }

ProcessKind parse_process_kind(std::string_view text) {
  if (text == "bm" || text == "BM") return ProcessKind::BM;
  if (text == "ou" || text == "OU" || text == "ousun" || text == "OUsun") return ProcessKind::OU;
  throw ValidationError("unknown process kind '" + std::string(text) + "' (expected bm or ou)");
}

ShiftConfig ShiftConfig::none(int n_nodes, double root_value) {
  ShiftConfig s;
  s.delta.assign(n_nodes, 0.0);
  s.delta[0] = root_value;
  return s;
}

std::vector<NodeId> ShiftConfig::support() const {
  std::vector<NodeId> out;
  for (std::size_t i = 1; i < delta.size(); ++i) {
    if (delta[i] != 0.0) out.push_back(static_cast<NodeId>(i));
  }
  return out;
}

int ShiftConfig::n_shifts() const { return static_cast<int>(support().size()); }

ModelParams ModelParams::bm(ShiftConfig shifts, double sigma2) {
  ModelParams p;
  p.kind = ProcessKind::BM;
  p.shifts = std::move(shifts);
  p.sigma2 = sigma2;
  return p;
}

ModelParams ModelParams::ou(ShiftConfig shifts, double alpha, double gamma2) {
  ModelParams p;
  p.kind = ProcessKind::OU;
  p.shifts = std::move(shifts);
  p.alpha = alpha;
  p.gamma2 = gamma2;
  p.sigma2 = 2.0 * alpha * gamma2;
  return p;
}

void ModelParams::validate(const PhyloTree& tree) const {
  if (static_cast<int>(shifts.delta.size()) != tree.n_nodes()) {
    throw ValidationError("shift vector has " + std::to_string(shifts.delta.size()) +
                          " entries, tree has " + std::to_string(tree.n_nodes()) + " nodes");
  }
  for (double d : shifts.delta) {
    if (!std::isfinite(d)) throw ValidationError("shift values must be finite");
  }
  if (kind == ProcessKind::BM) {
    if (!(sigma2 > 0.0) || !std::isfinite(sigma2)) throw ValidationError("sigma2 must be positive");
  } else {
    if (!(alpha > 0.0) || !std::isfinite(alpha)) throw ValidationError("alpha must be positive");
    if (!(gamma2 > 0.0) || !std::isfinite(gamma2)) throw ValidationError("gamma2 must be positive");
    if (!tree.is_ultrametric()) {
      throw ValidationError("the stationary OU model requires an ultrametric tree");
    }
  }
}

Eigen::VectorXi kernel_vector(const PhyloTree& tree, NodeId i) {
  if (i < 0 || i >= tree.n_nodes() || tree.is_tip(i)) {
    throw ValidationError("kernel vectors exist only for internal nodes");
  }
  Eigen::VectorXi k = Eigen::VectorXi::Zero(tree.n_nodes());
  k(i) = 1;
  for (NodeId c : tree.children(i)) k(c) = -1;
  return k;
}

Eigen::VectorXd ou_weights(const PhyloTree& tree, double alpha) {
  if (!(alpha > 0.0)) throw ValidationError("alpha must be positive");
  const double h = tree.height();
  Eigen::VectorXd w(tree.n_nodes());
  w(0) = 1.0;
  for (NodeId i = 1; i < tree.n_nodes(); ++i) {
    w(i) = -std::expm1(-alpha * (h - tree.time(tree.parent(i))));
  }
  return w;
}

Eigen::VectorXd branch_optima(const PhyloTree& tree, const ShiftConfig& shifts) {
  Eigen::VectorXd beta(tree.n_nodes());
  for (NodeId v : tree.preorder()) {
    beta(v) = shifts.delta[v] + (v == 0 ? 0.0 : beta(tree.parent(v)));
  }
  return beta;
}

Eigen::VectorXd node_means(const PhyloTree& tree, const ModelParams& params) {
  const auto& delta = params.shifts.delta;
  Eigen::VectorXd mean(tree.n_nodes());
  if (params.kind == ProcessKind::BM) {
    for (NodeId v : tree.preorder()) {
      mean(v) = delta[v] + (v == 0 ? 0.0 : mean(tree.parent(v)));
    }
    return mean;
  }
  const Eigen::VectorXd beta = branch_optima(tree, params.shifts);
  for (NodeId v : tree.preorder()) {
    if (v == 0) {
      mean(v) = beta(0);
      continue;
    }
    const double e = std::exp(-params.alpha * tree.length(v));
    mean(v) = e * mean(tree.parent(v)) + (1.0 - e) * beta(v);
  }
  return mean;
}

Eigen::VectorXd tip_means(const PhyloTree& tree, const ModelParams& params) {
  const auto& delta = params.shifts.delta;
  Eigen::VectorXd acc(tree.n_nodes());
  if (params.kind == ProcessKind::OU) {
    if (!tree.is_ultrametric()) {
      throw ValidationError("the stationary OU model requires an ultrametric tree");
    }
    const Eigen::VectorXd w = ou_weights(tree, params.alpha);
    for (NodeId v : tree.preorder()) {
      acc(v) = w(v) * delta[v] + (v == 0 ? 0.0 : acc(tree.parent(v)));
    }
  } else {
    for (NodeId v : tree.preorder()) {
      acc(v) = delta[v] + (v == 0 ? 0.0 : acc(tree.parent(v)));
    }
  }
  return acc.tail(tree.n_tips());
}

CovarianceModel covariance(const PhyloTree& tree, ProcessKind kind, double alpha, double scale) {
  CovarianceModel cov;
  cov.scale = scale;
  if (kind == ProcessKind::BM) {
    cov.correlation = tip_shared_times(tree);
  } else {
    cov.correlation = (-alpha * tip_distances(tree).array()).exp().matrix();
  }
  return cov;
}

CovarianceModel covariance(const PhyloTree& tree, const ModelParams& params) {
  return covariance(tree, params.kind, params.alpha, params.scale());
}

Eigen::MatrixXd node_covariance(const PhyloTree& tree, const ModelParams& params) {
  const NodeDistances dist = distances(tree);
  if (params.kind == ProcessKind::BM) {
    return params.sigma2 * dist.shared_time;
  }
  return params.gamma2 * (-params.alpha * dist.distance.array()).exp().matrix();
}

ShiftConfig similar_shifts(const PhyloTree& tree, const ShiftConfig& shifts, double alpha,
                           SimilarityDirection direction) {
  if (!(alpha > 0.0)) throw ValidationError("alpha must be positive for the BM/OU similarity map");
  const Eigen::VectorXd w = ou_weights(tree, alpha);
  ShiftConfig out = shifts;
  for (std::size_t i = 1; i < out.delta.size(); ++i) {
    out.delta[i] = direction == SimilarityDirection::BmToOu ? shifts.delta[i] / w(i)
                                                             : shifts.delta[i] * w(i);
  }
  return out;
}

Eigen::VectorXd simulate_traits(const PhyloTree& tree, const ModelParams& params,
                                std::uint64_t seed) {
  // Zero variance is allowed here and gives the means exactly.
  ModelParams checked = params;
  if (checked.sigma2 == 0.0) checked.sigma2 = 1.0;
  if (checked.gamma2 == 0.0) checked.gamma2 = 1.0;
  checked.validate(tree);
  auto draw = [seed](NodeId v) {
    Rng rng = make_rng(seed, "noise", static_cast<std::uint64_t>(v));
    return std::normal_distribution<double>(0.0, 1.0)(rng);
  };
  Eigen::VectorXd x(tree.n_nodes());
  if (params.kind == ProcessKind::BM) {
    for (NodeId v : tree.preorder()) {
      if (v == 0) {
        x(v) = params.shifts.root_value();
        continue;
      }
      x(v) = x(tree.parent(v)) + params.shifts.delta[v] +
             std::sqrt(tree.length(v) * params.sigma2) * draw(v);
    }
    return x;
  }
  const Eigen::VectorXd beta = branch_optima(tree, params.shifts);
  for (NodeId v : tree.preorder()) {
    if (v == 0) {
      x(v) = beta(0) + std::sqrt(params.gamma2) * draw(v);
      continue;
    }
    const double e = std::exp(-params.alpha * tree.length(v));
    x(v) = e * x(tree.parent(v)) + (1.0 - e) * beta(v) +
           std::sqrt(params.gamma2 * (1.0 - e * e)) * draw(v);
  }
  return x;
}

}  // namespace treeshift
