#include "treeshift/em_engine.hpp"

#include "treeshift/errors.hpp"
#include "treeshift/rng.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numeric>
#include <random>

namespace treeshift {

namespace {

constexpr double kLog2Pi = 1.8378770664093453;

// X_j | X_pa ~ N(a X_pa + b, v)
struct Link {
  double a;
  double b;
  double v;
};

Link branch_link(const PhyloTree& tree, const ModelParams& params, const Eigen::VectorXd& beta,
                 NodeId j) {
  if (params.kind == ProcessKind::BM) {
    return {1.0, params.shifts.delta[j], tree.length(j) * params.sigma2};
  }
  const double e = std::exp(-params.alpha * tree.length(j));
  return {e, beta(j) * (1.0 - e), params.gamma2 * -std::expm1(-2.0 * params.alpha * tree.length(j))};
}

void check_tip_values(const PhyloTree& tree, const Eigen::VectorXd& Y) {
  if (Y.size() != tree.n_tips()) {
    throw ValidationError("trait vector has " + std::to_string(Y.size()) + " values, tree has " +
                          std::to_string(tree.n_tips()) + " tips");
  }
  if (!Y.allFinite()) throw ValidationError("trait values must be finite");
}

double ou_alpha_lo(const PhyloTree& tree) { return 1e-4 / tree.height(); }
double ou_alpha_hi(const PhyloTree& tree) { return 1e3 / tree.height(); }

// Tip-incidence design T (BM) or T W(alpha) (OU) over all node columns.
Eigen::MatrixXd shift_design(const PhyloTree& tree, ProcessKind kind, double alpha) {
  const TreeMatrices mats = tree_matrices(tree);
  Eigen::MatrixXd X = mats.T.cast<double>();
  if (kind == ProcessKind::OU) {
    const Eigen::VectorXd w = ou_weights(tree, alpha);
    X = X * w.asDiagonal();
  }
  return X;
}

Eigen::MatrixXd correlation_for(const PhyloTree& tree, ProcessKind kind, double alpha) {
  return covariance(tree, kind, alpha, 1.0).correlation;
}

// Tracks which tips each marked node owns (tips whose nearest marked
// ancestor it is). A marked set is parsimonious iff every marked node owns a
// tip.
class RegimeTracker {
 public:
  explicit RegimeTracker(const PhyloTree& tree) : tree_(&tree), marked_(tree.n_nodes(), 0), own_(tree.n_nodes(), 0) {
    marked_[0] = 1;
    own_[0] = tree.n_tips();
  }

  bool marked(NodeId i) const { return marked_[i] != 0; }

  // Tips that i would own if it were marked.
  int would_own(NodeId i) const {
    const auto order = tree_->preorder();
    const int first = tree_->preorder_position(i);
    const int last = first + tree_->subtree_size(i);
    int count = 0;
    for (int p = first; p < last;) {
      const NodeId v = order[p];
      if (v != i && marked_[v]) {
        p += tree_->subtree_size(v);
        continue;
      }
      if (tree_->is_tip(v)) ++count;
      ++p;
    }
    return count;
  }

  NodeId marked_ancestor(NodeId i) const {
    NodeId a = tree_->parent(i);
    while (!marked_[a]) a = tree_->parent(a);
    return a;
  }

  bool can_add(NodeId i) const {
    if (i <= 0 || marked_[i]) return false;
    const int gain = would_own(i);
    return gain > 0 && own_[marked_ancestor(i)] - gain > 0;
  }

  void add(NodeId i) {
    const int gain = would_own(i);
    own_[marked_ancestor(i)] -= gain;
    own_[i] = gain;
    marked_[i] = 1;
  }

 private:
  const PhyloTree* tree_;
  std::vector<char> marked_;
  std::vector<int> own_;
};

// Exact least squares of F on the columns {0} u S of the OU design A U,
// working from the Gram matrix.
struct OuDesign {
  const PhyloTree* tree;
  Eigen::VectorXd A;
  Eigen::VectorXd F;
  Eigen::MatrixXd G;
  Eigen::VectorXd c;

  OuDesign(const PhyloTree& t, Eigen::VectorXd a, Eigen::VectorXd f)
      : tree(&t), A(std::move(a)), F(std::move(f)) {
    const int N = t.n_nodes();
    Eigen::VectorXd s = Eigen::VectorXd::Zero(N);  // subtree sums of A^2
    c = Eigen::VectorXd::Zero(N);                   // subtree sums of A F
    for (NodeId v : t.postorder()) {
      s(v) += A(v) * A(v);
      c(v) += A(v) * F(v);
      if (v != 0) {
        s(t.parent(v)) += s(v);
        c(t.parent(v)) += c(v);
      }
    }
    G = Eigen::MatrixXd::Zero(N, N);
    const auto order = t.preorder();
    for (NodeId i = 0; i < N; ++i) {
      const int first = t.preorder_position(i);
      for (int p = first; p < first + t.subtree_size(i); ++p) {
        const NodeId j = order[p];
        G(i, j) = s(j);
        G(j, i) = s(j);
      }
    }
  }

  double cost(const std::vector<double>& delta) const {
    double total = 0.0;
    std::vector<double> beta(delta.size());
    for (NodeId v : tree->preorder()) {
      beta[v] = delta[v] + (v == 0 ? 0.0 : beta[tree->parent(v)]);
      const double r = F(v) - A(v) * beta[v];
      total += r * r;
    }
    return total;
  }

  // Returns the shift vector; NaN cost when the system is singular.
  std::vector<double> refit(const std::vector<NodeId>& support) const {
    std::vector<NodeId> idx{0};
    idx.insert(idx.end(), support.begin(), support.end());
    const auto k = static_cast<Eigen::Index>(idx.size());
    Eigen::MatrixXd Gs(k, k);
    Eigen::VectorXd cs(k);
    for (Eigen::Index a = 0; a < k; ++a) {
      cs(a) = c(idx[a]);
      for (Eigen::Index b = 0; b < k; ++b) Gs(a, b) = G(idx[a], idx[b]);
    }
    const Eigen::VectorXd b = Gs.ldlt().solve(cs);
    std::vector<double> delta(tree->n_nodes(), 0.0);
    for (Eigen::Index a = 0; a < k; ++a) delta[idx[a]] = b(a);
    return delta;
  }
};

// Whitener for V(alpha), rebuilt only when alpha changes.
class CorrelationCache {
 public:
  CorrelationCache(const PhyloTree& tree, ProcessKind kind) : tree_(&tree), kind_(kind) {}

  const Whitener& get(double alpha) {
    if (!whitener_ || (kind_ == ProcessKind::OU && alpha != alpha_)) {
      whitener_ = std::make_unique<Whitener>(correlation_for(*tree_, kind_, alpha));
      alpha_ = alpha;
    }
    return *whitener_;
  }

 private:
  const PhyloTree* tree_;
  ProcessKind kind_;
  double alpha_ = 0.0;
  std::unique_ptr<Whitener> whitener_;
};

double loglik_with(CorrelationCache& cache, const PhyloTree& tree, const ModelParams& params,
                   const Eigen::VectorXd& Y) {
  const Whitener& w = cache.get(params.alpha);
  return gaussian_loglik(w, params.scale(), Y - tip_means(tree, params));
}

// GLS refit of the root value and the shifts on `support` for the current
// alpha; the scale becomes the ML estimate RSS / n.
ModelParams gls_refit(const PhyloTree& tree, const Eigen::VectorXd& Y, const ModelParams& params,
                      const std::vector<NodeId>& support, const Whitener& w,
                      const Eigen::MatrixXd& design) {
  std::vector<NodeId> idx{0};
  idx.insert(idx.end(), support.begin(), support.end());
  Eigen::MatrixXd X(design.rows(), static_cast<Eigen::Index>(idx.size()));
  for (std::size_t k = 0; k < idx.size(); ++k) X.col(static_cast<Eigen::Index>(k)) = design.col(idx[k]);
  const GlsFit g = gls(w, X, Y);
  ModelParams out = params;
  out.shifts = ShiftConfig::none(tree.n_nodes(), 0.0);
  for (std::size_t k = 0; k < idx.size(); ++k) out.shifts.delta[idx[k]] = g.beta(static_cast<Eigen::Index>(k));
  const double scale = std::max(g.rss / static_cast<double>(Y.size()), 1e-300);
  if (out.kind == ProcessKind::BM) {
    out.sigma2 = scale;
  } else {
    out.gamma2 = scale;
    out.sigma2 = 2.0 * out.alpha * out.gamma2;
  }
  return out;
}

}  // namespace

bool support_is_parsimonious(const PhyloTree& tree, std::span<const NodeId> support) {
  std::vector<NodeId> s(support.begin(), support.end());
  std::sort(s.begin(), s.end());
  if (std::adjacent_find(s.begin(), s.end()) != s.end()) return false;
  for (NodeId i : s) {
    if (i <= 0 || i >= tree.n_nodes()) return false;
  }
  return count_tip_regimes(tree, s) == static_cast<int>(s.size()) + 1;
}

// ---- E step ---------------------------------------------------------------

ConditionalMoments e_step(const PhyloTree& tree, const ModelParams& params,
                          const Eigen::VectorXd& Y) {
  check_tip_values(tree, Y);
  const int N = tree.n_nodes();
  const Eigen::VectorXd beta =
      params.kind == ProcessKind::OU ? branch_optima(tree, params.shifts) : Eigen::VectorXd();

  // Upward pass: each subtree's evidence about its top node as
  // exp(-P x^2 / 2 + H x).
  Eigen::VectorXd P = Eigen::VectorXd::Zero(N);
  Eigen::VectorXd H = Eigen::VectorXd::Zero(N);
  std::vector<Link> links(N);
  for (NodeId v : tree.postorder()) {
    if (v == 0) continue;
    const Link l = branch_link(tree, params, beta, v);
    links[v] = l;
    double msg_p, msg_h;
    if (tree.is_tip(v)) {
      const double y = Y(tree.tip_index(v));
      msg_p = l.a * l.a / l.v;
      msg_h = l.a * (y - l.b) / l.v;
    } else {
      const double d = 1.0 + l.v * P(v);
      msg_p = l.a * l.a * P(v) / d;
      msg_h = l.a * (H(v) - l.b * P(v)) / d;
    }
    P(tree.parent(v)) += msg_p;
    H(tree.parent(v)) += msg_h;
  }

  ConditionalMoments m;
  m.mean = Eigen::VectorXd::Zero(N);
  m.var = Eigen::VectorXd::Zero(N);
  m.cov_parent = Eigen::VectorXd::Zero(N);
  if (params.kind == ProcessKind::BM) {
    m.mean(0) = params.shifts.root_value();
  } else {
    const double precision = 1.0 / params.gamma2 + P(0);
    m.mean(0) = (beta(0) / params.gamma2 + H(0)) / precision;
    m.var(0) = 1.0 / precision;
  }

  // Downward pass: X_j | X_pa, Y ~ N(g X_pa + c, s).
  for (NodeId v : tree.preorder()) {
    if (v == 0) continue;
    if (tree.is_tip(v)) {
      m.mean(v) = Y(tree.tip_index(v));
      continue;
    }
    const Link& l = links[v];
    const NodeId p = tree.parent(v);
    const double d = 1.0 + l.v * P(v);
    const double g = l.a / d;
    const double c = (l.b + l.v * H(v)) / d;
    const double s = l.v / d;
    m.mean(v) = g * m.mean(p) + c;
    m.var(v) = s + g * g * m.var(p);
    m.cov_parent(v) = g * m.var(p);
  }
  return m;
}

ConditionalMoments e_step_dense(const PhyloTree& tree, const ModelParams& params,
                                const Eigen::VectorXd& Y) {
  check_tip_values(tree, Y);
  const int n = tree.n_tips();
  const int m_int = tree.n_internal();
  const Eigen::MatrixXd Sigma = node_covariance(tree, params);
  const Eigen::VectorXd mu = node_means(tree, params);

  const Eigen::MatrixXd Syy = Sigma.bottomRightCorner(n, n);
  const Eigen::MatrixXd Szy = Sigma.topRightCorner(m_int, n);
  const Eigen::MatrixXd Szz = Sigma.topLeftCorner(m_int, m_int);
  Eigen::LLT<Eigen::MatrixXd> llt(Syy);
  if (llt.info() != Eigen::Success) throw NumericalError("tip covariance is singular");
  const Eigen::MatrixXd gain = llt.solve(Szy.transpose()).transpose();  // Szy Syy^-1
  const Eigen::VectorXd ez = mu.head(m_int) + gain * (Y - mu.tail(n));
  const Eigen::MatrixXd cz = Szz - gain * Szy.transpose();

  ConditionalMoments m;
  m.mean.resize(tree.n_nodes());
  m.mean.head(m_int) = ez;
  m.mean.tail(n) = Y;
  m.var = Eigen::VectorXd::Zero(tree.n_nodes());
  m.var.head(m_int) = cz.diagonal();
  m.cov_parent = Eigen::VectorXd::Zero(tree.n_nodes());
  for (NodeId v = 1; v < m_int; ++v) m.cov_parent(v) = cz(v, tree.parent(v));
  return m;
}

// ---- Q function -----------------------------------------------------------

CompleteLoglik expected_complete_loglik(const PhyloTree& tree, const ModelParams& params,
                                        const ConditionalMoments& moments) {
  const int N = tree.n_nodes();
  CompleteLoglik q;
  q.costs = Eigen::VectorXd::Zero(N);
  const auto& delta = params.shifts.delta;
  if (params.kind == ProcessKind::BM) {
    const double mu = delta[0];
    double log_terms = 0.0;
    for (NodeId j = 1; j < N; ++j) {
      const NodeId p = tree.parent(j);
      const double ep = p == 0 ? mu : moments.mean(p);
      const double r = moments.mean(j) - ep - delta[j];
      const double l = tree.length(j);
      q.costs(j) = r * r / l;
      q.variance_term += moments.var_increment(tree, j) / l;
      log_terms += std::log(l);
    }
    q.value = -0.5 * ((N - 1) * (kLog2Pi + std::log(params.sigma2)) + log_terms +
                      (q.variance_term + q.costs.sum()) / params.sigma2);
    return q;
  }
  const Eigen::VectorXd beta = branch_optima(tree, params.shifts);
  const double r0 = moments.mean(0) - beta(0);
  q.costs(0) = r0 * r0;
  q.variance_term = moments.var(0);
  double log_terms = 0.0;
  for (NodeId j = 1; j < N; ++j) {
    const NodeId p = tree.parent(j);
    const double e = std::exp(-params.alpha * tree.length(j));
    const double c = -std::expm1(-2.0 * params.alpha * tree.length(j));
    const double r = moments.mean(j) - e * moments.mean(p) - beta(j) * (1.0 - e);
    q.costs(j) = r * r / c;
    q.variance_term += moments.var_increment(tree, j, e) / c;
    log_terms += std::log(c);
  }
  q.value = -0.5 * (N * (kLog2Pi + std::log(params.gamma2)) + log_terms +
                    (q.variance_term + q.costs.sum()) / params.gamma2);
  return q;
}

// ---- M step, BM -----------------------------------------------------------

ModelParams m_step_bm(const PhyloTree& tree, const ConditionalMoments& moments, int K) {
  const int N = tree.n_nodes();
  if (K < 0 || K > tree.n_tips() - 1) throw ValidationError("K out of range for this tree");
  const auto root_kids = tree.children(0);
  const int L = static_cast<int>(root_kids.size());

  // Costs of leaving a branch unshifted, for branches not hanging from the root.
  std::vector<double> cost(N, 0.0);
  std::vector<NodeId> inner;
  for (NodeId j = 1; j < N; ++j) {
    if (tree.parent(j) == 0) continue;
    const double r = moments.mean(j) - moments.mean(tree.parent(j));
    cost[j] = r * r / tree.length(j);
    inner.push_back(j);
  }
  std::stable_sort(inner.begin(), inner.end(),
                   [&](NodeId a, NodeId b) { return cost[a] > cost[b]; });

  double best_total = std::numeric_limits<double>::infinity();
  std::vector<NodeId> best_support;
  double best_mu = 0.0;

  // Subsets of shifted root children, smallest first; each fixes mu.
  const int max_r = std::min(K, L - 1);
  std::vector<std::vector<int>> subsets;
  std::vector<int> current;
  for (int r = 0; r <= max_r && subsets.size() < 1024; ++r) {
    std::vector<int> pick(r);
    std::iota(pick.begin(), pick.end(), 0);
    while (subsets.size() < 1024) {
      subsets.push_back(pick);
      int i = r - 1;
      while (i >= 0 && pick[i] == L - r + i) --i;
      if (i < 0) break;
      ++pick[i];
      for (int k = i + 1; k < r; ++k) pick[k] = pick[k - 1] + 1;
    }
  }

  for (const auto& subset : subsets) {
    std::vector<char> shifted_kid(L, 0);
    for (int k : subset) shifted_kid[k] = 1;
    double wsum = 0.0, wmean = 0.0;
    for (int k = 0; k < L; ++k) {
      if (shifted_kid[k]) continue;
      const NodeId c = root_kids[k];
      wsum += 1.0 / tree.length(c);
      wmean += moments.mean(c) / tree.length(c);
    }
    const double mu = wmean / wsum;
    double total = 0.0;
    for (int k = 0; k < L; ++k) {
      if (shifted_kid[k]) continue;
      const NodeId c = root_kids[k];
      const double r = moments.mean(c) - mu;
      total += r * r / tree.length(c);
    }

    RegimeTracker tracker(tree);
    std::vector<NodeId> support;
    bool feasible = true;
    for (int k : subset) {
      if (!tracker.can_add(root_kids[k])) {
        feasible = false;
        break;
      }
      tracker.add(root_kids[k]);
      support.push_back(root_kids[k]);
    }
    if (!feasible) continue;
    // Greedy on the linear matroid of tip columns: highest costs first,
    // skipping branches that would break independence.
    for (NodeId j : inner) {
      if (static_cast<int>(support.size()) == K) break;
      if (tracker.can_add(j)) {
        tracker.add(j);
        support.push_back(j);
      }
    }
    if (static_cast<int>(support.size()) != K) continue;
    for (NodeId j : inner) {
      if (!tracker.marked(j)) total += cost[j];
    }
    if (total < best_total) {
      best_total = total;
      best_support = support;
      best_mu = mu;
    }
  }
  if (!std::isfinite(best_total)) {
    throw ValidationError("no parsimonious placement of " + std::to_string(K) + " shifts exists");
  }

  ModelParams out;
  out.kind = ProcessKind::BM;
  out.shifts = ShiftConfig::none(N, best_mu);
  std::sort(best_support.begin(), best_support.end());
  for (NodeId j : best_support) {
    const NodeId p = tree.parent(j);
    out.shifts.delta[j] = moments.mean(j) - (p == 0 ? best_mu : moments.mean(p));
  }
  double variance_term = 0.0;
  for (NodeId j = 1; j < N; ++j) variance_term += moments.var_increment(tree, j) / tree.length(j);
  out.sigma2 = std::max((variance_term + best_total) / (N - 1), 1e-300);
  return out;
}

// ---- M step, OU -----------------------------------------------------------

ModelParams m_step_ou(const PhyloTree& tree, const ConditionalMoments& moments, int K,
                      const ModelParams& incumbent, OuStepReport* report) {
  const int N = tree.n_nodes();
  const double alpha = incumbent.alpha;
  Eigen::VectorXd A(N), F(N);
  A(0) = 1.0;
  F(0) = moments.mean(0);
  double variance_term = moments.var(0);
  for (NodeId j = 1; j < N; ++j) {
    const double e = std::exp(-alpha * tree.length(j));
    const double c = -std::expm1(-2.0 * alpha * tree.length(j));
    const double sc = std::sqrt(c);
    A(j) = (1.0 - e) / sc;
    F(j) = (moments.mean(j) - e * moments.mean(tree.parent(j))) / sc;
    variance_term += moments.var_increment(tree, j, e) / c;
  }
  const OuDesign design(tree, A, F);

  std::vector<double> best = incumbent.shifts.delta;
  const double incumbent_cost = design.cost(best);
  double best_cost = incumbent_cost;
  bool lasso_used = false;
  auto consider = [&](const std::vector<NodeId>& support, bool from_lasso) {
    std::vector<double> delta = design.refit(support);
    for (double d : delta) {
      if (!std::isfinite(d)) return;
    }
    const double cst = design.cost(delta);
    if (cst < best_cost) {
      best_cost = cst;
      best = std::move(delta);
      lasso_used = from_lasso;
    }
  };

  const std::vector<NodeId> support = incumbent.shifts.support();
  if (K > 0) {
    LassoGram gram{design.G, design.c, Eigen::VectorXd::Ones(N), F.cwiseAbs().maxCoeff()};
    gram.weights(0) = 0.0;
    try {
      const LassoResult lasso = lasso_fixed_support_size(gram, K);
      if (lasso.exact) {
        std::vector<NodeId> s;
        for (int j : lasso_support(gram.weights, lasso.coef)) s.push_back(j);
        if (support_is_parsimonious(tree, s)) consider(s, true);
      }
    } catch (const ValidationError&) {
      // No Lasso candidate this round.
    }
  }
  if (static_cast<int>(support.size()) == K && support_is_parsimonious(tree, support)) {
    consider(support, false);
    std::vector<char> in_support(N, 0);
    for (NodeId s : support) in_support[s] = 1;
    for (std::size_t k = 0; k < support.size(); ++k) {
      for (NodeId j = 1; j < N; ++j) {
        if (in_support[j]) continue;
        std::vector<NodeId> moved = support;
        moved[k] = j;
        if (!support_is_parsimonious(tree, moved)) continue;
        std::sort(moved.begin(), moved.end());
        consider(moved, false);
      }
    }
  }

  if (report) {
    report->moved = best_cost < incumbent_cost;
    report->lasso_used = lasso_used;
    report->cost_before = incumbent_cost;
    report->cost_after = best_cost;
  }
  ShiftConfig shifts;
  shifts.delta = std::move(best);
  const double gamma2 = std::max((variance_term + best_cost) / N, 1e-300);
  return ModelParams::ou(std::move(shifts), alpha, gamma2);
}

// ---- alpha ----------------------------------------------------------------

AlphaUpdate update_alpha(const PhyloTree& tree, const ConditionalMoments& moments,
                         const ModelParams& params) {
  if (params.kind != ProcessKind::OU) throw ValidationError("alpha exists only for the OU model");
  const double lo = ou_alpha_lo(tree);
  const double hi = ou_alpha_hi(tree);
  auto q_at = [&](double alpha) {
    ModelParams p = params;
    p.alpha = alpha;
    p.sigma2 = 2.0 * alpha * p.gamma2;
    return expected_complete_loglik(tree, p, moments).value;
  };
  AlphaUpdate out;
  out.alpha = params.alpha;
  out.q_before = q_at(params.alpha);
  out.q_after = out.q_before;

  const int grid = 41;
  const double llo = std::log(lo), lhi = std::log(hi);
  int best_k = 0;
  double best_q = -std::numeric_limits<double>::infinity();
  for (int k = 0; k < grid; ++k) {
    const double q = q_at(std::exp(llo + (lhi - llo) * k / (grid - 1)));
    if (q > best_q) {
      best_q = q;
      best_k = k;
    }
  }
  const double step = (lhi - llo) / (grid - 1);
  double best_alpha = std::exp(llo + step * best_k);
  const double left = std::max(llo, llo + step * (best_k - 1));
  const double right = std::min(lhi, llo + step * (best_k + 1));
  const double refined = std::exp(golden_section_max([&](double la) { return q_at(std::exp(la)); },
                                                     left, right, 1e-6));
  const double q_refined = q_at(refined);
  if (q_refined > best_q) {
    best_q = q_refined;
    best_alpha = refined;
  }
  if (best_q > out.q_before) {
    out.alpha = std::clamp(best_alpha, lo, hi);
    out.q_after = best_q;
  }
  out.at_boundary = out.alpha <= lo * (1.0 + 1e-3) || out.alpha >= hi * (1.0 - 1e-3);
  return out;
}

// ---- initialization ------------------------------------------------------

namespace {

// Residual sum of squares after adding each candidate column to the least
// squares fit on `base`; infinite for candidates in the span of `base`.
Eigen::VectorXd rss_with_one_more(const Eigen::MatrixXd& Xw, const Eigen::VectorXd& yw,
                                  const Eigen::MatrixXd& base) {
  const Eigen::HouseholderQR<Eigen::MatrixXd> qr(base);
  const Eigen::MatrixXd Q = qr.householderQ() * Eigen::MatrixXd::Identity(base.rows(), base.cols());
  const Eigen::VectorXd ry = yw - Q * (Q.transpose() * yw);
  const Eigen::MatrixXd RX = Xw - Q * (Q.transpose() * Xw);
  const double r0 = ry.squaredNorm();
  const double scale = Xw.colwise().squaredNorm().maxCoeff();
  Eigen::VectorXd out(Xw.cols());
  for (Eigen::Index j = 0; j < Xw.cols(); ++j) {
    const double nj = RX.col(j).squaredNorm();
    if (nj <= 1e-12 * scale) {
      out(j) = std::numeric_limits<double>::infinity();
      continue;
    }
    const double c = RX.col(j).dot(ry);
    out(j) = std::max(r0 - c * c / nj, 0.0);
  }
  return out;
}

Eigen::MatrixXd base_columns(const Eigen::MatrixXd& Xw, const std::vector<NodeId>& support, std::size_t skip) {
  Eigen::MatrixXd B(Xw.rows(), static_cast<Eigen::Index>(support.size()) + 1 - (skip < support.size() ? 1 : 0));
  B.col(0) = Xw.col(0);
  Eigen::Index c = 1;
  for (std::size_t k = 0; k < support.size(); ++k) {
    if (k != skip) B.col(c++) = Xw.col(support[k]);
  }
  return B;
}

// Forward selection on the whitened residual sum of squares.
void forward_fill(const PhyloTree& tree, const Eigen::MatrixXd& Xw, const Eigen::VectorXd& yw, int K,
                  RegimeTracker& tracker, std::vector<NodeId>& support) {
  while (static_cast<int>(support.size()) < K) {
    const Eigen::VectorXd rss = rss_with_one_more(Xw, yw, base_columns(Xw, support, support.size()));
    double best_rss = std::numeric_limits<double>::infinity();
    NodeId best_j = -1;
    for (NodeId j = 1; j < tree.n_nodes(); ++j) {
      if (tracker.can_add(j) && rss(j) < best_rss) {
        best_rss = rss(j);
        best_j = j;
      }
    }
    if (best_j < 0) throw ValidationError("no parsimonious placement of " + std::to_string(K) + " shifts exists");
    tracker.add(best_j);
    support.push_back(best_j);
  }
}

std::vector<NodeId> forward_start_support(const PhyloTree& tree, const Eigen::VectorXd& Y, int K,
                                          const Whitener& w, const Eigen::MatrixXd& design) {
  RegimeTracker tracker(tree);
  std::vector<NodeId> support;
  forward_fill(tree, w.whiten(design), w.whiten(Y), K, tracker, support);
  std::sort(support.begin(), support.end());
  return support;
}

// Best relocation of one shift, or of two when no single move helps and the
// tree is small enough, under the exact least squares fit; repeated until no
// move lowers the residual sum of squares.
std::vector<NodeId> relocate_shifts(const PhyloTree& tree, const Eigen::MatrixXd& Xw, const Eigen::VectorXd& yw,
                                    std::vector<NodeId> support) {
  const int N = tree.n_nodes();
  const std::size_t K = support.size();
  const bool pairs_allowed = K >= 2 && double(N) * N * K * K * Xw.rows() <= 4e8;
  const Eigen::MatrixXd full = base_columns(Xw, support, K);
  double current = (yw - full * full.colPivHouseholderQr().solve(yw)).squaredNorm();
  auto in_support = [&](NodeId j) { return std::find(support.begin(), support.end(), j) != support.end(); };
  for (int round = 0; round < 100; ++round) {
    double best_rss = current * (1.0 - 1e-10);
    std::vector<NodeId> best;
    for (std::size_t k = 0; k < K; ++k) {
      const Eigen::VectorXd rss = rss_with_one_more(Xw, yw, base_columns(Xw, support, k));
      for (NodeId j = 1; j < N; ++j) {
        if (!(rss(j) < best_rss) || in_support(j)) continue;
        std::vector<NodeId> moved = support;
        moved[k] = j;
        if (!support_is_parsimonious(tree, moved)) continue;
        best_rss = rss(j);
        best = std::move(moved);
      }
    }
    if (best.empty() && pairs_allowed) {
      for (std::size_t k1 = 0; k1 < K; ++k1) {
        for (std::size_t k2 = k1 + 1; k2 < K; ++k2) {
          std::vector<NodeId> rest;
          for (std::size_t k = 0; k < K; ++k) {
            if (k != k1 && k != k2) rest.push_back(support[k]);
          }
          const Eigen::MatrixXd B = base_columns(Xw, rest, rest.size());
          const Eigen::HouseholderQR<Eigen::MatrixXd> qr(B);
          const Eigen::MatrixXd Q = qr.householderQ() * Eigen::MatrixXd::Identity(B.rows(), B.cols());
          const Eigen::VectorXd ry = yw - Q * (Q.transpose() * yw);
          const Eigen::MatrixXd RX = Xw - Q * (Q.transpose() * Xw);
          const Eigen::MatrixXd G = RX.transpose() * RX;
          const Eigen::VectorXd c = RX.transpose() * ry;
          const double r0 = ry.squaredNorm();
          const double scale = G.diagonal().maxCoeff();
          for (NodeId a = 1; a < N; ++a) {
            if (G(a, a) <= 1e-12 * scale) continue;
            for (NodeId b = a + 1; b < N; ++b) {
              const double det = G(a, a) * G(b, b) - G(a, b) * G(a, b);
              if (det <= 1e-12 * scale * scale) continue;
              const double gain = (G(b, b) * c(a) * c(a) - 2.0 * G(a, b) * c(a) * c(b) + G(a, a) * c(b) * c(b)) / det;
              const double rss = std::max(r0 - gain, 0.0);
              if (!(rss < best_rss)) continue;
              std::vector<NodeId> moved = rest;
              moved.push_back(a);
              moved.push_back(b);
              if (std::find(rest.begin(), rest.end(), a) != rest.end() ||
                  std::find(rest.begin(), rest.end(), b) != rest.end() || !support_is_parsimonious(tree, moved)) {
                continue;
              }
              best_rss = rss;
              best = std::move(moved);
            }
          }
        }
      }
    }
    if (best.empty()) break;
    support = std::move(best);
    current = best_rss;
  }
  std::sort(support.begin(), support.end());
  return support;
}

// Shift positions from a whitened Lasso with exactly K penalized nonzeros,
// repaired to a parsimonious support of size K by forward selection.
std::vector<NodeId> lasso_start_support(const PhyloTree& tree, const Eigen::VectorXd& Y, int K,
                                        const Whitener& w, const Eigen::MatrixXd& design) {
  if (K == 0) return {};
  const Eigen::MatrixXd Xw = w.whiten(design);
  const Eigen::VectorXd yw = w.whiten(Y);
  LassoProblem problem = LassoProblem::with_free_intercept(Xw, yw);
  std::vector<std::pair<double, NodeId>> ranked;
  try {
    const LassoResult lasso = lasso_fixed_support_size(problem, K);
    for (int j : lasso_support(problem.weights, lasso.coef)) {
      ranked.emplace_back(std::abs(lasso.coef(j)) * Xw.col(j).norm(), j);
    }
  } catch (const ValidationError&) {
  }
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    return a.first > b.first || (a.first == b.first && a.second < b.second);
  });
  RegimeTracker tracker(tree);
  std::vector<NodeId> support;
  for (const auto& [score, j] : ranked) {
    if (static_cast<int>(support.size()) == K) break;
    if (tracker.can_add(j)) {
      tracker.add(j);
      support.push_back(j);
    }
  }
  forward_fill(tree, Xw, yw, K, tracker, support);
  std::sort(support.begin(), support.end());
  return support;
}

std::vector<TipPair> within_regime_pairs(const PhyloTree& tree, const Eigen::VectorXd& Y,
                                         const std::vector<NodeId>& support) {
  std::vector<char> marked(tree.n_nodes(), 0);
  marked[0] = 1;
  for (NodeId s : support) marked[s] = 1;
  std::vector<NodeId> regime(tree.n_nodes(), 0);
  for (NodeId v : tree.preorder()) regime[v] = marked[v] ? v : regime[tree.parent(v)];
  const Eigen::MatrixXd d = tip_distances(tree);
  std::vector<TipPair> pairs;
  const int n = tree.n_tips();
  for (int i = 0; i < n; ++i) {
    for (int j = i + 1; j < n; ++j) {
      if (regime[tree.tip_node(i)] != regime[tree.tip_node(j)]) continue;
      const double diff = Y(i) - Y(j);
      pairs.push_back({diff * diff, d(i, j)});
    }
  }
  return pairs;
}

}  // namespace

ModelParams initialize(const PhyloTree& tree, const Eigen::VectorXd& Y, int K, ProcessKind kind,
                       const FitOptions& options) {
  check_tip_values(tree, Y);
  const int n = tree.n_tips();
  if (K < 0 || K > n - 1) throw ValidationError("K must lie in [0, n - 1]");
  double alpha = 0.0;
  if (kind == ProcessKind::OU) {
    if (!tree.is_ultrametric()) throw ValidationError("the stationary OU model requires an ultrametric tree");
    if (options.alpha) {
      alpha = *options.alpha;
      if (!(alpha > 0.0)) throw ValidationError("alpha must be positive");
    } else {
      const double alpha_default = std::log(2.0) / (0.3 * tree.height());
      const Whitener w0(correlation_for(tree, kind, alpha_default));
      const auto groups = lasso_start_support(tree, Y, K, w0, shift_design(tree, kind, alpha_default));
      alpha = alpha_init_regression(within_regime_pairs(tree, Y, groups), tree.height()).alpha;
    }
  }
  const Whitener w(correlation_for(tree, kind, alpha));
  ModelParams base;
  base.kind = kind;
  base.alpha = alpha;
  if (K == 0) {
    const double mean = Y.mean();
    base.shifts = ShiftConfig::none(tree.n_nodes(), mean);
    const double scale = std::max(w.mahalanobis2(Y.array() - mean) / n, 1e-300);
    if (kind == ProcessKind::BM) {
      base.sigma2 = scale;
    } else {
      base.gamma2 = scale;
      base.sigma2 = 2.0 * alpha * scale;
    }
    return base;
  }
  const Eigen::MatrixXd design = shift_design(tree, kind, alpha);
  const auto support = lasso_start_support(tree, Y, K, w, design);
  return gls_refit(tree, Y, base, support, w, design);
}

// ---- fit -----------------------------------------------------------------

double observed_loglik(const PhyloTree& tree, const ModelParams& params, const Eigen::VectorXd& Y) {
  CorrelationCache cache(tree, params.kind);
  return loglik_with(cache, tree, params, Y);
}

EquivalenceSummary equivalent_solutions(const PhyloTree& tree, const ModelParams& params,
                                        std::size_t max_solutions) {
  EquivalenceSummary summary;
  NodeColoring coloring;
  try {
    coloring = coloring_from_shifts(tree, params.shifts, params.kind, params.alpha);
  } catch (const HomoplasyError&) {
    summary.homoplasy = true;
    summary.solutions.push_back(params.shifts);
    return summary;
  }
  const ShiftConfig bm = params.kind == ProcessKind::OU
                             ? similar_shifts(tree, params.shifts, params.alpha, SimilarityDirection::OuToBm)
                             : params.shifts;
  const TipColoring d = tip_coloring(tree, coloring);
  // Mean value carried by each color, read at the first tip of that color.
  std::vector<double> mean(tree.n_nodes());
  for (NodeId v : tree.preorder()) mean[v] = bm.delta[v] + (v == 0 ? 0.0 : mean[tree.parent(v)]);
  std::vector<double> color_value(d.n_colors, 0.0);
  std::vector<char> seen(d.n_colors, 0);
  for (int k = 0; k < tree.n_tips(); ++k) {
    const int c = d.colors[k];
    if (!seen[c]) {
      seen[c] = 1;
      color_value[c] = mean[tree.tip_node(k)];
    }
  }
  const ClassListing listing = enumerate_class(tree, d, max_solutions);
  summary.class_size = listing.size;
  summary.truncated = listing.truncated;
  for (const auto& col : listing.colorings) {
    ShiftConfig s = shifts_from_coloring(tree, col, color_value);
    if (params.kind == ProcessKind::OU) {
      s = similar_shifts(tree, s, params.alpha, SimilarityDirection::BmToOu);
    }
    summary.solutions.push_back(std::move(s));
  }
  return summary;
}

namespace {

// Moves each shift with probability one half to a random branch that keeps
// the support parsimonious (at least one shift moves).
std::vector<NodeId> perturb_support(const PhyloTree& tree, const std::vector<NodeId>& support,
                                    Rng& rng) {
  const int N = tree.n_nodes();
  std::uniform_int_distribution<NodeId> branch(1, N - 1);
  std::bernoulli_distribution coin(0.5);
  std::vector<NodeId> out = support;
  std::vector<char> move(out.size(), 0);
  bool any = false;
  for (auto& m : move) any |= (m = coin(rng)) != 0;
  if (!any && !move.empty()) move[std::uniform_int_distribution<std::size_t>(0, move.size() - 1)(rng)] = 1;
  for (std::size_t k = 0; k < out.size(); ++k) {
    if (!move[k]) continue;
    for (int attempt = 0; attempt < 200; ++attempt) {
      std::vector<NodeId> trial = out;
      trial[k] = branch(rng);
      if (support_is_parsimonious(tree, trial)) {
        out = std::move(trial);
        break;
      }
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

FitResult run_em(const PhyloTree& tree, const Eigen::VectorXd& Y, int K, const ModelParams& start,
                 const FitOptions& options) {
  CorrelationCache cache(tree, start.kind);
  const bool estimate_alpha = start.kind == ProcessKind::OU && options.estimate_alpha;
  FitResult r;
  r.K = K;
  r.params = start;
  double ll = loglik_with(cache, tree, r.params, Y);
  r.trace.push_back(ll);
  int it = 0;
  for (int round = 0; round < 50; ++round) {
    r.converged = false;
    while (it < options.max_iter) {
      ++it;
      const ConditionalMoments moments =
          options.dense_e_step ? e_step_dense(tree, r.params, Y) : e_step(tree, r.params, Y);
      ModelParams next = start.kind == ProcessKind::BM ? m_step_bm(tree, moments, K)
                                                       : m_step_ou(tree, moments, K, r.params);
      if (estimate_alpha) {
        const AlphaUpdate upd = update_alpha(tree, moments, next);
        next.alpha = upd.alpha;
        next.sigma2 = 2.0 * next.alpha * next.gamma2;
        r.alpha_at_boundary = upd.at_boundary;
      }
      const double ll_next = loglik_with(cache, tree, next, Y);
      if (ll_next < ll - 1e-8 * std::max(1.0, std::abs(ll))) {
        throw NumericalError("observed log-likelihood decreased from " + std::to_string(ll) + " to " +
                             std::to_string(ll_next) + " at iteration " + std::to_string(it));
      }
      r.params = std::move(next);
      r.trace.push_back(ll_next);
      r.iterations = it;
      const bool done = std::abs(ll_next - ll) <= options.tol * std::max(1.0, std::abs(ll));
      ll = ll_next;
      spdlog::trace("EM K={} iteration {} loglik {:.10g}", K, it, ll);
      if (done) {
        r.converged = true;
        break;
      }
    }
    // Exact maximum likelihood for the final support at the final alpha.
    const Whitener& w = cache.get(r.params.alpha);
    const Eigen::MatrixXd design = shift_design(tree, r.params.kind, r.params.alpha);
    const ModelParams polished = gls_refit(tree, Y, r.params, r.params.shifts.support(), w, design);
    const double ll_polished = loglik_with(cache, tree, polished, Y);
    if (ll_polished >= ll && polished.shifts.n_shifts() == K) {
      r.params = polished;
      ll = ll_polished;
    }
    if (!options.relocate || K == 0 || it >= options.max_iter) break;
    const std::vector<NodeId> support = r.params.shifts.support();
    if (static_cast<int>(support.size()) != K || !support_is_parsimonious(tree, support)) break;
    const std::vector<NodeId> moved = relocate_shifts(tree, w.whiten(design), w.whiten(Y), support);
    if (moved == support) break;
    const ModelParams relocated = gls_refit(tree, Y, r.params, moved, w, design);
    const double ll_relocated = loglik_with(cache, tree, relocated, Y);
    if (!(ll_relocated > ll + 1e-10 * std::max(1.0, std::abs(ll)))) break;
    spdlog::trace("EM K={} relocation loglik {:.10g} -> {:.10g}", K, ll, ll_relocated);
    r.params = relocated;
    ll = ll_relocated;
    r.trace.push_back(ll);
  }
  r.loglik = ll;
  return r;
}

}  // namespace

FitResult fit(const PhyloTree& tree, const Eigen::VectorXd& Y, int K, ProcessKind kind,
              const FitOptions& options) {
  check_tip_values(tree, Y);
  if (K < 0 || K > tree.n_tips() - 1) throw ValidationError("K must lie in [0, n - 1]");
  FitOptions opts = options;
  if (kind == ProcessKind::OU && !opts.alpha) opts.estimate_alpha = true;
  if (kind == ProcessKind::BM) opts.estimate_alpha = false;

  const ModelParams init = initialize(tree, Y, K, kind, opts);
  std::vector<ModelParams> starts{init};
  if (K > 0) {
    Rng rng = make_rng(opts.seed, "restart", static_cast<std::uint64_t>(K));
    const Whitener w(correlation_for(tree, kind, init.alpha));
    const Eigen::MatrixXd design = shift_design(tree, kind, init.alpha);
    const auto forward = forward_start_support(tree, Y, K, w, design);
    if (forward != init.shifts.support()) starts.push_back(gls_refit(tree, Y, init, forward, w, design));
    for (int k = 0; k < opts.restarts; ++k) {
      const auto support = perturb_support(tree, init.shifts.support(), rng);
      if (static_cast<int>(support.size()) != K || !support_is_parsimonious(tree, support)) continue;
      starts.push_back(gls_refit(tree, Y, init, support, w, design));
    }
  }

  FitResult best;
  bool have = false;
  for (const auto& start : starts) {
    FitResult r = run_em(tree, Y, K, start, opts);
    if (!have || r.loglik > best.loglik) {
      best = std::move(r);
      have = true;
    }
  }
  best.equivalents = equivalent_solutions(tree, best.params, opts.max_solutions);
  return best;
}

}  // namespace treeshift
