#include "treeshift/parsimony.hpp"

#include "treeshift/errors.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

namespace treeshift {

TipColoring TipColoring::canonical(std::span<const int> raw) {
  TipColoring d;
  d.colors.reserve(raw.size());
  std::map<int, int> relabel;
  for (int c : raw) {
    auto [it, inserted] = relabel.try_emplace(c, static_cast<int>(relabel.size()));
    d.colors.push_back(it->second);
  }
  d.n_colors = static_cast<int>(relabel.size());
  return d;
}

std::vector<NodeId> color_change_edges(const PhyloTree& tree, const NodeColoring& coloring) {
  std::vector<NodeId> edges;
  for (NodeId v = 1; v < tree.n_nodes(); ++v) {
    if (coloring.colors[v] != coloring.colors[tree.parent(v)]) edges.push_back(v);
  }
  return edges;
}

TipColoring tip_coloring(const PhyloTree& tree, const NodeColoring& coloring) {
  return TipColoring::canonical(
      std::span<const int>(coloring.colors).subspan(tree.n_internal(), tree.n_tips()));
}

NodeColoring coloring_from_shifts(const PhyloTree& tree, const ShiftConfig& shifts,
                                  ProcessKind kind, double alpha) {
  if (static_cast<int>(shifts.delta.size()) != tree.n_nodes()) {
    throw ValidationError("shift vector does not match the tree");
  }
  const ShiftConfig bm = kind == ProcessKind::OU
                             ? similar_shifts(tree, shifts, alpha, SimilarityDirection::OuToBm)
                             : shifts;
  std::vector<double> mean(tree.n_nodes());
  double scale = 0.0;
  for (NodeId v : tree.preorder()) {
    mean[v] = bm.delta[v] + (v == 0 ? 0.0 : mean[tree.parent(v)]);
    scale = std::max(scale, std::abs(mean[v]));
  }
  const double tol = kHomoplasyTolerance * std::max(1.0, scale);

  // Visit tips first so that tip colors are numbered by first appearance.
  std::vector<NodeId> order;
  order.reserve(tree.n_nodes());
  for (int k = 0; k < tree.n_tips(); ++k) order.push_back(tree.tip_node(k));
  for (NodeId v = 0; v < tree.n_internal(); ++v) order.push_back(v);

  NodeColoring coloring;
  coloring.colors.assign(tree.n_nodes(), -1);
  std::vector<double> color_mean;
  for (NodeId v : order) {
    int found = -1;
    for (std::size_t c = 0; c < color_mean.size(); ++c) {
      if (std::abs(color_mean[c] - mean[v]) <= tol) {
        found = static_cast<int>(c);
        break;
      }
    }
    if (found < 0) {
      found = static_cast<int>(color_mean.size());
      color_mean.push_back(mean[v]);
    }
    coloring.colors[v] = found;
  }
  const int K = shifts.n_shifts();
  if (static_cast<int>(color_mean.size()) < K + 1) {
    throw HomoplasyError(std::to_string(K) + " shifts produce only " +
                         std::to_string(color_mean.size()) + " distinct node means");
  }
  return coloring;
}

ShiftConfig shifts_from_coloring(const PhyloTree& tree, const NodeColoring& coloring,
                                 std::span<const double> color_values) {
  ShiftConfig s = ShiftConfig::none(tree.n_nodes(), color_values[coloring.colors[0]]);
  for (NodeId v = 1; v < tree.n_nodes(); ++v) {
    const int c = coloring.colors[v];
    const int p = coloring.colors[tree.parent(v)];
    if (c != p) s.delta[v] = color_values[c] - color_values[p];
  }
  return s;
}

std::vector<int> SankoffTable::admissible(NodeId i, int parent_color) const {
  int best = kInfiniteCost;
  for (int p = 0; p < n_colors; ++p) {
    best = std::min(best, S(i, p) + (p != parent_color ? 1 : 0));
  }
  std::vector<int> out;
  for (int p = 0; p < n_colors; ++p) {
    if (S(i, p) < kInfiniteCost && S(i, p) + (p != parent_color ? 1 : 0) == best) out.push_back(p);
  }
  return out;
}

std::vector<int> SankoffTable::root_colors() const {
  std::vector<int> out;
  for (int k = 0; k < n_colors; ++k) {
    if (S(0, k) == total_cost) out.push_back(k);
  }
  return out;
}

SankoffTable sankoff(const PhyloTree& tree, const TipColoring& d, int n_colors) {
  if (static_cast<int>(d.colors.size()) != tree.n_tips()) {
    throw ValidationError("tip coloring has " + std::to_string(d.colors.size()) +
                          " entries, tree has " + std::to_string(tree.n_tips()) + " tips");
  }
  for (int c : d.colors) {
    if (c < 0 || c >= n_colors) throw ValidationError("tip color out of range");
  }
  SankoffTable t;
  t.n_colors = n_colors;
  const std::size_t cells = static_cast<std::size_t>(tree.n_nodes()) * n_colors;
  t.cost.assign(cells, kInfiniteCost);
  t.count.assign(cells, BigInt(0));
  auto at = [n_colors](NodeId i, int k) { return static_cast<std::size_t>(i) * n_colors + k; };

  for (NodeId v : tree.postorder()) {
    if (tree.is_tip(v)) {
      const int c = d.colors[tree.tip_index(v)];
      t.cost[at(v, c)] = 0;
      t.count[at(v, c)] = 1;
      continue;
    }
    for (int k = 0; k < n_colors; ++k) {
      int cost = 0;
      BigInt count = 1;
      for (NodeId child : tree.children(v)) {
        int best = kInfiniteCost;
        for (int p = 0; p < n_colors; ++p) {
          best = std::min(best, t.cost[at(child, p)] + (p != k ? 1 : 0));
        }
        BigInt ways = 0;
        for (int p = 0; p < n_colors; ++p) {
          if (t.cost[at(child, p)] < kInfiniteCost &&
              t.cost[at(child, p)] + (p != k ? 1 : 0) == best) {
            ways += t.count[at(child, p)];
          }
        }
        cost = std::min(cost + best, kInfiniteCost);
        count *= ways;
      }
      t.cost[at(v, k)] = cost;
      t.count[at(v, k)] = cost < kInfiniteCost ? count : BigInt(0);
    }
  }
  t.total_cost = kInfiniteCost;
  for (int k = 0; k < n_colors; ++k) t.total_cost = std::min(t.total_cost, t.cost[at(0, k)]);
  return t;
}

SankoffTable sankoff(const PhyloTree& tree, const TipColoring& d) {
  return sankoff(tree, d, std::max(1, d.n_colors));
}

BigInt class_size(const PhyloTree& tree, const TipColoring& d) {
  const SankoffTable t = sankoff(tree, d);
  BigInt total = 0;
  for (int k : t.root_colors()) total += t.T(0, k);
  return total;
}

ClassEnumerator::ClassEnumerator(const PhyloTree& tree, const TipColoring& d)
    : tree_(&tree), table_(sankoff(tree, d)) {
  options_.resize(tree.n_nodes());
  choice_.assign(tree.n_nodes(), 0);
  colors_.assign(tree.n_nodes(), -1);
}

void ClassEnumerator::fill_from(std::size_t position) {
  const auto order = tree_->preorder();
  for (std::size_t pos = position; pos < order.size(); ++pos) {
    const NodeId v = order[pos];
    if (pos != position || !started_) {
      options_[pos] = v == 0 ? table_.root_colors() : table_.admissible(v, colors_[tree_->parent(v)]);
      choice_[pos] = 0;
    }
    colors_[v] = options_[pos][choice_[pos]];
  }
}

std::optional<NodeColoring> ClassEnumerator::next() {
  if (done_) return std::nullopt;
  if (!started_) {
    fill_from(0);
    started_ = true;
    return NodeColoring{colors_};
  }
  // Odometer step: advance the deepest position that still has options.
  std::size_t pos = options_.size();
  while (pos > 0) {
    --pos;
    if (choice_[pos] + 1 < options_[pos].size()) {
      ++choice_[pos];
      fill_from(pos);
      return NodeColoring{colors_};
    }
  }
  done_ = true;
  return std::nullopt;
}

ClassListing enumerate_class(const PhyloTree& tree, const TipColoring& d,
                             std::size_t max_solutions) {
  ClassEnumerator walker(tree, d);
  ClassListing listing;
  for (int k : walker.table().root_colors()) listing.size += walker.table().T(0, k);
  while (listing.colorings.size() < max_solutions) {
    auto next = walker.next();
    if (!next) break;
    listing.colorings.push_back(std::move(*next));
  }
  listing.truncated = BigInt(listing.colorings.size()) < listing.size;
  return listing;
}

PartitionCounts count_partitions(const PhyloTree& tree, int K_max) {
  if (K_max < 1) throw ValidationError("K_max must be at least 1");
  const int n_nodes = tree.n_nodes();
  std::vector<std::vector<BigInt>> N(n_nodes), M(n_nodes);

  for (NodeId v : tree.postorder()) {
    N[v].assign(K_max + 1, BigInt(0));
    M[v].assign(K_max + 1, BigInt(0));
    if (tree.is_tip(v)) {
      N[v][1] = 1;
      M[v][1] = 1;
      continue;
    }
    // Product over children of (N_l(z) + w M_l(z)); P[j][k] is the
    // coefficient of w^j z^k, j = number of children joining the parent's
    // group.
    const auto kids = tree.children(v);
    const int L = static_cast<int>(kids.size());
    const int max_deg = K_max + L - 1;
    std::vector<std::vector<BigInt>> P(L + 1, std::vector<BigInt>(max_deg + 1, BigInt(0)));
    P[0][0] = 1;
    int used = 0;
    for (NodeId c : kids) {
      std::vector<std::vector<BigInt>> Q(L + 1, std::vector<BigInt>(max_deg + 1, BigInt(0)));
      for (int j = 0; j <= used; ++j) {
        for (int k = 0; k <= max_deg; ++k) {
          if (P[j][k] == 0) continue;
          for (int a = 1; a <= K_max && k + a <= max_deg; ++a) {
            if (N[c][a] != 0) Q[j][k + a] += P[j][k] * N[c][a];
            if (M[c][a] != 0) Q[j + 1][k + a] += P[j][k] * M[c][a];
          }
        }
      }
      P = std::move(Q);
      ++used;
    }
    for (int K = 1; K <= K_max; ++K) {
      BigInt n = P[0][K];
      BigInt m = 0;
      for (int j = 1; j <= L; ++j) {
        const int deg = K + j - 1;
        if (deg > max_deg) break;
        m += P[j][deg];
        if (j >= 2) n += P[j][deg];
      }
      N[v][K] = n;
      M[v][K] = m;
    }
    for (NodeId c : kids) {
      std::vector<BigInt>().swap(N[c]);
      std::vector<BigInt>().swap(M[c]);
    }
  }
  return PartitionCounts{std::move(N[0]), std::move(M[0])};
}

BigInt binomial(long long n, long long k) {
  if (k < 0 || n < 0 || k > n) return 0;
  k = std::min(k, n - k);
  BigInt r = 1;
  for (long long i = 1; i <= k; ++i) {
    r *= n - k + i;
    r /= i;
  }
  return r;
}

BigInt closed_formula_binary(int n, int K) { return binomial(2LL * n - 2 - K, K); }

BigInt closed_formula_binary_marked(int n, int K) { return binomial(2LL * n - K, K - 1LL); }

bool is_parsimonious(const PhyloTree& tree, std::span<const NodeId> support) {
  const int n = tree.n_tips();
  std::vector<NodeId> cols{0};
  for (NodeId i : support) {
    if (i <= 0 || i >= tree.n_nodes()) throw ValidationError("shift on a nonexistent edge");
    cols.push_back(i);
  }
  std::sort(cols.begin(), cols.end());
  if (std::adjacent_find(cols.begin(), cols.end()) != cols.end()) return false;
  if (static_cast<int>(cols.size()) > n) return false;

  Eigen::MatrixXd T = Eigen::MatrixXd::Zero(n, static_cast<Eigen::Index>(cols.size()));
  for (std::size_t c = 0; c < cols.size(); ++c) {
    const NodeId i = cols[c];
    const int first = tree.preorder_position(i);
    for (int p = first; p < first + tree.subtree_size(i); ++p) {
      const NodeId v = tree.preorder()[p];
      if (tree.is_tip(v)) T(tree.tip_index(v), static_cast<Eigen::Index>(c)) = 1.0;
    }
  }
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(T);
  qr.setThreshold(1e-9);
  return qr.rank() == static_cast<Eigen::Index>(cols.size());
}

bool is_parsimonious(const PhyloTree& tree, const ShiftConfig& shifts) {
  const auto support = shifts.support();
  return is_parsimonious(tree, support);
}

int count_tip_regimes(const PhyloTree& tree, std::span<const NodeId> support) {
  std::vector<char> marked(tree.n_nodes(), 0);
  marked[0] = 1;
  for (NodeId i : support) marked[i] = 1;
  std::vector<NodeId> regime(tree.n_nodes());
  std::vector<char> seen(tree.n_nodes(), 0);
  int count = 0;
  for (NodeId v : tree.preorder()) {
    regime[v] = marked[v] ? v : regime[tree.parent(v)];
    if (tree.is_tip(v) && !seen[regime[v]]) {
      seen[regime[v]] = 1;
      ++count;
    }
  }
  return count;
}

double log_bigint(const BigInt& x) {
  if (x <= 0) return -std::numeric_limits<double>::infinity();
  const auto bits = boost::multiprecision::msb(x);
  if (bits < 60) return std::log(x.convert_to<double>());
  const auto shift = bits - 52;
  const BigInt top = x >> shift;
  return std::log(top.convert_to<double>()) + static_cast<double>(shift) * std::log(2.0);
}

bool vandermonde_identity_check(int n, int n_prime, int K) {
  const BigInt lhs1 = binomial(n + n_prime - K, K);
  const BigInt lhs2 = binomial(n + n_prime + 1 - K, K);
  BigInt rhs1 = 0;
  BigInt rhs2 = 0;
  for (int k = 0; k <= K; ++k) {
    const BigInt common = binomial(n - k, k) * binomial(n_prime - (K - k), K - k);
    rhs1 += common;
    rhs2 += common;
  }
  for (int k = 0; k <= K - 1; ++k) {
    const int kp = K - 1 - k;
    rhs1 += binomial(n - 1 - k, k) * binomial(n_prime - 1 - kp, kp);
    rhs2 += binomial(n - 1 - k, k) * binomial(n_prime - kp, kp) +
            binomial(n - k, k) * binomial(n_prime - 1 - kp, kp);
  }
  return lhs1 == rhs1 && lhs2 == rhs2;
}

}  // namespace treeshift
