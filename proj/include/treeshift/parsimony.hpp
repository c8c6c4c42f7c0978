#pragma once

#include "treeshift/phylo_tree.hpp"
#include "treeshift/shift_model.hpp"

#include <boost/multiprecision/cpp_int.hpp>

#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <vector>

namespace treeshift {

using BigInt = boost::multiprecision::cpp_int;

// Tip colors relabelled by first appearance in tip order, so that two
// colorings describing the same partition compare equal.
struct TipColoring {
  std::vector<int> colors;
  int n_colors = 0;

  static TipColoring canonical(std::span<const int> raw);
  bool operator==(const TipColoring&) const = default;
};

// Colors over all nodes (internal then tips).
struct NodeColoring {
  std::vector<int> colors;

  bool operator==(const NodeColoring&) const = default;
  auto operator<=>(const NodeColoring&) const = default;
};

// Child nodes whose color differs from their parent's.
std::vector<NodeId> color_change_edges(const PhyloTree& tree, const NodeColoring& coloring);

TipColoring tip_coloring(const PhyloTree& tree, const NodeColoring& coloring);

// Relative tolerance below which two node means count as equal.
inline constexpr double kHomoplasyTolerance = 1e-9;

// Colors nodes by their mean value (OU shifts are first mapped to the
// similar BM shifts). Tip colors come first in order of appearance, then
// colors only present on internal nodes. Throws HomoplasyError when the
// number of distinct means is below K + 1.
NodeColoring coloring_from_shifts(const PhyloTree& tree, const ShiftConfig& shifts,
                                  ProcessKind kind = ProcessKind::BM, double alpha = 0.0);

// BM shift vector realising `coloring` with the given value per color: the
// root takes its color's value and each color change contributes the
// difference between the child and parent values.
ShiftConfig shifts_from_coloring(const PhyloTree& tree, const NodeColoring& coloring,
                                 std::span<const double> color_values);

inline constexpr int kInfiniteCost = std::numeric_limits<int>::max() / 4;

struct SankoffTable {
  int n_colors = 0;
  std::vector<int> cost;      // node * n_colors + color
  std::vector<BigInt> count;  // optimal colorings of the subtree below
  int total_cost = 0;

  int S(NodeId i, int k) const { return cost[static_cast<std::size_t>(i) * n_colors + k]; }
  const BigInt& T(NodeId i, int k) const { return count[static_cast<std::size_t>(i) * n_colors + k]; }

  // Colors minimising S(i, .) + [. != parent_color].
  std::vector<int> admissible(NodeId i, int parent_color) const;
  std::vector<int> root_colors() const;
};

SankoffTable sankoff(const PhyloTree& tree, const TipColoring& d, int n_colors);
SankoffTable sankoff(const PhyloTree& tree, const TipColoring& d);

BigInt class_size(const PhyloTree& tree, const TipColoring& d);

// Lazy depth-first walk over all minimum-cost node colorings with the given
// tip colors. Memory is O(nodes x colors) regardless of the class size.
class ClassEnumerator {
 public:
  ClassEnumerator(const PhyloTree& tree, const TipColoring& d);

  std::optional<NodeColoring> next();
  const SankoffTable& table() const { return table_; }

 private:
  void fill_from(std::size_t position);

  const PhyloTree* tree_;
  SankoffTable table_;
  std::vector<std::vector<int>> options_;  // per preorder position
  std::vector<std::size_t> choice_;
  std::vector<int> colors_;
  bool started_ = false;
  bool done_ = false;
};

struct ClassListing {
  std::vector<NodeColoring> colorings;
  BigInt size;
  bool truncated = false;
};

// Collects up to `max_solutions` colorings; `size` is always exact.
ClassListing enumerate_class(const PhyloTree& tree, const TipColoring& d,
                             std::size_t max_solutions = std::numeric_limits<std::size_t>::max());

// N[K] and M[K] for K = 0..K_max (index 0 is always zero).
struct PartitionCounts {
  std::vector<BigInt> N;
  std::vector<BigInt> M;
};

PartitionCounts count_partitions(const PhyloTree& tree, int K_max);

BigInt binomial(long long n, long long k);

// N_{K+1} = C(2n - 2 - K, K) on a binary tree with n tips.
BigInt closed_formula_binary(int n, int K);
// M_K = C(2n - K, K - 1).
BigInt closed_formula_binary_marked(int n, int K);

// Independence of the tip-incidence columns of Supp(Delta) and the root.
bool is_parsimonious(const PhyloTree& tree, const ShiftConfig& shifts);
bool is_parsimonious(const PhyloTree& tree, std::span<const NodeId> support);

// Number of tip regimes created by a support when every shift value is
// generic: tips are grouped by their nearest shifted ancestor (or the root).
int count_tip_regimes(const PhyloTree& tree, std::span<const NodeId> support);

double log_bigint(const BigInt& x);

// Both forms of the Vandermonde-like identity for (n, n', K).
bool vandermonde_identity_check(int n, int n_prime, int K);

}  // namespace treeshift
