#pragma once

#include <Eigen/Dense>

#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace treeshift {

// Node numbering is 0-based: the root is node 0, internal nodes occupy
// [0, m) in preorder, tips occupy [m, m + n) in left-to-right order.
// With this ordering every ancestor has a smaller index than its descendants.
using NodeId = int;
inline constexpr NodeId kNoParent = -1;

inline constexpr double kUltrametricTolerance = 1e-8;

// Topology as read from a file or produced by a simulator, before numbering.
struct RawTree {
  struct Node {
    int parent = -1;
    std::vector<int> children;
    double length = 0.0;
    bool has_length = false;
    std::string label;
  };
  std::vector<Node> nodes;
  int root = 0;
};

class PhyloTree {
 public:
  // Validates and renumbers. Throws ValidationError on: fewer than 2 tips,
  // unlabeled or duplicate tips, missing or non-positive branch lengths,
  // internal nodes with a single child.
  static PhyloTree from_raw(const RawTree& raw);

  int n_tips() const { return n_tips_; }
  int n_internal() const { return n_internal_; }
  int n_nodes() const { return n_tips_ + n_internal_; }
  NodeId root() const { return 0; }

  NodeId parent(NodeId i) const { return parent_[i]; }
  std::span<const NodeId> children(NodeId i) const { return children_[i]; }
  double length(NodeId i) const { return length_[i]; }
  double time(NodeId i) const { return time_[i]; }
  double height() const { return height_; }

  bool is_tip(NodeId i) const { return i >= n_internal_; }
  NodeId tip_node(int k) const { return n_internal_ + k; }
  int tip_index(NodeId i) const { return i - n_internal_; }

  // Raw label from the input; empty for unlabeled internal nodes.
  const std::string& label(NodeId i) const { return label_[i]; }
  // Input label when present and unique, otherwise "n<k>" with k the
  // 1-based preorder rank of the internal node.
  const std::string& display_label(NodeId i) const { return display_label_[i]; }
  std::optional<NodeId> find(std::string_view display_label) const;

  std::span<const NodeId> preorder() const { return preorder_; }
  std::span<const NodeId> postorder() const { return postorder_; }

  // Position of each node in preorder(); the subtree of i occupies
  // preorder()[preorder_position(i), preorder_position(i) + subtree_size(i)).
  int preorder_position(NodeId i) const { return preorder_pos_[i]; }
  int subtree_size(NodeId i) const { return subtree_size_[i]; }
  int subtree_tip_count(NodeId i) const { return subtree_tips_[i]; }
  bool is_ancestor(NodeId ancestor, NodeId node) const;

  bool is_ultrametric(double rel_tol = kUltrametricTolerance) const;
  bool is_binary() const;
  int max_children() const;

  // Same tree with branch lengths multiplied by `factor`.
  PhyloTree scaled(double factor) const;

 private:
  PhyloTree() = default;
  void finalize();

  int n_tips_ = 0;
  int n_internal_ = 0;
  double height_ = 0.0;
  std::vector<NodeId> parent_;
  std::vector<std::vector<NodeId>> children_;
  std::vector<double> length_;
  std::vector<double> time_;
  std::vector<std::string> label_;
  std::vector<std::string> display_label_;
  std::vector<NodeId> preorder_;
  std::vector<NodeId> postorder_;
  std::vector<int> preorder_pos_;
  std::vector<int> subtree_size_;
  std::vector<int> subtree_tips_;
};

// Incidence matrices. U(i, j) = 1 iff j is i or an ancestor of i; T holds
// the tip rows of U.
struct TreeMatrices {
  Eigen::MatrixXi U;
  Eigen::MatrixXi T;
};

TreeMatrices tree_matrices(const PhyloTree& tree);

// Pairwise quantities over all nodes: shared(i, j) = time of mrca(i, j),
// distance(i, j) = t_i + t_j - 2 shared(i, j).
struct NodeDistances {
  Eigen::MatrixXd shared_time;
  Eigen::MatrixXd distance;
};

NodeDistances distances(const PhyloTree& tree);

// Tip-only blocks of the above (n x n).
Eigen::MatrixXd tip_shared_times(const PhyloTree& tree);
Eigen::MatrixXd tip_distances(const PhyloTree& tree);

// TSV node table: id, parent, length, time, label.
void write_node_table(std::ostream& out, const PhyloTree& tree);

}  // namespace treeshift
