#include "treeshift/phylo_tree.hpp"

#include "treeshift/errors.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <unordered_map>
#include <unordered_set>

namespace treeshift {

PhyloTree PhyloTree::from_raw(const RawTree& raw) {
  const int total = static_cast<int>(raw.nodes.size());
  if (total == 0) {
    throw ValidationError("empty tree");
  }

  // Preorder walk of the raw topology; tips and internal nodes are numbered
  // separately in visit order.
  std::vector<int> order;
  order.reserve(total);
  std::vector<int> stack{raw.root};
  std::vector<char> seen(total, 0);
  while (!stack.empty()) {
    int v = stack.back();
    stack.pop_back();
    if (seen[v]) {
      throw ValidationError("tree topology contains a cycle");
    }
    seen[v] = 1;
    order.push_back(v);
    const auto& ch = raw.nodes[v].children;
    for (auto it = ch.rbegin(); it != ch.rend(); ++it) {
      stack.push_back(*it);
    }
  }
  if (static_cast<int>(order.size()) != total) {
    throw ValidationError("tree has nodes unreachable from the root");
  }

  int n_internal = 0;
  int n_tips = 0;
  for (int v : order) {
    const auto& node = raw.nodes[v];
    if (node.children.empty()) {
      ++n_tips;
    } else if (node.children.size() == 1) {
      throw ValidationError("internal node '" + node.label + "' has a single child");
    } else {
      ++n_internal;
    }
  }
  if (n_tips < 2) {
    throw ValidationError("tree must have at least 2 tips, found " + std::to_string(n_tips));
  }

  std::vector<NodeId> new_id(total);
  {
    int next_internal = 0;
    int next_tip = n_internal;
    for (int v : order) {
      new_id[v] = raw.nodes[v].children.empty() ? next_tip++ : next_internal++;
    }
  }

  PhyloTree tree;
  tree.n_tips_ = n_tips;
  tree.n_internal_ = n_internal;
  tree.parent_.assign(total, kNoParent);
  tree.children_.assign(total, {});
  tree.length_.assign(total, 0.0);
  tree.label_.assign(total, {});

  std::unordered_set<std::string> tip_labels;
  for (int v : order) {
    const auto& node = raw.nodes[v];
    const NodeId id = new_id[v];
    tree.label_[id] = node.label;
    for (int c : node.children) {
      tree.children_[id].push_back(new_id[c]);
    }
    if (v != raw.root) {
      tree.parent_[id] = new_id[node.parent];
      if (!node.has_length) {
        throw ValidationError("missing branch length above node '" +
                              (node.label.empty() ? std::string("<unlabeled>") : node.label) + "'");
      }
      if (!(node.length > 0.0) || !std::isfinite(node.length)) {
        throw ValidationError("branch length above node '" + node.label +
                              "' must be positive and finite");
      }
      tree.length_[id] = node.length;
    }
    if (node.children.empty()) {
      if (node.label.empty()) {
        throw ValidationError("unlabeled tip");
      }
      if (!tip_labels.insert(node.label).second) {
        throw ValidationError("duplicate tip label '" + node.label + "'");
      }
    }
  }
  tree.finalize();
  return tree;
}

void PhyloTree::finalize() {
  const int total = n_nodes();
  // Ancestors precede descendants, so index order is a valid preorder for
  // times; the explicit traversal below also respects child order.
  time_.assign(total, 0.0);
  preorder_.clear();
  preorder_.reserve(total);
  std::vector<NodeId> stack{0};
  while (!stack.empty()) {
    NodeId v = stack.back();
    stack.pop_back();
    preorder_.push_back(v);
    if (v != 0) {
      time_[v] = time_[parent_[v]] + length_[v];
    }
    for (auto it = children_[v].rbegin(); it != children_[v].rend(); ++it) {
      stack.push_back(*it);
    }
  }
  postorder_.assign(preorder_.rbegin(), preorder_.rend());

  preorder_pos_.assign(total, 0);
  for (int p = 0; p < total; ++p) {
    preorder_pos_[preorder_[p]] = p;
  }
  subtree_size_.assign(total, 1);
  subtree_tips_.assign(total, 0);
  for (NodeId v : postorder_) {
    if (is_tip(v)) {
      subtree_tips_[v] = 1;
    }
    if (v != 0) {
      subtree_size_[parent_[v]] += subtree_size_[v];
      subtree_tips_[parent_[v]] += subtree_tips_[v];
    }
  }

  height_ = 0.0;
  for (int k = 0; k < n_tips_; ++k) {
    height_ = std::max(height_, time_[tip_node(k)]);
  }

  // Display labels: keep input labels when they are unique across all nodes.
  std::unordered_map<std::string, int> counts;
  for (const auto& l : label_) {
    if (!l.empty()) ++counts[l];
  }
  display_label_.assign(total, {});
  int rank = 0;
  for (NodeId v : preorder_) {
    if (is_tip(v)) {
      display_label_[v] = label_[v];
      continue;
    }
    ++rank;
    if (!label_[v].empty() && counts[label_[v]] == 1) {
      display_label_[v] = label_[v];
    } else {
      display_label_[v] = "n" + std::to_string(rank);
    }
  }
  // A synthesized name may collide with a real label; suffix until unique.
  std::unordered_set<std::string> used;
  for (NodeId v = 0; v < total; ++v) {
    if (is_tip(v) || display_label_[v] == label_[v]) used.insert(display_label_[v]);
  }
  for (NodeId v = 0; v < n_internal_; ++v) {
    if (display_label_[v] == label_[v]) continue;
    std::string candidate = display_label_[v];
    while (used.count(candidate)) candidate += "_";
    display_label_[v] = candidate;
    used.insert(candidate);
  }
}

std::optional<NodeId> PhyloTree::find(std::string_view name) const {
  for (NodeId v = 0; v < n_nodes(); ++v) {
    if (display_label_[v] == name) return v;
  }
  return std::nullopt;
}

bool PhyloTree::is_ancestor(NodeId ancestor, NodeId node) const {
  const int p = preorder_pos_[ancestor];
  const int q = preorder_pos_[node];
  return q >= p && q < p + subtree_size_[ancestor];
}

bool PhyloTree::is_ultrametric(double rel_tol) const {
  for (int k = 0; k < n_tips_; ++k) {
    if (std::abs(time_[tip_node(k)] - height_) > rel_tol * height_) return false;
  }
  return true;
}

bool PhyloTree::is_binary() const {
  for (NodeId v = 0; v < n_internal_; ++v) {
    if (children_[v].size() != 2) return false;
  }
  return true;
}

int PhyloTree::max_children() const {
  std::size_t best = 0;
  for (NodeId v = 0; v < n_internal_; ++v) best = std::max(best, children_[v].size());
  return static_cast<int>(best);
}

PhyloTree PhyloTree::scaled(double factor) const {
  if (!(factor > 0.0)) throw ValidationError("scale factor must be positive");
  PhyloTree copy = *this;
  for (auto& l : copy.length_) l *= factor;
  copy.finalize();
  return copy;
}

TreeMatrices tree_matrices(const PhyloTree& tree) {
  const int total = tree.n_nodes();
  TreeMatrices mats;
  mats.U = Eigen::MatrixXi::Zero(total, total);
  for (NodeId i = 0; i < total; ++i) {
    for (NodeId j = i; j != kNoParent; j = tree.parent(j)) {
      mats.U(i, j) = 1;
    }
  }
  mats.T = mats.U.bottomRows(tree.n_tips());
  return mats;
}

NodeDistances distances(const PhyloTree& tree) {
  const int total = tree.n_nodes();
  const auto pre = tree.preorder();
  NodeDistances out;
  out.shared_time.resize(total, total);
  for (NodeId v = 0; v < total; ++v) {
    const double tv = tree.time(v);
    const int begin = tree.preorder_position(v);
    const int end = begin + tree.subtree_size(v);
    for (int p = begin; p < end; ++p) {
      out.shared_time(v, pre[p]) = tv;
      out.shared_time(pre[p], v) = tv;
    }
    const auto ch = tree.children(v);
    for (std::size_t a = 0; a < ch.size(); ++a) {
      const int a0 = tree.preorder_position(ch[a]);
      const int a1 = a0 + tree.subtree_size(ch[a]);
      for (std::size_t b = a + 1; b < ch.size(); ++b) {
        const int b0 = tree.preorder_position(ch[b]);
        const int b1 = b0 + tree.subtree_size(ch[b]);
        for (int p = a0; p < a1; ++p) {
          for (int q = b0; q < b1; ++q) {
            out.shared_time(pre[p], pre[q]) = tv;
            out.shared_time(pre[q], pre[p]) = tv;
          }
        }
      }
    }
  }
  out.distance.resize(total, total);
  for (NodeId i = 0; i < total; ++i) {
    for (NodeId j = 0; j < total; ++j) {
      out.distance(i, j) = tree.time(i) + tree.time(j) - 2.0 * out.shared_time(i, j);
    }
    out.distance(i, i) = 0.0;
  }
  return out;
}

Eigen::MatrixXd tip_shared_times(const PhyloTree& tree) {
  // Tips are numbered in preorder, so the tips below any node form a
  // contiguous index range.
  const int n = tree.n_tips();
  std::vector<int> first_tip(tree.n_nodes(), 0);
  for (NodeId v : tree.postorder()) {
    if (tree.is_tip(v)) {
      first_tip[v] = tree.tip_index(v);
    } else {
      first_tip[v] = first_tip[tree.children(v).front()];
    }
  }
  Eigen::MatrixXd shared(n, n);
  for (int k = 0; k < n; ++k) shared(k, k) = tree.time(tree.tip_node(k));
  for (NodeId v = 0; v < tree.n_internal(); ++v) {
    const double tv = tree.time(v);
    const auto ch = tree.children(v);
    for (std::size_t a = 0; a < ch.size(); ++a) {
      const int a0 = first_tip[ch[a]];
      const int a1 = a0 + tree.subtree_tip_count(ch[a]);
      for (std::size_t b = a + 1; b < ch.size(); ++b) {
        const int b0 = first_tip[ch[b]];
        const int b1 = b0 + tree.subtree_tip_count(ch[b]);
        shared.block(a0, b0, a1 - a0, b1 - b0).setConstant(tv);
        shared.block(b0, a0, b1 - b0, a1 - a0).setConstant(tv);
      }
    }
  }
  return shared;
}

Eigen::MatrixXd tip_distances(const PhyloTree& tree) {
  const Eigen::MatrixXd shared = tip_shared_times(tree);
  const int n = tree.n_tips();
  Eigen::MatrixXd d(n, n);
  for (int a = 0; a < n; ++a) {
    for (int b = 0; b < n; ++b) {
      d(a, b) = tree.time(tree.tip_node(a)) + tree.time(tree.tip_node(b)) - 2.0 * shared(a, b);
    }
    d(a, a) = 0.0;
  }
  return d;
}

void write_node_table(std::ostream& out, const PhyloTree& tree) {
  out << "id\tparent\tlength\ttime\tlabel\n";
  out << std::setprecision(17);
  for (NodeId v = 0; v < tree.n_nodes(); ++v) {
    out << v << '\t' << tree.parent(v) << '\t' << tree.length(v) << '\t' << tree.time(v) << '\t'
        << tree.display_label(v) << '\n';
  }
}

}  // namespace treeshift
