#pragma once

#include "treeshift/newick.hpp"
#include "treeshift/phylo_tree.hpp"
#include "treeshift/rng.hpp"
#include "treeshift/yule.hpp"

#include <algorithm>
#include <functional>
#include <numeric>
#include <random>
#include <set>
#include <string>
#include <vector>

namespace testkit {

using treeshift::PhyloTree;
using treeshift::Rng;

// Newick text for a random topology over tips t1..tn. Each internal node
// splits its tip range into 2 or (when allowed) 3 contiguous blocks.
// Branch lengths are uniform on [0.1, 1.1), so the tree is not ultrametric.
inline std::string random_newick(int n, Rng& rng, bool multifurcating = false) {
  std::uniform_real_distribution<double> len(0.1, 1.1);
  int next_tip = 1;
  std::function<std::string(int)> build = [&](int size) -> std::string {
    if (size == 1) return "t" + std::to_string(next_tip++);
    int blocks = 2;
    if (multifurcating && size >= 3 && std::bernoulli_distribution(0.3)(rng)) blocks = 3;
    std::vector<int> sizes(blocks, 1);
    for (int extra = size - blocks; extra > 0; --extra) {
      sizes[std::uniform_int_distribution<int>(0, blocks - 1)(rng)]++;
    }
    std::string s = "(";
    for (int b = 0; b < blocks; ++b) {
      if (b) s += ",";
      s += build(sizes[b]) + ":" + std::to_string(len(rng));
    }
    return s + ")";
  };
  return build(n) + ";";
}

inline PhyloTree random_tree(int n, Rng& rng, bool multifurcating = false) {
  return treeshift::parse_newick(random_newick(n, rng, multifurcating));
}

inline PhyloTree random_ultrametric(int n, Rng& rng) {
  return treeshift::simulate_yule(n, 0.1, rng());
}

// All rooted tree shapes with `n` leaves (multifurcations allowed), as
// Newick statements with unit branch lengths and tips t1..tn.
inline std::vector<std::string> all_shapes(int n, bool binary_only = false) {
  // canonical shape strings for each leaf count
  std::vector<std::vector<std::string>> shapes(n + 1);
  shapes[1] = {"L"};
  for (int size = 2; size <= n; ++size) {
    std::set<std::string> found;
    // multisets of child shapes with total size `size` and at least 2 parts
    std::function<void(int, int, std::size_t, std::vector<std::string>&)> rec =
        [&](int remaining, int max_part, std::size_t max_index, std::vector<std::string>& parts) {
          if (binary_only && parts.size() == 2 && remaining > 0) return;
          if (remaining == 0) {
            if (parts.size() < 2) return;
            if (binary_only && parts.size() != 2) return;
            std::vector<std::string> sorted = parts;
            std::sort(sorted.begin(), sorted.end());
            std::string s = "(";
            for (std::size_t i = 0; i < sorted.size(); ++i) s += (i ? "," : "") + sorted[i];
            found.insert(s + ")");
            return;
          }
          for (int part = std::min(remaining, max_part); part >= 1; --part) {
            if (part == size) continue;
            const std::size_t limit = part == max_part ? max_index : shapes[part].size() - 1;
            for (std::size_t k = 0; k <= limit && k < shapes[part].size(); ++k) {
              parts.push_back(shapes[part][k]);
              rec(remaining - part, part, k, parts);
              parts.pop_back();
            }
          }
        };
    std::vector<std::string> parts;
    rec(size, size, static_cast<std::size_t>(-1), parts);
    shapes[size].assign(found.begin(), found.end());
  }
  std::vector<std::string> out;
  for (const auto& shape : shapes[n]) {
    std::string s;
    int tip = 1;
    for (char c : shape) {
      if (c == 'L') {
        s += "t" + std::to_string(tip++) + ":1";
      } else if (c == ')') {
        s += "):1";
      } else {
        s += c;
      }
    }
    // drop the root branch length
    s.resize(s.size() - 2);
    out.push_back(s + ";");
  }
  return out;
}

// Every assignment of colors 0..k-1 to n items (k^n of them).
inline std::vector<std::vector<int>> all_assignments(int n, int k) {
  std::vector<std::vector<int>> out;
  std::vector<int> cur(n, 0);
  while (true) {
    out.push_back(cur);
    int i = 0;
    while (i < n && ++cur[i] == k) cur[i++] = 0;
    if (i == n) break;
  }
  return out;
}

// Ancestors of v (inclusive), walking parent links.
inline std::vector<int> path_to_root(const PhyloTree& tree, int v) {
  std::vector<int> p;
  for (; v != treeshift::kNoParent; v = tree.parent(v)) p.push_back(v);
  return p;
}

// Tips grouped by their nearest marked ancestor (the root is always
// marked), relabeled by first appearance.
inline std::vector<int> regimes_of(const PhyloTree& tree, const std::vector<int>& support) {
  std::vector<char> marked(tree.n_nodes(), 0);
  marked[0] = 1;
  for (int s : support) marked[s] = 1;
  std::vector<int> raw(tree.n_tips());
  for (int k = 0; k < tree.n_tips(); ++k) {
    int v = tree.tip_node(k);
    while (!marked[v]) v = tree.parent(v);
    raw[k] = v;
  }
  std::vector<int> ids;
  std::vector<int> out(tree.n_tips());
  for (int k = 0; k < tree.n_tips(); ++k) {
    auto it = std::find(ids.begin(), ids.end(), raw[k]);
    if (it == ids.end()) {
      ids.push_back(raw[k]);
      out[k] = static_cast<int>(ids.size()) - 1;
    } else {
      out[k] = static_cast<int>(it - ids.begin());
    }
  }
  return out;
}

// Calls f(subset) for every k-subset of {lo, ..., hi}.
inline void for_each_subset(int lo, int hi, int k, const std::function<void(const std::vector<int>&)>& f) {
  std::vector<int> cur;
  std::function<void(int)> rec = [&](int start) {
    if (static_cast<int>(cur.size()) == k) {
      f(cur);
      return;
    }
    for (int v = start; v <= hi; ++v) {
      cur.push_back(v);
      rec(v + 1);
      cur.pop_back();
    }
  };
  rec(lo);
}

// Minimal number of color changes over all node colorings that agree with
// `tips` at the leaves, internal colors ranging over n_colors + 1 values,
// together with every minimiser.
struct BruteClass {
  int cost = 0;
  std::set<std::vector<int>> colorings;
};

inline BruteClass brute_force_class(const PhyloTree& tree, const std::vector<int>& tips, int n_colors) {
  const int m = tree.n_internal();
  BruteClass best;
  best.cost = tree.n_nodes();
  for (const auto& internal : all_assignments(m, n_colors + 1)) {
    std::vector<int> colors(internal);
    colors.insert(colors.end(), tips.begin(), tips.end());
    int cost = 0;
    for (int v = 1; v < tree.n_nodes(); ++v) cost += colors[v] != colors[tree.parent(v)];
    if (cost < best.cost) {
      best.cost = cost;
      best.colorings.clear();
    }
    if (cost == best.cost) best.colorings.insert(colors);
  }
  return best;
}

}  // namespace testkit
