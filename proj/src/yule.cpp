#include "treeshift/yule.hpp"

#include "treeshift/errors.hpp"
#include "treeshift/rng.hpp"

#include <random>
#include <string>
#include <vector>

namespace treeshift {

PhyloTree simulate_yule(int n_tips, double birth_rate, std::uint64_t seed) {
  if (n_tips < 2) throw ValidationError("Yule simulation needs at least 2 tips");
  if (!(birth_rate > 0.0)) throw ValidationError("birth rate must be positive");

  Rng rng = make_rng(seed, "tree");
  RawTree raw;
  raw.nodes.reserve(2 * n_tips - 1);
  std::vector<double> birth_time;

  auto add_node = [&](int parent, double t) {
    const int id = static_cast<int>(raw.nodes.size());
    raw.nodes.emplace_back();
    raw.nodes[id].parent = parent;
    if (parent >= 0) raw.nodes[parent].children.push_back(id);
    birth_time.push_back(t);
    return id;
  };

  raw.root = add_node(-1, 0.0);
  std::vector<int> pending{add_node(raw.root, 0.0), add_node(raw.root, 0.0)};
  double now = 0.0;
  while (true) {
    const auto k = static_cast<double>(pending.size());
    now += std::exponential_distribution<double>(k * birth_rate)(rng);
    if (static_cast<int>(pending.size()) == n_tips) break;
    std::uniform_int_distribution<std::size_t> pick(0, pending.size() - 1);
    const std::size_t slot = pick(rng);
    const int splitting = pending[slot];
    // The lineage ends here as an internal node with two new lineages.
    raw.nodes[splitting].length = now - birth_time[splitting];
    raw.nodes[splitting].has_length = true;
    const int left = add_node(splitting, now);
    const int right = add_node(splitting, now);
    pending[slot] = left;
    pending.push_back(right);
  }
  const double height = now;
  for (int lineage : pending) {
    raw.nodes[lineage].length = now - birth_time[lineage];
    raw.nodes[lineage].has_length = true;
  }
  for (auto& node : raw.nodes) node.length /= height;

  // Label tips in left-to-right order so labels follow tip numbering.
  std::vector<int> stack{raw.root};
  int next = 1;
  while (!stack.empty()) {
    const int v = stack.back();
    stack.pop_back();
    if (raw.nodes[v].children.empty()) {
      raw.nodes[v].label = "t" + std::to_string(next++);
    }
    for (auto it = raw.nodes[v].children.rbegin(); it != raw.nodes[v].children.rend(); ++it) {
      stack.push_back(*it);
    }
  }
  return PhyloTree::from_raw(raw);
}

}  // namespace treeshift
