#pragma once

#include "treeshift/phylo_tree.hpp"

#include <cstdint>

namespace treeshift {

// Pure-birth tree with `n_tips` tips labelled t1..tn, rescaled to height 1.
// The process starts with the root split at time 0; each of the n-1 waiting
// times is exponential with rate (lineages * birth_rate), the first n-2 end
// in a split of a uniformly chosen lineage and the last one closes the tree.
PhyloTree simulate_yule(int n_tips, double birth_rate, std::uint64_t seed);

}  // namespace treeshift
