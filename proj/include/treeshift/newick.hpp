#pragma once

#include "treeshift/phylo_tree.hpp"

#include <filesystem>
#include <string>
#include <string_view>

namespace treeshift {

// Parses a single rooted Newick statement terminated by ';'. Every non-root
// edge needs a branch length; a root length is accepted and ignored.
// Quoted labels ('...') and bracket comments are supported.
PhyloTree parse_newick(std::string_view text);

PhyloTree read_newick_file(const std::filesystem::path& path);

// Lengths are written with 17 significant digits so that parsing the output
// reproduces the tree exactly.
std::string write_newick(const PhyloTree& tree, bool internal_labels = true);

}  // namespace treeshift
