#pragma once

#include "treeshift/em_engine.hpp"
#include "treeshift/model_selection.hpp"
#include "treeshift/parsimony.hpp"
#include "treeshift/phylo_tree.hpp"
#include "treeshift/shift_model.hpp"
#include "treeshift/simstudy.hpp"

#include <json.hpp>

#include <filesystem>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

namespace treeshift {

using Json = nlohmann::ordered_json;

std::string read_text_file(const std::filesystem::path& path);
void write_text_file(const std::filesystem::path& path, const std::string& text);
Json read_json_file(const std::filesystem::path& path);

// Two-column TSV (tip_label, value) with an optional header line. Rows may
// come in any order; the label set must equal the tree's tip labels.
Eigen::VectorXd read_traits(std::istream& in, const PhyloTree& tree);
Eigen::VectorXd read_traits_file(const std::filesystem::path& path, const PhyloTree& tree);
void write_traits(std::ostream& out, const PhyloTree& tree, const Eigen::VectorXd& Y);

// Two-column TSV (tip_label, color); colors are arbitrary strings.
TipColoring read_tip_coloring(std::istream& in, const PhyloTree& tree);

// Shift lists are keyed by edge labels: {"parent": ..., "child": ..., "value": ...}.
Json shifts_to_json(const PhyloTree& tree, const ShiftConfig& shifts);
// {root_value, shifts: [...]}
Json shift_config_to_json(const PhyloTree& tree, const ShiftConfig& shifts);
ShiftConfig shift_config_from_json(const PhyloTree& tree, const Json& j);

Json params_to_json(const ModelParams& params);
Json fit_to_json(const PhyloTree& tree, const FitResult& fit);
Json selection_to_json(const PhyloTree& tree, const SelectionResult& result);
void write_criterion_table(std::ostream& out, const SelectionResult& result);

Json coloring_to_json(const PhyloTree& tree, const NodeColoring& coloring);
Json class_listing_to_json(const PhyloTree& tree, const TipColoring& d, const ClassListing& listing);

void write_replicates(std::ostream& out, const std::vector<CellSummary>& cells);
void write_study_summary(std::ostream& out, const std::vector<CellSummary>& cells);
Json study_summary_to_json(const std::vector<CellSummary>& cells);

}  // namespace treeshift
