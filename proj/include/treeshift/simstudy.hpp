#pragma once

#include "treeshift/model_selection.hpp"
#include "treeshift/phylo_tree.hpp"
#include "treeshift/rng.hpp"
#include "treeshift/shift_model.hpp"

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace treeshift {

// Pair-counting adjusted Rand index. Two single-cluster partitions score 1.
double adjusted_rand_index(std::span<const int> a, std::span<const int> b);

// Tip partition induced by a shift configuration (tips grouped by their
// nearest shifted ancestor).
std::vector<int> tip_partition(const PhyloTree& tree, const ShiftConfig& shifts);

// One shift per height segment [k h / K, (k + 1) h / K), each on an edge
// drawn uniformly among those crossing the segment; redrawn until the
// support is parsimonious.
std::vector<NodeId> balanced_shift_positions(const PhyloTree& tree, int K, Rng& rng);

struct ShiftValueMixture {
  double mean = 4.0;  // components N(mean, sd^2) and N(-mean, sd^2), equal weights
  double sd = 1.0;
};

struct Scenario {
  ProcessKind kind = ProcessKind::OU;
  double alpha = 3.0;
  double gamma2 = 0.5;
  double sigma2 = 1.0;  // BM only
  int K = 5;
  double root_value = 0.0;
  ShiftValueMixture mixture;
};

struct SimulatedTraits {
  ModelParams truth;
  Eigen::VectorXd nodes;  // all node values
  Eigen::VectorXd Y;      // tip values
};

// Shift positions and values come from the "shifts" stream, noise from the
// "noise" stream of `seed`.
SimulatedTraits simulate_scenario(const PhyloTree& tree, const Scenario& scenario, std::uint64_t seed);

struct ReplicateResult {
  int replicate = 0;
  std::uint64_t seed = 0;
  int K_true = 0;
  int K_hat = -1;
  double ari = 0.0;
  double alpha_hat = 0.0;
  double gamma2_hat = 0.0;
  double root_hat = 0.0;
  double loglik = 0.0;
  std::string n_equivalent = "1";
  bool unambiguous = false;
  double sensitivity = 0.0;       // unambiguous fits only
  double fpr = 0.0;               // unambiguous fits only
  double best_sensitivity = 0.0;  // best over the equivalence class (extension)
  double best_fpr = 0.0;
  std::string error;
};

// Sensitivity TP / K_t and false positive rate FP / (n + m - K_t) of a
// fitted support against the true one.
struct SupportScores {
  double sensitivity = 0.0;
  double fpr = 0.0;
};

SupportScores support_scores(const PhyloTree& tree, std::span<const NodeId> truth,
                             std::span<const NodeId> fitted);

ReplicateResult run_replicate(const PhyloTree& tree, const Scenario& scenario,
                              const SelectionConfig& config, std::uint64_t seed, int replicate);

struct StudyCell {
  int n_tips = 64;
  Scenario scenario;
};

struct StudyConfig {
  std::vector<StudyCell> cells;
  int replicates = 20;
  std::uint64_t seed = 1;
  double birth_rate = 0.1;
  SelectionConfig selection;
  int jobs = 0;
  bool parallel = true;
};

struct CellSummary {
  StudyCell cell;
  std::vector<ReplicateResult> replicates;
  double median_ari = 0.0;
  double frac_K_hat_le_true = 0.0;
  double frac_K_hat_eq_true = 0.0;
  std::vector<int> K_hat_histogram;  // index K
  double mean_sensitivity = 0.0;     // over unambiguous replicates
  double mean_fpr = 0.0;
  int n_unambiguous = 0;
  int n_failed = 0;
};

// The tree for size n comes from the "tree" stream of the study seed (one
// tree per size, shared by every cell of that size).
PhyloTree study_tree(const StudyConfig& config, int n_tips);

CellSummary summarize(const StudyCell& cell, std::vector<ReplicateResult> replicates);

std::vector<CellSummary> run_study(const StudyConfig& config);

}  // namespace treeshift
