#include "treeshift/em_engine.hpp"
#include "treeshift/errors.hpp"
#include "treeshift/io.hpp"
#include "treeshift/model_selection.hpp"
#include "treeshift/newick.hpp"
#include "treeshift/parsimony.hpp"
#include "treeshift/simstudy.hpp"
#include "treeshift/yule.hpp"

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

using namespace treeshift;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitOther = 1;
constexpr int kExitValidation = 2;
constexpr int kExitNumerical = 3;

void emit(const std::string& path, const std::string& text) {
  if (path.empty() || path == "-") {
    std::cout << text;
  } else {
    write_text_file(path, text);
  }
}

void emit_json(const std::string& path, const Json& j) { emit(path, j.dump(2) + "\n"); }

double rate_from(const Json& j, const char* rate_key, const char* half_life_key) {
  if (j.contains(rate_key)) return j.at(rate_key).get<double>();
  if (j.contains(half_life_key)) return std::log(2.0) / j.at(half_life_key).get<double>();
  throw ValidationError(std::string("missing '") + rate_key + "' or '" + half_life_key + "'");
}

Json tip_partition_json(const PhyloTree& tree, const ShiftConfig& shifts) {
  const auto part = tip_partition(tree, shifts);
  Json j = Json::object();
  for (int k = 0; k < tree.n_tips(); ++k) j[tree.display_label(tree.tip_node(k))] = part[k];
  return j;
}

Scenario scenario_from_json(const Json& j, Scenario base = {}) {
  if (j.contains("kind")) base.kind = parse_process_kind(j.at("kind").get<std::string>());
  if (j.contains("alpha") || j.contains("half_life")) base.alpha = rate_from(j, "alpha", "half_life");
  base.gamma2 = j.value("gamma2", base.gamma2);
  base.sigma2 = j.value("sigma2", base.sigma2);
  base.K = j.value("K", base.K);
  base.root_value = j.value("root_value", base.root_value);
  if (j.contains("mixture")) {
    base.mixture.mean = j.at("mixture").value("mean", base.mixture.mean);
    base.mixture.sd = j.at("mixture").value("sd", base.mixture.sd);
  }
  if (!(base.alpha > 0.0) || !(base.gamma2 > 0.0) || !(base.sigma2 > 0.0) || base.K < 0 ||
      !(base.mixture.sd >= 0.0)) {
    throw ValidationError("scenario parameters out of range");
  }
  return base;
}

struct Common {
  std::string tree;
  std::string traits;
  std::string kind = "ou";
  std::string out;
  int max_iter = 1000;
  double tol = 1e-6;
  std::uint64_t seed = 1;
  int jobs = 0;
  std::size_t max_solutions = 1000;
  int restarts = 2;
};

FitOptions fit_options(const Common& c) {
  if (c.max_iter < 1) throw ValidationError("--max-iter must be positive");
  if (!(c.tol > 0.0)) throw ValidationError("--tol must be positive");
  FitOptions o;
  o.max_iter = c.max_iter;
  o.tol = c.tol;
  o.seed = c.seed;
  o.max_solutions = c.max_solutions;
  o.restarts = c.restarts;
  return o;
}

std::vector<double> alpha_grid_for(const PhyloTree& tree, const std::vector<double>& values, int size) {
  if (!values.empty()) {
    for (double a : values) {
      if (!(a > 0.0)) throw ValidationError("alpha values must be positive");
    }
    return values;
  }
  return default_alpha_grid(tree, size);
}

void setup_logging() {
  auto logger = spdlog::stderr_color_mt("treeshift");
  spdlog::set_default_logger(logger);
  spdlog::set_level(spdlog::level::warn);
  if (const char* level = std::getenv("TREESHIFT_LOG")) {
    spdlog::set_level(spdlog::level::from_str(level));
  }
}

}  // namespace

int main(int argc, char** argv) {
  setup_logging();
  CLI::App app{"Adaptive shift detection for traits on phylogenetic trees"};
  app.require_subcommand(1);
  Common c;

  auto add_tree = [&](CLI::App* sub) { sub->add_option("--tree", c.tree, "Newick tree file")->required(); };
  auto add_out = [&](CLI::App* sub) { sub->add_option("-o,--out", c.out, "output file (default stdout)"); };
  auto add_fit_flags = [&](CLI::App* sub) {
    sub->add_option("--traits", c.traits, "trait TSV (tip_label, value)")->required();
    sub->add_option("--kind", c.kind, "bm or ou")->check(CLI::IsMember({"bm", "ou"}));
    sub->add_option("--max-iter", c.max_iter, "EM iteration cap");
    sub->add_option("--tol", c.tol, "relative log-likelihood tolerance");
    sub->add_option("--seed", c.seed, "seed for restarts");
    sub->add_option("--restarts", c.restarts, "perturbed EM restarts");
    sub->add_option("--max-solutions", c.max_solutions, "cap on listed equivalent solutions");
  };

  // tree
  auto* tree_cmd = app.add_subcommand("tree", "summarize a tree");
  add_tree(tree_cmd);
  add_out(tree_cmd);
  std::string node_table;
  tree_cmd->add_option("--node-table", node_table, "write the node table TSV here");

  // yule
  auto* yule_cmd = app.add_subcommand("yule", "simulate a Yule tree of height 1");
  int yule_n = 64;
  double birth_rate = 0.1;
  yule_cmd->add_option("--n", yule_n, "number of tips")->required();
  yule_cmd->add_option("--birth-rate", birth_rate, "birth rate");
  yule_cmd->add_option("--seed", c.seed, "seed");
  add_out(yule_cmd);

  // simulate
  auto* sim_cmd = app.add_subcommand("simulate", "simulate traits with shifts");
  add_tree(sim_cmd);
  std::string params_file, traits_out, truth_out;
  sim_cmd->add_option("--params", params_file, "params JSON")->required();
  sim_cmd->add_option("--seed", c.seed, "seed");
  sim_cmd->add_option("--traits-out", traits_out, "trait TSV output")->required();
  sim_cmd->add_option("--truth-out", truth_out, "ground truth JSON output")->required();

  // fit
  auto* fit_cmd = app.add_subcommand("fit", "fit a model with K shifts by EM");
  add_tree(fit_cmd);
  add_fit_flags(fit_cmd);
  add_out(fit_cmd);
  int fit_K = 0;
  std::vector<double> fit_alpha;
  int fit_grid = 6;
  bool estimate_alpha = false;
  fit_cmd->add_option("--K", fit_K, "number of shifts")->required();
  auto* alpha_opt = fit_cmd->add_option("--alpha", fit_alpha, "fixed alpha (several values form a grid)");
  auto* grid_opt = fit_cmd->add_option("--alpha-grid", fit_grid, "size of the default alpha grid");
  auto* est_opt = fit_cmd->add_flag("--estimate-alpha", estimate_alpha, "update alpha inside EM");
  alpha_opt->excludes(est_opt);
  grid_opt->excludes(est_opt);

  // select
  auto* sel_cmd = app.add_subcommand("select", "choose the number of shifts");
  add_tree(sel_cmd);
  add_fit_flags(sel_cmd);
  add_out(sel_cmd);
  SelectionConfig sel;
  int sel_K_max = -1;
  std::string df = "theorem";
  std::vector<double> sel_alpha;
  std::string table_out;
  sel_cmd->add_option("--A", sel.A, "penalty constant (> 1)");
  sel_cmd->add_option("--kappa", sel.kappa, "dimension bound constant");
  sel_cmd->add_option("--K-max", sel_K_max, "largest K");
  sel_cmd->add_option("--df", df, "degrees of freedom convention")->check(CLI::IsMember({"theorem", "proposition"}));
  sel_cmd->add_option("--alpha", sel_alpha, "explicit alpha grid");
  sel_cmd->add_option("--alpha-grid", sel.alpha_grid_size, "size of the default alpha grid");
  sel_cmd->add_option("--jobs", c.jobs, "worker threads (0 = all)");
  sel_cmd->add_option("--table", table_out, "criterion table TSV");

  // enumerate
  auto* enum_cmd = app.add_subcommand("enumerate", "list the parsimonious equivalence class");
  add_tree(enum_cmd);
  add_out(enum_cmd);
  std::string coloring_file, shifts_file;
  double enum_alpha = 0.0;
  auto* col_opt = enum_cmd->add_option("--coloring", coloring_file, "tip coloring TSV (tip_label, color)");
  auto* shf_opt = enum_cmd->add_option("--shifts", shifts_file, "shift configuration JSON");
  col_opt->excludes(shf_opt);
  enum_cmd->add_option("--kind", c.kind, "process of the shift values")->check(CLI::IsMember({"bm", "ou"}));
  enum_cmd->add_option("--alpha", enum_alpha, "alpha for OU shift values");
  enum_cmd->add_option("--max-solutions", c.max_solutions, "cap on listed solutions");

  // count
  auto* count_cmd = app.add_subcommand("count", "count partitions or class sizes");
  add_tree(count_cmd);
  add_out(count_cmd);
  bool partitions = false;
  int count_K = 1;
  std::string count_coloring;
  auto* part_opt = count_cmd->add_flag("--partitions", partitions, "N_K and M_K up to --K");
  count_cmd->add_option("--K", count_K, "largest number of groups");
  auto* ccol_opt = count_cmd->add_option("--coloring", count_coloring, "tip coloring TSV");
  part_opt->excludes(ccol_opt);

  // simstudy
  auto* study_cmd = app.add_subcommand("simstudy", "run the simulation study");
  std::string config_file, out_dir;
  bool serial = false;
  study_cmd->add_option("--config", config_file, "study config JSON")->required();
  study_cmd->add_option("--out-dir", out_dir, "output directory")->required();
  study_cmd->add_option("--jobs", c.jobs, "worker threads (0 = all)");
  study_cmd->add_flag("--serial", serial, "run replicates one after another");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitValidation;
  }

  try {
    if (*tree_cmd) {
      const PhyloTree tree = read_newick_file(c.tree);
      Json j;
      j["n_tips"] = tree.n_tips();
      j["n_internal"] = tree.n_internal();
      j["height"] = tree.height();
      j["ultrametric"] = tree.is_ultrametric();
      j["binary"] = tree.is_binary();
      j["newick"] = write_newick(tree);
      emit_json(c.out, j);
      if (!node_table.empty()) {
        std::ostringstream ss;
        write_node_table(ss, tree);
        write_text_file(node_table, ss.str());
      }
    } else if (*yule_cmd) {
      if (yule_n < 2 || !(birth_rate > 0.0)) throw ValidationError("need --n >= 2 and a positive birth rate");
      emit(c.out, write_newick(simulate_yule(yule_n, birth_rate, c.seed), false) + "\n");
    } else if (*sim_cmd) {
      const PhyloTree tree = read_newick_file(c.tree);
      const Json p = read_json_file(params_file);
      ModelParams truth;
      Eigen::VectorXd Y;
      if (p.contains("shifts")) {
        const Scenario sc = scenario_from_json(p);
        const ShiftConfig shifts = shift_config_from_json(tree, p);
        truth = sc.kind == ProcessKind::OU ? ModelParams::ou(shifts, sc.alpha, sc.gamma2)
                                           : ModelParams::bm(shifts, sc.sigma2);
        truth.validate(tree);
        Y = tip_values(tree, simulate_traits(tree, truth, c.seed));
      } else {
        Scenario sc = scenario_from_json(p);
        if (!p.contains("K")) throw ValidationError("params need either 'shifts' or 'K'");
        const SimulatedTraits sim = simulate_scenario(tree, sc, c.seed);
        truth = sim.truth;
        Y = sim.Y;
      }
      std::ostringstream ss;
      write_traits(ss, tree, Y);
      write_text_file(traits_out, ss.str());
      Json j;
      j["kind"] = std::string(to_string(truth.kind));
      j["seed"] = c.seed;
      j["params"] = params_to_json(truth);
      j["root_value"] = truth.shifts.root_value();
      j["shifts"] = shifts_to_json(tree, truth.shifts);
      j["tip_partition"] = tip_partition_json(tree, truth.shifts);
      write_text_file(truth_out, j.dump(2) + "\n");
    } else if (*fit_cmd) {
      const PhyloTree tree = read_newick_file(c.tree);
      const Eigen::VectorXd Y = read_traits_file(c.traits, tree);
      const ProcessKind kind = parse_process_kind(c.kind);
      FitOptions opts = fit_options(c);
      FitResult result;
      if (kind == ProcessKind::BM) {
        result = fit(tree, Y, fit_K, kind, opts);
      } else if (estimate_alpha) {
        opts.estimate_alpha = true;
        result = fit(tree, Y, fit_K, kind, opts);
      } else if (fit_alpha.size() == 1) {
        if (!(fit_alpha[0] > 0.0)) throw ValidationError("alpha must be positive");
        opts.alpha = fit_alpha[0];
        result = fit(tree, Y, fit_K, kind, opts);
      } else {
        result = fit_alpha_grid(tree, Y, fit_K, alpha_grid_for(tree, fit_alpha, fit_grid), opts, false, 1);
      }
      emit_json(c.out, fit_to_json(tree, result));
    } else if (*sel_cmd) {
      const PhyloTree tree = read_newick_file(c.tree);
      const Eigen::VectorXd Y = read_traits_file(c.traits, tree);
      const ProcessKind kind = parse_process_kind(c.kind);
      sel.fit = fit_options(c);
      if (sel_K_max >= 0) sel.K_max = sel_K_max;
      sel.df = df == "theorem" ? DfConvention::Theorem : DfConvention::Proposition;
      if (kind == ProcessKind::OU) sel.alpha_grid = alpha_grid_for(tree, sel_alpha, sel.alpha_grid_size);
      sel.jobs = c.jobs;
      const SelectionResult result = select(tree, Y, kind, sel);
      emit_json(c.out, selection_to_json(tree, result));
      if (!table_out.empty()) {
        std::ostringstream ss;
        write_criterion_table(ss, result);
        write_text_file(table_out, ss.str());
      }
    } else if (*enum_cmd) {
      const PhyloTree tree = read_newick_file(c.tree);
      TipColoring d;
      if (!coloring_file.empty()) {
        std::ifstream in(coloring_file);
        if (!in) throw ValidationError("cannot read '" + coloring_file + "'");
        d = read_tip_coloring(in, tree);
      } else if (!shifts_file.empty()) {
        const ProcessKind kind = parse_process_kind(c.kind);
        if (kind == ProcessKind::OU && !(enum_alpha > 0.0)) throw ValidationError("OU shifts need --alpha > 0");
        const ShiftConfig s = shift_config_from_json(tree, read_json_file(shifts_file));
        d = tip_coloring(tree, coloring_from_shifts(tree, s, kind, enum_alpha));
      } else {
        throw ValidationError("enumerate needs --coloring or --shifts");
      }
      emit_json(c.out, class_listing_to_json(tree, d, enumerate_class(tree, d, c.max_solutions)));
    } else if (*count_cmd) {
      const PhyloTree tree = read_newick_file(c.tree);
      Json j;
      if (!count_coloring.empty()) {
        std::ifstream in(count_coloring);
        if (!in) throw ValidationError("cannot read '" + count_coloring + "'");
        const TipColoring d = read_tip_coloring(in, tree);
        const SankoffTable table = sankoff(tree, d);
        j["n_colors"] = d.n_colors;
        j["min_shifts"] = table.total_cost;
        j["class_size"] = class_size(tree, d).str();
      } else {
        if (!partitions) throw ValidationError("count needs --partitions or --coloring");
        if (count_K < 1) throw ValidationError("--K must be at least 1");
        const PartitionCounts pc = count_partitions(tree, count_K);
        Json rows = Json::array();
        for (int K = 1; K <= count_K; ++K) {
          Json row;
          row["K"] = K;
          row["N"] = pc.N[K].str();
          row["M"] = pc.M[K].str();
          rows.push_back(row);
        }
        j["partitions"] = rows;
      }
      emit_json(c.out, j);
    } else if (*study_cmd) {
      const Json cfg = read_json_file(config_file);
      StudyConfig study;
      study.seed = cfg.value("seed", study.seed);
      study.replicates = cfg.value("replicates", study.replicates);
      study.birth_rate = cfg.value("birth_rate", study.birth_rate);
      study.jobs = c.jobs;
      study.parallel = !serial;
      const Scenario base = scenario_from_json(cfg.value("base", Json::object()));
      const auto sizes = cfg.value("tree_sizes", std::vector<int>{32, 64});
      if (sizes.empty()) throw ValidationError("tree_sizes must not be empty");
      std::vector<Scenario> scenarios{base};
      if (cfg.contains("mixture")) scenarios[0] = scenario_from_json(Json{{"mixture", cfg["mixture"]}}, base);
      const Scenario root = scenarios[0];
      if (cfg.contains("vary")) {
        const Json& vary = cfg["vary"];
        for (const auto& [key, values] : vary.items()) {
          if (!values.is_array() || values.empty()) throw ValidationError("grid '" + key + "' must be a non-empty array");
          for (const auto& v : values) {
            Scenario s = root;
            if (key == "half_life") {
              s.alpha = std::log(2.0) / v.get<double>();
            } else if (key == "alpha") {
              s.alpha = v.get<double>();
            } else if (key == "gamma2") {
              s.gamma2 = v.get<double>();
            } else if (key == "K") {
              s.K = v.get<int>();
            } else {
              throw ValidationError("unknown grid '" + key + "'");
            }
            if (s.alpha == root.alpha && s.gamma2 == root.gamma2 && s.K == root.K) continue;
            scenarios.push_back(scenario_from_json(Json::object(), s));
          }
        }
      }
      for (int n : sizes) {
        if (n < 4) throw ValidationError("tree sizes must be at least 4");
        for (const auto& s : scenarios) study.cells.push_back({n, s});
      }
      if (cfg.contains("selection")) {
        const Json& s = cfg["selection"];
        study.selection.A = s.value("A", study.selection.A);
        study.selection.kappa = s.value("kappa", study.selection.kappa);
        if (s.contains("K_max")) study.selection.K_max = s["K_max"].get<int>();
        study.selection.alpha_grid_size = s.value("alpha_grid_size", study.selection.alpha_grid_size);
        if (s.value("df", std::string("theorem")) == "proposition") study.selection.df = DfConvention::Proposition;
        study.selection.fit.max_iter = s.value("max_iter", study.selection.fit.max_iter);
        study.selection.fit.tol = s.value("tol", study.selection.fit.tol);
        study.selection.fit.restarts = s.value("restarts", study.selection.fit.restarts);
        study.selection.fit.max_solutions = s.value("max_solutions", study.selection.fit.max_solutions);
      }
      const auto summaries = run_study(study);
      std::filesystem::create_directories(out_dir);
      const std::filesystem::path dir(out_dir);
      std::ostringstream reps, summary;
      write_replicates(reps, summaries);
      write_study_summary(summary, summaries);
      write_text_file(dir / "replicates.tsv", reps.str());
      write_text_file(dir / "summary.tsv", summary.str());
      write_text_file(dir / "summary.json", study_summary_to_json(summaries).dump(2) + "\n");
    }
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitValidation;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return kExitNumerical;
  } catch (const Json::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitValidation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitOther;
  }
  return kExitOk;
}
