#include "treeshift/io.hpp"

#include "treeshift/errors.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

namespace treeshift {

namespace {

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

// Splits a data line on the first tab, or on whitespace when there is none.
bool split_row(const std::string& line, std::string& first, std::string& second) {
  auto tab = line.find('\t');
  if (tab == std::string::npos) {
    tab = line.find_first_of(" ");
    if (tab == std::string::npos) return false;
  }
  first = trim(line.substr(0, tab));
  second = trim(line.substr(tab + 1));
  return !first.empty() && !second.empty();
}

bool parse_double(const std::string& s, double& out) {
  try {
    std::size_t used = 0;
    out = std::stod(s, &used);
    return used == s.size();
  } catch (const std::exception&) {
    return false;
  }
}

// Reads (tip label, text) rows, skipping blanks, '#' comments and a header.
std::map<std::string, std::string> read_tip_rows(std::istream& in, const PhyloTree& tree,
                                                 bool numeric_second) {
  std::map<std::string, std::string> rows;
  std::string line;
  int line_no = 0;
  bool first_data = true;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    std::string label, value;
    if (!split_row(t, label, value)) {
      throw ValidationError("line " + std::to_string(line_no) + ": expected two columns");
    }
    if (first_data) {
      first_data = false;
      double dummy;
      const bool is_header = numeric_second ? !parse_double(value, dummy)
                                            : (label == "tip_label" || label == "label");
      if (is_header && !tree.find(label)) continue;
    }
    if (!rows.emplace(label, value).second) {
      throw ValidationError("tip label '" + label + "' appears twice");
    }
  }
  for (const auto& [label, value] : rows) {
    const auto node = tree.find(label);
    if (!node || !tree.is_tip(*node)) {
      throw ValidationError("label '" + label + "' is not a tip of the tree");
    }
  }
  for (int k = 0; k < tree.n_tips(); ++k) {
    const std::string& label = tree.display_label(tree.tip_node(k));
    if (!rows.count(label)) throw ValidationError("no value for tip '" + label + "'");
  }
  return rows;
}

Json edge_json(const PhyloTree& tree, NodeId child, double value) {
  Json e;
  e["parent"] = tree.display_label(tree.parent(child));
  e["child"] = tree.display_label(child);
  e["value"] = value;
  return e;
}

}  // namespace

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot read '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("cannot write '" + path.string() + "'");
  out << text;
}

Json read_json_file(const std::filesystem::path& path) {
  try {
    return Json::parse(read_text_file(path));
  } catch (const Json::parse_error& e) {
    throw ValidationError("invalid JSON in '" + path.string() + "': " + e.what());
  }
}

Eigen::VectorXd read_traits(std::istream& in, const PhyloTree& tree) {
  const auto rows = read_tip_rows(in, tree, true);
  Eigen::VectorXd Y(tree.n_tips());
  for (int k = 0; k < tree.n_tips(); ++k) {
    const std::string& label = tree.display_label(tree.tip_node(k));
    double v;
    if (!parse_double(rows.at(label), v) || !std::isfinite(v)) {
      throw ValidationError("value for tip '" + label + "' is not a finite number");
    }
    Y(k) = v;
  }
  return Y;
}

Eigen::VectorXd read_traits_file(const std::filesystem::path& path, const PhyloTree& tree) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot read '" + path.string() + "'");
  return read_traits(in, tree);
}

void write_traits(std::ostream& out, const PhyloTree& tree, const Eigen::VectorXd& Y) {
  out << "tip_label\tvalue\n";
  for (int k = 0; k < tree.n_tips(); ++k) {
    out << tree.display_label(tree.tip_node(k)) << '\t' << format_double(Y(k)) << '\n';
  }
}

TipColoring read_tip_coloring(std::istream& in, const PhyloTree& tree) {
  const auto rows = read_tip_rows(in, tree, false);
  std::map<std::string, int> ids;
  std::vector<int> raw(tree.n_tips());
  for (int k = 0; k < tree.n_tips(); ++k) {
    const std::string& c = rows.at(tree.display_label(tree.tip_node(k)));
    raw[k] = ids.try_emplace(c, static_cast<int>(ids.size())).first->second;
  }
  return TipColoring::canonical(raw);
}

Json shifts_to_json(const PhyloTree& tree, const ShiftConfig& shifts) {
  Json list = Json::array();
  for (NodeId j : shifts.support()) list.push_back(edge_json(tree, j, shifts.delta[j]));
  return list;
}

Json shift_config_to_json(const PhyloTree& tree, const ShiftConfig& shifts) {
  Json j;
  j["root_value"] = shifts.root_value();
  j["shifts"] = shifts_to_json(tree, shifts);
  return j;
}

ShiftConfig shift_config_from_json(const PhyloTree& tree, const Json& j) {
  try {
    ShiftConfig s = ShiftConfig::none(tree.n_nodes(), j.value("root_value", 0.0));
    if (!j.contains("shifts")) return s;
    for (const auto& e : j.at("shifts")) {
      const std::string parent = e.at("parent").get<std::string>();
      const std::string child = e.at("child").get<std::string>();
      const double value = e.at("value").get<double>();
      const auto c = tree.find(child);
      const auto p = tree.find(parent);
      if (!c || !p) throw ValidationError("unknown edge (" + parent + ", " + child + ")");
      if (*c == 0 || tree.parent(*c) != *p) {
        throw ValidationError("'" + parent + "' is not the parent of '" + child + "'");
      }
      if (!std::isfinite(value)) throw ValidationError("shift values must be finite");
      s.delta[*c] += value;
    }
    return s;
  } catch (const Json::exception& e) {
    throw ValidationError(std::string("malformed shift list: ") + e.what());
  }
}

Json params_to_json(const ModelParams& params) {
  Json p;
  p["root_value"] = params.shifts.root_value();
  if (params.kind == ProcessKind::OU) {
    p["alpha"] = params.alpha;
    p["gamma2"] = params.gamma2;
    p["half_life"] = std::log(2.0) / params.alpha;
  }
  p["sigma2"] = params.bm_rate();
  return p;
}

Json fit_to_json(const PhyloTree& tree, const FitResult& fit) {
  Json j;
  j["kind"] = std::string(to_string(fit.params.kind));
  j["K"] = fit.K;
  j["params"] = params_to_json(fit.params);
  j["shifts"] = shifts_to_json(tree, fit.params.shifts);
  j["loglik"] = fit.loglik;
  j["iterations"] = fit.iterations;
  j["converged"] = fit.converged;
  if (fit.params.kind == ProcessKind::OU) j["alpha_at_boundary"] = fit.alpha_at_boundary;
  j["n_equivalent_solutions"] = fit.equivalents.class_size.str();
  j["equivalent_solutions_truncated"] = fit.equivalents.truncated;
  j["homoplasy"] = fit.equivalents.homoplasy;
  Json sols = Json::array();
  for (const auto& s : fit.equivalents.solutions) sols.push_back(shift_config_to_json(tree, s));
  j["equivalent_solutions"] = sols;
  Json means = Json::object();
  const Eigen::VectorXd m = tip_means(tree, fit.params);
  for (int k = 0; k < tree.n_tips(); ++k) means[tree.display_label(tree.tip_node(k))] = m(k);
  j["tip_means"] = means;
  return j;
}

Json selection_to_json(const PhyloTree& tree, const SelectionResult& result) {
  Json j;
  j["K_hat"] = result.K_hat;
  Json rows = Json::array();
  for (const auto& r : result.table) {
    Json row;
    row["K"] = r.K;
    row["fitted"] = r.fitted;
    if (r.fitted) {
      row["alpha"] = r.alpha;
      row["loglik"] = r.loglik;
      row["rss_mahalanobis"] = r.rss;
      row["rss_unit_det"] = r.rss_unit_det;
      row["crit"] = r.crit;
      row["crit_ls"] = r.crit_ls;
    } else {
      row["error"] = r.error;
    }
    row["L"] = r.L;
    row["pen"] = r.pen;
    row["pen_prime"] = r.pen_prime;
    rows.push_back(row);
  }
  j["table"] = rows;
  j["fit"] = fit_to_json(tree, result.best);
  return j;
}

void write_criterion_table(std::ostream& out, const SelectionResult& result) {
  out << "K\talpha_best\tloglik\trss_mahalanobis\tpen\tpen_prime\tcrit\n";
  for (const auto& r : result.table) {
    out << r.K << '\t';
    if (r.fitted) {
      out << format_double(r.alpha) << '\t' << format_double(r.loglik) << '\t' << format_double(r.rss);
    } else {
      out << "NA\tNA\tNA";
    }
    out << '\t' << format_double(r.pen) << '\t' << format_double(r.pen_prime) << '\t'
        << (r.fitted ? format_double(r.crit) : std::string("NA")) << '\n';
  }
}

Json coloring_to_json(const PhyloTree& tree, const NodeColoring& coloring) {
  Json j;
  Json edges = Json::array();
  for (NodeId e : color_change_edges(tree, coloring)) {
    Json edge;
    edge["parent"] = tree.display_label(tree.parent(e));
    edge["child"] = tree.display_label(e);
    edges.push_back(edge);
  }
  j["root_color"] = coloring.colors[0];
  j["edges"] = edges;
  return j;
}

Json class_listing_to_json(const PhyloTree& tree, const TipColoring& d, const ClassListing& listing) {
  Json j;
  j["n_colors"] = d.n_colors;
  Json tips = Json::object();
  for (int k = 0; k < tree.n_tips(); ++k) tips[tree.display_label(tree.tip_node(k))] = d.colors[k];
  j["tip_colors"] = tips;
  j["class_size"] = listing.size.str();
  j["truncated"] = listing.truncated;
  j["n_listed"] = listing.colorings.size();
  Json sols = Json::array();
  for (const auto& c : listing.colorings) sols.push_back(coloring_to_json(tree, c));
  j["solutions"] = sols;
  return j;
}

void write_replicates(std::ostream& out, const std::vector<CellSummary>& cells) {
  out << "cell\tn_tips\tkind\talpha\tgamma2\tK_true\treplicate\tseed\tK_hat\tari\talpha_hat\t"
         "gamma2_hat\troot_hat\tloglik\tn_equivalent\tunambiguous\tsensitivity\tfpr\t"
         "best_sensitivity\tbest_fpr\terror\n";
  for (std::size_t c = 0; c < cells.size(); ++c) {
    const auto& cell = cells[c].cell;
    for (const auto& r : cells[c].replicates) {
      out << c << '\t' << cell.n_tips << '\t' << to_string(cell.scenario.kind) << '\t'
          << format_double(cell.scenario.alpha) << '\t' << format_double(cell.scenario.gamma2) << '\t'
          << r.K_true << '\t' << r.replicate << '\t' << r.seed << '\t' << r.K_hat << '\t'
          << format_double(r.ari) << '\t' << format_double(r.alpha_hat) << '\t'
          << format_double(r.gamma2_hat) << '\t' << format_double(r.root_hat) << '\t'
          << format_double(r.loglik) << '\t' << r.n_equivalent << '\t' << (r.unambiguous ? 1 : 0) << '\t';
      if (r.unambiguous) {
        out << format_double(r.sensitivity) << '\t' << format_double(r.fpr);
      } else {
        out << "NA\tNA";
      }
      out << '\t' << format_double(r.best_sensitivity) << '\t' << format_double(r.best_fpr) << '\t'
          << (r.error.empty() ? "" : r.error) << '\n';
    }
  }
}

void write_study_summary(std::ostream& out, const std::vector<CellSummary>& cells) {
  out << "cell\tn_tips\tkind\talpha\thalf_life\tgamma2\tK_true\treplicates\tfailed\tmedian_ari\t"
         "frac_K_hat_le_true\tfrac_K_hat_eq_true\tn_unambiguous\tmean_sensitivity\tmean_fpr\tK_hat_histogram\n";
  for (std::size_t c = 0; c < cells.size(); ++c) {
    const auto& s = cells[c];
    const auto& sc = s.cell.scenario;
    std::string hist;
    for (std::size_t k = 0; k < s.K_hat_histogram.size(); ++k) {
      if (k) hist += ',';
      hist += std::to_string(s.K_hat_histogram[k]);
    }
    out << c << '\t' << s.cell.n_tips << '\t' << to_string(sc.kind) << '\t' << format_double(sc.alpha)
        << '\t' << format_double(std::log(2.0) / sc.alpha) << '\t' << format_double(sc.gamma2) << '\t'
        << sc.K << '\t' << s.replicates.size() << '\t' << s.n_failed << '\t' << format_double(s.median_ari)
        << '\t' << format_double(s.frac_K_hat_le_true) << '\t' << format_double(s.frac_K_hat_eq_true)
        << '\t' << s.n_unambiguous << '\t' << format_double(s.mean_sensitivity) << '\t'
        << format_double(s.mean_fpr) << '\t' << hist << '\n';
  }
}

Json study_summary_to_json(const std::vector<CellSummary>& cells) {
  Json arr = Json::array();
  for (const auto& s : cells) {
    Json j;
    j["n_tips"] = s.cell.n_tips;
    j["kind"] = std::string(to_string(s.cell.scenario.kind));
    j["alpha"] = s.cell.scenario.alpha;
    j["gamma2"] = s.cell.scenario.gamma2;
    j["K_true"] = s.cell.scenario.K;
    j["replicates"] = s.replicates.size();
    j["failed"] = s.n_failed;
    j["median_ari"] = s.median_ari;
    j["frac_K_hat_le_true"] = s.frac_K_hat_le_true;
    j["frac_K_hat_eq_true"] = s.frac_K_hat_eq_true;
    j["K_hat_histogram"] = s.K_hat_histogram;
    j["n_unambiguous"] = s.n_unambiguous;
    j["mean_sensitivity"] = s.mean_sensitivity;
    j["mean_fpr"] = s.mean_fpr;
    arr.push_back(j);
  }
  Json out;
  out["cells"] = arr;
  return out;
}

}  // namespace treeshift
