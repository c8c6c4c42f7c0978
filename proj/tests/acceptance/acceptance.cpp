// Runs every acceptance criterion and prints one PASS/FAIL line for each.
// Exit status is nonzero when any criterion fails.

#include "../unit/support.hpp"

#include "treeshift/em_engine.hpp"
#include "treeshift/model_selection.hpp"
#include "treeshift/newick.hpp"
#include "treeshift/numerics.hpp"
#include "treeshift/parsimony.hpp"
#include "treeshift/shift_model.hpp"
#include "treeshift/simstudy.hpp"

#include <boost/multiprecision/cpp_int.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <limits>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

using namespace treeshift;
using Big = boost::multiprecision::cpp_int;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;
};

// Binomial coefficients from Pascal's rule, zero outside 0 <= k <= n.
class Pascal {
 public:
  explicit Pascal(int max_n) : rows_(max_n + 1) {
    for (int n = 0; n <= max_n; ++n) {
      rows_[n].assign(n + 1, 1);
      for (int k = 1; k < n; ++k) rows_[n][k] = rows_[n - 1][k - 1] + rows_[n - 1][k];
    }
  }
  Big operator()(long n, long k) const {
    if (n < 0 || k < 0 || k > n) return 0;
    return rows_.at(n)[k];
  }

 private:
  std::vector<std::vector<Big>> rows_;
};

ShiftConfig random_shifts(const PhyloTree& t, int K, Rng& rng) {
  std::normal_distribution<double> z(0.0, 1.0);
  ShiftConfig s = ShiftConfig::none(t.n_nodes(), z(rng));
  std::uniform_int_distribution<int> edge(1, t.n_nodes() - 1);
  while (s.n_shifts() < K) s.delta[edge(rng)] = 3.0 * z(rng) + 0.5;
  return s;
}

ModelParams random_params(const PhyloTree& t, ProcessKind kind, int K, Rng& rng) {
  std::uniform_real_distribution<double> u(0.3, 3.0);
  const ShiftConfig s = random_shifts(t, K, rng);
  return kind == ProcessKind::BM ? ModelParams::bm(s, u(rng)) : ModelParams::ou(s, u(rng), u(rng));
}

double max_abs(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  return a.size() ? (a - b).cwiseAbs().maxCoeff() : 0.0;
}

// Largest deviation of an enumerated equivalent configuration's tip means
// from the fitted ones.
double equivalent_tip_mean_error(const PhyloTree& t, const FitResult& f) {
  const Eigen::VectorXd mean = tip_means(t, f.params);
  double worst = 0.0;
  for (const auto& s : f.equivalents.solutions) {
    ModelParams q = f.params;
    q.shifts = s;
    worst = std::max(worst, max_abs(tip_means(t, q), mean));
  }
  return worst;
}

struct EquivalenceTally {
  long fits = 0;
  long solutions = 0;
  double worst = 0.0;
  void add(const PhyloTree& t, const FitResult& f) {
    ++fits;
    solutions += static_cast<long>(f.equivalents.solutions.size());
    worst = std::max(worst, equivalent_tip_mean_error(t, f));
  }
};

EquivalenceTally g_equivalence;

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

Outcome combinatorics() {
  const auto start = std::chrono::steady_clock::now();
  const Pascal C(64);
  Outcome out;
  long trees = 0, checks = 0;
  for (int n = 3; n <= 12; ++n) {
    for (const auto& nwk : testkit::all_shapes(n, true)) {
      const PhyloTree t = parse_newick(nwk);
      const PartitionCounts pc = count_partitions(t, n);
      ++trees;
      for (int K = 1; K <= n; ++K) {
        checks += 2;
        if (pc.N[K] != C(2 * n - 2 - (K - 1), K - 1) || pc.M[K] != C(2 * n - K, K - 1)) {
          out.pass = false;
          out.detail += fmt(" mismatch n=%d K=%d", n, K);
        }
      }
    }
  }
  const PartitionCounts three = count_partitions(parse_newick("((A:1,B:1):1,C:2);"), 3);
  const bool pinned = three.N[2] == 3 && three.M[2] == 4;
  out.pass = out.pass && pinned;
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  out.pass = out.pass && secs < 5.0;
  out.detail = fmt("%ld shapes, %ld counts exact, N2=3/M2=4 %s, %.2f s", trees, checks,
                   pinned ? "ok" : "WRONG", secs) + out.detail;
  return out;
}

Outcome enumeration() {
  Outcome out;
  long cases = 0;
  const auto shapes = testkit::all_shapes(5, false);
  for (const auto& nwk : shapes) {
    const PhyloTree t = parse_newick(nwk);
    for (const auto& raw : testkit::all_assignments(5, 3)) {
      const TipColoring d = TipColoring::canonical(raw);
      if (d.colors != raw) continue;  // canonical representatives only
      ++cases;
      const auto brute = testkit::brute_force_class(t, d.colors, d.n_colors);
      const ClassListing listing = enumerate_class(t, d);
      std::set<std::vector<int>> got;
      for (const auto& c : listing.colorings) got.insert(c.colors);
      const bool ok = got == brute.colorings && listing.size == Big(brute.colorings.size()) &&
                      got.size() == listing.colorings.size() && !listing.truncated;
      if (!ok) {
        out.pass = false;
        out.detail += " mismatch on " + nwk;
      }
    }
  }
  out.detail = fmt("%zu shapes x canonical colorings = %ld cases equal to brute force", shapes.size(), cases) +
               out.detail;
  return out;
}

Outcome kernel_and_rank() {
  Outcome out;
  Rng rng(301);
  long max_err = 0;
  for (int rep = 0; rep < 100; ++rep) {
    const int n = std::uniform_int_distribution<int>(2, 64)(rng);
    const PhyloTree t = testkit::random_tree(n, rng, rep % 2 == 0);
    const auto mats = tree_matrices(t);
    for (NodeId i = 0; i < t.n_internal(); ++i) {
      const Eigen::VectorXi k = kernel_vector(t, i);
      Eigen::VectorXi e = Eigen::VectorXi::Zero(t.n_nodes());
      e(i) = 1;
      const Eigen::VectorXi tk = mats.T * k;
      const Eigen::VectorXi uk = mats.U * k - e;
      max_err = std::max<long>(max_err, tk.cwiseAbs().maxCoeff());
      max_err = std::max<long>(max_err, uk.cwiseAbs().maxCoeff());
    }
  }
  int disagree = 0, parsimonious = 0;
  for (int rep = 0; rep < 1000; ++rep) {
    const PhyloTree t = testkit::random_tree(std::uniform_int_distribution<int>(3, 40)(rng), rng, rep % 2 == 0);
    const int K = std::uniform_int_distribution<int>(0, std::min(8, t.n_tips()))(rng);
    std::set<int> supp;
    std::uniform_int_distribution<int> edge(1, t.n_nodes() - 1);
    while (static_cast<int>(supp.size()) < K) supp.insert(edge(rng));
    const std::vector<int> support(supp.begin(), supp.end());
    const auto regimes = testkit::regimes_of(t, support);
    const int colors = *std::max_element(regimes.begin(), regimes.end()) + 1;
    const bool rank = is_parsimonious(t, support);
    parsimonious += rank;
    if (rank != (colors == K + 1)) ++disagree;
  }
  out.pass = max_err == 0 && disagree == 0;
  out.detail = fmt("100 trees max |T K|,|U K - e| = %ld; rank test vs K+1 colors: %d/1000 disagree (%d parsimonious)",
                   max_err, disagree, parsimonious);
  return out;
}

Outcome e_step_oracle() {
  const auto start = std::chrono::steady_clock::now();
  Rng rng(401);
  double worst = 0.0;
  for (int rep = 0; rep < 200; ++rep) {
    const ProcessKind kind = rep % 2 ? ProcessKind::OU : ProcessKind::BM;
    const int n = std::uniform_int_distribution<int>(2, 32)(rng);
    const PhyloTree t = kind == ProcessKind::OU ? testkit::random_ultrametric(n, rng)
                                                : testkit::random_tree(n, rng, rep % 4 == 0);
    const ModelParams p = random_params(t, kind, std::uniform_int_distribution<int>(0, std::min(4, t.n_nodes() - 1))(rng), rng);
    const Eigen::VectorXd Y = tip_values(t, simulate_traits(t, p, rep));
    const ConditionalMoments a = e_step(t, p, Y);
    const ConditionalMoments b = e_step_dense(t, p, Y);
    worst = std::max({worst, max_abs(a.mean, b.mean), max_abs(a.var, b.var), max_abs(a.cov_parent, b.cov_parent)});
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return {worst <= 1e-8 && secs < 30.0, fmt("200 instances, max abs deviation %.2e, %.2f s", worst, secs)};
}

Outcome monotonicity() {
  Rng rng(501);
  int violations = 0;
  double worst_rel = 0.0, worst_abs = 0.0;
  long iterations = 0;
  for (int rep = 0; rep < 1000; ++rep) {
    const ProcessKind kind = rep % 2 ? ProcessKind::OU : ProcessKind::BM;
    const int n = std::uniform_int_distribution<int>(6, 32)(rng);
    const PhyloTree t = kind == ProcessKind::OU ? testkit::random_ultrametric(n, rng)
                                                : testkit::random_tree(n, rng, rep % 4 == 0);
    const int K = std::uniform_int_distribution<int>(0, 3)(rng);
    const ModelParams p = random_params(t, kind, K, rng);
    const Eigen::VectorXd Y = tip_values(t, simulate_traits(t, p, rep));
    FitOptions o;
    o.seed = rep;
    o.restarts = 0;
    if (kind == ProcessKind::OU) {
      if (rep % 4 == 1) {
        o.estimate_alpha = true;
      } else {
        o.alpha = p.alpha * std::exp(std::uniform_real_distribution<double>(-1.0, 1.0)(rng));
      }
    }
    const FitResult f = fit(t, Y, K, kind, o);
    g_equivalence.add(t, f);
    iterations += static_cast<long>(f.trace.size());
    for (std::size_t i = 1; i < f.trace.size(); ++i) {
      const double drop = f.trace[i - 1] - f.trace[i];
      const double scale = std::max(1.0, std::abs(f.trace[i - 1]));
      worst_abs = std::max(worst_abs, drop);
      worst_rel = std::max(worst_rel, drop / scale);
      if (drop > 1e-8 * scale) ++violations;
    }
  }
  return {violations == 0, fmt("1000 fits, %ld iterations, %d violations; largest drop %.2e (relative %.2e)",
                               iterations, violations, worst_abs, worst_rel)};
}

// Expected BM cost of a support with shifted branches free and mu the
// 1/l-weighted mean over unshifted root children.
double bm_support_cost(const PhyloTree& t, const ConditionalMoments& mo, const std::vector<int>& support) {
  std::vector<char> shifted(t.n_nodes(), 0);
  for (int s : support) shifted[s] = 1;
  double cost = 0.0, w = 0.0, wx = 0.0, wxx = 0.0;
  for (NodeId j = 1; j < t.n_nodes(); ++j) {
    if (shifted[j]) continue;
    const double l = t.length(j);
    if (t.parent(j) == 0) {
      w += 1.0 / l;
      wx += mo.mean(j) / l;
      wxx += mo.mean(j) * mo.mean(j) / l;
    } else {
      const double r = mo.mean(j) - mo.mean(t.parent(j));
      cost += r * r / l;
    }
  }
  if (w > 0.0) cost += wxx - wx * wx / w;
  return cost;
}

Outcome bm_m_step() {
  Rng rng(601);
  int cases = 0, mismatches = 0, tied = 0;
  for (int rep = 0; rep < 150; ++rep) {
    const bool multi = rep % 3 == 0;
    const int n = std::uniform_int_distribution<int>(3, multi ? 9 : 7)(rng);
    PhyloTree t = testkit::random_tree(n, rng, multi);
    if (t.n_nodes() - 1 > 12) continue;
    const ModelParams p = random_params(t, ProcessKind::BM, std::uniform_int_distribution<int>(0, 3)(rng), rng);
    const ConditionalMoments mo = e_step(t, p, tip_values(t, simulate_traits(t, p, rep)));
    for (int K = 0; K <= std::min(3, n - 1); ++K) {
      ++cases;
      std::vector<std::pair<double, std::vector<int>>> all;
      testkit::for_each_subset(1, t.n_nodes() - 1, K, [&](const std::vector<int>& s) {
        if (is_parsimonious(t, s)) all.emplace_back(bm_support_cost(t, mo, s), s);
      });
      double best = std::numeric_limits<double>::infinity();
      for (const auto& [c, s] : all) best = std::min(best, c);
      const double tol = 1e-10 * std::max(1.0, best);
      const auto supp = m_step_bm(t, mo, K).shifts.support();
      const std::vector<int> got(supp.begin(), supp.end());
      int minimizers = 0;
      bool found = false;
      for (const auto& [c, s] : all) {
        if (c > best + tol) continue;
        ++minimizers;
        found |= s == got;
      }
      if (!found) ++mismatches;
      if (minimizers > 1) ++tied;
    }
  }
  return {mismatches == 0 && cases > 0,
          fmt("%d (tree, K) cases with <= 12 edges (%d with tied optima), %d supports outside the exhaustive "
              "minimizers",
              cases, tied, mismatches)};
}

Outcome special_functions() {
  Outcome out;
  const int Ds[] = {1, 2, 3, 5, 8, 12, 20};
  const int Ns[] = {1, 2, 5, 10, 30, 100, 500};
  int zero_bad = 0;
  for (int D : Ds) {
    for (int N : Ns) zero_bad += dkhi(D, N, 0.0) != 1.0;
  }
  double worst_inv = 0.0;
  int inversions = 0;
  for (int D : Ds) {
    for (int N : Ns) {
      if (N < 2) continue;
      for (double q : {0.9, 0.5, 0.1, 1e-2, 1e-4, 1e-6, 1e-9}) {
        worst_inv = std::max(worst_inv, std::abs(dkhi(D, N, edkhi(D, N, q)) - q));
        ++inversions;
      }
    }
  }
  // 10^7-sample Monte Carlo at 20 (D, N, x) points
  const int D_mc[] = {1, 2, 4, 7, 12};
  const int N_mc[] = {3, 10, 40, 150};
  Rng rng(701);
  int outside = 0;
  double worst_z = 0.0;
  constexpr long samples = 10'000'000;
  for (int a = 0; a < 5; ++a) {
    for (int b = 0; b < 4; ++b) {
      const int D = D_mc[a], N = N_mc[b];
      const double x = D * (0.5 + 0.6 * ((a + b) % 4));
      std::chi_squared_distribution<double> cd(D), cn(N);
      double s = 0.0, s2 = 0.0;
      for (long i = 0; i < samples; ++i) {
        const double v = std::max(cd(rng) - x * cn(rng) / N, 0.0) / D;
        s += v;
        s2 += v * v;
      }
      const double mean = s / samples;
      const double se = std::sqrt((s2 / samples - mean * mean) / samples);
      const double z = std::abs(dkhi(D, N, x) - mean) / se;
      worst_z = std::max(worst_z, z);
      outside += z > 3.0;
    }
  }
  out.pass = zero_bad == 0 && worst_inv <= 1e-8 && outside == 0;
  out.detail = fmt("Dkhi(.,.,0)=1 failures %d; %d inversions max err %.2e; MC 20 points, max |z| %.2f, %d beyond 3 SE",
                   zero_bad, inversions, worst_inv, worst_z, outside);
  return out;
}

Outcome vandermonde() {
  const Pascal C(64);
  int failures = 0, library_failures = 0, binomial_mismatch = 0;
  for (int n = 0; n <= 20; ++n) {
    for (int np = 0; np <= 20; ++np) {
      for (int K = 0; K <= 20; ++K) {
        Big r1 = 0, r2 = 0;
        for (int k = 0; k <= K; ++k) {
          const Big common = C(n - k, k) * C(np - (K - k), K - k);
          r1 += common;
          r2 += common;
        }
        for (int k = 0; k + 1 <= K; ++k) {
          const int kp = K - 1 - k;
          r1 += C(n - 1 - k, k) * C(np - 1 - kp, kp);
          r2 += C(n - 1 - k, k) * C(np - kp, kp) + C(n - k, k) * C(np - 1 - kp, kp);
        }
        failures += r1 != C(n + np - K, K) || r2 != C(n + np + 1 - K, K);
        library_failures += !vandermonde_identity_check(n, np, K);
      }
    }
  }
  for (int a = 0; a <= 64; ++a) {
    for (int b = 0; b <= 64; ++b) binomial_mismatch += binomial(a, b) != C(a, b);
  }
  return {failures == 0 && library_failures == 0 && binomial_mismatch == 0,
          fmt("n,n',K in 0..20: %d oracle failures, %d library failures, %d binomial mismatches", failures,
              library_failures, binomial_mismatch)};
}

Outcome simulation_behaviour() {
  const auto start = std::chrono::steady_clock::now();
  StudyConfig cfg;
  cfg.seed = 2024;
  cfg.replicates = 20;
  Scenario base;
  Scenario null = base;
  null.K = 0;
  cfg.cells = {{64, base}, {64, null}};
  const auto cells = run_study(cfg);
  const CellSummary& b = cells[0];
  const CellSummary& z = cells[1];
  double frac_zero = 0.0;
  for (const auto& r : z.replicates) frac_zero += r.error.empty() && r.K_hat == 0;
  frac_zero /= z.replicates.size();
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  std::ostringstream hist;
  for (std::size_t k = 0; k < b.K_hat_histogram.size(); ++k) hist << (k ? "," : "") << b.K_hat_histogram[k];
  const bool pass = b.n_failed == 0 && z.n_failed == 0 && b.frac_K_hat_le_true >= 0.7 && b.median_ari > 0.5 &&
                    frac_zero >= 0.8 && secs < 1800.0;
  return {pass, fmt("base: K_hat<=5 in %.0f%%, median ARI %.3f, K_hat histogram [%s]; K=0: K_hat=0 in %.0f%%; %.0f s",
                    100 * b.frac_K_hat_le_true, b.median_ari, hist.str().c_str(), 100 * frac_zero, secs)};
}

Outcome equivalence_reporting() {
  // selections on the study scale add fits of every K to the tally
  Rng rng(1001);
  SelectionConfig cfg;
  cfg.alpha_grid_size = 3;
  for (int rep = 0; rep < 4; ++rep) {
    const PhyloTree t = testkit::random_ultrametric(64, rng);
    const SimulatedTraits sim = simulate_scenario(t, Scenario{}, 1000 + rep);
    const SelectionResult r = select(t, sim.Y, rep % 2 ? ProcessKind::BM : ProcessKind::OU, cfg);
    for (const auto& f : r.fits) {
      if (f) g_equivalence.add(t, *f);
    }
  }
  return {g_equivalence.worst <= 1e-9,
          fmt("%ld fits, %ld enumerated configurations, max tip-mean deviation %.2e", g_equivalence.fits,
              g_equivalence.solutions, g_equivalence.worst)};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria = {
      {"combinatorics exactness", combinatorics},
      {"enumeration vs brute force", enumeration},
      {"kernel and identifiability", kernel_and_rank},
      {"E-step oracle equivalence", e_step_oracle},
      {"EM monotonicity", monotonicity},
      {"BM M-step optimality", bm_m_step},
      {"special functions", special_functions},
      {"Vandermonde identity", vandermonde},
      {"simulation behaviour", simulation_behaviour},
      {"equivalence reporting", equivalence_reporting},
  };
  std::set<std::size_t> only;
  for (int a = 1; a < argc; ++a) only.insert(std::stoul(argv[a]));
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    if (!only.empty() && !only.count(i + 1)) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::printf("criterion %zu (%s): %s  %s\n", i + 1, criteria[i].first, o.pass ? "PASS" : "FAIL", o.detail.c_str());
    std::fflush(stdout);
  }
  return failed ? 1 : 0;
}
