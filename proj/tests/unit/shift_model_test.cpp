#include <gtest/gtest.h>

#include "support.hpp"

#include "treeshift/errors.hpp"
#include "treeshift/newick.hpp"
#include "treeshift/shift_model.hpp"

#include <Eigen/Cholesky>
#include <Eigen/QR>

#include <cmath>

using namespace treeshift;

namespace {

constexpr const char* kFiveTip = "((Y1:1,Y2:1)Z4:2,(Y3:2,(Y4:1,Y5:1)Z3:1)Z2:1)Z1;";

ShiftConfig random_shifts(const PhyloTree& t, int K, Rng& rng) {
  ShiftConfig s = ShiftConfig::none(t.n_nodes(), std::normal_distribution<double>(0, 1)(rng));
  std::uniform_int_distribution<int> edge(1, t.n_nodes() - 1);
  std::normal_distribution<double> value(0.0, 3.0);
  for (int k = 0; k < K; ++k) s.delta[edge(rng)] = value(rng);
  return s;
}

}  // namespace

TEST(KernelVector, Cherry) {
  const PhyloTree t = parse_newick("(A:1,B:1);");
  const Eigen::VectorXi k = kernel_vector(t, 0);
  EXPECT_EQ(k, (Eigen::VectorXi(3) << 1, -1, -1).finished());
  EXPECT_TRUE((tree_matrices(t).T * k).isZero());
  EXPECT_THROW(kernel_vector(t, 1), ValidationError);
}

TEST(KernelVector, FiveTipCherryNode) {
  const PhyloTree t = parse_newick(kFiveTip);
  const NodeId z4 = *t.find("Z4");
  const Eigen::VectorXi k = kernel_vector(t, z4);
  EXPECT_EQ(k(z4), 1);
  EXPECT_EQ(k(*t.find("Y1")), -1);
  EXPECT_EQ(k(*t.find("Y2")), -1);
  EXPECT_EQ(k.cwiseAbs().sum(), 3);
  EXPECT_TRUE((tree_matrices(t).T * k).isZero());
}

TEST(KernelVector, BasisOfKernel) {
  Rng rng(3);
  const PhyloTree t = testkit::random_tree(16, rng, true);
  const auto mats = tree_matrices(t);
  Eigen::MatrixXd stacked(t.n_nodes(), t.n_internal());
  for (NodeId i = 0; i < t.n_internal(); ++i) {
    const Eigen::VectorXi k = kernel_vector(t, i);
    stacked.col(i) = k.cast<double>();
    EXPECT_TRUE((mats.T * k).isZero());
    Eigen::VectorXi e = Eigen::VectorXi::Zero(t.n_nodes());
    e(i) = 1;
    EXPECT_EQ(mats.U * k, e);
  }
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(stacked);
  EXPECT_EQ(qr.rank(), t.n_internal());
}

TEST(TipMeans, FiveTipSingleShift) {
  const PhyloTree t = parse_newick(kFiveTip);
  const double mu = 1.5, delta = 2.0, alpha = 0.7;
  ShiftConfig s = ShiftConfig::none(t.n_nodes(), mu);
  s.delta[*t.find("Y3")] = delta;
  const Eigen::VectorXd bm = tip_means(t, ModelParams::bm(s, 1.0));
  EXPECT_EQ(bm, (Eigen::VectorXd(5) << mu, mu, mu + delta, mu, mu).finished());
  const double t2 = t.time(*t.find("Z2"));
  const Eigen::VectorXd ou = tip_means(t, ModelParams::ou(s, alpha, 1.0));
  const double shifted = mu + delta * (1 - std::exp(-alpha * (t.height() - t2)));
  EXPECT_NEAR(ou(2), shifted, 1e-14);
  for (int k : {0, 1, 3, 4}) EXPECT_DOUBLE_EQ(ou(k), mu);
}

TEST(TipMeans, NoShiftsIsConstant) {
  Rng rng(4);
  const PhyloTree t = testkit::random_ultrametric(10, rng);
  const ShiftConfig s = ShiftConfig::none(t.n_nodes(), 3.25);
  EXPECT_TRUE(tip_means(t, ModelParams::bm(s, 1.0)).isApproxToConstant(3.25));
  EXPECT_TRUE(tip_means(t, ModelParams::ou(s, 2.0, 1.0)).isApproxToConstant(3.25));
}

TEST(TipMeans, OuRejectsNonUltrametric) {
  const PhyloTree t = parse_newick("((A:1,B:2):1,C:2);");
  const ShiftConfig s = ShiftConfig::none(t.n_nodes(), 0.0);
  EXPECT_THROW(tip_means(t, ModelParams::ou(s, 1.0, 1.0)), ValidationError);
  EXPECT_NO_THROW(tip_means(t, ModelParams::bm(s, 1.0)));
}

TEST(TipMeans, KernelDirectionsLeaveMeansUnchanged) {
  Rng rng(8);
  const PhyloTree t = testkit::random_tree(12, rng, true);
  ShiftConfig s = random_shifts(t, 3, rng);
  const Eigen::VectorXd before = tip_means(t, ModelParams::bm(s, 1.0));
  for (NodeId i = 0; i < t.n_internal(); ++i) {
    const Eigen::VectorXi k = kernel_vector(t, i);
    const double c = 0.3 * (i + 1);
    for (NodeId v = 0; v < t.n_nodes(); ++v) s.delta[v] += c * k(v);
  }
  EXPECT_TRUE(tip_means(t, ModelParams::bm(s, 1.0)).isApprox(before, 1e-12));
}

TEST(NodeMeans, OuRecursionMatchesLinearForm) {
  // X = (U - A U B) Delta with A = diag(e^{-alpha t_i}), B = diag(0, e^{alpha t_pa(i)})
  Rng rng(9);
  for (int rep = 0; rep < 20; ++rep) {
    const PhyloTree t = testkit::random_ultrametric(6 + rep, rng);
    const double alpha = 0.2 + 0.3 * rep;
    const ShiftConfig s = random_shifts(t, 4, rng);
    const Eigen::MatrixXd U = tree_matrices(t).U.cast<double>();
    Eigen::VectorXd a(t.n_nodes()), b(t.n_nodes()), delta(t.n_nodes());
    for (NodeId v = 0; v < t.n_nodes(); ++v) {
      a(v) = std::exp(-alpha * t.time(v));
      b(v) = v == 0 ? 0.0 : std::exp(alpha * t.time(t.parent(v)));
      delta(v) = s.delta[v];
    }
    const Eigen::VectorXd linear = (U - a.asDiagonal() * U * b.asDiagonal()) * delta;
    const ModelParams p = ModelParams::ou(s, alpha, 1.0);
    EXPECT_LT((node_means(t, p) - linear).cwiseAbs().maxCoeff(), 1e-10);
    const Eigen::VectorXd w = ou_weights(t, alpha);
    const Eigen::MatrixXd T = tree_matrices(t).T.cast<double>();
    EXPECT_LT((tip_means(t, p) - T * w.asDiagonal() * delta).cwiseAbs().maxCoeff(), 1e-10);
    EXPECT_GT(w.minCoeff(), 0.0);
    EXPECT_LE(w.maxCoeff(), 1.0);
  }
}

TEST(BranchOptima, EqualsUDelta) {
  Rng rng(10);
  const PhyloTree t = testkit::random_tree(9, rng);
  const ShiftConfig s = random_shifts(t, 3, rng);
  const Eigen::VectorXd d = Eigen::Map<const Eigen::VectorXd>(s.delta.data(), s.delta.size());
  EXPECT_TRUE(branch_optima(t, s).isApprox(tree_matrices(t).U.cast<double>() * d));
}

TEST(Covariance, CherryClosedForms) {
  const PhyloTree t = parse_newick("(A:1,B:1);");
  const ShiftConfig s = ShiftConfig::none(3, 0.0);
  const Eigen::MatrixXd ou = covariance(t, ModelParams::ou(s, std::log(2.0), 1.0)).matrix();
  EXPECT_NEAR(ou(0, 1), 0.25, 1e-15);
  EXPECT_DOUBLE_EQ(ou(0, 0), 1.0);
  const Eigen::MatrixXd bm = covariance(t, ModelParams::bm(s, 1.0)).matrix();
  EXPECT_TRUE(bm.isApprox(Eigen::MatrixXd::Identity(2, 2)));
}

TEST(Covariance, PositiveDefinite) {
  Rng rng(12);
  for (int rep = 0; rep < 10; ++rep) {
    const PhyloTree t = testkit::random_ultrametric(20, rng);
    const ShiftConfig s = ShiftConfig::none(t.n_nodes(), 0.0);
    for (const ModelParams& p : {ModelParams::bm(s, 0.7), ModelParams::ou(s, 1.0 + rep, 0.4)}) {
      const Eigen::MatrixXd V = covariance(t, p).matrix();
      EXPECT_TRUE(V.isApprox(V.transpose()));
      EXPECT_EQ(Eigen::LLT<Eigen::MatrixXd>(V).info(), Eigen::Success);
    }
  }
}

TEST(Similarity, SingleShiftRescaled) {
  const PhyloTree t = parse_newick(kFiveTip);
  const double alpha = 0.9;
  ShiftConfig bm = ShiftConfig::none(t.n_nodes(), 1.0);
  const NodeId e = *t.find("Y3");
  bm.delta[e] = 2.0;
  const ShiftConfig ou = similar_shifts(t, bm, alpha, SimilarityDirection::BmToOu);
  const double w = 1 - std::exp(-alpha * (t.height() - t.time(t.parent(e))));
  EXPECT_NEAR(ou.delta[e], 2.0 / w, 1e-14);
  EXPECT_EQ(ou.support(), bm.support());
  EXPECT_THROW(similar_shifts(t, bm, 0.0, SimilarityDirection::BmToOu), ValidationError);
}

TEST(Similarity, RoundTripAndEqualMeans) {
  Rng rng(13);
  const PhyloTree t = testkit::random_ultrametric(16, rng);
  const ShiftConfig bm = random_shifts(t, 4, rng);
  const double alpha = 1.7;
  const ShiftConfig ou = similar_shifts(t, bm, alpha, SimilarityDirection::BmToOu);
  const ShiftConfig back = similar_shifts(t, ou, alpha, SimilarityDirection::OuToBm);
  for (NodeId v = 0; v < t.n_nodes(); ++v) EXPECT_NEAR(back.delta[v], bm.delta[v], 1e-12);
  EXPECT_LT((tip_means(t, ModelParams::bm(bm, 1.0)) - tip_means(t, ModelParams::ou(ou, alpha, 1.0)))
                .cwiseAbs()
                .maxCoeff(),
            1e-12);
}

TEST(Simulate, NoiselessBmEqualsMeans) {
  Rng rng(14);
  const PhyloTree t = testkit::random_tree(10, rng);
  ModelParams p = ModelParams::bm(random_shifts(t, 2, rng), 1.0);
  p.sigma2 = 0.0;
  const Eigen::VectorXd y = tip_values(t, simulate_traits(t, p, 5));
  EXPECT_TRUE(y.isApprox(tip_means(t, p), 1e-14));
}

TEST(Simulate, DeterministicPerSeed) {
  Rng rng(15);
  const PhyloTree t = testkit::random_ultrametric(12, rng);
  const ModelParams p = ModelParams::ou(random_shifts(t, 2, rng), 1.0, 0.5);
  EXPECT_EQ(simulate_traits(t, p, 77), simulate_traits(t, p, 77));
  EXPECT_NE(simulate_traits(t, p, 77), simulate_traits(t, p, 78));
}

TEST(Simulate, OuRootIsStationary) {
  const PhyloTree t = parse_newick("(A:1,B:1);");
  const double gamma2 = 0.8;
  const ModelParams p = ModelParams::ou(ShiftConfig::none(3, 2.0), 1.3, gamma2);
  const int reps = 100000;
  double s = 0.0, s2 = 0.0;
  for (int r = 0; r < reps; ++r) {
    const double x = simulate_traits(t, p, r)(0);
    s += x;
    s2 += x * x;
  }
  const double mean = s / reps;
  const double var = s2 / reps - mean * mean;
  EXPECT_NEAR(var / gamma2, 1.0, 0.01);
  EXPECT_NEAR(mean, 2.0, 3.0 * std::sqrt(gamma2 / reps));
}

TEST(Simulate, EmpiricalMomentsMatch) {
  Rng rng(16);
  const PhyloTree t = testkit::random_ultrametric(5, rng);
  for (const ModelParams& p : {ModelParams::bm(random_shifts(t, 1, rng), 0.9),
                               ModelParams::ou(random_shifts(t, 1, rng), 2.0, 0.6)}) {
    const int reps = 100000;
    const int n = t.n_tips();
    Eigen::VectorXd sum = Eigen::VectorXd::Zero(n);
    Eigen::MatrixXd cross = Eigen::MatrixXd::Zero(n, n);
    for (int r = 0; r < reps; ++r) {
      const Eigen::VectorXd y = tip_values(t, simulate_traits(t, p, 500 + r));
      sum += y;
      cross += y * y.transpose();
    }
    const Eigen::VectorXd mean = sum / reps;
    const Eigen::MatrixXd cov = cross / reps - mean * mean.transpose();
    const Eigen::MatrixXd V = covariance(t, p).matrix();
    const Eigen::VectorXd mu = tip_means(t, p);
    for (int a = 0; a < n; ++a) {
      EXPECT_NEAR(mean(a), mu(a), 3.0 * std::sqrt(V(a, a) / reps));
      for (int b = 0; b < n; ++b) {
        // Var of the product estimator: V_aa V_bb + V_ab^2
        const double se = std::sqrt((V(a, a) * V(b, b) + V(a, b) * V(a, b)) / reps);
        EXPECT_NEAR(cov(a, b), V(a, b), 3.5 * se) << a << "," << b;
      }
    }
  }
}

TEST(Simulate, BmCherryTipsUncorrelated) {
  const PhyloTree t = parse_newick("(A:1,B:1);");
  const ModelParams p = ModelParams::bm(ShiftConfig::none(3, 0.0), 1.0);
  const int reps = 100000;
  double sab = 0.0;
  for (int r = 0; r < reps; ++r) {
    const Eigen::VectorXd y = tip_values(t, simulate_traits(t, p, r));
    sab += y(0) * y(1);
  }
  EXPECT_NEAR(sab / reps, 0.0, 3.0 / std::sqrt(double(reps)));
}

TEST(ModelParams, Validation) {
  const PhyloTree t = parse_newick("(A:1,B:1);");
  EXPECT_THROW(ModelParams::bm(ShiftConfig::none(3, 0.0), -1.0).validate(t), ValidationError);
  EXPECT_THROW(ModelParams::ou(ShiftConfig::none(3, 0.0), 0.0, 1.0).validate(t), ValidationError);
  EXPECT_THROW(ModelParams::ou(ShiftConfig::none(4, 0.0), 1.0, 1.0).validate(t), ValidationError);
  const ModelParams ou = ModelParams::ou(ShiftConfig::none(3, 0.0), 2.0, 0.25);
  EXPECT_DOUBLE_EQ(ou.bm_rate(), 1.0);
  EXPECT_EQ(parse_process_kind("bm"), ProcessKind::BM);
  EXPECT_EQ(parse_process_kind("ou"), ProcessKind::OU);
  EXPECT_THROW(parse_process_kind("xyz"), ValidationError);
}
