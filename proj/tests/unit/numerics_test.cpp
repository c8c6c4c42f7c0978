#include <gtest/gtest.h>

#include "treeshift/errors.hpp"
#include "treeshift/numerics.hpp"
#include "treeshift/rng.hpp"

#include <boost/math/special_functions/gamma.hpp>

#include <cmath>
#include <numbers>
#include <random>

using namespace treeshift;

namespace {

LassoProblem random_problem(int n, int p, Rng& rng) {
  std::normal_distribution<double> z(0.0, 1.0);
  Eigen::MatrixXd X(n, p);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < p; ++j) X(i, j) = z(rng);
  }
  X.col(0).setOnes();
  Eigen::VectorXd beta = Eigen::VectorXd::Zero(p);
  beta(0) = 1.0;
  beta(1) = 3.0;
  beta(p / 2) = -2.0;
  Eigen::VectorXd y = X * beta;
  for (int i = 0; i < n; ++i) y(i) += 0.5 * z(rng);
  return LassoProblem::with_free_intercept(X, y);
}

// Subgradient optimality of a Lasso solution.
void expect_kkt(const LassoProblem& p, const LassoResult& r, double tol) {
  const Eigen::VectorXd g = p.X.transpose() * (p.y - p.X * r.coef);
  for (int j = 0; j < p.X.cols(); ++j) {
    const double bound = r.lambda * p.weights(j);
    if (p.weights(j) == 0.0) {
      EXPECT_NEAR(g(j), 0.0, tol) << j;
    } else if (r.coef(j) != 0.0) {
      EXPECT_NEAR(g(j), bound * (r.coef(j) > 0 ? 1.0 : -1.0), tol) << j;
    } else {
      EXPECT_LE(std::abs(g(j)), bound + tol) << j;
    }
  }
}

// E[(X_D - x)_+] / D for a chi-square X_D, the N -> infinity limit of Dkhi.
double dkhi_limit(int D, double x) {
  using boost::math::gamma_q;
  return gamma_q(D / 2.0 + 1.0, x / 2.0) - (x / D) * gamma_q(D / 2.0, x / 2.0);
}

}  // namespace

TEST(Lasso, SoftThresholdOnOrthonormalDesign) {
  // With X^T X = I the solution is the soft-thresholded X^T y.
  Rng rng(1);
  std::normal_distribution<double> z(0.0, 1.0);
  Eigen::MatrixXd A(20, 5);
  for (int i = 0; i < 20; ++i) {
    for (int j = 0; j < 5; ++j) A(i, j) = z(rng);
  }
  const Eigen::MatrixXd Q = Eigen::HouseholderQR<Eigen::MatrixXd>(A).householderQ() * Eigen::MatrixXd::Identity(20, 5);
  Eigen::VectorXd y(20);
  for (int i = 0; i < 20; ++i) y(i) = 3.0 * z(rng);
  LassoProblem p{Q, y, Eigen::VectorXd::Ones(5)};
  const double lambda = 0.8;
  const LassoResult r = lasso_solve(p, lambda);
  const Eigen::VectorXd c = Q.transpose() * y;
  for (int j = 0; j < 5; ++j) {
    const double expect = std::copysign(std::max(std::abs(c(j)) - lambda, 0.0), c(j));
    EXPECT_NEAR(r.coef(j), expect, 1e-7);
  }
}

TEST(Lasso, KktConditionsHold) {
  Rng rng(2);
  for (int rep = 0; rep < 10; ++rep) {
    const LassoProblem p = random_problem(30, 12, rng);
    const double lmax = lasso_lambda_max(p);
    for (double frac : {0.9, 0.5, 0.1, 0.01}) {
      const LassoResult r = lasso_solve(p, frac * lmax);
      EXPECT_TRUE(r.converged);
      expect_kkt(p, r, 1e-5 * (1.0 + p.y.norm()));
    }
  }
}

TEST(Lasso, LambdaMaxZeroesEverything) {
  Rng rng(3);
  const LassoProblem p = random_problem(25, 8, rng);
  const double lmax = lasso_lambda_max(p);
  EXPECT_EQ(lasso_solve(p, lmax * 1.0001).support_size, 0);
  EXPECT_GT(lasso_solve(p, lmax * 0.95).support_size, 0);
}

TEST(Lasso, FixedSupportSize) {
  Rng rng(4);
  const LassoProblem p = random_problem(40, 15, rng);
  for (int K = 0; K <= 6; ++K) {
    const LassoResult r = lasso_fixed_support_size(p, K);
    EXPECT_TRUE(r.exact);
    EXPECT_EQ(r.support_size, K);
    EXPECT_EQ(static_cast<int>(lasso_support(p.weights, r.coef).size()), K);
  }
  EXPECT_THROW(lasso_fixed_support_size(p, 15), ValidationError);
}

TEST(Lasso, GramRouteMatchesDesignRoute) {
  Rng rng(5);
  const LassoProblem p = random_problem(30, 10, rng);
  const LassoGram g = LassoGram::from(p);
  EXPECT_NEAR(lasso_lambda_max(g), lasso_lambda_max(p), 1e-10);
  const double lambda = 0.3 * lasso_lambda_max(p);
  EXPECT_LT((lasso_solve(g, lambda).coef - lasso_solve(p, lambda).coef).cwiseAbs().maxCoeff(), 1e-6);
  EXPECT_EQ(lasso_fixed_support_size(g, 3).support_size, 3);
}

TEST(Lasso, ZeroResponseRejectsShifts) {
  Rng rng(6);
  LassoProblem p = random_problem(20, 6, rng);
  p.y.setZero();
  EXPECT_THROW(lasso_fixed_support_size(p, 2), ValidationError);
  EXPECT_EQ(lasso_fixed_support_size(p, 0).support_size, 0);
}

TEST(Dkhi, ZeroThresholdIsOne) {
  for (int D : {1, 2, 5, 20}) {
    for (int N : {1, 10, 100}) EXPECT_EQ(dkhi(D, N, 0.0), 1.0);
  }
}

TEST(Dkhi, DecreasingInThreshold) {
  double prev = 1.0;
  for (double x = 0.5; x < 60.0; x *= 1.5) {
    const double v = dkhi(4, 30, x);
    EXPECT_LT(v, prev);
    EXPECT_GT(v, 0.0);
    prev = v;
  }
}

TEST(Dkhi, LargeNApproachesSingleChiSquare) {
  for (int D : {1, 3, 8}) {
    for (double x : {0.5, 3.0, 10.0}) {
      EXPECT_NEAR(dkhi(D, 200000, x), dkhi_limit(D, x), 2e-3 * dkhi_limit(D, x) + 1e-9);
    }
  }
}

TEST(Dkhi, MatchesMonteCarlo) {
  Rng rng(7);
  const int samples = 200000;
  for (auto [D, N, x] : {std::tuple{2, 10, 2.0}, std::tuple{5, 40, 8.0}, std::tuple{1, 5, 0.7}}) {
    std::chi_squared_distribution<double> cd(D), cn(N);
    double s = 0.0, s2 = 0.0;
    for (int i = 0; i < samples; ++i) {
      const double v = std::max(cd(rng) - x * cn(rng) / N, 0.0) / D;
      s += v;
      s2 += v * v;
    }
    const double mean = s / samples;
    const double se = std::sqrt((s2 / samples - mean * mean) / samples);
    EXPECT_NEAR(dkhi(D, N, x), mean, 3.0 * se) << D << " " << N << " " << x;
  }
}

TEST(Edkhi, InvertsDkhi) {
  for (int D : {1, 3, 7, 15}) {
    for (int N : {2, 20, 120}) {
      for (double q : {0.9, 0.3, 1e-2, 1e-5, 1e-9}) {
        const double x = edkhi(D, N, q);
        EXPECT_LE(std::abs(dkhi(D, N, x) - q), 1e-8) << D << " " << N << " " << q;
      }
    }
  }
  EXPECT_EQ(edkhi(3, 10, 1.0), 0.0);
}

TEST(Edkhi, LogTargetForTinyQuantiles) {
  const double log_q = -60.0;
  const double x = edkhi_log(6, 50, log_q);
  EXPECT_NEAR(std::log(dkhi(6, 50, x)), log_q, 1e-6);
  EXPECT_GT(x, edkhi(6, 50, 1e-9));
}

TEST(AlphaInit, RecoversNoiselessCurve) {
  const double alpha = 2.5, gamma2 = 0.7;
  std::vector<TipPair> pairs;
  for (int k = 1; k <= 40; ++k) {
    const double d = 0.05 * k;
    pairs.push_back({2.0 * gamma2 * (1.0 - std::exp(-alpha * d)), d});
  }
  const AlphaInit a = alpha_init_regression(pairs, 1.0);
  EXPECT_FALSE(a.fallback);
  EXPECT_NEAR(a.alpha, alpha, 1e-3 * alpha);
  EXPECT_NEAR(a.gamma2, gamma2, 1e-3 * gamma2);
}

TEST(AlphaInit, FallbackOnDegeneratePairs) {
  const AlphaInit few = alpha_init_regression({{1.0, 0.5}, {2.0, 0.7}}, 2.0);
  EXPECT_TRUE(few.fallback);
  EXPECT_NEAR(few.alpha, std::log(2.0) / 0.6, 1e-12);
  const AlphaInit same = alpha_init_regression({{1.0, 0.5}, {2.0, 0.5}, {1.5, 0.5}}, 1.0);
  EXPECT_TRUE(same.fallback);
}

TEST(AlphaInit, RobustToOutliers) {
  const double alpha = 1.2, gamma2 = 1.0;
  std::vector<TipPair> pairs;
  for (int k = 1; k <= 60; ++k) {
    const double d = 0.03 * k;
    double v = 2.0 * gamma2 * (1.0 - std::exp(-alpha * d));
    if (k % 15 == 0) v *= 8.0;
    pairs.push_back({v, d});
  }
  const AlphaInit a = alpha_init_regression(pairs, 1.0);
  EXPECT_NEAR(a.alpha, alpha, 0.15 * alpha);
}

TEST(Whitener, MatchesDirectLinearAlgebra) {
  Rng rng(8);
  std::normal_distribution<double> z(0.0, 1.0);
  Eigen::MatrixXd A(6, 6);
  for (int i = 0; i < 6; ++i) {
    for (int j = 0; j < 6; ++j) A(i, j) = z(rng);
  }
  const Eigen::MatrixXd V = A * A.transpose() + 0.5 * Eigen::MatrixXd::Identity(6, 6);
  Eigen::VectorXd y(6);
  for (int i = 0; i < 6; ++i) y(i) = z(rng);
  const Whitener w(V);
  EXPECT_NEAR(w.log_det(), std::log(V.determinant()), 1e-10);
  EXPECT_NEAR(w.mahalanobis2(y), y.dot(V.inverse() * y), 1e-9);
  EXPECT_TRUE(w.unwhiten(w.whiten(y)).isApprox(y, 1e-12));
  const double scale = 1.7;
  const double direct = -0.5 * (6 * std::log(2 * std::numbers::pi) + std::log((scale * V).determinant()) +
                                y.dot((scale * V).inverse() * y));
  EXPECT_NEAR(gaussian_loglik(w, scale, y), direct, 1e-9);

  Eigen::MatrixXd X(6, 2);
  X.col(0).setOnes();
  for (int i = 0; i < 6; ++i) X(i, 1) = i;
  const GlsFit f = gls(w, X, y);
  const Eigen::MatrixXd Vi = V.inverse();
  const Eigen::VectorXd beta = (X.transpose() * Vi * X).ldlt().solve(X.transpose() * Vi * y);
  EXPECT_TRUE(f.beta.isApprox(beta, 1e-9));
  EXPECT_NEAR(f.rss, (y - X * beta).dot(Vi * (y - X * beta)), 1e-9);
}

TEST(Whitener, RejectsSingular) {
  Eigen::MatrixXd V = Eigen::MatrixXd::Ones(3, 3);
  EXPECT_THROW(Whitener w(V), NumericalError);
}

TEST(GoldenSection, FindsParabolaPeak) {
  const double x = golden_section_max([](double t) { return -(t - 1.3) * (t - 1.3); }, 0.0, 5.0, 1e-10);
  EXPECT_NEAR(x, 1.3, 1e-6);
}
