#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <vector>

namespace treeshift {

// ---- Lasso ---------------------------------------------------------------

// Minimises 0.5 ||y - X b||^2 + lambda sum_j weights_j |b_j|. Coordinates
// with weight 0 are unpenalized and never count towards the support.
struct LassoProblem {
  Eigen::MatrixXd X;
  Eigen::VectorXd y;
  Eigen::VectorXd weights;

  // All coordinates penalized with weight 1 except the first.
  static LassoProblem with_free_intercept(Eigen::MatrixXd X, Eigen::VectorXd y);
};

// Same problem through its Gram matrix G = X^T X and c = X^T y; `scale` is
// the response magnitude used by the stopping rule.
struct LassoGram {
  Eigen::MatrixXd G;
  Eigen::VectorXd c;
  Eigen::VectorXd weights;
  double scale = 1.0;

  static LassoGram from(const LassoProblem& problem);
};

struct LassoOptions {
  int path_length = 100;
  double path_ratio = 1e-4;  // lambda_min / lambda_max
  int bisection_depth = 50;
  int max_sweeps = 10000;
  double tolerance = 1e-8;  // relative to the response scale
};

struct LassoResult {
  Eigen::VectorXd coef;
  double lambda = 0.0;
  int support_size = 0;  // penalized nonzeros
  bool exact = false;    // support_size equals the requested size
  bool converged = true;
};

LassoResult lasso_solve(const LassoProblem& problem, double lambda,
                        const LassoOptions& options = {},
                        const Eigen::VectorXd* warm_start = nullptr);

// Smallest lambda making every penalized coordinate zero.
double lasso_lambda_max(const LassoProblem& problem);

// Walks a decreasing lambda path and returns the first solution whose
// penalized support has exactly K nonzeros, bisecting lambda when the path
// jumps over K. When K cannot be reached the largest smaller support is
// returned with exact = false. Throws ValidationError for K > p - 1 or an
// all-zero response with K > 0.
LassoResult lasso_fixed_support_size(const LassoProblem& problem, int K,
                                     const LassoOptions& options = {});

LassoResult lasso_solve(const LassoGram& gram, double lambda, const LassoOptions& options = {},
                        const Eigen::VectorXd* warm_start = nullptr);
double lasso_lambda_max(const LassoGram& gram);
LassoResult lasso_fixed_support_size(const LassoGram& gram, int K, const LassoOptions& options = {});

// Penalized nonzero coordinates of a Lasso coefficient vector.
std::vector<int> lasso_support(const Eigen::VectorXd& weights, const Eigen::VectorXd& coef);

// ---- Chi-square pair functions -------------------------------------------

// Dkhi[D, N, x] = E[(X_D - x X_N / N)_+] / E[X_D] for independent chi-square
// variables with D and N degrees of freedom, by adaptive quadrature over X_N.
double dkhi(int D, int N, double x);

// x >= 0 with dkhi(D, N, x) = q. The log version accepts log q directly so
// that very small targets do not underflow.
double edkhi(int D, int N, double q);
double edkhi_log(int D, int N, double log_q);

// ---- Pairwise regression for OU starting values --------------------------

struct TipPair {
  double squared_difference;
  double distance;
};

struct AlphaInit {
  double alpha = 0.0;
  double gamma2 = 0.0;
  bool fallback = false;  // degenerate pairs; alpha set to ln 2 / (0.3 h)
};

// Robust fit of (Y_i - Y_j)^2 ~ 2 gamma2 (1 - exp(-alpha d_ij)) by Huber
// IRLS, with alpha clamped to [1e-4 / h, 1e3 / h] and gamma2 >= 1e-8.
AlphaInit alpha_init_regression(const std::vector<TipPair>& pairs, double tree_height);

// ---- Gaussian utilities --------------------------------------------------

// Cholesky factor V = L L^T reused for several right-hand sides.
class Whitener {
 public:
  // Throws NumericalError when V is not numerically positive definite
  // (pivot below 1e-12 times the largest diagonal entry).
  explicit Whitener(const Eigen::MatrixXd& V);

  Eigen::VectorXd whiten(const Eigen::VectorXd& y) const;
  Eigen::MatrixXd whiten(const Eigen::MatrixXd& X) const;
  Eigen::VectorXd unwhiten(const Eigen::VectorXd& z) const;
  double log_det() const { return log_det_; }
  // y^T V^-1 y
  double mahalanobis2(const Eigen::VectorXd& y) const { return whiten(y).squaredNorm(); }
  const Eigen::MatrixXd& lower() const { return L_; }

 private:
  Eigen::MatrixXd L_;
  double log_det_ = 0.0;
};

struct Whitened {
  Eigen::VectorXd z;
  double log_det = 0.0;
};

Whitened whiten(const Eigen::MatrixXd& V, const Eigen::VectorXd& y);

// log N(y; mean, scale * V).
double gaussian_loglik(const Whitener& V, double scale, const Eigen::VectorXd& residual);

// Generalized least squares beta = argmin ||y - X beta||^2_V, with the
// whitened residual sum of squares.
struct GlsFit {
  Eigen::VectorXd beta;
  double rss = 0.0;
};

GlsFit gls(const Whitener& V, const Eigen::MatrixXd& X, const Eigen::VectorXd& y);

// Golden-section maximisation of a unimodal function on [lo, hi].
template <typename F>
double golden_section_max(F&& f, double lo, double hi, double rel_tol, int max_iter = 200) {
  const double r = 0.6180339887498949;
  double a = lo, b = hi;
  double c = b - r * (b - a), d = a + r * (b - a);
  double fc = f(c), fd = f(d);
  for (int it = 0; it < max_iter && (b - a) > rel_tol * (std::abs(a) + std::abs(b)) * 0.5; ++it) {
    if (fc >= fd) {
      b = d;
      d = c;
      fd = fc;
      c = b - r * (b - a);
      fc = f(c);
    } else {
      a = c;
      c = d;
      fc = fd;
      d = a + r * (b - a);
      fd = f(d);
    }
  }
  return fc >= fd ? c : d;
}

}  // namespace treeshift
