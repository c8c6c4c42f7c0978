#include "treeshift/numerics.hpp"

#include "treeshift/errors.hpp"

#include <boost/math/distributions/chi_squared.hpp>
#include <boost/math/quadrature/gauss_kronrod.hpp>
#include <boost/math/special_functions/gamma.hpp>
#include <boost/math/tools/roots.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

namespace treeshift {

namespace {

double soft_threshold(double z, double t) {
  if (z > t) return z - t;
  if (z < -t) return z + t;
  return 0.0;
}

int count_support(const Eigen::VectorXd& weights, const Eigen::VectorXd& coef) {
  int count = 0;
  for (Eigen::Index j = 0; j < coef.size(); ++j) {
    if (weights(j) > 0.0 && coef(j) != 0.0) ++count;
  }
  return count;
}

}  // namespace

LassoProblem LassoProblem::with_free_intercept(Eigen::MatrixXd X, Eigen::VectorXd y) {
  LassoProblem p;
  p.weights = Eigen::VectorXd::Ones(X.cols());
  if (X.cols() > 0) p.weights(0) = 0.0;
  p.X = std::move(X);
  p.y = std::move(y);
  return p;
}

LassoGram LassoGram::from(const LassoProblem& problem) {
  if (problem.X.rows() != problem.y.size() || problem.weights.size() != problem.X.cols()) {
    throw ValidationError("Lasso problem dimensions do not match");
  }
  LassoGram g;
  g.G = problem.X.transpose() * problem.X;
  g.c = problem.X.transpose() * problem.y;
  g.weights = problem.weights;
  g.scale = problem.y.size() > 0 ? problem.y.cwiseAbs().maxCoeff() : 1.0;
  return g;
}

LassoResult lasso_solve(const LassoGram& gram, double lambda, const LassoOptions& options,
                        const Eigen::VectorXd* warm_start) {
  const Eigen::Index p = gram.c.size();
  Eigen::VectorXd b = warm_start ? *warm_start : Eigen::VectorXd::Zero(p);
  // grad = X^T (y - X b)
  Eigen::VectorXd grad = gram.c - gram.G * b;
  const double scale = std::max(gram.scale, 1e-300);

  LassoResult out;
  out.converged = false;
  for (int sweep = 0; sweep < options.max_sweeps; ++sweep) {
    double max_change = 0.0;
    for (Eigen::Index j = 0; j < p; ++j) {
      const double gjj = gram.G(j, j);
      if (gjj <= 0.0) {
        b(j) = 0.0;
        continue;
      }
      const double rho = grad(j) + gjj * b(j);
      const double nb = soft_threshold(rho, lambda * gram.weights(j)) / gjj;
      const double step = nb - b(j);
      if (step != 0.0) {
        grad.noalias() -= step * gram.G.col(j);
        b(j) = nb;
        max_change = std::max(max_change, std::abs(step) * std::sqrt(gjj));
      }
    }
    if (max_change < options.tolerance * scale) {
      out.converged = true;
      break;
    }
  }
  out.coef = std::move(b);
  out.lambda = lambda;
  out.support_size = count_support(gram.weights, out.coef);
  return out;
}

LassoResult lasso_solve(const LassoProblem& problem, double lambda, const LassoOptions& options,
                        const Eigen::VectorXd* warm_start) {
  return lasso_solve(LassoGram::from(problem), lambda, options, warm_start);
}

double lasso_lambda_max(const LassoGram& gram) {
  std::vector<Eigen::Index> free;
  for (Eigen::Index j = 0; j < gram.c.size(); ++j) {
    if (gram.weights(j) <= 0.0) free.push_back(j);
  }
  Eigen::VectorXd grad = gram.c;
  if (!free.empty()) {
    const auto f = static_cast<Eigen::Index>(free.size());
    Eigen::MatrixXd Gff(f, f);
    Eigen::VectorXd cf(f);
    for (Eigen::Index a = 0; a < f; ++a) {
      cf(a) = gram.c(free[a]);
      for (Eigen::Index b = 0; b < f; ++b) Gff(a, b) = gram.G(free[a], free[b]);
    }
    const Eigen::VectorXd bf = Gff.completeOrthogonalDecomposition().solve(cf);
    for (Eigen::Index a = 0; a < f; ++a) grad -= gram.G.col(free[a]) * bf(a);
  }
  double lmax = 0.0;
  for (Eigen::Index j = 0; j < gram.c.size(); ++j) {
    if (gram.weights(j) > 0.0) lmax = std::max(lmax, std::abs(grad(j)) / gram.weights(j));
  }
  return lmax;
}

double lasso_lambda_max(const LassoProblem& problem) {
  return lasso_lambda_max(LassoGram::from(problem));
}

std::vector<int> lasso_support(const Eigen::VectorXd& weights, const Eigen::VectorXd& coef) {
  std::vector<int> out;
  for (Eigen::Index j = 0; j < coef.size(); ++j) {
    if (weights(j) > 0.0 && coef(j) != 0.0) out.push_back(static_cast<int>(j));
  }
  return out;
}

LassoResult lasso_fixed_support_size(const LassoGram& gram, int K, const LassoOptions& options) {
  const int n_penalized = static_cast<int>((gram.weights.array() > 0.0).count());
  if (K < 0 || K > n_penalized) {
    throw ValidationError("requested support size " + std::to_string(K) + " exceeds the " +
                          std::to_string(n_penalized) + " penalized coordinates");
  }
  const double lmax = lasso_lambda_max(gram);
  // Tiny margin above lambda_max so that all penalized coordinates vanish.
  LassoResult prev = lasso_solve(gram, lmax * (1.0 + 1e-12), options);
  if (K == 0) {
    prev.exact = prev.support_size == 0;
    return prev;
  }
  if (!(lmax > 1e-14 * std::max(gram.scale, 1e-300))) {
    throw ValidationError("support size " + std::to_string(K) +
                          " is unattainable: the response is explained without shifts");
  }

  LassoResult best_below = prev;
  const int L = std::max(2, options.path_length);
  for (int k = 1; k < L; ++k) {
    const double lambda = lmax * std::pow(options.path_ratio, static_cast<double>(k) / (L - 1));
    LassoResult cur = lasso_solve(gram, lambda, options, &prev.coef);
    if (cur.support_size == K) {
      cur.exact = true;
      return cur;
    }
    if (cur.support_size > K) {
      double lo = lambda;       // too many nonzeros
      double hi = prev.lambda;  // too few
      Eigen::VectorXd warm = prev.coef;
      for (int depth = 0; depth < options.bisection_depth; ++depth) {
        const double mid = std::sqrt(lo * hi);
        LassoResult s = lasso_solve(gram, mid, options, &warm);
        if (s.support_size == K) {
          s.exact = true;
          return s;
        }
        if (s.support_size > K) {
          lo = mid;
        } else {
          hi = mid;
          warm = s.coef;
          if (s.support_size >= best_below.support_size) best_below = s;
        }
      }
      break;
    }
    if (cur.support_size >= best_below.support_size) best_below = cur;
    prev = std::move(cur);
  }
  best_below.exact = false;
  return best_below;
}

LassoResult lasso_fixed_support_size(const LassoProblem& problem, int K,
                                     const LassoOptions& options) {
  return lasso_fixed_support_size(LassoGram::from(problem), K, options);
}

// ---- Chi-square pair functions -------------------------------------------

namespace {

// E[(X_D - c)_+] / D for X_D ~ chi2(D).
double positive_part_ratio(int D, double c) {
  if (c <= 0.0) return 1.0;
  const double a = 0.5 * D;
  const double v = boost::math::gamma_q(a + 1.0, 0.5 * c) - (c / D) * boost::math::gamma_q(a, 0.5 * c);
  return std::max(v, 0.0);
}

}  // namespace

double dkhi(int D, int N, double x) {
  if (D < 1 || N < 1) throw ValidationError("Dkhi needs positive degrees of freedom");
  if (!(x >= 0.0)) throw ValidationError("Dkhi needs x >= 0");
  if (x == 0.0) return 1.0;
  if (std::isinf(x)) return 0.0;

  const boost::math::chi_squared_distribution<double> chi_N(N);
  // Rescale so that the bulk of the integrand sits near v = 1: the
  // integrand behaves like b^((N + D) / 2 - 2) exp(-(1 + x / N) b / 2).
  const double s = std::max(2.0, N + D - 4.0) / (1.0 + x / N);
  // b = s v^2 removes the square-root behaviour at b = 0 for small D or N.
  auto integrand = [&](double v) {
    const double b = s * v * v;
    if (b <= 0.0 || !std::isfinite(b)) return 0.0;
    const double density = boost::math::pdf(chi_N, b);
    if (density == 0.0) return 0.0;
    return 2.0 * s * v * density * positive_part_ratio(D, x * b / N);
  };
  double error = 0.0;
  const double value = boost::math::quadrature::gauss_kronrod<double, 61>::integrate(
      integrand, 0.0, std::numeric_limits<double>::infinity(), 20, 1e-12, &error);
  if (!(error <= 1e-7 * std::abs(value) + 1e-300)) {
    throw NumericalError("Dkhi quadrature did not converge (D=" + std::to_string(D) +
                         ", N=" + std::to_string(N) + ", x=" + std::to_string(x) + ")");
  }
  return std::clamp(value, 0.0, 1.0);
}

double edkhi_log(int D, int N, double log_q) {
  if (!(log_q <= 1e-15)) throw ValidationError("EDkhi needs 0 < q <= 1");
  if (log_q >= 0.0) return 0.0;
  auto g = [&](double x) {
    const double v = dkhi(D, N, x);
    return (v > 0.0 ? std::max(std::log(v), -1e4) : -1e4) - log_q;
  };
  double lo = 0.0;
  double hi = 1.0;
  double g_hi = g(hi);
  for (int i = 0; g_hi > 0.0; ++i) {
    if (i > 1000) throw NumericalError("EDkhi could not bracket the root");
    lo = hi;
    hi *= 2.0;
    g_hi = g(hi);
  }
  if (g_hi == 0.0) return hi;
  double g_lo = lo == 0.0 ? -log_q : g(lo);
  std::uintmax_t max_iter = 300;
  const auto [a, b] = boost::math::tools::toms748_solve(
      g, lo, hi, g_lo, g_hi, boost::math::tools::eps_tolerance<double>(50), max_iter);
  return 0.5 * (a + b);
}

double edkhi(int D, int N, double q) {
  if (!(q > 0.0) || q > 1.0) throw ValidationError("EDkhi needs 0 < q <= 1");
  return edkhi_log(D, N, std::log(q));
}

// ---- Pairwise regression -------------------------------------------------

AlphaInit alpha_init_regression(const std::vector<TipPair>& pairs, double tree_height) {
  if (!(tree_height > 0.0)) throw ValidationError("tree height must be positive");
  const double a_lo = 1e-4 / tree_height;
  const double a_hi = 1e3 / tree_height;
  const double g_lo = 1e-8;
  AlphaInit out;

  double d_min = std::numeric_limits<double>::infinity();
  double d_max = 0.0;
  for (const auto& p : pairs) {
    d_min = std::min(d_min, p.distance);
    d_max = std::max(d_max, p.distance);
  }
  const std::size_t m = pairs.size();
  std::vector<double> w(m, 1.0);

  auto gamma_for = [&](double alpha) {
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
      const double g = -2.0 * std::expm1(-alpha * pairs[i].distance);
      num += w[i] * pairs[i].squared_difference * g;
      den += w[i] * g * g;
    }
    return den > 0.0 ? std::max(num / den, g_lo) : g_lo;
  };
  auto rss = [&](double alpha) {
    const double c = gamma_for(alpha);
    double total = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
      const double g = -2.0 * std::expm1(-alpha * pairs[i].distance);
      const double r = pairs[i].squared_difference - c * g;
      total += w[i] * r * r;
    }
    return total;
  };

  if (m < 3 || !(d_max > 0.0) || d_max - d_min <= 1e-12 * d_max) {
    out.fallback = true;
    out.alpha = std::log(2.0) / (0.3 * tree_height);
    out.gamma2 = m > 0 ? gamma_for(out.alpha) : g_lo;
    return out;
  }

  const int grid = 81;
  const double log_lo = std::log(a_lo), log_hi = std::log(a_hi);
  double alpha = std::log(2.0) / (0.3 * tree_height);
  for (int iter = 0; iter < 50; ++iter) {
    int best = 0;
    double best_rss = std::numeric_limits<double>::infinity();
    for (int k = 0; k < grid; ++k) {
      const double v = rss(std::exp(log_lo + (log_hi - log_lo) * k / (grid - 1)));
      if (v < best_rss) {
        best_rss = v;
        best = k;
      }
    }
    const double step = (log_hi - log_lo) / (grid - 1);
    const double left = std::max(log_lo, log_lo + (best - 1) * step);
    const double right = std::min(log_hi, log_lo + (best + 1) * step);
    const double log_alpha = golden_section_max([&](double la) { return -rss(std::exp(la)); },
                                                left, right, 1e-12);
    const double next = std::clamp(std::exp(log_alpha), a_lo, a_hi);
    const double c = gamma_for(next);

    // Huber weights from the residuals, scale by the median absolute deviation.
    std::vector<double> resid(m), abs_dev(m);
    for (std::size_t i = 0; i < m; ++i) {
      resid[i] = pairs[i].squared_difference + 2.0 * c * std::expm1(-next * pairs[i].distance);
    }
    std::vector<double> sorted = resid;
    std::nth_element(sorted.begin(), sorted.begin() + m / 2, sorted.end());
    const double med = sorted[m / 2];
    for (std::size_t i = 0; i < m; ++i) abs_dev[i] = std::abs(resid[i] - med);
    std::nth_element(abs_dev.begin(), abs_dev.begin() + m / 2, abs_dev.end());
    const double sigma = 1.4826 * abs_dev[m / 2];

    const bool settled = std::abs(next - alpha) <= 1e-10 * alpha;
    alpha = next;
    if (settled && iter > 0) break;
    if (!(sigma > 1e-300)) break;
    const double k_huber = 1.345 * sigma;
    for (std::size_t i = 0; i < m; ++i) {
      const double a = std::abs(resid[i]);
      w[i] = a <= k_huber ? 1.0 : k_huber / a;
    }
  }
  out.alpha = alpha;
  out.gamma2 = gamma_for(alpha);
  return out;
}

// ---- Gaussian utilities --------------------------------------------------

Whitener::Whitener(const Eigen::MatrixXd& V) {
  if (V.rows() != V.cols() || V.rows() == 0) throw ValidationError("covariance must be square");
  const double dmax = V.diagonal().cwiseAbs().maxCoeff();
  Eigen::LLT<Eigen::MatrixXd> llt(V);
  if (llt.info() != Eigen::Success) {
    throw NumericalError("covariance matrix is not positive definite");
  }
  L_ = llt.matrixL();
  for (Eigen::Index i = 0; i < L_.rows(); ++i) {
    const double pivot = L_(i, i) * L_(i, i);
    if (!(pivot >= 1e-12 * dmax)) throw NumericalError("covariance matrix is numerically singular");
    log_det_ += std::log(pivot);
  }
}

Eigen::VectorXd Whitener::whiten(const Eigen::VectorXd& y) const {
  return L_.triangularView<Eigen::Lower>().solve(y);
}

Eigen::MatrixXd Whitener::whiten(const Eigen::MatrixXd& X) const {
  return L_.triangularView<Eigen::Lower>().solve(X);
}

Eigen::VectorXd Whitener::unwhiten(const Eigen::VectorXd& z) const {
  return L_.triangularView<Eigen::Lower>() * z;
}

Whitened whiten(const Eigen::MatrixXd& V, const Eigen::VectorXd& y) {
  const Whitener w(V);
  return Whitened{w.whiten(y), w.log_det()};
}

double gaussian_loglik(const Whitener& V, double scale, const Eigen::VectorXd& residual) {
  const double n = static_cast<double>(residual.size());
  const double q = V.mahalanobis2(residual);
  return -0.5 * (n * std::log(2.0 * M_PI) + n * std::log(scale) + V.log_det() + q / scale);
}

GlsFit gls(const Whitener& V, const Eigen::MatrixXd& X, const Eigen::VectorXd& y) {
  const Eigen::MatrixXd Xw = V.whiten(X);
  const Eigen::VectorXd yw = V.whiten(y);
  GlsFit fit;
  fit.beta = Xw.colPivHouseholderQr().solve(yw);
  fit.rss = (yw - Xw * fit.beta).squaredNorm();
  return fit;
}

}  // namespace treeshift
