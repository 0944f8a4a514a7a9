#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "elpv/error.hpp"
#include "elpv/regress.hpp"

// Reference solver for small epsilon-SVR problems. It shares nothing with the
// SMO path except the kernel: plain projected-gradient ascent on the dual,
// with an exact projection onto the box and the equality constraint.

namespace elpv {

struct QpOracleResult {
  SvrDual dual;
  double objective = 0.0;
  long iterations = 0;
};

struct QpOracleOptions {
  double stagnation = 1e-10;  ///< stop when no variable moves more than this
  long max_iterations = 5'000'000;
  std::size_t max_samples = 30;
};

namespace detail {

// Euclidean projection of (a, b) onto {0 <= alpha, alpha* <= C, sum alpha = sum alpha*}
// via bisection on the multiplier of the equality constraint.
inline void project_svr_feasible(std::vector<double>& a, std::vector<double>& b, double c) {
  auto balance = [&](double lam) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i)
      s += std::clamp(a[i] - lam, 0.0, c) - std::clamp(b[i] + lam, 0.0, c);
    return s;
  };
  double span = c;
  for (std::size_t i = 0; i < a.size(); ++i) span = std::max({span, std::abs(a[i]), std::abs(b[i])});
  double lo = -2.0 * span - 1.0;
  double hi = 2.0 * span + 1.0;
  for (int it = 0; it < 200 && hi - lo > 0.0; ++it) {
    const double mid = 0.5 * (lo + hi);
    if (mid == lo || mid == hi) break;
    if (balance(mid) > 0.0)
      lo = mid;
    else
      hi = mid;
  }
  const double lam = 0.5 * (lo + hi);
  for (std::size_t i = 0; i < a.size(); ++i) {
    a[i] = std::clamp(a[i] - lam, 0.0, c);
    b[i] = std::clamp(b[i] + lam, 0.0, c);
  }
}

}  // namespace detail

/// Solves the epsilon-SVR dual by projected-gradient ascent run to stagnation.
inline QpOracleResult qp_oracle(const std::vector<FeatureVector>& x, const std::vector<double>& y, double c,
                                double epsilon, double gamma, const QpOracleOptions& opt = {}) {
  const std::size_t n = x.size();
  if (n == 0 || y.size() != n) throw Error("qp_oracle: bad sample count");
  if (n > opt.max_samples) throw Error("qp_oracle: size limit exceeded");
  if (!(c > 0) || !(epsilon >= 0) || !(gamma > 0)) throw Error("qp_oracle: bad hyperparameters");

  std::vector<double> k(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) k[i * n + j] = rbf_kernel(x[i], x[j], gamma);

  // Gershgorin bound on the Hessian [[K, -K], [-K, K]].
  double lip = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double row = 0.0;
    for (std::size_t j = 0; j < n; ++j) row += std::abs(k[i * n + j]);
    lip = std::max(lip, 2.0 * row);
  }
  const double step = 1.0 / lip;

  QpOracleResult r;
  std::vector<double> a(n, 0.0), b(n, 0.0), kc(n);
  for (; r.iterations < opt.max_iterations; ++r.iterations) {
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += k[i * n + j] * (a[j] - b[j]);
      kc[i] = s;
    }
    std::vector<double> na(n), nb(n);
    for (std::size_t i = 0; i < n; ++i) {
      na[i] = a[i] + step * (y[i] - epsilon - kc[i]);
      nb[i] = b[i] + step * (-y[i] - epsilon + kc[i]);
    }
    detail::project_svr_feasible(na, nb, c);
    double moved = 0.0;
    for (std::size_t i = 0; i < n; ++i) moved = std::max({moved, std::abs(na[i] - a[i]), std::abs(nb[i] - b[i])});
    a.swap(na);
    b.swap(nb);
    if (moved < opt.stagnation) break;
  }

  r.dual.alpha = a;
  r.dual.alpha_star = b;
  r.objective = svr_dual_objective(k, y, r.dual, epsilon);

  // Bias from KKT conditions: free alphas pin it, bounded ones bracket it.
  const double free_tol = 1e-8 * c;
  double sum = 0.0;
  int free = 0;
  double lower = -std::numeric_limits<double>::infinity();
  double upper = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += k[i * n + j] * (a[j] - b[j]);
    const bool a_free = a[i] > free_tol && a[i] < c - free_tol;
    const bool b_free = b[i] > free_tol && b[i] < c - free_tol;
    if (a_free) {
      sum += y[i] - epsilon - s;
      ++free;
    } else if (b_free) {
      sum += y[i] + epsilon - s;
      ++free;
    } else {
      if (a[i] >= c - free_tol) {
        upper = std::min(upper, y[i] - epsilon - s);
      } else if (b[i] >= c - free_tol) {
        lower = std::max(lower, y[i] + epsilon - s);
      } else {
        lower = std::max(lower, y[i] - epsilon - s);
        upper = std::min(upper, y[i] + epsilon - s);
      }
    }
  }
  if (free > 0)
    r.dual.bias = sum / free;
  else if (std::isfinite(lower) && std::isfinite(upper))
    r.dual.bias = 0.5 * (lower + upper);
  else
    r.dual.bias = std::isfinite(lower) ? lower : upper;
  return r;
}

}  // namespace elpv
