#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <vector>

#include "elpv/error.hpp"
#include "elpv/image.hpp"
#include "elpv/rectify.hpp"

namespace elpv {

using FeatureVector = std::vector<double>;

/// (pixel mean, population std) in raw counts.
inline FeatureVector extract_mean_std(const Image16& img) {
  if (img.size() == 0) throw Error("extract_mean_std: empty image");
  const auto ms = mean_std(std::span<const std::uint16_t>(img.data));
  return {ms.mean, ms.stddev};
}

inline FeatureVector extract_mean_std(const ModuleImage& m) { return extract_mean_std(m.image); }

/// Per-dimension standardization fitted on training features only.
struct FeatureNormalizer {
  std::vector<double> mean;
  std::vector<double> stddev;

  [[nodiscard]] std::size_t dims() const noexcept { return mean.size(); }

  [[nodiscard]] FeatureVector apply(const FeatureVector& f) const {
    if (f.size() != dims()) throw Error("FeatureNormalizer: dimension mismatch");
    FeatureVector out(f.size());
    for (std::size_t d = 0; d < f.size(); ++d) out[d] = (f[d] - mean[d]) / stddev[d];
    return out;
  }

  [[nodiscard]] FeatureVector invert(const FeatureVector& z) const {
    if (z.size() != dims()) throw Error("FeatureNormalizer: dimension mismatch");
    FeatureVector out(z.size());
    for (std::size_t d = 0; d < z.size(); ++d) out[d] = z[d] * stddev[d] + mean[d];
    return out;
  }

  [[nodiscard]] std::vector<FeatureVector> apply_all(const std::vector<FeatureVector>& fs) const {
    std::vector<FeatureVector> out;
    out.reserve(fs.size());
    for (const auto& f : fs) out.push_back(apply(f));
    return out;
  }
};

inline FeatureNormalizer fit_normalizer(const std::vector<FeatureVector>& train) {
  if (train.size() < 2) throw Error("fit_normalizer: need at least two samples");
  const std::size_t d = train.front().size();
  if (d == 0) throw Error("fit_normalizer: empty feature vectors");
  FeatureNormalizer n{std::vector<double>(d, 0.0), std::vector<double>(d, 0.0)};
  for (const auto& f : train) {
    if (f.size() != d) throw Error("fit_normalizer: inconsistent feature dimensions");
    for (std::size_t k = 0; k < d; ++k) n.mean[k] += f[k];
  }
  for (auto& m : n.mean) m /= static_cast<double>(train.size());
  for (const auto& f : train)
    for (std::size_t k = 0; k < d; ++k) n.stddev[k] += (f[k] - n.mean[k]) * (f[k] - n.mean[k]);
  for (std::size_t k = 0; k < d; ++k) {
    n.stddev[k] = std::sqrt(n.stddev[k] / static_cast<double>(train.size()));
    if (!(n.stddev[k] > 0.0)) throw DegenerateInput("fit_normalizer: constant feature dimension " + std::to_string(k));
  }
  return n;
}

inline double squared_distance(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw Error("feature dimension mismatch");
  double s = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    const double d = a[k] - b[k];
    s += d * d;
  }
  return s;
}

/// exp(-gamma * |a - b|^2)
inline double rbf_kernel(std::span<const double> a, std::span<const double> b, double gamma) {
  if (!(gamma > 0.0)) throw Error("rbf_kernel: gamma must be positive");
  return std::exp(-gamma * squared_distance(a, b));
}

/// 1 / (d * var(X)) over all feature values pooled.
inline double default_gamma(const std::vector<FeatureVector>& x) {
  if (x.empty() || x.front().empty()) throw Error("default_gamma: no features");
  double sum = 0.0, sq = 0.0;
  std::size_t n = 0;
  for (const auto& f : x)
    for (double v : f) {
      sum += v;
      ++n;
    }
  const double mean = sum / static_cast<double>(n);
  for (const auto& f : x)
    for (double v : f) sq += (v - mean) * (v - mean);
  const double var = sq / static_cast<double>(n);
  const double d = static_cast<double>(x.front().size());
  return var > 0.0 ? 1.0 / (d * var) : 1.0 / d;
}

struct SvrParams {
  double c = 1.0;
  double epsilon = 0.1;
  double gamma = 0.5;
  double tolerance = 1e-3;    ///< stop once the maximal KKT violation drops below this
  long max_passes = 10'000;   ///< iteration cap is max_passes * 2n
};

struct SvrModel {
  std::vector<FeatureVector> support_vectors;
  std::vector<double> dual_coef;  ///< alpha - alpha*, one per support vector
  double bias = 0.0;
  double gamma = 0.5;
  double c = 1.0;
  double epsilon = 0.1;

  [[nodiscard]] std::size_t dims() const noexcept {
    return support_vectors.empty() ? 0 : support_vectors.front().size();
  }
};

/// sum_i (alpha_i - alpha*_i) k(sv_i, f) + b
inline double svr_predict(const SvrModel& model, std::span<const double> f) {
  for (double v : f)
    if (!std::isfinite(v)) throw Error("svr_predict: non-finite feature");
  double s = model.bias;
  for (std::size_t i = 0; i < model.support_vectors.size(); ++i) {
    if (model.support_vectors[i].size() != f.size()) throw Error("svr_predict: dimension mismatch");
    s += model.dual_coef[i] * rbf_kernel(model.support_vectors[i], f, model.gamma);
  }
  return s;
}

/// Dual variables of the epsilon-SVR for every training sample.
struct SvrDual {
  std::vector<double> alpha;
  std::vector<double> alpha_star;
  double bias = 0.0;

  [[nodiscard]] std::vector<double> coef() const {
    std::vector<double> c(alpha.size());
    for (std::size_t i = 0; i < c.size(); ++i) c[i] = alpha[i] - alpha_star[i];
    return c;
  }
};

/// Dense kernel matrix of a training set.
inline std::vector<double> kernel_matrix(const std::vector<FeatureVector>& x, double gamma) {
  const std::size_t n = x.size();
  std::vector<double> k(n * n);
  for (std::size_t i = 0; i < n; ++i) {
    k[i * n + i] = 1.0;
    for (std::size_t j = 0; j < i; ++j) k[i * n + j] = k[j * n + i] = rbf_kernel(x[i], x[j], gamma);
  }
  return k;
}

/// Maximization form of the dual:
/// -1/2 c'Kc - eps * sum(alpha + alpha*) + y'c, with c = alpha - alpha*.
inline double svr_dual_objective(const std::vector<double>& kmat, std::span<const double> y, const SvrDual& dual,
                                 double epsilon) {
  const std::size_t n = y.size();
  const auto c = dual.coef();
  double quad = 0.0, lin = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double kc = 0.0;
    for (std::size_t j = 0; j < n; ++j) kc += kmat[i * n + j] * c[j];
    quad += c[i] * kc;
    lin += y[i] * c[i] - epsilon * (dual.alpha[i] + dual.alpha_star[i]);
  }
  return -0.5 * quad + lin;
}

struct SvrFit {
  SvrModel model;
  SvrDual dual;
  double objective = 0.0;  ///< dual objective, maximization form
  double max_violation = 0.0;
  long iterations = 0;
  bool converged = false;
};

/// Epsilon-SVR with RBF kernel, trained by SMO on the 2n-variable dual
/// (alpha, alpha*) with second-order working set selection.
/// A fit that hits the iteration cap is returned with converged = false.
inline SvrFit svr_fit(const std::vector<FeatureVector>& x, std::span<const double> y, const SvrParams& p) {
  const std::size_t n = x.size();
  if (n == 0) throw Error("svr_fit: no samples");
  if (y.size() != n) throw Error("svr_fit: feature/target count mismatch");
  if (!(p.c > 0.0) || !(p.epsilon >= 0.0) || !(p.gamma > 0.0) || !(p.tolerance > 0.0))
    throw Error("svr_fit: require C > 0, epsilon >= 0, gamma > 0, tolerance > 0");
  const std::size_t d = x.front().size();
  for (std::size_t i = 0; i < n; ++i) {
    if (x[i].size() != d) throw Error("svr_fit: inconsistent feature dimensions");
    if (!std::isfinite(y[i])) throw Error("svr_fit: non-finite target");
    for (double v : x[i])
      if (!std::isfinite(v)) throw Error("svr_fit: non-finite feature");
  }

  const std::vector<double> k = kernel_matrix(x, p.gamma);
  const std::size_t l = 2 * n;
  auto sign = [n](std::size_t t) { return t < n ? 1.0 : -1.0; };
  auto kq = [&](std::size_t s, std::size_t t) { return sign(s) * sign(t) * k[(s % n) * n + (t % n)]; };

  std::vector<double> beta(l, 0.0);
  std::vector<double> grad(l);
  for (std::size_t t = 0; t < n; ++t) {
    grad[t] = p.epsilon - y[t];
    grad[t + n] = p.epsilon + y[t];
  }
  const double cap = p.c;
  auto in_up = [&](std::size_t t) { return sign(t) > 0 ? beta[t] < cap : beta[t] > 0.0; };
  auto in_low = [&](std::size_t t) { return sign(t) > 0 ? beta[t] > 0.0 : beta[t] < cap; };

  SvrFit fit;
  const long max_iter = p.max_passes * static_cast<long>(l);
  for (;;) {
    // i: maximal violator; j: largest second-order gain among its partners.
    double gmax = -std::numeric_limits<double>::infinity();
    double gmin = std::numeric_limits<double>::infinity();
    std::size_t i = l, j = l;
    for (std::size_t t = 0; t < l; ++t) {
      const double v = -sign(t) * grad[t];
      if (in_up(t) && v > gmax) {
        gmax = v;
        i = t;
      }
      if (in_low(t)) gmin = std::min(gmin, v);
    }
    fit.max_violation = (i == l || gmin == std::numeric_limits<double>::infinity()) ? 0.0 : gmax - gmin;
    if (i == l || gmin == std::numeric_limits<double>::infinity() || gmax - gmin < p.tolerance) {
      fit.converged = true;
      break;
    }
    double best_gain = std::numeric_limits<double>::infinity();
    for (std::size_t t = 0; t < l; ++t) {
      if (!in_low(t)) continue;
      const double b = gmax + sign(t) * grad[t];
      if (b <= 0.0) continue;
      double a = kq(i, i) + kq(t, t) - 2.0 * sign(i) * sign(t) * kq(i, t);
      if (a <= 0.0) a = 1e-12;
      if (-(b * b) / a < best_gain) {
        best_gain = -(b * b) / a;
        j = t;
      }
    }
    if (j == l) {
      fit.converged = true;
      break;
    }
    if (fit.iterations >= max_iter) break;
    ++fit.iterations;

    // Two-variable subproblem along the equality constraint, clipped to the box.
    const double old_i = beta[i], old_j = beta[j];
    double quad = 0.0;
    if (sign(i) != sign(j)) {
      quad = kq(i, i) + kq(j, j) + 2.0 * kq(i, j);
      if (quad <= 0) quad = 1e-12;
      const double delta = (-grad[i] - grad[j]) / quad;
      const double diff = beta[i] - beta[j];
      beta[i] += delta;
      beta[j] += delta;
      if (diff > 0) {
        if (beta[j] < 0) {
          beta[j] = 0;
          beta[i] = diff;
        }
      } else if (beta[i] < 0) {
        beta[i] = 0;
        beta[j] = -diff;
      }
      if (diff > 0) {
        if (beta[i] > cap) {
          beta[i] = cap;
          beta[j] = cap - diff;
        }
      } else if (beta[j] > cap) {
        beta[j] = cap;
        beta[i] = cap + diff;
      }
    } else {
      quad = kq(i, i) + kq(j, j) - 2.0 * kq(i, j);
      if (quad <= 0) quad = 1e-12;
      const double delta = (grad[i] - grad[j]) / quad;
      const double sum = beta[i] + beta[j];
      beta[i] -= delta;
      beta[j] += delta;
      if (sum > cap) {
        if (beta[i] > cap) {
          beta[i] = cap;
          beta[j] = sum - cap;
        }
      } else if (beta[j] < 0) {
        beta[j] = 0;
        beta[i] = sum;
      }
      if (sum > cap) {
        if (beta[j] > cap) {
          beta[j] = cap;
          beta[i] = sum - cap;
        }
      } else if (beta[i] < 0) {
        beta[i] = 0;
        beta[j] = sum;
      }
    }

    const double di = beta[i] - old_i;
    const double dj = beta[j] - old_j;
    for (std::size_t t = 0; t < l; ++t) grad[t] += kq(t, i) * di + kq(t, j) * dj;
  }

  // Bias from free variables, or the midpoint of the feasible interval.
  double ub = std::numeric_limits<double>::infinity();
  double lb = -std::numeric_limits<double>::infinity();
  double sum_free = 0.0;
  long n_free = 0;
  for (std::size_t t = 0; t < l; ++t) {
    const double yg = sign(t) * grad[t];
    if (beta[t] >= cap) {
      if (sign(t) < 0)
        ub = std::min(ub, yg);
      else
        lb = std::max(lb, yg);
    } else if (beta[t] <= 0.0) {
      if (sign(t) > 0)
        ub = std::min(ub, yg);
      else
        lb = std::max(lb, yg);
    } else {
      ++n_free;
      sum_free += yg;
    }
  }
  const double rho = n_free > 0 ? sum_free / static_cast<double>(n_free) : 0.5 * (ub + lb);

  fit.dual.alpha.assign(beta.begin(), beta.begin() + static_cast<std::ptrdiff_t>(n));
  fit.dual.alpha_star.assign(beta.begin() + static_cast<std::ptrdiff_t>(n), beta.end());
  fit.dual.bias = -rho;
  fit.objective = svr_dual_objective(k, y, fit.dual, p.epsilon);

  fit.model.gamma = p.gamma;
  fit.model.c = p.c;
  fit.model.epsilon = p.epsilon;
  fit.model.bias = -rho;
  const auto coef = fit.dual.coef();
  for (std::size_t t = 0; t < n; ++t) {
    if (coef[t] != 0.0) {
      fit.model.support_vectors.push_back(x[t]);
      fit.model.dual_coef.push_back(coef[t]);
    }
  }
  return fit;
}

}  // namespace elpv
