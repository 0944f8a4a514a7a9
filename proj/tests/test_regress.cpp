#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "elpv/qp_oracle.hpp"
#include "elpv/regress.hpp"

using namespace elpv;

namespace {

struct Problem {
  std::vector<FeatureVector> x;
  std::vector<double> y;
};

Problem random_problem(std::size_t n, std::size_t d, std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  std::uniform_real_distribution<double> u(0.6, 1.0);
  Problem p;
  for (std::size_t i = 0; i < n; ++i) {
    FeatureVector f(d);
    for (auto& v : f) v = g(rng);
    p.x.push_back(f);
    p.y.push_back(u(rng));
  }
  return p;
}

// Checks box, equality and complementary slackness of a fitted dual.
void expect_kkt(const Problem& pr, const SvrFit& fit, double c, double eps, double tol) {
  const std::size_t n = pr.x.size();
  double sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double a = fit.dual.alpha[i], b = fit.dual.alpha_star[i];
    EXPECT_GE(a, 0.0);
    EXPECT_GE(b, 0.0);
    EXPECT_LE(a, c);
    EXPECT_LE(b, c);
    sum += a - b;
    const double r = pr.y[i] - svr_predict(fit.model, pr.x[i]);  // residual
    if (a > 1e-9 && a < c - 1e-9) { EXPECT_NEAR(r, eps, tol); }
    if (b > 1e-9 && b < c - 1e-9) { EXPECT_NEAR(r, -eps, tol); }
    if (a <= 1e-12 && b <= 1e-12) { EXPECT_LE(std::abs(r), eps + tol); }
    if (a >= c - 1e-12) { EXPECT_GE(r, eps - tol); }
    if (b >= c - 1e-12) { EXPECT_LE(r, -eps + tol); }
  }
  EXPECT_NEAR(sum, 0.0, 1e-8);
}

}  // namespace

TEST(Features, MeanStdExamples) {
  auto f = extract_mean_std(Image16(4, 4, 500));
  EXPECT_DOUBLE_EQ(f[0], 500.0);
  EXPECT_DOUBLE_EQ(f[1], 0.0);
  f = extract_mean_std(Image16(2, 1, std::vector<std::uint16_t>{0, 2}));
  EXPECT_DOUBLE_EQ(f[0], 1.0);
  EXPECT_DOUBLE_EQ(f[1], 1.0);
}

TEST(Features, MatchesLongDoubleReference) {
  std::mt19937_64 rng(4);
  Image16 img(123, 77);
  for (auto& v : img.data) v = static_cast<std::uint16_t>(rng() % 65536);
  long double s = 0, ss = 0;
  for (auto v : img.data) s += v;
  const long double m = s / img.size();
  for (auto v : img.data) ss += (v - m) * (v - m);
  const auto f = extract_mean_std(img);
  EXPECT_NEAR(f[0], static_cast<double>(m), 1e-9 * static_cast<double>(m));
  const double sd = static_cast<double>(std::sqrt(ss / img.size()));
  EXPECT_NEAR(f[1], sd, 1e-9 * sd);
}

TEST(Normalizer, TwoPointExample) {
  const auto n = fit_normalizer({{0, 0}, {2, 2}});
  EXPECT_EQ(n.mean, (std::vector<double>{1, 1}));
  EXPECT_EQ(n.stddev, (std::vector<double>{1, 1}));
  EXPECT_EQ(n.apply({1, 1}), (FeatureVector{0, 0}));
}

TEST(Normalizer, RoundTripAndStandardization) {
  std::mt19937_64 rng(8);
  std::normal_distribution<double> g(300.0, 40.0);
  std::vector<FeatureVector> train;
  for (int i = 0; i < 50; ++i) train.push_back({g(rng), 0.1 * g(rng), g(rng) * g(rng)});
  const auto n = fit_normalizer(train);
  std::vector<double> mean(3, 0.0);
  for (const auto& f : train) {
    const auto z = n.apply(f);
    const auto back = n.invert(z);
    for (std::size_t d = 0; d < 3; ++d) {
      EXPECT_NEAR(back[d], f[d], 1e-9 * std::abs(f[d]));
      mean[d] += z[d] / 50.0;
    }
  }
  for (double m : mean) EXPECT_NEAR(m, 0.0, 1e-12);
}

TEST(Normalizer, Errors) {
  EXPECT_THROW(fit_normalizer({{1, 2}}), Error);
  EXPECT_THROW(fit_normalizer({{1, 2}, {1, 3}}), DegenerateInput);
  const auto n = fit_normalizer({{0, 0}, {2, 2}});
  EXPECT_THROW(n.apply({1}), Error);
}

TEST(Kernel, ClosedForms) {
  EXPECT_DOUBLE_EQ(rbf_kernel(FeatureVector{1, 2, 3}, FeatureVector{1, 2, 3}, 0.7), 1.0);
  EXPECT_NEAR(rbf_kernel(FeatureVector{0, 0}, FeatureVector{1, 0}, 1.0), 0.367879441171, 1e-12);
  EXPECT_THROW(rbf_kernel(FeatureVector{0}, FeatureVector{1, 0}, 1.0), Error);
  EXPECT_THROW(rbf_kernel(FeatureVector{0}, FeatureVector{1}, 0.0), Error);
  std::mt19937_64 rng(2);
  std::normal_distribution<double> g;
  for (int i = 0; i < 100; ++i) {
    const FeatureVector a{g(rng), g(rng)}, b{g(rng), g(rng)};
    EXPECT_EQ(rbf_kernel(a, b, 0.3), rbf_kernel(b, a, 0.3));
  }
}

TEST(Kernel, DefaultGammaOnStandardizedFeatures) {
  const std::vector<FeatureVector> z{{-1, 1}, {1, -1}};
  EXPECT_DOUBLE_EQ(default_gamma(z), 0.5);
}

TEST(Svr, ConstantTargetsInsideTube) {
  std::mt19937_64 rng(1);
  auto pr = random_problem(12, 2, rng);
  for (auto& y : pr.y) y = 0.85;
  const auto fit = svr_fit(pr.x, pr.y, {1.0, 0.1, 0.5});
  EXPECT_TRUE(fit.converged);
  EXPECT_TRUE(fit.model.support_vectors.empty());
  EXPECT_NEAR(fit.model.bias, 0.85, 1e-12);
  EXPECT_NEAR(svr_predict(fit.model, FeatureVector{5.0, -3.0}), 0.85, 1e-12);
}

TEST(Svr, SingleSample) {
  const auto fit = svr_fit({{0.3, 0.4}}, std::vector<double>{0.77}, {1.0, 0.05, 0.5});
  EXPECT_LE(std::abs(svr_predict(fit.model, FeatureVector{0.3, 0.4}) - 0.77), 0.05 + 1e-9);
}

TEST(Svr, ZeroDualModelPredictsBias) {
  SvrModel m;
  m.bias = 0.9;
  EXPECT_EQ(svr_predict(m, FeatureVector{1, 2}), 0.9);
}

TEST(Svr, FarInputFallsBackToBias) {
  std::mt19937_64 rng(3);
  const auto pr = random_problem(10, 2, rng);
  const auto fit = svr_fit(pr.x, pr.y, {1.0, 0.05, 0.5});
  EXPECT_NEAR(svr_predict(fit.model, FeatureVector{1e3, -1e3}), fit.model.bias, 1e-12);
}

TEST(Svr, MatchesQpOracleOnReferenceProblem) {
  std::mt19937_64 rng(10);
  const auto pr = random_problem(10, 2, rng);
  const auto fit = svr_fit(pr.x, pr.y, {1.0, 0.05, 0.5});
  const auto ref = qp_oracle(pr.x, pr.y, 1.0, 0.05, 0.5);
  EXPECT_NEAR(fit.objective, ref.objective, 1e-4);
  EXPECT_GE(fit.objective, ref.objective - 1e-4);
  SvrModel oracle_model{pr.x, ref.dual.coef(), ref.dual.bias, 0.5, 1.0, 0.05};
  for (const auto& f : pr.x) EXPECT_NEAR(svr_predict(fit.model, f), svr_predict(oracle_model, f), 1e-3);
}

TEST(Svr, MatchesQpOracleAcrossRandomProblems) {
  std::mt19937_64 rng(99);
  for (int trial = 0; trial < 8; ++trial) {
    std::uniform_int_distribution<std::size_t> n(2, 20);
    std::uniform_real_distribution<double> lc(-1.0, 1.5), le(-3.0, -1.0), lg(-1.0, 0.5);
    const auto pr = random_problem(n(rng), 1 + trial % 3, rng);
    const double c = std::pow(10.0, lc(rng)), eps = std::pow(10.0, le(rng)), gamma = std::pow(10.0, lg(rng));
    const auto fit = svr_fit(pr.x, pr.y, {c, eps, gamma});
    const auto ref = qp_oracle(pr.x, pr.y, c, eps, gamma);
    EXPECT_NEAR(fit.objective, ref.objective, 1e-4) << "trial " << trial;
    EXPECT_GE(fit.objective, ref.objective - 1e-4);
  }
}

TEST(Svr, BoxEqualityAndSlacknessInvariants) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 10; ++trial) {
    const auto pr = random_problem(25, 2, rng);
    const double c = trial % 2 ? 0.2 : 5.0;
    SvrParams p{c, 0.03, 0.7};
    p.tolerance = 1e-6;
    const auto fit = svr_fit(pr.x, pr.y, p);
    ASSERT_TRUE(fit.converged);
    expect_kkt(pr, fit, c, 0.03, 1e-5);
    for (double v : fit.model.dual_coef) EXPECT_LE(std::abs(v), c);
  }
}

TEST(Svr, DefaultToleranceBoundsTrainingResiduals) {
  std::mt19937_64 rng(6);
  const auto pr = random_problem(20, 2, rng);
  const auto fit = svr_fit(pr.x, pr.y, {1.0, 0.05, 0.5});
  for (std::size_t i = 0; i < pr.x.size(); ++i) {
    if (fit.dual.alpha[i] == 0.0 && fit.dual.alpha_star[i] == 0.0) {
      EXPECT_LE(std::abs(svr_predict(fit.model, pr.x[i]) - pr.y[i]), 0.05 + 1e-3);
    }
  }
}

TEST(Svr, LargeCInterpolatesWithinTube) {
  std::mt19937_64 rng(7);
  const auto pr = random_problem(12, 2, rng);
  const auto fit = svr_fit(pr.x, pr.y, {1e4, 0.01, 2.0});
  for (std::size_t i = 0; i < pr.x.size(); ++i)
    EXPECT_LE(std::abs(svr_predict(fit.model, pr.x[i]) - pr.y[i]), 0.01 + 1e-3);
}

TEST(Svr, HomogeneousInTargetsAndEpsilon) {
  std::mt19937_64 rng(12);
  const auto pr = random_problem(15, 2, rng);
  const double s = 3.0;
  SvrParams p{1.0, 0.05, 0.5};
  p.tolerance = 1e-10;
  SvrParams ps = p;
  ps.epsilon *= s;
  ps.c *= s;  // the dual scales with the targets when C does
  std::vector<double> ys;
  for (double y : pr.y) ys.push_back(s * y);
  const auto a = svr_fit(pr.x, pr.y, p);
  const auto b = svr_fit(pr.x, ys, ps);
  for (const auto& f : pr.x) EXPECT_NEAR(svr_predict(b.model, f), s * svr_predict(a.model, f), 1e-6);
}

TEST(Svr, PredictionIsLipschitz) {
  std::mt19937_64 rng(13);
  const auto pr = random_problem(15, 2, rng);
  const auto fit = svr_fit(pr.x, pr.y, {1.0, 0.05, 0.5});
  double l1 = 0.0;
  for (double v : fit.model.dual_coef) l1 += std::abs(v);
  // |d/dx exp(-g r^2)| <= sqrt(2g/e)
  const double lip = l1 * std::sqrt(2.0 * 0.5 / std::exp(1.0));
  std::normal_distribution<double> g;
  for (int i = 0; i < 200; ++i) {
    const FeatureVector a{g(rng), g(rng)};
    const FeatureVector b{a[0] + 1e-3 * g(rng), a[1] + 1e-3 * g(rng)};
    EXPECT_LE(std::abs(svr_predict(fit.model, a) - svr_predict(fit.model, b)),
              lip * std::sqrt(squared_distance(a, b)) + 1e-12);
  }
}

TEST(Svr, NonConvergenceIsFlagged) {
  std::mt19937_64 rng(14);
  const auto pr = random_problem(20, 2, rng);
  SvrParams p{10.0, 0.001, 0.5};
  p.max_passes = 0;
  const auto fit = svr_fit(pr.x, pr.y, p);
  EXPECT_FALSE(fit.converged);
  EXPECT_EQ(fit.iterations, 0);
}

TEST(Svr, RejectsBadInput) {
  EXPECT_THROW(svr_fit({}, std::vector<double>{}, {}), Error);
  EXPECT_THROW(svr_fit({{1.0}}, std::vector<double>{1.0, 2.0}, {}), Error);
  EXPECT_THROW(svr_fit({{NAN}}, std::vector<double>{1.0}, {}), Error);
  EXPECT_THROW(svr_fit({{1.0}}, std::vector<double>{1.0}, {0.0, 0.1, 0.5}), Error);
  SvrModel m{{{1.0, 2.0}}, {0.5}, 0.0, 0.5, 1.0, 0.1};
  EXPECT_THROW(svr_predict(m, FeatureVector{1.0}), Error);
}

TEST(QpOracle, ConstantTargetsGiveZeroDuals) {
  const std::vector<FeatureVector> x{{0.0}, {1.0}, {2.0}};
  const auto r = qp_oracle(x, {0.5, 0.5, 0.5}, 1.0, 0.1, 1.0);
  for (double v : r.dual.coef()) EXPECT_NEAR(v, 0.0, 1e-12);
  EXPECT_NEAR(r.dual.bias, 0.5, 0.1 + 1e-9);
}

TEST(QpOracle, SizeLimit) {
  std::vector<FeatureVector> x(31, FeatureVector{0.0});
  EXPECT_THROW(qp_oracle(x, std::vector<double>(31, 0.0), 1.0, 0.1, 1.0), Error);
}

TEST(QpOracle, ProjectionIsFeasible) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> g(0.0, 2.0);
  for (int t = 0; t < 50; ++t) {
    std::vector<double> a(7), b(7);
    for (auto& v : a) v = g(rng);
    for (auto& v : b) v = g(rng);
    detail::project_svr_feasible(a, b, 1.5);
    double s = 0;
    for (std::size_t i = 0; i < 7; ++i) {
      EXPECT_GE(a[i], 0.0);
      EXPECT_LE(a[i], 1.5);
      EXPECT_GE(b[i], 0.0);
      EXPECT_LE(b[i], 1.5);
      s += a[i] - b[i];
    }
    EXPECT_NEAR(s, 0.0, 1e-9);
  }
}
