#include <gtest/gtest.h>

#include <atomic>
#include <cmath>
#include <stdexcept>

#include "elpv/parallel.hpp"
#include "elpv/search.hpp"

using namespace elpv;

TEST(RandomSearch, FindsQuadraticOptimum) {
  const std::vector<ParamRange> space{{"x", 0.0, 10.0}};
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto r = random_search([](const ParamSet& p) { return -std::pow(p.at("x") - 3.0, 2); }, space, {1000, seed});
    EXPECT_NEAR(r.best.params.at("x"), 3.0, 0.2) << "seed " << seed;
    EXPECT_EQ(r.trials.size(), 1000u);
  }
}

TEST(RandomSearch, BudgetOneReturnsTheSample) {
  const std::vector<ParamRange> space{{"x", 0.0, 1.0}};
  const auto r = random_search([](const ParamSet& p) { return p.at("x"); }, space, {1, 3});
  ASSERT_EQ(r.trials.size(), 1u);
  EXPECT_EQ(r.best.params, r.trials[0].params);
  EXPECT_EQ(r.best.score, r.trials[0].params.at("x"));
}

TEST(RandomSearch, SameSeedSameTrialsRegardlessOfJobs) {
  const std::vector<ParamRange> space{{"c", 1e-2, 1e3, Scale::log}, {"t", 0.1, 0.9}};
  auto f = [](const ParamSet& p) { return std::sin(p.at("c")) + p.at("t"); };
  const auto a = random_search(f, space, {50, 9, 1});
  const auto b = random_search(f, space, {50, 9, 4});
  const auto c = random_search(f, space, {50, 10, 1});
  for (std::size_t i = 0; i < 50; ++i) {
    EXPECT_EQ(a.trials[i].index, i);
    EXPECT_EQ(a.trials[i].params, b.trials[i].params);
    EXPECT_EQ(a.trials[i].score, b.trials[i].score);
  }
  EXPECT_EQ(a.best.index, b.best.index);
  EXPECT_NE(a.trials[0].params, c.trials[0].params);
}

TEST(RandomSearch, LogScaleStaysInRangeAndCoversDecades) {
  const std::vector<ParamRange> space{{"c", 1e-2, 1e3, Scale::log}};
  const auto r = random_search([](const ParamSet&) { return 0.0; }, space, {2000, 1});
  int below_one = 0;
  for (const auto& t : r.trials) {
    const double c = t.params.at("c");
    EXPECT_GE(c, 1e-2);
    EXPECT_LE(c, 1e3);
    below_one += c < 1.0;
  }
  // log-uniform: P(c < 1) = 2/5
  EXPECT_NEAR(below_one / 2000.0, 0.4, 0.05);
}

TEST(RandomSearch, FailingTrialsScoreMinusInfinity) {
  const std::vector<ParamRange> space{{"x", 0.0, 1.0}};
  const auto r = random_search(
      [](const ParamSet& p) {
        if (p.at("x") < 0.5) throw std::runtime_error("boom");
        return p.at("x");
      },
      space, {40, 2});
  int failed = 0;
  for (const auto& t : r.trials)
    if (!t.error.empty()) {
      ++failed;
      EXPECT_EQ(t.score, -std::numeric_limits<double>::infinity());
      EXPECT_EQ(t.error, "boom");
    }
  EXPECT_GT(failed, 0);
  EXPECT_GE(r.best.params.at("x"), 0.5);

  const auto nan = random_search([](const ParamSet&) { return std::nan(""); }, space, {3, 2});
  EXPECT_EQ(nan.best.score, -std::numeric_limits<double>::infinity());
}

TEST(RandomSearch, TiesKeepTheFirstTrial) {
  const std::vector<ParamRange> space{{"x", 0.0, 1.0}};
  const auto r = random_search([](const ParamSet&) { return 1.0; }, space, {10, 0});
  EXPECT_EQ(r.best.index, 0u);
}

TEST(RandomSearch, Errors) {
  auto f = [](const ParamSet&) { return 0.0; };
  EXPECT_THROW(random_search(f, {{"x", 0.0, 1.0}}, {0, 0}), Error);
  EXPECT_THROW(random_search(f, {}, {5, 0}), Error);
  EXPECT_THROW(random_search(f, {{"x", 1.0, 0.0}}, {5, 0}), Error);
  EXPECT_THROW(random_search(f, {{"x", 0.0, 1.0, Scale::log}}, {5, 0}), Error);
}

TEST(ParallelFor, VisitsEveryIndexOnceAndRethrows) {
  for (int jobs : {1, 3, 8}) {
    std::vector<std::atomic<int>> hits(97);
    parallel_for(hits.size(), jobs, [&](std::size_t i) { ++hits[i]; });
    for (auto& h : hits) EXPECT_EQ(h.load(), 1);
    EXPECT_THROW(parallel_for(10, jobs,
                              [](std::size_t i) {
                                if (i == 7) throw Error("bad index");
                              }),
                 Error);
  }
}
