#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "elpv/error.hpp"
#include "elpv/parallel.hpp"

namespace elpv {

enum class Scale { linear, log };

struct ParamRange {
  std::string name;
  double lo = 0.0;
  double hi = 1.0;
  Scale scale = Scale::linear;
};

using ParamSet = std::map<std::string, double>;

struct Trial {
  std::size_t index = 0;
  ParamSet params;
  double score = -std::numeric_limits<double>::infinity();
  std::string error;  ///< non-empty when the objective threw
};

struct SearchResult {
  Trial best;
  std::vector<Trial> trials;  ///< ordered by trial index
};

struct SearchOptions {
  std::size_t budget = 30;
  std::uint64_t seed = 0;
  int jobs = 1;  ///< > 1 only for reentrant objectives
};

/// Draws `budget` configurations up front from one seeded stream, evaluates
/// them and returns the highest score (first on ties). A throwing objective
/// scores -inf for that trial and the search goes on.
inline SearchResult random_search(const std::function<double(const ParamSet&)>& objective,
                                  const std::vector<ParamRange>& space, const SearchOptions& opt) {
  if (opt.budget < 1) throw Error("random_search: budget must be >= 1");
  if (space.empty()) throw Error("random_search: empty search space");
  for (const auto& r : space) {
    if (!(r.hi >= r.lo)) throw Error("random_search: bad range for " + r.name);
    if (r.scale == Scale::log && !(r.lo > 0.0)) throw Error("random_search: log range must be positive for " + r.name);
  }

  std::mt19937_64 rng(opt.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  SearchResult res;
  res.trials.resize(opt.budget);
  for (std::size_t t = 0; t < opt.budget; ++t) {
    res.trials[t].index = t;
    for (const auto& r : space) {
      const double u = unit(rng);
      res.trials[t].params[r.name] = r.scale == Scale::log
                                         ? std::exp(std::log(r.lo) + u * (std::log(r.hi) - std::log(r.lo)))
                                         : r.lo + u * (r.hi - r.lo);
    }
  }

  parallel_for(opt.budget, opt.jobs, [&](std::size_t t) {
    auto& trial = res.trials[t];
    try {
      trial.score = objective(trial.params);
      if (std::isnan(trial.score)) trial.score = -std::numeric_limits<double>::infinity();
    } catch (const std::exception& e) {
      trial.score = -std::numeric_limits<double>::infinity();
      trial.error = e.what();
    }
  });

  res.best = res.trials.front();
  for (const auto& t : res.trials)
    if (t.score > res.best.score) res.best = t;
  return res;
}

}  // namespace elpv
