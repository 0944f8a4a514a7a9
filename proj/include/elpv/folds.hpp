#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <random>
#include <string>
#include <tuple>
#include <vector>

#include "json.hpp"

#include "elpv/error.hpp"
#include "elpv/manifest.hpp"

namespace elpv {

/// sample_id -> fold index in [0, k).
struct FoldAssignment {
  std::uint64_t seed = 0;
  int k = 5;
  std::map<std::string, int> assignment;

  [[nodiscard]] int fold_of(const std::string& sample_id) const {
    auto it = assignment.find(sample_id);
    if (it == assignment.end()) throw Error("sample not in fold assignment: " + sample_id);
    return it->second;
  }
};

inline void to_json(nlohmann::json& j, const FoldAssignment& f) {
  j = nlohmann::json{{"seed", f.seed}, {"k", f.k}, {"assignment", f.assignment}};
}

inline void from_json(const nlohmann::json& j, FoldAssignment& f) {
  f.seed = j.at("seed").get<std::uint64_t>();
  f.k = j.at("k").get<int>();
  f.assignment = j.at("assignment").get<std::map<std::string, int>>();
}

/// Label binning used for stratification.
struct Binning {
  int bins = 20;
  double width = 0.05;

  [[nodiscard]] int bin_of(double p_rel) const {
    return std::clamp(static_cast<int>(std::floor(p_rel / width)), 0, bins - 1);
  }
};

/// All samples of one physical module.
struct InstanceGroup {
  std::string instance_id;
  std::vector<std::size_t> members;  ///< indices into the manifest
  int bin = 0;
};

/// Groups labeled entries by instance (in order of first appearance) and
/// bins each instance by the mean p_rel of its samples.
inline std::vector<InstanceGroup> group_instances(const std::vector<ManifestEntry>& entries, const Binning& binning) {
  std::vector<InstanceGroup> groups;
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    if (!entries[i].labeled()) throw Error("sample " + entries[i].sample_id + " is unlabeled");
    auto [it, inserted] = index.try_emplace(entries[i].instance_id, groups.size());
    if (inserted) groups.push_back({entries[i].instance_id, {}, 0});
    groups[it->second].members.push_back(i);
  }
  for (auto& g : groups) {
    double s = 0.0;
    for (auto m : g.members) s += entries[m].p_rel();
    g.bin = binning.bin_of(s / static_cast<double>(g.members.size()));
  }
  return groups;
}

/// Buckets of instance indices per label bin. Empty bins are dropped and
/// bins holding fewer than `min_instances` instances are folded into the
/// nearest remaining bin (the lower one on ties).
inline std::vector<std::vector<std::size_t>> merged_bins(const std::vector<InstanceGroup>& groups,
                                                         std::size_t min_instances) {
  std::map<int, std::vector<std::size_t>> buckets;
  for (std::size_t g = 0; g < groups.size(); ++g) buckets[groups[g].bin].push_back(g);
  for (;;) {
    if (buckets.size() <= 1) break;
    auto small = std::find_if(buckets.begin(), buckets.end(), [&](const auto& b) { return b.second.size() < min_instances; });
    if (small == buckets.end()) break;
    auto best = buckets.end();
    int best_dist = 0;
    for (auto it = buckets.begin(); it != buckets.end(); ++it) {
      if (it == small) continue;
      const int dist = std::abs(it->first - small->first);
      if (best == buckets.end() || dist < best_dist) {
        best = it;
        best_dist = dist;
      }
    }
    best->second.insert(best->second.end(), small->second.begin(), small->second.end());
    std::sort(best->second.begin(), best->second.end());
    buckets.erase(small);
  }
  std::vector<std::vector<std::size_t>> out;
  for (auto& [bin, members] : buckets) out.push_back(std::move(members));
  return out;
}

/// Stratified, instance-disjoint k-fold assignment. Within every label bin,
/// instances are placed largest first into the fold holding the fewest
/// samples of that bin (ties: fewest samples overall, then a seeded order).
inline FoldAssignment stratified_group_folds(const std::vector<ManifestEntry>& entries, int k,
                                             const Binning& binning = {}, std::uint64_t seed = 0) {
  if (k < 2) throw Error("stratified_group_folds: k must be >= 2");
  const auto groups = group_instances(entries, binning);
  if (groups.size() < static_cast<std::size_t>(k))
    throw Error("stratified_group_folds: fewer instances (" + std::to_string(groups.size()) + ") than folds (" +
                std::to_string(k) + ")");

  std::mt19937_64 rng(seed);
  std::vector<int> rank(static_cast<std::size_t>(k));
  std::iota(rank.begin(), rank.end(), 0);
  std::shuffle(rank.begin(), rank.end(), rng);

  std::vector<std::size_t> total(static_cast<std::size_t>(k), 0);
  FoldAssignment out{seed, k, {}};
  for (auto bucket : merged_bins(groups, static_cast<std::size_t>(k))) {
    std::shuffle(bucket.begin(), bucket.end(), rng);
    std::stable_sort(bucket.begin(), bucket.end(),
                     [&](std::size_t a, std::size_t b) { return groups[a].members.size() > groups[b].members.size(); });
    std::vector<std::size_t> in_bin(static_cast<std::size_t>(k), 0);
    for (auto g : bucket) {
      std::size_t best = 0;
      for (std::size_t f = 1; f < static_cast<std::size_t>(k); ++f) {
        const auto key = std::tuple(in_bin[f], total[f], rank[f]);
        const auto best_key = std::tuple(in_bin[best], total[best], rank[best]);
        if (key < best_key) best = f;
      }
      const auto size = groups[g].members.size();
      in_bin[best] += size;
      total[best] += size;
      for (auto m : groups[g].members) out.assignment[entries[m].sample_id] = static_cast<int>(best);
    }
  }
  return out;
}

/// Stratified, instance-disjoint train/validation split. The validation
/// target round(val_fraction * N) is apportioned over label bins by largest
/// remainder; each bin then fills its share first-fit from a seeded order.
inline std::pair<std::vector<ManifestEntry>, std::vector<ManifestEntry>> train_val_split(
    const std::vector<ManifestEntry>& entries, double val_fraction, std::uint64_t seed, const Binning& binning = {}) {
  if (!(val_fraction > 0.0 && val_fraction < 1.0)) throw Error("train_val_split: val_fraction must be in (0, 1)");
  const auto groups = group_instances(entries, binning);
  if (groups.size() < 2) throw Error("train_val_split: too few instances");

  auto buckets = merged_bins(groups, 1);
  std::vector<std::size_t> bucket_samples(buckets.size(), 0);
  for (std::size_t b = 0; b < buckets.size(); ++b)
    for (auto g : buckets[b]) bucket_samples[b] += groups[g].members.size();

  const auto target_total = static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(entries.size())));
  std::vector<std::size_t> target(buckets.size());
  std::vector<std::pair<double, std::size_t>> remainders;
  std::size_t assigned = 0;
  for (std::size_t b = 0; b < buckets.size(); ++b) {
    const double quota = val_fraction * static_cast<double>(bucket_samples[b]);
    target[b] = static_cast<std::size_t>(std::floor(quota));
    assigned += target[b];
    remainders.emplace_back(quota - std::floor(quota), b);
  }
  std::stable_sort(remainders.begin(), remainders.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t r = 0; assigned < target_total && r < remainders.size(); ++r, ++assigned) ++target[remainders[r].second];

  std::mt19937_64 rng(seed);
  std::vector<bool> in_val(groups.size(), false);
  std::size_t val_count = 0;
  for (std::size_t b = 0; b < buckets.size(); ++b) {
    auto order = buckets[b];
    std::shuffle(order.begin(), order.end(), rng);
    std::size_t filled = 0;
    for (auto g : order) {
      const auto size = groups[g].members.size();
      if (filled + size <= target[b]) {
        in_val[g] = true;
        filled += size;
      }
    }
    val_count += filled;
  }
  if (val_count == 0) {
    // Every instance overshoots its bin's share; take the smallest one.
    auto g = std::min_element(groups.begin(), groups.end(),
                              [](const auto& a, const auto& b) { return a.members.size() < b.members.size(); }) -
             groups.begin();
    in_val[static_cast<std::size_t>(g)] = true;
  }

  std::pair<std::vector<ManifestEntry>, std::vector<ManifestEntry>> out;
  std::vector<bool> sample_val(entries.size(), false);
  for (std::size_t g = 0; g < groups.size(); ++g)
    for (auto m : groups[g].members) sample_val[m] = in_val[g];
  for (std::size_t i = 0; i < entries.size(); ++i) (sample_val[i] ? out.second : out.first).push_back(entries[i]);
  if (out.first.empty() || out.second.empty()) throw Error("train_val_split: too few instances for both sides");
  return out;
}

}  // namespace elpv
