#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"

#include "elpv/error.hpp"
#include "elpv/image.hpp"
#include "elpv/manifest.hpp"
#include "elpv/synth.hpp"

namespace elpv {

/// Labeled synthetic corpus of rectified modules. Labels follow
/// p_rel = intercept - slope * inactive_fraction + N(0, label_noise).
struct DatasetSpec {
  std::size_t samples = 200;
  int max_per_instance = 3;  ///< series of measurements of one module
  double max_fraction = 0.4;
  double slope = 1.0;
  double intercept = 1.0;
  double label_noise = 0.01;
  bool mixed_subsets = false;  ///< cycle module type, current level and setting per instance
  std::map<std::string, double> p_nom{{"T1", 230.0}, {"T2", 250.0}, {"T3", 270.0}};
  ModuleSpec module;
  std::uint64_t seed = 1;
};

inline nlohmann::json to_json(const DatasetSpec& s) {
  return {{"samples", s.samples},
          {"max_per_instance", s.max_per_instance},
          {"max_fraction", s.max_fraction},
          {"slope", s.slope},
          {"intercept", s.intercept},
          {"label_noise", s.label_noise},
          {"mixed_subsets", s.mixed_subsets},
          {"p_nom", s.p_nom},
          {"cell_px", s.module.cell_px},
          {"gap_px", s.module.gap_px},
          {"pixel_noise", s.module.noise_sigma},
          {"seed", s.seed}};
}

struct SynthSample {
  ManifestEntry entry;
  SynthModule module;
};

/// Generates the corpus in memory. Samples of one instance share a module
/// type and accumulate inactive area from one measurement to the next.
inline std::vector<SynthSample> synth_dataset(const DatasetSpec& spec) {
  if (spec.samples == 0) throw Error("synth_dataset: need at least one sample");
  if (spec.max_per_instance < 1) throw Error("synth_dataset: max_per_instance must be >= 1");
  if (!(spec.max_fraction >= 0.0 && spec.max_fraction <= 1.0)) throw Error("synth_dataset: max_fraction must be in [0, 1]");
  if (!(spec.label_noise >= 0.0)) throw Error("synth_dataset: label_noise must be >= 0");
  static const char* kTypes[] = {"T1", "T2", "T3"};
  for (const char* t : kTypes)
    if (spec.p_nom.count(t) == 0 || !(spec.p_nom.at(t) > 0.0)) throw Error(std::string("synth_dataset: no p_nom for ") + t);

  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_int_distribution<int> series(1, spec.max_per_instance);
  std::normal_distribution<double> noise(0.0, spec.label_noise > 0.0 ? spec.label_noise : 1.0);

  std::vector<SynthSample> out;
  int instance = 0;
  while (out.size() < spec.samples) {
    const int n = std::min<int>(series(rng), static_cast<int>(spec.samples - out.size()));
    const int variant = spec.mixed_subsets ? instance : 0;
    const std::string type = kTypes[variant % 3];
    const std::string current = (variant / 3) % 2 ? "low" : "high";
    const std::string setting = (variant / 6) % 2 ? "onsite" : "indoor";
    double fraction = spec.max_fraction * unit(rng) * (n > 1 ? 0.5 : 1.0);
    for (int k = 0; k < n; ++k) {
      if (k > 0) fraction = std::min(spec.max_fraction, fraction + spec.max_fraction * 0.5 * unit(rng) / n);
      ModuleSpec ms = spec.module;
      ms.inactive_fraction = fraction;
      ms.seed = rng();
      SynthSample s{ManifestEntry{}, synth_module(ms)};
      auto& e = s.entry;
      e.sample_id = "s" + std::to_string(out.size());
      e.instance_id = "m" + std::to_string(instance);
      e.image_path = "images/" + e.sample_id + ".pgm";
      e.module_type = type;
      e.current_level = current;
      e.setting = setting;
      e.rows = ms.rows;
      e.cols = ms.cols;
      e.p_nom = spec.p_nom.at(type);
      const double eps = spec.label_noise > 0.0 ? noise(rng) : 0.0;
      const double p_rel = std::clamp(spec.intercept - spec.slope * s.module.inactive_fraction + eps, 0.0, 1.2);
      e.p_mpp = p_rel * e.p_nom;
      out.push_back(std::move(s));
    }
    ++instance;
  }
  return out;
}

/// Writes images under dir/images and the manifest to dir/manifest.jsonl.
inline std::vector<ManifestEntry> write_synth_dataset(const std::string& dir, const DatasetSpec& spec) {
  const auto samples = synth_dataset(spec);
  std::filesystem::create_directories(std::filesystem::path(dir) / "images");
  std::vector<ManifestEntry> entries;
  for (const auto& s : samples) {
    save_pgm16(s.module.image, (std::filesystem::path(dir) / s.entry.image_path).string());
    entries.push_back(s.entry);
  }
  save_manifest(entries, (std::filesystem::path(dir) / "manifest.jsonl").string());
  return entries;
}

}  // namespace elpv
