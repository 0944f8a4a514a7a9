#pragma once

#include <cstdint>
#include <vector>

#include "elpv/detect.hpp"
#include "elpv/image.hpp"
#include "elpv/metrics.hpp"
#include "elpv/search.hpp"

namespace elpv {

/// A measurement with its ground-truth module boxes.
struct AnnotatedImage {
  Image16 image;
  std::vector<BoundingBox> boxes;
};

/// Runs the detector on every image and pools the match counts.
/// An image without any detectable module contributes zero predictions.
inline MatchCounts score_detection(const std::vector<AnnotatedImage>& corpus, const DetectionParams& params,
                                   double tau, std::vector<std::vector<BoundingBox>>* detections = nullptr) {
  MatchCounts total;
  if (detections) detections->clear();
  for (const auto& item : corpus) {
    std::vector<BoundingBox> pred;
    try {
      pred = detect_modules(item.image, params);
    } catch (const NoModulesFound&) {
    }
    total += match_detections(pred, item.boxes, tau).counts;
    if (detections) detections->push_back(std::move(pred));
  }
  return total;
}

struct TuneOptions {
  std::size_t budget = 30;
  double tau = 0.9;
  std::uint64_t seed = 0;
  int jobs = 1;
  ParamRange scale{"scale", 0.05, 0.5, Scale::linear};
  ParamRange min_area_ratio{"min_area_ratio", 0.1, 0.9, Scale::linear};
};

struct TuneResult {
  DetectionParams params;
  double f1 = 0.0;
  SearchResult search;
};

/// Random search over (scale, min_area_ratio) maximizing corpus-level F1.
inline TuneResult tune_detection(const std::vector<AnnotatedImage>& corpus, const TuneOptions& opt = {}) {
  if (corpus.empty()) throw Error("tune_detection: empty corpus");
  auto objective = [&](const ParamSet& p) {
    const DetectionParams dp{p.at("scale"), p.at("min_area_ratio")};
    return score_detection(corpus, dp, opt.tau).f1();
  };
  TuneResult r;
  r.search = random_search(objective, {opt.scale, opt.min_area_ratio}, {opt.budget, opt.seed, opt.jobs});
  r.params = {r.search.best.params.at("scale"), r.search.best.params.at("min_area_ratio")};
  r.f1 = r.search.best.score;
  return r;
}

}  // namespace elpv
