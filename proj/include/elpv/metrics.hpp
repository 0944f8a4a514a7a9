#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include "elpv/detect.hpp"
#include "elpv/error.hpp"

namespace elpv {

namespace detail {
inline void check_pair(std::span<const double> a, std::span<const double> b, const char* what) {
  if (a.size() != b.size()) throw Error(std::string(what) + ": length mismatch");
  if (a.empty()) throw Error(std::string(what) + ": empty input");
}
}  // namespace detail

/// (1/N) sum |p - p_hat|
inline double mae(std::span<const double> truth, std::span<const double> pred) {
  detail::check_pair(truth, pred, "mae");
  double s = 0.0;
  for (std::size_t i = 0; i < truth.size(); ++i) s += std::abs(truth[i] - pred[i]);
  return s / static_cast<double>(truth.size());
}

enum class RmseForm {
  printed,       ///< (1/N) sqrt(sum e^2), the 1/N outside the root
  conventional,  ///< sqrt((1/N) sum e^2)
};

inline double rmse(std::span<const double> truth, std::span<const double> pred, RmseForm form = RmseForm::printed) {
  detail::check_pair(truth, pred, "rmse");
  double s = 0.0;
  for (std::size_t i = 0; i < truth.size(); ++i) s += (truth[i] - pred[i]) * (truth[i] - pred[i]);
  const auto n = static_cast<double>(truth.size());
  return form == RmseForm::printed ? std::sqrt(s) / n : std::sqrt(s / n);
}

/// Sample Pearson correlation.
inline double pearson_r(std::span<const double> a, std::span<const double> b) {
  detail::check_pair(a, b, "pearson_r");
  if (a.size() < 2) throw Error("pearson_r: need at least two samples");
  const auto n = static_cast<double>(a.size());
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i] / n;
    mb += b[i] / n;
  }
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (!(saa > 0.0) || !(sbb > 0.0)) throw DegenerateInput("pearson_r: constant input");
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

// ---------------------------------------------------------------------------
// Detection scoring

inline double iou(const BoundingBox& a, const BoundingBox& b) {
  const int ix = std::max(0, std::min(a.x1, b.x1) - std::max(a.x0, b.x0));
  const int iy = std::max(0, std::min(a.y1, b.y1) - std::max(a.y0, b.y0));
  const double inter = static_cast<double>(ix) * static_cast<double>(iy);
  const double uni = static_cast<double>(a.area()) + static_cast<double>(b.area()) - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

struct MatchCounts {
  std::size_t matched = 0;
  std::size_t predicted = 0;
  std::size_t ground_truth = 0;

  [[nodiscard]] double precision() const noexcept {
    return predicted ? static_cast<double>(matched) / static_cast<double>(predicted) : 0.0;
  }
  [[nodiscard]] double recall() const noexcept {
    return ground_truth ? static_cast<double>(matched) / static_cast<double>(ground_truth) : 0.0;
  }
  [[nodiscard]] double f1() const noexcept {
    const double p = precision(), r = recall();
    return p + r > 0.0 ? 2.0 * p * r / (p + r) : 0.0;
  }
  MatchCounts& operator+=(const MatchCounts& o) noexcept {
    matched += o.matched;
    predicted += o.predicted;
    ground_truth += o.ground_truth;
    return *this;
  }
};

struct MatchResult {
  MatchCounts counts;
  std::vector<std::pair<std::size_t, std::size_t>> pairs;  ///< (pred index, gt index)

  [[nodiscard]] double precision() const noexcept { return counts.precision(); }
  [[nodiscard]] double recall() const noexcept { return counts.recall(); }
  [[nodiscard]] double f1() const noexcept { return counts.f1(); }
};

/// One-to-one greedy matching in descending IoU order; a pair counts when
/// its IoU is at least tau.
inline MatchResult match_detections(const std::vector<BoundingBox>& pred, const std::vector<BoundingBox>& gt,
                                    double tau) {
  if (!(tau > 0.0 && tau <= 1.0)) throw Error("match_detections: tau must be in (0, 1]");
  std::vector<std::tuple<double, std::size_t, std::size_t>> cand;
  for (std::size_t i = 0; i < pred.size(); ++i)
    for (std::size_t j = 0; j < gt.size(); ++j) {
      const double v = iou(pred[i], gt[j]);
      if (v >= tau) cand.emplace_back(v, i, j);
    }
  std::stable_sort(cand.begin(), cand.end(), [](const auto& a, const auto& b) { return std::get<0>(a) > std::get<0>(b); });
  std::vector<bool> used_p(pred.size(), false), used_g(gt.size(), false);
  MatchResult r;
  for (const auto& [v, i, j] : cand) {
    if (used_p[i] || used_g[j]) continue;
    used_p[i] = used_g[j] = true;
    r.pairs.emplace_back(i, j);
  }
  r.counts = {r.pairs.size(), pred.size(), gt.size()};
  return r;
}

struct PrPoint {
  double tau = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

/// Precision and recall at each IoU threshold, pooled over all images.
inline std::vector<PrPoint> pr_curve(const std::vector<std::vector<BoundingBox>>& pred,
                                     const std::vector<std::vector<BoundingBox>>& gt, std::span<const double> taus) {
  if (pred.size() != gt.size()) throw Error("pr_curve: image count mismatch");
  if (!std::is_sorted(taus.begin(), taus.end())) throw Error("pr_curve: taus must be sorted ascending");
  std::vector<PrPoint> out;
  for (double tau : taus) {
    MatchCounts total;
    for (std::size_t k = 0; k < pred.size(); ++k) total += match_detections(pred[k], gt[k], tau).counts;
    out.push_back({tau, total.precision(), total.recall(), total.f1()});
  }
  return out;
}

inline std::vector<PrPoint> pr_curve(const std::vector<BoundingBox>& pred, const std::vector<BoundingBox>& gt,
                                     std::span<const double> taus) {
  return pr_curve(std::vector<std::vector<BoundingBox>>{pred}, std::vector<std::vector<BoundingBox>>{gt}, taus);
}

}  // namespace elpv
