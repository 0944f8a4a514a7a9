#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <limits>
#include <numeric>
#include <vector>

#include "elpv/error.hpp"
#include "elpv/image.hpp"

namespace elpv {

/// Axis-aligned box, top-left inclusive and bottom-right exclusive.
struct BoundingBox {
  int x0 = 0;
  int y0 = 0;
  int x1 = 0;
  int y1 = 0;

  [[nodiscard]] int width() const noexcept { return x1 - x0; }
  [[nodiscard]] int height() const noexcept { return y1 - y0; }
  [[nodiscard]] std::int64_t area() const noexcept {
    return static_cast<std::int64_t>(x1 - x0) * static_cast<std::int64_t>(y1 - y0);
  }
  [[nodiscard]] bool valid() const noexcept { return x1 > x0 && y1 > y0; }

  friend bool operator==(const BoundingBox&, const BoundingBox&) = default;
};

/// The two tunables of the detector: processing scale and minimum area
/// relative to the largest surviving region.
struct DetectionParams {
  double scale = 0.23;
  double min_area_ratio = 0.42;

  void validate() const {
    if (!(scale > 0.0 && scale <= 1.0)) throw Error("detection scale must be in (0, 1]");
    if (!(min_area_ratio > 0.0 && min_area_ratio <= 1.0)) throw Error("min_area_ratio must be in (0, 1]");
  }
};

/// Foreground flags, 1 = foreground.
using BinaryMask = Raster<std::uint8_t>;

class NoModulesFound : public DegenerateInput {
 public:
  NoModulesFound() : DegenerateInput("no modules found") {}
};

// ---------------------------------------------------------------------------
// Otsu

/// Unnormalized between-class variance n0 * n1 * (mu0 - mu1)^2 for a split
/// with class counts n0, n1 and intensity sums s0, s1.
inline double between_class_variance(std::uint64_t n0, std::uint64_t s0, std::uint64_t n1, std::uint64_t s1) {
  if (n0 == 0 || n1 == 0) return 0.0;
  const double m0 = static_cast<double>(s0) / static_cast<double>(n0);
  const double m1 = static_cast<double>(s1) / static_cast<double>(n1);
  const double d = m0 - m1;
  return static_cast<double>(n0) * static_cast<double>(n1) * d * d;
}

/// Otsu threshold over the full 16-bit histogram. Foreground is `pixel > T`.
/// When several thresholds reach the maximum, the midpoint of the first and
/// last maximizer is returned, rounding up on half.
inline std::uint16_t otsu_threshold(std::span<const std::uint16_t> pixels) {
  std::vector<std::uint64_t> hist(65536, 0);
  for (auto v : pixels) ++hist[v];
  std::uint64_t total_n = pixels.size();
  std::uint64_t total_s = 0;
  for (std::size_t v = 0; v < hist.size(); ++v) total_s += hist[v] * v;

  std::uint64_t n0 = 0;
  std::uint64_t s0 = 0;
  double best = 0.0;
  int lo = -1;
  int hi = -1;
  for (int t = 0; t < 65535; ++t) {
    n0 += hist[static_cast<std::size_t>(t)];
    s0 += hist[static_cast<std::size_t>(t)] * static_cast<std::uint64_t>(t);
    const double var = between_class_variance(n0, s0, total_n - n0, total_s - s0);
    if (var > best) {
      best = var;
      lo = hi = t;
    } else if (var == best && lo >= 0) {
      hi = t;
    }
  }
  if (lo < 0) throw DegenerateInput("otsu_threshold: image has fewer than two distinct intensities");
  return static_cast<std::uint16_t>(lo + (hi - lo + 1) / 2);
}

inline std::uint16_t otsu_threshold(const Image16& img) { return otsu_threshold(std::span<const std::uint16_t>(img.data)); }

inline BinaryMask binarize(const Image16& img, std::uint16_t threshold) {
  BinaryMask mask(img.width, img.height);
  for (std::size_t i = 0; i < img.size(); ++i) mask.data[i] = img.data[i] > threshold ? 1 : 0;
  return mask;
}

// ---------------------------------------------------------------------------
// Connected components

struct Labeling {
  Raster<std::int32_t> labels;  ///< 0 = background, components 1..count
  int count = 0;
};

namespace detail {

inline std::int32_t uf_find(std::vector<std::int32_t>& parent, std::int32_t x) {
  while (parent[static_cast<std::size_t>(x)] != x) {
    parent[static_cast<std::size_t>(x)] = parent[static_cast<std::size_t>(parent[static_cast<std::size_t>(x)])];
    x = parent[static_cast<std::size_t>(x)];
  }
  return x;
}

inline void uf_union(std::vector<std::int32_t>& parent, std::int32_t a, std::int32_t b) {
  a = uf_find(parent, a);
  b = uf_find(parent, b);
  if (a == b) return;
  if (a < b) std::swap(a, b);
  parent[static_cast<std::size_t>(a)] = b;
}

}  // namespace detail

/// 8-connected labeling. Labels follow the raster-scan order of each
/// component's first pixel.
inline Labeling connected_components(const BinaryMask& mask) {
  const int w = mask.width;
  const int h = mask.height;
  Raster<std::int32_t> prov(w, h, 0);
  std::vector<std::int32_t> parent{0};

  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if (!mask.at(x, y)) continue;
      std::int32_t label = 0;
      const std::array<std::array<int, 2>, 4> nbrs{{{-1, 0}, {-1, -1}, {0, -1}, {1, -1}}};
      for (const auto& [dx, dy] : nbrs) {
        const int nx = x + dx;
        const int ny = y + dy;
        if (nx < 0 || ny < 0 || nx >= w) continue;
        const std::int32_t l = prov.at(nx, ny);
        if (l == 0) continue;
        if (label == 0)
          label = l;
        else
          detail::uf_union(parent, label, l);
      }
      if (label == 0) {
        label = static_cast<std::int32_t>(parent.size());
        parent.push_back(label);
      }
      prov.at(x, y) = label;
    }
  }

  std::vector<std::int32_t> final_label(parent.size(), 0);
  Labeling out{Raster<std::int32_t>(w, h, 0), 0};
  for (std::size_t i = 0; i < prov.size(); ++i) {
    if (prov.data[i] == 0) continue;
    const auto root = static_cast<std::size_t>(detail::uf_find(parent, prov.data[i]));
    if (final_label[root] == 0) final_label[root] = ++out.count;
    out.labels.data[i] = final_label[root];
  }
  return out;
}

/// Tight box around each labeled component, ordered by label.
inline std::vector<BoundingBox> propose_regions(const Labeling& lab) {
  std::vector<BoundingBox> boxes(static_cast<std::size_t>(lab.count),
                                 BoundingBox{std::numeric_limits<int>::max(), std::numeric_limits<int>::max(), 0, 0});
  for (int y = 0; y < lab.labels.height; ++y) {
    for (int x = 0; x < lab.labels.width; ++x) {
      const auto l = lab.labels.at(x, y);
      if (l == 0) continue;
      auto& b = boxes[static_cast<std::size_t>(l - 1)];
      b.x0 = std::min(b.x0, x);
      b.y0 = std::min(b.y0, y);
      b.x1 = std::max(b.x1, x + 1);
      b.y1 = std::max(b.y1, y + 1);
    }
  }
  return boxes;
}

inline bool touches_border(const BoundingBox& b, int width, int height) noexcept {
  return b.x0 <= 0 || b.y0 <= 0 || b.x1 >= width || b.y1 >= height;
}

/// Rejects regions touching the frame border, then regions smaller than
/// min_area_ratio times the largest remaining region. Order is preserved.
inline std::vector<BoundingBox> filter_regions(const std::vector<BoundingBox>& boxes, int width, int height,
                                               const DetectionParams& params) {
  std::vector<BoundingBox> inside;
  for (const auto& b : boxes)
    if (!touches_border(b, width, height)) inside.push_back(b);
  if (inside.empty()) return inside;

  std::int64_t a_max = 0;
  for (const auto& b : inside) a_max = std::max(a_max, b.area());
  const double min_area = params.min_area_ratio * static_cast<double>(a_max);

  std::vector<BoundingBox> kept;
  for (const auto& b : inside)
    if (static_cast<double>(b.area()) >= min_area) kept.push_back(b);
  return kept;
}

/// Maps a box from a downscaled frame back to the source frame. Rounds
/// outward so the result covers every source pixel of the footprint.
inline BoundingBox upscale_box(const BoundingBox& b, int small_w, int small_h, int full_w, int full_h) {
  auto lo = [](int v, int n_small, int n_full) {
    return static_cast<int>(static_cast<std::int64_t>(v) * n_full / n_small);
  };
  auto hi = [](int v, int n_small, int n_full) {
    const std::int64_t num = static_cast<std::int64_t>(v) * n_full;
    return static_cast<int>((num + n_small - 1) / n_small);
  };
  return {std::clamp(lo(b.x0, small_w, full_w), 0, full_w), std::clamp(lo(b.y0, small_h, full_h), 0, full_h),
          std::clamp(hi(b.x1, small_w, full_w), 0, full_w), std::clamp(hi(b.y1, small_h, full_h), 0, full_h)};
}

/// Intermediate products of one detection run, kept for inspection and plots.
struct DetectionTrace {
  Image16 small;
  std::uint16_t threshold = 0;
  Labeling labeling;
  std::vector<BoundingBox> proposals;  ///< downscaled frame
  std::vector<BoundingBox> accepted;   ///< downscaled frame
  std::vector<BoundingBox> boxes;      ///< original frame
};

/// Downscale, Otsu binarization, 8-connected labeling, region proposal and
/// region constraints. Boxes are returned in the original frame.
inline DetectionTrace detect_modules_traced(const Image16& img, const DetectionParams& params) {
  params.validate();
  DetectionTrace tr;
  tr.small = downscale(img, params.scale);
  try {
    tr.threshold = otsu_threshold(tr.small);
  } catch (const DegenerateInput&) {
    throw NoModulesFound();
  }
  tr.labeling = connected_components(binarize(tr.small, tr.threshold));
  tr.proposals = propose_regions(tr.labeling);
  tr.accepted = filter_regions(tr.proposals, tr.small.width, tr.small.height, params);
  for (const auto& b : tr.accepted) {
    const auto big = upscale_box(b, tr.small.width, tr.small.height, img.width, img.height);
    if (std::find(tr.boxes.begin(), tr.boxes.end(), big) == tr.boxes.end()) tr.boxes.push_back(big);
  }
  return tr;
}

inline std::vector<BoundingBox> detect_modules(const Image16& img, const DetectionParams& params) {
  return detect_modules_traced(img, params).boxes;
}

}  // namespace elpv
