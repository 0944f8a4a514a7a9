#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "elpv/detect.hpp"
#include "elpv/error.hpp"
#include "elpv/image.hpp"
#include "elpv/rectify.hpp"

namespace elpv {

// ---------------------------------------------------------------------------
// Relative and absolute power

/// Relative power estimate tied to the module's nominal power. The absolute
/// value is derived on demand, so the relative value is stored untouched.
class PowerEstimate {
 public:
  PowerEstimate(double p_rel_hat, double p_nom) : p_rel_hat_(p_rel_hat), p_nom_(p_nom) {
    if (!(p_nom > 0.0)) throw Error("nominal power must be positive");
  }
  [[nodiscard]] double p_rel_hat() const noexcept { return p_rel_hat_; }
  [[nodiscard]] double p_nom() const noexcept { return p_nom_; }
  [[nodiscard]] double p_mpp_hat() const noexcept { return p_rel_hat_ * p_nom_; }

 private:
  double p_rel_hat_;
  double p_nom_;
};

/// P_mpp = p_rel * P_nom
inline double to_watts(double p_rel_hat, double p_nom) {
  if (!(p_nom > 0.0)) throw Error("to_watts: nominal power must be positive");
  return p_rel_hat * p_nom;
}

// ---------------------------------------------------------------------------
// Inactive area

struct OtsuThreshold {};
struct FixedThreshold {
  std::uint16_t value = 0;  ///< pixels <= value are inactive
};
using InactiveMethod = std::variant<OtsuThreshold, FixedThreshold>;

/// Fraction of pixels at or below the threshold.
inline double inactive_fraction(const Image16& img, const InactiveMethod& method = OtsuThreshold{}) {
  const std::uint16_t t = std::holds_alternative<FixedThreshold>(method) ? std::get<FixedThreshold>(method).value
                                                                          : otsu_threshold(img);
  std::size_t dark = 0;
  for (auto v : img.data) dark += v <= t ? 1 : 0;
  return static_cast<double>(dark) / static_cast<double>(img.size());
}

inline double inactive_fraction(const ModuleImage& m, const InactiveMethod& method = OtsuThreshold{}) {
  return inactive_fraction(m.image, method);
}

/// p_rel ~ intercept - slope * inactive_fraction
struct AreaModel {
  double slope = 1.0;
  double intercept = 1.0;
};

inline constexpr double kMaxRelativePower = 1.1;

/// Least-squares line through (fraction, p_rel). With fix_intercept the
/// intercept is held at 1. A negative slope is clamped to 0.
inline AreaModel fit_area_model(std::span<const double> fractions, std::span<const double> p_rel,
                                bool fix_intercept = false) {
  if (fractions.size() != p_rel.size()) throw Error("fit_area_model: length mismatch");
  if (fractions.size() < 2) throw Error("fit_area_model: need at least two samples");
  const auto n = static_cast<double>(fractions.size());
  double mf = 0, mp = 0;
  for (std::size_t i = 0; i < fractions.size(); ++i) {
    mf += fractions[i] / n;
    mp += p_rel[i] / n;
  }
  double sff = 0, sfp = 0;
  for (std::size_t i = 0; i < fractions.size(); ++i) {
    sff += (fractions[i] - mf) * (fractions[i] - mf);
    sfp += (fractions[i] - mf) * (p_rel[i] - mp);
  }
  if (!(sff > 0.0)) throw DegenerateInput("fit_area_model: constant inactive fractions (singular fit)");

  AreaModel m;
  if (fix_intercept) {
    // minimize sum (1 - k f - p)^2  =>  k = sum f (1 - p) / sum f^2
    double num = 0, den = 0;
    for (std::size_t i = 0; i < fractions.size(); ++i) {
      num += fractions[i] * (1.0 - p_rel[i]);
      den += fractions[i] * fractions[i];
    }
    m.intercept = 1.0;
    m.slope = std::max(0.0, num / den);
  } else {
    m.slope = -sfp / sff;
    if (m.slope < 0.0) m.slope = 0.0;
    m.intercept = mp + m.slope * mf;
  }
  return m;
}

/// Prediction clamped to [0, 1.1].
inline double predict_area_model(const AreaModel& m, double fraction) {
  return std::clamp(m.intercept - m.slope * fraction, 0.0, kMaxRelativePower);
}

// ---------------------------------------------------------------------------
// Loss maps

/// Per-pixel relative power loss; entries are <= 0.
struct LossMap : Raster<double> {
  using Raster<double>::Raster;
  LossMap() = default;
  explicit LossMap(Raster<double> r) : Raster<double>(std::move(r)) {}
};

inline constexpr double kLossMapTolerance = 1e-9;

/// Throws if an entry is non-finite or exceeds the nonpositivity tolerance.
inline void check_loss_map(const LossMap& map) {
  for (double v : map.data) {
    if (!std::isfinite(v)) throw Error("loss map contains non-finite values");
    if (v > kLossMapTolerance) throw Error("loss map contains positive entries (corrupt map)");
  }
}

/// 1 + sum of all entries.
inline double total_loss_from_map(const LossMap& map) {
  check_loss_map(map);
  double s = 0.0;
  for (double v : map.data) s += v;
  return 1.0 + s;
}

/// Subtracts the per-pixel median of the healthy maps from every map and
/// clamps the result to <= 0. For an even number of healthy maps the lower
/// median is used, which keeps repeated debiasing a no-op.
inline std::vector<LossMap> debias_maps(const std::vector<LossMap>& maps, const std::vector<LossMap>& healthy) {
  if (healthy.empty()) throw Error("debias_maps: need at least one healthy map");
  const int w = healthy.front().width;
  const int h = healthy.front().height;
  for (const auto& m : healthy)
    if (m.width != w || m.height != h) throw Error("debias_maps: dimension mismatch");
  for (const auto& m : maps)
    if (m.width != w || m.height != h) throw Error("debias_maps: dimension mismatch");

  LossMap median(w, h);
  std::vector<double> column(healthy.size());
  const std::size_t k = (healthy.size() - 1) / 2;
  for (std::size_t i = 0; i < median.size(); ++i) {
    for (std::size_t j = 0; j < healthy.size(); ++j) column[j] = healthy[j].data[i];
    std::nth_element(column.begin(), column.begin() + static_cast<std::ptrdiff_t>(k), column.end());
    median.data[i] = column[k];
  }

  std::vector<LossMap> out;
  out.reserve(maps.size());
  for (const auto& m : maps) {
    LossMap d(w, h);
    for (std::size_t i = 0; i < d.size(); ++i) d.data[i] = std::min(0.0, m.data[i] - median.data[i]);
    out.push_back(std::move(d));
  }
  return out;
}

/// Cell layout over a map: even division, remainder pixels go to the last
/// row and column.
struct CellGrid {
  int rows = 10;
  int cols = 6;

  struct Extent {
    int x0, y0, x1, y1;
  };

  [[nodiscard]] Extent cell(int r, int c, int width, int height) const {
    const int cw = width / cols;
    const int ch = height / rows;
    return {c * cw, r * ch, c == cols - 1 ? width : (c + 1) * cw, r == rows - 1 ? height : (r + 1) * ch};
  }
};

/// Relative loss per cell (row-major, rows x cols), each >= 0.
inline std::vector<double> cell_losses_relative(const LossMap& map, const CellGrid& grid) {
  if (grid.rows < 1 || grid.cols < 1) throw Error("cell_losses: empty grid");
  if (map.width < grid.cols || map.height < grid.rows) throw Error("cell_losses: grid does not fit the map");
  check_loss_map(map);
  std::vector<double> out(static_cast<std::size_t>(grid.rows * grid.cols), 0.0);
  for (int r = 0; r < grid.rows; ++r)
    for (int c = 0; c < grid.cols; ++c) {
      const auto e = grid.cell(r, c, map.width, map.height);
      double s = 0.0;
      for (int y = e.y0; y < e.y1; ++y)
        for (int x = e.x0; x < e.x1; ++x) s += map.at(x, y);
      out[static_cast<std::size_t>(r * grid.cols + c)] = -s;
    }
  return out;
}

/// Absolute loss per cell in watts-peak.
inline std::vector<double> cell_losses(const LossMap& map, const CellGrid& grid, double p_nom) {
  if (!(p_nom > 0.0)) throw Error("cell_losses: nominal power must be positive");
  auto out = cell_losses_relative(map, grid);
  for (auto& v : out) v *= p_nom;
  return out;
}

/// Spreads the area model's predicted loss evenly over the inactive pixels.
/// A module without inactive pixels, or one predicted at or above nominal
/// power, gets an all-zero map.
inline LossMap synth_loss_map(const Image16& img, const AreaModel& model, const InactiveMethod& method = OtsuThreshold{}) {
  const std::uint16_t t = std::holds_alternative<FixedThreshold>(method) ? std::get<FixedThreshold>(method).value
                                                                          : otsu_threshold(img);
  std::size_t dark = 0;
  for (auto v : img.data) dark += v <= t ? 1 : 0;
  LossMap map(img.width, img.height, 0.0);
  const double fraction = static_cast<double>(dark) / static_cast<double>(img.size());
  const double loss = std::min(0.0, predict_area_model(model, fraction) - 1.0);
  if (dark == 0 || loss == 0.0) return map;
  const double per_pixel = loss / static_cast<double>(dark);
  for (std::size_t i = 0; i < img.size(); ++i)
    if (img.data[i] <= t) map.data[i] = per_pixel;
  return map;
}

// ---------------------------------------------------------------------------
// PLM files: "PLM1", u32 LE width, u32 LE height, width*height f64 LE values.

inline std::string encode_plm(const LossMap& map) {
  std::string out;
  out.reserve(12 + 8 * map.size());
  out += "PLM1";
  auto put_u32 = [&](std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out += static_cast<char>((v >> (8 * i)) & 0xFF);
  };
  put_u32(static_cast<std::uint32_t>(map.width));
  put_u32(static_cast<std::uint32_t>(map.height));
  for (double v : map.data) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, sizeof bits);
    for (int i = 0; i < 8; ++i) out += static_cast<char>((bits >> (8 * i)) & 0xFF);
  }
  return out;
}

inline LossMap decode_plm(const std::string& bytes) {
  if (bytes.size() < 12 || bytes.compare(0, 4, "PLM1") != 0) throw Error("PLM: bad magic");
  auto get_u32 = [&](std::size_t off) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[off + i])) << (8 * i);
    return v;
  };
  const std::uint32_t w = get_u32(4);
  const std::uint32_t h = get_u32(8);
  if (w == 0 || h == 0 || w > (1u << 20) || h > (1u << 20)) throw Error("PLM: dimension overflow");
  const std::uint64_t count = static_cast<std::uint64_t>(w) * h;
  if (count > (std::uint64_t{1} << 31)) throw Error("PLM: dimension overflow");
  if (bytes.size() < 12 + 8 * count) throw Error("PLM: truncated payload");
  if (bytes.size() > 12 + 8 * count) throw Error("PLM: trailing bytes after payload");
  LossMap map(static_cast<int>(w), static_cast<int>(h));
  for (std::uint64_t i = 0; i < count; ++i) {
    std::uint64_t bits = 0;
    for (int b = 0; b < 8; ++b)
      bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[12 + 8 * i + b])) << (8 * b);
    std::memcpy(&map.data[i], &bits, sizeof bits);
  }
  return map;
}

inline void save_loss_map(const LossMap& map, const std::string& path) { write_file_bytes(path, encode_plm(map)); }
inline LossMap load_loss_map(const std::string& path) { return decode_plm(read_file_bytes(path)); }

}  // namespace elpv
