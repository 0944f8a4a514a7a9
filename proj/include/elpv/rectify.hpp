#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>

#include "elpv/detect.hpp"
#include "elpv/error.hpp"
#include "elpv/image.hpp"

namespace elpv {

struct Point2 {
  double x = 0.0;
  double y = 0.0;
  friend bool operator==(const Point2&, const Point2&) = default;
};

/// Corners ordered top-left, top-right, bottom-right, bottom-left.
struct Quad {
  std::array<Point2, 4> corners;

  /// Shoelace area, positive for clockwise order in image coordinates (y down).
  [[nodiscard]] double signed_area() const noexcept {
    double s = 0.0;
    for (int i = 0; i < 4; ++i) {
      const auto& a = corners[static_cast<std::size_t>(i)];
      const auto& b = corners[static_cast<std::size_t>((i + 1) % 4)];
      s += a.x * b.y - b.x * a.y;
    }
    return 0.5 * s;
  }

  /// Convex with consistent winding and non-negligible area.
  [[nodiscard]] bool non_degenerate() const noexcept {
    int sign = 0;
    for (int i = 0; i < 4; ++i) {
      const auto& a = corners[static_cast<std::size_t>(i)];
      const auto& b = corners[static_cast<std::size_t>((i + 1) % 4)];
      const auto& c = corners[static_cast<std::size_t>((i + 2) % 4)];
      const double cross = (b.x - a.x) * (c.y - b.y) - (b.y - a.y) * (c.x - b.x);
      if (std::abs(cross) < 1e-12) return false;
      const int s = cross > 0 ? 1 : -1;
      if (sign == 0) sign = s;
      if (s != sign) return false;
    }
    return std::abs(signed_area()) > 1e-12;
  }

  static Quad rectangle(double x0, double y0, double x1, double y1) {
    return Quad{{Point2{x0, y0}, Point2{x1, y0}, Point2{x1, y1}, Point2{x0, y1}}};
  }
};

/// Projective map, row-major 3x3, scaled so the bottom-right entry is 1
/// whenever it is nonzero.
struct Homography {
  std::array<double, 9> m{1, 0, 0, 0, 1, 0, 0, 0, 1};

  static Homography identity() { return {}; }

  double operator()(int r, int c) const noexcept { return m[static_cast<std::size_t>(3 * r + c)]; }

  [[nodiscard]] double det() const noexcept {
    return m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6]) + m[2] * (m[3] * m[7] - m[4] * m[6]);
  }

  [[nodiscard]] Point2 apply(Point2 p) const noexcept {
    const double w = m[6] * p.x + m[7] * p.y + m[8];
    return {(m[0] * p.x + m[1] * p.y + m[2]) / w, (m[3] * p.x + m[4] * p.y + m[5]) / w};
  }

  void normalize() {
    if (std::abs(m[8]) > 1e-15) {
      const double s = m[8];
      for (auto& v : m) v /= s;
    }
  }

  [[nodiscard]] Homography inverse() const {
    const double d = det();
    if (!(std::abs(d) > 1e-12) || !std::isfinite(d)) throw Error("homography is not invertible");
    Homography h;
    h.m = {(m[4] * m[8] - m[5] * m[7]) / d, (m[2] * m[7] - m[1] * m[8]) / d, (m[1] * m[5] - m[2] * m[4]) / d,
           (m[5] * m[6] - m[3] * m[8]) / d, (m[0] * m[8] - m[2] * m[6]) / d, (m[2] * m[3] - m[0] * m[5]) / d,
           (m[3] * m[7] - m[4] * m[6]) / d, (m[1] * m[6] - m[0] * m[7]) / d, (m[0] * m[4] - m[1] * m[3]) / d};
    h.normalize();
    return h;
  }

  /// this * other (apply `other` first).
  [[nodiscard]] Homography compose(const Homography& other) const {
    Homography h;
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) {
        double s = 0;
        for (int k = 0; k < 3; ++k) s += (*this)(r, k) * other(k, c);
        h.m[static_cast<std::size_t>(3 * r + c)] = s;
      }
    h.normalize();
    return h;
  }
};

namespace detail {

// Similarity that moves the centroid to the origin and the mean distance to sqrt(2).
inline Eigen::Matrix3d conditioning(const Quad& q) {
  double cx = 0, cy = 0;
  for (const auto& p : q.corners) {
    cx += p.x / 4;
    cy += p.y / 4;
  }
  double d = 0;
  for (const auto& p : q.corners) d += std::hypot(p.x - cx, p.y - cy) / 4;
  const double s = std::sqrt(2.0) / d;
  Eigen::Matrix3d t;
  t << s, 0, -s * cx, 0, s, -s * cy, 0, 0, 1;
  return t;
}

}  // namespace detail

/// Direct linear transform from four correspondences: stacks the 8x9 system
/// on conditioned coordinates and takes its null vector from the SVD.
inline Homography homography_dlt(const Quad& src, const Quad& dst) {
  if (!src.non_degenerate() || !dst.non_degenerate()) throw Error("homography_dlt: degenerate quad");
  const Eigen::Matrix3d ts = detail::conditioning(src);
  const Eigen::Matrix3d td = detail::conditioning(dst);

  Eigen::Matrix<double, 8, 9> a;
  for (int i = 0; i < 4; ++i) {
    const auto& ps = src.corners[static_cast<std::size_t>(i)];
    const auto& pd = dst.corners[static_cast<std::size_t>(i)];
    const Eigen::Vector3d s = ts * Eigen::Vector3d(ps.x, ps.y, 1.0);
    const Eigen::Vector3d d = td * Eigen::Vector3d(pd.x, pd.y, 1.0);
    const double x = s.x() / s.z(), y = s.y() / s.z(), u = d.x() / d.z(), v = d.y() / d.z();
    a.row(2 * i) << -x, -y, -1, 0, 0, 0, u * x, u * y, u;
    a.row(2 * i + 1) << 0, 0, 0, -x, -y, -1, v * x, v * y, v;
  }
  Eigen::JacobiSVD<Eigen::Matrix<double, 8, 9>> svd(a, Eigen::ComputeFullV);
  const auto& sv = svd.singularValues();
  if (!(sv(7) > 1e-10 * sv(0))) throw Error("homography_dlt: rank-deficient system (collinear points)");
  const Eigen::Matrix<double, 9, 1> h = svd.matrixV().col(8);

  Eigen::Matrix3d hn;
  hn << h(0), h(1), h(2), h(3), h(4), h(5), h(6), h(7), h(8);
  const Eigen::Matrix3d full = td.inverse() * hn * ts;

  Homography out;
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) out.m[static_cast<std::size_t>(3 * r + c)] = full(r, c);
  out.normalize();
  if (!(std::abs(out.det()) > 1e-12)) throw Error("homography_dlt: singular result");
  return out;
}

/// Bilinear sample at a sub-pixel position, or -1 outside the source.
inline double sample_bilinear(const Image16& img, double x, double y) {
  if (!(x >= 0.0 && y >= 0.0 && x <= img.width - 1 && y <= img.height - 1)) return -1.0;
  const int x0 = std::min(static_cast<int>(x), img.width - 1);
  const int y0 = std::min(static_cast<int>(y), img.height - 1);
  const int x1 = std::min(x0 + 1, img.width - 1);
  const int y1 = std::min(y0 + 1, img.height - 1);
  const double fx = x - x0;
  const double fy = y - y0;
  const double top = img.at(x0, y0) * (1 - fx) + img.at(x1, y0) * fx;
  const double bot = img.at(x0, y1) * (1 - fx) + img.at(x1, y1) * fx;
  return top * (1 - fy) + bot * fy;
}

/// Inverse-mapping warp: output pixel p samples the source at H^-1 p.
/// Samples falling outside the source are 0.
inline Image16 warp(const Image16& img, const Homography& h, int out_w, int out_h) {
  if (out_w < 1 || out_h < 1) throw Error("warp: output size must be positive");
  const Homography inv = h.inverse();
  Image16 out(out_w, out_h);
  for (int v = 0; v < out_h; ++v) {
    for (int u = 0; u < out_w; ++u) {
      const Point2 s = inv.apply({static_cast<double>(u), static_cast<double>(v)});
      const double val = sample_bilinear(img, s.x, s.y);
      out.at(u, v) = val < 0 ? 0 : static_cast<std::uint16_t>(std::min(65535.0, std::floor(val + 0.5)));
    }
  }
  return out;
}

namespace detail {

// 1-D running max (dilate) or min (erode) over [i - r, i + r], clipped to the
// line, applied along rows or columns.
inline void morph_pass(BinaryMask& m, int r, bool dilate, bool along_rows) {
  const int n = along_rows ? m.width : m.height;
  const int lines = along_rows ? m.height : m.width;
  std::vector<std::uint8_t> line(static_cast<std::size_t>(n)), out(static_cast<std::size_t>(n));
  std::vector<int> prefix(static_cast<std::size_t>(n) + 1);
  for (int l = 0; l < lines; ++l) {
    for (int i = 0; i < n; ++i) line[static_cast<std::size_t>(i)] = along_rows ? m.at(i, l) : m.at(l, i);
    for (int i = 0; i < n; ++i) prefix[static_cast<std::size_t>(i) + 1] = prefix[static_cast<std::size_t>(i)] + line[static_cast<std::size_t>(i)];
    for (int i = 0; i < n; ++i) {
      const int a = std::max(0, i - r), b = std::min(n - 1, i + r);
      const int ones = prefix[static_cast<std::size_t>(b) + 1] - prefix[static_cast<std::size_t>(a)];
      out[static_cast<std::size_t>(i)] = dilate ? (ones > 0) : (ones == b - a + 1);
    }
    for (int i = 0; i < n; ++i) (along_rows ? m.at(i, l) : m.at(l, i)) = out[static_cast<std::size_t>(i)];
  }
}

}  // namespace detail

/// Binary closing with a (2r+1)^2 square, windows clipped at the frame.
/// Bridges dark gaps up to 2r pixels wide; the result contains the input.
inline BinaryMask close_mask(const BinaryMask& mask, int r) {
  if (r <= 0) return mask;
  BinaryMask m = mask;
  detail::morph_pass(m, r, true, true);
  detail::morph_pass(m, r, true, false);
  detail::morph_pass(m, r, false, true);
  detail::morph_pass(m, r, false, false);
  for (std::size_t i = 0; i < m.size(); ++i) m.data[i] = static_cast<std::uint8_t>(m.data[i] | mask.data[i]);
  return m;
}

/// Closing radius used before corner extraction: wide enough for cell gaps
/// and busbars at typical module resolutions.
inline int corner_closing_radius(int width, int height) { return std::max(3, std::min(width, height) / 64); }

/// Corner estimate from the largest Otsu component after closing the dark
/// gaps between cells: the mask pixels that maximize -x-y, x-y, x+y and -x+y.
inline Quad estimate_corners(const Image16& crop_img) {
  std::uint16_t t = 0;
  try {
    t = otsu_threshold(crop_img);
  } catch (const DegenerateInput&) {
    throw Error("estimate_corners: no foreground component");
  }
  const int r = corner_closing_radius(crop_img.width, crop_img.height);
  const Labeling lab = connected_components(close_mask(binarize(crop_img, t), r));
  if (lab.count == 0) throw Error("estimate_corners: no foreground component");
  std::vector<std::int64_t> sizes(static_cast<std::size_t>(lab.count) + 1, 0);
  for (auto l : lab.labels.data) ++sizes[static_cast<std::size_t>(l)];
  const auto largest = static_cast<std::int32_t>(std::max_element(sizes.begin() + 1, sizes.end()) - sizes.begin());

  std::array<double, 4> best;
  best.fill(-1e300);
  Quad q;
  for (int y = 0; y < crop_img.height; ++y)
    for (int x = 0; x < crop_img.width; ++x) {
      if (lab.labels.at(x, y) != largest) continue;
      const std::array<double, 4> score{-double(x) - y, double(x) - y, double(x) + y, -double(x) + y};
      for (std::size_t k = 0; k < 4; ++k)
        if (score[k] > best[k]) {
          best[k] = score[k];
          q.corners[k] = {double(x), double(y)};
        }
    }
  if (!q.non_degenerate()) throw Error("estimate_corners: degenerate (collinear) corners");
  return q;
}

/// Cell layout of a module type. The rectified image is cell_px per cell.
struct ModuleGeometry {
  int rows = 10;
  int cols = 6;
  int cell_px = 100;
};

/// A rectified module. The longer cell axis is always vertical.
struct ModuleImage {
  Image16 image;
  int rows = 0;
  int cols = 0;
};

/// Crop, estimate corners, map them onto the canonical rectangle and warp.
/// The canonical rectangle is portrait (rows >= cols); a landscape module
/// in the measurement is turned a quarter clockwise.
inline ModuleImage rectify_module(const Image16& img, const BoundingBox& box, const ModuleGeometry& geom) {
  if (geom.rows < 1 || geom.cols < 1 || geom.cell_px < 1) throw Error("rectify_module: bad module geometry");
  if (!box.valid() || box.x0 < 0 || box.y0 < 0 || box.x1 > img.width || box.y1 > img.height)
    throw Error("rectify_module: box outside image");
  const Image16 c = crop(img, box.x0, box.y0, box.x1, box.y1);
  Quad src = estimate_corners(c);

  const int rows = std::max(geom.rows, geom.cols);
  const int cols = std::min(geom.rows, geom.cols);
  const int out_w = cols * geom.cell_px;
  const int out_h = rows * geom.cell_px;

  const auto& k = src.corners;
  const double src_w = 0.5 * (std::hypot(k[1].x - k[0].x, k[1].y - k[0].y) + std::hypot(k[2].x - k[3].x, k[2].y - k[3].y));
  const double src_h = 0.5 * (std::hypot(k[3].x - k[0].x, k[3].y - k[0].y) + std::hypot(k[2].x - k[1].x, k[2].y - k[1].y));
  if (src_w > src_h && rows != cols) {
    // Landscape in the measurement: its bottom-left corner becomes the top-left.
    src.corners = {k[3], k[0], k[1], k[2]};
  }
  const Quad dst = Quad::rectangle(0, 0, out_w - 1, out_h - 1);
  const Homography h = homography_dlt(src, dst);
  return {warp(c, h, out_w, out_h), rows, cols};
}

}  // namespace elpv
