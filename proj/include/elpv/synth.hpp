#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <vector>

#include "elpv/detect.hpp"
#include "elpv/error.hpp"
#include "elpv/image.hpp"

// Synthetic EL renderers. They stand in for annotated measurements in tests,
// tuning experiments and the CLI `synth` subcommand.

namespace elpv {

/// Layout and appearance of a synthetic multi-module measurement.
struct SceneSpec {
  int width = 2048;
  int height = 2048;
  int module_count = 3;      ///< completely visible modules
  int slot_cols = 0;         ///< 0 = choose automatically
  int slot_rows = 0;
  int margin = 40;           ///< minimum distance between visible modules and the canvas border
  bool partial_module = false;  ///< add one module crossing the bottom border
  int cell_rows = 6;
  int cell_cols = 10;
  int gap_px = 2;            ///< dark line between adjacent cells
  std::uint16_t background = 800;
  std::uint16_t module_level = 18000;
  double gap_level = 0.15;   ///< gap intensity relative to module_level
  double cell_variation = 0.08;
  int defects_per_module = 2;
  double noise_sigma = 250.0;
  std::uint64_t seed = 1;
};

struct Scene {
  Image16 image;
  std::vector<BoundingBox> boxes;  ///< ground truth, visible modules only
  std::vector<double> inactive;    ///< fraction of each box painted as fracture
  BoundingBox partial;             ///< clipped extent of the partial module, if any
};

namespace detail {

inline std::uint16_t clamp_u16(double v) {
  return static_cast<std::uint16_t>(std::clamp(std::lround(v), 0L, 65535L));
}

// Paints one module with cell gaps, per-cell brightness variation and a few
// dark fracture regions. Pixels outside the canvas are skipped. Returns the
// number of fracture pixels painted.
inline long paint_module(Raster<double>& canvas, const BoundingBox& m, const SceneSpec& spec, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const int cells = spec.cell_rows * spec.cell_cols;
  std::vector<double> gain(static_cast<std::size_t>(cells));
  for (auto& g : gain) g = 1.0 + spec.cell_variation * (2.0 * unit(rng) - 1.0);

  struct Dark {
    double x0, y0, x1, y1;
  };
  std::vector<Dark> dark;
  const double cw = static_cast<double>(m.width()) / spec.cell_cols;
  const double ch = static_cast<double>(m.height()) / spec.cell_rows;
  for (int d = 0; d < spec.defects_per_module; ++d) {
    // Interior cells only, so a fracture never eats into the module outline.
    const int cx = 1 + static_cast<int>(unit(rng) * std::max(1, spec.cell_cols - 2));
    const int cy = 1 + static_cast<int>(unit(rng) * std::max(1, spec.cell_rows - 2));
    const double part = 0.2 + 0.6 * unit(rng);
    const double x0 = m.x0 + cx * cw;
    const double y0 = m.y0 + cy * ch;
    dark.push_back({x0, y0, x0 + cw, y0 + ch * part});
  }

  const double gap_value = spec.gap_level * spec.module_level;
  long dark_pixels = 0;
  for (int y = std::max(0, m.y0); y < std::min(canvas.height, m.y1); ++y) {
    const double ly = y - m.y0;
    const int cy = std::min(spec.cell_rows - 1, static_cast<int>(ly / ch));
    const bool gap_y = cy > 0 && ly - cy * ch < spec.gap_px;
    for (int x = std::max(0, m.x0); x < std::min(canvas.width, m.x1); ++x) {
      const double lx = x - m.x0;
      const int cx = std::min(spec.cell_cols - 1, static_cast<int>(lx / cw));
      const bool gap_x = cx > 0 && lx - cx * cw < spec.gap_px;
      double v = spec.module_level * gain[static_cast<std::size_t>(cy * spec.cell_cols + cx)];
      if (gap_x || gap_y) v = gap_value;
      for (const auto& d : dark)
        if (x >= d.x0 && x < d.x1 && y >= d.y0 && y < d.y1) {
          v = spec.background * 1.5;
          ++dark_pixels;
          break;
        }
      canvas.at(x, y) = v;
    }
  }
  return dark_pixels;
}

}  // namespace detail

/// Renders a multi-module measurement with known module boxes. Deterministic
/// for a fixed seed.
inline Scene synth_scene(const SceneSpec& spec) {
  if (spec.module_count < 1) throw Error("synth_scene: module_count must be >= 1");
  if (spec.width < 16 || spec.height < 16) throw Error("synth_scene: canvas too small");
  int cols = spec.slot_cols;
  int rows = spec.slot_rows;
  if (cols <= 0 || rows <= 0) {
    cols = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(spec.module_count))));
    rows = (spec.module_count + cols - 1) / cols;
  }
  if (rows * cols < spec.module_count) throw Error("synth_scene: not enough slots for module_count");

  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  // The partial module takes a strip along the bottom edge.
  const int strip = spec.partial_module ? spec.height / (2 * rows + 2) : 0;
  const int area_w = spec.width - 2 * spec.margin;
  const int area_h = spec.height - 2 * spec.margin - strip;
  const double slot_w = static_cast<double>(area_w) / cols;
  const double slot_h = static_cast<double>(area_h) / rows;

  // One module type per scene: fixed aspect from the cell grid, size filling
  // 72..88 % of the limiting slot dimension.
  const double aspect = static_cast<double>(spec.cell_cols) / spec.cell_rows;
  const double fill = 0.72 + 0.16 * unit(rng);
  double mw = std::min(slot_w, slot_h * aspect) * fill;
  double mh = mw / aspect;
  const int module_w = static_cast<int>(mw);
  const int module_h = static_cast<int>(mh);
  if (module_w < 4 * spec.cell_cols || module_h < 4 * spec.cell_rows)
    throw Error("synth_scene: infeasible layout (modules too small for the canvas)");

  Raster<double> canvas(spec.width, spec.height, static_cast<double>(spec.background));
  Scene scene;
  for (int i = 0; i < spec.module_count; ++i) {
    const int r = i / cols;
    const int c = i % cols;
    const double free_x = slot_w - module_w;
    const double free_y = slot_h - module_h;
    const int x0 = spec.margin + static_cast<int>(c * slot_w + free_x * (0.2 + 0.6 * unit(rng)));
    const int y0 = spec.margin + static_cast<int>(r * slot_h + free_y * (0.2 + 0.6 * unit(rng)));
    const BoundingBox box{x0, y0, x0 + module_w, y0 + module_h};
    const long dark = detail::paint_module(canvas, box, spec, rng);
    scene.boxes.push_back(box);
    scene.inactive.push_back(static_cast<double>(dark) / static_cast<double>(box.area()));
  }
  if (spec.partial_module) {
    const int x0 = spec.margin + static_cast<int>((slot_w - module_w) * unit(rng));
    // Start inside the strip, but always leave part of the module off-canvas.
    const int y0 = std::max(spec.height - strip + spec.margin / 2, spec.height - module_h / 2);
    const BoundingBox box{x0, y0, x0 + module_w, y0 + module_h};
    detail::paint_module(canvas, box, spec, rng);
    scene.partial = {box.x0, box.y0, std::min(box.x1, spec.width), std::min(box.y1, spec.height)};
  }

  scene.image = Image16(spec.width, spec.height);
  if (spec.noise_sigma > 0.0) {
    std::normal_distribution<double> noise(0.0, spec.noise_sigma);
    for (std::size_t i = 0; i < canvas.size(); ++i) scene.image.data[i] = detail::clamp_u16(canvas.data[i] + noise(rng));
  } else {
    for (std::size_t i = 0; i < canvas.size(); ++i) scene.image.data[i] = detail::clamp_u16(canvas.data[i]);
  }
  return scene;
}

/// A rectified single-module image with an exactly known inactive area.
struct ModuleSpec {
  int rows = 10;
  int cols = 6;
  int cell_px = 12;
  int gap_px = 1;
  std::uint16_t active_level = 20000;
  std::uint16_t inactive_level = 800;
  double gap_level = 0.15;
  double noise_sigma = 0.0;
  double inactive_fraction = 0.0;  ///< rounded to whole pixels
  std::uint64_t seed = 1;
};

struct SynthModule {
  Image16 image;
  BinaryMask inactive;           ///< 1 where the pixel was set to inactive_level
  double inactive_fraction = 0;  ///< exact fraction of inactive pixels
};

/// Darkens whole cell rows, cell by cell in random order, until exactly
/// round(fraction * pixels) pixels are inactive.
inline SynthModule synth_module(const ModuleSpec& spec) {
  if (spec.rows < 1 || spec.cols < 1 || spec.cell_px < 2) throw Error("synth_module: bad geometry");
  if (!(spec.inactive_fraction >= 0.0 && spec.inactive_fraction <= 1.0))
    throw Error("synth_module: inactive_fraction must be in [0, 1]");
  const int w = spec.cols * spec.cell_px;
  const int h = spec.rows * spec.cell_px;
  std::mt19937_64 rng(spec.seed);

  Raster<double> canvas(w, h, static_cast<double>(spec.active_level));
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const bool gap = (x % spec.cell_px) < spec.gap_px || (y % spec.cell_px) < spec.gap_px;
      if (gap) canvas.at(x, y) = spec.gap_level * spec.active_level;
    }

  SynthModule out{Image16(w, h), BinaryMask(w, h, 0), 0.0};
  const auto total = static_cast<long>(canvas.size());
  long remaining = std::lround(spec.inactive_fraction * static_cast<double>(total));
  std::vector<int> order(static_cast<std::size_t>(spec.rows * spec.cols));
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  for (int cell : order) {
    if (remaining == 0) break;
    const int cx = (cell % spec.cols) * spec.cell_px;
    const int cy = (cell / spec.cols) * spec.cell_px;
    for (int y = cy; y < cy + spec.cell_px && remaining > 0; ++y)
      for (int x = cx; x < cx + spec.cell_px && remaining > 0; ++x) {
        out.inactive.at(x, y) = 1;
        canvas.at(x, y) = spec.inactive_level;
        --remaining;
      }
  }
  long count = 0;
  for (auto v : out.inactive.data) count += v;
  out.inactive_fraction = static_cast<double>(count) / static_cast<double>(total);

  std::normal_distribution<double> noise(0.0, spec.noise_sigma > 0 ? spec.noise_sigma : 1.0);
  for (std::size_t i = 0; i < canvas.size(); ++i)
    out.image.data[i] = detail::clamp_u16(canvas.data[i] + (spec.noise_sigma > 0 ? noise(rng) : 0.0));
  return out;
}

}  // namespace elpv
