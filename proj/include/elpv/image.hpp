#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "elpv/error.hpp"

namespace elpv {

/// Row-major 2-D grid. The pixel type decides the role: photon counts,
/// standardized intensities, mask flags or labels.
template <typename T>
struct Raster {
  int width = 0;
  int height = 0;
  std::vector<T> data;

  Raster() = default;
  Raster(int w, int h, T fill = T{}) : width(w), height(h) {
    if (w < 1 || h < 1) throw Error("raster dimensions must be positive");
    data.assign(static_cast<std::size_t>(w) * static_cast<std::size_t>(h), fill);
  }
  Raster(int w, int h, std::vector<T> values) : width(w), height(h), data(std::move(values)) {
    if (w < 1 || h < 1) throw Error("raster dimensions must be positive");
    if (data.size() != static_cast<std::size_t>(w) * static_cast<std::size_t>(h))
      throw Error("raster data length does not match width x height");
  }

  [[nodiscard]] std::size_t size() const noexcept { return data.size(); }
  [[nodiscard]] std::size_t index(int x, int y) const noexcept {
    return static_cast<std::size_t>(y) * static_cast<std::size_t>(width) + static_cast<std::size_t>(x);
  }
  T& at(int x, int y) noexcept { return data[index(x, y)]; }
  const T& at(int x, int y) const noexcept { return data[index(x, y)]; }
  std::span<const T> row(int y) const noexcept {
    return {data.data() + index(0, y), static_cast<std::size_t>(width)};
  }

  friend bool operator==(const Raster&, const Raster&) = default;
};

/// Raw 16-bit EL measurement.
using Image16 = Raster<std::uint16_t>;
/// Intensities after global standardization.
using NormalizedImage = Raster<double>;

struct GlobalStats {
  double mu = 0.0;
  double sigma = 1.0;
};

// ---------------------------------------------------------------------------
// PGM I/O

namespace detail {

inline void skip_pgm_space(std::istream& in) {
  for (;;) {
    int c = in.peek();
    if (c == '#') {
      std::string ignored;
      std::getline(in, ignored);
    } else if (c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\v' || c == '\f') {
      in.get();
    } else {
      return;
    }
  }
}

inline long read_pgm_int(std::istream& in, const char* what) {
  skip_pgm_space(in);
  long value = -1;
  if (!(in >> value) || value < 0) throw Error(std::string("malformed PGM header: bad ") + what);
  return value;
}

}  // namespace detail

/// Decodes a binary 16-bit PGM ("P5", maxval 256..65535, big-endian samples).
inline Image16 decode_pgm16(const std::string& bytes) {
  std::istringstream in(bytes, std::ios::binary);
  char magic[2] = {0, 0};
  in.read(magic, 2);
  if (!in || magic[0] != 'P' || magic[1] != '5') throw Error("malformed PGM header: expected P5");
  const long w = detail::read_pgm_int(in, "width");
  const long h = detail::read_pgm_int(in, "height");
  const long maxval = detail::read_pgm_int(in, "maxval");
  if (w < 1 || h < 1 || w > 1'000'000 || h > 1'000'000) throw Error("malformed PGM header: bad dimensions");
  if (maxval <= 255) throw Error("unsupported bit depth: 8-bit PGM (maxval <= 255)");
  if (maxval > 65535) throw Error("malformed PGM header: maxval > 65535");
  // Exactly one whitespace byte separates the header from the raster.
  int sep = in.get();
  if (sep == EOF || !std::isspace(sep)) throw Error("malformed PGM header: missing separator");

  const std::size_t count = static_cast<std::size_t>(w) * static_cast<std::size_t>(h);
  const auto offset = static_cast<std::size_t>(in.tellg());
  if (bytes.size() < offset + 2 * count) throw Error("truncated PGM payload");

  Image16 img(static_cast<int>(w), static_cast<int>(h));
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data() + offset);
  for (std::size_t i = 0; i < count; ++i)
    img.data[i] = static_cast<std::uint16_t>((p[2 * i] << 8) | p[2 * i + 1]);
  return img;
}

/// Canonical encoding: "P5\n<w> <h>\n65535\n" followed by big-endian samples.
inline std::string encode_pgm16(const Image16& img) {
  std::string out = "P5\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n65535\n";
  const std::size_t header = out.size();
  out.resize(header + 2 * img.size());
  for (std::size_t i = 0; i < img.size(); ++i) {
    out[header + 2 * i] = static_cast<char>(img.data[i] >> 8);
    out[header + 2 * i + 1] = static_cast<char>(img.data[i] & 0xFF);
  }
  return out;
}

inline std::string read_file_bytes(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open file: " + path);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

inline void write_file_bytes(const std::string& path, const std::string& bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("cannot write file: " + path);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw Error("write failed: " + path);
}

inline Image16 load_pgm16(const std::string& path) { return decode_pgm16(read_file_bytes(path)); }

inline void save_pgm16(const Image16& img, const std::string& path) {
  write_file_bytes(path, encode_pgm16(img));
}

// ---------------------------------------------------------------------------
// Geometry helpers

/// Output size of a downscale, floor(scale * dim) but at least one pixel.
inline int scaled_extent(int dim, double scale) {
  return std::max(1, static_cast<int>(std::floor(scale * dim + 1e-9)));
}

inline Image16 crop(const Image16& img, int x0, int y0, int x1, int y1) {
  if (x0 < 0 || y0 < 0 || x1 > img.width || y1 > img.height || x1 <= x0 || y1 <= y0)
    throw Error("crop region outside image");
  Image16 out(x1 - x0, y1 - y0);
  for (int y = y0; y < y1; ++y) {
    auto src = img.row(y);
    std::copy(src.begin() + x0, src.begin() + x1, out.data.begin() + static_cast<std::ptrdiff_t>(out.index(0, y - y0)));
  }
  return out;
}

namespace detail {

struct Tap {
  int src;
  std::int64_t weight;
};

// Exact area overlaps between output cells and source pixels along one axis,
// in units of 1/n_out source pixels; weights of one output cell sum to n_in.
inline std::vector<std::vector<Tap>> box_taps(int n_in, int n_out) {
  std::vector<std::vector<Tap>> taps(static_cast<std::size_t>(n_out));
  for (int o = 0; o < n_out; ++o) {
    const std::int64_t lo = static_cast<std::int64_t>(o) * n_in;
    const std::int64_t hi = lo + n_in;
    for (int i = static_cast<int>(lo / n_out); i < n_in && static_cast<std::int64_t>(i) * n_out < hi; ++i) {
      const std::int64_t a = std::max<std::int64_t>(lo, static_cast<std::int64_t>(i) * n_out);
      const std::int64_t b = std::min<std::int64_t>(hi, static_cast<std::int64_t>(i + 1) * n_out);
      if (b > a) taps[static_cast<std::size_t>(o)].push_back({i, b - a});
    }
  }
  return taps;
}

}  // namespace detail

/// Area-average (box filter) downscale to floor(scale * dim), at least 1. Each output
/// pixel averages its exact source footprint; the result is rounded half up.
/// Footprints tile the source, so every source pixel contributes.
inline Image16 downscale(const Image16& img, double scale) {
  if (!(scale > 0.0 && scale <= 1.0)) throw Error("downscale: scale must be in (0, 1]");
  const int ow = scaled_extent(img.width, scale);
  const int oh = scaled_extent(img.height, scale);
  if (ow == img.width && oh == img.height) return img;

  const auto xtaps = detail::box_taps(img.width, ow);
  const auto ytaps = detail::box_taps(img.height, oh);

  // Horizontal pass into exact integer sums.
  std::vector<std::int64_t> rows(static_cast<std::size_t>(img.height) * static_cast<std::size_t>(ow));
  for (int y = 0; y < img.height; ++y) {
    const std::uint16_t* src = img.data.data() + img.index(0, y);
    std::int64_t* dst = rows.data() + static_cast<std::size_t>(y) * static_cast<std::size_t>(ow);
    for (int ox = 0; ox < ow; ++ox) {
      std::int64_t s = 0;
      for (const auto& t : xtaps[static_cast<std::size_t>(ox)]) s += t.weight * src[t.src];
      dst[ox] = s;
    }
  }

  const std::int64_t denom = static_cast<std::int64_t>(img.width) * img.height;
  Image16 out(ow, oh);
  std::vector<std::int64_t> acc(static_cast<std::size_t>(ow));
  for (int oy = 0; oy < oh; ++oy) {
    std::fill(acc.begin(), acc.end(), 0);
    for (const auto& t : ytaps[static_cast<std::size_t>(oy)]) {
      const std::int64_t* src = rows.data() + static_cast<std::size_t>(t.src) * static_cast<std::size_t>(ow);
      for (int ox = 0; ox < ow; ++ox) acc[static_cast<std::size_t>(ox)] += t.weight * src[ox];
    }
    for (int ox = 0; ox < ow; ++ox) {
      // round half up: floor(S/D + 1/2)
      const std::int64_t v = (2 * acc[static_cast<std::size_t>(ox)] + denom) / (2 * denom);
      out.at(ox, oy) = static_cast<std::uint16_t>(std::min<std::int64_t>(v, 65535));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Intensity statistics

struct MeanStd {
  double mean = 0.0;
  double stddev = 0.0;
};

/// Pixel mean and population standard deviation, two-pass.
template <typename T>
MeanStd mean_std(std::span<const T> values) {
  if (values.empty()) throw Error("mean_std: empty input");
  double sum = 0.0;
  for (T v : values) sum += static_cast<double>(v);
  const double mean = sum / static_cast<double>(values.size());
  double ss = 0.0;
  for (T v : values) {
    const double d = static_cast<double>(v) - mean;
    ss += d * d;
  }
  return {mean, std::sqrt(ss / static_cast<double>(values.size()))};
}

/// Pooled mean and population standard deviation over all pixels of a corpus.
inline GlobalStats compute_global_stats(std::span<const Image16> images) {
  if (images.empty()) throw Error("compute_global_stats: no images");
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& img : images) {
    for (auto v : img.data) sum += v;
    n += img.size();
  }
  const double mu = sum / static_cast<double>(n);
  double ss = 0.0;
  for (const auto& img : images)
    for (auto v : img.data) {
      const double d = v - mu;
      ss += d * d;
    }
  const double sigma = std::sqrt(ss / static_cast<double>(n));
  if (!(sigma > 0.0)) throw DegenerateInput("compute_global_stats: constant corpus (sigma = 0)");
  return {mu, sigma};
}

/// x' = (x - mu) / sigma for every pixel.
inline NormalizedImage normalize_global(const Image16& img, const GlobalStats& stats) {
  if (!(stats.sigma > 0.0) || !std::isfinite(stats.sigma) || !std::isfinite(stats.mu))
    throw Error("normalize_global: sigma must be positive and finite");
  NormalizedImage out(img.width, img.height);
  for (std::size_t i = 0; i < img.size(); ++i) out.data[i] = (img.data[i] - stats.mu) / stats.sigma;
  return out;
}

}  // namespace elpv
