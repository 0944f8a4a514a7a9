#pragma once

#include <charconv>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "json.hpp"

#include "elpv/detect.hpp"
#include "elpv/error.hpp"
#include "elpv/power.hpp"
#include "elpv/regress.hpp"

namespace elpv {

inline constexpr int kFormatVersion = 1;

// ---------------------------------------------------------------------------
// JSON helpers

inline nlohmann::json read_json_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw Error("cannot open " + path);
  try {
    return nlohmann::json::parse(f);
  } catch (const nlohmann::json::exception& e) {
    throw Error(path + ": " + e.what());
  }
}

inline void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("cannot write " + path);
  f << text;
  if (!f) throw Error("write failed: " + path);
}

inline void write_json_file(const std::string& path, const nlohmann::json& j) { write_text_file(path, j.dump(2) + "\n"); }

inline nlohmann::json box_to_json(const BoundingBox& b) { return nlohmann::json::array({b.x0, b.y0, b.x1, b.y1}); }

inline BoundingBox box_from_json(const nlohmann::json& j) {
  if (!j.is_array() || j.size() != 4) throw Error("box must be [x0, y0, x1, y1]");
  return {j[0].get<int>(), j[1].get<int>(), j[2].get<int>(), j[3].get<int>()};
}

inline nlohmann::json boxes_to_json(const std::vector<BoundingBox>& boxes) {
  auto a = nlohmann::json::array();
  for (const auto& b : boxes) a.push_back(box_to_json(b));
  return a;
}

inline std::vector<BoundingBox> boxes_from_json(const nlohmann::json& j) {
  std::vector<BoundingBox> out;
  for (const auto& b : j) out.push_back(box_from_json(b));
  return out;
}

// ---------------------------------------------------------------------------
// Models

inline nlohmann::json inactive_method_to_json(const InactiveMethod& m) {
  if (const auto* f = std::get_if<FixedThreshold>(&m)) return {{"method", "fixed"}, {"threshold", f->value}};
  return {{"method", "otsu"}};
}

inline InactiveMethod inactive_method_from_json(const nlohmann::json& j) {
  const auto method = j.value("method", std::string{"otsu"});
  if (method == "otsu") return OtsuThreshold{};
  if (method == "fixed") return FixedThreshold{j.at("threshold").get<std::uint16_t>()};
  throw Error("unknown inactive-area method: " + method);
}

/// A fitted SVR together with the feature standardization it was trained on.
struct SvrPredictor {
  FeatureNormalizer normalizer;
  SvrModel model;

  [[nodiscard]] double predict(const FeatureVector& f) const { return svr_predict(model, normalizer.apply(f)); }
};

struct AreaPredictor {
  AreaModel model;
  InactiveMethod method = OtsuThreshold{};

  [[nodiscard]] double predict(double fraction) const { return predict_area_model(model, fraction); }
};

using Predictor = std::variant<SvrPredictor, AreaPredictor>;

inline nlohmann::json predictor_to_json(const Predictor& p) {
  nlohmann::json j{{"format", "elpv-model"}, {"version", kFormatVersion}};
  if (const auto* s = std::get_if<SvrPredictor>(&p)) {
    j["kind"] = "svr";
    j["normalizer"] = {{"mean", s->normalizer.mean}, {"std", s->normalizer.stddev}};
    j["gamma"] = s->model.gamma;
    j["C"] = s->model.c;
    j["epsilon"] = s->model.epsilon;
    j["bias"] = s->model.bias;
    j["support_vectors"] = s->model.support_vectors;
    j["dual_coef"] = s->model.dual_coef;
  } else {
    const auto& a = std::get<AreaPredictor>(p);
    j["kind"] = "area";
    j["slope"] = a.model.slope;
    j["intercept"] = a.model.intercept;
    j["inactive"] = inactive_method_to_json(a.method);
  }
  return j;
}

inline Predictor predictor_from_json(const nlohmann::json& j) {
  try {
    if (j.value("format", std::string{}) != "elpv-model") throw Error("not a model file");
    if (j.at("version").get<int>() != kFormatVersion)
      throw Error("unsupported model version " + std::to_string(j.at("version").get<int>()));
    const auto kind = j.at("kind").get<std::string>();
    if (kind == "svr") {
      SvrPredictor s;
      s.normalizer.mean = j.at("normalizer").at("mean").get<std::vector<double>>();
      s.normalizer.stddev = j.at("normalizer").at("std").get<std::vector<double>>();
      s.model.gamma = j.at("gamma").get<double>();
      s.model.c = j.at("C").get<double>();
      s.model.epsilon = j.at("epsilon").get<double>();
      s.model.bias = j.at("bias").get<double>();
      s.model.support_vectors = j.at("support_vectors").get<std::vector<FeatureVector>>();
      s.model.dual_coef = j.at("dual_coef").get<std::vector<double>>();
      if (s.model.support_vectors.size() != s.model.dual_coef.size())
        throw Error("support vector / dual coefficient count mismatch");
      if (s.normalizer.mean.size() != s.normalizer.stddev.size()) throw Error("normalizer size mismatch");
      for (const auto& sv : s.model.support_vectors)
        if (sv.size() != s.normalizer.dims()) throw Error("support vector dimension mismatch");
      return s;
    }
    if (kind == "area") {
      AreaPredictor a;
      a.model.slope = j.at("slope").get<double>();
      a.model.intercept = j.at("intercept").get<double>();
      a.method = inactive_method_from_json(j.value("inactive", nlohmann::json::object()));
      return a;
    }
    throw Error("unknown model kind: " + kind);
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("model file: ") + e.what());
  }
}

inline Predictor load_predictor(const std::string& path) { return predictor_from_json(read_json_file(path)); }

// ---------------------------------------------------------------------------
// CSV

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) {
    if (!cell.empty() && cell.back() == '\r') cell.pop_back();
    out.push_back(cell);
  }
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

/// Finite decimal number; underflow rounds to the nearest representable value.
inline double parse_double(const std::string& s, const std::string& where) {
  double v = 0.0;
  const char* end = s.data() + s.size();
  const char* first = s.data() + (!s.empty() && s[0] == '+' ? 1 : 0);
  auto [ptr, ec] = std::from_chars(first, end, v);
  if (ec == std::errc::result_out_of_range && ptr == end) {
    v = std::strtod(s.c_str(), nullptr);
    ec = std::errc{};
  }
  if (s.empty() || ptr != end || ec != std::errc{} || !std::isfinite(v))
    throw Error(where + ": not a finite number: '" + s + "'");
  return v;
}

inline void check_csv_id(const std::string& id, const char* what) {
  if (id.empty() || id.find_first_of(",\r\n") != std::string::npos)
    throw Error(std::string(what) + ": sample_id must be non-empty and free of commas and newlines: '" + id + "'");
}

inline std::string fmt_double(double v) {
  std::ostringstream os;
  os << std::setprecision(std::numeric_limits<double>::max_digits10) << v;
  return os.str();
}

}  // namespace detail

/// sample_id -> feature vector, in file order.
struct FeatureTable {
  std::vector<std::string> ids;
  std::vector<FeatureVector> features;

  [[nodiscard]] std::map<std::string, FeatureVector> by_id() const {
    std::map<std::string, FeatureVector> m;
    for (std::size_t i = 0; i < ids.size(); ++i) m[ids[i]] = features[i];
    return m;
  }
};

inline std::string encode_features_csv(const FeatureTable& t) {
  std::ostringstream os;
  const std::size_t d = t.features.empty() ? 0 : t.features.front().size();
  os << "sample_id";
  for (std::size_t k = 0; k < d; ++k) os << ",f" << k;
  os << '\n';
  for (std::size_t i = 0; i < t.ids.size(); ++i) {
    if (t.features[i].size() != d) throw Error("features: inconsistent dimensions");
    detail::check_csv_id(t.ids[i], "features");
    os << t.ids[i];
    for (double v : t.features[i]) os << ',' << detail::fmt_double(v);
    os << '\n';
  }
  return os.str();
}

inline FeatureTable decode_features_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw Error("features: empty file");
  const auto header = detail::split_csv_line(line);
  if (header.empty() || header[0] != "sample_id") throw Error("features: header must start with sample_id");
  for (std::size_t k = 1; k < header.size(); ++k)
    if (header[k] != "f" + std::to_string(k - 1)) throw Error("features: unexpected column '" + header[k] + "'");
  if (header.size() < 2) throw Error("features: no feature columns");
  FeatureTable t;
  std::set<std::string> seen;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto cells = detail::split_csv_line(line);
    const std::string where = "features line " + std::to_string(lineno);
    if (cells.size() != header.size()) throw Error(where + ": expected " + std::to_string(header.size()) + " columns");
    FeatureVector f;
    for (std::size_t k = 1; k < cells.size(); ++k) f.push_back(detail::parse_double(cells[k], where));
    if (cells[0].empty()) throw Error(where + ": empty sample_id");
    if (!seen.insert(cells[0]).second) throw Error(where + ": duplicate sample_id " + cells[0]);
    t.ids.push_back(cells[0]);
    t.features.push_back(std::move(f));
  }
  return t;
}

inline FeatureTable load_features_csv(const std::string& path) { return decode_features_csv(read_file_bytes(path)); }

struct PredictionRow {
  std::string sample_id;
  double p_rel_hat = 0.0;
};

inline std::string encode_predictions_csv(const std::vector<PredictionRow>& rows) {
  std::ostringstream os;
  os << "sample_id,p_rel_hat\n";
  for (const auto& r : rows) {
    detail::check_csv_id(r.sample_id, "predictions");
    os << r.sample_id << ',' << detail::fmt_double(r.p_rel_hat) << '\n';
  }
  return os.str();
}

inline std::vector<PredictionRow> decode_predictions_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw Error("predictions: empty file");
  const auto header = detail::split_csv_line(line);
  if (header.size() != 2 || header[0] != "sample_id" || header[1] != "p_rel_hat")
    throw Error("predictions: header must be sample_id,p_rel_hat");
  std::vector<PredictionRow> rows;
  std::set<std::string> seen;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto cells = detail::split_csv_line(line);
    const std::string where = "predictions line " + std::to_string(lineno);
    if (cells.size() != 2) throw Error(where + ": expected 2 columns");
    if (cells[0].empty()) throw Error(where + ": empty sample_id");
    if (!seen.insert(cells[0]).second) throw Error(where + ": duplicate sample_id " + cells[0]);
    rows.push_back({cells[0], detail::parse_double(cells[1], where)});
  }
  return rows;
}

inline std::vector<PredictionRow> load_predictions_csv(const std::string& path) {
  return decode_predictions_csv(read_file_bytes(path));
}

}  // namespace elpv
