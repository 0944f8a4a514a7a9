#pragma once

#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "elpv/error.hpp"

namespace elpv {

/// One labeled (or unlabeled) measurement.
struct ManifestEntry {
  std::string sample_id;
  std::string image_path;
  std::string module_type = "T1";  ///< T1 | T2 | T3
  std::string instance_id;
  double p_nom = 0.0;                ///< Wp
  std::optional<double> p_mpp;       ///< Wp, absent for unlabeled samples
  std::string current_level = "high";  ///< high | low
  std::string setting = "indoor";      ///< indoor | onsite
  int rows = 10;
  int cols = 6;

  [[nodiscard]] bool labeled() const noexcept { return p_mpp.has_value(); }
  [[nodiscard]] double p_rel() const {
    if (!p_mpp) throw Error("sample " + sample_id + " has no p_mpp label");
    return *p_mpp / p_nom;
  }

  void validate() const {
    if (sample_id.empty()) throw Error("manifest entry without sample_id");
    if (instance_id.empty()) throw Error("manifest entry " + sample_id + ": instance_id must be non-empty");
    if (!(p_nom > 0.0)) throw Error("manifest entry " + sample_id + ": p_nom must be positive");
    if (p_mpp && !(*p_mpp <= 1.2 * p_nom)) throw Error("manifest entry " + sample_id + ": p_mpp exceeds 1.2 x p_nom");
    if (p_mpp && !(*p_mpp >= 0.0)) throw Error("manifest entry " + sample_id + ": p_mpp must be nonnegative");
    if (module_type != "T1" && module_type != "T2" && module_type != "T3")
      throw Error("manifest entry " + sample_id + ": module_type must be T1, T2 or T3");
    if (current_level != "high" && current_level != "low")
      throw Error("manifest entry " + sample_id + ": current_level must be high or low");
    if (setting != "indoor" && setting != "onsite")
      throw Error("manifest entry " + sample_id + ": setting must be indoor or onsite");
    if (rows < 1 || cols < 1) throw Error("manifest entry " + sample_id + ": bad cell grid");
  }
};

inline void to_json(nlohmann::json& j, const ManifestEntry& e) {
  j = nlohmann::json{{"sample_id", e.sample_id},         {"image_path", e.image_path}, {"module_type", e.module_type},
                     {"instance_id", e.instance_id},     {"p_nom", e.p_nom},           {"current_level", e.current_level},
                     {"setting", e.setting},             {"rows", e.rows},             {"cols", e.cols}};
  if (e.p_mpp) j["p_mpp"] = *e.p_mpp;
}

inline void from_json(const nlohmann::json& j, ManifestEntry& e) {
  e.sample_id = j.at("sample_id").get<std::string>();
  e.image_path = j.value("image_path", std::string{});
  e.module_type = j.value("module_type", std::string{"T1"});
  e.instance_id = j.at("instance_id").get<std::string>();
  e.p_nom = j.at("p_nom").get<double>();
  if (j.contains("p_mpp") && !j.at("p_mpp").is_null()) e.p_mpp = j.at("p_mpp").get<double>();
  e.current_level = j.value("current_level", std::string{"high"});
  e.setting = j.value("setting", std::string{"indoor"});
  e.rows = j.value("rows", 10);
  e.cols = j.value("cols", 6);
}

/// Parses JSON Lines; blank lines are skipped. Errors carry the line number.
inline std::vector<ManifestEntry> parse_manifest(std::istream& in) {
  std::vector<ManifestEntry> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      auto e = nlohmann::json::parse(line).get<ManifestEntry>();
      e.validate();
      out.push_back(std::move(e));
    } catch (const nlohmann::json::exception& ex) {
      throw Error("manifest line " + std::to_string(lineno) + ": " + ex.what());
    } catch (const Error& ex) {
      throw Error("manifest line " + std::to_string(lineno) + ": " + ex.what());
    }
  }
  return out;
}

inline std::vector<ManifestEntry> load_manifest(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw Error("cannot open manifest: " + path);
  return parse_manifest(f);
}

inline void save_manifest(const std::vector<ManifestEntry>& entries, const std::string& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw Error("cannot write manifest: " + path);
  for (const auto& e : entries) f << nlohmann::json(e).dump() << '\n';
}

/// Filter of the form "field=value[,value...]" on module_type, current_level,
/// setting or instance_id. A bare value is taken as a module type.
inline bool matches_subset(const ManifestEntry& e, const std::string& filter) {
  if (filter.empty()) return true;
  std::string field = "module_type";
  std::string values = filter;
  if (auto eq = filter.find('='); eq != std::string::npos) {
    field = filter.substr(0, eq);
    values = filter.substr(eq + 1);
  }
  const std::string* target = nullptr;
  if (field == "module_type")
    target = &e.module_type;
  else if (field == "current_level")
    target = &e.current_level;
  else if (field == "setting")
    target = &e.setting;
  else if (field == "instance_id")
    target = &e.instance_id;
  else
    throw Error("unknown subset field: " + field);
  std::stringstream ss(values);
  std::string v;
  while (std::getline(ss, v, ','))
    if (v == *target) return true;
  return false;
}

}  // namespace elpv
