// elpv: batch front end for detection, rectification, power regression,
// cross-validation, tuning and per-cell loss rendering.
//
// Exit codes: 0 success, 1 some items failed, 2 invalid input.

#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "elpv/elpv.hpp"

using nlohmann::json;
namespace fs = std::filesystem;
using namespace elpv;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitPartial = 1;
constexpr int kExitInvalid = 2;

void warn(const std::string& msg) { std::cerr << "warning: " << msg << '\n'; }

std::string dir_of(const std::string& path) { return fs::path(path).parent_path().string(); }

void ensure_parent(const std::string& path) {
  const auto parent = fs::path(path).parent_path();
  if (!parent.empty()) fs::create_directories(parent);
}

void write_json_out(const std::string& path, const json& j) {
  ensure_parent(path);
  write_json_file(path, j);
}

void write_text_out(const std::string& path, const std::string& text) {
  ensure_parent(path);
  write_text_file(path, text);
}

// ---------------------------------------------------------------------------
// Options that can come from the command line or from a --config JSON object.
// Explicit flags win over the config file; the resolved values are embedded
// in every output.

class Params {
 public:
  explicit Params(CLI::App* app) : app_(app) {
    app_->add_option("--config", config_path_, "JSON object with option values (keys as listed in outputs)");
  }

  template <typename T>
  CLI::Option* add(const std::string& flag, const std::string& key, T& var, const std::string& desc) {
    CLI::Option* opt = nullptr;
    if constexpr (std::is_same_v<T, bool>)
      opt = app_->add_flag(flag, var, desc);
    else
      opt = app_->add_option(flag, var, desc)->capture_default_str();
    items_.push_back({key, opt, [&var](const json& j) { var = j.get<T>(); }, [&var] { return json(var); }});
    return opt;
  }

  /// Applies the config file, then returns the resolved configuration.
  json resolve() {
    if (!config_path_.empty()) {
      const json cfg = read_json_file(config_path_);
      if (!cfg.is_object()) throw Error("--config: expected a JSON object");
      for (const auto& [key, value] : cfg.items()) {
        auto it = std::find_if(items_.begin(), items_.end(), [&](const Item& i) { return i.key == key; });
        if (it == items_.end()) throw Error("--config: unknown key '" + key + "'");
        if (it->opt->count() == 0) {
          try {
            it->set(value);
          } catch (const json::exception& e) {
            throw Error("--config: bad value for '" + key + "': " + e.what());
          }
        }
      }
    }
    json out = json::object();
    for (const auto& i : items_) out[i.key] = i.get();
    return out;
  }

 private:
  struct Item {
    std::string key;
    CLI::Option* opt;
    std::function<void(const json&)> set;
    std::function<json()> get;
  };
  CLI::App* app_;
  std::string config_path_;
  std::vector<Item> items_;
};

json envelope(const std::string& command, const json& config) {
  return {{"format_version", kFormatVersion}, {"command", command}, {"config", config}};
}

/// CSV outputs keep their exchange format; the run configuration goes next to them.
void write_sidecar(const std::string& csv_path, const std::string& command, const json& config) {
  write_json_out(csv_path + ".run.json", envelope(command, config));
}

InactiveMethod inactive_method(int threshold) {
  if (threshold < 0) return OtsuThreshold{};
  if (threshold > 65535) throw Error("inactive threshold must be <= 65535");
  return FixedThreshold{static_cast<std::uint16_t>(threshold)};
}

DetectionParams detection_params(const std::string& file, double scale, double min_area_ratio) {
  DetectionParams p{scale, min_area_ratio};
  if (!file.empty()) {
    const json j = read_json_file(file);
    const json& src = j.contains("params") ? j.at("params") : j;
    p.scale = src.at("scale").get<double>();
    p.min_area_ratio = src.at("min_area_ratio").get<double>();
  }
  p.validate();
  return p;
}

std::map<std::string, std::vector<BoundingBox>> load_annotations(const std::string& path) {
  const json j = read_json_file(path);
  if (!j.contains("boxes") || !j.at("boxes").is_object()) throw Error(path + ": expected a 'boxes' object");
  std::map<std::string, std::vector<BoundingBox>> out;
  for (const auto& [id, boxes] : j.at("boxes").items()) out[id] = boxes_from_json(boxes);
  return out;
}

std::vector<AnnotatedImage> annotated_corpus(const std::vector<ManifestEntry>& entries, const std::string& base,
                                             const std::map<std::string, std::vector<BoundingBox>>& boxes, int jobs) {
  std::vector<AnnotatedImage> corpus(entries.size());
  parallel_for(entries.size(), jobs, [&](std::size_t i) {
    const auto it = boxes.find(entries[i].sample_id);
    if (it == boxes.end()) throw Error("no annotation for " + entries[i].sample_id);
    corpus[i] = {load_pgm16(resolve_path(base, entries[i].image_path)), it->second};
  });
  return corpus;
}

std::vector<double> pr_taus() {
  std::vector<double> t;
  for (int k = 50; k <= 100; ++k) t.push_back(k / 100.0);
  return t;
}

std::string pr_csv(const std::vector<PrPoint>& curve) {
  std::string s = "tau,precision,recall,f1\n";
  for (const auto& p : curve) {
    char buf[128];
    std::snprintf(buf, sizeof buf, "%.2f,%.17g,%.17g,%.17g\n", p.tau, p.precision, p.recall, p.f1);
    s += buf;
  }
  return s;
}

std::string scatter_csv(const std::vector<ManifestEntry>& entries, const std::vector<double>& pred) {
  std::string s = "sample_id,module_type,current_level,setting,p_nom,p_rel,p_rel_hat,p_mpp,p_mpp_hat\n";
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto& e = entries[i];
    if (!e.labeled()) continue;
    char buf[256];
    std::snprintf(buf, sizeof buf, ",%s,%s,%s,%.17g,%.17g,%.17g,%.17g,%.17g\n", e.module_type.c_str(),
                  e.current_level.c_str(), e.setting.c_str(), e.p_nom, e.p_rel(), pred[i], *e.p_mpp, pred[i] * e.p_nom);
    s += e.sample_id + buf;
  }
  return s;
}

void print_summary_row(const std::string& name, const ErrorSummary& e) {
  std::printf("%-24s %6zu %10.5f %10.5f %12.5f %9.2f\n", name.c_str(), e.n, e.mae, e.rmse, e.rmse_conventional,
              e.mae_wp);
}

void print_report(const MetricsReport& r) {
  std::printf("%-24s %6s %10s %10s %12s %9s\n", "", "n", "mae", "rmse", "rmse_conv", "mae_wp");
  print_summary_row("overall", r.overall);
  for (const auto& f : r.folds) print_summary_row("fold " + std::to_string(f.fold), f.errors);
  for (const auto& [k, v] : r.subsets) print_summary_row(k, v);
  if (r.folds.size() > 1) std::printf("mae across folds: %.5f +- %.5f\n", r.overall.mae, r.mae_fold_std);
}

/// Loads samples one by one; failures are reported and the sample dropped.
std::vector<Sample> load_samples_lenient(const std::vector<ManifestEntry>& entries, const std::string& base,
                                         const SampleOptions& opt, std::vector<std::string>& failures) {
  std::vector<std::optional<Sample>> slots(entries.size());
  std::vector<std::string> errors(entries.size());
  parallel_for(entries.size(), opt.jobs, [&](std::size_t i) {
    SampleOptions one = opt;
    one.jobs = 1;
    try {
      slots[i] = load_samples({entries[i]}, base, one).front();
    } catch (const std::exception& e) {
      errors[i] = e.what();
    }
  });
  std::vector<Sample> out;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    if (slots[i])
      out.push_back(std::move(*slots[i]));
    else
      failures.push_back(errors[i]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// synth

struct SynthCmd {
  std::string out;
  std::string kind = "modules";
  std::uint64_t seed = 1;
  std::size_t samples = 200;
  int max_per_instance = 3;
  double max_fraction = 0.4;
  double label_noise = 0.01;
  bool mixed = false;
  int cell_px = 12;
  double pixel_noise = 0.0;
  int scenes = 40;
  int min_modules = 2;
  int max_modules = 7;
  int width = 2048;
  int height = 2048;
  bool partial = false;

  void setup(Params& p) {
    p.add("--out", "out", out, "output directory")->required();
    p.add("--kind", "kind", kind, "modules (labeled rectified modules) or scenes (annotated measurements)")
        ->check(CLI::IsMember({"modules", "scenes"}));
    p.add("--seed", "seed", seed, "generator seed");
    p.add("--samples", "samples", samples, "number of module samples");
    p.add("--max-per-instance", "max_per_instance", max_per_instance, "longest measurement series per module");
    p.add("--max-fraction", "max_fraction", max_fraction, "largest inactive-area fraction");
    p.add("--label-noise", "label_noise", label_noise, "standard deviation of the p_rel label noise");
    p.add("--mixed", "mixed_subsets", mixed, "cycle module type, current level and setting per instance");
    p.add("--cell-px", "cell_px", cell_px, "pixels per cell of the rectified modules");
    p.add("--pixel-noise", "pixel_noise", pixel_noise, "Gaussian pixel noise of the module images");
    p.add("--scenes", "scenes", scenes, "number of scenes");
    p.add("--min-modules", "min_modules", min_modules, "fewest modules per scene");
    p.add("--max-modules", "max_modules", max_modules, "most modules per scene");
    p.add("--width", "width", width, "scene width");
    p.add("--height", "height", height, "scene height");
    p.add("--partial", "partial_module", partial, "add a border-clipped module to every other scene");
  }

  int run(const json& cfg) const {
    fs::create_directories(out);
    if (kind == "modules") {
      DatasetSpec spec;
      spec.samples = samples;
      spec.max_per_instance = max_per_instance;
      spec.max_fraction = max_fraction;
      spec.label_noise = label_noise;
      spec.mixed_subsets = mixed;
      spec.module.cell_px = cell_px;
      spec.module.noise_sigma = pixel_noise;
      spec.seed = seed;
      const auto entries = write_synth_dataset(out, spec);
      auto j = envelope("synth", cfg);
      j["dataset"] = to_json(spec);
      j["samples"] = entries.size();
      write_json_out((fs::path(out) / "synth.json").string(), j);
      std::printf("wrote %zu module samples to %s\n", entries.size(), out.c_str());
      return kExitOk;
    }
    if (scenes < 1 || min_modules < 1 || max_modules < min_modules) throw Error("synth: bad scene counts");
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<int> count(min_modules, max_modules);
    fs::create_directories(fs::path(out) / "images");
    std::vector<ManifestEntry> entries;
    json boxes = json::object(), inactive = json::object();
    for (int k = 0; k < scenes; ++k) {
      SceneSpec s;
      s.width = width;
      s.height = height;
      s.module_count = count(rng);
      s.partial_module = partial && k % 2 == 1;
      s.seed = rng();
      const auto scene = synth_scene(s);
      ManifestEntry e;
      e.sample_id = "scene" + std::to_string(k);
      e.instance_id = e.sample_id;
      e.image_path = "images/" + e.sample_id + ".pgm";
      e.p_nom = 230.0;
      e.rows = s.cell_rows;
      e.cols = s.cell_cols;
      save_pgm16(scene.image, (fs::path(out) / e.image_path).string());
      boxes[e.sample_id] = boxes_to_json(scene.boxes);
      inactive[e.sample_id] = scene.inactive;
      entries.push_back(e);
    }
    save_manifest(entries, (fs::path(out) / "manifest.jsonl").string());
    auto j = envelope("synth", cfg);
    j["boxes"] = boxes;
    j["inactive_fraction"] = inactive;
    write_json_out((fs::path(out) / "annotations.json").string(), j);
    std::printf("wrote %d scenes to %s\n", scenes, out.c_str());
    return kExitOk;
  }
};

// ---------------------------------------------------------------------------
// detect

struct DetectCmd {
  std::string manifest, out, detection, annotations, pr_out;
  double scale = DetectionParams{}.scale;
  double min_area_ratio = DetectionParams{}.min_area_ratio;
  double tau = 0.9;
  int jobs = 1;

  void setup(Params& p) {
    p.add("--manifest", "manifest", manifest, "measurements (JSON Lines)")->required();
    p.add("--out", "out", out, "detections JSON")->required();
    p.add("--detection", "detection", detection, "tuned parameters from tune-detect");
    p.add("--scale", "scale", scale, "processing scale");
    p.add("--min-area-ratio", "min_area_ratio", min_area_ratio, "minimum area relative to the largest region");
    p.add("--annotations", "annotations", annotations, "ground-truth boxes; enables scoring");
    p.add("--tau", "tau", tau, "IoU threshold for scoring");
    p.add("--pr-csv", "pr_csv", pr_out, "precision/recall over IoU thresholds (needs --annotations)");
    p.add("--jobs", "jobs", jobs, "worker threads");
  }

  int run(const json& cfg) const {
    const auto params = detection_params(detection, scale, min_area_ratio);
    const auto entries = load_manifest(manifest);
    const auto base = dir_of(manifest);
    std::vector<std::vector<BoundingBox>> found(entries.size());
    std::vector<std::string> errors(entries.size());
    parallel_for(entries.size(), jobs, [&](std::size_t i) {
      try {
        found[i] = detect_modules(load_pgm16(resolve_path(base, entries[i].image_path)), params);
      } catch (const std::exception& e) {
        errors[i] = e.what();
      }
    });
    auto j = envelope("detect", cfg);
    j["params"] = {{"scale", params.scale}, {"min_area_ratio", params.min_area_ratio}};
    json list = json::array();
    std::size_t failed = 0;
    for (std::size_t i = 0; i < entries.size(); ++i) {
      json d{{"sample_id", entries[i].sample_id}, {"boxes", boxes_to_json(found[i])}};
      d["status"] = errors[i].empty() ? "ok" : "error";
      if (!errors[i].empty()) {
        d["error"] = errors[i];
        warn(entries[i].sample_id + ": " + errors[i]);
        ++failed;
      }
      list.push_back(std::move(d));
    }
    j["detections"] = std::move(list);
    if (!annotations.empty()) {
      const auto gt = load_annotations(annotations);
      std::vector<std::vector<BoundingBox>> truth;
      for (const auto& e : entries) {
        const auto it = gt.find(e.sample_id);
        if (it == gt.end()) throw Error("no annotation for " + e.sample_id);
        truth.push_back(it->second);
      }
      const double t[] = {tau};
      const auto at_tau = pr_curve(found, truth, t).front();
      j["score"] = {{"tau", tau}, {"precision", at_tau.precision}, {"recall", at_tau.recall}, {"f1", at_tau.f1}};
      std::printf("tau %.2f: precision %.4f recall %.4f f1 %.4f\n", tau, at_tau.precision, at_tau.recall, at_tau.f1);
      if (!pr_out.empty()) {
        const auto taus = pr_taus();
        write_text_out(pr_out, pr_csv(pr_curve(found, truth, taus)));
        write_sidecar(pr_out, "detect", cfg);
      }
    } else if (!pr_out.empty()) {
      throw Error("--pr-csv needs --annotations");
    }
    write_json_out(out, j);
    std::printf("%zu measurements, %zu failed\n", entries.size(), failed);
    return failed ? kExitPartial : kExitOk;
  }
};

// ---------------------------------------------------------------------------
// rectify

struct RectifyCmd {
  std::string manifest, out, detection;
  double scale = DetectionParams{}.scale;
  double min_area_ratio = DetectionParams{}.min_area_ratio;
  int cell_px = 100;
  int jobs = 1;

  void setup(Params& p) {
    p.add("--manifest", "manifest", manifest, "measurements (JSON Lines)")->required();
    p.add("--out", "out", out, "output directory for module images and their manifest")->required();
    p.add("--detection", "detection", detection, "tuned parameters from tune-detect");
    p.add("--scale", "scale", scale, "processing scale");
    p.add("--min-area-ratio", "min_area_ratio", min_area_ratio, "minimum area relative to the largest region");
    p.add("--cell-px", "cell_px", cell_px, "pixels per cell in the rectified image");
    p.add("--jobs", "jobs", jobs, "worker threads");
  }

  int run(const json& cfg) const {
    const auto params = detection_params(detection, scale, min_area_ratio);
    const auto entries = load_manifest(manifest);
    const auto base = dir_of(manifest);
    fs::create_directories(fs::path(out) / "images");
    std::vector<std::vector<ManifestEntry>> produced(entries.size());
    std::vector<std::vector<BoundingBox>> boxes(entries.size());
    std::vector<std::string> errors(entries.size());
    parallel_for(entries.size(), jobs, [&](std::size_t i) {
      const auto& e = entries[i];
      try {
        const Image16 img = load_pgm16(resolve_path(base, e.image_path));
        boxes[i] = detect_modules(img, params);
        for (std::size_t m = 0; m < boxes[i].size(); ++m) {
          const auto mod = rectify_module(img, boxes[i][m], {e.rows, e.cols, cell_px});
          ManifestEntry r = e;
          r.sample_id = e.sample_id + "_m" + std::to_string(m);
          r.instance_id = e.instance_id + "_m" + std::to_string(m);
          r.image_path = "images/" + r.sample_id + ".pgm";
          r.rows = mod.rows;
          r.cols = mod.cols;
          // A measurement label only describes a module if it is the only one.
          if (boxes[i].size() != 1) r.p_mpp.reset();
          save_pgm16(mod.image, (fs::path(out) / r.image_path).string());
          produced[i].push_back(std::move(r));
        }
      } catch (const std::exception& ex) {
        errors[i] = ex.what();
        produced[i].clear();
      }
    });
    std::vector<ManifestEntry> all;
    json report = json::array();
    std::size_t failed = 0;
    for (std::size_t i = 0; i < entries.size(); ++i) {
      json r{{"sample_id", entries[i].sample_id}, {"status", errors[i].empty() ? "ok" : "error"}};
      if (errors[i].empty()) {
        r["boxes"] = boxes_to_json(boxes[i]);
        json ids = json::array();
        for (const auto& m : produced[i]) ids.push_back(m.sample_id);
        r["modules"] = ids;
      } else {
        r["error"] = errors[i];
        warn(entries[i].sample_id + ": " + errors[i]);
        ++failed;
      }
      report.push_back(std::move(r));
      all.insert(all.end(), produced[i].begin(), produced[i].end());
    }
    save_manifest(all, (fs::path(out) / "manifest.jsonl").string());
    auto j = envelope("rectify", cfg);
    j["params"] = {{"scale", params.scale}, {"min_area_ratio", params.min_area_ratio}};
    j["measurements"] = std::move(report);
    write_json_out((fs::path(out) / "rectify.json").string(), j);
    std::printf("%zu modules from %zu measurements, %zu failed\n", all.size(), entries.size(), failed);
    return failed ? kExitPartial : kExitOk;
  }
};

// ---------------------------------------------------------------------------
// features

struct FeaturesCmd {
  std::string manifest, out;
  int jobs = 1;

  void setup(Params& p) {
    p.add("--manifest", "manifest", manifest, "rectified modules (JSON Lines)")->required();
    p.add("--out", "out", out, "features CSV (sample_id,f0,f1)")->required();
    p.add("--jobs", "jobs", jobs, "worker threads");
  }

  int run(const json& cfg) const {
    const auto entries = load_manifest(manifest);
    std::vector<std::string> failures;
    SampleOptions opt;
    opt.need_fraction = false;
    opt.jobs = jobs;
    const auto samples = load_samples_lenient(entries, dir_of(manifest), opt, failures);
    for (const auto& f : failures) warn(f);
    FeatureTable t;
    for (const auto& s : samples) {
      t.ids.push_back(s.entry.sample_id);
      t.features.push_back(s.features);
    }
    write_text_out(out, encode_features_csv(t));
    write_sidecar(out, "features", cfg);
    std::printf("%zu samples, %zu failed\n", samples.size(), failures.size());
    return failures.empty() ? kExitOk : kExitPartial;
  }
};

// ---------------------------------------------------------------------------
// Shared estimator settings

struct EstimatorOpts {
  std::string features;
  int inactive_threshold = -1;
  double gamma = 0.0;
  double tolerance = 1e-3;

  void setup(Params& p) {
    p.add("--features", "features", features, "external features CSV replacing image features");
    p.add("--inactive-threshold", "inactive_threshold", inactive_threshold,
          "fixed inactive-pixel threshold; negative selects Otsu");
    p.add("--gamma", "gamma", gamma, "RBF gamma; 0 selects 1/(d var) of the standardized features");
    p.add("--tolerance", "tolerance", tolerance, "SVR stopping tolerance");
  }

  std::optional<double> gamma_opt() const { return gamma > 0.0 ? std::optional<double>(gamma) : std::nullopt; }

  std::vector<Sample> load(const std::vector<ManifestEntry>& entries, const std::string& base, bool need_fraction,
                           int jobs, FeatureTable& storage) const {
    SampleOptions opt;
    opt.inactive = inactive_method(inactive_threshold);
    opt.need_fraction = need_fraction;
    opt.jobs = jobs;
    if (!features.empty()) {
      storage = load_features_csv(features);
      opt.external = &storage;
    }
    return load_samples(entries, base, opt);
  }
};

// ---------------------------------------------------------------------------
// fit-svr / fit-area

struct FitSvrCmd {
  std::string manifest, out, tuned;
  double c = 1.0;
  double epsilon = 0.1;
  int jobs = 1;
  EstimatorOpts est;

  void setup(Params& p) {
    p.add("--manifest", "manifest", manifest, "labeled rectified modules")->required();
    p.add("--out", "out", out, "model JSON")->required();
    p.add("--C", "C", c, "box constraint");
    p.add("--epsilon", "epsilon", epsilon, "tube half-width");
    p.add("--tuned", "tuned", tuned, "take C and epsilon from a tune-svr report");
    p.add("--jobs", "jobs", jobs, "worker threads for image loading");
    est.setup(p);
  }

  int run(const json& cfg) const {
    double cc = c, ee = epsilon;
    if (!tuned.empty()) {
      const json t = read_json_file(tuned).at("best");
      cc = t.at("C").get<double>();
      ee = t.at("epsilon").get<double>();
    }
    FeatureTable ext;
    const auto samples = est.load(load_manifest(manifest), dir_of(manifest), false, jobs, ext);
    if (samples.empty()) throw Error("fit-svr: empty manifest");
    std::vector<FeatureVector> x;
    std::vector<double> y;
    for (const auto& s : samples) {
      x.push_back(s.features);
      y.push_back(s.entry.p_rel());
    }
    const auto model = train_svr(x, y, cc, ee, est.gamma_opt(), est.tolerance);
    auto j = predictor_to_json(model);
    j["run"] = envelope("fit-svr", cfg);
    write_json_out(out, j);
    std::printf("svr: %zu samples, %zu support vectors, C %.6g epsilon %.6g\n", samples.size(),
                model.model.support_vectors.size(), cc, ee);
    return kExitOk;
  }
};

struct FitAreaCmd {
  std::string manifest, out;
  bool fix_intercept = false;
  int jobs = 1;
  EstimatorOpts est;

  void setup(Params& p) {
    p.add("--manifest", "manifest", manifest, "labeled rectified modules")->required();
    p.add("--out", "out", out, "model JSON")->required();
    p.add("--fix-intercept", "fix_intercept", fix_intercept, "pin the intercept to 1");
    p.add("--jobs", "jobs", jobs, "worker threads for image loading");
    p.add("--inactive-threshold", "inactive_threshold", est.inactive_threshold,
          "fixed inactive-pixel threshold; negative selects Otsu");
  }

  int run(const json& cfg) const {
    FeatureTable ext;
    const auto samples = est.load(load_manifest(manifest), dir_of(manifest), true, jobs, ext);
    if (samples.empty()) throw Error("fit-area: empty manifest");
    std::vector<double> f, y;
    for (const auto& s : samples) {
      f.push_back(s.fraction);
      y.push_back(s.entry.p_rel());
    }
    const AreaPredictor model{fit_area_model(f, y, fix_intercept), inactive_method(est.inactive_threshold)};
    auto j = predictor_to_json(model);
    j["run"] = envelope("fit-area", cfg);
    write_json_out(out, j);
    std::printf("area: p_rel = %.6f - %.6f * fraction (%zu samples)\n", model.model.intercept, model.model.slope,
                samples.size());
    return kExitOk;
  }
};

// ---------------------------------------------------------------------------
// predict

struct PredictCmd {
  std::string manifest, model, out, scatter, external, report;
  int jobs = 1;
  std::string features;

  void setup(Params& p) {
    p.add("--manifest", "manifest", manifest, "rectified modules")->required();
    p.add("--model", "model", model, "model JSON from fit-svr or fit-area");
    p.add("--predictions", "predictions", external, "score an existing predictions CSV instead of a model");
    p.add("--features", "features", features, "external features CSV for an SVR model");
    p.add("--out", "out", out, "predictions CSV (sample_id,p_rel_hat)");
    p.add("--scatter", "scatter", scatter, "truth vs prediction CSV for labeled samples");
    p.add("--report", "report", report, "error summary JSON for labeled samples");
    p.add("--jobs", "jobs", jobs, "worker threads");
  }

  int run(const json& cfg) const {
    if (model.empty() == external.empty()) throw Error("predict: give exactly one of --model and --predictions");
    if (out.empty() && scatter.empty() && report.empty()) throw Error("predict: nothing to write");
    const auto entries = load_manifest(manifest);
    std::vector<ManifestEntry> kept;
    std::vector<double> pred;
    std::vector<std::string> failures;
    if (!model.empty()) {
      const auto predictor = load_predictor(model);
      SampleOptions opt;
      opt.jobs = jobs;
      FeatureTable ext;
      if (const auto* a = std::get_if<AreaPredictor>(&predictor)) {
        opt.inactive = a->method;
      } else {
        opt.need_fraction = false;
        if (!features.empty()) {
          ext = load_features_csv(features);
          opt.external = &ext;
        }
      }
      for (const auto& s : load_samples_lenient(entries, dir_of(manifest), opt, failures)) {
        kept.push_back(s.entry);
        pred.push_back(predict_sample(predictor, s));
      }
    } else {
      std::map<std::string, double> by_id;
      for (const auto& r : load_predictions_csv(external)) by_id[r.sample_id] = r.p_rel_hat;
      for (const auto& e : entries) {
        const auto it = by_id.find(e.sample_id);
        if (it == by_id.end()) {
          failures.push_back("sample " + e.sample_id + ": no prediction");
          continue;
        }
        kept.push_back(e);
        pred.push_back(it->second);
      }
    }
    for (const auto& f : failures) warn(f);
    if (!out.empty()) {
      std::vector<PredictionRow> rows;
      for (std::size_t i = 0; i < kept.size(); ++i) rows.push_back({kept[i].sample_id, pred[i]});
      write_text_out(out, encode_predictions_csv(rows));
      write_sidecar(out, "predict", cfg);
    }
    if (!scatter.empty()) {
      write_text_out(scatter, scatter_csv(kept, pred));
      write_sidecar(scatter, "predict", cfg);
    }
    std::vector<double> t, p, n;
    for (std::size_t i = 0; i < kept.size(); ++i)
      if (kept[i].labeled()) {
        t.push_back(kept[i].p_rel());
        p.push_back(pred[i]);
        n.push_back(kept[i].p_nom);
      }
    if (!t.empty()) {
      const auto s = summarize(t, p, n);
      print_summary_row("labeled", s);
      if (!report.empty()) {
        auto j = envelope("predict", cfg);
        j["errors"] = to_json(s);
        write_json_out(report, j);
      }
    } else if (!report.empty()) {
      throw Error("predict: --report needs labeled samples");
    }
    std::printf("%zu predicted, %zu failed\n", kept.size(), failures.size());
    return failures.empty() ? kExitOk : kExitPartial;
  }
};

// ---------------------------------------------------------------------------
// cv

struct CvCmd {
  std::string manifest, out, folds_in, folds_out, predictions, scatter;
  std::string estimator = "area";
  std::string train_subset, test_subset;
  int k = 5;
  std::uint64_t seed = 0;
  int jobs = 1;
  std::size_t budget = 250;
  double val_fraction = 0.4;
  bool fix_intercept = false;
  EstimatorOpts est;

  void setup(Params& p) {
    p.add("--manifest", "manifest", manifest, "labeled rectified modules")->required();
    p.add("--out", "out", out, "report JSON")->required();
    p.add("--estimator", "estimator", estimator, "area or svr")->check(CLI::IsMember({"area", "svr"}));
    p.add("--k", "k", k, "number of folds");
    p.add("--seed", "seed", seed, "fold and search seed");
    p.add("--jobs", "jobs", jobs, "worker threads");
    p.add("--budget", "hpo_budget", budget, "random-search trials per fold (svr)");
    p.add("--val-fraction", "val_fraction", val_fraction, "validation share of the training folds (svr)");
    p.add("--fix-intercept", "fix_intercept", fix_intercept, "pin the area model's intercept to 1");
    p.add("--folds", "folds", folds_in, "use this fold assignment instead of building one");
    p.add("--folds-out", "folds_out", folds_out, "write the fold assignment");
    p.add("--train-subset", "train_subset", train_subset, "generalization mode: training subset filter");
    p.add("--test-subset", "test_subset", test_subset, "generalization mode: test subset filter");
    p.add("--predictions", "predictions", predictions, "held-out predictions CSV");
    p.add("--scatter", "scatter", scatter, "truth vs held-out prediction CSV");
    est.setup(p);
  }

  int run(const json& cfg_json) const {
    CvConfig cfg;
    cfg.estimator = estimator_from_string(estimator);
    cfg.k = k;
    cfg.seed = seed;
    cfg.jobs = jobs;
    cfg.hpo_budget = budget;
    cfg.val_fraction = val_fraction;
    cfg.fix_intercept = fix_intercept;
    cfg.inactive = inactive_method(est.inactive_threshold);
    cfg.gamma = est.gamma_opt();
    cfg.tolerance = est.tolerance;
    cfg.train_subset = train_subset;
    cfg.test_subset = test_subset;

    FeatureTable ext;
    const auto samples =
        est.load(load_manifest(manifest), dir_of(manifest), cfg.estimator == EstimatorKind::area, jobs, ext);
    std::optional<FoldAssignment> given;
    if (!folds_in.empty()) given = read_json_file(folds_in).get<FoldAssignment>();
    const auto run = run_cv(samples, cfg, given);

    auto j = envelope("cv", cfg_json);
    j["protocol"] = to_json(cfg);
    j["report"] = to_json(run.report);
    write_json_out(out, j);
    if (!folds_out.empty()) {
      if (!run.folds) throw Error("--folds-out is not available in generalization mode");
      write_json_out(folds_out, json(*run.folds));
    }
    if (!predictions.empty()) {
      write_text_out(predictions, encode_predictions_csv(run.report.predictions));
      write_sidecar(predictions, "cv", cfg_json);
    }
    if (!scatter.empty()) {
      std::vector<ManifestEntry> entries;
      std::vector<double> pred;
      for (std::size_t i = 0; i < run.report.predictions.size(); ++i) pred.push_back(run.report.predictions[i].p_rel_hat);
      // predictions follow the evaluated samples in input order
      std::map<std::string, const ManifestEntry*> by_id;
      for (const auto& s : samples) by_id[s.entry.sample_id] = &s.entry;
      for (const auto& r : run.report.predictions) entries.push_back(*by_id.at(r.sample_id));
      write_text_out(scatter, scatter_csv(entries, pred));
      write_sidecar(scatter, "cv", cfg_json);
    }
    print_report(run.report);
    return kExitOk;
  }
};

// ---------------------------------------------------------------------------
// tune-detect / tune-svr

struct TuneDetectCmd {
  std::string manifest, annotations, out, pr_out;
  std::size_t budget = 30;
  double tau = 0.9;
  std::uint64_t seed = 0;
  int jobs = 1;

  void setup(Params& p) {
    p.add("--manifest", "manifest", manifest, "annotated measurements")->required();
    p.add("--annotations", "annotations", annotations, "ground-truth boxes")->required();
    p.add("--out", "out", out, "tuning report JSON")->required();
    p.add("--budget", "budget", budget, "number of trials");
    p.add("--tau", "tau", tau, "IoU threshold of the F1 objective");
    p.add("--seed", "seed", seed, "search seed");
    p.add("--jobs", "jobs", jobs, "worker threads");
    p.add("--pr-csv", "pr_csv", pr_out, "precision/recall over IoU thresholds for the chosen parameters");
  }

  int run(const json& cfg) const {
    const auto entries = load_manifest(manifest);
    const auto corpus = annotated_corpus(entries, dir_of(manifest), load_annotations(annotations), jobs);
    TuneOptions opt;
    opt.budget = budget;
    opt.tau = tau;
    opt.seed = seed;
    opt.jobs = jobs;
    const auto r = tune_detection(corpus, opt);
    auto j = envelope("tune-detect", cfg);
    j["params"] = {{"scale", r.params.scale}, {"min_area_ratio", r.params.min_area_ratio}};
    j["f1"] = r.f1;
    json trials = json::array();
    for (const auto& t : r.search.trials) {
      json tj{{"index", t.index}, {"params", t.params}, {"f1", t.score}};
      if (!t.error.empty()) tj["error"] = t.error;
      if (!std::isfinite(t.score)) tj["f1"] = nullptr;
      trials.push_back(std::move(tj));
    }
    j["trials"] = std::move(trials);
    write_json_out(out, j);
    if (!pr_out.empty()) {
      std::vector<std::vector<BoundingBox>> found;
      score_detection(corpus, r.params, tau, &found);
      std::vector<std::vector<BoundingBox>> truth;
      for (const auto& c : corpus) truth.push_back(c.boxes);
      const auto taus = pr_taus();
      write_text_out(pr_out, pr_csv(pr_curve(found, truth, taus)));
      write_sidecar(pr_out, "tune-detect", cfg);
    }
    std::printf("scale %.4f min_area_ratio %.4f f1 %.4f at tau %.2f\n", r.params.scale, r.params.min_area_ratio, r.f1,
                tau);
    return kExitOk;
  }
};

struct TuneSvrCmd {
  std::string manifest, out;
  std::size_t budget = 250;
  double val_fraction = 0.4;
  std::uint64_t seed = 0;
  int jobs = 1;
  EstimatorOpts est;

  void setup(Params& p) {
    p.add("--manifest", "manifest", manifest, "labeled rectified modules")->required();
    p.add("--out", "out", out, "tuning report JSON")->required();
    p.add("--budget", "budget", budget, "number of trials");
    p.add("--val-fraction", "val_fraction", val_fraction, "validation share");
    p.add("--seed", "seed", seed, "split and search seed");
    p.add("--jobs", "jobs", jobs, "worker threads for image loading");
    est.setup(p);
  }

  int run(const json& cfg_json) const {
    CvConfig cfg;
    cfg.estimator = EstimatorKind::svr;
    cfg.hpo_budget = budget;
    cfg.val_fraction = val_fraction;
    cfg.gamma = est.gamma_opt();
    cfg.tolerance = est.tolerance;
    FeatureTable ext;
    const auto samples = est.load(load_manifest(manifest), dir_of(manifest), false, jobs, ext);
    for (const auto& s : samples)
      if (!s.entry.labeled()) throw Error("tune-svr: sample " + s.entry.sample_id + " is unlabeled");
    const auto t = tune_svr(samples, cfg, seed);
    auto j = envelope("tune-svr", cfg_json);
    j["best"] = {{"C", t.c}, {"epsilon", t.epsilon}, {"val_mae", -t.search.best.score}};
    json trials = json::array();
    for (const auto& tr : t.search.trials) {
      json tj{{"index", tr.index}, {"params", tr.params}};
      tj["val_mae"] = std::isfinite(tr.score) ? json(-tr.score) : json(nullptr);
      if (!tr.error.empty()) tj["error"] = tr.error;
      trials.push_back(std::move(tj));
    }
    j["trials"] = std::move(trials);
    write_json_out(out, j);
    std::printf("C %.6g epsilon %.6g validation mae %.5f\n", t.c, t.epsilon, -t.search.best.score);
    return kExitOk;
  }
};

// ---------------------------------------------------------------------------
// cell-loss

struct CellLossCmd {
  std::string manifest, out, maps_dir, model, csv, maps_out;
  double healthy_threshold = 0.98;
  bool no_debias = false;
  int jobs = 1;

  void setup(Params& p) {
    p.add("--manifest", "manifest", manifest, "rectified modules")->required();
    p.add("--out", "out", out, "per-cell report JSON")->required();
    p.add("--maps-dir", "maps_dir", maps_dir, "directory of <sample_id>.plm loss maps");
    p.add("--model", "model", model, "area model used to derive maps from the images when no maps are given");
    p.add("--healthy-threshold", "healthy_threshold", healthy_threshold, "labeled p_rel at or above which a map is healthy");
    p.add("--no-debias", "no_debias", no_debias, "skip the healthy-median correction");
    p.add("--csv", "csv", csv, "long-format table sample_id,row,col,loss_wp");
    p.add("--maps-out", "maps_out", maps_out, "write the (debiased) maps here");
    p.add("--jobs", "jobs", jobs, "worker threads");
  }

  int run(const json& cfg) const {
    if (maps_dir.empty() == model.empty()) throw Error("cell-loss: give exactly one of --maps-dir and --model");
    const auto entries = load_manifest(manifest);
    const auto base = dir_of(manifest);
    std::optional<AreaPredictor> area;
    if (!model.empty()) {
      const auto p = load_predictor(model);
      if (!std::holds_alternative<AreaPredictor>(p)) throw Error("cell-loss: --model must be an area model");
      area = std::get<AreaPredictor>(p);
    }
    std::vector<std::optional<LossMap>> maps(entries.size());
    std::vector<std::string> errors(entries.size());
    parallel_for(entries.size(), jobs, [&](std::size_t i) {
      const auto& e = entries[i];
      try {
        if (area)
          maps[i] = synth_loss_map(load_pgm16(resolve_path(base, e.image_path)), area->model, area->method);
        else
          maps[i] = load_loss_map((fs::path(maps_dir) / (e.sample_id + ".plm")).string());
        check_loss_map(*maps[i]);
      } catch (const std::exception& ex) {
        errors[i] = ex.what();
        maps[i].reset();
      }
    });

    if (!no_debias) {
      std::vector<LossMap> healthy, all;
      std::vector<std::size_t> idx;
      for (std::size_t i = 0; i < entries.size(); ++i) {
        if (!maps[i]) continue;
        if (entries[i].labeled() && entries[i].p_rel() >= healthy_threshold) healthy.push_back(*maps[i]);
        all.push_back(*maps[i]);
        idx.push_back(i);
      }
      if (!all.empty()) {
        if (healthy.empty()) throw Error("cell-loss: no healthy labeled samples for debiasing (use --no-debias)");
        auto fixed = debias_maps(all, healthy);
        for (std::size_t k = 0; k < idx.size(); ++k) maps[idx[k]] = std::move(fixed[k]);
      }
    }

    auto j = envelope("cell-loss", cfg);
    json list = json::array();
    std::string table = "sample_id,row,col,loss_wp\n";
    std::size_t failed = 0;
    for (std::size_t i = 0; i < entries.size(); ++i) {
      const auto& e = entries[i];
      json r{{"sample_id", e.sample_id}, {"p_nom", e.p_nom}};
      if (maps[i] && errors[i].empty()) {
        try {
          const CellGrid grid{std::max(e.rows, e.cols), std::min(e.rows, e.cols)};
          const auto cells = cell_losses(*maps[i], grid, e.p_nom);
          const double p_rel_hat = total_loss_from_map(*maps[i]);
          r["status"] = "ok";
          r["p_rel_hat"] = p_rel_hat;
          r["p_mpp_hat"] = PowerEstimate(p_rel_hat, e.p_nom).p_mpp_hat();
          r["rows"] = grid.rows;
          r["cols"] = grid.cols;
          r["cell_loss_wp"] = cells;
          for (int row = 0; row < grid.rows; ++row)
            for (int col = 0; col < grid.cols; ++col)
              table += e.sample_id + "," + std::to_string(row) + "," + std::to_string(col) + "," +
                       detail::fmt_double(cells[static_cast<std::size_t>(row * grid.cols + col)]) + "\n";
          if (!maps_out.empty()) {
            fs::create_directories(maps_out);
            save_loss_map(*maps[i], (fs::path(maps_out) / (e.sample_id + ".plm")).string());
          }
        } catch (const std::exception& ex) {
          errors[i] = ex.what();
        }
      }
      if (!errors[i].empty()) {
        r["status"] = "error";
        r["error"] = errors[i];
        warn(e.sample_id + ": " + errors[i]);
        ++failed;
      }
      list.push_back(std::move(r));
    }
    j["samples"] = std::move(list);
    write_json_out(out, j);
    if (!csv.empty()) {
      write_text_out(csv, table);
      write_sidecar(csv, "cell-loss", cfg);
    }
    std::printf("%zu maps, %zu failed\n", entries.size() - failed, failed);
    return failed ? kExitPartial : kExitOk;
  }
};

// ---------------------------------------------------------------------------
// inspect

struct InspectCmd {
  std::string manifest, model, out, detection, cell_model;
  double scale = DetectionParams{}.scale;
  double min_area_ratio = DetectionParams{}.min_area_ratio;
  int cell_px = 100;
  int jobs = 1;

  void setup(Params& p) {
    p.add("--manifest", "manifest", manifest, "measurements")->required();
    p.add("--model", "model", model, "model JSON")->required();
    p.add("--out", "out", out, "report JSON")->required();
    p.add("--detection", "detection", detection, "tuned parameters from tune-detect");
    p.add("--scale", "scale", scale, "processing scale");
    p.add("--min-area-ratio", "min_area_ratio", min_area_ratio, "minimum area relative to the largest region");
    p.add("--cell-px", "cell_px", cell_px, "pixels per cell in the rectified image");
    p.add("--cell-model", "cell_model", cell_model, "area model for per-cell losses (default: the area predictor)");
    p.add("--jobs", "jobs", jobs, "worker threads");
  }

  int run(const json& cfg) const {
    InspectOptions opt;
    opt.detection = detection_params(detection, scale, min_area_ratio);
    opt.cell_px = cell_px;
    opt.jobs = jobs;
    if (!cell_model.empty()) {
      const auto p = load_predictor(cell_model);
      if (!std::holds_alternative<AreaPredictor>(p)) throw Error("--cell-model must be an area model");
      opt.cell_model = std::get<AreaPredictor>(p).model;
    }
    const auto predictor = load_predictor(model);
    const auto entries = load_manifest(manifest);
    if (entries.empty()) warn("empty manifest");
    const auto report = run_inspect(entries, dir_of(manifest), predictor, opt);
    auto j = envelope("inspect", cfg);
    j["params"] = {{"scale", opt.detection.scale}, {"min_area_ratio", opt.detection.min_area_ratio}};
    j["measurements"] = to_json(report);
    write_json_out(out, j);
    std::size_t failed = 0, modules = 0;
    for (const auto& r : report) {
      if (!r.ok) {
        warn(r.sample_id + ": " + r.error);
        ++failed;
      }
      modules += r.modules.size();
      for (const auto& m : r.modules)
        std::printf("%s [%d,%d,%d,%d] p_rel %.4f p_mpp %.2f Wp\n", r.sample_id.c_str(), m.box.x0, m.box.y0, m.box.x1,
                    m.box.y1, m.p_rel_hat, m.p_mpp_hat);
    }
    std::printf("%zu modules in %zu measurements, %zu failed\n", modules, report.size(), failed);
    return failed ? kExitPartial : kExitOk;
  }
};

template <typename Cmd>
void add_command(CLI::App& app, const std::string& name, const std::string& desc, std::function<int()>& action) {
  auto* sub = app.add_subcommand(name, desc);
  auto cmd = std::make_shared<Cmd>();
  auto params = std::make_shared<Params>(sub);
  cmd->setup(*params);
  sub->callback([&action, cmd, params] {
    action = [cmd, params] { return cmd->run(params->resolve()); };
  });
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Electroluminescence module inspection and power estimation"};
  app.require_subcommand(1);
  std::function<int()> action;
  add_command<SynthCmd>(app, "synth", "generate a synthetic corpus", action);
  add_command<DetectCmd>(app, "detect", "detect modules in measurements", action);
  add_command<RectifyCmd>(app, "rectify", "detect and rectify every module", action);
  add_command<FeaturesCmd>(app, "features", "intensity features of rectified modules", action);
  add_command<FitSvrCmd>(app, "fit-svr", "fit the support vector regressor", action);
  add_command<FitAreaCmd>(app, "fit-area", "fit the inactive-area regressor", action);
  add_command<PredictCmd>(app, "predict", "predict relative power", action);
  add_command<CvCmd>(app, "cv", "cross-validate an estimator", action);
  add_command<TuneDetectCmd>(app, "tune-detect", "tune the detector", action);
  add_command<TuneSvrCmd>(app, "tune-svr", "tune SVR hyperparameters", action);
  add_command<CellLossCmd>(app, "cell-loss", "per-cell power loss from loss maps", action);
  add_command<InspectCmd>(app, "inspect", "detect, rectify and estimate power per module", action);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitInvalid;
  }
  try {
    return action();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitInvalid;
  }
}
