#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "elpv/detect.hpp"
#include "elpv/error.hpp"
#include "elpv/folds.hpp"
#include "elpv/image.hpp"
#include "elpv/io.hpp"
#include "elpv/manifest.hpp"
#include "elpv/metrics.hpp"
#include "elpv/parallel.hpp"
#include "elpv/power.hpp"
#include "elpv/rectify.hpp"
#include "elpv/regress.hpp"
#include "elpv/search.hpp"

namespace elpv {

/// Manifest image paths are relative to the manifest's directory.
inline std::string resolve_path(const std::string& base_dir, const std::string& path) {
  const std::filesystem::path p(path);
  if (p.is_absolute() || base_dir.empty()) return p.string();
  return (std::filesystem::path(base_dir) / p).string();
}

// ---------------------------------------------------------------------------
// Samples

/// A manifest entry with everything the estimators need from its image.
struct Sample {
  ManifestEntry entry;
  FeatureVector features;   ///< (mean, std) or externally supplied
  double fraction = 0.0;    ///< inactive-area fraction
};

struct SampleOptions {
  InactiveMethod inactive = OtsuThreshold{};
  const FeatureTable* external = nullptr;  ///< replaces image features when set
  bool need_fraction = true;
  int jobs = 1;
};

/// Loads each (already rectified) module image once. Errors name the sample.
inline std::vector<Sample> load_samples(const std::vector<ManifestEntry>& entries, const std::string& base_dir,
                                        const SampleOptions& opt = {}) {
  std::map<std::string, FeatureVector> ext;
  if (opt.external) ext = opt.external->by_id();
  std::vector<Sample> out(entries.size());
  parallel_for(entries.size(), opt.jobs, [&](std::size_t i) {
    const auto& e = entries[i];
    out[i].entry = e;
    try {
      const bool need_image = opt.need_fraction || !opt.external;
      Image16 img;
      if (need_image) img = load_pgm16(resolve_path(base_dir, e.image_path));
      if (opt.external) {
        auto it = ext.find(e.sample_id);
        if (it == ext.end()) throw Error("no features");
        out[i].features = it->second;
      } else {
        out[i].features = extract_mean_std(img);
      }
      if (opt.need_fraction) out[i].fraction = inactive_fraction(img, opt.inactive);
    } catch (const std::exception& ex) {
      throw Error("sample " + e.sample_id + ": " + ex.what());
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Estimators

enum class EstimatorKind { area, svr };

inline std::string to_string(EstimatorKind k) { return k == EstimatorKind::area ? "area" : "svr"; }

inline EstimatorKind estimator_from_string(const std::string& s) {
  if (s == "area") return EstimatorKind::area;
  if (s == "svr") return EstimatorKind::svr;
  throw Error("unknown estimator: " + s);
}

struct CvConfig {
  EstimatorKind estimator = EstimatorKind::area;
  int k = 5;
  Binning binning;
  std::uint64_t seed = 0;
  int jobs = 1;

  // area estimator
  bool fix_intercept = false;
  InactiveMethod inactive = OtsuThreshold{};

  // svr estimator: per-fold HPO on a stratified split of the training folds
  double val_fraction = 0.4;
  std::size_t hpo_budget = 250;
  ParamRange c_range{"C", 1e-2, 1e3, Scale::log};
  ParamRange epsilon_range{"epsilon", 1e-4, 1e-1, Scale::log};
  std::optional<double> gamma;  ///< default: 1 / (d var) of standardized features
  double tolerance = 1e-3;

  // generalization mode: train on one subset, test on another
  std::string train_subset;
  std::string test_subset;
};

inline nlohmann::json to_json(const CvConfig& c) {
  nlohmann::json j{{"estimator", to_string(c.estimator)},
                   {"k", c.k},
                   {"bins", c.binning.bins},
                   {"bin_width", c.binning.width},
                   {"seed", c.seed},
                   {"fix_intercept", c.fix_intercept},
                   {"inactive", inactive_method_to_json(c.inactive)},
                   {"val_fraction", c.val_fraction},
                   {"hpo_budget", c.hpo_budget},
                   {"C_range", {c.c_range.lo, c.c_range.hi}},
                   {"epsilon_range", {c.epsilon_range.lo, c.epsilon_range.hi}},
                   {"tolerance", c.tolerance},
                   {"train_subset", c.train_subset},
                   {"test_subset", c.test_subset}};
  j["gamma"] = c.gamma ? nlohmann::json(*c.gamma) : nlohmann::json(nullptr);
  return j;
}

/// Standardizes on the training features, then fits the SVR.
inline SvrPredictor train_svr(const std::vector<FeatureVector>& x, std::span<const double> y, double c, double epsilon,
                              std::optional<double> gamma = std::nullopt, double tolerance = 1e-3) {
  SvrPredictor p;
  p.normalizer = fit_normalizer(x);
  const auto z = p.normalizer.apply_all(x);
  SvrParams params;
  params.c = c;
  params.epsilon = epsilon;
  params.gamma = gamma ? *gamma : default_gamma(z);
  params.tolerance = tolerance;
  p.model = svr_fit(z, y, params).model;
  return p;
}

inline double predict_sample(const Predictor& p, const Sample& s) {
  if (const auto* svr = std::get_if<SvrPredictor>(&p)) return svr->predict(s.features);
  return std::get<AreaPredictor>(p).predict(s.fraction);
}

namespace detail {

inline std::vector<double> labels_of(const std::vector<Sample>& s) {
  std::vector<double> y;
  y.reserve(s.size());
  for (const auto& x : s) y.push_back(x.entry.p_rel());
  return y;
}

inline std::vector<FeatureVector> features_of(const std::vector<Sample>& s) {
  std::vector<FeatureVector> x;
  x.reserve(s.size());
  for (const auto& v : s) x.push_back(v.features);
  return x;
}

inline std::vector<Sample> select(const std::vector<Sample>& all, const std::vector<ManifestEntry>& which) {
  std::map<std::string, std::size_t> idx;
  for (std::size_t i = 0; i < all.size(); ++i) idx[all[i].entry.sample_id] = i;
  std::vector<Sample> out;
  for (const auto& e : which) out.push_back(all.at(idx.at(e.sample_id)));
  return out;
}

}  // namespace detail

struct SvrTuning {
  double c = 1.0;
  double epsilon = 0.1;
  SearchResult search;
};

/// Random search over (C, epsilon) scored by negative validation MAE on a
/// stratified, instance-disjoint split of the given training samples.
inline SvrTuning tune_svr(const std::vector<Sample>& train, const CvConfig& cfg, std::uint64_t seed) {
  std::vector<ManifestEntry> entries;
  for (const auto& s : train) entries.push_back(s.entry);
  const auto [fit_e, val_e] = train_val_split(entries, cfg.val_fraction, seed, cfg.binning);
  const auto fit_s = detail::select(train, fit_e);
  const auto val_s = detail::select(train, val_e);
  const auto fx = detail::features_of(fit_s);
  const auto fy = detail::labels_of(fit_s);
  const auto vy = detail::labels_of(val_s);

  auto objective = [&](const ParamSet& p) {
    const auto model = train_svr(fx, fy, p.at("C"), p.at("epsilon"), cfg.gamma, cfg.tolerance);
    std::vector<double> pred;
    for (const auto& s : val_s) pred.push_back(model.predict(s.features));
    return -mae(vy, pred);
  };
  SvrTuning t;
  t.search = random_search(objective, {cfg.c_range, cfg.epsilon_range}, {cfg.hpo_budget, seed, 1});
  t.c = t.search.best.params.at("C");
  t.epsilon = t.search.best.params.at("epsilon");
  return t;
}

/// Fits the configured estimator on labeled training samples only.
inline Predictor train_estimator(const std::vector<Sample>& train, const CvConfig& cfg, std::uint64_t seed,
                                 nlohmann::json* hpo = nullptr) {
  const auto y = detail::labels_of(train);
  if (cfg.estimator == EstimatorKind::area) {
    std::vector<double> f;
    for (const auto& s : train) f.push_back(s.fraction);
    return AreaPredictor{fit_area_model(f, y, cfg.fix_intercept), cfg.inactive};
  }
  const auto t = tune_svr(train, cfg, seed);
  if (hpo) *hpo = {{"C", t.c}, {"epsilon", t.epsilon}, {"val_mae", -t.search.best.score}};
  return train_svr(detail::features_of(train), y, t.c, t.epsilon, cfg.gamma, cfg.tolerance);
}

// ---------------------------------------------------------------------------
// Cross-validation

struct ErrorSummary {
  std::size_t n = 0;
  double mae = 0.0;
  double rmse = 0.0;               ///< 1/N outside the root
  double rmse_conventional = 0.0;
  double mae_wp = 0.0;             ///< absolute error in watts-peak
};

inline ErrorSummary summarize(const std::vector<double>& truth, const std::vector<double>& pred,
                              const std::vector<double>& p_nom) {
  ErrorSummary s;
  s.n = truth.size();
  s.mae = mae(truth, pred);
  s.rmse = rmse(truth, pred, RmseForm::printed);
  s.rmse_conventional = rmse(truth, pred, RmseForm::conventional);
  double wp = 0.0;
  for (std::size_t i = 0; i < truth.size(); ++i) wp += std::abs(truth[i] - pred[i]) * p_nom[i];
  s.mae_wp = wp / static_cast<double>(truth.size());
  return s;
}

struct FoldReport {
  int fold = 0;
  std::size_t n_train = 0;
  ErrorSummary errors;
  nlohmann::json model;  ///< serialized predictor trained for this fold
  nlohmann::json hpo;    ///< chosen hyperparameters, if any
};

struct MetricsReport {
  ErrorSummary overall;
  double mae_fold_std = 0.0;  ///< sample std of per-fold MAE
  std::vector<FoldReport> folds;
  std::map<std::string, ErrorSummary> subsets;  ///< "type/current/setting"
  std::vector<PredictionRow> predictions;       ///< in input order
  std::vector<double> truth;
};

inline std::string subset_key(const ManifestEntry& e) {
  return e.module_type + "/" + e.current_level + "/" + e.setting;
}

namespace detail {

inline std::uint64_t fold_seed(std::uint64_t seed, int fold) {
  return seed ^ (0x9E3779B97F4A7C15ULL * static_cast<std::uint64_t>(fold + 1));
}

/// Test samples lose their labels before they reach the estimator.
inline std::vector<Sample> strip_labels(std::vector<Sample> s) {
  for (auto& x : s) x.entry.p_mpp.reset();
  return s;
}

inline MetricsReport aggregate(const std::vector<Sample>& evaluated, std::vector<FoldReport> folds,
                               const std::vector<double>& pred) {
  MetricsReport r;
  r.folds = std::move(folds);
  std::vector<double> nom;
  std::map<std::string, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < evaluated.size(); ++i) {
    r.truth.push_back(evaluated[i].entry.p_rel());
    nom.push_back(evaluated[i].entry.p_nom);
    r.predictions.push_back({evaluated[i].entry.sample_id, pred[i]});
    groups[subset_key(evaluated[i].entry)].push_back(i);
  }
  r.overall = summarize(r.truth, pred, nom);
  for (const auto& [key, idx] : groups) {
    std::vector<double> t, p, n;
    for (auto i : idx) {
      t.push_back(r.truth[i]);
      p.push_back(pred[i]);
      n.push_back(nom[i]);
    }
    r.subsets[key] = summarize(t, p, n);
  }
  if (r.folds.size() > 1) {
    double m = 0.0;
    for (const auto& f : r.folds) m += f.errors.mae / static_cast<double>(r.folds.size());
    double ss = 0.0;
    for (const auto& f : r.folds) ss += (f.errors.mae - m) * (f.errors.mae - m);
    r.mae_fold_std = std::sqrt(ss / static_cast<double>(r.folds.size() - 1));
  }
  return r;
}

}  // namespace detail

/// k-fold evaluation against a fixed assignment. Each fold's estimator sees
/// only the other folds' samples; every sample is predicted exactly once.
inline MetricsReport cross_validate(const std::vector<Sample>& samples, const FoldAssignment& folds,
                                    const CvConfig& cfg) {
  std::vector<int> fold_of(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    fold_of[i] = folds.fold_of(samples[i].entry.sample_id);
    if (fold_of[i] < 0 || fold_of[i] >= folds.k) throw Error("fold index out of range");
  }
  std::vector<FoldReport> reports(static_cast<std::size_t>(folds.k));
  std::vector<double> pred(samples.size(), 0.0);
  parallel_for(reports.size(), cfg.jobs, [&](std::size_t f) {
    std::vector<Sample> train, test;
    std::vector<std::size_t> test_idx;
    for (std::size_t i = 0; i < samples.size(); ++i) {
      if (fold_of[i] == static_cast<int>(f)) {
        test.push_back(samples[i]);
        test_idx.push_back(i);
      } else {
        train.push_back(samples[i]);
      }
    }
    if (test.empty()) throw Error("fold " + std::to_string(f) + " is empty");
    if (train.empty()) throw Error("fold " + std::to_string(f) + " has no training data");
    auto& rep = reports[f];
    rep.fold = static_cast<int>(f);
    rep.n_train = train.size();
    const auto model = train_estimator(train, cfg, detail::fold_seed(cfg.seed, rep.fold), &rep.hpo);
    rep.model = predictor_to_json(model);
    const auto blind = detail::strip_labels(test);
    std::vector<double> t, p, n;
    for (std::size_t j = 0; j < blind.size(); ++j) {
      pred[test_idx[j]] = predict_sample(model, blind[j]);
      t.push_back(test[j].entry.p_rel());
      p.push_back(pred[test_idx[j]]);
      n.push_back(test[j].entry.p_nom);
    }
    rep.errors = summarize(t, p, n);
  });
  return detail::aggregate(samples, std::move(reports), pred);
}

/// Trains on one sample set and evaluates on another (reported as one fold).
inline MetricsReport evaluate_transfer(const std::vector<Sample>& train, const std::vector<Sample>& test,
                                       const CvConfig& cfg) {
  if (train.empty() || test.empty()) throw Error("train and test subsets must both be non-empty");
  FoldReport rep;
  rep.n_train = train.size();
  const auto model = train_estimator(train, cfg, detail::fold_seed(cfg.seed, 0), &rep.hpo);
  rep.model = predictor_to_json(model);
  std::vector<double> pred, truth, nom;
  for (const auto& s : detail::strip_labels(test)) pred.push_back(predict_sample(model, s));
  for (const auto& s : test) {
    truth.push_back(s.entry.p_rel());
    nom.push_back(s.entry.p_nom);
  }
  rep.errors = summarize(truth, pred, nom);
  return detail::aggregate(test, {rep}, pred);
}

struct CvRun {
  MetricsReport report;
  std::optional<FoldAssignment> folds;  ///< absent in generalization mode
};

/// Full protocol on labeled samples: builds folds (unless given) or, with
/// train/test subsets configured, runs the transfer experiment instead.
inline CvRun run_cv(const std::vector<Sample>& samples, const CvConfig& cfg,
                    const std::optional<FoldAssignment>& given = std::nullopt) {
  for (const auto& s : samples)
    if (!s.entry.labeled()) throw Error("cv: sample " + s.entry.sample_id + " is unlabeled");
  if (!cfg.train_subset.empty() || !cfg.test_subset.empty()) {
    if (cfg.train_subset.empty() || cfg.test_subset.empty())
      throw Error("cv: train and test subsets must be given together");
    std::vector<Sample> train, test;
    for (const auto& s : samples) {
      const bool in_train = matches_subset(s.entry, cfg.train_subset);
      const bool in_test = matches_subset(s.entry, cfg.test_subset);
      if (in_train && in_test) throw Error("cv: sample " + s.entry.sample_id + " is in both subsets");
      if (in_train) train.push_back(s);
      if (in_test) test.push_back(s);
    }
    std::map<std::string, int> side;
    for (const auto& s : train) side[s.entry.instance_id] = 1;
    for (const auto& s : test)
      if (side.count(s.entry.instance_id)) throw Error("cv: instance " + s.entry.instance_id + " is in both subsets");
    return {evaluate_transfer(train, test, cfg), std::nullopt};
  }
  FoldAssignment folds;
  if (given) {
    folds = *given;
  } else {
    std::vector<ManifestEntry> entries;
    for (const auto& s : samples) entries.push_back(s.entry);
    folds = stratified_group_folds(entries, cfg.k, cfg.binning, cfg.seed);
  }
  return {cross_validate(samples, folds, cfg), folds};
}

inline nlohmann::json to_json(const ErrorSummary& e) {
  return {{"n", e.n}, {"mae", e.mae}, {"rmse", e.rmse}, {"rmse_conventional", e.rmse_conventional}, {"mae_wp", e.mae_wp}};
}

inline nlohmann::json to_json(const MetricsReport& r) {
  nlohmann::json folds = nlohmann::json::array();
  for (const auto& f : r.folds)
    folds.push_back({{"fold", f.fold}, {"n_train", f.n_train}, {"errors", to_json(f.errors)}, {"hpo", f.hpo}});
  nlohmann::json subsets = nlohmann::json::object();
  for (const auto& [k, v] : r.subsets) subsets[k] = to_json(v);
  return {{"overall", to_json(r.overall)}, {"mae_fold_std", r.mae_fold_std}, {"folds", folds}, {"subsets", subsets}};
}

// ---------------------------------------------------------------------------
// Inspection of raw measurements

struct InspectOptions {
  DetectionParams detection;
  int cell_px = 100;
  std::optional<AreaModel> cell_model;  ///< per-cell losses; the area predictor's own model is used if absent
  int jobs = 1;
};

struct ModuleEstimate {
  BoundingBox box;
  double p_rel_hat = 0.0;
  double p_mpp_hat = 0.0;
  int rows = 0;
  int cols = 0;
  std::vector<double> cell_wp;  ///< row-major, empty without a cell model
};

struct InspectEntry {
  std::string sample_id;
  bool ok = true;
  std::string error;
  double p_nom = 0.0;
  std::vector<ModuleEstimate> modules;
};

/// Module-level power estimate for one rectified module image.
inline double predict_module(const Predictor& p, const Image16& module) {
  if (const auto* svr = std::get_if<SvrPredictor>(&p)) return svr->predict(extract_mean_std(module));
  const auto& area = std::get<AreaPredictor>(p);
  return area.predict(inactive_fraction(module, area.method));
}

/// Detect, rectify, predict and convert to watts for every measurement.
/// Failures are recorded per entry and do not affect the others.
inline std::vector<InspectEntry> run_inspect(const std::vector<ManifestEntry>& entries, const std::string& base_dir,
                                             const Predictor& predictor, const InspectOptions& opt = {}) {
  std::optional<AreaModel> cell_model = opt.cell_model;
  InactiveMethod cell_method = OtsuThreshold{};
  if (const auto* a = std::get_if<AreaPredictor>(&predictor)) {
    if (!cell_model) cell_model = a->model;
    cell_method = a->method;
  }
  std::vector<InspectEntry> out(entries.size());
  parallel_for(entries.size(), opt.jobs, [&](std::size_t i) {
    const auto& e = entries[i];
    auto& r = out[i];
    r.sample_id = e.sample_id;
    r.p_nom = e.p_nom;
    try {
      const Image16 img = load_pgm16(resolve_path(base_dir, e.image_path));
      const ModuleGeometry geom{e.rows, e.cols, opt.cell_px};
      for (const auto& box : detect_modules(img, opt.detection)) {
        const auto mod = rectify_module(img, box, geom);
        ModuleEstimate m;
        m.box = box;
        m.rows = mod.rows;
        m.cols = mod.cols;
        const PowerEstimate est(predict_module(predictor, mod.image), e.p_nom);
        m.p_rel_hat = est.p_rel_hat();
        m.p_mpp_hat = est.p_mpp_hat();
        if (cell_model) {
          const auto map = synth_loss_map(mod.image, *cell_model, cell_method);
          m.cell_wp = cell_losses(map, CellGrid{mod.rows, mod.cols}, e.p_nom);
        }
        r.modules.push_back(std::move(m));
      }
    } catch (const std::exception& ex) {
      r.ok = false;
      r.error = ex.what();
      r.modules.clear();
    }
  });
  return out;
}

inline nlohmann::json to_json(const std::vector<InspectEntry>& report) {
  nlohmann::json a = nlohmann::json::array();
  for (const auto& r : report) {
    nlohmann::json mods = nlohmann::json::array();
    for (const auto& m : r.modules) {
      nlohmann::json jm{{"box", box_to_json(m.box)}, {"p_rel_hat", m.p_rel_hat}, {"p_mpp_hat", m.p_mpp_hat},
                        {"rows", m.rows},           {"cols", m.cols}};
      if (!m.cell_wp.empty()) jm["cell_loss_wp"] = m.cell_wp;
      mods.push_back(std::move(jm));
    }
    nlohmann::json j{{"sample_id", r.sample_id}, {"status", r.ok ? "ok" : "error"}, {"p_nom", r.p_nom}, {"modules", mods}};
    if (!r.ok) j["error"] = r.error;
    a.push_back(std::move(j));
  }
  return a;
}

}  // namespace elpv
