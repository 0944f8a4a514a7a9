#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>

#include "elpv/folds.hpp"
#include "elpv/io.hpp"
#include "elpv/manifest.hpp"
#include "elpv/power.hpp"

#ifndef ELPV_CLI_PATH
#error "ELPV_CLI_PATH must point at the elpv executable"
#endif

using namespace elpv;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "elpv_test_cli" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

/// Runs the CLI with output captured to dir/log.txt; returns the exit code.
int cli(const fs::path& dir, const std::string& args) {
  const std::string cmd = std::string("'") + ELPV_CLI_PATH + "' " + args + " >> '" + (dir / "log.txt").string() + "' 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string q(const fs::path& p) { return "'" + p.string() + "'"; }

json read_json(const fs::path& p) { return read_json_file(p.string()); }

std::string slurp(const fs::path& p) { return read_file_bytes(p.string()); }

/// A labeled module corpus written by the CLI itself.
fs::path synth_modules(const fs::path& dir, int samples, const std::string& extra = "") {
  const auto out = dir / "mods";
  EXPECT_EQ(cli(dir, "synth --out " + q(out) + " --samples " + std::to_string(samples) + " --seed 5 " + extra), 0);
  return out / "manifest.jsonl";
}

}  // namespace

TEST(Cli, CrossValidationWritesReportFoldsAndPredictions) {
  const auto dir = scratch("cv");
  const auto m = synth_modules(dir, 60);
  ASSERT_EQ(cli(dir, "cv --manifest " + q(m) + " --out " + q(dir / "cv.json") + " --k 4 --predictions " +
                         q(dir / "pred.csv") + " --scatter " + q(dir / "scatter.csv") + " --folds-out " +
                         q(dir / "folds.json")),
            0);
  const auto report = read_json(dir / "cv.json");
  EXPECT_EQ(report.at("format_version"), kFormatVersion);
  EXPECT_EQ(report.at("command"), "cv");
  EXPECT_EQ(report.at("config").at("k"), 4);
  EXPECT_EQ(report.at("config").at("manifest"), m.string());
  EXPECT_EQ(report.at("report").at("overall").at("n"), 60);
  EXPECT_EQ(report.at("report").at("folds").size(), 4u);
  EXPECT_LT(report.at("report").at("overall").at("mae").get<double>(), 0.02);

  const auto pred = load_predictions_csv((dir / "pred.csv").string());
  EXPECT_EQ(pred.size(), 60u);
  EXPECT_TRUE(fs::exists(dir / "pred.csv.run.json"));

  const auto folds = read_json(dir / "folds.json").get<FoldAssignment>();
  EXPECT_EQ(folds.k, 4);
  EXPECT_EQ(folds.assignment.size(), 60u);

  // The scatter rows agree with the predictions file.
  std::ifstream sc(dir / "scatter.csv");
  std::string line;
  std::getline(sc, line);
  EXPECT_EQ(line, "sample_id,module_type,current_level,setting,p_nom,p_rel,p_rel_hat,p_mpp,p_mpp_hat");
  int rows = 0;
  while (std::getline(sc, line)) ++rows;
  EXPECT_EQ(rows, 60);

  // Reusing the written folds reproduces the report.
  ASSERT_EQ(cli(dir, "cv --manifest " + q(m) + " --out " + q(dir / "again.json") + " --folds " + q(dir / "folds.json")),
            0);
  EXPECT_EQ(read_json(dir / "again.json").at("report"), report.at("report"));
}

TEST(Cli, OutputsAreByteReproducible) {
  const auto dir = scratch("repro");
  const auto m = synth_modules(dir, 40);
  const std::string args = "cv --manifest " + q(m) + " --estimator svr --budget 8 --seed 3 --k 3";
  ASSERT_EQ(cli(dir, args + " --out " + q(dir / "a.json") + " --predictions " + q(dir / "a.csv")), 0);
  ASSERT_EQ(cli(dir, args + " --out " + q(dir / "b.json") + " --predictions " + q(dir / "b.csv")), 0);
  EXPECT_EQ(slurp(dir / "a.csv"), slurp(dir / "b.csv"));
  auto a = read_json(dir / "a.json");
  auto b = read_json(dir / "b.json");
  a["config"].erase("out");
  b["config"].erase("out");
  a["config"].erase("predictions");
  b["config"].erase("predictions");
  EXPECT_EQ(a.dump(), b.dump());

  ASSERT_EQ(cli(dir, args + " --jobs 4 --out " + q(dir / "c.json")), 0);
  EXPECT_EQ(read_json(dir / "c.json").at("report").dump(), a.at("report").dump());
}

TEST(Cli, ConfigFileSuppliesDefaultsAndFlagsWin) {
  const auto dir = scratch("config");
  const auto m = synth_modules(dir, 40);
  write_text_file((dir / "cfg.json").string(), R"({"k": 3, "fix_intercept": true})");
  ASSERT_EQ(cli(dir, "cv --manifest " + q(m) + " --out " + q(dir / "a.json") + " --config " + q(dir / "cfg.json")), 0);
  const auto a = read_json(dir / "a.json");
  EXPECT_EQ(a.at("config").at("k"), 3);
  EXPECT_EQ(a.at("config").at("fix_intercept"), true);
  EXPECT_EQ(a.at("report").at("folds").size(), 3u);

  ASSERT_EQ(cli(dir, "cv --manifest " + q(m) + " --out " + q(dir / "b.json") + " --config " + q(dir / "cfg.json") +
                         " --k 2"),
            0);
  EXPECT_EQ(read_json(dir / "b.json").at("config").at("k"), 2);

  write_text_file((dir / "bad.json").string(), R"({"folds_count": 3})");
  EXPECT_EQ(cli(dir, "cv --manifest " + q(m) + " --out " + q(dir / "c.json") + " --config " + q(dir / "bad.json")), 2);
  write_text_file((dir / "badtype.json").string(), R"({"k": "three"})");
  EXPECT_EQ(cli(dir, "cv --manifest " + q(m) + " --out " + q(dir / "c.json") + " --config " + q(dir / "badtype.json")),
            2);
}

TEST(Cli, InvalidInputExitsWithTwo) {
  const auto dir = scratch("invalid");
  EXPECT_EQ(cli(dir, ""), 2);
  EXPECT_EQ(cli(dir, "frobnicate"), 2);
  EXPECT_EQ(cli(dir, "cv --out " + q(dir / "x.json")), 2);
  EXPECT_EQ(cli(dir, "cv --manifest " + q(dir / "missing.jsonl") + " --out " + q(dir / "x.json")), 2);
  EXPECT_EQ(cli(dir, "cv --manifest " + q(dir / "missing.jsonl") + " --out " + q(dir / "x.json") + " --estimator knn"),
            2);
  write_text_file((dir / "broken.jsonl").string(), "{\"sample_id\": \"a\"}\n");
  EXPECT_EQ(cli(dir, "features --manifest " + q(dir / "broken.jsonl") + " --out " + q(dir / "f.csv")), 2);
  EXPECT_EQ(cli(dir, "--help"), 0);

  // more folds than instances
  const auto m = synth_modules(dir, 4, "--max-per-instance 1");
  EXPECT_EQ(cli(dir, "cv --manifest " + q(m) + " --out " + q(dir / "x.json") + " --k 5"), 2);
}

TEST(Cli, FeatureFailuresArePartial) {
  const auto dir = scratch("partial");
  const auto m = synth_modules(dir, 6);
  fs::remove(m.parent_path() / "images" / "s2.pgm");
  EXPECT_EQ(cli(dir, "features --manifest " + q(m) + " --out " + q(dir / "f.csv")), 1);
  const auto t = load_features_csv((dir / "f.csv").string());
  EXPECT_EQ(t.ids.size(), 5u);
  EXPECT_EQ(std::count(t.ids.begin(), t.ids.end(), "s2"), 0);
  EXPECT_EQ(t.features.front().size(), 2u);
  EXPECT_EQ(read_json(dir / "f.csv.run.json").at("command"), "features");
}

TEST(Cli, SvrWithExternalFeaturesMatchesImageFeatures) {
  const auto dir = scratch("svr");
  const auto m = synth_modules(dir, 50);
  ASSERT_EQ(cli(dir, "features --manifest " + q(m) + " --out " + q(dir / "f.csv")), 0);
  ASSERT_EQ(cli(dir, "tune-svr --manifest " + q(m) + " --budget 10 --out " + q(dir / "tune.json")), 0);
  const auto tune = read_json(dir / "tune.json");
  EXPECT_EQ(tune.at("trials").size(), 10u);
  ASSERT_EQ(cli(dir, "fit-svr --manifest " + q(m) + " --tuned " + q(dir / "tune.json") + " --out " + q(dir / "a.json")),
            0);
  ASSERT_EQ(cli(dir, "fit-svr --manifest " + q(m) + " --tuned " + q(dir / "tune.json") + " --features " +
                         q(dir / "f.csv") + " --out " + q(dir / "b.json")),
            0);
  const auto a = read_json(dir / "a.json");
  EXPECT_EQ(a.at("C"), tune.at("best").at("C"));
  EXPECT_EQ(a.at("run").at("command"), "fit-svr");
  ASSERT_EQ(cli(dir, "predict --manifest " + q(m) + " --model " + q(dir / "a.json") + " --out " + q(dir / "pa.csv")), 0);
  ASSERT_EQ(cli(dir, "predict --manifest " + q(m) + " --model " + q(dir / "b.json") + " --features " + q(dir / "f.csv") +
                         " --out " + q(dir / "pb.csv") + " --report " + q(dir / "rep.json")),
            0);
  // the features CSV round-trips exactly, so both routes agree bit for bit
  EXPECT_EQ(slurp(dir / "pa.csv"), slurp(dir / "pb.csv"));
  EXPECT_LT(read_json(dir / "rep.json").at("errors").at("mae").get<double>(), 0.05);
}

TEST(Cli, EmbeddingCsvDrivesTheSvr) {
  const auto dir = scratch("embed");
  const auto m = synth_modules(dir, 20);
  FeatureTable t;
  std::mt19937_64 rng(1);
  std::normal_distribution<double> g(0.0, 1.0);
  for (const auto& e : load_manifest(m.string())) {
    t.ids.push_back(e.sample_id);
    FeatureVector f(512);
    for (auto& v : f) v = g(rng);
    f[0] = e.p_rel();
    t.features.push_back(f);
  }
  write_text_file((dir / "emb.csv").string(), encode_features_csv(t));
  ASSERT_EQ(cli(dir, "fit-svr --manifest " + q(m) + " --features " + q(dir / "emb.csv") + " --out " + q(dir / "s.json")),
            0);
  ASSERT_EQ(cli(dir, "predict --manifest " + q(m) + " --model " + q(dir / "s.json") + " --features " +
                         q(dir / "emb.csv") + " --out " + q(dir / "p.csv")),
            0);
  const auto p = load_predictions_csv((dir / "p.csv").string());
  ASSERT_EQ(p.size(), 20u);
  for (const auto& r : p) EXPECT_TRUE(std::isfinite(r.p_rel_hat));
}

TEST(Cli, ScoresExternalPredictions) {
  const auto dir = scratch("external");
  const auto m = synth_modules(dir, 10);
  std::vector<PredictionRow> rows;
  double expected = 0.0;
  for (const auto& e : load_manifest(m.string())) {
    rows.push_back({e.sample_id, e.p_rel() - 0.02});
    expected += 0.02 / 10.0;
  }
  write_text_file((dir / "ext.csv").string(), encode_predictions_csv(rows));
  ASSERT_EQ(cli(dir, "predict --manifest " + q(m) + " --predictions " + q(dir / "ext.csv") + " --report " +
                         q(dir / "r.json") + " --scatter " + q(dir / "s.csv")),
            0);
  EXPECT_NEAR(read_json(dir / "r.json").at("errors").at("mae").get<double>(), expected, 1e-12);

  rows.pop_back();
  write_text_file((dir / "short.csv").string(), encode_predictions_csv(rows));
  EXPECT_EQ(cli(dir, "predict --manifest " + q(m) + " --predictions " + q(dir / "short.csv") + " --report " +
                         q(dir / "r2.json")),
            1);
  EXPECT_EQ(read_json(dir / "r2.json").at("errors").at("n"), 9);
}

TEST(Cli, GeneralizationMode) {
  const auto dir = scratch("transfer");
  const auto m = synth_modules(dir, 90, "--mixed");
  ASSERT_EQ(cli(dir, "cv --manifest " + q(m) + " --train-subset T1 --test-subset T2,T3 --out " + q(dir / "t.json")), 0);
  const auto r = read_json(dir / "t.json").at("report");
  EXPECT_EQ(r.at("folds").size(), 1u);
  for (const auto& [key, v] : r.at("subsets").items()) EXPECT_NE(key.substr(0, 2), "T1");
  EXPECT_EQ(cli(dir, "cv --manifest " + q(m) + " --train-subset T1 --test-subset T2 --out " + q(dir / "x.json") +
                         " --folds-out " + q(dir / "f.json")),
            2);
  EXPECT_EQ(cli(dir, "cv --manifest " + q(m) + " --train-subset T1 --out " + q(dir / "x.json")), 2);
}

TEST(Cli, SceneWorkflow) {
  const auto dir = scratch("scenes");
  const auto sc = dir / "sc";
  ASSERT_EQ(cli(dir, "synth --kind scenes --scenes 3 --width 1024 --height 1024 --partial --seed 4 --out " + q(sc)), 0);
  const auto m = sc / "manifest.jsonl";
  const auto ann = sc / "annotations.json";
  ASSERT_EQ(cli(dir, "tune-detect --manifest " + q(m) + " --annotations " + q(ann) + " --budget 8 --out " +
                         q(dir / "td.json") + " --pr-csv " + q(dir / "pr.csv")),
            0);
  const auto td = read_json(dir / "td.json");
  EXPECT_EQ(td.at("trials").size(), 8u);
  EXPECT_EQ(td.at("f1"), 1.0);

  ASSERT_EQ(cli(dir, "detect --manifest " + q(m) + " --detection " + q(dir / "td.json") + " --annotations " + q(ann) +
                         " --out " + q(dir / "det.json")),
            0);
  const auto det = read_json(dir / "det.json");
  EXPECT_EQ(det.at("params"), td.at("params"));
  EXPECT_EQ(det.at("score").at("f1"), 1.0);
  const auto gt = read_json(ann).at("boxes");
  for (const auto& d : det.at("detections")) EXPECT_EQ(d.at("boxes").size(), gt.at(d.at("sample_id").get<std::string>()).size());

  std::ifstream pr(dir / "pr.csv");
  std::string line;
  std::getline(pr, line);
  EXPECT_EQ(line, "tau,precision,recall,f1");
  int n = 0;
  while (std::getline(pr, line)) ++n;
  EXPECT_EQ(n, 51);

  ASSERT_EQ(cli(dir, "rectify --manifest " + q(m) + " --detection " + q(dir / "td.json") + " --cell-px 12 --out " +
                         q(dir / "rect")),
            0);
  const auto modules = load_manifest((dir / "rect" / "manifest.jsonl").string());
  std::size_t expected = 0;
  for (const auto& [id, boxes] : gt.items()) expected += boxes.size();
  EXPECT_EQ(modules.size(), expected);
  for (const auto& e : modules) {
    EXPECT_TRUE(fs::exists(dir / "rect" / e.image_path));
    EXPECT_GE(e.rows, e.cols);
  }
}

TEST(Cli, InspectReportsPerModuleAndHandlesEdgeCases) {
  const auto dir = scratch("inspect");
  const auto mods = synth_modules(dir, 60);
  ASSERT_EQ(cli(dir, "fit-area --manifest " + q(mods) + " --out " + q(dir / "area.json")), 0);
  const auto sc = dir / "sc";
  ASSERT_EQ(cli(dir, "synth --kind scenes --scenes 2 --width 1024 --height 1024 --seed 9 --out " + q(sc)), 0);
  ASSERT_EQ(cli(dir, "inspect --manifest " + q(sc / "manifest.jsonl") + " --model " + q(dir / "area.json") +
                         " --scale 0.25 --min-area-ratio 0.5 --out " + q(dir / "r.json")),
            0);
  const auto r = read_json(dir / "r.json");
  const auto gt = read_json(sc / "annotations.json").at("boxes");
  ASSERT_EQ(r.at("measurements").size(), 2u);
  for (const auto& meas : r.at("measurements")) {
    EXPECT_EQ(meas.at("status"), "ok");
    EXPECT_EQ(meas.at("modules").size(), gt.at(meas.at("sample_id").get<std::string>()).size());
    for (const auto& mod : meas.at("modules")) {
      EXPECT_EQ(mod.at("cell_loss_wp").size(), 60u);
      EXPECT_DOUBLE_EQ(mod.at("p_mpp_hat").get<double>(), mod.at("p_rel_hat").get<double>() * 230.0);
    }
  }

  write_text_file((dir / "empty.jsonl").string(), "");
  EXPECT_EQ(cli(dir, "inspect --manifest " + q(dir / "empty.jsonl") + " --model " + q(dir / "area.json") + " --out " +
                         q(dir / "e.json")),
            0);
  EXPECT_TRUE(read_json(dir / "e.json").at("measurements").empty());

  // every image unreadable: report written, nonzero exit
  auto entries = load_manifest((sc / "manifest.jsonl").string());
  for (auto& e : entries) e.image_path = "nowhere/" + e.sample_id + ".pgm";
  save_manifest(entries, (sc / "gone.jsonl").string());
  EXPECT_EQ(cli(dir, "inspect --manifest " + q(sc / "gone.jsonl") + " --model " + q(dir / "area.json") + " --out " +
                         q(dir / "g.json")),
            1);
  for (const auto& meas : read_json(dir / "g.json").at("measurements")) EXPECT_EQ(meas.at("status"), "error");
}

TEST(Cli, CellLossFromExternalMaps) {
  const auto dir = scratch("cellloss");
  std::vector<ManifestEntry> entries;
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> sums;
  fs::create_directories(dir / "maps");
  for (int i = 0; i < 6; ++i) {
    ManifestEntry e;
    e.sample_id = "s" + std::to_string(i);
    e.instance_id = e.sample_id;
    e.p_nom = 250.0;
    e.p_mpp = i < 3 ? 250.0 : 200.0;  // s0..s2 are healthy
    LossMap map(12, 20);
    double s = 0.0;
    for (auto& v : map.data) {
      v = -1e-4 * u(rng) - (i >= 3 ? 1e-3 : 0.0);
      s += v;
    }
    sums.push_back(1.0 + s);
    save_loss_map(map, (dir / "maps" / (e.sample_id + ".plm")).string());
    entries.push_back(e);
  }
  save_manifest(entries, (dir / "m.jsonl").string());

  ASSERT_EQ(cli(dir, "cell-loss --manifest " + q(dir / "m.jsonl") + " --maps-dir " + q(dir / "maps") +
                         " --no-debias --out " + q(dir / "raw.json") + " --csv " + q(dir / "raw.csv")),
            0);
  const auto raw = read_json(dir / "raw.json").at("samples");
  for (std::size_t i = 0; i < raw.size(); ++i) {
    EXPECT_EQ(raw[i].at("p_rel_hat").get<double>(), sums[i]);
    double cells = 0.0;
    for (double c : raw[i].at("cell_loss_wp")) cells += c;
    EXPECT_NEAR(cells, (1.0 - sums[i]) * 250.0, 1e-9);
  }
  std::ifstream csv(dir / "raw.csv");
  std::string line;
  int n = -1;
  while (std::getline(csv, line)) ++n;
  EXPECT_EQ(n, 6 * 60);

  ASSERT_EQ(cli(dir, "cell-loss --manifest " + q(dir / "m.jsonl") + " --maps-dir " + q(dir / "maps") + " --out " +
                         q(dir / "deb.json") + " --maps-out " + q(dir / "debiased")),
            0);
  const auto deb = read_json(dir / "deb.json").at("samples");
  for (std::size_t i = 0; i < deb.size(); ++i) {
    const double p = deb[i].at("p_rel_hat").get<double>();
    EXPECT_GE(p, sums[i]);  // debiasing only removes loss
    if (i < 3) {
      EXPECT_GT(p, 1.0 - 240 * 1e-4);
    }
  }
  // debiasing the debiased maps changes nothing
  const auto m2 = dir / "m2.jsonl";
  save_manifest(entries, m2.string());
  ASSERT_EQ(cli(dir, "cell-loss --manifest " + q(m2) + " --maps-dir " + q(dir / "debiased") + " --out " +
                         q(dir / "deb2.json")),
            0);
  EXPECT_EQ(read_json(dir / "deb2.json").at("samples"), deb);

  fs::remove(dir / "maps" / "s4.plm");
  EXPECT_EQ(cli(dir, "cell-loss --manifest " + q(dir / "m.jsonl") + " --maps-dir " + q(dir / "maps") +
                         " --no-debias --out " + q(dir / "miss.json")),
            1);
  EXPECT_EQ(read_json(dir / "miss.json").at("samples")[4].at("status"), "error");

  // no healthy labels and no opt-out
  for (auto& e : entries) e.p_mpp.reset();
  save_manifest(entries, (dir / "unlabeled.jsonl").string());
  EXPECT_EQ(cli(dir, "cell-loss --manifest " + q(dir / "unlabeled.jsonl") + " --maps-dir " + q(dir / "debiased") +
                         " --out " + q(dir / "u.json")),
            2);
}
