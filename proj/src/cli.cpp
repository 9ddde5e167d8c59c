// Copyright 2026 The prior3d Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "prior3d/cli.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "prior3d/random.hpp"

namespace prior3d {

namespace fs = std::filesystem;

namespace {

void reject_unknown(const nlohmann::json& j, const std::set<std::string>& known, const std::string& where) {
  if (!j.is_object()) throw std::invalid_argument(where + ": expected an object");
  for (const auto& [key, value] : j.items()) {
    if (!known.count(key)) throw std::invalid_argument(where + ": unknown key '" + key + "'");
  }
}

template <typename V>
void read_if(const nlohmann::json& j, const char* key, V& out) {
  if (j.contains(key)) out = j.at(key).get<V>();
}

nlohmann::json scene_json(const SceneConfig& s) {
  nlohmann::json j = {{"cameras", s.rig.num_cameras},
                      {"width", s.rig.width},
                      {"height", s.rig.height},
                      {"hfov_deg", s.rig.hfov_deg},
                      {"mount_height", s.rig.mount_height},
                      {"mount_radius", s.rig.mount_radius},
                      {"min_radius", s.min_radius},
                      {"max_radius", s.max_radius},
                      {"min_separation", s.min_separation},
                      {"max_retries", s.max_retries}};
  for (const auto& c : s.classes) {
    j[c.label == ObjectClass::kVehicle ? "vehicles" : "humans"] = {{"min", c.min_count}, {"max", c.max_count}};
  }
  return j;
}

SceneConfig scene_from_json(const nlohmann::json& j) {
  reject_unknown(j,
                 {"cameras", "width", "height", "hfov_deg", "mount_height", "mount_radius", "min_radius", "max_radius",
                  "min_separation", "max_retries", "vehicles", "humans"},
                 "scene");
  SceneConfig s;
  read_if(j, "cameras", s.rig.num_cameras);
  read_if(j, "width", s.rig.width);
  read_if(j, "height", s.rig.height);
  read_if(j, "hfov_deg", s.rig.hfov_deg);
  read_if(j, "mount_height", s.rig.mount_height);
  read_if(j, "mount_radius", s.rig.mount_radius);
  read_if(j, "min_radius", s.min_radius);
  read_if(j, "max_radius", s.max_radius);
  read_if(j, "min_separation", s.min_separation);
  read_if(j, "max_retries", s.max_retries);
  for (auto& c : s.classes) {
    const char* key = c.label == ObjectClass::kVehicle ? "vehicles" : "humans";
    if (!j.contains(key)) continue;
    const auto& r = j.at(key);
    reject_unknown(r, {"min", "max"}, std::string("scene.") + key);
    read_if(r, "min", c.min_count);
    read_if(r, "max", c.max_count);
  }
  return s;
}

nlohmann::json noise_json(const PriorNoiseConfig& n) {
  return {{"center_sigma_px", n.center_sigma_px},
          {"size_sigma_rel", n.size_sigma_rel},
          {"score_min", n.score_min},
          {"score_max", n.score_max},
          {"false_negative_prob", n.false_negative_prob},
          {"false_positive_rate", n.false_positive_rate},
          {"fp_score_min", n.fp_score_min},
          {"fp_score_max", n.fp_score_max},
          {"semantic_blur", n.semantic_blur},
          {"semantic_noise", n.semantic_noise},
          {"depth_blur", n.depth_blur},
          {"depth_noise", n.depth_noise}};
}

PriorNoiseConfig noise_from_json(const nlohmann::json& j) {
  // A preset name or an object over the realistic defaults.
  if (j.is_string()) {
    const auto name = j.get<std::string>();
    if (name == "none") return PriorNoiseConfig::none();
    if (name == "realistic") return PriorNoiseConfig::realistic();
    throw std::invalid_argument("noise: unknown preset '" + name + "' (expected none or realistic)");
  }
  reject_unknown(j,
                 {"center_sigma_px", "size_sigma_rel", "score_min", "score_max", "false_negative_prob",
                  "false_positive_rate", "fp_score_min", "fp_score_max", "semantic_blur", "semantic_noise",
                  "depth_blur", "depth_noise"},
                 "noise");
  PriorNoiseConfig n = PriorNoiseConfig::realistic();
  read_if(j, "center_sigma_px", n.center_sigma_px);
  read_if(j, "size_sigma_rel", n.size_sigma_rel);
  read_if(j, "score_min", n.score_min);
  read_if(j, "score_max", n.score_max);
  read_if(j, "false_negative_prob", n.false_negative_prob);
  read_if(j, "false_positive_rate", n.false_positive_rate);
  read_if(j, "fp_score_min", n.fp_score_min);
  read_if(j, "fp_score_max", n.fp_score_max);
  read_if(j, "semantic_blur", n.semantic_blur);
  read_if(j, "semantic_noise", n.semantic_noise);
  read_if(j, "depth_blur", n.depth_blur);
  read_if(j, "depth_noise", n.depth_noise);
  return n;
}

nlohmann::json lidar_json(const LidarConfig& l, double subsample) {
  return {{"beams", l.num_beams},
          {"azimuth", l.num_azimuth},
          {"min_elevation_deg", l.min_elevation_deg},
          {"max_elevation_deg", l.max_elevation_deg},
          {"mount_height", l.mount_height},
          {"max_range", l.max_range},
          {"subsample", subsample}};
}

void lidar_from_json(const nlohmann::json& j, LidarConfig& l, double& subsample) {
  reject_unknown(j, {"beams", "azimuth", "min_elevation_deg", "max_elevation_deg", "mount_height", "max_range", "subsample"},
                 "lidar");
  read_if(j, "beams", l.num_beams);
  read_if(j, "azimuth", l.num_azimuth);
  read_if(j, "min_elevation_deg", l.min_elevation_deg);
  read_if(j, "max_elevation_deg", l.max_elevation_deg);
  read_if(j, "mount_height", l.mount_height);
  read_if(j, "max_range", l.max_range);
  read_if(j, "subsample", subsample);
}

bool non_empty_dir(const fs::path& p) { return fs::exists(p) && (!fs::is_directory(p) || !fs::is_empty(p)); }

std::string scene_id(int i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "scene_%06d", i);
  return buf;
}

std::string fixed2(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

}  // namespace

// ---- configuration --------------------------------------------------------------

void RunConfig::validate() const {
  scene.validate();
  noise.validate();
  model.validate();
  training.validate();
  eval.validate();
  if (dataset.train < 0 || dataset.val < 0 || dataset.test < 0) {
    throw std::invalid_argument("dataset: split sizes must be non-negative");
  }
  if (model.num_cameras != scene.rig.num_cameras) {
    throw std::invalid_argument("model.num_cameras (" + std::to_string(model.num_cameras) +
                                ") must equal scene.cameras (" + std::to_string(scene.rig.num_cameras) + ")");
  }
  if (scene.rig.width % kLevelStride[kNumLevels - 1] != 0 || scene.rig.height % kLevelStride[kNumLevels - 1] != 0) {
    throw std::invalid_argument("scene: image width and height must be multiples of " +
                                std::to_string(kLevelStride[kNumLevels - 1]));
  }
  if (!(lidar_subsample > 0 && lidar_subsample <= 1)) throw std::invalid_argument("lidar.subsample must be in (0, 1]");
}

nlohmann::json to_json(const RunConfig& c) {
  return {{"seed", c.seed},
          {"dataset", {{"train", c.dataset.train}, {"val", c.dataset.val}, {"test", c.dataset.test}}},
          {"scene", scene_json(c.scene)},
          {"noise", noise_json(c.noise)},
          {"lidar", lidar_json(c.lidar, c.lidar_subsample)},
          {"model", to_json(c.model)},
          {"training", to_json(c.training)},
          {"eval", to_json(c.eval)}};
}

RunConfig run_config_from_json(const nlohmann::json& j) {
  RunConfig c;
  try {
    reject_unknown(j, {"seed", "dataset", "scene", "noise", "lidar", "model", "training", "eval"}, "config");
    read_if(j, "seed", c.seed);
    if (j.contains("dataset")) {
      const auto& d = j.at("dataset");
      reject_unknown(d, {"train", "val", "test"}, "dataset");
      read_if(d, "train", c.dataset.train);
      read_if(d, "val", c.dataset.val);
      read_if(d, "test", c.dataset.test);
    }
    if (j.contains("scene")) c.scene = scene_from_json(j.at("scene"));
    if (j.contains("noise")) c.noise = noise_from_json(j.at("noise"));
    if (j.contains("lidar")) lidar_from_json(j.at("lidar"), c.lidar, c.lidar_subsample);
    if (j.contains("model")) c.model = detector_config_from_json(j.at("model"));
    if (j.contains("training")) c.training = train_config_from_json(j.at("training"));
    if (j.contains("eval")) c.eval = eval_config_from_json(j.at("eval"));
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

RunConfig run_config_from_json(const nlohmann::json& base, const nlohmann::json& overrides) {
  nlohmann::json merged = base.is_null() ? nlohmann::json::object() : base;
  merged.merge_patch(overrides);
  return run_config_from_json(merged);
}

fs::path resolve_dataset(const std::string& explicit_path) {
  if (!explicit_path.empty()) return explicit_path;
  if (const char* env = std::getenv("PRIOR3D_DATA"); env != nullptr && *env != '\0') return env;
  throw CliError("no dataset given: pass --data or set PRIOR3D_DATA");
}

// ---- gen-data -------------------------------------------------------------------

Splits cmd_gen_data(const RunConfig& config, const fs::path& out_dir, const GenDataOptions& options,
                    std::ostream& log) {
  config.validate();
  if (options.jobs < 1) throw CliError("--jobs must be >= 1");
  if (non_empty_dir(out_dir) && !options.force) {
    throw CliError(out_dir.string() + " exists and is not empty (use --force to overwrite)");
  }
  DatasetSizes sizes = config.dataset;
  if (options.scenes) {
    const int n = *options.scenes;
    if (n < 1) throw CliError("--scenes must be >= 1");
    const int total = sizes.train + sizes.val + sizes.test;
    sizes.val = total > 0 ? static_cast<int>(std::lround(static_cast<double>(n) * sizes.val / total)) : 0;
    sizes.test = total > 0 ? static_cast<int>(std::lround(static_cast<double>(n) * sizes.test / total)) : 0;
    sizes.train = n - sizes.val - sizes.test;
  }
  const int total = sizes.train + sizes.val + sizes.test;
  if (options.force && fs::exists(out_dir)) fs::remove_all(out_dir);
  fs::create_directories(out_dir);

  Splits splits;
  for (int i = 0; i < total; ++i) {
    auto& part = i < sizes.train ? splits.train : (i < sizes.train + sizes.val ? splits.val : splits.test);
    part.push_back(scene_id(i));
  }
  const FrameOptions frame_options{config.noise, config.lidar, config.lidar_subsample};
  std::atomic<int> next{0};
  std::mutex err_mutex;
  std::string first_error;
  auto worker = [&] {
    for (int i = next++; i < total; i = next++) {
      try {
        const Frame f = make_frame(config.scene, mix_seed(config.seed, static_cast<std::uint64_t>(i)), frame_options,
                                   scene_id(i));
        write_frame(f, out_dir / f.id);
      } catch (const std::exception& e) {
        std::lock_guard lock(err_mutex);
        if (first_error.empty()) first_error = scene_id(i) + ": " + e.what();
        next = total;
      }
    }
  };
  std::vector<std::thread> threads;
  for (int t = 1; t < std::min(options.jobs, std::max(total, 1)); ++t) threads.emplace_back(worker);
  worker();
  for (auto& t : threads) t.join();
  if (!first_error.empty()) throw std::runtime_error("gen-data failed at " + first_error);

  write_splits(splits, out_dir, static_cast<std::size_t>(total), to_json(config));
  log << "wrote " << total << " scenes (" << splits.train.size() << " train, " << splits.val.size() << " val, "
      << splits.test.size() << " test) to " << out_dir.string() << '\n';
  return splits;
}

// ---- train ----------------------------------------------------------------------

TrainResult cmd_train(RunConfig config, const fs::path& dataset, const fs::path& out_dir, const TrainOptions& options,
                      std::ostream& log) {
  LocSource source = config.model.priors.loc_source;
  if (!options.loc_source.empty()) {
    if (options.loc_source == "ray") {
      source = LocSource::kRay;
    } else if (options.loc_source == "lidar") {
      source = LocSource::kLidar;
    } else {
      throw CliError("--loc-source must be ray or lidar, got '" + options.loc_source + "'");
    }
  }
  try {
    if (!options.priors.empty()) {
      config.model.priors = parse_prior_flags(options.priors, source);
    } else {
      config.model.priors.loc_source = source;
    }
  } catch (const std::invalid_argument& e) {
    throw CliError(std::string("--priors: ") + e.what());
  }
  const PriorFlags& p = config.model.priors;
  if (p.query && p.loc_source == LocSource::kLidar) {
    throw CliError("query priors pool features inside 2D boxes and need ray reference points; "
                   "use --loc-source ray or drop 'query'");
  }
  if (p.query && !p.loc) throw CliError("query priors need loc priors: use --priors feat,loc,query");
  if (options.loc_source == "lidar" && !p.loc) {
    throw CliError("--loc-source lidar replaces the loc priors; use --priors feat,loc --loc-source lidar");
  }
  if (options.overfit) {
    if (*options.overfit < 1) throw CliError("--overfit must be >= 1");
    config.training.overfit = *options.overfit;
  }
  if (options.epochs) config.training.epochs = *options.epochs;
  config.training.seed = config.seed;
  try {
    config.validate();
  } catch (const std::invalid_argument& e) {
    throw CliError(e.what());
  }
  if (non_empty_dir(out_dir) && !options.force) {
    throw CliError(out_dir.string() + " exists and is not empty (use --force to overwrite)");
  }
  if (options.force && fs::exists(out_dir)) fs::remove_all(out_dir);

  const Splits splits = read_splits(dataset);
  if (splits.train.empty()) throw CliError("dataset " + dataset.string() + " has an empty train split");
  const std::vector<std::string> train_ids = splits.train;
  const FrameSource source_frames{train_ids.size(),
                                  [&dataset, &train_ids](std::size_t i) { return read_frame(dataset / train_ids[i]); }};
  std::vector<Frame> val;
  if (config.training.val_every > 0) {
    const std::size_t limit = config.training.val_limit > 0 ? static_cast<std::size_t>(config.training.val_limit)
                                                             : splits.val.size();
    for (std::size_t i = 0; i < std::min(limit, splits.val.size()); ++i) val.push_back(read_frame(dataset / splits.val[i]));
  }

  Detector<float> model(config.model, mix_seed(config.seed, 0x6d6f64656cull));
  log << "training " << prior_flags_name(config.model.priors) << " (" << model.parameter_count() << " parameters) on "
      << (config.training.overfit > 0 ? std::min<std::size_t>(config.training.overfit, train_ids.size()) : train_ids.size())
      << " frames for " << config.training.epochs << " epochs\n";
  const nlohmann::json sidecar = {{"run_config", to_json(config)},
                                  {"priors", prior_flags_name(config.model.priors)},
                                  {"dataset", fs::absolute(dataset).string()}};
  auto result = train(model, source_frames, val, config.training, out_dir, sidecar);
  if (result.aborted) log << "training stopped early: " << result.abort_reason << '\n';
  log << "best epoch " << result.best_epoch << ", outputs in " << out_dir.string() << '\n';
  return result;
}

// ---- eval -----------------------------------------------------------------------

EvalReport cmd_eval(const fs::path& run_dir, const fs::path& dataset, const std::string& split, const fs::path& out_dir,
                    int jobs, std::ostream& log) {
  if (jobs < 1) throw CliError("--jobs must be >= 1");
  if (split != "train" && split != "val" && split != "test") {
    throw CliError("--split must be train, val or test, got '" + split + "'");
  }
  const fs::path sidecar_path = run_dir / kRunConfigFile;
  if (!fs::exists(sidecar_path)) throw CliError("no " + std::string(kRunConfigFile) + " in " + run_dir.string());
  const auto sidecar = read_json_file(sidecar_path);
  if (!sidecar.contains("run_config")) throw CliError(sidecar_path.string() + " has no run_config section");
  const RunConfig config = run_config_from_json(sidecar.at("run_config"));

  Detector<float> model(config.model, 0);
  model.load(run_dir / kCheckpointDir);
  const auto ids = read_splits(dataset).get(split);
  std::vector<Frame> frames;
  frames.reserve(ids.size());
  for (const auto& id : ids) frames.push_back(read_frame(dataset / id));

  EvalConfig ec = config.eval;
  ec.jobs = jobs;
  EvalReport report = evaluate_run(model, frames, ec);
  report.model = prior_flags_name(config.model.priors);
  report.meta = {{"priors", report.model},
                 {"split", split},
                 {"run_dir", fs::absolute(run_dir).string()},
                 {"checkpoint", read_checkpoint_meta(run_dir / kCheckpointDir)},
                 {"seed", config.seed}};
  const fs::path out = out_dir.empty() ? run_dir : out_dir;
  fs::create_directories(out);
  write_json_file(out / "report.json", report.to_json());
  write_pr_csv(report, out / "pr.csv");
  log << report.model << " on " << split << " (" << report.frames << " frames): AP@IoU" << fixed2(ec.iou_threshold)
      << " VEHICLE " << fixed2(100 * report.ap_iou.classes[0].ap) << " HUMAN " << fixed2(100 * report.ap_iou.classes[1].ap)
      << ", smearing " << fixed2(report.smearing_mean) << ", refpoint recall " << fixed2(report.refpoint_recall) << '\n';
  return report;
}

// ---- compare --------------------------------------------------------------------

std::string format_delta(double ap_points) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%+.2f", ap_points);
  std::string s = buf;
  if (s == "-0.00") s = "+0.00";
  return s;
}

Comparison compare_reports(const std::vector<EvalReport>& reports) {
  if (reports.size() < 2) throw CliError("compare needs at least two reports");
  const auto reference_config = to_json(reports.front().config);
  for (std::size_t i = 1; i < reports.size(); ++i) {
    if (to_json(reports[i].config) != reference_config) {
      throw CliError("report " + std::to_string(i + 1) + " (" + reports[i].model +
                     ") was evaluated with a different eval config");
    }
  }

  struct Column {
    const APResult EvalReport::*ap;
    int cls;
  };
  const std::string iou = "AP@IoU" + fixed2(reports.front().config.iou_threshold);
  const std::string cen = "AP@" + fixed2(reports.front().config.centroid_threshold) + "m";
  const std::vector<std::pair<std::string, Column>> columns = {
      {"VEHICLE " + iou, {&EvalReport::ap_iou, 0}},
      {"HUMAN " + iou, {&EvalReport::ap_iou, 1}},
      {"VEHICLE " + cen, {&EvalReport::ap_centroid, 0}},
      {"HUMAN " + cen, {&EvalReport::ap_centroid, 1}},
  };

  std::vector<std::vector<std::string>> rows;
  rows.push_back({"model"});
  for (const auto& [title, col] : columns) rows.back().push_back(title);
  for (const auto& r : reports) {
    std::vector<std::string> row{r.model.empty() ? "?" : r.model};
    for (const auto& [title, col] : columns) {
      const ClassAP& c = (r.*col.ap).classes[col.cls];
      const ClassAP& base = (reports.front().*col.ap).classes[col.cls];
      if (!c.present) {
        row.push_back("n/a");
      } else if (&r == &reports.front() || !base.present) {
        row.push_back(fixed2(100 * c.ap));
      } else {
        row.push_back(fixed2(100 * c.ap) + " (" + format_delta(100 * (c.ap - base.ap)) + ")");
      }
    }
    rows.push_back(std::move(row));
  }
  std::vector<std::size_t> width(rows.front().size(), 0);
  for (const auto& row : rows) {
    for (std::size_t k = 0; k < row.size(); ++k) width[k] = std::max(width[k], row[k].size());
  }
  std::ostringstream table;
  for (const auto& row : rows) {
    for (std::size_t k = 0; k < row.size(); ++k) {
      table << (k == 0 ? "" : "  ") << std::left << std::setw(static_cast<int>(width[k])) << row[k];
    }
    table << '\n';
  }

  // Median VEHICLE AP per ordering variant (repeated seeds share a name).
  static const char* kOrder[] = {"none", "feat", "feat,loc", "feat,loc,query"};
  std::vector<std::pair<std::string, double>> present;
  for (const char* name : kOrder) {
    std::vector<double> aps;
    for (const auto& r : reports) {
      if (r.model == name && r.ap_iou.classes[0].present) aps.push_back(r.ap_iou.classes[0].ap);
    }
    if (aps.empty()) continue;
    std::sort(aps.begin(), aps.end());
    const std::size_t m = aps.size();
    present.emplace_back(name, m % 2 ? aps[m / 2] : 0.5 * (aps[m / 2 - 1] + aps[m / 2]));
  }
  Comparison out;
  out.ordering_checked = present.size() >= 2;
  std::ostringstream verdict;
  if (!out.ordering_checked) {
    verdict << "verdict: n/a (fewer than two of none, feat, feat,loc, feat,loc,query)";
  } else {
    out.ordering_holds = true;
    std::string inversion;
    for (std::size_t k = 1; k < present.size(); ++k) {
      if (!(present[k].second > present[k - 1].second)) {
        out.ordering_holds = false;
        if (inversion.empty()) {
          inversion = present[k].first + " " + fixed2(100 * present[k].second) + " <= " + present[k - 1].first + " " +
                      fixed2(100 * present[k - 1].second);
        }
      }
    }
    std::string chain;
    for (const auto& [name, ap] : present) chain += (chain.empty() ? "" : " < ") + name;
    verdict << "verdict: " << (out.ordering_holds ? "PASS" : "FAIL") << " (" << chain << " on VEHICLE " << iou;
    if (!inversion.empty()) verdict << "; inversion: " << inversion;
    verdict << ")";
  }
  out.table = table.str() + verdict.str() + '\n';
  return out;
}

bool cmd_compare(const std::vector<fs::path>& paths, std::ostream& out) {
  if (paths.size() < 2) throw CliError("compare needs at least two reports");
  std::vector<EvalReport> reports;
  for (const auto& p : paths) {
    try {
      reports.push_back(report_from_json(read_json_file(p)));
    } catch (const std::exception& e) {
      throw CliError(p.string() + ": " + e.what());
    }
  }
  const auto c = compare_reports(reports);
  out << c.table;
  return c.ordering_checked && c.ordering_holds;
}

// ---- plot -----------------------------------------------------------------------

namespace {

constexpr const char* kPrHeader = "model,class,criterion,recall,precision,score";
constexpr const char* kCurveHeaderPrefix = "epoch,loss,";
constexpr const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf", "#7f7f7f"};

struct Series {
  std::string label;
  std::vector<std::pair<double, double>> points;
};

struct Panel {
  std::string title, xlabel, ylabel;
  double xmax = 1, ymax = 1;
  std::vector<Series> series;
};

// Comma-separated fields; double quotes protect commas ("" is a literal quote).
std::vector<std::string> split_csv(const std::string& line, const fs::path& path, int lineno) {
  std::vector<std::string> out(1);
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        out.back() += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        out.back() += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.emplace_back();
    } else {
      out.back() += c;
    }
  }
  if (quoted) throw CliError(path.string() + ":" + std::to_string(lineno) + ": unterminated quote");
  return out;
}

double parse_number(const std::string& s, const fs::path& path, int line) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used == s.size()) return v;
  } catch (const std::exception&) {
  }
  throw CliError(path.string() + ":" + std::to_string(line) + ": malformed number '" + s + "'");
}

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

Series& series_for(Panel& panel, const std::string& label) {
  for (auto& s : panel.series) {
    if (s.label == label) return s;
  }
  panel.series.push_back({label, {}});
  return panel.series.back();
}

void draw_panel(std::ostringstream& svg, const Panel& p, double ox, double oy) {
  constexpr double kW = 360, kH = 260, kLeft = 60, kTop = 30;
  auto fmt = [](double v) { return fixed2(v); };
  const double x0 = ox + kLeft, y0 = oy + kTop;
  svg << "<g>\n";
  svg << "<text x=\"" << fmt(x0 + kW / 2) << "\" y=\"" << fmt(oy + 18) << "\" text-anchor=\"middle\" font-size=\"14\">"
      << xml_escape(p.title) << "</text>\n";
  svg << "<rect x=\"" << fmt(x0) << "\" y=\"" << fmt(y0) << "\" width=\"" << fmt(kW) << "\" height=\"" << fmt(kH)
      << "\" fill=\"none\" stroke=\"black\"/>\n";
  for (int t = 0; t <= 4; ++t) {
    const double fx = x0 + kW * t / 4.0, fy = y0 + kH - kH * t / 4.0;
    svg << "<line x1=\"" << fmt(fx) << "\" y1=\"" << fmt(y0 + kH) << "\" x2=\"" << fmt(fx) << "\" y2=\""
        << fmt(y0 + kH + 4) << "\" stroke=\"black\"/>\n";
    svg << "<text x=\"" << fmt(fx) << "\" y=\"" << fmt(y0 + kH + 16) << "\" text-anchor=\"middle\" font-size=\"10\">"
        << fmt(p.xmax * t / 4.0) << "</text>\n";
    svg << "<line x1=\"" << fmt(x0 - 4) << "\" y1=\"" << fmt(fy) << "\" x2=\"" << fmt(x0) << "\" y2=\"" << fmt(fy)
        << "\" stroke=\"black\"/>\n";
    svg << "<text x=\"" << fmt(x0 - 6) << "\" y=\"" << fmt(fy + 3) << "\" text-anchor=\"end\" font-size=\"10\">"
        << fmt(p.ymax * t / 4.0) << "</text>\n";
  }
  svg << "<text x=\"" << fmt(x0 + kW / 2) << "\" y=\"" << fmt(y0 + kH + 32) << "\" text-anchor=\"middle\" font-size=\"12\">"
      << xml_escape(p.xlabel) << "</text>\n";
  svg << "<text x=\"" << fmt(ox + 14) << "\" y=\"" << fmt(y0 + kH / 2) << "\" text-anchor=\"middle\" font-size=\"12\" "
      << "transform=\"rotate(-90 " << fmt(ox + 14) << ' ' << fmt(y0 + kH / 2) << ")\">" << xml_escape(p.ylabel)
      << "</text>\n";
  for (std::size_t k = 0; k < p.series.size(); ++k) {
    const auto& s = p.series[k];
    const char* color = kPalette[k % std::size(kPalette)];
    svg << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
    for (std::size_t i = 0; i < s.points.size(); ++i) {
      const double px = x0 + kW * std::clamp(s.points[i].first / p.xmax, 0.0, 1.0);
      const double py = y0 + kH - kH * std::clamp(s.points[i].second / p.ymax, 0.0, 1.0);
      svg << (i ? " " : "") << fmt(px) << ',' << fmt(py);
    }
    svg << "\"/>\n";
    svg << "<text x=\"" << fmt(x0 + kW - 6) << "\" y=\"" << fmt(y0 + 16 + 14 * k) << "\" text-anchor=\"end\" font-size=\"11\" fill=\""
        << color << "\">" << xml_escape(s.label) << "</text>\n";
  }
  svg << "</g>\n";
}

}  // namespace

std::string render_svg(const std::vector<fs::path>& csv_inputs) {
  if (csv_inputs.empty()) throw CliError("plot needs at least one CSV input");
  std::map<std::string, Panel> pr;  // keyed "criterion/class" for a stable panel order
  Panel loss{"Training loss", "epoch", "loss", 1, 1, {}};
  bool any_curve = false;
  double max_loss = 0, max_epoch = 0;

  for (const auto& path : csv_inputs) {
    std::ifstream in(path);
    if (!in) throw CliError("cannot open " + path.string());
    std::string line;
    if (!std::getline(in, line)) throw CliError(path.string() + ":1: empty file");
    int lineno = 1;
    if (line == kPrHeader) {
      while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        const auto f = split_csv(line, path, lineno);
        if (f.size() != 6) throw CliError(path.string() + ":" + std::to_string(lineno) + ": expected 6 fields");
        const double recall = parse_number(f[3], path, lineno), precision = parse_number(f[4], path, lineno);
        parse_number(f[5], path, lineno);
        if (f[1] != "VEHICLE" && f[1] != "HUMAN") {
          throw CliError(path.string() + ":" + std::to_string(lineno) + ": unknown class '" + f[1] + "'");
        }
        if (f[2] != "iou" && f[2] != "centroid") {
          throw CliError(path.string() + ":" + std::to_string(lineno) + ": unknown criterion '" + f[2] + "'");
        }
        const std::string key = (f[2] == "iou" ? "0" : "1") + f[1];
        Panel& panel = pr[key];
        if (panel.title.empty()) {
          panel = {f[1] + " precision-recall (" + (f[2] == "iou" ? "IoU" : "centroid") + ")", "recall", "precision", 1, 1, {}};
        }
        series_for(panel, f[0]).points.emplace_back(recall, precision);
      }
    } else if (line.rfind(kCurveHeaderPrefix, 0) == 0) {
      any_curve = true;
      const std::size_t columns = split_csv(line, path, lineno).size();
      std::string label = path.parent_path().filename().string();
      if (label.empty() || label == ".") label = path.stem().string();
      Series& s = series_for(loss, label);
      while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        const auto f = split_csv(line, path, lineno);
        if (f.size() != columns) {
          throw CliError(path.string() + ":" + std::to_string(lineno) + ": expected " + std::to_string(columns) + " fields");
        }
        const double epoch = parse_number(f[0], path, lineno), value = parse_number(f[1], path, lineno);
        s.points.emplace_back(epoch, value);
        max_epoch = std::max(max_epoch, epoch);
        if (std::isfinite(value)) max_loss = std::max(max_loss, value);
      }
    } else {
      throw CliError(path.string() + ":1: unrecognized header '" + line + "'");
    }
  }
  std::vector<const Panel*> panels;
  for (const auto& [key, panel] : pr) panels.push_back(&panel);
  if (any_curve) {
    loss.xmax = std::max(1.0, max_epoch);
    loss.ymax = max_loss > 0 ? max_loss * 1.05 : 1.0;
    panels.push_back(&loss);
  }
  constexpr double kPanelW = 440, kPanelH = 340;
  const int cols = std::max<int>(1, std::min<int>(2, static_cast<int>(panels.size())));
  const int nrows = std::max<int>(1, (static_cast<int>(panels.size()) + cols - 1) / cols);
  std::ostringstream svg;
  svg << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << fixed2(cols * kPanelW) << "\" height=\""
      << fixed2(nrows * kPanelH) << "\" font-family=\"sans-serif\">\n";
  svg << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  if (panels.empty()) {
    // Inputs without any rows: a single empty PR panel.
    static const Panel empty{"precision-recall", "recall", "precision", 1, 1, {}};
    draw_panel(svg, empty, 0, 0);
  }
  for (std::size_t k = 0; k < panels.size(); ++k) {
    draw_panel(svg, *panels[k], kPanelW * static_cast<double>(k % cols), kPanelH * static_cast<double>(k / cols));
  }
  svg << "</svg>\n";
  return svg.str();
}

void cmd_plot(const std::vector<fs::path>& csv_inputs, const fs::path& out) {
  const std::string svg = render_svg(csv_inputs);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  std::ofstream f(out, std::ios::trunc | std::ios::binary);
  if (!f) throw CliError("cannot write " + out.string());
  f << svg;
}

}  // namespace prior3d
