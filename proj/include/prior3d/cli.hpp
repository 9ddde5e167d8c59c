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

// Batch commands behind the prior3d binary: dataset generation, training,
// evaluation, report comparison and SVG plots.

#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "prior3d/detector.hpp"
#include "prior3d/eval.hpp"
#include "prior3d/scene.hpp"
#include "prior3d/training.hpp"

namespace prior3d {

// User-facing failure: bad flags, conflicting inputs, refused overwrites.
class CliError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct DatasetSizes {
  int train = 2000, val = 200, test = 200;
};

struct RunConfig {
  std::uint64_t seed = 0;
  DatasetSizes dataset;
  SceneConfig scene;
  PriorNoiseConfig noise = PriorNoiseConfig::realistic();
  LidarConfig lidar;
  double lidar_subsample = 0.25;
  DetectorConfig model;
  TrainConfig training;
  EvalConfig eval;

  void validate() const;
};

// Sections: seed, dataset, scene, noise, lidar, model, training, eval.
// Missing keys keep their defaults; unknown keys anywhere are rejected.
nlohmann::json to_json(const RunConfig& c);
RunConfig run_config_from_json(const nlohmann::json& j);
// Layers `overrides` onto `base` (objects merge recursively) and parses.
RunConfig run_config_from_json(const nlohmann::json& base, const nlohmann::json& overrides);

// Dataset root: the explicit path, else $PRIOR3D_DATA, else an error.
std::filesystem::path resolve_dataset(const std::string& explicit_path);

struct GenDataOptions {
  std::optional<int> scenes;  // total scene count, split in the configured proportions
  int jobs = 1;
  bool force = false;
};

// Scene i of the run is generated from mix_seed(seed, i); ids are
// "scene_000000", ... in train, val, test order.
Splits cmd_gen_data(const RunConfig& config, const std::filesystem::path& out_dir, const GenDataOptions& options,
                    std::ostream& log);

struct TrainOptions {
  std::string priors;      // empty: keep the config's flags
  std::string loc_source;  // "ray" | "lidar", empty: keep
  std::optional<int> overfit;
  std::optional<int> epochs;
  bool force = false;
};

TrainResult cmd_train(RunConfig config, const std::filesystem::path& dataset, const std::filesystem::path& out_dir,
                      const TrainOptions& options, std::ostream& log);

// Writes report.json and pr.csv into `out_dir` (default: the run directory).
EvalReport cmd_eval(const std::filesystem::path& run_dir, const std::filesystem::path& dataset,
                    const std::string& split, const std::filesystem::path& out_dir, int jobs, std::ostream& log);

// AP points (x100) with an explicit sign, two decimals: "+1.83", "-0.40".
std::string format_delta(double ap_points);

struct Comparison {
  std::string table;
  bool ordering_checked = false;  // at least two ordering variants present
  bool ordering_holds = false;
};

// Per-class AP@IoU and AP@centroid of every report with deltas against the
// first; the verdict tests strict VEHICLE AP@IoU ordering of the variants
// none < feat < feat,loc < feat,loc,query among those present.
Comparison compare_reports(const std::vector<EvalReport>& reports);
// Prints the table and the verdict line; true when the verdict is PASS.
bool cmd_compare(const std::vector<std::filesystem::path>& reports, std::ostream& out);

// One SVG holding a PR-curve panel per class (IoU criterion) for PR CSVs and
// a loss-vs-epoch panel for learning-curve CSVs.
std::string render_svg(const std::vector<std::filesystem::path>& csv_inputs);
void cmd_plot(const std::vector<std::filesystem::path>& csv_inputs, const std::filesystem::path& out);

}  // namespace prior3d
