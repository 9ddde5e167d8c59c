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

#include <CLI11.hpp>

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "prior3d/checkpoint.hpp"
#include "prior3d/cli.hpp"

namespace fs = std::filesystem;
using namespace prior3d;

namespace {

// Exit codes.
constexpr int kOk = 0;
constexpr int kUsage = 2;
constexpr int kFailedVerdict = 3;
constexpr int kError = 1;

RunConfig load_config(const std::string& path, std::optional<std::uint64_t> seed, std::optional<int> jobs) {
  nlohmann::json base = nlohmann::json::object();
  if (!path.empty()) base = read_json_file(path);
  nlohmann::json overrides = nlohmann::json::object();
  if (seed) overrides["seed"] = *seed;
  if (jobs) overrides["eval"]["jobs"] = *jobs;
  return run_config_from_json(base, overrides);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"prior3d: multi-camera 3D detection with 2D priors on a synthetic cuboid world"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<int> jobs;
  bool force = false;
  app.add_option("--config", config_path, "JSON run configuration (flags override it)")->check(CLI::ExistingFile);
  app.add_option("--seed", seed, "Master seed");
  app.add_option("--jobs", jobs, "Worker threads for gen-data and eval")->check(CLI::PositiveNumber);
  app.add_flag("--force", force, "Overwrite a non-empty output directory");

  std::string out_dir, data_dir, run_dir, split = "test", priors, loc_source, plot_out;
  std::optional<int> scenes, overfit, epochs;
  bool check = false;
  std::vector<std::string> inputs;

  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic dataset with train/val/test splits");
  gen->add_option("--out", out_dir, "Output directory")->required();
  gen->add_option("--scenes", scenes, "Total scene count (split in the configured proportions)");

  auto* tr = app.add_subcommand("train", "Train one detector variant");
  tr->add_option("--data", data_dir, "Dataset root (default: $PRIOR3D_DATA)");
  tr->add_option("--out", out_dir, "Run directory")->required();
  tr->add_option("--priors", priors, "none | feat | feat,loc | feat,loc,query");
  tr->add_option("--loc-source", loc_source, "ray | lidar");
  tr->add_option("--overfit", overfit, "Train on the first N frames only");
  tr->add_option("--epochs", epochs, "Epoch count");

  auto* ev = app.add_subcommand("eval", "Evaluate a trained run");
  ev->add_option("--run", run_dir, "Run directory written by train")->required();
  ev->add_option("--data", data_dir, "Dataset root (default: $PRIOR3D_DATA)");
  ev->add_option("--split", split, "train | val | test");
  ev->add_option("--out", out_dir, "Report directory (default: the run directory)");

  auto* cmp = app.add_subcommand("compare", "Compare evaluation reports against the first");
  cmp->add_option("reports", inputs, "report.json files")->required()->check(CLI::ExistingFile);
  cmp->add_flag("--check", check, "Exit with status 3 unless the ordering verdict is PASS");

  auto* plt = app.add_subcommand("plot", "Render PR or learning-curve CSVs as SVG");
  plt->add_option("csv", inputs, "pr.csv or learning_curve.csv files")->required()->check(CLI::ExistingFile);
  plt->add_option("--out", plot_out, "SVG output path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kOk : kUsage;
  }

  try {
    if (gen->parsed()) {
      const RunConfig config = load_config(config_path, seed, jobs);
      GenDataOptions options;
      options.scenes = scenes;
      options.jobs = jobs.value_or(1);
      options.force = force;
      cmd_gen_data(config, out_dir, options, std::cout);
    } else if (tr->parsed()) {
      const RunConfig config = load_config(config_path, seed, jobs);
      TrainOptions options;
      options.priors = priors;
      options.loc_source = loc_source;
      options.overfit = overfit;
      options.epochs = epochs;
      options.force = force;
      const auto result = cmd_train(config, resolve_dataset(data_dir), out_dir, options, std::cout);
      if (result.aborted) return kError;
    } else if (ev->parsed()) {
      cmd_eval(run_dir, resolve_dataset(data_dir), split, out_dir, jobs.value_or(1), std::cout);
    } else if (cmp->parsed()) {
      std::vector<fs::path> paths(inputs.begin(), inputs.end());
      const bool pass = cmd_compare(paths, std::cout);
      if (check && !pass) return kFailedVerdict;
    } else if (plt->parsed()) {
      std::vector<fs::path> paths(inputs.begin(), inputs.end());
      cmd_plot(paths, plot_out);
      std::cout << "wrote " << plot_out << '\n';
    }
  } catch (const CliError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kError;
  }
  return kOk;
}
