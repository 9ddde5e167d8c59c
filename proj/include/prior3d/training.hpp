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

// Set-prediction training: assignment, losses and the optimization loop.

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>
#include <json.hpp>

#include "prior3d/detector.hpp"
#include "prior3d/eval.hpp"
#include "prior3d/optim.hpp"

namespace prior3d {

struct MatchResult {
  std::vector<std::pair<int, int>> pairs;  // (row, column), sorted by row
  double total_cost = 0;
};

// Minimum-cost assignment on a rectangular matrix; min(n, m) pairs. Throws
// std::invalid_argument for non-finite costs.
MatchResult hungarian(const Eigen::MatrixXd& cost);

struct LossWeights {
  double cls = 2.0;
  double box = 0.25;
};

struct FocalParams {
  double alpha = 0.25;
  double gamma = 2.0;
};

struct TrainConfig {
  int epochs = 24;
  int batch_size = 4;
  std::uint64_t seed = 0;
  double base_lr = kBaseLearningRate;
  double weight_decay = kWeightDecay;
  LossWeights weights;
  FocalParams focal;
  int overfit = 0;         // > 0: train on the first N frames only
  int val_every = 1;       // epochs between validation passes, 0 disables
  int val_limit = 0;       // > 0: validate on the first N val frames
  bool log = false;        // per-epoch progress on stderr

  void validate() const;
};

nlohmann::json to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const nlohmann::json& j);

// Box parameters compared by the cost and the L1 loss:
// center (3), extents (3), sin(yaw), cos(yaw).
inline constexpr int kBoxParams = 8;
Eigen::Matrix<double, 1, kBoxParams> box_params(const Cuboid& c);

// cost(i, j) = w.cls * (1 - p_i(class_j)) + w.box * L1(params_i, params_j).
template <typename T>
Eigen::MatrixXd match_cost(const DetectionOutput<T>& out, const std::vector<Cuboid>& gts, const LossWeights& w);

template <typename T>
struct LossBreakdown {
  Tensor<T> total;         // mean over blocks of w.cls * cls + w.box * box
  double cls = 0, box = 0; // unweighted, averaged over blocks
  std::vector<MatchResult> matches;  // per block
};

// Focal classification over all queries (normalized by max(1, #GT)) and L1
// over matched queries (same normalization), matching each block separately.
template <typename T>
LossBreakdown<T> set_loss(const std::vector<DetectionOutput<T>>& blocks, const std::vector<Cuboid>& gts,
                          const LossWeights& weights, const FocalParams& focal);

struct EpochRecord {
  int epoch = 0;
  double loss = 0, cls = 0, box = 0;
  double lr = 0;
  // NaN when not evaluated or the class is absent.
  double val_ap_vehicle = 0, val_ap_human = 0, val_ap_mean = 0;
  double seconds = 0;
};

struct LearningCurve {
  std::vector<EpochRecord> epochs;

  void write_csv(const std::filesystem::path& path) const;
  static LearningCurve read_csv(const std::filesystem::path& path);
};

struct TrainResult {
  LearningCurve curve;
  int best_epoch = 0;
  double best_val = 0;
  bool aborted = false;
  std::string abort_reason;
};

inline constexpr const char* kCheckpointDir = "checkpoint";
inline constexpr const char* kCurveFile = "learning_curve.csv";
inline constexpr const char* kRunConfigFile = "run_config.json";

// Random-access training frames, loaded on demand.
struct FrameSource {
  std::size_t size = 0;
  std::function<Frame(std::size_t)> get;

  // Borrows `frames`, which must outlive the source.
  static FrameSource of(const std::vector<Frame>& frames);
};

// Trains `model` in place. When `out_dir` is non-empty the best-validation
// checkpoint (the last epoch without validation), the learning curve and
// `sidecar` are written there. On return the model holds the retained
// parameters. A non-finite loss or gradient stops training early and keeps
// the last good parameters.
template <typename T>
TrainResult train(Detector<T>& model, const FrameSource& train_frames, const std::vector<Frame>& val_frames,
                  const TrainConfig& config, const std::filesystem::path& out_dir = {},
                  const nlohmann::json& sidecar = nlohmann::json::object());

template <typename T>
TrainResult train(Detector<T>& model, const std::vector<Frame>& train_frames, const std::vector<Frame>& val_frames,
                  const TrainConfig& config, const std::filesystem::path& out_dir = {},
                  const nlohmann::json& sidecar = nlohmann::json::object()) {
  return train(model, FrameSource::of(train_frames), val_frames, config, out_dir, sidecar);
}

struct GtCensus {
  int gt = -1;
  int matched_queries = 0;     // queries labelled positive for this GT
  int ray_queries = 0;         // queries generated from this GT's 2D boxes
  int ray_negatives = 0;       // of those, labelled negative
  int nearby_negatives = 0;    // negatives predicted within `radius` (BEV)
};

struct AssignmentCensus {
  std::vector<GtCensus> per_gt;
  int positives = 0, negatives = 0, total_queries = 0;
};

// Final-block assignment of one frame, broken down per GT.
template <typename T>
AssignmentCensus footnote_assignment_probe(const Detector<T>& model, const Frame& frame,
                                           const LossWeights& weights = {}, double radius = 4.0);

}  // namespace prior3d
