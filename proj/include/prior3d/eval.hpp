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

// Bird's-eye-view detection metrics.

#pragma once

#include <array>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "prior3d/detector.hpp"
#include "prior3d/geometry.hpp"
#include "prior3d/scene.hpp"

namespace prior3d {

enum class MatchCriterion { kIoU, kCentroid };

struct EvalConfig {
  double iou_threshold = 0.1;
  double centroid_threshold = 4.0;  // meters
  double max_range = kMaxRange;
  double refpoint_radius = 2.5;
  double smear_score = 0.3;
  double smear_width = 2.0;
  bool nms = false;
  double nms_iou = 0.2;
  int jobs = 1;

  void validate() const;
};

nlohmann::json to_json(const EvalConfig& c);
EvalConfig eval_config_from_json(const nlohmann::json& j);

struct PRPoint {
  double recall = 0, precision = 0, score = 0;
};

struct PRCurve {
  std::vector<PRPoint> points;  // descending score threshold
};

struct ClassAP {
  bool present = false;  // false when the class has no ground truth
  double ap = 0;
  int num_gt = 0, num_detections = 0;
  PRCurve curve;
};

struct APResult {
  std::array<ClassAP, kNumClasses> classes;
  // Mean over present classes; NaN when none is present.
  double mean() const;
};

// Detections and ground truth of one frame.
struct FrameEval {
  std::vector<Detection> detections;
  std::vector<Cuboid> gts;
};

// All-point AP per class. Detections are visited by descending score (ties:
// smaller distance to the nearest same-class GT, then frame and index) and
// greedily matched to the best unmatched GT that passes the threshold.
APResult average_precision(const std::vector<FrameEval>& frames, MatchCriterion criterion, double threshold,
                           double max_range = kMaxRange);

struct RefPointStats {
  std::vector<double> distances;  // per GT, nearest reference point
  bool empty_queries = false;     // some frame had no reference points
  double recall(double radius) const;
};

// `references[f]` are the reference points of frame f, `gts[f]` its GT.
RefPointStats refpoint_recall(const std::vector<std::vector<Eigen::Vector3d>>& references,
                              const std::vector<std::vector<Cuboid>>& gts, double max_range = kMaxRange);

struct SmearingStats {
  std::vector<int> counts;  // per GT
  double mean() const;
};

// Per GT, the number of predictions scoring >= tau whose BEV center is within
// `width` of the BEV ray from the GT's observing camera through its centroid.
SmearingStats smearing_index(const std::vector<FrameEval>& frames, const std::vector<std::vector<Camera>>& cameras,
                             double tau, double width, double max_range = kMaxRange);
// Camera used for the smearing corridor: the one seeing the centroid closest
// to its optical axis, else the nearest camera.
int observing_camera(const std::vector<Camera>& cameras, const Eigen::Vector3d& point);

// Greedy per-class BEV NMS.
std::vector<Detection> bev_nms(std::vector<Detection> detections, double iou_threshold);

// GT used for training and evaluation: cuboids with at least one visible
// pixel in some camera.
std::vector<Cuboid> visible_gts(const Frame& frame);

struct EvalReport {
  std::string model;
  EvalConfig config;
  APResult ap_iou, ap_centroid;
  RefPointStats refpoints;
  SmearingStats smearing;
  // Summaries; the only parts of the two above kept by report_from_json.
  double smearing_mean = 0;
  double refpoint_recall = 0;
  int frames = 0;
  int fallback_frames = 0;
  long long queries = 0;
  long long invisible_queries = 0;
  nlohmann::json meta;

  // Per present class, AP at the centroid threshold >= AP at the IoU one.
  bool centroid_ge_iou() const;
  nlohmann::json to_json() const;
};

// Raw (argmax) detections of the final block, NMS applied when configured.
template <typename T>
std::vector<Detection> predict(const Detector<T>& model, const Frame& frame, const EvalConfig& config,
                               std::vector<Eigen::Vector3d>* references = nullptr, bool* fell_back = nullptr,
                               int* invisible = nullptr);

template <typename T>
EvalReport evaluate_run(const Detector<T>& model, const std::vector<Frame>& frames, const EvalConfig& config);

EvalReport report_from_json(const nlohmann::json& j);
// recall,precision,score rows per class and criterion.
void write_pr_csv(const EvalReport& report, const std::filesystem::path& path);

}  // namespace prior3d
