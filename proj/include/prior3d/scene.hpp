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

// Procedural multi-camera cuboid world: scene layout, per-camera rendering
// of images and 2D priors, prior corruption, simulated lidar and the on-disk
// dataset format.

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "prior3d/geometry.hpp"

namespace prior3d {

struct SizeRange {
  double min = 1, max = 1;
};

struct ClassSpec {
  ObjectClass label = ObjectClass::kVehicle;
  int min_count = 0, max_count = 0;
  SizeRange length, width, height;
};

struct RigConfig {
  int num_cameras = 6;
  int width = 160, height = 96;
  double hfov_deg = 90.0;
  double mount_height = 1.6;
  double mount_radius = 0.5;  // cameras sit on a ring around the rig origin
};

struct SceneConfig {
  std::vector<ClassSpec> classes = default_classes();
  double min_radius = 6.0;
  double max_radius = kMaxRange;
  double min_separation = 1.0;  // minimum BEV centroid spacing on top of non-overlap
  int max_retries = 500;
  RigConfig rig;

  static std::vector<ClassSpec> default_classes();
  void validate() const;
};

struct Scene {
  std::uint64_t seed = 0;
  std::vector<Camera> cameras;
  std::vector<Cuboid> cuboids;
  std::vector<std::array<float, 3>> albedo;  // per cuboid
  bool partial = false;  // fewer cuboids than requested could be placed
};

std::vector<Camera> make_rig(const RigConfig& rig);

// Deterministic in (config, seed). Cuboids rest on the ground (z = h / 2),
// have disjoint footprints and lie within max_radius of the rig origin.
Scene generate_scene(const SceneConfig& config, std::uint64_t seed);

struct RenderedView {
  int width = 0, height = 0;
  std::vector<float> image;     // H x W x 3, toy shading in [0, 1]
  std::vector<float> semantic;  // H x W x kNumSemanticChannels
  std::vector<float> depth;     // H x W, camera depth / kDepthMax clamped to [0, 1]
  std::vector<Box2D> boxes;

  float& semantic_at(int y, int x, int c) { return semantic[(static_cast<std::size_t>(y) * width + x) * kNumSemanticChannels + c]; }
  float semantic_at(int y, int x, int c) const { return semantic[(static_cast<std::size_t>(y) * width + x) * kNumSemanticChannels + c]; }
  float depth_at(int y, int x) const { return depth[static_cast<std::size_t>(y) * width + x]; }

  bool operator==(const RenderedView&) const = default;
};

inline constexpr double kDepthMax = 50.0;

// Ray-cast z-buffer of the cuboid faces seen by `camera`. Semantic channel of
// the front-most object's class is 1 (background channel where no object is
// hit); depth of background pixels is 1. Boxes are the noiseless 2D boxes of
// every cuboid with at least one visible pixel, score 1, `source` set to the
// cuboid index.
RenderedView render_view(const Scene& scene, const Camera& camera);

struct PriorNoiseConfig {
  double center_sigma_px = 0;
  double size_sigma_rel = 0;
  double score_min = 1, score_max = 1;  // true-box scores ~ U[min, max]
  double false_negative_prob = 0;
  double false_positive_rate = 0;  // Poisson mean per view
  double fp_score_min = 0.05, fp_score_max = 0.5;
  int semantic_blur = 0;  // box-filter radius, pixels
  double semantic_noise = 0;
  int depth_blur = 0;
  double depth_noise = 0;

  static PriorNoiseConfig none() { return {}; }
  // Imperfect-backbone defaults used for training data.
  static PriorNoiseConfig realistic();
  bool is_zero() const;
  void validate() const;
};

// Applies box jitter, score sampling, drop-outs, false positives and map
// blur/noise. Image and everything else are passed through unchanged.
RenderedView corrupt_priors(const RenderedView& view, const PriorNoiseConfig& noise, std::uint64_t seed);

enum class LidarSource : std::uint8_t { kObject = 0, kGround = 1 };

struct LidarConfig {
  int num_beams = 16;  // elevation rows
  int num_azimuth = 720;
  double min_elevation_deg = -15.0;
  double max_elevation_deg = 5.0;
  double mount_height = 1.8;
  double max_range = kMaxRange;
};

struct LidarScan {
  std::vector<Eigen::Vector3d> points;  // world frame, f32-representable
  std::vector<LidarSource> source;
  std::vector<int> object;  // cuboid index, -1 for ground

  std::size_t size() const { return points.size(); }
  bool operator==(const LidarScan&) const = default;
};

// First hit per beam of the elevation x azimuth grid (cuboid faces or the
// z = 0 ground), then an evenly spaced subsample of round(n * rate) points.
LidarScan simulate_lidar(const Scene& scene, const LidarConfig& config, double subsample_rate);
// Evenly spaced subsample keeping `count` points.
LidarScan subsample_lidar(const LidarScan& scan, std::size_t count);

// One training/evaluation sample.
struct Frame {
  std::string id;
  Scene scene;
  std::vector<RenderedView> views;               // priors as seen by the model
  std::vector<std::vector<Box2D>> clean_boxes;   // noiseless boxes per camera
  LidarScan lidar;
};

struct FrameOptions {
  PriorNoiseConfig noise = PriorNoiseConfig::realistic();
  LidarConfig lidar;
  double lidar_subsample = 0.25;
};

Frame make_frame(const SceneConfig& config, std::uint64_t seed, const FrameOptions& options, std::string id = {});

// Boxes whose centers are the projected 3D centroids (noiseless, score 1),
// one per cuboid whose centroid projects inside the image.
std::vector<Box2D> centroid_boxes(const Scene& scene, const Camera& camera);

// ---- dataset ----------------------------------------------------------------

struct Splits {
  std::vector<std::string> train, val, test;
  const std::vector<std::string>& get(std::string_view name) const;
};

inline constexpr const char* kSplitsFile = "splits.json";
inline constexpr const char* kSceneManifest = "manifest.json";
inline constexpr const char* kSceneBlob = "data.bin";

void write_frame(const Frame& frame, const std::filesystem::path& dir);
Frame read_frame(const std::filesystem::path& dir);

// Writes each frame into `root/<id>/` and `root/splits.json`.
void write_dataset(const std::vector<Frame>& frames, const Splits& splits, const std::filesystem::path& root,
                   const nlohmann::json& config_echo = nlohmann::json::object());
void write_splits(const Splits& splits, const std::filesystem::path& root, std::size_t scene_count,
                  const nlohmann::json& config_echo = nlohmann::json::object());
Splits read_splits(const std::filesystem::path& root);
// Reads every frame of `split` (or all frames for an empty split name).
std::vector<Frame> read_dataset(const std::filesystem::path& root, std::string_view split = {});

nlohmann::json to_json(const Camera& c);
Camera camera_from_json(const nlohmann::json& j);
nlohmann::json to_json(const Cuboid& c);
Cuboid cuboid_from_json(const nlohmann::json& j);
nlohmann::json to_json(const Box2D& b);
Box2D box_from_json(const nlohmann::json& j);

}  // namespace prior3d
