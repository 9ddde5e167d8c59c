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

// Multi-camera query-based 3D detector: a small convolutional backbone, three
// ways of producing queries (learned, 2D-box rays, lidar points), a stack of
// transformer blocks with local cross-attention and a shared detection head.

#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "prior3d/checkpoint.hpp"
#include "prior3d/geometry.hpp"
#include "prior3d/scene.hpp"
#include "prior3d/tensor.hpp"

namespace prior3d {

enum class LocSource { kRay, kLidar };

struct PriorFlags {
  bool feat = false;   // semantic + depth maps concatenated into the backbone
  bool loc = false;    // reference points from 2D boxes (or lidar)
  bool query = false;  // query features pooled from the 2D priors
  LocSource loc_source = LocSource::kRay;

  bool operator==(const PriorFlags&) const = default;
};

// "none", "feat", "feat,loc", "feat,loc,query", optionally with loc-source.
std::string prior_flags_name(const PriorFlags& flags);
// Parses a comma list of feat/loc/query ("none" or "" for no priors).
PriorFlags parse_prior_flags(const std::string& list, LocSource source = LocSource::kRay);

struct DetectorConfig {
  int d = 64;
  int heads = 4;
  int blocks = 6;
  int num_cameras = 6;
  int num_vanilla = 100;
  int feature_channels = 32;  // F, per level
  int stem_channels = 16;
  int ffn_dim = 128;
  int pos_freqs = 6;
  PriorFlags priors;
  bool refine = true;

  double ray_interval = kRayInterval;
  double max_range = kMaxRange;
  RayDepth ray_depth = RayDepth::kEuclidean;
  double box_score_threshold = 0.3;
  int query_budget = 600;
  int lidar_queries = 150;  // lidar reference points, at most query_budget

  // Throws std::invalid_argument for inconsistent settings.
  void validate() const;
};

nlohmann::json to_json(const DetectorConfig& c);
// Missing keys keep their defaults; unknown keys are rejected.
DetectorConfig detector_config_from_json(const nlohmann::json& j);

inline constexpr int kNumLevels = 2;
inline constexpr int kLevelStride[kNumLevels] = {4, 8};
// Volume into which learned reference points are squashed.
inline constexpr double kSceneXYExtent = 50.0;
inline constexpr double kSceneZMin = -3.0;
inline constexpr double kSceneZMax = 5.0;

template <typename T>
struct Linear {
  Tensor<T> weight;  // [in x out]
  Tensor<T> bias;    // [out]

  Tensor<T> operator()(const Tensor<T>& x) const { return add_bias(matmul(x, weight), bias); }
};

// Two linear layers with a ReLU in between.
template <typename T>
struct Mlp2 {
  Linear<T> first, second;

  Tensor<T> operator()(const Tensor<T>& x) const { return second(relu(first(x))); }
};

template <typename T>
struct LayerNormAffine {
  Tensor<T> gain, shift;  // [d]

  Tensor<T> operator()(const Tensor<T>& x) const { return add_bias(mul_bias(layer_norm(x), gain), shift); }
};

template <typename T>
struct BackboneFeatures {
  // levels[camera][level], each [h x w x F].
  std::vector<std::vector<Tensor<T>>> levels;
  // Semantic channels and depth average-pooled to each level, [h x w x C+1].
  std::vector<std::vector<Tensor<T>>> prior_maps;
  int image_width = 0, image_height = 0;

  int num_cameras() const { return static_cast<int>(levels.size()); }
};

enum class QueryKind { kVanilla, kRay, kLidar };

struct QuerySource {
  QueryKind kind = QueryKind::kVanilla;
  int camera = -1;       // ray: camera of the box
  int box = -1;          // ray: box index within that camera's list
  int depth_index = -1;  // ray: sample index along the ray
  int point = -1;        // lidar: index into the subsampled scan
};

template <typename T>
struct QuerySet {
  Tensor<T> q_feat;     // [N x d]
  Tensor<T> q_pos;      // [N x d]
  Tensor<T> reference;  // [N x 3]
  std::vector<QuerySource> sources;
  // The requested prior source produced no queries; the set is the
  // vanilla fallback.
  bool fell_back = false;

  int size() const { return static_cast<int>(sources.size()); }
};

template <typename T>
struct DetectionOutput {
  Tensor<T> logits;     // [N x kNumClasses], sigmoid scores
  Tensor<T> offsets;    // [N x 3], world frame
  Tensor<T> extents;    // [N x 3], softplus, > 0
  Tensor<T> yaw;        // [N x 2], raw (sin, cos)
  Tensor<T> reference;  // [N x 3], reference points this block used
  Tensor<T> centers;    // reference + offsets

  int size() const { return logits.dim(0); }
};

struct Detection {
  Cuboid box;
  double score = 0;
  int query = -1;
};

// Argmax-class detections, one per query.
template <typename T>
std::vector<Detection> decode_detections(const DetectionOutput<T>& out);

// atan2 of the normalized pair; 0 for a zero pair.
double yaw_from_sincos(double s, double c);

template <typename T>
struct ForwardResult {
  QuerySet<T> queries;
  std::vector<DetectionOutput<T>> blocks;
  int invisible_queries = 0;  // queries with no valid sample in the last block
};

template <typename T>
struct CrossAttentionResult {
  Tensor<T> update;  // [N x d], zero rows for invisible queries
  std::vector<std::uint8_t> visible;
  Tensor<T> aggregate;  // [N x F], weighted feature average before projection
  int invisible = 0;
};

// Differentiable projection of points[N x 3] into `camera`: uv[N x 2] image
// coordinates plus per-point validity (in front and inside the image).
template <typename T>
Sampled<T> project_points(const Tensor<T>& points, const Camera& camera);

template <typename T>
class Detector {
 public:
  Detector(const DetectorConfig& config, std::uint64_t seed);

  const DetectorConfig& config() const { return config_; }
  NamedParameters<T>& parameters() { return params_; }
  const NamedParameters<T>& parameters() const { return params_; }
  std::vector<Tensor<T>> parameter_list() const;
  std::size_t parameter_count() const;

  // Per-camera images (and priors when the feat prior is on).
  BackboneFeatures<T> backbone_forward(const std::vector<RenderedView>& views) const;

  QuerySet<T> vanilla_queries() const;
  // Empty set when no box passes the score threshold.
  QuerySet<T> ray_queries(const std::vector<RenderedView>& views, const std::vector<Camera>& cameras,
                          const BackboneFeatures<T>& features) const;
  QuerySet<T> lidar_queries(const LidarScan& scan) const;
  // The set the configured prior flags call for, with vanilla fallback.
  QuerySet<T> make_queries(const Frame& frame, const BackboneFeatures<T>& features) const;

  // Pre-MLP pooled vector: [depth, level0 (F), level1 (F), one-hot class,
  // score, u/W, v/H, w/W, h/H].
  Tensor<T> query_prior_vector(const Box2D& box, const RenderedView& view, const BackboneFeatures<T>& features,
                               int camera) const;
  Tensor<T> query_prior_features(const Box2D& box, const RenderedView& view, const BackboneFeatures<T>& features,
                                 int camera) const;
  int query_prior_vector_size() const;

  CrossAttentionResult<T> local_cross_attention(int block, const Tensor<T>& x, const Tensor<T>& pos,
                                                const Tensor<T>& reference, const BackboneFeatures<T>& features,
                                                const std::vector<Camera>& cameras) const;

  DetectionOutput<T> head(const Tensor<T>& x, const Tensor<T>& reference) const;

  ForwardResult<T> decoder_forward(const QuerySet<T>& queries, const BackboneFeatures<T>& features,
                                   const std::vector<Camera>& cameras) const;

  ForwardResult<T> forward(const Frame& frame) const;

  void save(const std::filesystem::path& dir, const nlohmann::json& meta = nlohmann::json::object()) const;
  // Rejects checkpoints written for a different configuration.
  void load(const std::filesystem::path& dir);

 private:
  struct Block {
    Linear<T> q, k, v, o;
    LayerNormAffine<T> norm1;
    Linear<T> sample_weights;  // d -> cameras * levels
    Linear<T> cross_out;
    LayerNormAffine<T> norm2;
    Linear<T> ffn1, ffn2;
    LayerNormAffine<T> norm3;
  };

  Tensor<T> add_param(const std::string& name, Shape shape, Vec<T> values);
  Linear<T> make_linear(const std::string& name, int in, int out, double bias_init = 0.0);
  Mlp2<T> make_mlp(const std::string& name, int in, int hidden, int out);
  LayerNormAffine<T> make_norm(const std::string& name, int d);
  Tensor<T> encode_position(const Tensor<T>& points) const;
  Tensor<T> self_attention(const Block& b, const Tensor<T>& x, const Tensor<T>& pos) const;

  DetectorConfig config_;
  std::mt19937_64 rng_;
  NamedParameters<T> params_;

  Linear<T> stem_, conv2_, conv3_, proj0_, proj1_;
  Tensor<T> vanilla_pos_, vanilla_feat_;
  Mlp2<T> ref_mlp_, pos_mlp_, cross_pos_mlp_, prior_mlp_;
  std::vector<Block> blocks_;
  Mlp2<T> cls_head_, reg_head_;
};

}  // namespace prior3d
