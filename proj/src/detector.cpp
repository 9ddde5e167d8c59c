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

#include "prior3d/detector.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <set>
#include <sstream>
#include <stdexcept>

#include "prior3d/random.hpp"

namespace prior3d {

std::string prior_flags_name(const PriorFlags& flags) {
  std::string name;
  auto append = [&name](const char* part) {
    if (!name.empty()) name += ',';
    name += part;
  };
  if (flags.feat) append("feat");
  if (flags.loc) append(flags.loc_source == LocSource::kLidar ? "lidar" : "loc");
  if (flags.query) append("query");
  return name.empty() ? "none" : name;
}

PriorFlags parse_prior_flags(const std::string& list, LocSource source) {
  PriorFlags flags;
  flags.loc_source = source;
  if (list.empty() || list == "none") return flags;
  std::stringstream in(list);
  std::string part;
  while (std::getline(in, part, ',')) {
    if (part == "feat") {
      flags.feat = true;
    } else if (part == "loc") {
      flags.loc = true;
    } else if (part == "lidar") {
      flags.loc = true;
      flags.loc_source = LocSource::kLidar;
    } else if (part == "query") {
      flags.query = true;
    } else {
      throw std::invalid_argument("unknown prior '" + part + "' (expected feat, loc, query or none)");
    }
  }
  return flags;
}

void DetectorConfig::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("detector config: " + msg); };
  if (d <= 0 || heads <= 0 || d % heads != 0) fail("d must be a positive multiple of heads");
  if (blocks < 1) fail("blocks must be >= 1");
  if (num_cameras < 1) fail("num_cameras must be >= 1");
  if (num_vanilla < 1) fail("num_vanilla must be >= 1");
  if (feature_channels < 1 || stem_channels < 1 || ffn_dim < 1) fail("layer widths must be positive");
  if (pos_freqs < 1) fail("pos_freqs must be >= 1");
  if (!(ray_interval > 0) || !(max_range >= ray_interval)) fail("need 0 < ray_interval <= max_range");
  if (box_score_threshold < 0 || box_score_threshold > 1) fail("box_score_threshold must be in [0, 1]");
  if (query_budget < 1) fail("query_budget must be >= 1");
  if (lidar_queries < 1) fail("lidar_queries must be >= 1");
  if (priors.query && !priors.loc) fail("query priors require loc priors");
  if (priors.query && priors.loc_source == LocSource::kLidar) {
    fail("query priors require 2D boxes and cannot be combined with lidar locations");
  }
}

nlohmann::json to_json(const DetectorConfig& c) {
  return {{"d", c.d},
          {"heads", c.heads},
          {"blocks", c.blocks},
          {"num_cameras", c.num_cameras},
          {"num_vanilla", c.num_vanilla},
          {"feature_channels", c.feature_channels},
          {"stem_channels", c.stem_channels},
          {"ffn_dim", c.ffn_dim},
          {"pos_freqs", c.pos_freqs},
          {"priors",
           {{"feat", c.priors.feat},
            {"loc", c.priors.loc},
            {"query", c.priors.query},
            {"loc_source", c.priors.loc_source == LocSource::kLidar ? "lidar" : "ray"}}},
          {"refine", c.refine},
          {"ray_interval", c.ray_interval},
          {"max_range", c.max_range},
          {"ray_depth", c.ray_depth == RayDepth::kCameraZ ? "camera_z" : "euclidean"},
          {"box_score_threshold", c.box_score_threshold},
          {"query_budget", c.query_budget},
          {"lidar_queries", c.lidar_queries}};
}

namespace {

void reject_unknown(const nlohmann::json& j, const std::set<std::string>& known, const std::string& where) {
  if (!j.is_object()) throw std::invalid_argument(where + ": expected an object");
  for (const auto& [key, value] : j.items()) {
    if (!known.count(key)) throw std::invalid_argument(where + ": unknown key '" + key + "'");
  }
}

template <typename V>
void read_key(const nlohmann::json& j, const char* key, V& out) {
  if (j.contains(key)) out = j.at(key).get<V>();
}

}  // namespace

DetectorConfig detector_config_from_json(const nlohmann::json& j) {
  reject_unknown(j,
                 {"d", "heads", "blocks", "num_cameras", "num_vanilla", "feature_channels", "stem_channels",
                  "ffn_dim", "pos_freqs", "priors", "refine", "ray_interval", "max_range", "ray_depth",
                  "box_score_threshold", "query_budget", "lidar_queries"},
                 "model");
  DetectorConfig c;
  read_key(j, "d", c.d);
  read_key(j, "heads", c.heads);
  read_key(j, "blocks", c.blocks);
  read_key(j, "num_cameras", c.num_cameras);
  read_key(j, "num_vanilla", c.num_vanilla);
  read_key(j, "feature_channels", c.feature_channels);
  read_key(j, "stem_channels", c.stem_channels);
  read_key(j, "ffn_dim", c.ffn_dim);
  read_key(j, "pos_freqs", c.pos_freqs);
  read_key(j, "refine", c.refine);
  read_key(j, "ray_interval", c.ray_interval);
  read_key(j, "max_range", c.max_range);
  read_key(j, "box_score_threshold", c.box_score_threshold);
  read_key(j, "query_budget", c.query_budget);
  read_key(j, "lidar_queries", c.lidar_queries);
  if (j.contains("ray_depth")) {
    const auto mode = j.at("ray_depth").get<std::string>();
    if (mode == "euclidean") {
      c.ray_depth = RayDepth::kEuclidean;
    } else if (mode == "camera_z") {
      c.ray_depth = RayDepth::kCameraZ;
    } else {
      throw std::invalid_argument("model.ray_depth: expected euclidean or camera_z");
    }
  }
  if (j.contains("priors")) {
    const auto& p = j.at("priors");
    reject_unknown(p, {"feat", "loc", "query", "loc_source"}, "model.priors");
    read_key(p, "feat", c.priors.feat);
    read_key(p, "loc", c.priors.loc);
    read_key(p, "query", c.priors.query);
    if (p.contains("loc_source")) {
      const auto src = p.at("loc_source").get<std::string>();
      if (src == "ray") {
        c.priors.loc_source = LocSource::kRay;
      } else if (src == "lidar") {
        c.priors.loc_source = LocSource::kLidar;
      } else {
        throw std::invalid_argument("model.priors.loc_source: expected ray or lidar");
      }
    }
  }
  return c;
}

double yaw_from_sincos(double s, double c) {
  const double n = std::hypot(s, c);
  if (n == 0) return 0.0;
  return std::atan2(s / n, c / n);
}

template <typename T>
std::vector<Detection> decode_detections(const DetectionOutput<T>& out) {
  const int n = out.size();
  std::vector<Detection> dets;
  dets.reserve(n);
  for (int i = 0; i < n; ++i) {
    int best = 0;
    for (int k = 1; k < kNumClasses; ++k) {
      if (out.logits.at(i, k) > out.logits.at(i, best)) best = k;
    }
    const double logit = out.logits.at(i, best);
    Detection det;
    det.query = i;
    det.score = logit >= 0 ? 1.0 / (1.0 + std::exp(-logit)) : std::exp(logit) / (1.0 + std::exp(logit));
    det.box.label = static_cast<ObjectClass>(best);
    det.box.center = {out.centers.at(i, 0), out.centers.at(i, 1), out.centers.at(i, 2)};
    det.box.extents = {out.extents.at(i, 0), out.extents.at(i, 1), out.extents.at(i, 2)};
    det.box.yaw = yaw_from_sincos(out.yaw.at(i, 0), out.yaw.at(i, 1));
    dets.push_back(det);
  }
  return dets;
}

template <typename T>
Sampled<T> project_points(const Tensor<T>& points, const Camera& camera) {
  if (points.rank() != 2 || points.dim(1) != 3) {
    throw ShapeError("project_points: expected [N x 3], got " + shape_string(points.shape()));
  }
  const int n = points.dim(0);
  const Eigen::Matrix<T, 3, 3> r = camera.rotation.cast<T>();
  const Eigen::Matrix<T, 3, 1> t = camera.translation.cast<T>();
  const T fx = static_cast<T>(camera.fx), fy = static_cast<T>(camera.fy);
  const T cx = static_cast<T>(camera.cx), cy = static_cast<T>(camera.cy);
  constexpr T kMinDepth = T(1e-3);
  constexpr T kFar = T(-1e6);  // lands outside any map, keeps samplers finite

  Sampled<T> out;
  out.valid.assign(n, 0);
  Vec<T> uv(2 * static_cast<Eigen::Index>(n));
  std::vector<Eigen::Matrix<T, 3, 1>> cam_points(n);
  for (int i = 0; i < n; ++i) {
    const Eigen::Matrix<T, 3, 1> p(points.at(i, 0), points.at(i, 1), points.at(i, 2));
    const Eigen::Matrix<T, 3, 1> pc = r * p + t;
    cam_points[i] = pc;
    if (pc.z() > kMinDepth) {
      const T u = fx * pc.x() / pc.z() + cx;
      const T v = fy * pc.y() / pc.z() + cy;
      uv[2 * i] = u;
      uv[2 * i + 1] = v;
      out.valid[i] = u >= 0 && u < T(camera.width) && v >= 0 && v < T(camera.height);
    } else {
      uv[2 * i] = kFar;
      uv[2 * i + 1] = kFar;
    }
  }
  out.values = make_op<T>("project_points", {n, 2}, std::move(uv), {points},
                          [n, r, fx, fy, cam_points = std::move(cam_points)](Node<T>& self) {
                            Vec<T>& g = self.inputs[0]->ensure_grad();
                            for (int i = 0; i < n; ++i) {
                              const auto& pc = cam_points[i];
                              if (!(pc.z() > kMinDepth)) continue;
                              const T gu = self.grad[2 * i], gv = self.grad[2 * i + 1];
                              const T iz = T(1) / pc.z();
                              const Eigen::Matrix<T, 3, 1> gc(gu * fx * iz, gv * fy * iz,
                                                              -(gu * fx * pc.x() + gv * fy * pc.y()) * iz * iz);
                              g.template segment<3>(3 * i) += r.transpose() * gc;
                            }
                          });
  return out;
}

// ---- Detector -------------------------------------------------------------------

template <typename T>
Tensor<T> Detector<T>::add_param(const std::string& name, Shape shape, Vec<T> values) {
  auto t = Tensor<T>::parameter(std::move(shape), std::move(values));
  params_.emplace_back(name, t);
  return t;
}

template <typename T>
Linear<T> Detector<T>::make_linear(const std::string& name, int in, int out, double bias_init) {
  const double limit = std::sqrt(6.0 / (in + out));
  std::uniform_real_distribution<double> dist(-limit, limit);
  Vec<T> w(static_cast<Eigen::Index>(in) * out);
  for (Eigen::Index i = 0; i < w.size(); ++i) w[i] = static_cast<T>(dist(rng_));
  Linear<T> l;
  l.weight = add_param(name + ".weight", {in, out}, std::move(w));
  l.bias = add_param(name + ".bias", {out}, Vec<T>::Constant(out, static_cast<T>(bias_init)));
  return l;
}

template <typename T>
Mlp2<T> Detector<T>::make_mlp(const std::string& name, int in, int hidden, int out) {
  Mlp2<T> m;
  m.first = make_linear(name + ".0", in, hidden);
  m.second = make_linear(name + ".1", hidden, out);
  return m;
}

template <typename T>
LayerNormAffine<T> Detector<T>::make_norm(const std::string& name, int d) {
  LayerNormAffine<T> n;
  n.gain = add_param(name + ".gain", {d}, Vec<T>::Ones(d));
  n.shift = add_param(name + ".shift", {d}, Vec<T>::Zero(d));
  return n;
}

namespace {

template <typename T>
Linear<T> conv_layer(std::mt19937_64& rng, NamedParameters<T>& params, const std::string& name,
                     int kernel, int in, int out) {
  const int fan_in = kernel * kernel * in;
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
  Vec<T> w(static_cast<Eigen::Index>(fan_in) * out);
  for (Eigen::Index i = 0; i < w.size(); ++i) w[i] = static_cast<T>(dist(rng));
  Linear<T> l;
  l.weight = Tensor<T>::parameter({fan_in, out}, std::move(w));
  l.bias = Tensor<T>::parameter({out}, Vec<T>::Zero(out));
  params.emplace_back(name + ".weight", l.weight);
  params.emplace_back(name + ".bias", l.bias);
  return l;
}

constexpr int kPriorChannels = kNumSemanticChannels + 1;
constexpr double kClassPrior = 0.01;

}  // namespace

template <typename T>
Detector<T>::Detector(const DetectorConfig& config, std::uint64_t seed)
    : config_(config), rng_(mix_seed(seed, 0x6465746563746f72ull)) {
  config_.validate();
  const int d = config_.d, f = config_.feature_channels, s = config_.stem_channels;
  const int extra = config_.priors.feat ? kPriorChannels : 0;

  stem_ = conv_layer<T>(rng_, params_, "backbone.stem", 3, 3, s);
  conv2_ = conv_layer<T>(rng_, params_, "backbone.conv2", 3, s, f);
  conv3_ = conv_layer<T>(rng_, params_, "backbone.conv3", 3, f, f);
  proj0_ = conv_layer<T>(rng_, params_, "backbone.proj0", 1, f + extra, f);
  proj1_ = conv_layer<T>(rng_, params_, "backbone.proj1", 1, f + extra, f);

  std::normal_distribution<double> embed(0.0, 1.0 / std::sqrt(static_cast<double>(d)));
  Vec<T> pos(static_cast<Eigen::Index>(config_.num_vanilla) * d), feat(pos.size());
  for (Eigen::Index i = 0; i < pos.size(); ++i) pos[i] = static_cast<T>(embed(rng_));
  for (Eigen::Index i = 0; i < feat.size(); ++i) feat[i] = static_cast<T>(embed(rng_));
  vanilla_pos_ = add_param("queries.pos", {config_.num_vanilla, d}, std::move(pos));
  vanilla_feat_ = add_param("queries.feat", {config_.num_vanilla, d}, std::move(feat));
  ref_mlp_ = make_mlp("queries.ref_mlp", d, d, 3);

  const int enc = 3 * 2 * config_.pos_freqs;
  if (config_.priors.loc) pos_mlp_ = make_mlp("queries.pos_mlp", enc, d, d);
  if (config_.priors.query) prior_mlp_ = make_mlp("queries.prior_mlp", query_prior_vector_size(), d, d);
  cross_pos_mlp_ = make_mlp("decoder.cross_pos_mlp", enc, d, d);

  const int samples = config_.num_cameras * kNumLevels;
  for (int b = 0; b < config_.blocks; ++b) {
    const std::string p = "decoder.block" + std::to_string(b);
    Block blk;
    blk.q = make_linear(p + ".attn.q", d, d);
    blk.k = make_linear(p + ".attn.k", d, d);
    blk.v = make_linear(p + ".attn.v", d, d);
    blk.o = make_linear(p + ".attn.o", d, d);
    blk.norm1 = make_norm(p + ".norm1", d);
    blk.sample_weights = make_linear(p + ".cross.weights", d, samples);
    blk.cross_out = make_linear(p + ".cross.out", f, d);
    blk.norm2 = make_norm(p + ".norm2", d);
    blk.ffn1 = make_linear(p + ".ffn.0", d, config_.ffn_dim);
    blk.ffn2 = make_linear(p + ".ffn.1", config_.ffn_dim, d);
    blk.norm3 = make_norm(p + ".norm3", d);
    blocks_.push_back(std::move(blk));
  }

  cls_head_ = make_mlp("head.cls", d, d, kNumClasses);
  cls_head_.second.bias.mutable_value().setConstant(static_cast<T>(-std::log((1 - kClassPrior) / kClassPrior)));
  reg_head_ = make_mlp("head.reg", d, d, 8);
  // softplus(0.5413) ~= 1 m starting extents.
  reg_head_.second.bias.mutable_value().segment(3, 3).setConstant(T(0.5413));
}

template <typename T>
std::vector<Tensor<T>> Detector<T>::parameter_list() const {
  std::vector<Tensor<T>> out;
  out.reserve(params_.size());
  for (const auto& [name, t] : params_) out.push_back(t);
  return out;
}

template <typename T>
std::size_t Detector<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : params_) n += static_cast<std::size_t>(t.size());
  return n;
}

template <typename T>
BackboneFeatures<T> Detector<T>::backbone_forward(const std::vector<RenderedView>& views) const {
  if (static_cast<int>(views.size()) != config_.num_cameras) {
    throw std::invalid_argument("backbone: expected " + std::to_string(config_.num_cameras) + " views, got " +
                                std::to_string(views.size()));
  }
  BackboneFeatures<T> out;
  out.image_width = views.front().width;
  out.image_height = views.front().height;
  const int w = out.image_width, h = out.image_height;
  if (w % kLevelStride[kNumLevels - 1] != 0 || h % kLevelStride[kNumLevels - 1] != 0) {
    throw std::invalid_argument("backbone: image size must be divisible by " +
                                std::to_string(kLevelStride[kNumLevels - 1]));
  }
  for (const auto& view : views) {
    if (view.width != w || view.height != h) throw std::invalid_argument("backbone: image resolution mismatch");
    const std::size_t pixels = static_cast<std::size_t>(w) * h;
    if (view.image.size() != pixels * 3) throw std::invalid_argument("backbone: malformed image buffer");

    Vec<T> img(static_cast<Eigen::Index>(pixels) * 3);
    for (std::size_t i = 0; i < view.image.size(); ++i) img[static_cast<Eigen::Index>(i)] = view.image[i];
    const auto x = Tensor<T>::constant({h, w, 3}, std::move(img));

    const auto c2 = relu(conv2d(x, stem_.weight, stem_.bias, 3, 2, 1));
    const auto c4 = relu(conv2d(c2, conv2_.weight, conv2_.bias, 3, 2, 1));
    const auto c8 = relu(conv2d(c4, conv3_.weight, conv3_.bias, 3, 2, 1));

    std::vector<Tensor<T>> priors;
    if (config_.priors.feat) {
      if (view.semantic.size() != pixels * kNumSemanticChannels || view.depth.size() != pixels) {
        throw std::invalid_argument("backbone: feat prior needs semantic and depth maps");
      }
      Vec<T> maps(static_cast<Eigen::Index>(pixels) * kPriorChannels);
      for (std::size_t p = 0; p < pixels; ++p) {
        for (int c = 0; c < kNumSemanticChannels; ++c) {
          maps[static_cast<Eigen::Index>(p * kPriorChannels + c)] = view.semantic[p * kNumSemanticChannels + c];
        }
        maps[static_cast<Eigen::Index>(p * kPriorChannels + kNumSemanticChannels)] = view.depth[p];
      }
      const auto full = Tensor<T>::constant({h, w, kPriorChannels}, std::move(maps));
      for (int l = 0; l < kNumLevels; ++l) priors.push_back(avg_pool2d(full, kLevelStride[l]));
    }
    auto level = [&](const Tensor<T>& base, const Linear<T>& proj, int l) {
      const auto in = config_.priors.feat ? concat<T>({base, priors[l]}, 2) : base;
      return conv2d(in, proj.weight, proj.bias, 1, 1, 0);
    };
    out.levels.push_back({level(c4, proj0_, 0), level(c8, proj1_, 1)});
    out.prior_maps.push_back(std::move(priors));
  }
  return out;
}

template <typename T>
Tensor<T> Detector<T>::encode_position(const Tensor<T>& points) const {
  return sinusoidal_encode(points, config_.pos_freqs, static_cast<T>(std::numbers::pi / kSceneXYExtent));
}

template <typename T>
QuerySet<T> Detector<T>::vanilla_queries() const {
  const int n = config_.num_vanilla;
  QuerySet<T> q;
  q.q_pos = vanilla_pos_;
  q.q_feat = vanilla_feat_;
  // Unit-variance input keeps the initial reference points spread out.
  const auto raw = ref_mlp_(scale(vanilla_pos_, static_cast<T>(std::sqrt(static_cast<double>(config_.d)))));
  Vec<T> gain(3), offset(3);
  gain << T(2 * kSceneXYExtent), T(2 * kSceneXYExtent), T(kSceneZMax - kSceneZMin);
  offset << T(-kSceneXYExtent), T(-kSceneXYExtent), T(kSceneZMin);
  q.reference = add_bias(mul_bias(sigmoid(raw), Tensor<T>::constant({3}, gain)), Tensor<T>::constant({3}, offset));
  q.sources.assign(n, QuerySource{});
  return q;
}

namespace {

struct PixelRange {
  int x0 = 0, x1 = 1, y0 = 0, y1 = 1;  // half-open
};

// Pixels whose centers fall inside the box, or the single nearest pixel.
PixelRange box_pixels(const Box2D& box, int width, int height) {
  PixelRange r;
  r.x0 = std::max(0, static_cast<int>(std::ceil(box.u - box.width / 2 - 0.5)));
  r.x1 = std::min(width, static_cast<int>(std::floor(box.u + box.width / 2 - 0.5)) + 1);
  r.y0 = std::max(0, static_cast<int>(std::ceil(box.v - box.height / 2 - 0.5)));
  r.y1 = std::min(height, static_cast<int>(std::floor(box.v + box.height / 2 - 0.5)) + 1);
  if (r.x1 <= r.x0 || r.y1 <= r.y0) {
    r.x0 = std::clamp(static_cast<int>(std::floor(box.u)), 0, width - 1);
    r.y0 = std::clamp(static_cast<int>(std::floor(box.v)), 0, height - 1);
    r.x1 = r.x0 + 1;
    r.y1 = r.y0 + 1;
  }
  return r;
}

PixelRange level_pixels(const PixelRange& r, int stride, int width, int height) {
  PixelRange l;
  l.x0 = std::min(r.x0 / stride, width - 1);
  l.y0 = std::min(r.y0 / stride, height - 1);
  l.x1 = std::clamp((r.x1 + stride - 1) / stride, l.x0 + 1, width);
  l.y1 = std::clamp((r.y1 + stride - 1) / stride, l.y0 + 1, height);
  return l;
}

}  // namespace

template <typename T>
int Detector<T>::query_prior_vector_size() const {
  return 1 + kNumLevels * config_.feature_channels + kNumClasses + 1 + 4;
}

template <typename T>
Tensor<T> Detector<T>::query_prior_vector(const Box2D& box, const RenderedView& view,
                                          const BackboneFeatures<T>& features, int camera) const {
  const int w = view.width, h = view.height;
  const int cls = static_cast<int>(box.label);
  const PixelRange r = box_pixels(box, w, h);

  // Depth crop weighted by the class channel, averaged over the crop.
  double depth = 0;
  for (int y = r.y0; y < r.y1; ++y) {
    for (int x = r.x0; x < r.x1; ++x) depth += view.semantic_at(y, x, cls) * view.depth_at(y, x);
  }
  depth /= static_cast<double>((r.x1 - r.x0) * (r.y1 - r.y0));

  std::vector<Tensor<T>> parts;
  parts.push_back(Tensor<T>::constant({1}, Vec<T>::Constant(1, static_cast<T>(depth))));
  for (int l = 0; l < kNumLevels; ++l) {
    const Tensor<T>& fmap = features.levels.at(camera).at(l);
    const int s = kLevelStride[l], lh = fmap.dim(0), lw = fmap.dim(1);
    const PixelRange lr = level_pixels(r, s, lw, lh);
    // Class channel averaged over each level cell (restricted to the crop).
    Vec<T> weight(static_cast<Eigen::Index>(lr.y1 - lr.y0) * (lr.x1 - lr.x0));
    for (int ly = lr.y0; ly < lr.y1; ++ly) {
      for (int lx = lr.x0; lx < lr.x1; ++lx) {
        double acc = 0;
        int count = 0;
        for (int y = std::max(ly * s, r.y0); y < std::min((ly + 1) * s, r.y1); ++y) {
          for (int x = std::max(lx * s, r.x0); x < std::min((lx + 1) * s, r.x1); ++x) {
            acc += view.semantic_at(y, x, cls);
            ++count;
          }
        }
        if (count == 0) {
          // Nearest image pixel of a cell the crop only grazes.
          const int y = std::clamp(ly * s + s / 2, r.y0, r.y1 - 1), x = std::clamp(lx * s + s / 2, r.x0, r.x1 - 1);
          acc = view.semantic_at(y, x, cls);
          count = 1;
        }
        weight[static_cast<Eigen::Index>(ly - lr.y0) * (lr.x1 - lr.x0) + (lx - lr.x0)] = static_cast<T>(acc / count);
      }
    }
    const auto crop = slice(slice(fmap, 0, lr.y0, lr.y1 - lr.y0), 1, lr.x0, lr.x1 - lr.x0);
    const auto wt = Tensor<T>::constant({lr.y1 - lr.y0, lr.x1 - lr.x0}, std::move(weight));
    parts.push_back(global_avg_pool(mul_pixels(crop, wt)));
  }
  Vec<T> tail = Vec<T>::Zero(kNumClasses + 1 + 4);
  tail[cls] = 1;
  tail[kNumClasses] = static_cast<T>(box.score);
  tail[kNumClasses + 1] = static_cast<T>(box.u / w);
  tail[kNumClasses + 2] = static_cast<T>(box.v / h);
  tail[kNumClasses + 3] = static_cast<T>(box.width / w);
  tail[kNumClasses + 4] = static_cast<T>(box.height / h);
  const int tail_size = static_cast<int>(tail.size());
  parts.push_back(Tensor<T>::constant({tail_size}, std::move(tail)));
  return concat(parts, 0);
}

template <typename T>
Tensor<T> Detector<T>::query_prior_features(const Box2D& box, const RenderedView& view,
                                            const BackboneFeatures<T>& features, int camera) const {
  if (!config_.priors.query) throw std::logic_error("query_prior_features: query priors are disabled");
  const auto v = reshape(query_prior_vector(box, view, features, camera), {1, query_prior_vector_size()});
  return reshape(prior_mlp_(v), {config_.d});
}

template <typename T>
QuerySet<T> Detector<T>::ray_queries(const std::vector<RenderedView>& views, const std::vector<Camera>& cameras,
                                     const BackboneFeatures<T>& features) const {
  if (!config_.priors.loc) throw std::logic_error("ray_queries: loc priors are disabled");
  if (views.size() != cameras.size()) throw std::invalid_argument("ray_queries: views/cameras size mismatch");
  struct Candidate {
    int camera, box;
    double score;
    std::vector<Eigen::Vector3d> points;
  };
  std::vector<Candidate> candidates;
  for (std::size_t c = 0; c < views.size(); ++c) {
    for (std::size_t b = 0; b < views[c].boxes.size(); ++b) {
      const Box2D& box = views[c].boxes[b];
      if (box.score < config_.box_score_threshold) continue;
      const Ray ray = unproject_pixel(cameras[c], box.u, box.v);
      auto pts = sample_ray(cameras[c], ray, config_.ray_interval, config_.max_range, config_.ray_depth);
      if (pts.empty()) continue;
      candidates.push_back({static_cast<int>(c), static_cast<int>(b), box.score, std::move(pts)});
    }
  }
  std::stable_sort(candidates.begin(), candidates.end(),
                   [](const Candidate& a, const Candidate& b) { return a.score > b.score; });
  int total = 0;
  std::size_t kept = 0;
  while (kept < candidates.size() && total + static_cast<int>(candidates[kept].points.size()) <= config_.query_budget) {
    total += static_cast<int>(candidates[kept].points.size());
    ++kept;
  }
  candidates.resize(kept);
  std::sort(candidates.begin(), candidates.end(),
            [](const Candidate& a, const Candidate& b) { return std::tie(a.camera, a.box) < std::tie(b.camera, b.box); });

  QuerySet<T> q;
  if (total == 0) return q;
  Vec<T> ref(3 * static_cast<Eigen::Index>(total));
  std::vector<int> owner;
  owner.reserve(total);
  for (std::size_t k = 0; k < candidates.size(); ++k) {
    const auto& cand = candidates[k];
    for (std::size_t i = 0; i < cand.points.size(); ++i) {
      const Eigen::Index row = static_cast<Eigen::Index>(q.sources.size());
      ref.template segment<3>(3 * row) = cand.points[i].template cast<T>();
      q.sources.push_back({QueryKind::kRay, cand.camera, cand.box, static_cast<int>(i), -1});
      owner.push_back(static_cast<int>(k));
    }
  }
  q.reference = Tensor<T>::constant({total, 3}, std::move(ref));
  q.q_pos = pos_mlp_(encode_position(q.reference));
  if (config_.priors.query) {
    std::vector<Tensor<T>> rows;
    for (const auto& cand : candidates) {
      const Box2D& box = views[cand.camera].boxes[cand.box];
      rows.push_back(reshape(query_prior_vector(box, views[cand.camera], features, cand.camera),
                             {1, query_prior_vector_size()}));
    }
    const auto per_box = prior_mlp_(concat(rows, 0));
    q.q_feat = gather_rows(per_box, std::span<const int>(owner));
  } else {
    q.q_feat = Tensor<T>::zeros({total, config_.d});
  }
  return q;
}

template <typename T>
QuerySet<T> Detector<T>::lidar_queries(const LidarScan& scan) const {
  if (!config_.priors.loc) throw std::logic_error("lidar_queries: loc priors are disabled");
  QuerySet<T> q;
  if (scan.size() == 0) return q;
  const auto count = static_cast<std::size_t>(std::min(config_.lidar_queries, config_.query_budget));
  const LidarScan sub = scan.size() > count ? subsample_lidar(scan, count) : scan;
  const int n = static_cast<int>(sub.size());
  Vec<T> ref(3 * static_cast<Eigen::Index>(n));
  for (int i = 0; i < n; ++i) {
    ref.template segment<3>(3 * i) = sub.points[i].cast<T>();
    q.sources.push_back({QueryKind::kLidar, -1, -1, -1, i});
  }
  q.reference = Tensor<T>::constant({n, 3}, std::move(ref));
  q.q_pos = pos_mlp_(encode_position(q.reference));
  q.q_feat = Tensor<T>::zeros({n, config_.d});
  return q;
}

template <typename T>
QuerySet<T> Detector<T>::make_queries(const Frame& frame, const BackboneFeatures<T>& features) const {
  if (!config_.priors.loc) return vanilla_queries();
  QuerySet<T> q = config_.priors.loc_source == LocSource::kLidar
                      ? lidar_queries(frame.lidar)
                      : ray_queries(frame.views, frame.scene.cameras, features);
  if (q.size() > 0) return q;
  q = vanilla_queries();
  q.fell_back = true;
  return q;
}

template <typename T>
Tensor<T> Detector<T>::self_attention(const Block& b, const Tensor<T>& x, const Tensor<T>& pos) const {
  const auto qk_in = add(x, pos);
  const auto q = b.q(qk_in), k = b.k(qk_in), v = b.v(x);
  const int dh = config_.d / config_.heads;
  const T inv = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
  std::vector<Tensor<T>> heads;
  for (int hd = 0; hd < config_.heads; ++hd) {
    const auto qh = slice(q, 1, hd * dh, dh), kh = slice(k, 1, hd * dh, dh), vh = slice(v, 1, hd * dh, dh);
    const auto attn = softmax(scale(matmul(qh, transpose(kh)), inv), 1);
    heads.push_back(matmul(attn, vh));
  }
  return b.o(config_.heads == 1 ? heads.front() : concat(heads, 1));
}

template <typename T>
CrossAttentionResult<T> Detector<T>::local_cross_attention(int block, const Tensor<T>& x, const Tensor<T>& pos,
                                                           const Tensor<T>& reference,
                                                           const BackboneFeatures<T>& features,
                                                           const std::vector<Camera>& cameras) const {
  const Block& b = blocks_.at(block);
  const int n = x.dim(0), f = config_.feature_channels;
  const int cams = static_cast<int>(cameras.size());
  if (cams != config_.num_cameras || features.num_cameras() != cams) {
    throw std::invalid_argument("cross attention: camera count does not match the model");
  }
  const int s = cams * kNumLevels;
  std::vector<std::uint8_t> mask(static_cast<std::size_t>(n) * s, 0);
  std::vector<Tensor<T>> samples;
  samples.reserve(s);
  for (int c = 0; c < cams; ++c) {
    const auto proj = project_points(reference, cameras[c]);
    for (int l = 0; l < kNumLevels; ++l) {
      const auto uv = add_scalar(scale(proj.values, static_cast<T>(1.0 / kLevelStride[l])), T(-0.5));
      const auto sampled = bilinear_sample(features.levels[c][l], uv);
      for (int i = 0; i < n; ++i) {
        mask[static_cast<std::size_t>(i) * s + c * kNumLevels + l] = proj.valid[i] && sampled.valid[i];
      }
      samples.push_back(reshape(sampled.values, {n, 1, f}));
    }
  }
  CrossAttentionResult<T> out;
  out.visible.assign(n, 0);
  for (int i = 0; i < n; ++i) {
    for (int k = 0; k < s; ++k) out.visible[i] |= mask[static_cast<std::size_t>(i) * s + k];
    if (!out.visible[i]) ++out.invisible;
  }
  const auto stacked = s == 1 ? samples.front() : concat(samples, 1);
  const auto weights = masked_softmax(b.sample_weights(add(x, pos)), std::span<const std::uint8_t>(mask));
  out.aggregate = weighted_sum(weights, stacked);
  const auto update = add(b.cross_out(out.aggregate), cross_pos_mlp_(encode_position(reference)));
  out.update = select_rows(std::span<const std::uint8_t>(out.visible), update, Tensor<T>::zeros({n, config_.d}));
  return out;
}

template <typename T>
DetectionOutput<T> Detector<T>::head(const Tensor<T>& x, const Tensor<T>& reference) const {
  DetectionOutput<T> out;
  out.logits = cls_head_(x);
  const auto reg = reg_head_(x);
  out.offsets = slice(reg, 1, 0, 3);
  out.extents = softplus(slice(reg, 1, 3, 3));
  out.yaw = slice(reg, 1, 6, 2);
  out.reference = reference;
  out.centers = add(reference, out.offsets);
  return out;
}

template <typename T>
ForwardResult<T> Detector<T>::decoder_forward(const QuerySet<T>& queries, const BackboneFeatures<T>& features,
                                              const std::vector<Camera>& cameras) const {
  if (queries.size() == 0) throw std::invalid_argument("decoder: empty query set");
  ForwardResult<T> result;
  result.queries = queries;
  auto x = add(queries.q_feat, queries.q_pos);
  const auto& pos = queries.q_pos;
  auto reference = queries.reference;
  for (int bi = 0; bi < config_.blocks; ++bi) {
    const Block& b = blocks_[bi];
    x = b.norm1(add(x, self_attention(b, x, pos)));
    const auto cross = local_cross_attention(bi, x, pos, reference, features, cameras);
    x = select_rows(std::span<const std::uint8_t>(cross.visible), b.norm2(add(x, cross.update)), x);
    x = b.norm3(add(x, b.ffn2(relu(b.ffn1(x)))));
    result.blocks.push_back(head(x, reference));
    result.invisible_queries = cross.invisible;
    if (config_.refine) reference = result.blocks.back().centers.detach();
  }
  return result;
}

template <typename T>
ForwardResult<T> Detector<T>::forward(const Frame& frame) const {
  const auto features = backbone_forward(frame.views);
  return decoder_forward(make_queries(frame, features), features, frame.scene.cameras);
}

template <typename T>
void Detector<T>::save(const std::filesystem::path& dir, const nlohmann::json& meta) const {
  nlohmann::json m = meta;
  m["detector"] = to_json(config_);
  save_checkpoint(dir, params_, m);
}

template <typename T>
void Detector<T>::load(const std::filesystem::path& dir) {
  const auto meta = read_checkpoint_meta(dir);
  if (!meta.contains("detector")) throw FormatError("checkpoint in " + dir.string() + " has no model config");
  if (meta.at("detector") != to_json(config_)) {
    throw FormatError("checkpoint model config does not match: checkpoint " + meta.at("detector").dump() +
                      ", model " + to_json(config_).dump());
  }
  load_checkpoint(dir, params_);
}

template class Detector<float>;
template class Detector<double>;
template std::vector<Detection> decode_detections<float>(const DetectionOutput<float>&);
template std::vector<Detection> decode_detections<double>(const DetectionOutput<double>&);
template Sampled<float> project_points<float>(const Tensor<float>&, const Camera&);
template Sampled<double> project_points<double>(const Tensor<double>&, const Camera&);

}  // namespace prior3d
