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

#include "prior3d/scene.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <optional>
#include <random>
#include <stdexcept>

#include "prior3d/checkpoint.hpp"
#include "prior3d/random.hpp"

namespace prior3d {

namespace fs = std::filesystem;

std::vector<ClassSpec> SceneConfig::default_classes() {
  return {
      ClassSpec{ObjectClass::kVehicle, 4, 10, {3.5, 5.5}, {1.6, 2.2}, {1.4, 2.0}},
      ClassSpec{ObjectClass::kHuman, 2, 6, {0.4, 0.8}, {0.4, 0.8}, {1.5, 1.9}},
  };
}

void SceneConfig::validate() const {
  auto bad = [](const std::string& what) { throw std::invalid_argument("scene config: " + what); };
  for (const auto& c : classes) {
    if (c.min_count < 0 || c.max_count < c.min_count) bad("invalid object count range");
    for (const SizeRange* r : {&c.length, &c.width, &c.height}) {
      if (!(r->min > 0) || r->max < r->min) bad("size ranges must be positive and ordered");
    }
  }
  if (!(min_radius >= 0) || !(max_radius > min_radius)) bad("placement radii must satisfy 0 <= min < max");
  if (max_radius > kMaxRange) bad("placement radius exceeds the 50 m range");
  if (min_separation < 0) bad("min_separation must be non-negative");
  if (max_retries <= 0) bad("max_retries must be positive");
  if (rig.num_cameras <= 0 || rig.width <= 0 || rig.height <= 0) bad("invalid camera rig");
  if (!(rig.hfov_deg > 0 && rig.hfov_deg < 180)) bad("hfov must be in (0, 180) degrees");
}

std::vector<Camera> make_rig(const RigConfig& rig) {
  std::vector<Camera> cams;
  cams.reserve(rig.num_cameras);
  const double hfov = rig.hfov_deg * std::numbers::pi / 180.0;
  for (int i = 0; i < rig.num_cameras; ++i) {
    const double yaw = 2.0 * std::numbers::pi * i / rig.num_cameras;
    const Eigen::Vector3d pos(rig.mount_radius * std::cos(yaw), rig.mount_radius * std::sin(yaw), rig.mount_height);
    cams.push_back(Camera::horizontal(pos, yaw, hfov, rig.width, rig.height));
  }
  return cams;
}

Scene generate_scene(const SceneConfig& config, std::uint64_t seed) {
  config.validate();
  Scene scene;
  scene.seed = seed;
  scene.cameras = make_rig(config.rig);
  std::mt19937_64 rng(mix_seed(seed, 0x5ce9e));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };

  for (const auto& spec : config.classes) {
    const int count = spec.min_count + static_cast<int>(rng() % static_cast<std::uint64_t>(spec.max_count - spec.min_count + 1));
    for (int k = 0; k < count; ++k) {
      bool placed = false;
      for (int attempt = 0; attempt < config.max_retries && !placed; ++attempt) {
        Cuboid c;
        c.label = spec.label;
        c.extents = {uniform(spec.length.min, spec.length.max), uniform(spec.width.min, spec.width.max),
                     uniform(spec.height.min, spec.height.max)};
        // Area-uniform placement in the annulus, keeping the footprint inside max_radius.
        const double reach = 0.5 * std::hypot(c.extents.x(), c.extents.y());
        const double r_max = config.max_radius - reach;
        if (r_max <= config.min_radius) break;
        const double r = std::sqrt(uniform(config.min_radius * config.min_radius, r_max * r_max));
        const double theta = uniform(-std::numbers::pi, std::numbers::pi);
        c.center = {r * std::cos(theta), r * std::sin(theta), 0.5 * c.extents.z()};
        c.yaw = normalize_yaw(uniform(-std::numbers::pi, std::numbers::pi));
        placed = std::all_of(scene.cuboids.begin(), scene.cuboids.end(), [&](const Cuboid& o) {
          return centroid_distance_bev(o, c) >= config.min_separation && bev_iou(o, c) == 0.0;
        });
        if (placed) {
          scene.cuboids.push_back(c);
          std::array<float, 3> col;
          if (spec.label == ObjectClass::kVehicle) {
            col = {static_cast<float>(uniform(0.2, 0.95)), static_cast<float>(uniform(0.1, 0.5)),
                   static_cast<float>(uniform(0.1, 0.5))};
          } else {
            col = {static_cast<float>(uniform(0.1, 0.4)), static_cast<float>(uniform(0.5, 0.95)),
                   static_cast<float>(uniform(0.3, 0.9))};
          }
          scene.albedo.push_back(col);
        }
      }
      if (!placed) scene.partial = true;
    }
  }
  return scene;
}

// ---- ray casting --------------------------------------------------------------

namespace {

struct LocalBox {
  Eigen::Vector3d center;
  Eigen::Vector3d half;
  double c = 1, s = 0;  // cos / sin of yaw
};

LocalBox to_local(const Cuboid& cub) {
  return {cub.center, 0.5 * cub.extents, std::cos(cub.yaw), std::sin(cub.yaw)};
}

struct Hit {
  double t = std::numeric_limits<double>::infinity();
  int object = -1;
  Eigen::Vector3d normal = Eigen::Vector3d::UnitZ();
};

// Slab test in the box frame. Returns the entry distance (> 0) and outward normal.
bool intersect(const LocalBox& b, const Eigen::Vector3d& origin, const Eigen::Vector3d& dir, double& t_hit,
               Eigen::Vector3d& normal) {
  const Eigen::Vector3d o = origin - b.center;
  const Eigen::Vector3d lo(b.c * o.x() + b.s * o.y(), -b.s * o.x() + b.c * o.y(), o.z());
  const Eigen::Vector3d ld(b.c * dir.x() + b.s * dir.y(), -b.s * dir.x() + b.c * dir.y(), dir.z());
  double t0 = -std::numeric_limits<double>::infinity(), t1 = std::numeric_limits<double>::infinity();
  int axis = -1;
  double sign = 1;
  for (int a = 0; a < 3; ++a) {
    if (std::abs(ld[a]) < 1e-15) {
      if (std::abs(lo[a]) > b.half[a]) return false;
      continue;
    }
    double ta = (-b.half[a] - lo[a]) / ld[a], tb = (b.half[a] - lo[a]) / ld[a];
    double s = -1;
    if (ta > tb) {
      std::swap(ta, tb);
      s = 1;
    }
    if (ta > t0) {
      t0 = ta;
      axis = a;
      sign = s;
    }
    t1 = std::min(t1, tb);
    if (t0 > t1) return false;
  }
  if (axis < 0 || !(t0 > 1e-9)) return false;
  t_hit = t0;
  Eigen::Vector3d ln = Eigen::Vector3d::Zero();
  ln[axis] = sign;
  normal = Eigen::Vector3d(b.c * ln.x() - b.s * ln.y(), b.s * ln.x() + b.c * ln.y(), ln.z());
  return true;
}

Hit cast(const std::vector<LocalBox>& boxes, const Eigen::Vector3d& origin, const Eigen::Vector3d& dir) {
  Hit best;
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    double t;
    Eigen::Vector3d n;
    if (intersect(boxes[i], origin, dir, t, n) && t < best.t) {
      best.t = t;
      best.object = static_cast<int>(i);
      best.normal = n;
    }
  }
  return best;
}

}  // namespace

RenderedView render_view(const Scene& scene, const Camera& camera) {
  RenderedView view;
  view.width = camera.width;
  view.height = camera.height;
  const std::size_t pixels = static_cast<std::size_t>(camera.width) * camera.height;
  view.image.assign(pixels * 3, 0.0f);
  view.semantic.assign(pixels * kNumSemanticChannels, 0.0f);
  view.depth.assign(pixels, 1.0f);

  std::vector<LocalBox> boxes;
  boxes.reserve(scene.cuboids.size());
  for (const auto& c : scene.cuboids) boxes.push_back(to_local(c));
  std::vector<int> visible(scene.cuboids.size(), 0);

  const Eigen::Vector3d origin = camera.center();
  const Eigen::Vector3d forward = camera.forward();
  const Eigen::Vector3d light = Eigen::Vector3d(0.3, 0.5, 0.8).normalized();
  const Eigen::Matrix3d cam_to_world = camera.rotation.transpose();

  for (int y = 0; y < camera.height; ++y) {
    for (int x = 0; x < camera.width; ++x) {
      const std::size_t p = static_cast<std::size_t>(y) * camera.width + x;
      const Eigen::Vector3d dir =
          (cam_to_world * Eigen::Vector3d((x + 0.5 - camera.cx) / camera.fx, (y + 0.5 - camera.cy) / camera.fy, 1.0))
              .normalized();
      const Hit hit = cast(boxes, origin, dir);
      float* rgb = &view.image[p * 3];
      if (hit.object >= 0) {
        ++visible[hit.object];
        const double z = hit.t * dir.dot(forward);
        view.depth[p] = static_cast<float>(std::clamp(z / kDepthMax, 0.0, 1.0));
        const int cls = static_cast<int>(scene.cuboids[hit.object].label);
        view.semantic[p * kNumSemanticChannels + cls] = 1.0f;
        const double shade = 0.35 + 0.65 * std::max(0.0, hit.normal.dot(light));
        const auto& alb = scene.albedo[hit.object];
        for (int k = 0; k < 3; ++k) rgb[k] = static_cast<float>(std::clamp(alb[k] * shade, 0.0, 1.0));
        continue;
      }
      view.semantic[p * kNumSemanticChannels + kBackgroundChannel] = 1.0f;
      if (dir.z() < -1e-9) {
        const Eigen::Vector3d g = origin + (-origin.z() / dir.z()) * dir;
        const int checker = (static_cast<int>(std::floor(g.x() / 5.0)) + static_cast<int>(std::floor(g.y() / 5.0))) & 1;
        const float base = checker ? 0.32f : 0.27f;
        rgb[0] = rgb[1] = rgb[2] = base;
      } else {
        const float t = static_cast<float>(y) / static_cast<float>(camera.height);
        rgb[0] = 0.55f + 0.2f * t;
        rgb[1] = 0.65f + 0.15f * t;
        rgb[2] = 0.85f;
      }
    }
  }

  for (std::size_t i = 0; i < scene.cuboids.size(); ++i) {
    if (!visible[i]) continue;
    if (auto box = project_cuboid_to_box2d(camera, scene.cuboids[i])) {
      box->source = static_cast<int>(i);
      view.boxes.push_back(*box);
    }
  }
  return view;
}

// ---- prior corruption -------------------------------------------------------------

PriorNoiseConfig PriorNoiseConfig::realistic() {
  PriorNoiseConfig n;
  n.center_sigma_px = 1.0;
  n.size_sigma_rel = 0.08;
  n.score_min = 0.5;
  n.score_max = 1.0;
  n.false_negative_prob = 0.05;
  n.false_positive_rate = 0.3;
  n.semantic_blur = 1;
  n.semantic_noise = 0.05;
  n.depth_blur = 1;
  n.depth_noise = 0.02;
  return n;
}

bool PriorNoiseConfig::is_zero() const {
  return center_sigma_px == 0 && size_sigma_rel == 0 && score_min == 1 && score_max == 1 &&
         false_negative_prob == 0 && false_positive_rate == 0 && semantic_blur == 0 && semantic_noise == 0 &&
         depth_blur == 0 && depth_noise == 0;
}

void PriorNoiseConfig::validate() const {
  auto prob = [](double p) { return p >= 0 && p <= 1; };
  if (!(center_sigma_px >= 0) || !(size_sigma_rel >= 0) || !(semantic_noise >= 0) || !(depth_noise >= 0) ||
      !(false_positive_rate >= 0) || semantic_blur < 0 || depth_blur < 0) {
    throw std::invalid_argument("prior noise: sigmas and rates must be non-negative");
  }
  if (!prob(score_min) || !prob(score_max) || score_min > score_max || !prob(fp_score_min) || !prob(fp_score_max) ||
      fp_score_min > fp_score_max || !prob(false_negative_prob)) {
    throw std::invalid_argument("prior noise: probabilities must lie in [0, 1]");
  }
}

namespace {

// Separable box filter of radius r over an H x W x C map.
void box_blur(std::vector<float>& map, int width, int height, int channels, int r) {
  if (r <= 0) return;
  std::vector<float> tmp(map.size());
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      for (int c = 0; c < channels; ++c) {
        float acc = 0;
        int n = 0;
        for (int dx = -r; dx <= r; ++dx) {
          const int xx = x + dx;
          if (xx < 0 || xx >= width) continue;
          acc += map[(static_cast<std::size_t>(y) * width + xx) * channels + c];
          ++n;
        }
        tmp[(static_cast<std::size_t>(y) * width + x) * channels + c] = acc / n;
      }
    }
  }
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      for (int c = 0; c < channels; ++c) {
        float acc = 0;
        int n = 0;
        for (int dy = -r; dy <= r; ++dy) {
          const int yy = y + dy;
          if (yy < 0 || yy >= height) continue;
          acc += tmp[(static_cast<std::size_t>(yy) * width + x) * channels + c];
          ++n;
        }
        map[(static_cast<std::size_t>(y) * width + x) * channels + c] = acc / n;
      }
    }
  }
}

void add_noise(std::vector<float>& map, double sigma, std::mt19937_64& rng) {
  if (sigma <= 0) return;
  std::normal_distribution<double> normal(0.0, sigma);
  for (float& v : map) v = static_cast<float>(std::clamp(v + normal(rng), 0.0, 1.0));
}

}  // namespace

RenderedView corrupt_priors(const RenderedView& view, const PriorNoiseConfig& noise, std::uint64_t seed) {
  noise.validate();
  if (noise.is_zero()) return view;
  RenderedView out = view;
  std::mt19937_64 rng(mix_seed(seed, 0xc0ffee));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);

  out.boxes.clear();
  for (const Box2D& b : view.boxes) {
    if (unit(rng) < noise.false_negative_prob) continue;
    Box2D nb = b;
    nb.u += noise.center_sigma_px * normal(rng);
    nb.v += noise.center_sigma_px * normal(rng);
    nb.width *= std::max(0.2, 1.0 + noise.size_sigma_rel * normal(rng));
    nb.height *= std::max(0.2, 1.0 + noise.size_sigma_rel * normal(rng));
    nb.score = noise.score_min + (noise.score_max - noise.score_min) * unit(rng);
    out.boxes.push_back(nb);
  }
  if (noise.false_positive_rate > 0) {
    std::poisson_distribution<int> count_dist(noise.false_positive_rate);
    const int count = count_dist(rng);
    for (int k = 0; k < count; ++k) {
      Box2D fp;
      fp.width = 4.0 + 24.0 * unit(rng);
      fp.height = 4.0 + 24.0 * unit(rng);
      fp.u = unit(rng) * view.width;
      fp.v = unit(rng) * view.height;
      fp.label = unit(rng) < 0.5 ? ObjectClass::kVehicle : ObjectClass::kHuman;
      fp.score = noise.fp_score_min + (noise.fp_score_max - noise.fp_score_min) * unit(rng);
      fp.source = -1;
      out.boxes.push_back(fp);
    }
  }
  box_blur(out.semantic, view.width, view.height, kNumSemanticChannels, noise.semantic_blur);
  add_noise(out.semantic, noise.semantic_noise, rng);
  box_blur(out.depth, view.width, view.height, 1, noise.depth_blur);
  add_noise(out.depth, noise.depth_noise, rng);
  return out;
}

// ---- lidar ------------------------------------------------------------------------

LidarScan subsample_lidar(const LidarScan& scan, std::size_t count) {
  const std::size_t n = scan.size();
  count = std::min(count, n);
  LidarScan out;
  out.points.reserve(count);
  for (std::size_t k = 0; k < count; ++k) {
    const std::size_t i = k * n / count;
    out.points.push_back(scan.points[i]);
    out.source.push_back(scan.source[i]);
    out.object.push_back(scan.object[i]);
  }
  return out;
}

LidarScan simulate_lidar(const Scene& scene, const LidarConfig& config, double subsample_rate) {
  if (!(subsample_rate > 0) || config.num_beams <= 0 || config.num_azimuth <= 0) {
    throw std::invalid_argument("simulate_lidar: beam counts and subsample rate must be positive");
  }
  std::vector<LocalBox> boxes;
  for (const auto& c : scene.cuboids) boxes.push_back(to_local(c));
  const Eigen::Vector3d origin(0.0, 0.0, config.mount_height);
  LidarScan full;
  for (int b = 0; b < config.num_beams; ++b) {
    const double frac = config.num_beams == 1 ? 0.5 : static_cast<double>(b) / (config.num_beams - 1);
    const double elev =
        (config.min_elevation_deg + frac * (config.max_elevation_deg - config.min_elevation_deg)) * std::numbers::pi / 180.0;
    for (int a = 0; a < config.num_azimuth; ++a) {
      const double az = 2.0 * std::numbers::pi * a / config.num_azimuth;
      const Eigen::Vector3d dir(std::cos(elev) * std::cos(az), std::cos(elev) * std::sin(az), std::sin(elev));
      Hit hit = cast(boxes, origin, dir);
      LidarSource src = LidarSource::kObject;
      if (dir.z() < -1e-12) {
        const double tg = -origin.z() / dir.z();
        if (tg < hit.t) {
          hit.t = tg;
          hit.object = -1;
          src = LidarSource::kGround;
        }
      }
      if (!std::isfinite(hit.t) || hit.t > config.max_range) continue;
      Eigen::Vector3d p = origin + hit.t * dir;
      // Round through f32 so the dataset blob stores points exactly.
      for (int k = 0; k < 3; ++k) {
        // volatile: GCC 11 at -O3 drops the narrowing on the vectorized x/y lanes.
        volatile float narrowed = static_cast<float>(p[k]);
        p[k] = narrowed;
      }
      if (src == LidarSource::kGround) p.z() = 0.0;
      if ((p - origin).norm() > config.max_range) continue;
      full.points.push_back(p);
      full.source.push_back(src);
      full.object.push_back(hit.object);
    }
  }
  const auto keep = static_cast<std::size_t>(std::llround(static_cast<double>(full.size()) * std::min(subsample_rate, 1.0)));
  return subsample_lidar(full, keep);
}

// ---- frames -----------------------------------------------------------------------

std::vector<Box2D> centroid_boxes(const Scene& scene, const Camera& camera) {
  std::vector<Box2D> out;
  for (std::size_t i = 0; i < scene.cuboids.size(); ++i) {
    const auto& c = scene.cuboids[i];
    const Projection pr = project_point(camera, c.center);
    if (!pr.valid) continue;
    const auto hull = project_cuboid_to_box2d(camera, c);
    Box2D b;
    b.u = pr.u;
    b.v = pr.v;
    b.width = hull ? hull->width : 1.0;
    b.height = hull ? hull->height : 1.0;
    b.label = c.label;
    b.score = 1.0;
    b.source = static_cast<int>(i);
    out.push_back(b);
  }
  return out;
}

Frame make_frame(const SceneConfig& config, std::uint64_t seed, const FrameOptions& options, std::string id) {
  Frame f;
  f.id = id.empty() ? "scene_" + std::to_string(seed) : std::move(id);
  f.scene = generate_scene(config, seed);
  for (std::size_t c = 0; c < f.scene.cameras.size(); ++c) {
    RenderedView view = render_view(f.scene, f.scene.cameras[c]);
    f.clean_boxes.push_back(view.boxes);
    f.views.push_back(corrupt_priors(view, options.noise, mix_seed(seed, 1000 + c)));
  }
  f.lidar = simulate_lidar(f.scene, options.lidar, options.lidar_subsample);
  return f;
}

// ---- serialization ----------------------------------------------------------------

nlohmann::json to_json(const Camera& c) {
  Eigen::Matrix<double, 3, 3, Eigen::RowMajor> rm = c.rotation;
  std::vector<double> rows(rm.data(), rm.data() + 9);
  return {{"fx", c.fx},
          {"fy", c.fy},
          {"cx", c.cx},
          {"cy", c.cy},
          {"rotation", rows},
          {"translation", {c.translation.x(), c.translation.y(), c.translation.z()}},
          {"width", c.width},
          {"height", c.height}};
}

Camera camera_from_json(const nlohmann::json& j) {
  Camera c;
  c.fx = j.at("fx").get<double>();
  c.fy = j.at("fy").get<double>();
  c.cx = j.at("cx").get<double>();
  c.cy = j.at("cy").get<double>();
  const auto rows = j.at("rotation").get<std::vector<double>>();
  const auto t = j.at("translation").get<std::vector<double>>();
  if (rows.size() != 9 || t.size() != 3) throw FormatError("camera: malformed rotation/translation");
  c.rotation = Eigen::Map<const Eigen::Matrix<double, 3, 3, Eigen::RowMajor>>(rows.data());
  c.translation = {t[0], t[1], t[2]};
  c.width = j.at("width").get<int>();
  c.height = j.at("height").get<int>();
  c.validate();
  return c;
}

nlohmann::json to_json(const Cuboid& c) {
  return {{"center", {c.center.x(), c.center.y(), c.center.z()}},
          {"extents", {c.extents.x(), c.extents.y(), c.extents.z()}},
          {"yaw", c.yaw},
          {"class", std::string(class_name(c.label))}};
}

Cuboid cuboid_from_json(const nlohmann::json& j) {
  Cuboid c;
  const auto ctr = j.at("center").get<std::vector<double>>();
  const auto ext = j.at("extents").get<std::vector<double>>();
  if (ctr.size() != 3 || ext.size() != 3) throw FormatError("cuboid: malformed center/extents");
  c.center = {ctr[0], ctr[1], ctr[2]};
  c.extents = {ext[0], ext[1], ext[2]};
  c.yaw = j.at("yaw").get<double>();
  c.label = class_from_name(j.at("class").get<std::string>());
  return c;
}

nlohmann::json to_json(const Box2D& b) {
  return {{"u", b.u},         {"v", b.v},          {"width", b.width}, {"height", b.height},
          {"class", std::string(class_name(b.label))}, {"score", b.score}, {"source", b.source}};
}

Box2D box_from_json(const nlohmann::json& j) {
  Box2D b;
  b.u = j.at("u").get<double>();
  b.v = j.at("v").get<double>();
  b.width = j.at("width").get<double>();
  b.height = j.at("height").get<double>();
  b.label = class_from_name(j.at("class").get<std::string>());
  b.score = j.at("score").get<double>();
  b.source = j.value("source", -1);
  return b;
}

namespace {

nlohmann::json blob_entry(std::vector<char>& blob, const std::vector<float>& values, const Shape& shape) {
  nlohmann::json e = {{"offset", blob.size()}, {"shape", shape}};
  append_f32_le(blob, values);
  return e;
}

std::vector<float> blob_read(const std::vector<char>& blob, const nlohmann::json& e, const char* what) {
  const auto shape = e.at("shape").get<Shape>();
  std::int64_t n = 1;
  for (int d : shape) {
    if (d < 0) throw FormatError(std::string(what) + ": negative dimension");
    n *= d;
  }
  try {
    return read_f32_le(blob, e.at("offset").get<std::size_t>(), static_cast<std::size_t>(n));
  } catch (const FormatError& err) {
    throw FormatError(std::string(what) + ": " + err.what());
  }
}

}  // namespace

void write_frame(const Frame& frame, const fs::path& dir) {
  fs::create_directories(dir);
  std::vector<char> blob;
  nlohmann::json views = nlohmann::json::array();
  for (std::size_t c = 0; c < frame.views.size(); ++c) {
    const RenderedView& v = frame.views[c];
    nlohmann::json boxes = nlohmann::json::array(), clean = nlohmann::json::array();
    for (const auto& b : v.boxes) boxes.push_back(to_json(b));
    if (c < frame.clean_boxes.size()) {
      for (const auto& b : frame.clean_boxes[c]) clean.push_back(to_json(b));
    }
    nlohmann::json jv = {{"width", v.width}, {"height", v.height}, {"boxes", boxes}, {"clean_boxes", clean}};
    jv["image"] = blob_entry(blob, v.image, {v.height, v.width, 3});
    jv["semantic"] = blob_entry(blob, v.semantic, {v.height, v.width, kNumSemanticChannels});
    jv["depth"] = blob_entry(blob, v.depth, {v.height, v.width});
    views.push_back(std::move(jv));
  }
  std::vector<float> lidar_xyz;
  lidar_xyz.reserve(frame.lidar.size() * 3);
  for (const auto& p : frame.lidar.points) {
    for (int k = 0; k < 3; ++k) lidar_xyz.push_back(static_cast<float>(p[k]));
  }
  std::vector<int> src;
  for (auto s : frame.lidar.source) src.push_back(static_cast<int>(s));
  nlohmann::json lidar = {{"count", frame.lidar.size()}, {"source", src}, {"object", frame.lidar.object}};
  lidar["points"] = {{"offset", blob.size()}, {"shape", {static_cast<int>(frame.lidar.size()), 3}}};
  append_f32_le(blob, lidar_xyz);

  nlohmann::json cams = nlohmann::json::array(), cubs = nlohmann::json::array();
  for (const auto& c : frame.scene.cameras) cams.push_back(to_json(c));
  for (const auto& c : frame.scene.cuboids) cubs.push_back(to_json(c));
  nlohmann::json manifest = {{"format", "prior3d-scene-v1"},
                             {"id", frame.id},
                             {"seed", frame.scene.seed},
                             {"partial", frame.scene.partial},
                             {"semantic_channels", {"VEHICLE", "HUMAN", "background"}},
                             {"cameras", cams},
                             {"cuboids", cubs},
                             {"albedo", frame.scene.albedo},
                             {"views", views},
                             {"lidar", lidar},
                             {"blob", kSceneBlob},
                             {"blob_bytes", blob.size()}};
  write_file_bytes(dir / kSceneBlob, blob);
  write_json_file(dir / kSceneManifest, manifest);
}

Frame read_frame(const fs::path& dir) {
  const auto m = read_json_file(dir / kSceneManifest);
  const auto blob = read_file_bytes(dir / m.value("blob", std::string(kSceneBlob)));
  if (m.at("blob_bytes").get<std::size_t>() != blob.size()) {
    throw FormatError("scene blob " + (dir / kSceneBlob).string() + " has " + std::to_string(blob.size()) +
                      " bytes, manifest expects " + std::to_string(m.at("blob_bytes").get<std::size_t>()));
  }
  Frame f;
  try {
    f.id = m.at("id").get<std::string>();
    f.scene.seed = m.at("seed").get<std::uint64_t>();
    f.scene.partial = m.at("partial").get<bool>();
    if (m.at("semantic_channels").size() != kNumSemanticChannels) throw FormatError("unexpected semantic channel count");
    for (const auto& c : m.at("cameras")) f.scene.cameras.push_back(camera_from_json(c));
    for (const auto& c : m.at("cuboids")) f.scene.cuboids.push_back(cuboid_from_json(c));
    f.scene.albedo = m.at("albedo").get<std::vector<std::array<float, 3>>>();
    for (const auto& jv : m.at("views")) {
      RenderedView v;
      v.width = jv.at("width").get<int>();
      v.height = jv.at("height").get<int>();
      for (const auto& b : jv.at("boxes")) v.boxes.push_back(box_from_json(b));
      std::vector<Box2D> clean;
      for (const auto& b : jv.at("clean_boxes")) clean.push_back(box_from_json(b));
      v.image = blob_read(blob, jv.at("image"), "image");
      v.semantic = blob_read(blob, jv.at("semantic"), "semantic");
      v.depth = blob_read(blob, jv.at("depth"), "depth");
      const std::size_t px = static_cast<std::size_t>(v.width) * v.height;
      if (v.image.size() != px * 3 || v.semantic.size() != px * kNumSemanticChannels || v.depth.size() != px) {
        throw FormatError("view map shapes disagree with the view size");
      }
      f.views.push_back(std::move(v));
      f.clean_boxes.push_back(std::move(clean));
    }
    const auto& jl = m.at("lidar");
    const auto xyz = blob_read(blob, jl.at("points"), "lidar");
    const auto src = jl.at("source").get<std::vector<int>>();
    f.lidar.object = jl.at("object").get<std::vector<int>>();
    const std::size_t n = jl.at("count").get<std::size_t>();
    if (xyz.size() != n * 3 || src.size() != n || f.lidar.object.size() != n) throw FormatError("lidar arrays disagree");
    for (std::size_t i = 0; i < n; ++i) {
      f.lidar.points.emplace_back(xyz[3 * i], xyz[3 * i + 1], xyz[3 * i + 2]);
      f.lidar.source.push_back(static_cast<LidarSource>(src[i]));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("malformed scene manifest " + (dir / kSceneManifest).string() + ": " + e.what());
  }
  if (f.views.size() != f.scene.cameras.size()) throw FormatError("view count does not match camera count");
  return f;
}

const std::vector<std::string>& Splits::get(std::string_view name) const {
  if (name == "train") return train;
  if (name == "val") return val;
  if (name == "test") return test;
  throw std::invalid_argument("unknown split '" + std::string(name) + "'");
}

void write_dataset(const std::vector<Frame>& frames, const Splits& splits, const fs::path& root,
                   const nlohmann::json& config_echo) {
  fs::create_directories(root);
  for (const auto& f : frames) write_frame(f, root / f.id);
  write_splits(splits, root, frames.size(), config_echo);
}

void write_splits(const Splits& splits, const fs::path& root, std::size_t scene_count,
                  const nlohmann::json& config_echo) {
  nlohmann::json j = {{"train", splits.train}, {"val", splits.val}, {"test", splits.test},
                      {"scene_count", scene_count}, {"config", config_echo}};
  write_json_file(root / kSplitsFile, j);
}

Splits read_splits(const fs::path& root) {
  const auto j = read_json_file(root / kSplitsFile);
  Splits s;
  try {
    s.train = j.at("train").get<std::vector<std::string>>();
    s.val = j.at("val").get<std::vector<std::string>>();
    s.test = j.at("test").get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("malformed " + (root / kSplitsFile).string() + ": " + e.what());
  }
  return s;
}

std::vector<Frame> read_dataset(const fs::path& root, std::string_view split) {
  const Splits s = read_splits(root);
  std::vector<std::string> ids;
  if (split.empty()) {
    for (const auto* part : {&s.train, &s.val, &s.test}) ids.insert(ids.end(), part->begin(), part->end());
  } else {
    ids = s.get(split);
  }
  std::vector<Frame> frames;
  frames.reserve(ids.size());
  for (const auto& id : ids) {
    if (!fs::is_directory(root / id)) throw FormatError("dataset is missing scene directory " + (root / id).string());
    frames.push_back(read_frame(root / id));
  }
  return frames;
}

}  // namespace prior3d
