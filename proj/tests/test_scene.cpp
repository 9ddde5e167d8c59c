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

#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <numbers>
#include <set>

#include "oracles.hpp"
#include "prior3d/checkpoint.hpp"
#include "prior3d/scene.hpp"

using namespace prior3d;
using namespace prior3d::testing;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("prior3d_test_scene_" + name);
  fs::remove_all(dir);
  return dir;
}

bool same_scene(const Scene& a, const Scene& b) {
  if (a.seed != b.seed || a.partial != b.partial || a.albedo != b.albedo || a.cuboids != b.cuboids) return false;
  if (a.cameras.size() != b.cameras.size()) return false;
  for (std::size_t i = 0; i < a.cameras.size(); ++i) {
    const Camera &x = a.cameras[i], &y = b.cameras[i];
    if (x.fx != y.fx || x.fy != y.fy || x.cx != y.cx || x.cy != y.cy || x.rotation != y.rotation ||
        x.translation != y.translation || x.width != y.width || x.height != y.height) {
      return false;
    }
  }
  return true;
}

bool same_frame(const Frame& a, const Frame& b) {
  return a.id == b.id && same_scene(a.scene, b.scene) && a.views == b.views && a.clean_boxes == b.clean_boxes &&
         a.lidar == b.lidar;
}

SceneConfig small_config() {
  SceneConfig c;
  c.rig.width = 80;
  c.rig.height = 48;
  return c;
}

Scene single_cube_scene(const Eigen::Vector3d& center, const Eigen::Vector3d& extents) {
  Scene s;
  Cuboid c;
  c.center = center;
  c.extents = extents;
  s.cuboids = {c};
  s.albedo = {{0.5f, 0.5f, 0.5f}};
  return s;
}

// Distance from p to the surface of the cuboid.
double surface_distance(const Cuboid& c, const Eigen::Vector3d& p) {
  const double cs = std::cos(c.yaw), sn = std::sin(c.yaw);
  const Eigen::Vector3d d = p - c.center;
  const Eigen::Vector3d local(cs * d.x() + sn * d.y(), -sn * d.x() + cs * d.y(), d.z());
  const Eigen::Vector3d q = local.cwiseAbs() - 0.5 * c.extents;
  const double outside = q.cwiseMax(0.0).norm();
  return outside > 0 ? outside : -q.maxCoeff();
}

}  // namespace

TEST_CASE("scene generation is deterministic and well placed") {
  const SceneConfig cfg;
  for (std::uint64_t seed : {0ull, 1ull, 77ull, 123456789ull}) {
    const Scene a = generate_scene(cfg, seed), b = generate_scene(cfg, seed);
    CHECK(same_scene(a, b));
    CHECK(a.cameras.size() == 6);
    CHECK_FALSE(a.cuboids.empty());
    for (std::size_t i = 0; i < a.cuboids.size(); ++i) {
      const auto& c = a.cuboids[i];
      CHECK(bev_range(c.center) <= 50.0);
      CHECK((c.extents.array() > 0).all());
      CHECK(c.center.z() == doctest::Approx(0.5 * c.extents.z()));
      for (std::size_t j = i + 1; j < a.cuboids.size(); ++j) {
        CHECK(bev_iou(c, a.cuboids[j]) == 0.0);
        CHECK(centroid_distance_bev(c, a.cuboids[j]) >= cfg.min_separation);
      }
    }
  }
  CHECK_FALSE(same_scene(generate_scene(cfg, 1), generate_scene(cfg, 2)));
}

TEST_CASE("scene config validation") {
  SceneConfig c;
  c.max_radius = 60;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = SceneConfig{};
  c.classes[0].length = {-1, 2};
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
}

TEST_CASE("crowded scene is flagged partial") {
  SceneConfig c;
  c.classes = {ClassSpec{ObjectClass::kVehicle, 60, 60, {3.5, 5.5}, {1.6, 2.2}, {1.4, 2.0}}};
  c.min_radius = 6;
  c.max_radius = 10;
  c.max_retries = 20;
  const Scene s = generate_scene(c, 3);
  CHECK(s.partial);
  CHECK(s.cuboids.size() < 60);
}

TEST_CASE("rig covers the full circle") {
  const auto cams = make_rig(RigConfig{});
  REQUIRE(cams.size() == 6);
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> ang(-std::numbers::pi, std::numbers::pi), r(6, 50);
  for (int i = 0; i < 2000; ++i) {
    const double a = ang(rng), d = r(rng);
    const Eigen::Vector3d p(d * std::cos(a), d * std::sin(a), 1.6);
    int seen = 0;
    for (const auto& c : cams) seen += project_point(c, p).valid;
    CHECK(seen >= 1);
  }
}

TEST_CASE("empty scene renders background") {
  Scene s;
  const Camera cam = Camera::horizontal({0, 0, 1.6}, 0.0, std::numbers::pi / 2, 40, 24);
  const auto v = render_view(s, cam);
  CHECK(v.boxes.empty());
  for (int y = 0; y < 24; ++y) {
    for (int x = 0; x < 40; ++x) {
      CHECK(v.depth_at(y, x) == 1.0f);
      CHECK(v.semantic_at(y, x, 0) == 0.0f);
      CHECK(v.semantic_at(y, x, 1) == 0.0f);
      CHECK(v.semantic_at(y, x, kBackgroundChannel) == 1.0f);
    }
  }
}

TEST_CASE("depth of a cube on the optical axis") {
  const Camera cam = Camera::horizontal({0, 0, 1.0}, 0.0, std::numbers::pi / 2, 160, 96);
  const Scene s = single_cube_scene({25, 0, 1.0}, {2, 2, 2});
  const auto v = render_view(s, cam);
  // Near face at 25 - 1 m; the pixel nearest the principal point sees it.
  const double expect = 0.5 * (1 - 1.0 / 25.0);
  CHECK(std::abs(v.depth_at(47, 79) - expect) < 1e-6);
  CHECK(v.semantic_at(47, 79, 0) == 1.0f);
  CHECK(v.depth_at(47, 79) < v.depth_at(0, 0));
  REQUIRE(v.boxes.size() == 1);
  CHECK(v.boxes[0].source == 0);
  CHECK(v.boxes[0].u == doctest::Approx(cam.cx));
}

TEST_CASE("noiseless priors are exact") {
  const SceneConfig cfg = small_config();
  const Frame f = make_frame(cfg, 11, FrameOptions{.noise = PriorNoiseConfig::none(), .lidar = {}, .lidar_subsample = 0.25});
  REQUIRE(f.views.size() == 6);
  std::set<int> boxed;
  for (std::size_t c = 0; c < f.views.size(); ++c) {
    const auto& v = f.views[c];
    const Camera& cam = f.scene.cameras[c];
    CHECK(v.boxes == f.clean_boxes[c]);
    std::set<int> sources;
    for (const auto& b : v.boxes) {
      CHECK(sources.insert(b.source).second);  // one box per visible cuboid
      boxed.insert(b.source);
      const auto hull = project_cuboid_to_box2d(cam, f.scene.cuboids.at(b.source));
      REQUIRE(hull);
      CHECK(b.u == hull->u);
      CHECK(b.v == hull->v);
    }
    for (int y = 0; y < v.height; ++y) {
      for (int x = 0; x < v.width; ++x) {
        float total = 0;
        for (int k = 0; k < kNumSemanticChannels; ++k) {
          const float s = v.semantic_at(y, x, k);
          CHECK((s == 0.0f || s == 1.0f));
          total += s;
        }
        CHECK(total == 1.0f);
        if (v.semantic_at(y, x, kBackgroundChannel) == 1.0f) continue;
        // The pixel's depth puts the hit point on the surface of some cuboid.
        const Ray ray = unproject_pixel(cam, x + 0.5, y + 0.5);
        const double t = v.depth_at(y, x) * kDepthMax / ray.direction.dot(cam.forward());
        const Eigen::Vector3d p = ray.origin + t * ray.direction;
        double best = 1e9;
        for (const auto& cub : f.scene.cuboids) best = std::min(best, std::abs(surface_distance(cub, p)));
        CHECK(best < 1e-4);
      }
    }
    // A cuboid whose centroid pixel shows it has a box in that camera.
    for (std::size_t i = 0; i < f.scene.cuboids.size(); ++i) {
      const auto& cub = f.scene.cuboids[i];
      const auto pr = project_point(cam, cub.center);
      if (!pr.valid) continue;
      const int px = static_cast<int>(pr.u), py = static_cast<int>(pr.v);
      const double near = (pr.depth - 0.5 * cub.extents.norm()) / kDepthMax;
      if (v.semantic_at(py, px, static_cast<int>(cub.label)) == 1.0f && v.depth_at(py, px) >= near - 1e-6) {
        CHECK(sources.count(static_cast<int>(i)) == 1);
      }
    }
  }
}

TEST_CASE("zero noise is the identity") {
  const Frame f = make_frame(small_config(), 5, FrameOptions{.noise = PriorNoiseConfig::none(), .lidar = {}, .lidar_subsample = 0.25});
  for (const auto& v : f.views) CHECK(corrupt_priors(v, PriorNoiseConfig::none(), 9) == v);
}

TEST_CASE("false-negative probability 1 drops every box") {
  const Frame f = make_frame(small_config(), 5, FrameOptions{.noise = PriorNoiseConfig::none(), .lidar = {}, .lidar_subsample = 0.25});
  PriorNoiseConfig n;
  n.false_negative_prob = 1;
  for (const auto& v : f.views) CHECK(corrupt_priors(v, n, 3).boxes.empty());
}

TEST_CASE("center jitter follows a half-normal mean") {
  RenderedView v;
  v.width = 100;
  v.height = 100;
  for (int i = 0; i < 10000; ++i) v.boxes.push_back(Box2D{50, 50, 10, 10, ObjectClass::kVehicle, 1, i});
  PriorNoiseConfig n;
  n.center_sigma_px = 2;
  const auto out = corrupt_priors(v, n, 17);
  REQUIRE(out.boxes.size() == 10000);
  double mu = 0, mv = 0;
  for (const auto& b : out.boxes) {
    mu += std::abs(b.u - 50);
    mv += std::abs(b.v - 50);
  }
  mu /= 10000;
  mv /= 10000;
  // E|X| for X ~ N(0, s^2) is s * sqrt(2 / pi).
  const double expect = 2.0 * std::sqrt(2.0 / std::numbers::pi);
  CHECK(std::abs(mu / expect - 1) < 0.05);
  CHECK(std::abs(mv / expect - 1) < 0.05);
}

TEST_CASE("realistic noise keeps priors in range") {
  const Frame f = make_frame(small_config(), 21, {});
  for (const auto& v : f.views) {
    for (float s : v.semantic) CHECK((s >= 0 && s <= 1));
    for (float d : v.depth) CHECK((d >= 0 && d <= 1));
    for (const auto& b : v.boxes) {
      CHECK((b.score >= 0 && b.score <= 1));
      CHECK(b.width > 0);
      CHECK(b.height > 0);
    }
  }
  PriorNoiseConfig bad;
  bad.false_negative_prob = 1.5;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("lidar hits faces and ground") {
  const Scene s = single_cube_scene({12, 0, 1.0}, {4, 2, 2});
  const LidarConfig cfg;
  const auto scan = simulate_lidar(s, cfg, 1.0);
  int on_object = 0;
  for (std::size_t i = 0; i < scan.size(); ++i) {
    CHECK((scan.points[i] - Eigen::Vector3d(0, 0, cfg.mount_height)).norm() <= cfg.max_range);
    if (scan.source[i] == LidarSource::kObject) {
      ++on_object;
      CHECK(scan.object[i] == 0);
      CHECK(std::abs(surface_distance(s.cuboids[0], scan.points[i])) < 1e-6);
    } else {
      CHECK(scan.points[i].z() == 0.0);
    }
  }
  CHECK(on_object > 0);

  const auto empty = simulate_lidar(Scene{}, cfg, 1.0);
  CHECK(empty.size() > 0);
  for (std::size_t i = 0; i < empty.size(); ++i) {
    CHECK(empty.source[i] == LidarSource::kGround);
    CHECK(empty.points[i].z() == 0.0);
  }

  const auto half = simulate_lidar(s, cfg, 0.5);
  CHECK(std::abs(static_cast<double>(half.size()) - 0.5 * static_cast<double>(scan.size())) <= 1.0);
  CHECK_THROWS_AS(simulate_lidar(s, cfg, 0.0), std::invalid_argument);
}

TEST_CASE("frames are deterministic") {
  const SceneConfig cfg = small_config();
  CHECK(same_frame(make_frame(cfg, 42, {}), make_frame(cfg, 42, {})));
  CHECK_FALSE(same_frame(make_frame(cfg, 42, {}, "x"), make_frame(cfg, 43, {}, "x")));
}

TEST_CASE("dataset round trip") {
  const auto root = scratch_dir("roundtrip");
  const SceneConfig cfg = small_config();
  std::vector<Frame> frames;
  for (int i = 0; i < 4; ++i) frames.push_back(make_frame(cfg, 100 + i, {}, "scene_" + std::to_string(i)));
  const Splits splits{{"scene_0", "scene_1"}, {"scene_2"}, {"scene_3"}};
  write_dataset(frames, splits, root);

  const auto all = read_dataset(root);
  REQUIRE(all.size() == 4);
  for (int i = 0; i < 4; ++i) CHECK(same_frame(all[i], frames[i]));
  CHECK(read_dataset(root, "val").at(0).id == "scene_2");
  CHECK_THROWS_AS(read_dataset(root, "bogus"), std::invalid_argument);

  const auto s = read_splits(root);
  const auto manifest = read_json_file(root / kSplitsFile);
  int dirs = 0;
  for (const auto& e : fs::directory_iterator(root)) dirs += e.is_directory();
  CHECK(manifest.at("scene_count") == dirs);
  CHECK(s.train.size() + s.val.size() + s.test.size() == static_cast<std::size_t>(dirs));

  // Writing the round-tripped frame reproduces the same bytes.
  write_frame(all[0], root / "copy");
  CHECK(read_file_bytes(root / "copy" / kSceneBlob) == read_file_bytes(root / "scene_0" / kSceneBlob));
}

TEST_CASE("corrupt datasets fail loudly") {
  const auto root = scratch_dir("corrupt");
  const Frame f = make_frame(small_config(), 7, {}, "only");
  write_dataset({f}, Splits{{"only"}, {}, {}}, root);
  fs::resize_file(root / "only" / kSceneBlob, fs::file_size(root / "only" / kSceneBlob) / 2);
  CHECK_THROWS_AS(read_frame(root / "only"), FormatError);

  write_dataset({f}, Splits{{"only", "missing"}, {}, {}}, root);
  CHECK_THROWS_AS(read_dataset(root, "train"), FormatError);

  auto manifest = read_json_file(root / "only" / kSceneManifest);
  manifest.erase("cuboids");
  write_json_file(root / "only" / kSceneManifest, manifest);
  CHECK_THROWS_AS(read_frame(root / "only"), FormatError);
  CHECK_THROWS_AS(read_frame(root / "nowhere"), FormatError);
}
