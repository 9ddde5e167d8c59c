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

// Small scenes and models shared by the detector, training and acceptance
// tests.

#pragma once

#include <numbers>
#include <random>
#include <vector>

#include "gradcheck.hpp"
#include "prior3d/detector.hpp"
#include "prior3d/eval.hpp"
#include "prior3d/scene.hpp"

namespace prior3d::testing {

inline Cuboid make_cuboid(const Eigen::Vector3d& center, const Eigen::Vector3d& extents, double yaw = 0,
                          ObjectClass label = ObjectClass::kVehicle) {
  Cuboid c;
  c.center = center;
  c.extents = extents;
  c.yaw = yaw;
  c.label = label;
  return c;
}

// Renders `cuboids` with a rig of `cameras` cameras and noiseless priors.
inline Frame make_test_frame(const std::vector<Cuboid>& cuboids, int cameras, int width, int height,
                             std::string id = "test") {
  RigConfig rig;
  rig.num_cameras = cameras;
  rig.width = width;
  rig.height = height;
  Frame f;
  f.id = std::move(id);
  f.scene.cameras = make_rig(rig);
  f.scene.cuboids = cuboids;
  for (std::size_t i = 0; i < cuboids.size(); ++i) {
    f.scene.albedo.push_back({0.3f + 0.1f * static_cast<float>(i % 5), 0.6f, 0.4f});
  }
  for (const auto& cam : f.scene.cameras) {
    f.views.push_back(render_view(f.scene, cam));
    f.clean_boxes.push_back(f.views.back().boxes);
  }
  f.lidar = simulate_lidar(f.scene, LidarConfig{}, 0.25);
  return f;
}

// d=8, one camera, two blocks, two ray queries (one box, 5 m samples to 10 m),
// all priors on, refinement off.
inline DetectorConfig tiny_config() {
  DetectorConfig c;
  c.d = 8;
  c.heads = 2;
  c.blocks = 2;
  c.num_cameras = 1;
  c.num_vanilla = 2;
  c.feature_channels = 4;
  c.stem_channels = 3;
  c.ffn_dim = 8;
  c.pos_freqs = 2;
  c.priors = parse_prior_flags("feat,loc,query");
  c.refine = false;
  c.max_range = 10;
  return c;
}

inline Frame tiny_frame() {
  Frame f = make_test_frame({make_cuboid({9, 0.5, 0.9}, {4, 2, 1.8}, 0.4)}, 1, 32, 16, "tiny");
  for (auto& v : f.views) {
    for (auto& b : v.boxes) b.score = 0.9;
  }
  return f;
}

// Central-difference check of every parameter of the tiny detector against
// the concatenated outputs of all blocks.
inline GradCheckResult tiny_detector_grad_check() {
  const Frame frame = tiny_frame();
  Detector<double> model(tiny_config(), 3);
  auto f = [&](const std::vector<TensorD>&) {
    const auto result = model.forward(frame);
    std::vector<TensorD> parts;
    for (const auto& b : result.blocks) {
      for (const auto* t : {&b.logits, &b.offsets, &b.extents, &b.yaw}) parts.push_back(reshape(*t, {static_cast<int>(t->size())}));
    }
    return concat(parts, 0);
  };
  return grad_check(f, model.parameter_list());
}

// Frame whose priors are exact projected-centroid boxes.
inline Frame with_centroid_boxes(Frame f) {
  for (std::size_t c = 0; c < f.views.size(); ++c) f.views[c].boxes = centroid_boxes(f.scene, f.scene.cameras[c]);
  return f;
}

}  // namespace prior3d::testing
