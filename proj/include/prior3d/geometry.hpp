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

// Pinhole cameras, rays and cuboids in a right-handed z-up world (meters).
//
// Image coordinates are continuous: the image spans [0, W) x [0, H) and pixel
// (i, j) covers [i, i+1) x [j, j+1), so its center is (i + 0.5, j + 0.5).
// Camera frame follows the usual x-right, y-down, z-forward convention.

#pragma once

#include <array>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include <Eigen/Core>
#include <Eigen/Geometry>

namespace prior3d {

enum class ObjectClass : int { kVehicle = 0, kHuman = 1 };

inline constexpr int kNumClasses = 2;
// VEHICLE, HUMAN, background.
inline constexpr int kNumSemanticChannels = 3;
inline constexpr int kBackgroundChannel = 2;

std::string_view class_name(ObjectClass c);
ObjectClass class_from_name(std::string_view name);

struct Camera {
  double fx = 1, fy = 1, cx = 0, cy = 0;
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();  // world -> camera
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();   // world -> camera
  int width = 1, height = 1;

  // Camera at `position` looking horizontally along world heading `yaw`,
  // with horizontal field of view `hfov` radians and square pixels.
  static Camera horizontal(const Eigen::Vector3d& position, double yaw, double hfov, int width, int height);

  Eigen::Vector3d center() const { return -rotation.transpose() * translation; }
  Eigen::Vector3d to_camera(const Eigen::Vector3d& world) const { return rotation * world + translation; }
  Eigen::Vector3d forward() const { return rotation.row(2).transpose(); }

  // Throws std::invalid_argument unless the rotation is orthonormal with
  // det +1 (within 1e-9), focal lengths are positive and the size is valid.
  void validate() const;
};

struct Projection {
  double u = 0, v = 0, depth = 0;
  bool valid = false;
};

// Pinhole projection. Valid iff camera-frame depth > 0 and (u, v) inside the
// image. u, v are always filled when depth != 0.
Projection project_point(const Camera& camera, const Eigen::Vector3d& p);

struct Ray {
  Eigen::Vector3d origin;
  Eigen::Vector3d direction;  // unit length
};

Ray unproject_pixel(const Camera& camera, double u, double v);

enum class RayDepth {
  kEuclidean,  // distance along the ray
  kCameraZ,    // depth along the optical axis
};

inline constexpr double kRayInterval = 5.0;
inline constexpr double kMaxRange = 50.0;

// Points at depths interval, 2*interval, ... <= max_range along the ray. An
// empty result flags max_range < interval. Throws for interval <= 0.
std::vector<Eigen::Vector3d> sample_ray(const Ray& ray, double interval = kRayInterval,
                                        double max_range = kMaxRange);
// Same, with depth measured per `mode`; kCameraZ needs the ray's camera.
std::vector<Eigen::Vector3d> sample_ray(const Camera& camera, const Ray& ray, double interval,
                                        double max_range, RayDepth mode);

struct Cuboid {
  Eigen::Vector3d center = Eigen::Vector3d::Zero();
  Eigen::Vector3d extents = Eigen::Vector3d::Ones();  // length (along yaw), width, height
  double yaw = 0;
  ObjectClass label = ObjectClass::kVehicle;

  bool operator==(const Cuboid&) const = default;
};

// Wraps to (-pi, pi].
double normalize_yaw(double yaw);

// Counter-clockwise footprint corners.
std::array<Eigen::Vector2d, 4> cuboid_bev_polygon(const Cuboid& c);
// Bottom four (CCW) then top four.
std::array<Eigen::Vector3d, 8> cuboid_corners(const Cuboid& c);

// Signed shoelace area; positive for counter-clockwise polygons.
double polygon_area(std::span<const Eigen::Vector2d> poly);
// Sutherland-Hodgman clip of `subject` against the convex CCW polygon `clip`.
std::vector<Eigen::Vector2d> clip_convex_polygon(std::span<const Eigen::Vector2d> subject,
                                                 std::span<const Eigen::Vector2d> clip);

// Rotated footprint IoU in [0, 1].
double bev_iou(const Cuboid& a, const Cuboid& b);

double centroid_distance_bev(const Cuboid& a, const Cuboid& b);
double bev_range(const Eigen::Vector3d& p);

struct Box2D {
  double u = 0, v = 0;           // center, pixels
  double width = 1, height = 1;  // pixels
  ObjectClass label = ObjectClass::kVehicle;
  double score = 1;
  int source = -1;  // originating cuboid index, -1 for a false positive

  bool operator==(const Box2D&) const = default;
};

// Axis-aligned hull of the positive-depth corners, clipped to the image;
// std::nullopt when no corner is in front of the camera or nothing remains
// after clipping. Score is 1.
std::optional<Box2D> project_cuboid_to_box2d(const Camera& camera, const Cuboid& cuboid);

}  // namespace prior3d
