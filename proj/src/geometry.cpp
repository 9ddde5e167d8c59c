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

#include "prior3d/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

namespace prior3d {

std::string_view class_name(ObjectClass c) {
  switch (c) {
    case ObjectClass::kVehicle:
      return "VEHICLE";
    case ObjectClass::kHuman:
      return "HUMAN";
  }
  return "UNKNOWN";
}

ObjectClass class_from_name(std::string_view name) {
  if (name == "VEHICLE") return ObjectClass::kVehicle;
  if (name == "HUMAN") return ObjectClass::kHuman;
  throw std::invalid_argument("unknown class '" + std::string(name) + "'");
}

Camera Camera::horizontal(const Eigen::Vector3d& position, double yaw, double hfov, int width, int height) {
  Camera cam;
  cam.width = width;
  cam.height = height;
  cam.fx = cam.fy = 0.5 * width / std::tan(0.5 * hfov);
  cam.cx = 0.5 * width;
  cam.cy = 0.5 * height;
  const Eigen::Vector3d forward(std::cos(yaw), std::sin(yaw), 0.0);
  const Eigen::Vector3d up = Eigen::Vector3d::UnitZ();
  const Eigen::Vector3d right = forward.cross(up).normalized();
  const Eigen::Vector3d down = forward.cross(right);
  cam.rotation.row(0) = right.transpose();
  cam.rotation.row(1) = down.transpose();
  cam.rotation.row(2) = forward.transpose();
  cam.translation = -cam.rotation * position;
  return cam;
}

void Camera::validate() const {
  if (!(fx > 0) || !(fy > 0)) throw std::invalid_argument("camera focal lengths must be positive");
  if (width <= 0 || height <= 0) throw std::invalid_argument("camera image size must be positive");
  const double ortho = (rotation * rotation.transpose() - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff();
  if (ortho > 1e-9 || std::abs(rotation.determinant() - 1.0) > 1e-9) {
    throw std::invalid_argument("camera rotation is not a proper rotation");
  }
}

Projection project_point(const Camera& camera, const Eigen::Vector3d& p) {
  const Eigen::Vector3d pc = camera.to_camera(p);
  Projection out;
  out.depth = pc.z();
  if (pc.z() == 0.0) return out;
  out.u = camera.fx * pc.x() / pc.z() + camera.cx;
  out.v = camera.fy * pc.y() / pc.z() + camera.cy;
  out.valid = pc.z() > 0 && out.u >= 0 && out.u < camera.width && out.v >= 0 && out.v < camera.height;
  return out;
}

Ray unproject_pixel(const Camera& camera, double u, double v) {
  const Eigen::Vector3d dir_cam((u - camera.cx) / camera.fx, (v - camera.cy) / camera.fy, 1.0);
  return Ray{camera.center(), (camera.rotation.transpose() * dir_cam).normalized()};
}

std::vector<Eigen::Vector3d> sample_ray(const Ray& ray, double interval, double max_range) {
  if (!(interval > 0)) throw std::invalid_argument("sample_ray: interval must be positive");
  std::vector<Eigen::Vector3d> points;
  // A tiny slack keeps max_range itself when it is an exact multiple.
  const int count = static_cast<int>(std::floor(max_range / interval + 1e-9));
  points.reserve(std::max(count, 0));
  for (int k = 1; k <= count; ++k) points.push_back(ray.origin + (k * interval) * ray.direction);
  return points;
}

std::vector<Eigen::Vector3d> sample_ray(const Camera& camera, const Ray& ray, double interval,
                                        double max_range, RayDepth mode) {
  if (mode == RayDepth::kEuclidean) return sample_ray(ray, interval, max_range);
  if (!(interval > 0)) throw std::invalid_argument("sample_ray: interval must be positive");
  const double cos_theta = ray.direction.dot(camera.forward());
  std::vector<Eigen::Vector3d> points;
  if (cos_theta <= 0) return points;
  const int count = static_cast<int>(std::floor(max_range / interval + 1e-9));
  for (int k = 1; k <= count; ++k) points.push_back(ray.origin + (k * interval / cos_theta) * ray.direction);
  return points;
}

double normalize_yaw(double yaw) {
  constexpr double two_pi = 2.0 * std::numbers::pi;
  double y = std::fmod(yaw, two_pi);
  if (y <= -std::numbers::pi) y += two_pi;
  if (y > std::numbers::pi) y -= two_pi;
  return y;
}

std::array<Eigen::Vector2d, 4> cuboid_bev_polygon(const Cuboid& c) {
  const double hl = 0.5 * c.extents.x(), hw = 0.5 * c.extents.y();
  const Eigen::Rotation2Dd rot(c.yaw);
  const Eigen::Vector2d center = c.center.head<2>();
  return {center + rot * Eigen::Vector2d(hl, hw), center + rot * Eigen::Vector2d(-hl, hw),
          center + rot * Eigen::Vector2d(-hl, -hw), center + rot * Eigen::Vector2d(hl, -hw)};
}

std::array<Eigen::Vector3d, 8> cuboid_corners(const Cuboid& c) {
  const auto footprint = cuboid_bev_polygon(c);
  const double z0 = c.center.z() - 0.5 * c.extents.z(), z1 = c.center.z() + 0.5 * c.extents.z();
  std::array<Eigen::Vector3d, 8> out;
  for (int i = 0; i < 4; ++i) {
    out[i] = Eigen::Vector3d(footprint[i].x(), footprint[i].y(), z0);
    out[i + 4] = Eigen::Vector3d(footprint[i].x(), footprint[i].y(), z1);
  }
  return out;
}

double polygon_area(std::span<const Eigen::Vector2d> poly) {
  const std::size_t n = poly.size();
  if (n < 3) return 0.0;
  double acc = 0.0;
  for (std::size_t i = 0, j = n - 1; i < n; j = i++) {
    acc += poly[j].x() * poly[i].y() - poly[i].x() * poly[j].y();
  }
  return 0.5 * acc;
}

namespace {

double cross2(const Eigen::Vector2d& a, const Eigen::Vector2d& b) { return a.x() * b.y() - a.y() * b.x(); }

}  // namespace

std::vector<Eigen::Vector2d> clip_convex_polygon(std::span<const Eigen::Vector2d> subject,
                                                 std::span<const Eigen::Vector2d> clip) {
  std::vector<Eigen::Vector2d> out(subject.begin(), subject.end());
  const std::size_t m = clip.size();
  for (std::size_t e1 = m - 1, e2 = 0; e2 < m && !out.empty(); e1 = e2++) {
    const Eigen::Vector2d a = clip[e1], edge = clip[e2] - clip[e1];
    // Relative tolerance so points lying on the edge count as inside.
    const double tol = 1e-12 * std::max(1.0, edge.squaredNorm());
    std::vector<Eigen::Vector2d> in;
    in.swap(out);
    const std::size_t n = in.size();
    for (std::size_t v1 = n - 1, v2 = 0; v2 < n; v1 = v2++) {
      const double s1 = cross2(edge, in[v1] - a), s2 = cross2(edge, in[v2] - a);
      const bool in1 = s1 >= -tol, in2 = s2 >= -tol;
      if (in1 && in2) {
        out.push_back(in[v2]);
      } else if (in1 != in2) {
        const double t = s1 / (s1 - s2);
        out.push_back(in[v1] + t * (in[v2] - in[v1]));
        if (in2) out.push_back(in[v2]);
      }
    }
  }
  return out;
}

double bev_iou(const Cuboid& a, const Cuboid& b) {
  const auto pa = cuboid_bev_polygon(a), pb = cuboid_bev_polygon(b);
  const double area_a = polygon_area(pa), area_b = polygon_area(pb);
  if (!(area_a > 0) || !(area_b > 0)) return 0.0;
  const auto inter = clip_convex_polygon(pa, pb);
  const double area_i = std::max(0.0, polygon_area(inter));
  const double uni = area_a + area_b - area_i;
  if (!(uni > 0)) return 0.0;
  return std::clamp(area_i / uni, 0.0, 1.0);
}

double centroid_distance_bev(const Cuboid& a, const Cuboid& b) {
  return (a.center.head<2>() - b.center.head<2>()).norm();
}

double bev_range(const Eigen::Vector3d& p) { return p.head<2>().norm(); }

std::optional<Box2D> project_cuboid_to_box2d(const Camera& camera, const Cuboid& cuboid) {
  double u0 = std::numeric_limits<double>::infinity(), v0 = u0;
  double u1 = -u0, v1 = -u0;
  bool any = false;
  for (const auto& corner : cuboid_corners(cuboid)) {
    const Eigen::Vector3d pc = camera.to_camera(corner);
    if (!(pc.z() > 0)) continue;
    any = true;
    const double u = camera.fx * pc.x() / pc.z() + camera.cx;
    const double v = camera.fy * pc.y() / pc.z() + camera.cy;
    u0 = std::min(u0, u);
    u1 = std::max(u1, u);
    v0 = std::min(v0, v);
    v1 = std::max(v1, v);
  }
  if (!any) return std::nullopt;
  u0 = std::clamp(u0, 0.0, static_cast<double>(camera.width));
  u1 = std::clamp(u1, 0.0, static_cast<double>(camera.width));
  v0 = std::clamp(v0, 0.0, static_cast<double>(camera.height));
  v1 = std::clamp(v1, 0.0, static_cast<double>(camera.height));
  if (!(u1 > u0) || !(v1 > v0)) return std::nullopt;
  return Box2D{0.5 * (u0 + u1), 0.5 * (v0 + v1), u1 - u0, v1 - v0, cuboid.label, 1.0};
}

}  // namespace prior3d
