#pragma once

// Frames: ego is x forward, y left, z up with the origin on the ground plane.
// Cameras follow the usual optical convention: x right, y down, z along the
// optical axis. Image coordinates are continuous with pixel j covering
// [j, j + 1), so pixel centres sit at j + 0.5.

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <limits>
#include <numbers>
#include <optional>
#include <string>

#include "bevtrack/error.hpp"

namespace bev {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

inline constexpr double kPi = std::numbers::pi;
inline constexpr double kDepthEpsilon = 1e-6;

// Wraps to (-pi, pi].
inline double wrap_angle(double a) {
  a = std::fmod(a + kPi, 2.0 * kPi);
  if (a <= 0.0) a += 2.0 * kPi;
  return a - kPi;
}

inline Mat3 rot_z(double yaw) {
  Mat3 r;
  const double c = std::cos(yaw), s = std::sin(yaw);
  r << c, -s, 0, s, c, 0, 0, 0, 1;
  return r;
}

// Rigid transform p -> R p + t.
struct Pose {
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();

  static Pose identity() { return {}; }
  static Pose from_yaw(double yaw, const Vec3& t) { return {rot_z(yaw), t}; }

  Vec3 apply(const Vec3& p) const { return rotation * p + translation; }
  Vec3 apply_direction(const Vec3& d) const { return rotation * d; }
  double yaw() const { return std::atan2(rotation(1, 0), rotation(0, 0)); }

  bool is_valid(double tol = 1e-9) const {
    return (rotation.transpose() * rotation - Mat3::Identity()).cwiseAbs().maxCoeff() < tol &&
           std::fabs(rotation.determinant() - 1.0) < tol;
  }
  void validate() const {
    if (!is_valid()) throw DomainError("pose rotation is not a proper orthonormal matrix");
  }
};

// compose(a, b) applies b first, then a.
inline Pose compose(const Pose& a, const Pose& b) {
  return {a.rotation * b.rotation, a.rotation * b.translation + a.translation};
}

inline Pose invert(const Pose& a) {
  Mat3 rt = a.rotation.transpose();
  return {rt, -(rt * a.translation)};
}

struct Intrinsics {
  double fx = 100.0, fy = 100.0, cx = 88.0, cy = 32.0;
};

struct CameraModel {
  Intrinsics intrinsics;
  Pose camera_from_ego;
  int width = 176;
  int height = 64;

  void validate() const {
    if (!(intrinsics.fx > 0.0 && intrinsics.fy > 0.0)) throw DomainError("camera focal lengths must be positive");
    if (width <= 0 || height <= 0) throw DomainError("camera image size must be positive");
    camera_from_ego.validate();
  }
  Pose ego_from_camera() const { return invert(camera_from_ego); }
  Vec3 center_in_ego() const { return ego_from_camera().translation; }
};

struct Projection {
  double u = 0.0;
  double v = 0.0;
  double depth = 0.0;
};

// Pixel coordinates without the in-image test; nullopt only behind the camera.
inline std::optional<Projection> project_unbounded(const Vec3& p_ego, const CameraModel& cam) {
  const Vec3 pc = cam.camera_from_ego.apply(p_ego);
  if (pc.z() <= kDepthEpsilon) return std::nullopt;
  const auto& k = cam.intrinsics;
  return Projection{k.fx * pc.x() / pc.z() + k.cx, k.fy * pc.y() / pc.z() + k.cy, pc.z()};
}

inline bool in_image(const Projection& p, const CameraModel& cam) {
  return p.u >= 0.0 && p.v >= 0.0 && p.u < cam.width && p.v < cam.height;
}

// nullopt is the OutOfView outcome: behind the camera or outside the image.
inline std::optional<Projection> project(const Vec3& p_ego, const CameraModel& cam) {
  auto p = project_unbounded(p_ego, cam);
  if (!p || !in_image(*p, cam)) return std::nullopt;
  return p;
}

inline Vec3 unproject(double u, double v, double depth, const CameraModel& cam) {
  if (!(depth > 0.0)) throw DomainError("unproject needs a positive depth");
  const auto& k = cam.intrinsics;
  const Vec3 pc((u - k.cx) / k.fx * depth, (v - k.cy) / k.fy * depth, depth);
  return cam.ego_from_camera().apply(pc);
}

// Camera on the ego vehicle looking horizontally along `yaw` from `position`.
inline CameraModel make_camera(double yaw, const Vec3& position, const Intrinsics& k, int width, int height) {
  const Vec3 forward(std::cos(yaw), std::sin(yaw), 0.0);
  const Vec3 right(std::sin(yaw), -std::cos(yaw), 0.0);
  const Vec3 down(0.0, 0.0, -1.0);
  Mat3 r;
  r.row(0) = right.transpose();
  r.row(1) = down.transpose();
  r.row(2) = forward.transpose();
  CameraModel cam;
  cam.intrinsics = k;
  cam.camera_from_ego = {r, -(r * position)};
  cam.width = width;
  cam.height = height;
  return cam;
}

// Square BEV grid; rows index x (forward), columns index y (left).
struct BevGridSpec {
  double x_min = -16.0, x_max = 16.0;
  double y_min = -16.0, y_max = 16.0;
  int resolution = 32;

  static BevGridSpec symmetric(double half_range, int resolution) {
    return {-half_range, half_range, -half_range, half_range, resolution};
  }

  void validate() const {
    if (resolution < 2) throw DomainError("BEV grid resolution must be >= 2");
    if (!(x_max > x_min && y_max > y_min)) throw DomainError("BEV grid range is empty");
  }
  double cell_x() const { return (x_max - x_min) / resolution; }
  double cell_y() const { return (y_max - y_min) / resolution; }
  std::size_t cells() const { return static_cast<std::size_t>(resolution) * resolution; }

  // Floor binning; nullopt outside the grid.
  std::optional<std::size_t> cell_index(double x, double y) const {
    if (!(x >= x_min && x < x_max && y >= y_min && y < y_max)) return std::nullopt;
    auto r = static_cast<int>(std::floor((x - x_min) / cell_x()));
    auto c = static_cast<int>(std::floor((y - y_min) / cell_y()));
    if (r < 0 || c < 0 || r >= resolution || c >= resolution) return std::nullopt;
    return static_cast<std::size_t>(r) * resolution + static_cast<std::size_t>(c);
  }
  // Continuous lattice coordinates (u = column, v = row) with cell centres at integers.
  std::array<double, 2> lattice_coords(double x, double y) const {
    return {(y - y_min) / cell_y() - 0.5, (x - x_min) / cell_x() - 0.5};
  }
  std::array<double, 2> cell_center(std::size_t row, std::size_t col) const {
    return {x_min + (static_cast<double>(row) + 0.5) * cell_x(), y_min + (static_cast<double>(col) + 0.5) * cell_y()};
  }
};

// Oriented box: length along the heading (box x), width along box y, height along z.
struct Box3 {
  Vec3 center = Vec3::Zero();
  double width = 1.0, length = 1.0, height = 1.0;
  double yaw = 0.0;

  Pose frame() const { return Pose::from_yaw(yaw, center); }
  Vec3 to_local(const Vec3& p) const { return rot_z(-yaw) * (p - center); }
  Vec3 to_world(const Vec3& q) const { return rot_z(yaw) * q + center; }
  Vec3 half_extents() const { return {0.5 * length, 0.5 * width, 0.5 * height}; }

  bool contains(const Vec3& p, double inflate = 0.0) const {
    const Vec3 q = to_local(p);
    const Vec3 e = half_extents();
    return std::fabs(q.x()) <= e.x() + inflate && std::fabs(q.y()) <= e.y() + inflate &&
           std::fabs(q.z()) <= e.z() + inflate;
  }

  std::array<Vec3, 8> corners() const {
    std::array<Vec3, 8> out;
    const Vec3 e = half_extents();
    int k = 0;
    for (int sx : {-1, 1})
      for (int sy : {-1, 1})
        for (int sz : {-1, 1}) out[k++] = to_world(Vec3(sx * e.x(), sy * e.y(), sz * e.z()));
    return out;
  }
};

// Entry distance of ray origin + s * dir (s > 0) into the box, if any.
inline std::optional<double> ray_box(const Vec3& origin, const Vec3& dir, const Box3& box) {
  const Vec3 o = box.to_local(origin);
  const Vec3 d = rot_z(-box.yaw) * dir;
  const Vec3 e = box.half_extents();
  double t0 = -std::numeric_limits<double>::infinity(), t1 = std::numeric_limits<double>::infinity();
  for (int a = 0; a < 3; ++a) {
    if (std::fabs(d[a]) < 1e-15) {
      if (o[a] < -e[a] || o[a] > e[a]) return std::nullopt;
      continue;
    }
    double ta = (-e[a] - o[a]) / d[a], tb = (e[a] - o[a]) / d[a];
    if (ta > tb) std::swap(ta, tb);
    t0 = std::max(t0, ta);
    t1 = std::min(t1, tb);
    if (t0 > t1) return std::nullopt;
  }
  if (t1 <= 0.0) return std::nullopt;
  return t0 > 0.0 ? t0 : 0.0;
}

}  // namespace bev
