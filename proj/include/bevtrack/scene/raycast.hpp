#pragma once

#include <limits>
#include <optional>
#include <vector>

#include "bevtrack/scene/types.hpp"

namespace bev {

enum class SurfaceKind { kNone, kGround, kStatic, kObject };

struct RayHit {
  SurfaceKind kind = SurfaceKind::kNone;
  double distance = std::numeric_limits<double>::infinity();
  Vec3 point = Vec3::Zero();
  int index = -1;  // into FrameGeometry::objects or ::statics
};

// Everything a ray can hit in one frame, in that frame's (possibly augmented) ego coordinates.
struct FrameGeometry {
  std::vector<Box3> objects;
  std::vector<int> object_track;
  std::vector<int> object_class;
  std::vector<Box3> statics;
};

inline FrameGeometry frame_geometry(const Frame& frame) {
  FrameGeometry g;
  for (const auto& b : frame.gt_boxes) {
    g.objects.push_back(b.box());
    g.object_track.push_back(b.track_id);
    g.object_class.push_back(b.class_id);
  }
  g.statics = frame.static_boxes;
  return g;
}

// Nearest hit along origin + s * dir, dir unit length. Ground is the plane z = 0.
inline RayHit cast_ray(const FrameGeometry& g, const Vec3& origin, const Vec3& dir,
                       double max_distance = 500.0) {
  RayHit hit;
  if (dir.z() < -1e-12) {
    const double s = -origin.z() / dir.z();
    if (s > 0.0 && s < max_distance) {
      hit.kind = SurfaceKind::kGround;
      hit.distance = s;
    }
  }
  for (std::size_t i = 0; i < g.statics.size(); ++i)
    if (auto s = ray_box(origin, dir, g.statics[i]); s && *s < hit.distance) {
      hit.kind = SurfaceKind::kStatic;
      hit.distance = *s;
      hit.index = static_cast<int>(i);
    }
  for (std::size_t i = 0; i < g.objects.size(); ++i)
    if (auto s = ray_box(origin, dir, g.objects[i]); s && *s < hit.distance) {
      hit.kind = SurfaceKind::kObject;
      hit.distance = *s;
      hit.index = static_cast<int>(i);
    }
  if (hit.kind != SurfaceKind::kNone) hit.point = origin + hit.distance * dir;
  return hit;
}

// Ray from the camera centre through continuous pixel (u, v), in ego coordinates.
inline Vec3 pixel_ray(const CameraModel& cam, double u, double v) {
  const auto& k = cam.intrinsics;
  const Vec3 dc((u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0);
  return cam.ego_from_camera().apply_direction(dc).normalized();
}

// Visibility of `p` from camera `cam`: nothing in the scene is hit more than
// `tolerance` metres before reaching p.
inline bool visible_from(const FrameGeometry& g, const CameraModel& cam, const Vec3& p, double tolerance = 0.1) {
  const Vec3 origin = cam.center_in_ego();
  const Vec3 delta = p - origin;
  const double dist = delta.norm();
  if (dist < 1e-9) return false;
  const RayHit hit = cast_ray(g, origin, delta / dist, dist + 1.0);
  if (hit.kind == SurfaceKind::kNone) return true;
  return hit.distance >= dist - tolerance;
}

}  // namespace bev
