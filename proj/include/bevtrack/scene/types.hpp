#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "bevtrack/geometry.hpp"

namespace bev {

inline constexpr int kNumClasses = 3;
inline constexpr int kStaticTag = -1;

enum class ObjectClass : int { kCar = 0, kPedestrian = 1, kCyclist = 2 };

inline const char* class_name(int class_id) {
  switch (class_id) {
    case 0: return "car";
    case 1: return "pedestrian";
    case 2: return "cyclist";
    default: return "unknown";
  }
}

// Ground-truth box in the ego frame of its frame. Velocity is the absolute
// (ground-relative) velocity expressed in ego axes.
struct GtBox {
  Vec3 center = Vec3::Zero();
  double width = 1.0, length = 1.0, height = 1.0;
  double yaw = 0.0;
  Vec3 velocity = Vec3::Zero();
  int class_id = 0;
  int track_id = 0;
  int frame = 0;

  Box3 box() const { return {center, width, length, height, yaw}; }
};

// Scaled rigid BEV transform: rotate about z, optionally mirror y, then scale.
// Maps original ego coordinates to augmented ones.
struct BevAugmentation {
  double rotation = 0.0;
  double scale = 1.0;
  bool flip = false;

  bool is_identity() const { return rotation == 0.0 && scale == 1.0 && !flip; }

  Mat3 linear() const {
    Mat3 f = Mat3::Identity();
    if (flip) f(1, 1) = -1.0;
    return scale * f * rot_z(rotation);
  }
  Vec3 apply(const Vec3& p) const { return linear() * p; }
  Vec3 apply_inverse(const Vec3& p) const { return linear().inverse() * p; }
  double apply_yaw(double yaw) const { return wrap_angle(flip ? -(yaw + rotation) : yaw + rotation); }
  double inverse_yaw(double yaw) const { return wrap_angle(flip ? -yaw - rotation : yaw - rotation); }
  Box3 apply(const Box3& b) const {
    return {apply(b.center), scale * b.width, scale * b.length, scale * b.height, apply_yaw(b.yaw)};
  }
  Box3 apply_inverse(const Box3& b) const {
    return {apply_inverse(b.center), b.width / scale, b.length / scale, b.height / scale, inverse_yaw(b.yaw)};
  }
  // Composes `then` after this transform.
  BevAugmentation followed_by(const BevAugmentation& then) const {
    BevAugmentation out;
    out.scale = scale * then.scale;
    out.flip = flip != then.flip;
    // F(b) R(tb) F(a) R(ta) = F(a^b) R(+-tb + ta)
    out.rotation = wrap_angle(rotation + (flip ? -then.rotation : then.rotation));
    return out;
  }
};

struct Frame {
  int index = 0;
  double timestamp = 0.0;
  Pose ego_pose;  // global-from-ego
  std::vector<CameraModel> cameras;
  std::vector<Vec3> lidar_points;  // ego frame
  std::vector<int> lidar_tags;     // track id or kStaticTag
  std::vector<GtBox> gt_boxes;
  std::vector<Box3> static_boxes;  // static obstacles in this frame's ego coordinates
  BevAugmentation augmentation;    // applied on top of the raw ego frame
};

struct SceneConfig {
  std::uint64_t seed = 0;
  int n_frames = 10;
  int n_objects = 3;
  int n_cameras = 6;
  int image_width = 176;
  int image_height = 64;
  double focal = 100.0;
  double camera_height = 1.5;
  double frame_interval = 0.5;  // 2 Hz keyframes
  double ego_speed = 2.0;
  int lidar_points = 2000;
  int n_static = 4;
  int feature_channels = 16;
  BevGridSpec grid;
};

struct Scene {
  SceneConfig config;
  std::vector<Box3> static_obstacles;  // global frame
  std::vector<Frame> frames;
};

}  // namespace bev
