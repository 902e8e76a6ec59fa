#pragma once

// Procedural multi-camera driving sequences: an ego vehicle driving along x,
// objects on constant-velocity or constant-turn-rate paths, static obstacles,
// and surface-sampled LiDAR returns.

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "bevtrack/error.hpp"
#include "bevtrack/scene/raycast.hpp"
#include "bevtrack/scene/types.hpp"

namespace bev {

// Length, width, height per class.
inline Vec3 class_dimensions(int class_id) {
  switch (class_id) {
    case 0: return {4.5, 1.9, 1.6};
    case 1: return {0.7, 0.7, 1.8};
    default: return {1.8, 0.7, 1.6};
  }
}

// Global-frame trajectory of one object.
struct ObjectTrack {
  int track_id = 0;
  int class_id = 0;
  Vec3 start = Vec3::Zero();  // centre at t = 0
  double heading = 0.0;
  double speed = 0.0;
  double turn_rate = 0.0;  // rad/s, 0 for constant velocity

  Vec3 position(double t) const {
    if (turn_rate == 0.0)
      return start + Vec3(std::cos(heading), std::sin(heading), 0.0) * (speed * t);
    const double h = heading + turn_rate * t;
    const double r = speed / turn_rate;
    return start + Vec3(r * (std::sin(h) - std::sin(heading)), r * (std::cos(heading) - std::cos(h)), 0.0);
  }
  double yaw(double t) const { return wrap_angle(heading + turn_rate * t); }
  Vec3 velocity(double t) const {
    const double h = heading + turn_rate * t;
    return Vec3(std::cos(h), std::sin(h), 0.0) * speed;
  }
};

namespace detail {

// Uniform point on the box surface, bottom face excluded.
template <class Rng>
Vec3 sample_box_surface(const Box3& b, Rng& rng) {
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  const double l = b.length, w = b.width, h = b.height;
  const double a_top = l * w, a_x = w * h, a_y = l * h;
  const double total = a_top + 2 * a_x + 2 * a_y;
  const double pick = u01(rng) * total;
  const double s = u01(rng) - 0.5, t = u01(rng) - 0.5;
  Vec3 q;
  if (pick < a_top) {
    q = {s * l, t * w, 0.5 * h};
  } else if (pick < a_top + 2 * a_x) {
    const double sx = pick < a_top + a_x ? 0.5 : -0.5;
    q = {sx * l, s * w, t * h};
  } else {
    const double sy = pick < a_top + 2 * a_x + a_y ? 0.5 : -0.5;
    q = {s * l, sy * w, t * h};
  }
  return b.to_world(q);
}

inline Box3 to_ego(const Box3& global_box, const Pose& ego_from_global, double ego_yaw) {
  return {ego_from_global.apply(global_box.center), global_box.width, global_box.length, global_box.height,
          wrap_angle(global_box.yaw - ego_yaw)};
}

}  // namespace detail

inline std::vector<CameraModel> make_rig(const SceneConfig& cfg) {
  std::vector<CameraModel> cams;
  const Intrinsics k{cfg.focal, cfg.focal, 0.5 * cfg.image_width, 0.5 * cfg.image_height};
  for (int i = 0; i < cfg.n_cameras; ++i) {
    const double yaw = 2.0 * kPi * i / cfg.n_cameras;
    const Vec3 pos(0.5 * std::cos(yaw), 0.5 * std::sin(yaw), cfg.camera_height);
    cams.push_back(make_camera(yaw, pos, k, cfg.image_width, cfg.image_height));
  }
  return cams;
}

inline Pose ego_pose_at(const SceneConfig& cfg, double t) {
  return Pose::from_yaw(0.0, Vec3(cfg.ego_speed * t, 0.0, 0.0));
}

inline std::vector<ObjectTrack> sample_tracks(const SceneConfig& cfg, std::mt19937_64& rng,
                                              const std::vector<Box3>& statics) {
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  std::vector<ObjectTrack> tracks;
  const auto rig = make_rig(cfg);
  auto footprint = [](int cls) {
    const Vec3 d = class_dimensions(cls);
    return 0.5 * std::hypot(d.x(), d.y());
  };
  for (int id = 0; id < cfg.n_objects; ++id) {
    bool placed = false;
    for (int attempt = 0; attempt < 2000 && !placed; ++attempt) {
      ObjectTrack tr;
      tr.track_id = id;
      const double c = u01(rng);
      tr.class_id = c < 0.5 ? 0 : (c < 0.75 ? 1 : 2);
      const double radius = 5.0 + 7.0 * u01(rng);
      const double ang = 2.0 * kPi * u01(rng);
      tr.start = Vec3(radius * std::cos(ang), radius * std::sin(ang), 0.5 * class_dimensions(tr.class_id).z());
      tr.heading = wrap_angle(2.0 * kPi * u01(rng));
      const double vmax = tr.class_id == 1 ? 1.5 : 3.0;
      tr.speed = vmax * u01(rng);
      tr.turn_rate = u01(rng) < 0.3 ? (u01(rng) - 0.5) * 0.4 : 0.0;
      bool ok = true;
      bool observed = false;
      for (int f = 0; f < cfg.n_frames && ok; ++f) {
        const double t = f * cfg.frame_interval;
        const Vec3 p = tr.position(t);
        const Pose ego = ego_pose_at(cfg, t);
        const Vec3 rel = invert(ego).apply(p);
        if (std::hypot(rel.x(), rel.y()) < 4.0) ok = false;
        for (const auto& other : tracks)
          if ((other.position(t) - p).head<2>().norm() < footprint(other.class_id) + footprint(tr.class_id) + 0.5)
            ok = false;
        for (const auto& s : statics)
          if ((s.center - p).head<2>().norm() < 0.5 * std::hypot(s.length, s.width) + footprint(tr.class_id) + 0.5)
            ok = false;
        for (const auto& cam : rig)
          if (project(rel, cam)) observed = true;
      }
      if (ok && observed) {
        tracks.push_back(tr);
        placed = true;
      }
    }
    if (!placed) throw DomainError("could not place object " + std::to_string(id) + " without collisions");
  }
  return tracks;
}

inline Scene generate_scene(const SceneConfig& config_in) {
  SceneConfig cfg = config_in;
  if (cfg.n_cameras < 1) throw DomainError("n_cameras must be >= 1");
  if (cfg.n_frames < 1) throw DomainError("n_frames must be >= 1");
  if (cfg.n_objects < 0) throw DomainError("n_objects must be >= 0");
  if (cfg.lidar_points < 0 || cfg.image_width < 1 || cfg.image_height < 1 || cfg.frame_interval <= 0.0)
    throw DomainError("invalid scene parameters");
  cfg.grid.validate();

  std::mt19937_64 rng(cfg.seed);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  Scene scene;
  scene.config = cfg;

  // Static obstacles beside the ego path.
  const double path_len = cfg.ego_speed * cfg.frame_interval * (cfg.n_frames - 1);
  for (int i = 0; i < cfg.n_static; ++i) {
    const bool pole = u01(rng) < 0.5;
    Box3 b;
    b.length = pole ? 0.6 : 2.0 + 2.0 * u01(rng);
    b.width = pole ? 0.6 : 1.5 + 1.5 * u01(rng);
    b.height = pole ? 3.0 : 2.0 + u01(rng);
    const double side = u01(rng) < 0.5 ? -1.0 : 1.0;
    b.center = Vec3(-10.0 + (path_len + 20.0) * u01(rng), side * (13.0 + 4.0 * u01(rng)), 0.5 * b.height);
    b.yaw = wrap_angle(kPi * (u01(rng) - 0.5));
    scene.static_obstacles.push_back(b);
  }

  const auto tracks = sample_tracks(cfg, rng, scene.static_obstacles);
  const auto rig = make_rig(cfg);

  for (int f = 0; f < cfg.n_frames; ++f) {
    Frame fr;
    fr.index = f;
    fr.timestamp = f * cfg.frame_interval;
    fr.ego_pose = ego_pose_at(cfg, fr.timestamp);
    fr.cameras = rig;
    const Pose ego_from_global = invert(fr.ego_pose);
    const double ego_yaw = fr.ego_pose.yaw();
    for (const auto& s : scene.static_obstacles) fr.static_boxes.push_back(detail::to_ego(s, ego_from_global, ego_yaw));
    for (const auto& tr : tracks) {
      GtBox g;
      const Vec3 dims = class_dimensions(tr.class_id);
      g.length = dims.x();
      g.width = dims.y();
      g.height = dims.z();
      g.center = ego_from_global.apply(tr.position(fr.timestamp));
      g.yaw = wrap_angle(tr.yaw(fr.timestamp) - ego_yaw);
      g.velocity = ego_from_global.apply_direction(tr.velocity(fr.timestamp));
      g.class_id = tr.class_id;
      g.track_id = tr.track_id;
      g.frame = f;
      fr.gt_boxes.push_back(g);
    }

    // LiDAR: ~60% ground, ~25% objects, remainder on static obstacles.
    const int n_total = cfg.lidar_points;
    const int n_obj_each = tracks.empty() ? 0 : std::max(1, n_total / 4 / static_cast<int>(tracks.size()));
    const int n_obj = n_obj_each * static_cast<int>(tracks.size());
    const int n_static_pts = fr.static_boxes.empty() ? 0 : std::max(0, (n_total - n_obj) / 6);
    const int n_ground = std::max(0, n_total - n_obj - n_static_pts);
    for (const auto& g : fr.gt_boxes)
      for (int k = 0; k < n_obj_each; ++k) {
        fr.lidar_points.push_back(detail::sample_box_surface(g.box(), rng));
        fr.lidar_tags.push_back(g.track_id);
      }
    for (int k = 0; k < n_static_pts; ++k) {
      const auto& b = fr.static_boxes[static_cast<std::size_t>(k) % fr.static_boxes.size()];
      fr.lidar_points.push_back(detail::sample_box_surface(b, rng));
      fr.lidar_tags.push_back(kStaticTag);
    }
    int placed = 0;
    while (placed < n_ground) {
      const double r = std::sqrt(4.0 + (400.0 - 4.0) * u01(rng));
      const double a = 2.0 * kPi * u01(rng);
      const Vec3 p(r * std::cos(a), r * std::sin(a), 0.0);
      bool covered = false;
      for (const auto& g : fr.gt_boxes) covered = covered || g.box().contains(p, 0.05);
      for (const auto& b : fr.static_boxes) covered = covered || b.contains(p, 0.05);
      if (covered) continue;
      fr.lidar_points.push_back(p);
      fr.lidar_tags.push_back(kStaticTag);
      ++placed;
    }
    scene.frames.push_back(std::move(fr));
  }
  return scene;
}

}  // namespace bev
