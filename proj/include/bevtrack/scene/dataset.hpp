#pragma once

// On-disk scene layout:
//
//   scene.json             manifest (format, version, config, cameras, poses, file checksums)
//   gt.bin                 G x 13 f64: frame, track, class, cx, cy, cz, w, l, h, yaw, vx, vy, vz
//   frames/<k>/lidar.bin   N x 4 f64: x, y, z, tag (track id or -1), ego frame
//
// Geometry is stored as f64 so that a read after write is exact; bulky
// feature arrays (pseudo-labels, feature maps) use f32.

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"

#include "bevtrack/error.hpp"
#include "bevtrack/scene/array_io.hpp"
#include "bevtrack/scene/generator.hpp"
#include "bevtrack/scene/types.hpp"

namespace bev::io {

inline constexpr int kSceneFormatVersion = 1;
inline constexpr const char* kSceneFormat = "bevtrack-scene";

using nlohmann::json;

inline json pose_to_json(const Pose& p) {
  json r = json::array(), t = json::array();
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) r.push_back(p.rotation(i, j));
  for (int i = 0; i < 3; ++i) t.push_back(p.translation(i));
  return {{"rotation", r}, {"translation", t}};
}

inline Pose pose_from_json(const json& j) {
  Pose p;
  for (int i = 0; i < 3; ++i)
    for (int k = 0; k < 3; ++k) p.rotation(i, k) = j.at("rotation").at(i * 3 + k).get<double>();
  for (int i = 0; i < 3; ++i) p.translation(i) = j.at("translation").at(i).get<double>();
  return p;
}

inline json box_to_json(const Box3& b) {
  return {{"center", {b.center.x(), b.center.y(), b.center.z()}},
          {"width", b.width},
          {"length", b.length},
          {"height", b.height},
          {"yaw", b.yaw}};
}

inline Box3 box_from_json(const json& j) {
  Box3 b;
  for (int i = 0; i < 3; ++i) b.center(i) = j.at("center").at(i).get<double>();
  b.width = j.at("width").get<double>();
  b.length = j.at("length").get<double>();
  b.height = j.at("height").get<double>();
  b.yaw = j.at("yaw").get<double>();
  return b;
}

inline json camera_to_json(const CameraModel& c) {
  return {{"fx", c.intrinsics.fx},
          {"fy", c.intrinsics.fy},
          {"cx", c.intrinsics.cx},
          {"cy", c.intrinsics.cy},
          {"width", c.width},
          {"height", c.height},
          {"camera_from_ego", pose_to_json(c.camera_from_ego)}};
}

inline CameraModel camera_from_json(const json& j) {
  CameraModel c;
  c.intrinsics = {j.at("fx").get<double>(), j.at("fy").get<double>(), j.at("cx").get<double>(),
                  j.at("cy").get<double>()};
  c.width = j.at("width").get<int>();
  c.height = j.at("height").get<int>();
  c.camera_from_ego = pose_from_json(j.at("camera_from_ego"));
  return c;
}

inline json grid_to_json(const BevGridSpec& g) {
  return {{"x_min", g.x_min}, {"x_max", g.x_max}, {"y_min", g.y_min}, {"y_max", g.y_max}, {"resolution", g.resolution}};
}

inline BevGridSpec grid_from_json(const json& j) {
  return {j.at("x_min").get<double>(), j.at("x_max").get<double>(), j.at("y_min").get<double>(),
          j.at("y_max").get<double>(), j.at("resolution").get<int>()};
}

inline json config_to_json(const SceneConfig& c) {
  return {{"seed", c.seed},
          {"n_frames", c.n_frames},
          {"n_objects", c.n_objects},
          {"n_cameras", c.n_cameras},
          {"image_width", c.image_width},
          {"image_height", c.image_height},
          {"focal", c.focal},
          {"camera_height", c.camera_height},
          {"frame_interval", c.frame_interval},
          {"ego_speed", c.ego_speed},
          {"lidar_points", c.lidar_points},
          {"n_static", c.n_static},
          {"feature_channels", c.feature_channels},
          {"grid", grid_to_json(c.grid)}};
}

inline SceneConfig config_from_json(const json& j) {
  SceneConfig c;
  c.seed = j.at("seed").get<std::uint64_t>();
  c.n_frames = j.at("n_frames").get<int>();
  c.n_objects = j.at("n_objects").get<int>();
  c.n_cameras = j.at("n_cameras").get<int>();
  c.image_width = j.at("image_width").get<int>();
  c.image_height = j.at("image_height").get<int>();
  c.focal = j.at("focal").get<double>();
  c.camera_height = j.at("camera_height").get<double>();
  c.frame_interval = j.at("frame_interval").get<double>();
  c.ego_speed = j.at("ego_speed").get<double>();
  c.lidar_points = j.at("lidar_points").get<int>();
  c.n_static = j.at("n_static").get<int>();
  c.feature_channels = j.at("feature_channels").get<int>();
  c.grid = grid_from_json(j.at("grid"));
  return c;
}

inline json augmentation_to_json(const BevAugmentation& a) {
  return {{"rotation", a.rotation}, {"scale", a.scale}, {"flip", a.flip}};
}

inline BevAugmentation augmentation_from_json(const json& j) {
  return {j.at("rotation").get<double>(), j.at("scale").get<double>(), j.at("flip").get<bool>()};
}

// Static obstacles of one frame in its (augmented) ego coordinates.
inline std::vector<Box3> frame_static_boxes(const std::vector<Box3>& global, const Pose& ego_pose,
                                            const BevAugmentation& aug) {
  std::vector<Box3> out;
  const Pose ego_from_global = invert(ego_pose);
  for (const auto& s : global) {
    Box3 b = detail::to_ego(s, ego_from_global, ego_pose.yaw());
    out.push_back(aug.is_identity() ? b : aug.apply(b));
  }
  return out;
}

inline void write_dataset(const Scene& scene, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  json files = json::object();
  auto emit = [&](const std::string& rel, const std::string& bytes) {
    write_file(dir / rel, bytes);
    files[rel] = {{"crc32", crc32_of(bytes)}, {"bytes", bytes.size()}};
  };

  std::vector<double> gt;
  for (const auto& f : scene.frames)
    for (const auto& b : f.gt_boxes)
      gt.insert(gt.end(), {static_cast<double>(b.frame), static_cast<double>(b.track_id),
                           static_cast<double>(b.class_id), b.center.x(), b.center.y(), b.center.z(), b.width,
                           b.length, b.height, b.yaw, b.velocity.x(), b.velocity.y(), b.velocity.z()});
  json manifest;
  manifest["format"] = kSceneFormat;
  manifest["format_version"] = kSceneFormatVersion;
  manifest["config"] = config_to_json(scene.config);
  manifest["static_obstacles"] = json::array();
  for (const auto& s : scene.static_obstacles) manifest["static_obstacles"].push_back(box_to_json(s));
  if (!gt.empty()) {
    emit("gt.bin", encode_array({gt.size() / 13, 13}, gt, DType::kF64));
    manifest["gt"] = "gt.bin";
  } else {
    manifest["gt"] = nullptr;
  }
  manifest["frames"] = json::array();
  for (const auto& f : scene.frames) {
    json jf;
    jf["index"] = f.index;
    jf["timestamp"] = f.timestamp;
    jf["ego_pose"] = pose_to_json(f.ego_pose);
    jf["augmentation"] = augmentation_to_json(f.augmentation);
    jf["cameras"] = json::array();
    for (const auto& c : f.cameras) jf["cameras"].push_back(camera_to_json(c));
    if (!f.lidar_points.empty()) {
      std::vector<double> pts;
      pts.reserve(f.lidar_points.size() * 4);
      for (std::size_t i = 0; i < f.lidar_points.size(); ++i)
        pts.insert(pts.end(), {f.lidar_points[i].x(), f.lidar_points[i].y(), f.lidar_points[i].z(),
                               static_cast<double>(f.lidar_tags[i])});
      const std::string rel = "frames/" + std::to_string(f.index) + "/lidar.bin";
      emit(rel, encode_array({f.lidar_points.size(), 4}, pts, DType::kF64));
      jf["lidar"] = rel;
    } else {
      jf["lidar"] = nullptr;
    }
    manifest["frames"].push_back(jf);
  }
  manifest["files"] = files;
  write_file(dir / "scene.json", manifest.dump(2) + "\n");
}

// Verifies size and CRC of every referenced file before decoding any of them.
inline Scene read_dataset(const std::filesystem::path& dir) {
  const std::string text = read_file(dir / "scene.json");
  json manifest;
  try {
    manifest = json::parse(text);
  } catch (const json::exception& e) {
    throw IoError("scene.json: " + std::string(e.what()));
  }
  if (manifest.value("format", std::string()) != kSceneFormat) throw IoError("scene.json: not a scene manifest");
  const int version = manifest.at("format_version").get<int>();
  if (version != kSceneFormatVersion)
    throw VersionError("scene.json: unsupported format version " + std::to_string(version) + " (expected " +
                       std::to_string(kSceneFormatVersion) + ")");

  std::map<std::string, std::string> blobs;
  for (const auto& [rel, meta] : manifest.at("files").items()) {
    std::string bytes = read_file(dir / rel);
    if (bytes.size() != meta.at("bytes").get<std::size_t>() || crc32_of(bytes) != meta.at("crc32").get<std::uint32_t>())
      throw ChecksumError(rel + ": checksum mismatch");
    blobs.emplace(rel, std::move(bytes));
  }
  auto blob = [&](const std::string& rel) -> const std::string& {
    auto it = blobs.find(rel);
    if (it == blobs.end()) throw IoError("manifest references unlisted file " + rel);
    return it->second;
  };

  try {
    Scene scene;
    scene.config = config_from_json(manifest.at("config"));
    for (const auto& s : manifest.at("static_obstacles")) scene.static_obstacles.push_back(box_from_json(s));
    for (const auto& jf : manifest.at("frames")) {
      Frame f;
      f.index = jf.at("index").get<int>();
      f.timestamp = jf.at("timestamp").get<double>();
      f.ego_pose = pose_from_json(jf.at("ego_pose"));
      f.augmentation = augmentation_from_json(jf.at("augmentation"));
      for (const auto& c : jf.at("cameras")) f.cameras.push_back(camera_from_json(c));
      if (!jf.at("lidar").is_null()) {
        const std::string rel = jf.at("lidar").get<std::string>();
        auto arr = decode_array(blob(rel), rel);
        if (arr.shape.size() != 2 || arr.shape[1] != 4) throw IoError(rel + ": expected N x 4");
        for (std::size_t i = 0; i < arr.shape[0]; ++i) {
          f.lidar_points.emplace_back(arr.values[i * 4], arr.values[i * 4 + 1], arr.values[i * 4 + 2]);
          f.lidar_tags.push_back(static_cast<int>(arr.values[i * 4 + 3]));
        }
      }
      f.static_boxes = frame_static_boxes(scene.static_obstacles, f.ego_pose, f.augmentation);
      scene.frames.push_back(std::move(f));
    }
    if (!manifest.at("gt").is_null()) {
      const std::string rel = manifest.at("gt").get<std::string>();
      auto arr = decode_array(blob(rel), rel);
      if (arr.shape.size() != 2 || arr.shape[1] != 13) throw IoError(rel + ": expected G x 13");
      for (std::size_t i = 0; i < arr.shape[0]; ++i) {
        const double* r = arr.values.data() + i * 13;
        GtBox b;
        b.frame = static_cast<int>(r[0]);
        b.track_id = static_cast<int>(r[1]);
        b.class_id = static_cast<int>(r[2]);
        b.center = {r[3], r[4], r[5]};
        b.width = r[6];
        b.length = r[7];
        b.height = r[8];
        b.yaw = r[9];
        b.velocity = {r[10], r[11], r[12]};
        bool placed = false;
        for (auto& f : scene.frames)
          if (f.index == b.frame) {
            f.gt_boxes.push_back(b);
            placed = true;
          }
        if (!placed) throw IoError(rel + ": box references unknown frame " + std::to_string(b.frame));
      }
    }
    return scene;
  } catch (const json::exception& e) {
    throw IoError("scene.json: " + std::string(e.what()));
  }
}

}  // namespace bev::io
