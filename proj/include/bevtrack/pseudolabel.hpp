#pragma once

// Offline BEV pseudo-labels from foundation features: paint LiDAR points with
// the mean of the image features of every camera that sees them, accumulate a
// static map in global coordinates and per-object clouds in box coordinates,
// then bin and height-average into the BEV grid of a reference frame.

#include <algorithm>
#include <cmath>
#include <map>
#include <vector>

#include "bevtrack/error.hpp"
#include "bevtrack/featprov.hpp"
#include "bevtrack/geometry.hpp"
#include "bevtrack/numerics/bilinear.hpp"
#include "bevtrack/scene/raycast.hpp"
#include "bevtrack/scene/types.hpp"

namespace bev {

struct FeaturePointCloud {
  std::size_t channels = 0;
  std::vector<Vec3> positions;
  std::vector<double> features;  // N x channels
  std::vector<int> frame_tags;
  std::vector<int> object_tags;  // track id or kStaticTag

  std::size_t size() const { return positions.size(); }
  std::span<const double> feature(std::size_t i) const { return {features.data() + i * channels, channels}; }

  void push(const Vec3& p, std::span<const double> f, int frame, int object) {
    if (channels == 0) channels = f.size();
    if (f.size() != channels) throw DimensionError("feature point cloud channel mismatch");
    positions.push_back(p);
    features.insert(features.end(), f.begin(), f.end());
    frame_tags.push_back(frame);
    object_tags.push_back(object);
  }
  void append(const FeaturePointCloud& o) {
    for (std::size_t i = 0; i < o.size(); ++i) push(o.positions[i], o.feature(i), o.frame_tags[i], o.object_tags[i]);
  }
};

struct PseudoLabelGrid {
  FeatureGrid grid;
  std::vector<std::uint8_t> valid;  // the supervised set, one flag per cell

  std::size_t valid_count() const { return static_cast<std::size_t>(std::count(valid.begin(), valid.end(), 1)); }
};

struct PseudoLabelOptions {
  bool accumulate = true;   // use points from other frames of the sequence
  bool dynamic = true;      // include object-centric clouds
  bool causal = false;      // only frames up to the reference frame
  bool renormalize = true;  // unit-norm valid cells after averaging
  double box_inflation = 0.1;
  double z_min = -1.0, z_max = 3.0;
  double visibility_tolerance = 0.1;
  double paint_scale = 0.25;
};

// Feature of `p` as the mean of bilinear samples over the cameras that see it.
// Returns false if no camera does.
inline bool paint_point(const Vec3& p, const Frame& frame, const FrameGeometry& geo,
                        const std::vector<FeatureMap>& maps, double tolerance, std::vector<double>& out) {
  const std::size_t c = maps.front().grid.channels;
  out.assign(c, 0.0);
  int views = 0;
  for (const auto& fm : maps) {
    const auto& cam = frame.cameras.at(static_cast<std::size_t>(fm.camera));
    auto pr = project(p, cam);
    if (!pr || !visible_from(geo, cam, p, tolerance)) continue;
    auto s = bilinear_sample(fm.grid, to_lattice(pr->u, fm.scale), to_lattice(pr->v, fm.scale));
    if (!s.in_bounds) continue;
    for (std::size_t k = 0; k < c; ++k) out[k] += s.value[k];
    ++views;
  }
  if (views == 0) return false;
  for (auto& v : out) v /= views;
  return true;
}

// `maps` holds one feature map per camera, all at the same scale.
inline FeaturePointCloud paint_points(const std::vector<Vec3>& points, const std::vector<int>& tags,
                                      const Frame& frame, const std::vector<FeatureMap>& maps,
                                      double tolerance = 0.1) {
  if (frame.cameras.empty() || maps.empty()) throw DomainError("paint_points needs at least one camera");
  for (const auto& fm : maps)
    if (fm.scale != maps.front().scale || fm.grid.channels != maps.front().grid.channels)
      throw DimensionError("paint_points: feature maps must share scale and channels");
  const FrameGeometry geo = frame_geometry(frame);
  FeaturePointCloud cloud;
  cloud.channels = maps.front().grid.channels;
  std::vector<double> f;
  for (std::size_t i = 0; i < points.size(); ++i)
    if (paint_point(points[i], frame, geo, maps, tolerance, f))
      cloud.push(points[i], f, frame.index, tags.empty() ? kStaticTag : tags[i]);
  return cloud;
}

inline FeaturePointCloud paint_frame(const Frame& frame, const FeatureProvider& provider, double scale = 0.25,
                                     double tolerance = 0.1) {
  std::vector<FeatureMap> maps;
  for (int c = 0; c < static_cast<int>(frame.cameras.size()); ++c)
    maps.push_back(provider.compute_features(frame, c, scale));
  return paint_points(frame.lidar_points, frame.lidar_tags, frame, maps, tolerance);
}

// Unaugmented ego coordinates of a point of `frame`.
inline Vec3 raw_ego(const Frame& frame, const Vec3& p) {
  return frame.augmentation.is_identity() ? p : frame.augmentation.apply_inverse(p);
}

// Points outside every inflated GT box of their frame, moved to the global frame.
// painted[k] belongs to frames[k].
inline FeaturePointCloud accumulate_static(const std::vector<Frame>& frames,
                                           const std::vector<FeaturePointCloud>& painted,
                                           double inflation = 0.1) {
  if (frames.empty()) throw DomainError("accumulate_static needs at least one frame");
  if (painted.size() != frames.size()) throw DimensionError("one painted cloud per frame expected");
  FeaturePointCloud out;
  for (std::size_t k = 0; k < frames.size(); ++k) {
    const auto& fr = frames[k];
    const auto& pc = painted[k];
    for (std::size_t i = 0; i < pc.size(); ++i) {
      bool inside = false;
      for (const auto& g : fr.gt_boxes)
        if (g.box().contains(pc.positions[i], inflation)) {
          inside = true;
          break;
        }
      if (inside) continue;
      out.push(fr.ego_pose.apply(raw_ego(fr, pc.positions[i])), pc.feature(i), fr.index, kStaticTag);
    }
  }
  out.channels = painted.front().channels;
  return out;
}

// Points inside the track's box in each frame, in the box's own coordinates.
inline FeaturePointCloud accumulate_object(const std::vector<Frame>& frames,
                                           const std::vector<FeaturePointCloud>& painted, int track_id,
                                           double inflation = 0.1) {
  if (painted.size() != frames.size()) throw DimensionError("one painted cloud per frame expected");
  FeaturePointCloud out;
  out.channels = painted.empty() ? 0 : painted.front().channels;
  bool found = false;
  for (std::size_t k = 0; k < frames.size(); ++k) {
    const auto& fr = frames[k];
    for (const auto& g : fr.gt_boxes) {
      if (g.track_id != track_id) continue;
      found = true;
      const Box3 box = g.box();
      const Box3 raw = fr.augmentation.is_identity() ? box : fr.augmentation.apply_inverse(box);
      const auto& pc = painted[k];
      for (std::size_t i = 0; i < pc.size(); ++i)
        if (box.contains(pc.positions[i], inflation))
          out.push(raw.to_local(raw_ego(fr, pc.positions[i])), pc.feature(i), fr.index, track_id);
    }
  }
  if (!found) throw DomainError("unknown track id " + std::to_string(track_id));
  return out;
}

// Bins the static cloud (global) and the object clouds (placed at their GT pose
// in `reference`) into the reference frame's BEV grid, averaging over height.
inline PseudoLabelGrid rasterize_bev(const FeaturePointCloud& static_cloud,
                                     const std::map<int, FeaturePointCloud>& object_clouds, const Frame& reference,
                                     const BevGridSpec& grid, const PseudoLabelOptions& opt = {}) {
  grid.validate();
  std::size_t c = static_cloud.channels;
  for (const auto& [id, oc] : object_clouds)
    if (oc.size() > 0) c = c ? c : oc.channels;
  PseudoLabelGrid out;
  const auto res = static_cast<std::size_t>(grid.resolution);
  out.grid = FeatureGrid(res, res, std::max<std::size_t>(c, 1));
  out.valid.assign(grid.cells(), 0);
  std::vector<int> counts(grid.cells(), 0);
  const Pose ego_from_global = invert(reference.ego_pose);
  const auto& aug = reference.augmentation;

  auto add = [&](const Vec3& raw, std::span<const double> f) {
    if (raw.z() < opt.z_min || raw.z() > opt.z_max) return;
    const Vec3 p = aug.is_identity() ? raw : aug.apply(raw);
    auto cell = grid.cell_index(p.x(), p.y());
    if (!cell) return;
    auto dst = out.grid.cell(*cell / res, *cell % res);
    for (std::size_t k = 0; k < c; ++k) dst[k] += f[k];
    ++counts[*cell];
  };

  for (std::size_t i = 0; i < static_cloud.size(); ++i)
    add(ego_from_global.apply(static_cloud.positions[i]), static_cloud.feature(i));
  for (const auto& g : reference.gt_boxes) {
    auto it = object_clouds.find(g.track_id);
    if (it == object_clouds.end()) continue;
    const Box3 raw_box = aug.is_identity() ? g.box() : aug.apply_inverse(g.box());
    for (std::size_t i = 0; i < it->second.size(); ++i) add(raw_box.to_world(it->second.positions[i]), it->second.feature(i));
  }

  for (std::size_t cell = 0; cell < counts.size(); ++cell) {
    if (counts[cell] == 0) continue;
    out.valid[cell] = 1;
    auto v = out.grid.cell(cell / res, cell % res);
    double n2 = 0.0;
    for (auto& x : v) {
      x /= counts[cell];
      n2 += x * x;
    }
    if (opt.renormalize && n2 > 0.0) {
      const double n = std::sqrt(n2);
      for (auto& x : v) x /= n;
    }
  }
  return out;
}

// Pseudo-labels for every frame of a sequence.
inline std::vector<PseudoLabelGrid> build_pseudo_labels(const std::vector<Frame>& frames,
                                                        const FeatureProvider& provider, const BevGridSpec& grid,
                                                        const PseudoLabelOptions& opt = {}) {
  std::vector<FeaturePointCloud> painted;
  painted.reserve(frames.size());
  for (const auto& f : frames) painted.push_back(paint_frame(f, provider, opt.paint_scale, opt.visibility_tolerance));

  std::vector<PseudoLabelGrid> out;
  for (std::size_t r = 0; r < frames.size(); ++r) {
    std::size_t lo = 0, hi = frames.size();
    if (!opt.accumulate) {
      lo = r;
      hi = r + 1;
    } else if (opt.causal) {
      hi = r + 1;
    }
    const std::vector<Frame> sub(frames.begin() + static_cast<std::ptrdiff_t>(lo),
                                 frames.begin() + static_cast<std::ptrdiff_t>(hi));
    const std::vector<FeaturePointCloud> sub_painted(painted.begin() + static_cast<std::ptrdiff_t>(lo),
                                                     painted.begin() + static_cast<std::ptrdiff_t>(hi));
    const auto stat = accumulate_static(sub, sub_painted, opt.box_inflation);
    std::map<int, FeaturePointCloud> objects;
    if (opt.dynamic)
      for (const auto& g : frames[r].gt_boxes)
        objects.emplace(g.track_id, accumulate_object(sub, sub_painted, g.track_id, opt.box_inflation));
    out.push_back(rasterize_bev(stat, objects, frames[r], grid, opt));
  }
  return out;
}

}  // namespace bev
