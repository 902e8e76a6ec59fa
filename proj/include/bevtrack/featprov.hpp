#pragma once

// Procedural stand-in for a frozen foundation-model feature extractor.
//
// Each pixel ray is cast into the frame; the feature is a function of what it
// hits: an orthonormal embedding for the surface kind/class plus a smooth
// positional code (global coordinates for ground and static structure,
// box-local coordinates for objects, so features travel with the object),
// plus a small per-pixel hash noise. Output is unit-norm per pixel.

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "bevtrack/error.hpp"
#include "bevtrack/numerics/tensor.hpp"
#include "bevtrack/scene/array_io.hpp"
#include "bevtrack/scene/raycast.hpp"
#include "bevtrack/scene/types.hpp"

namespace bev {

inline constexpr std::array<double, 4> kFeatureScales = {0.25, 0.125, 0.0625, 0.03125};

inline int scale_index(double scale) {
  for (std::size_t i = 0; i < kFeatureScales.size(); ++i)
    if (kFeatureScales[i] == scale) return static_cast<int>(i);
  throw DomainError("unsupported feature scale " + std::to_string(scale));
}

inline std::size_t scaled_extent(int full, double scale) {
  return static_cast<std::size_t>(std::ceil(full * scale));
}

// Feature-map lattice coordinate of a full-resolution image coordinate.
inline double to_lattice(double image_coord, double scale) { return image_coord * scale - 0.5; }

struct FeatureMap {
  int camera = 0;
  double scale = 0.25;
  FeatureGrid grid;
};

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Uniform in [-1, 1] from a key.
inline double hash_uniform(std::uint64_t key) {
  return static_cast<double>(splitmix64(key) >> 11) * (2.0 / 9007199254740992.0) - 1.0;
}

class FeatureProvider {
 public:
  virtual ~FeatureProvider() = default;
  virtual int channels() const = 0;
  virtual FeatureMap compute_features(const Frame& frame, int cam_index, double scale) const = 0;
};

// Surface-kind codes for embeddings: ground, static, car, pedestrian, cyclist, sky.
inline constexpr int kSurfaceCodes = 6;

class ProceduralFeatureProvider : public FeatureProvider {
 public:
  struct Options {
    int channels = 16;
    std::uint64_t basis_seed = 0x5eedULL;  // shared across scenes so semantics are comparable
    std::uint64_t noise_seed = 0;          // usually the scene seed
    double positional_weight = 0.3;
    double noise = 0.01;
    double global_frequency = 0.3;  // rad/m for ground/static
    double object_frequency = 1.2;  // rad/m in box-local coordinates
  };

  explicit ProceduralFeatureProvider(Options opt) : opt_(opt) {
    if (opt_.channels < kSurfaceCodes + 2) throw DomainError("feature provider needs at least 8 channels");
    std::mt19937_64 rng(opt_.basis_seed);
    std::normal_distribution<double> n01(0.0, 1.0);
    const int c = opt_.channels;
    Eigen::MatrixXd a(c, c);
    for (int i = 0; i < c; ++i)
      for (int j = 0; j < c; ++j) a(i, j) = n01(rng);
    basis_ = Eigen::HouseholderQR<Eigen::MatrixXd>(a).householderQ();
    const int npos = c - kSurfaceCodes;
    freq_global_.resize(npos);
    freq_object_.resize(npos);
    phase_.resize(npos);
    for (int k = 0; k < npos; ++k) {
      Vec3 d(n01(rng), n01(rng), 0.5 * n01(rng));
      d.normalize();
      freq_global_[k] = d * opt_.global_frequency;
      Vec3 e(n01(rng), n01(rng), n01(rng));
      e.normalize();
      freq_object_[k] = e * opt_.object_frequency;
      phase_[k] = std::uniform_real_distribution<double>(0.0, 2.0 * kPi)(rng);
    }
  }

  int channels() const override { return opt_.channels; }
  const Options& options() const { return opt_; }

  // Noise-free feature of a surface point. `code` is the surface code, `pos`
  // the positional argument (global or box-local).
  Eigen::VectorXd surface_feature(int code, const Vec3& pos, bool object) const {
    const int npos = opt_.channels - kSurfaceCodes;
    Eigen::VectorXd f = basis_.col(code);
    if (code != kSurfaceCodes - 1) {
      Eigen::VectorXd s(npos);
      for (int k = 0; k < npos; ++k) s[k] = std::sin((object ? freq_object_[k] : freq_global_[k]).dot(pos) + phase_[k]);
      const double n = s.norm();
      if (n > 1e-12) f += opt_.positional_weight / n * basis_.rightCols(npos) * s;
    }
    return f;
  }

  // What the ray through continuous pixel (u, v) of camera `cam` hits, as
  // (surface code, positional argument, is_object, hit). Positions are mapped
  // back through the frame augmentation so features are augmentation-invariant.
  struct SurfacePoint {
    int code = kSurfaceCodes - 1;
    Vec3 position = Vec3::Zero();
    bool object = false;
    RayHit hit;
  };

  SurfacePoint surface_at(const Frame& frame, const FrameGeometry& geo, int cam, double u, double v) const {
    const auto& camera = frame.cameras.at(static_cast<std::size_t>(cam));
    SurfacePoint sp;
    sp.hit = cast_ray(geo, camera.center_in_ego(), pixel_ray(camera, u, v));
    if (sp.hit.kind == SurfaceKind::kNone) return sp;
    const Vec3 raw = frame.augmentation.apply_inverse(sp.hit.point);
    switch (sp.hit.kind) {
      case SurfaceKind::kGround:
      case SurfaceKind::kStatic:
        sp.code = sp.hit.kind == SurfaceKind::kGround ? 0 : 1;
        sp.position = frame.ego_pose.apply(raw);
        break;
      case SurfaceKind::kObject: {
        const auto idx = static_cast<std::size_t>(sp.hit.index);
        sp.code = 2 + geo.object_class[idx];
        sp.position = frame.augmentation.apply_inverse(geo.objects[idx]).to_local(raw);
        sp.object = true;
        break;
      }
      default: break;
    }
    return sp;
  }

  // Unit-norm feature at continuous pixel (u, v); noise keyed on the
  // feature-map cell that contains it at `scale`.
  Eigen::VectorXd feature_at(const Frame& frame, const FrameGeometry& geo, int cam, double scale, double u,
                             double v) const {
    const auto sp = surface_at(frame, geo, cam, u, v);
    Eigen::VectorXd f = surface_feature(sp.code, sp.position, sp.object);
    const auto col = static_cast<std::int64_t>(std::floor(u * scale));
    const auto row = static_cast<std::int64_t>(std::floor(v * scale));
    const std::uint64_t key = splitmix64(opt_.noise_seed ^ 0xa5a5a5a5ULL) ^
                              splitmix64(static_cast<std::uint64_t>(frame.index) * 1000003ULL +
                                         static_cast<std::uint64_t>(cam) * 7919ULL +
                                         static_cast<std::uint64_t>(scale_index(scale)));
    for (int k = 0; k < opt_.channels; ++k)
      f[k] += opt_.noise * hash_uniform(key ^ splitmix64((static_cast<std::uint64_t>(row) << 40) ^
                                                         (static_cast<std::uint64_t>(col) << 16) ^
                                                         static_cast<std::uint64_t>(k)));
    return f / f.norm();
  }

  FeatureMap compute_features(const Frame& frame, int cam_index, double scale) const override {
    if (cam_index < 0 || cam_index >= static_cast<int>(frame.cameras.size()))
      throw DomainError("camera index out of range");
    const auto& cam = frame.cameras[static_cast<std::size_t>(cam_index)];
    const FrameGeometry geo = frame_geometry(frame);
    FeatureMap fm;
    fm.camera = cam_index;
    fm.scale = scale;
    fm.grid = FeatureGrid(scaled_extent(cam.height, scale), scaled_extent(cam.width, scale),
                          static_cast<std::size_t>(opt_.channels));
    for (std::size_t i = 0; i < fm.grid.height; ++i)
      for (std::size_t j = 0; j < fm.grid.width; ++j) {
        const double u = (static_cast<double>(j) + 0.5) / scale;
        const double v = (static_cast<double>(i) + 0.5) / scale;
        const auto f = feature_at(frame, geo, cam_index, scale, u, v);
        auto cell = fm.grid.cell(i, j);
        for (int k = 0; k < opt_.channels; ++k) cell[static_cast<std::size_t>(k)] = f[k];
      }
    return fm;
  }

 private:
  Options opt_;
  Eigen::MatrixXd basis_;
  std::vector<Vec3> freq_global_, freq_object_;
  std::vector<double> phase_;
};

// Loads externally computed features laid out as
// <root>/<frame>/cam<i>_s<scale_index>.bin (H x W x C arrays).
class FileFeatureProvider : public FeatureProvider {
 public:
  FileFeatureProvider(std::filesystem::path root, int channels) : root_(std::move(root)), channels_(channels) {}

  static std::filesystem::path path_for(const std::filesystem::path& root, int frame, int cam, double scale) {
    return root / std::to_string(frame) / ("cam" + std::to_string(cam) + "_s" + std::to_string(scale_index(scale)) + ".bin");
  }

  int channels() const override { return channels_; }
  FeatureMap compute_features(const Frame& frame, int cam_index, double scale) const override {
    FeatureMap fm;
    fm.camera = cam_index;
    fm.scale = scale;
    fm.grid = io::read_grid(path_for(root_, frame.index, cam_index, scale));
    if (static_cast<int>(fm.grid.channels) != channels_) throw DimensionError("feature file channel mismatch");
    return fm;
  }

 private:
  std::filesystem::path root_;
  int channels_;
};

inline void write_feature_map(const std::filesystem::path& root, int frame, const FeatureMap& fm) {
  io::write_grid(FileFeatureProvider::path_for(root, frame, fm.camera, fm.scale), fm.grid);
}

// Image features the network consumes: the provider features plus a smooth
// code of the camera depth (4 channels; zero where the ray hits nothing).
inline constexpr int kDepthCodeChannels = 4;

inline FeatureGrid backbone_features(const ProceduralFeatureProvider& provider, const Frame& frame, int cam_index,
                                     double scale) {
  const auto base = provider.compute_features(frame, cam_index, scale);
  const auto& cam = frame.cameras.at(static_cast<std::size_t>(cam_index));
  const FrameGeometry geo = frame_geometry(frame);
  const std::size_t cf = base.grid.channels;
  FeatureGrid out(base.grid.height, base.grid.width, cf + kDepthCodeChannels);
  for (std::size_t i = 0; i < out.height; ++i)
    for (std::size_t j = 0; j < out.width; ++j) {
      auto dst = out.cell(i, j);
      auto src = base.grid.cell(i, j);
      std::copy(src.begin(), src.end(), dst.begin());
      const double u = (static_cast<double>(j) + 0.5) / scale, v = (static_cast<double>(i) + 0.5) / scale;
      const Vec3 dir = pixel_ray(cam, u, v);
      const RayHit hit = cast_ray(geo, cam.center_in_ego(), dir);
      if (hit.kind == SurfaceKind::kNone) continue;
      const double depth = cam.camera_from_ego.apply(hit.point).z();
      const double x = std::log(std::max(depth, 0.5)) / std::log(60.0);
      dst[cf + 0] = std::sin(kPi * x);
      dst[cf + 1] = std::cos(kPi * x);
      dst[cf + 2] = std::sin(2.0 * kPi * x);
      dst[cf + 3] = std::cos(2.0 * kPi * x);
    }
  return out;
}

}  // namespace bev
