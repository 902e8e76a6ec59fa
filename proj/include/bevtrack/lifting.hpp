#pragma once

// Camera-to-BEV lifting: per-pixel depth distribution, outer product with the
// PV features, sum-pooling of the frustum samples into BEV cells, and a small
// residual convolutional BEV encoder.

#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "bevtrack/error.hpp"
#include "bevtrack/featprov.hpp"
#include "bevtrack/geometry.hpp"
#include "bevtrack/numerics/autodiff.hpp"
#include "bevtrack/numerics/params.hpp"
#include "bevtrack/scene/raycast.hpp"
#include "bevtrack/scene/types.hpp"

namespace bev {

struct LiftConfig {
  int depth_bins = 32;
  double depth_min = 1.0, depth_max = 60.0;
  double scale = 0.125;  // feature scale lifted to BEV
  int bev_channels = 16;
  int encoder_blocks = 2;
  int depth_hidden = 32;

  void validate() const {
    if (depth_bins < 2) throw DomainError("need at least 2 depth bins");
    if (!(depth_max > depth_min && depth_min > 0.0)) throw DomainError("bad depth range");
  }
  double bin_width() const { return (depth_max - depth_min) / depth_bins; }
  double bin_center(int k) const { return depth_min + (k + 0.5) * bin_width(); }
  std::optional<int> bin_of(double depth) const {
    if (!(depth >= depth_min && depth < depth_max)) return std::nullopt;
    return std::min(depth_bins - 1, static_cast<int>((depth - depth_min) / bin_width()));
  }
};

// Optional refinement of the depth distribution (identity by default).
using DepthRefiner = std::function<ad::Var(const ad::Var& probs)>;

// 3D sample position and BEV cell of every (camera, pixel, bin) frustum
// sample, pixel-major within a camera.
struct FrustumGeometry {
  std::size_t cameras = 0, height = 0, width = 0, bins = 0;
  std::vector<Vec3> positions;
  std::vector<int> cells;  // -1 outside the grid

  std::size_t pixels() const { return cameras * height * width; }
};

inline FrustumGeometry frustum_geometry(const std::vector<CameraModel>& cams, const LiftConfig& cfg,
                                        const BevGridSpec& grid) {
  cfg.validate();
  FrustumGeometry fg;
  fg.cameras = cams.size();
  fg.bins = static_cast<std::size_t>(cfg.depth_bins);
  if (cams.empty()) return fg;
  fg.height = scaled_extent(cams[0].height, cfg.scale);
  fg.width = scaled_extent(cams[0].width, cfg.scale);
  fg.positions.reserve(fg.pixels() * fg.bins);
  for (const auto& cam : cams) {
    if (scaled_extent(cam.height, cfg.scale) != fg.height || scaled_extent(cam.width, cfg.scale) != fg.width)
      throw DimensionError("all cameras must share the image size");
    for (std::size_t i = 0; i < fg.height; ++i)
      for (std::size_t j = 0; j < fg.width; ++j)
        for (int k = 0; k < cfg.depth_bins; ++k) {
          const Vec3 p = unproject((j + 0.5) / cfg.scale, (i + 0.5) / cfg.scale, cfg.bin_center(k), cam);
          fg.positions.push_back(p);
          auto c = grid.cell_index(p.x(), p.y());
          fg.cells.push_back(c ? static_cast<int>(*c) : -1);
        }
  }
  return fg;
}

namespace ad {

// Outer product per pixel: out[p, d, c] = probs[p, d] * feats[p, c], shaped [P*D, C].
inline Var lift(const Var& probs, const Var& feats) {
  Tape& t = detail::same_tape(probs, feats);
  if (probs.shape().size() != 2 || feats.shape().size() != 2 || probs.dim(0) != feats.dim(0))
    throw DimensionError("lift expects [P,D] and [P,C], got " + shape_str(probs.shape()) + " and " +
                         shape_str(feats.shape()));
  const std::size_t np = probs.dim(0), nd = probs.dim(1), nc = feats.dim(1);
  auto pv = probs.value(), fv = feats.value();
  std::vector<double> out(np * nd * nc);
  for (std::size_t p = 0; p < np; ++p)
    for (std::size_t d = 0; d < nd; ++d) {
      const double w = pv[p * nd + d];
      double* o = out.data() + (p * nd + d) * nc;
      for (std::size_t c = 0; c < nc; ++c) o[c] = w * fv[p * nc + c];
    }
  Tape* tp = &t;
  Var pi = probs, fi = feats;
  return t.make({np * nd, nc}, std::move(out), probs.requires_grad() || feats.requires_grad(),
                [tp, pi, fi, np, nd, nc](std::span<const double> g) {
                  auto pv = pi.value(), fv = fi.value();
                  double* gp = tp->grad_ptr(pi);
                  double* gf = tp->grad_ptr(fi);
                  for (std::size_t p = 0; p < np; ++p)
                    for (std::size_t d = 0; d < nd; ++d) {
                      const double* go = g.data() + (p * nd + d) * nc;
                      if (gp) {
                        double s = 0.0;
                        for (std::size_t c = 0; c < nc; ++c) s += go[c] * fv[p * nc + c];
                        gp[p * nd + d] += s;
                      }
                      if (gf) {
                        const double w = pv[p * nd + d];
                        for (std::size_t c = 0; c < nc; ++c) gf[p * nc + c] += w * go[c];
                      }
                    }
                });
}

// Scatter-add of frustum samples [N, C] into a res x res x C grid; cell -1 drops.
// Samples are added in index order.
inline Var bev_pool(const Var& samples, const std::vector<int>& cells, std::size_t res) {
  const std::size_t n = detail::rows(samples), c = detail::cols(samples);
  if (cells.size() != n) throw DimensionError("bev_pool: one cell per sample expected");
  auto sv = samples.value();
  std::vector<double> out(res * res * c, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    if (cells[i] < 0) continue;
    double* o = out.data() + static_cast<std::size_t>(cells[i]) * c;
    for (std::size_t k = 0; k < c; ++k) o[k] += sv[i * c + k];
  }
  Tape& t = *samples.tape();
  Tape* tp = &t;
  Var si = samples;
  return t.make({res, res, c}, std::move(out), samples.requires_grad(), [tp, si, cells, c](std::span<const double> g) {
    double* gs = tp->grad_ptr(si);
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (cells[i] < 0) continue;
      const double* go = g.data() + static_cast<std::size_t>(cells[i]) * c;
      for (std::size_t k = 0; k < c; ++k) gs[i * c + k] += go[k];
    }
  });
}

// 3x3 convolution, stride 1, zero padding. x [H,W,Ci], w [3,3,Ci,Co], b [Co].
inline Var conv3x3(const Var& x, const Var& w, const Var& b) {
  Tape& t = detail::same_tape(x, w);
  if (x.shape().size() != 3 || w.shape().size() != 4 || w.dim(0) != 3 || w.dim(1) != 3 || w.dim(2) != x.dim(2) ||
      b.size() != w.dim(3))
    throw DimensionError("conv3x3 shape mismatch: x " + shape_str(x.shape()) + ", w " + shape_str(w.shape()));
  const std::size_t h = x.dim(0), wd = x.dim(1), ci = x.dim(2), co = w.dim(3);
  auto xv = x.value(), wv = w.value(), bv = b.value();
  std::vector<double> out(h * wd * co);
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < wd; ++c) {
      double* o = out.data() + (r * wd + c) * co;
      for (std::size_t q = 0; q < co; ++q) o[q] = bv[q];
      for (int dr = -1; dr <= 1; ++dr)
        for (int dc = -1; dc <= 1; ++dc) {
          const auto rr = static_cast<std::ptrdiff_t>(r) + dr, cc = static_cast<std::ptrdiff_t>(c) + dc;
          if (rr < 0 || cc < 0 || rr >= static_cast<std::ptrdiff_t>(h) || cc >= static_cast<std::ptrdiff_t>(wd)) continue;
          const double* xi = xv.data() + (static_cast<std::size_t>(rr) * wd + static_cast<std::size_t>(cc)) * ci;
          const double* wk = wv.data() + static_cast<std::size_t>((dr + 1) * 3 + (dc + 1)) * ci * co;
          for (std::size_t p = 0; p < ci; ++p) {
            const double xp = xi[p];
            if (xp == 0.0) continue;
            const double* wr = wk + p * co;
            for (std::size_t q = 0; q < co; ++q) o[q] += xp * wr[q];
          }
        }
    }
  const bool rg = x.requires_grad() || w.requires_grad() || b.requires_grad();
  Tape* tp = &t;
  Var xi = x, wi = w, bi = b;
  return t.make({h, wd, co}, std::move(out), rg, [tp, xi, wi, bi, h, wd, ci, co](std::span<const double> g) {
    auto xv = xi.value(), wv = wi.value();
    double* gx = tp->grad_ptr(xi);
    double* gw = tp->grad_ptr(wi);
    double* gb = tp->grad_ptr(bi);
    for (std::size_t r = 0; r < h; ++r)
      for (std::size_t c = 0; c < wd; ++c) {
        const double* go = g.data() + (r * wd + c) * co;
        if (gb)
          for (std::size_t q = 0; q < co; ++q) gb[q] += go[q];
        for (int dr = -1; dr <= 1; ++dr)
          for (int dc = -1; dc <= 1; ++dc) {
            const auto rr = static_cast<std::ptrdiff_t>(r) + dr, cc = static_cast<std::ptrdiff_t>(c) + dc;
            if (rr < 0 || cc < 0 || rr >= static_cast<std::ptrdiff_t>(h) || cc >= static_cast<std::ptrdiff_t>(wd))
              continue;
            const std::size_t xoff = (static_cast<std::size_t>(rr) * wd + static_cast<std::size_t>(cc)) * ci;
            const std::size_t woff = static_cast<std::size_t>((dr + 1) * 3 + (dc + 1)) * ci * co;
            for (std::size_t p = 0; p < ci; ++p) {
              const double* wr = wv.data() + woff + p * co;
              double acc = 0.0;
              for (std::size_t q = 0; q < co; ++q) acc += go[q] * wr[q];
              if (gx) gx[xoff + p] += acc;
              if (gw) {
                const double xp = xv[xoff + p];
                if (xp != 0.0)
                  for (std::size_t q = 0; q < co; ++q) gw[woff + p * co + q] += xp * go[q];
              }
            }
          }
      }
  });
}

}  // namespace ad

// ---- learned parts ---------------------------------------------------------

inline void add_lifting_params(ParamSet& ps, const LiftConfig& cfg, int pv_channels, std::mt19937_64& rng) {
  const auto c = static_cast<std::size_t>(pv_channels), hd = static_cast<std::size_t>(cfg.depth_hidden);
  const auto d = static_cast<std::size_t>(cfg.depth_bins), cb = static_cast<std::size_t>(cfg.bev_channels);
  ps.add("depth.w1", glorot({c, hd}, rng));
  ps.add("depth.b1", Tensor({hd}));
  ps.add("depth.w2", glorot({hd, d}, rng));
  ps.add("depth.b2", Tensor({d}));
  ps.add("depth.aux_w", glorot({c, 1}, rng));
  ps.add("depth.aux_b", Tensor({1}, 10.0));
  ps.add("lift.w", glorot({c, cb}, rng));
  ps.add("lift.b", Tensor({cb}));
  for (int blk = 0; blk < cfg.encoder_blocks; ++blk)
    for (int k = 1; k <= 2; ++k) {
      const std::string n = "bev.block" + std::to_string(blk) + ".conv" + std::to_string(k);
      ps.add(n + ".w", glorot({3, 3, cb, cb}, rng, 0.5));
      ps.add(n + ".b", Tensor({cb}));
    }
}

// Per-pixel depth distribution from PV features [P, C]: 2-layer perceptron + softmax.
inline ad::Var depth_head(const BoundParams& p, const ad::Var& pv) {
  auto h = ad::relu(ad::linear(pv, p["depth.w1"], p["depth.b1"]));
  return ad::softmax(ad::linear(h, p["depth.w2"], p["depth.b2"]));
}

// Auxiliary scalar depth regression from PV features, [P, 1].
inline ad::Var aux_depth_head(const BoundParams& p, const ad::Var& pv) {
  return ad::linear(pv, p["depth.aux_w"], p["depth.aux_b"]);
}

// x + conv2(relu(conv1(x))) per block.
inline ad::Var bev_encode(const BoundParams& p, const ad::Var& bev, int blocks) {
  ad::Var x = bev;
  for (int blk = 0; blk < blocks; ++blk) {
    const std::string n = "bev.block" + std::to_string(blk);
    auto h = ad::relu(ad::conv3x3(x, p[n + ".conv1.w"], p[n + ".conv1.b"]));
    x = ad::add(x, ad::conv3x3(h, p[n + ".conv2.w"], p[n + ".conv2.b"]));
  }
  return x;
}

// LiDAR depth supervision at the lifting scale: nearest visible return per
// feature-map pixel. Pixel indices follow FrustumGeometry ordering.
struct DepthTargets {
  std::vector<std::size_t> pixels;
  std::vector<int> bins;
  std::vector<double> depths;
};

inline DepthTargets depth_targets(const Frame& frame, const LiftConfig& cfg) {
  DepthTargets out;
  if (frame.cameras.empty()) return out;
  const auto geo = frame_geometry(frame);
  const std::size_t hs = scaled_extent(frame.cameras[0].height, cfg.scale);
  const std::size_t ws = scaled_extent(frame.cameras[0].width, cfg.scale);
  for (std::size_t c = 0; c < frame.cameras.size(); ++c) {
    const auto& cam = frame.cameras[c];
    std::vector<double> nearest(hs * ws, std::numeric_limits<double>::infinity());
    for (const auto& p : frame.lidar_points) {
      auto pr = project(p, cam);
      if (!pr || !cfg.bin_of(pr->depth) || !visible_from(geo, cam, p)) continue;
      const auto col = static_cast<std::size_t>(pr->u * cfg.scale), row = static_cast<std::size_t>(pr->v * cfg.scale);
      if (row >= hs || col >= ws) continue;
      double& n = nearest[row * ws + col];
      n = std::min(n, pr->depth);
    }
    for (std::size_t i = 0; i < nearest.size(); ++i) {
      if (!std::isfinite(nearest[i])) continue;
      out.pixels.push_back(c * hs * ws + i);
      out.bins.push_back(*cfg.bin_of(nearest[i]));
      out.depths.push_back(nearest[i]);
    }
  }
  return out;
}

}  // namespace bev
