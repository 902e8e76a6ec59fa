#pragma once

// Sparse query decoder: 11-D anchors with an anchor encoder, box keypoints,
// BEV and PV deformable aggregation applied residually, temporal
// cross-attention, self-attention, FFN and iterative anchor refinement.

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "bevtrack/error.hpp"
#include "bevtrack/geometry.hpp"
#include "bevtrack/numerics/autodiff.hpp"
#include "bevtrack/numerics/bilinear.hpp"
#include "bevtrack/numerics/params.hpp"
#include "bevtrack/scene/types.hpp"

namespace bev {

inline constexpr int kAnchorDim = 11;
enum AnchorField : int { kAX = 0, kAY, kAZ, kALogW, kALogH, kALogL, kASin, kACos, kAVx, kAVy, kAVz };
using Anchor = std::array<double, kAnchorDim>;

inline Anchor anchor_from_box(const Box3& b, const Vec3& velocity) {
  return {b.center.x(), b.center.y(), b.center.z(), std::log(b.width), std::log(b.height), std::log(b.length),
          std::sin(b.yaw), std::cos(b.yaw), velocity.x(), velocity.y(), velocity.z()};
}
inline Anchor anchor_from_gt(const GtBox& g) { return anchor_from_box(g.box(), g.velocity); }

inline Box3 box_from_anchor(const Anchor& a) {
  return {Vec3(a[kAX], a[kAY], a[kAZ]), std::exp(a[kALogW]), std::exp(a[kALogL]), std::exp(a[kALogH]),
          std::atan2(a[kASin], a[kACos])};
}
inline Vec3 anchor_velocity(const Anchor& a) { return {a[kAVx], a[kAVy], a[kAVz]}; }

struct DecoderConfig {
  int n_queries = 24;
  int n_temporal = 16;
  int temporal_blocks = 5;
  int embed = 32;
  int learned_keypoints = 6;
  int heads = 1;
  int n_classes = kNumClasses;

  static constexpr int kFixedKeypoints = 7;
  int keypoints() const { return kFixedKeypoints + learned_keypoints; }
  int layers() const { return 1 + temporal_blocks; }
  void validate() const {
    if (n_temporal > n_queries) throw DomainError("n_temporal must not exceed n_queries");
    if (n_queries < 1 || embed < 1 || temporal_blocks < 0) throw DomainError("bad decoder config");
    if (embed % heads != 0) throw DomainError("embed must be divisible by heads");
  }
};

// Box centre and six face centres in unit-box coordinates.
inline constexpr std::array<std::array<double, 3>, 7> kFixedKeypointOffsets = {{
    {0, 0, 0}, {0.5, 0, 0}, {-0.5, 0, 0}, {0, 0.5, 0}, {0, -0.5, 0}, {0, 0, 0.5}, {0, 0, -0.5}}};

// Per-feature scaling of anchors before the encoder perceptron.
inline const std::vector<double>& anchor_input_scale() {
  static const std::vector<double> s = {1.0 / 8, 1.0 / 8, 1.0, 1, 1, 1, 1, 1, 0.5, 0.5, 0.5};
  return s;
}

namespace ad {

// Ego-frame points of unit-box offsets: out[m*K + k] = centre_m + R(yaw_m) (u_mk * (l, w, h)_m).
// anchors [M, 11], unit [M, K, 3] -> [M*K, 3].
inline Var box_points(const Var& anchors, const Var& unit) {
  Tape& t = detail::same_tape(anchors, unit);
  if (anchors.shape().size() != 2 || anchors.dim(1) != kAnchorDim || unit.shape().size() != 3 ||
      unit.dim(0) != anchors.dim(0) || unit.dim(2) != 3)
    throw DimensionError("box_points expects [M,11] and [M,K,3]");
  const std::size_t m = anchors.dim(0), k = unit.dim(1);
  auto av = anchors.value(), uv = unit.value();
  std::vector<double> out(m * k * 3);
  for (std::size_t i = 0; i < m; ++i) {
    const double* a = av.data() + i * kAnchorDim;
    const double l = std::exp(a[kALogL]), w = std::exp(a[kALogW]), h = std::exp(a[kALogH]);
    const double s = a[kASin], c = a[kACos];
    for (std::size_t j = 0; j < k; ++j) {
      const double* u = uv.data() + (i * k + j) * 3;
      const double lx = u[0] * l, ly = u[1] * w, lz = u[2] * h;
      double* o = out.data() + (i * k + j) * 3;
      o[0] = a[kAX] + c * lx - s * ly;
      o[1] = a[kAY] + s * lx + c * ly;
      o[2] = a[kAZ] + lz;
    }
  }
  Tape* tp = &t;
  Var ai = anchors, ui = unit;
  return t.make({m * k, 3}, std::move(out), anchors.requires_grad() || unit.requires_grad(),
                [tp, ai, ui, m, k](std::span<const double> g) {
                  auto av = ai.value(), uv = ui.value();
                  double* ga = tp->grad_ptr(ai);
                  double* gu = tp->grad_ptr(ui);
                  for (std::size_t i = 0; i < m; ++i) {
                    const double* a = av.data() + i * kAnchorDim;
                    const double l = std::exp(a[kALogL]), w = std::exp(a[kALogW]), h = std::exp(a[kALogH]);
                    const double s = a[kASin], c = a[kACos];
                    for (std::size_t j = 0; j < k; ++j) {
                      const double* u = uv.data() + (i * k + j) * 3;
                      const double* go = g.data() + (i * k + j) * 3;
                      const double lx = u[0] * l, ly = u[1] * w, lz = u[2] * h;
                      const double dlx = go[0] * c + go[1] * s;
                      const double dly = -go[0] * s + go[1] * c;
                      const double dlz = go[2];
                      if (ga) {
                        double* gr = ga + i * kAnchorDim;
                        gr[kAX] += go[0];
                        gr[kAY] += go[1];
                        gr[kAZ] += go[2];
                        gr[kASin] += -go[0] * ly + go[1] * lx;
                        gr[kACos] += go[0] * lx + go[1] * ly;
                        gr[kALogL] += dlx * lx;
                        gr[kALogW] += dly * ly;
                        gr[kALogH] += dlz * lz;
                      }
                      if (gu) {
                        double* gr = gu + (i * k + j) * 3;
                        gr[0] += dlx * l;
                        gr[1] += dly * w;
                        gr[2] += dlz * h;
                      }
                    }
                  }
                });
}

struct ProjectResult {
  Var pixels;                       // [N, 2] = (u, v), zero where invalid
  std::vector<std::uint8_t> valid;  // in front of the camera and inside the image
};

inline ProjectResult project_points(const Var& points, const CameraModel& cam) {
  if (points.shape().size() != 2 || points.dim(1) != 3) throw DimensionError("project_points expects [N,3]");
  const std::size_t n = points.dim(0);
  auto pv = points.value();
  ProjectResult res;
  res.valid.assign(n, 0);
  std::vector<double> out(n * 2, 0.0);
  const Mat3& r = cam.camera_from_ego.rotation;
  const auto& k = cam.intrinsics;
  std::vector<Vec3> pcs(n);
  for (std::size_t i = 0; i < n; ++i) {
    const Vec3 p(pv[3 * i], pv[3 * i + 1], pv[3 * i + 2]);
    auto pr = project(p, cam);
    pcs[i] = cam.camera_from_ego.apply(p);
    if (!pr) continue;
    res.valid[i] = 1;
    out[2 * i] = pr->u;
    out[2 * i + 1] = pr->v;
  }
  Tape& t = *points.tape();
  Tape* tp = &t;
  Var pi = points;
  auto valid = res.valid;
  res.pixels = t.make({n, 2}, std::move(out), points.requires_grad(), [tp, pi, valid, pcs, r, k](std::span<const double> g) {
    double* gp = tp->grad_ptr(pi);
    for (std::size_t i = 0; i < valid.size(); ++i) {
      if (!valid[i]) continue;
      const Vec3& pc = pcs[i];
      const double iz = 1.0 / pc.z();
      // d(u, v)/d(pc), then chain through pc = R p + t
      const Vec3 du(k.fx * iz, 0.0, -k.fx * pc.x() * iz * iz);
      const Vec3 dv(0.0, k.fy * iz, -k.fy * pc.y() * iz * iz);
      const Vec3 gpc = g[2 * i] * du + g[2 * i + 1] * dv;
      const Vec3 gw = r.transpose() * gpc;
      for (int a = 0; a < 3; ++a) gp[3 * i + static_cast<std::size_t>(a)] += gw[a];
    }
  });
  return res;
}

// Puts (sin, cos) of every anchor row back on the unit circle. Rows already on
// it (to rounding) are passed through unchanged so the map is idempotent.
inline Var normalize_yaw(const Var& anchors) {
  if (anchors.shape().size() != 2 || anchors.dim(1) != kAnchorDim) throw DimensionError("normalize_yaw expects [M,11]");
  const std::size_t m = anchors.dim(0);
  auto av = anchors.value();
  std::vector<double> out(av.begin(), av.end());
  for (std::size_t i = 0; i < m; ++i) {
    double* a = out.data() + i * kAnchorDim;
    const double n = std::hypot(a[kASin], a[kACos]);
    if (std::fabs(n - 1.0) <= 4e-16) continue;
    a[kASin] /= n;
    a[kACos] /= n;
  }
  Tape& t = *anchors.tape();
  Tape* tp = &t;
  Var ai = anchors;
  return t.make({m, kAnchorDim}, std::move(out), anchors.requires_grad(), [tp, ai, m](std::span<const double> g) {
    auto av = ai.value();
    double* ga = tp->grad_ptr(ai);
    for (std::size_t i = 0; i < m; ++i) {
      const double* a = av.data() + i * kAnchorDim;
      const double* go = g.data() + i * kAnchorDim;
      double* gr = ga + i * kAnchorDim;
      for (int j = 0; j < kAnchorDim; ++j)
        if (j != kASin && j != kACos) gr[j] += go[j];
      const double s = a[kASin], c = a[kACos];
      const double n = std::hypot(s, c), n3 = n * n * n;
      // Jacobian of v / |v|: (I |v|^2 - v v^T) / |v|^3
      gr[kASin] += (go[kASin] * c * c - go[kACos] * s * c) / n3;
      gr[kACos] += (go[kACos] * s * s - go[kASin] * s * c) / n3;
    }
  });
}

}  // namespace ad

// ---- parameters ------------------------------------------------------------

inline std::string block_prefix(int layer) { return "dec.b" + std::to_string(layer) + "."; }

inline void add_linear(ParamSet& ps, const std::string& name, std::size_t in, std::size_t out, std::mt19937_64& rng,
                       double gain = 1.0, double bias = 0.0) {
  ps.add(name + "_w", glorot({in, out}, rng, gain));
  ps.add(name + "_b", Tensor({out}, bias));
}

inline ad::Var apply_linear(const BoundParams& p, const std::string& name, const ad::Var& x) {
  return ad::linear(x, p[name + "_w"], p[name + "_b"]);
}

// Decoder parameters. `views` x `scales` PV sample slots per keypoint;
// bev_channels = 0 omits the BEV aggregation weights.
inline void add_decoder_params(ParamSet& ps, const DecoderConfig& cfg, int bev_channels, int views, int scales,
                               std::mt19937_64& rng) {
  cfg.validate();
  const auto c = static_cast<std::size_t>(cfg.embed), k = static_cast<std::size_t>(cfg.keypoints());
  add_linear(ps, "enc.l1", kAnchorDim, c, rng);
  add_linear(ps, "enc.l2", c, c, rng);
  for (int layer = 0; layer < cfg.layers(); ++layer) {
    const std::string b = block_prefix(layer);
    if (layer > 0)
      for (const char* att : {"tca", "sa"}) {
        for (const char* m : {".q", ".k", ".v"}) add_linear(ps, b + att + m, c, c, rng);
        add_linear(ps, b + att + ".o", c, c, rng, 0.5);
      }
    add_linear(ps, b + "kp", c, 3 * static_cast<std::size_t>(cfg.learned_keypoints), rng, 0.1);
    if (bev_channels > 0) {
      add_linear(ps, b + "bev.logits", c, k, rng, 0.1);
      add_linear(ps, b + "bev.out", static_cast<std::size_t>(bev_channels), c, rng);
    }
    if (views > 0 && scales > 0) {
      add_linear(ps, b + "pv.logits", c, k * static_cast<std::size_t>(views * scales), rng, 0.1);
      add_linear(ps, b + "pv.out", c, c, rng);
    }
    add_linear(ps, b + "ffn.l1", c, 2 * c, rng);
    add_linear(ps, b + "ffn.l2", 2 * c, c, rng, 0.5);
    add_linear(ps, b + "ref.l1", c, c, rng);
    add_linear(ps, b + "ref.l2", c, kAnchorDim, rng, 0.1);
    add_linear(ps, b + "cls", c, static_cast<std::size_t>(cfg.n_classes), rng, 0.1, -2.0);
    add_linear(ps, b + "qual", c, 2, rng, 0.1);
  }
}

// Every parameter whose output is added residually to the query state.
inline void zero_output_projections(ParamSet& ps) {
  for (std::size_t i = 0; i < ps.size(); ++i) {
    const auto& n = ps.names()[i];
    auto ends = [&](const std::string& s) { return n.size() >= s.size() && n.compare(n.size() - s.size(), s.size(), s) == 0; };
    if (ends(".o_w") || ends(".o_b") || ends("bev.out_w") || ends("bev.out_b") || ends("pv.out_w") ||
        ends("pv.out_b") || ends("ffn.l2_w") || ends("ffn.l2_b") || ends("ref.l2_w") || ends("ref.l2_b"))
      std::fill(ps.values()[i].data().begin(), ps.values()[i].data().end(), 0.0);
  }
}

// Grid of initial anchors over the BEV range.
inline std::vector<Anchor> grid_anchors(int n, const BevGridSpec& grid) {
  const int side = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(n))));
  std::vector<Anchor> out;
  for (int i = 0; i < side && static_cast<int>(out.size()) < n; ++i)
    for (int j = 0; j < side && static_cast<int>(out.size()) < n; ++j) {
      const double x = grid.x_min + (i + 0.5) * (grid.x_max - grid.x_min) / side;
      const double y = grid.y_min + (j + 0.5) * (grid.y_max - grid.y_min) / side;
      out.push_back({x, y, 0.8, std::log(1.2), std::log(1.6), std::log(2.5), 0.0, 1.0, 0.0, 0.0, 0.0});
    }
  return out;
}

// ---- operations --------------------------------------------------------------

inline ad::Var anchors_var(ad::Tape& t, const std::vector<Anchor>& a) {
  std::vector<double> v;
  v.reserve(a.size() * kAnchorDim);
  for (const auto& r : a) v.insert(v.end(), r.begin(), r.end());
  return t.constant({a.size(), static_cast<std::size_t>(kAnchorDim)}, std::move(v));
}

inline Anchor anchor_row(const ad::Var& anchors, std::size_t i) {
  Anchor a;
  std::copy_n(anchors.value().begin() + static_cast<std::ptrdiff_t>(i * kAnchorDim), kAnchorDim, a.begin());
  return a;
}

// Anchor embedding [M, C]: two-layer perceptron on the scaled 11-D vector.
inline ad::Var encode_anchor(const BoundParams& p, const ad::Var& anchors) {
  auto x = ad::scale_cols(anchors, anchor_input_scale());
  return apply_linear(p, "enc.l2", ad::relu(apply_linear(p, "enc.l1", x)));
}

// Fixed + learned keypoints of every anchor, [M*K, 3] in ego coordinates.
inline ad::Var gen_keypoints(const BoundParams& p, const std::string& prefix, const ad::Var& anchors,
                             const ad::Var& features, const DecoderConfig& cfg) {
  ad::Tape& t = *anchors.tape();
  const std::size_t m = anchors.dim(0);
  std::vector<double> fixed;
  fixed.reserve(m * 21);
  for (std::size_t i = 0; i < m; ++i)
    for (const auto& o : kFixedKeypointOffsets) fixed.insert(fixed.end(), o.begin(), o.end());
  std::vector<ad::Var> parts = {t.constant({m, 21}, std::move(fixed))};
  if (cfg.learned_keypoints > 0) parts.push_back(ad::scale(ad::tanh(apply_linear(p, prefix + "kp", features)), 0.5));
  auto unit = ad::reshape(ad::concat(parts, 1), {m, static_cast<std::size_t>(cfg.keypoints()), 3});
  return ad::box_points(anchors, unit);
}

struct AggregationResult {
  ad::Var features;    // f + projection of the aggregate
  ad::Var weights;     // [M, slots]
  ad::Var aggregated;  // [M, C_in] before the output projection
  std::vector<std::uint8_t> valid;
};

// Samples the BEV grid at each keypoint's (x, y) and fuses with softmax weights.
inline AggregationResult bev_deform_agg(const BoundParams& p, const std::string& prefix, const ad::Var& f,
                                        const ad::Var& q, const ad::Var& keypoints, const ad::Var& bev,
                                        const BevGridSpec& grid) {
  const std::size_t m = f.dim(0), nk = keypoints.dim(0) / m, cb = bev.dim(2);
  auto xs = ad::slice_cols(keypoints, 0, 1), ys = ad::slice_cols(keypoints, 1, 2);
  auto u = ad::add_scalar(ad::scale(ys, 1.0 / grid.cell_y()), -grid.y_min / grid.cell_y() - 0.5);
  auto v = ad::add_scalar(ad::scale(xs, 1.0 / grid.cell_x()), -grid.x_min / grid.cell_x() - 0.5);
  auto s = ad::sample_bilinear(bev, ad::concat({u, v}, 1));
  AggregationResult r;
  r.valid = s.valid;
  r.weights = ad::softmax(apply_linear(p, prefix + "bev.logits", q), &r.valid);
  r.aggregated = ad::weighted_sum(r.weights, ad::reshape(s.values, {m, nk, cb}));
  r.features = ad::add(f, apply_linear(p, prefix + "bev.out", r.aggregated));
  return r;
}

// Projects keypoints into every camera, samples every scale, and fuses all
// (view, scale, keypoint) samples with one softmax per query. pv[v][s] is [Hs, Ws, C].
inline AggregationResult pv_deform_agg(const BoundParams& p, const std::string& prefix, const ad::Var& f,
                                       const ad::Var& q, const ad::Var& keypoints,
                                       const std::vector<std::vector<ad::Var>>& pv,
                                       const std::vector<CameraModel>& cams, const std::vector<double>& scales) {
  const std::size_t m = f.dim(0), nk = keypoints.dim(0) / m;
  if (pv.size() != cams.size()) throw DimensionError("pv_deform_agg: one feature pyramid per camera expected");
  const std::size_t c = pv.empty() ? f.dim(1) : pv[0][0].dim(2);
  std::vector<ad::Var> blocks;
  std::vector<std::uint8_t> valid_vs;  // [V*S][M*K]
  for (std::size_t vi = 0; vi < cams.size(); ++vi) {
    auto proj = ad::project_points(keypoints, cams[vi]);
    for (std::size_t si = 0; si < scales.size(); ++si) {
      auto coords = ad::add_scalar(ad::scale(proj.pixels, scales[si]), -0.5);
      auto s = ad::sample_bilinear(pv[vi][si], coords);
      for (std::size_t i = 0; i < s.valid.size(); ++i) valid_vs.push_back(s.valid[i] && proj.valid[i]);
      blocks.push_back(ad::reshape(s.values, {m, nk * c}));
    }
  }
  const std::size_t slots = cams.size() * scales.size() * nk;
  AggregationResult r;
  r.valid.assign(m * slots, 0);
  // reorder flags to [M][(view, scale, keypoint)]
  for (std::size_t b = 0; b < cams.size() * scales.size(); ++b)
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t k = 0; k < nk; ++k) r.valid[i * slots + b * nk + k] = valid_vs[b * m * nk + i * nk + k];
  r.weights = ad::softmax(apply_linear(p, prefix + "pv.logits", q), &r.valid);
  auto values = ad::reshape(ad::concat(blocks, 1), {m, slots, c});
  r.aggregated = ad::weighted_sum(r.weights, values);
  r.features = ad::add(f, apply_linear(p, prefix + "pv.out", r.aggregated));
  return r;
}

// Scaled dot-product attention with `heads` heads; returns the output projection.
inline ad::Var attention(const BoundParams& p, const std::string& name, const ad::Var& query, const ad::Var& key,
                         const ad::Var& value, int heads) {
  auto qq = apply_linear(p, name + ".q", query);
  auto kk = apply_linear(p, name + ".k", key);
  auto vv = apply_linear(p, name + ".v", value);
  const std::size_t c = qq.dim(1), dh = c / static_cast<std::size_t>(heads);
  std::vector<ad::Var> outs;
  for (int h = 0; h < heads; ++h) {
    const std::size_t b = static_cast<std::size_t>(h) * dh;
    auto qh = heads == 1 ? qq : ad::slice_cols(qq, b, b + dh);
    auto kh = heads == 1 ? kk : ad::slice_cols(kk, b, b + dh);
    auto vh = heads == 1 ? vv : ad::slice_cols(vv, b, b + dh);
    auto att = ad::softmax(ad::scale(ad::matmul(qh, ad::transpose(kh)), 1.0 / std::sqrt(static_cast<double>(dh))));
    outs.push_back(ad::matmul(att, vh));
  }
  auto o = heads == 1 ? outs[0] : ad::concat(outs, 1);
  return apply_linear(p, name + ".o", o);
}

struct RefineResult {
  ad::Var anchors;  // [M, 11]
  ad::Var cls;      // [M, classes] logits
  ad::Var quality;  // [M, 2] logits: centerness, yawness
  ad::Var raw;      // anchors + regression before the unit-circle projection
};

inline RefineResult refine(const BoundParams& p, const std::string& prefix, const ad::Var& anchors,
                           const ad::Var& q) {
  auto reg = apply_linear(p, prefix + "ref.l2", ad::relu(apply_linear(p, prefix + "ref.l1", q)));
  auto raw = ad::add(anchors, reg);
  return {ad::normalize_yaw(raw), apply_linear(p, prefix + "cls", q), apply_linear(p, prefix + "qual", q), raw};
}

inline std::vector<double> confidences(const ad::Var& cls_logits) {
  const std::size_t m = cls_logits.dim(0), c = cls_logits.dim(1);
  std::vector<double> out(m);
  auto v = cls_logits.value();
  for (std::size_t i = 0; i < m; ++i) {
    const double mx = *std::max_element(v.begin() + static_cast<std::ptrdiff_t>(i * c),
                                        v.begin() + static_cast<std::ptrdiff_t>((i + 1) * c));
    out[i] = 1.0 / (1.0 + std::exp(-mx));
  }
  return out;
}

inline int argmax_class(const ad::Var& cls_logits, std::size_t i) {
  const std::size_t c = cls_logits.dim(1);
  auto v = cls_logits.value();
  auto b = v.begin() + static_cast<std::ptrdiff_t>(i * c);
  return static_cast<int>(std::max_element(b, b + static_cast<std::ptrdiff_t>(c)) - b);
}

// Indices of the k largest values, descending; ties by ascending index.
inline std::vector<std::size_t> top_k(const std::vector<double>& v, std::size_t k) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] > v[b]; });
  idx.resize(std::min(k, idx.size()));
  return idx;
}

// Feature sources for one frame.
struct DecodeInputs {
  ad::Var bev;                              // encoded BEV grid [R, R, Cb]; invalid when BEV is off
  std::vector<std::vector<ad::Var>> pv;     // [view][scale]; empty when PV is off
  const std::vector<CameraModel>* cameras = nullptr;
  std::vector<double> scales;
  BevGridSpec grid;
};

// Queries carried over from the previous frame (already motion-compensated).
struct PropagatedQueries {
  std::vector<Anchor> anchors;
  std::vector<std::vector<double>> features;
  std::vector<int> ids;  // persistent track id or -1
  std::vector<double> confidences;
  std::size_t size() const { return anchors.size(); }
};

struct LayerOutput {
  ad::Var anchors, features, cls, quality;
  ad::Var raw;  // pre-projection anchors, regressed by the box loss; may be invalid
};

struct DecodeResult {
  std::vector<LayerOutput> layers;
  std::vector<std::size_t> selected;  // block-0 queries promoted by top-k
  // for each query of the temporal blocks: index into the propagated set, or -1 if new
  std::vector<int> source;
};

struct QueryState {
  ad::Var anchors, features;
};

// One decoder block. `memory_kv` is the temporal key/value input (may be invalid).
inline LayerOutput decoder_block(const BoundParams& p, int layer, const QueryState& in, const ad::Var& memory_kv,
                                 const DecodeInputs& src, const DecoderConfig& cfg) {
  const std::string b = block_prefix(layer);
  ad::Var f = in.features;
  const ad::Var& a = in.anchors;
  if (layer > 0) {
    if (memory_kv.valid()) {
      auto q = ad::add(f, encode_anchor(p, a));
      f = ad::add(f, attention(p, b + "tca", q, memory_kv, memory_kv, cfg.heads));
    }
    auto q = ad::add(f, encode_anchor(p, a));
    f = ad::add(f, attention(p, b + "sa", q, q, q, cfg.heads));
  }
  auto emb = encode_anchor(p, a);
  auto kp = gen_keypoints(p, b, a, f, cfg);
  if (src.bev.valid()) f = bev_deform_agg(p, b, f, ad::add(f, emb), kp, src.bev, src.grid).features;
  if (!src.pv.empty()) f = pv_deform_agg(p, b, f, ad::add(f, emb), kp, src.pv, *src.cameras, src.scales).features;
  f = ad::add(f, apply_linear(p, b + "ffn.l2", ad::relu(apply_linear(p, b + "ffn.l1", f))));
  auto r = refine(p, b, a, ad::add(f, emb));
  return {r.anchors, f, r.cls, r.quality, r.raw};
}

// Non-temporal block on the learned queries, top-k promotion next to the
// propagated queries, then the temporal blocks.
inline DecodeResult decode_frame(const BoundParams& p, const QueryState& initial, const PropagatedQueries& memory,
                                 const DecodeInputs& src, const DecoderConfig& cfg) {
  cfg.validate();
  ad::Tape& t = *initial.anchors.tape();
  DecodeResult res;
  res.layers.push_back(decoder_block(p, 0, initial, ad::Var(), src, cfg));
  if (cfg.temporal_blocks == 0) {
    res.selected.resize(initial.anchors.dim(0));
    std::iota(res.selected.begin(), res.selected.end(), 0);
    res.source.assign(res.selected.size(), -1);
    return res;
  }
  const std::size_t m = static_cast<std::size_t>(cfg.n_queries);
  const std::size_t np = std::min(memory.size(), m);
  const std::size_t k = m - np;
  res.selected = top_k(confidences(res.layers[0].cls), k);

  ad::Var mem_a, mem_f, memory_kv;
  if (np > 0) {
    mem_a = anchors_var(t, std::vector<Anchor>(memory.anchors.begin(), memory.anchors.begin() + static_cast<std::ptrdiff_t>(np)));
    std::vector<double> fv;
    for (std::size_t i = 0; i < np; ++i) fv.insert(fv.end(), memory.features[i].begin(), memory.features[i].end());
    mem_f = t.constant({np, static_cast<std::size_t>(cfg.embed)}, std::move(fv));
    memory_kv = ad::add(mem_f, encode_anchor(p, mem_a));
  }
  QueryState st;
  std::vector<ad::Var> as, fs;
  if (np > 0) {
    as.push_back(mem_a);
    fs.push_back(mem_f);
  }
  if (k > 0) {
    as.push_back(ad::gather_rows(res.layers[0].anchors, res.selected));
    fs.push_back(ad::gather_rows(res.layers[0].features, res.selected));
  }
  st.anchors = as.size() == 1 ? as[0] : ad::concat(as, 0);
  st.features = fs.size() == 1 ? fs[0] : ad::concat(fs, 0);
  for (std::size_t i = 0; i < np; ++i) res.source.push_back(static_cast<int>(i));
  res.source.resize(m, -1);

  for (int layer = 1; layer < cfg.layers(); ++layer) {
    auto out = decoder_block(p, layer, st, memory_kv, src, cfg);
    res.layers.push_back(out);
    st = {out.anchors, out.features};
  }
  return res;
}

}  // namespace bev
