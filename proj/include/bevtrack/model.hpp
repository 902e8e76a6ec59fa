#pragma once

// Full network: per-scale PV adapters on the backbone features, depth-based
// lifting to an encoded BEV grid with its distillation head, and the sparse
// query decoder reading from BEV and/or PV.

#include <optional>
#include <random>
#include <vector>

#include "bevtrack/decoder.hpp"
#include "bevtrack/featprov.hpp"
#include "bevtrack/lifting.hpp"
#include "bevtrack/pseudolabel.hpp"

namespace bev {

struct ModelConfig {
  DecoderConfig decoder;
  LiftConfig lift;
  BevGridSpec grid;
  int cameras = 6;
  int image_channels = 16 + kDepthCodeChannels;
  int foundation_channels = 16;  // pseudo-label channels, output of the distillation head
  bool use_bev = true;  // BEV network: lifting, encoder and BEV aggregation
  bool use_pv = true;   // PV aggregation
  std::vector<double> pv_scales = {kFeatureScales.begin(), kFeatureScales.end()};
  std::uint64_t seed = 7;

  void validate() const {
    if (!use_bev && !use_pv) throw DomainError("at least one of BEV and PV features is required");
    decoder.validate();
    lift.validate();
    grid.validate();
    if (std::find(pv_scales.begin(), pv_scales.end(), lift.scale) == pv_scales.end())
      throw DomainError("the lifting scale must be one of the PV scales");
  }
  std::size_t lift_scale_index() const {
    return static_cast<std::size_t>(std::find(pv_scales.begin(), pv_scales.end(), lift.scale) - pv_scales.begin());
  }
};

inline std::string adapter_name(std::size_t s) { return "pv.adapt" + std::to_string(s); }

inline ParamSet init_params(const ModelConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  ParamSet ps;
  const auto c = static_cast<std::size_t>(cfg.decoder.embed);
  for (std::size_t s = 0; s < cfg.pv_scales.size(); ++s)
    add_linear(ps, adapter_name(s), static_cast<std::size_t>(cfg.image_channels), c, rng);
  if (cfg.use_bev) {
    add_lifting_params(ps, cfg.lift, cfg.decoder.embed, rng);
    add_linear(ps, "distill", static_cast<std::size_t>(cfg.lift.bev_channels),
               static_cast<std::size_t>(cfg.foundation_channels), rng);
  }
  add_decoder_params(ps, cfg.decoder, cfg.use_bev ? cfg.lift.bev_channels : 0, cfg.use_pv ? cfg.cameras : 0,
                     static_cast<int>(cfg.pv_scales.size()), rng);
  const auto anchors = grid_anchors(cfg.decoder.n_queries, cfg.grid);
  Tensor a({anchors.size(), static_cast<std::size_t>(kAnchorDim)});
  for (std::size_t i = 0; i < anchors.size(); ++i)
    for (int j = 0; j < kAnchorDim; ++j) a[i * kAnchorDim + static_cast<std::size_t>(j)] = anchors[i][static_cast<std::size_t>(j)];
  ps.add("query.anchor", std::move(a));
  ps.add("query.feature", Tensor({anchors.size(), c}));
  return ps;
}

// Parameter-independent per-frame inputs, computed once and cached.
struct FrameInputs {
  int frame_index = 0;
  double timestamp = 0.0;
  Pose ego_pose;
  std::vector<CameraModel> cameras;
  std::vector<Tensor> pv;  // per scale: [V*Hs*Ws, C_img], camera-major then row-major
  std::vector<std::size_t> pv_height, pv_width;
  FrustumGeometry frustum;
  DepthTargets depth;
  std::optional<PseudoLabelGrid> pseudo;
  std::vector<GtBox> gt;
};

inline FrameInputs prepare_frame(const Frame& frame, const ProceduralFeatureProvider& provider,
                                 const ModelConfig& cfg, const PseudoLabelGrid* pseudo = nullptr) {
  cfg.validate();
  if (static_cast<int>(frame.cameras.size()) != cfg.cameras) throw DimensionError("camera count mismatch");
  FrameInputs in;
  in.frame_index = frame.index;
  in.timestamp = frame.timestamp;
  in.ego_pose = frame.ego_pose;
  in.cameras = frame.cameras;
  in.gt = frame.gt_boxes;
  for (double s : cfg.pv_scales) {
    std::vector<double> stacked;
    std::size_t h = 0, w = 0;
    for (int c = 0; c < cfg.cameras; ++c) {
      const FeatureGrid g = backbone_features(provider, frame, c, s);
      if (static_cast<int>(g.channels) != cfg.image_channels) throw DimensionError("image channel mismatch");
      h = g.height;
      w = g.width;
      stacked.insert(stacked.end(), g.values.begin(), g.values.end());
    }
    in.pv.emplace_back(Shape{static_cast<std::size_t>(cfg.cameras) * h * w, static_cast<std::size_t>(cfg.image_channels)},
                       std::move(stacked));
    in.pv_height.push_back(h);
    in.pv_width.push_back(w);
  }
  if (cfg.use_bev) {
    in.frustum = frustum_geometry(frame.cameras, cfg.lift, cfg.grid);
    in.depth = depth_targets(frame, cfg.lift);
  }
  if (pseudo) in.pseudo = *pseudo;
  return in;
}

struct ForwardOutput {
  DecodeResult decode;
  ad::Var depth_probs;   // [V*H*W, D] at the lifting scale
  ad::Var aux_depth;     // [V*H*W, 1]
  ad::Var bev;           // encoded BEV grid [R, R, Cb]
  ad::Var distill_pred;  // g(bev) as [R*R, C_f]
};

inline QueryState initial_queries(const BoundParams& p) { return {p["query.anchor"], p["query.feature"]}; }

inline ForwardOutput forward(const BoundParams& p, const ModelConfig& cfg, const FrameInputs& in,
                             const PropagatedQueries& memory) {
  ad::Tape& t = *p.vars().front().tape();
  ForwardOutput out;
  std::vector<ad::Var> adapted;
  for (std::size_t s = 0; s < cfg.pv_scales.size(); ++s)
    adapted.push_back(apply_linear(p, adapter_name(s), t.constant(in.pv[s])));

  DecodeInputs src;
  src.cameras = &in.cameras;
  src.scales = cfg.pv_scales;
  src.grid = cfg.grid;
  if (cfg.use_pv) {
    const std::size_t v = in.cameras.size();
    src.pv.assign(v, {});
    for (std::size_t s = 0; s < cfg.pv_scales.size(); ++s) {
      const std::size_t h = in.pv_height[s], w = in.pv_width[s];
      for (std::size_t c = 0; c < v; ++c)
        src.pv[c].push_back(ad::reshape(ad::slice_rows(adapted[s], c * h * w, (c + 1) * h * w),
                                        {h, w, static_cast<std::size_t>(cfg.decoder.embed)}));
    }
  }
  if (cfg.use_bev) {
    const auto& pvl = adapted[cfg.lift_scale_index()];
    out.depth_probs = depth_head(p, pvl);
    out.aux_depth = aux_depth_head(p, pvl);
    auto feats = ad::linear(pvl, p["lift.w"], p["lift.b"]);
    auto pooled = ad::bev_pool(ad::lift(out.depth_probs, feats), in.frustum.cells,
                               static_cast<std::size_t>(cfg.grid.resolution));
    out.bev = bev_encode(p, pooled, cfg.lift.encoder_blocks);
    src.bev = out.bev;
    const auto r = static_cast<std::size_t>(cfg.grid.resolution);
    out.distill_pred = apply_linear(p, "distill", ad::reshape(out.bev, {r * r, static_cast<std::size_t>(cfg.lift.bev_channels)}));
  }
  out.decode = decode_frame(p, initial_queries(p), memory, src, cfg.decoder);
  return out;
}

}  // namespace bev
