#pragma once

// Training losses: one-to-one assignment of queries to GT boxes, detection
// loss (focal classification, box L1, yawness and centerness), depth
// supervision, cosine distillation over the supervised BEV cells, and the
// weighted total.

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "bevtrack/decoder.hpp"
#include "bevtrack/error.hpp"
#include "bevtrack/lifting.hpp"
#include "bevtrack/numerics/autodiff.hpp"
#include "bevtrack/pseudolabel.hpp"
#include "bevtrack/scene/types.hpp"

namespace bev {

// ---- assignment --------------------------------------------------------------

// Minimum-cost assignment on an n x m cost matrix (row-major). Returns, for each
// row, its column or -1. Every row is assigned when n <= m, every column otherwise.
inline std::vector<int> hungarian(const std::vector<double>& cost, std::size_t n, std::size_t m) {
  if (cost.size() != n * m) throw DimensionError("hungarian: cost size mismatch");
  if (n == 0 || m == 0) return std::vector<int>(n, -1);
  const bool flip = n > m;
  const std::size_t rows = flip ? m : n, cols = flip ? n : m;
  auto at = [&](std::size_t i, std::size_t j) { return flip ? cost[j * m + i] : cost[i * m + j]; };
  // potentials formulation, 1-based with a virtual column 0
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(rows + 1, 0.0), v(cols + 1, 0.0);
  std::vector<std::size_t> p(cols + 1, 0), way(cols + 1, 0);
  for (std::size_t i = 1; i <= rows; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(cols + 1, inf);
    std::vector<char> used(cols + 1, 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = p[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= cols; ++j) {
        if (used[j]) continue;
        const double cur = at(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= cols; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<int> out(n, -1);
  for (std::size_t j = 1; j <= cols; ++j) {
    if (p[j] == 0) continue;
    if (flip)
      out[j - 1] = static_cast<int>(p[j] - 1);
    else
      out[p[j] - 1] = static_cast<int>(j - 1);
  }
  return out;
}

struct AssignConfig {
  double cls_weight = 2.0;
  double box_weight = 0.25;
  double alpha = 0.25, gamma = 2.0;
};

// Matching cost of every (query, gt) pair: focal classification cost plus L1
// over centre, log dimensions and yaw vector.
inline std::vector<double> assignment_cost(const ad::Var& anchors, const ad::Var& cls, const std::vector<GtBox>& gt,
                                           const AssignConfig& cfg = {}) {
  const std::size_t m = anchors.dim(0), g = gt.size(), nc = cls.dim(1);
  auto av = anchors.value(), cv = cls.value();
  std::vector<double> cost(m * g);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < g; ++j) {
      const double p = 1.0 / (1.0 + std::exp(-cv[i * nc + static_cast<std::size_t>(gt[j].class_id)]));
      const double pos = cfg.alpha * std::pow(1.0 - p, cfg.gamma) * -std::log(p + 1e-12);
      const double neg = (1.0 - cfg.alpha) * std::pow(p, cfg.gamma) * -std::log(1.0 - p + 1e-12);
      const Anchor t = anchor_from_gt(gt[j]);
      double l1 = 0.0;
      for (int k = 0; k <= kACos; ++k) l1 += std::fabs(av[i * kAnchorDim + static_cast<std::size_t>(k)] - t[static_cast<std::size_t>(k)]);
      cost[i * g + j] = cfg.cls_weight * (pos - neg) + cfg.box_weight * l1;
    }
  return cost;
}

// gt index matched to each query, or -1.
inline std::vector<int> assign(const ad::Var& anchors, const ad::Var& cls, const std::vector<GtBox>& gt,
                               const AssignConfig& cfg = {}) {
  return hungarian(assignment_cost(anchors, cls, gt, cfg), anchors.dim(0), gt.size());
}

// ---- detection ---------------------------------------------------------------

struct DetLossConfig {
  double alpha = 0.25, gamma = 2.0;
  double cls_weight = 1.0, box_weight = 1.0, yaw_weight = 1.0, center_weight = 1.0;
  bool deep_supervision = true;
  AssignConfig assign;
};

struct DetLossParts {
  ad::Var total, cls, box, yawness, centerness;
};

// Sigmoid focal loss summed over all entries; target is a 0/1 tensor.
inline ad::Var focal_loss(const ad::Var& logits, const std::vector<double>& target, double alpha, double gamma) {
  ad::Tape& t = *logits.tape();
  if (target.size() != logits.size()) throw DimensionError("focal_loss target size mismatch");
  const Shape sh = logits.shape();
  std::vector<double> wpos(target.size()), wneg(target.size());
  for (std::size_t i = 0; i < target.size(); ++i) {
    wpos[i] = alpha * target[i];
    wneg[i] = (1.0 - alpha) * (1.0 - target[i]);
  }
  auto p = ad::sigmoid(logits);
  auto one = t.constant(sh, std::vector<double>(target.size(), 1.0));
  auto q = ad::sub(one, p);
  auto pos = ad::mul(ad::mul(t.constant(sh, wpos), gamma == 2.0 ? ad::square(q) : ad::exp(ad::scale(ad::log(q), gamma))),
                     ad::neg(ad::log_sigmoid(logits)));
  auto neg = ad::mul(ad::mul(t.constant(sh, wneg), gamma == 2.0 ? ad::square(p) : ad::exp(ad::scale(ad::log(p), gamma))),
                     ad::neg(ad::log_sigmoid(ad::neg(logits))));
  return ad::sum(ad::add(pos, neg));
}

// Binary cross-entropy with logits, summed; targets in [0, 1].
inline ad::Var bce_with_logits(const ad::Var& logits, const std::vector<double>& target) {
  ad::Tape& t = *logits.tape();
  const Shape sh = logits.shape();
  std::vector<double> nt(target.size());
  for (std::size_t i = 0; i < target.size(); ++i) nt[i] = 1.0 - target[i];
  auto a = ad::mul(t.constant(sh, target), ad::log_sigmoid(logits));
  auto b = ad::mul(t.constant(sh, nt), ad::log_sigmoid(ad::neg(logits)));
  return ad::neg(ad::sum(ad::add(a, b)));
}

// Quality focal loss: BCE scaled by |target - sigmoid|^2, summed.
inline ad::Var quality_focal_loss(const ad::Var& logits, const std::vector<double>& target) {
  ad::Tape& t = *logits.tape();
  const Shape sh = logits.shape();
  std::vector<double> nt(target.size());
  for (std::size_t i = 0; i < target.size(); ++i) nt[i] = 1.0 - target[i];
  auto tt = t.constant(sh, target);
  auto bce = ad::neg(ad::add(ad::mul(tt, ad::log_sigmoid(logits)),
                             ad::mul(t.constant(sh, nt), ad::log_sigmoid(ad::neg(logits)))));
  return ad::sum(ad::mul(ad::square(ad::sub(tt, ad::sigmoid(logits))), bce));
}

// Detection loss of one decoder layer against the frame's GT.
inline DetLossParts det_loss_layer(const LayerOutput& layer, const std::vector<GtBox>& gt,
                                   const DetLossConfig& cfg = {}) {
  ad::Tape& t = *layer.anchors.tape();
  const std::size_t m = layer.anchors.dim(0), nc = layer.cls.dim(1);
  const auto match = assign(layer.anchors, layer.cls, gt, cfg.assign);
  const double norm = std::max<double>(1.0, static_cast<double>(gt.size()));

  std::vector<double> cls_target(m * nc, 0.0);
  std::vector<std::size_t> qi;
  std::vector<double> box_target, yaw_target, ctr_target;
  auto av = layer.anchors.value();
  for (std::size_t i = 0; i < m; ++i) {
    if (match[i] < 0) continue;
    const GtBox& g = gt[static_cast<std::size_t>(match[i])];
    cls_target[i * nc + static_cast<std::size_t>(g.class_id)] = 1.0;
    qi.push_back(i);
    const Anchor ta = anchor_from_gt(g);
    box_target.insert(box_target.end(), ta.begin(), ta.end());
    const double* a = av.data() + i * kAnchorDim;
    yaw_target.push_back(a[kASin] * ta[kASin] + a[kACos] * ta[kACos] > 0.0 ? 1.0 : 0.0);
    const double dc = std::sqrt(std::pow(a[kAX] - ta[kAX], 2) + std::pow(a[kAY] - ta[kAY], 2) + std::pow(a[kAZ] - ta[kAZ], 2));
    ctr_target.push_back(std::exp(-dc));
  }
  DetLossParts out;
  out.cls = ad::scale(focal_loss(layer.cls, cls_target, cfg.alpha, cfg.gamma), 1.0 / norm);
  if (qi.empty()) {
    out.box = out.yawness = out.centerness = t.constant({1}, {0.0});
  } else {
    const std::size_t k = qi.size();
    // L1 on the unprojected yaw vector: after projection onto the unit circle
    // the L1 has a local minimum at the heading mirrored about the y axis
    auto pred = ad::gather_rows(layer.raw.valid() ? layer.raw : layer.anchors, qi);
    out.box = ad::scale(ad::sum(ad::abs(ad::sub(pred, t.constant({k, static_cast<std::size_t>(kAnchorDim)}, box_target)))),
                        1.0 / norm);
    auto q = ad::gather_rows(layer.quality, qi);
    out.centerness = ad::scale(quality_focal_loss(ad::slice_cols(q, 0, 1), ctr_target), 1.0 / norm);
    out.yawness = ad::scale(bce_with_logits(ad::slice_cols(q, 1, 2), yaw_target), 1.0 / norm);
  }
  out.total = ad::add(ad::add(ad::scale(out.cls, cfg.cls_weight), ad::scale(out.box, cfg.box_weight)),
                      ad::add(ad::scale(out.yawness, cfg.yaw_weight), ad::scale(out.centerness, cfg.center_weight)));
  return out;
}

// Sum over decoder layers (all of them with deep supervision, else the last).
inline DetLossParts det_loss(const DecodeResult& dec, const std::vector<GtBox>& gt, const DetLossConfig& cfg = {}) {
  const std::size_t first = cfg.deep_supervision ? 0 : dec.layers.size() - 1;
  DetLossParts acc;
  for (std::size_t l = first; l < dec.layers.size(); ++l) {
    auto p = det_loss_layer(dec.layers[l], gt, cfg);
    if (!acc.total.valid()) {
      acc = p;
      continue;
    }
    acc.total = ad::add(acc.total, p.total);
    acc.cls = ad::add(acc.cls, p.cls);
    acc.box = ad::add(acc.box, p.box);
    acc.yawness = ad::add(acc.yawness, p.yawness);
    acc.centerness = ad::add(acc.centerness, p.centerness);
  }
  return acc;
}

// ---- depth -------------------------------------------------------------------

struct DepthLossConfig {
  double eps = 1e-6;        // probability clamp
  double aux_weight = 0.1;  // weight of the L1 term relative to the BCE term
};

struct DepthLossParts {
  ad::Var total, bce, aux_l1;
};

// BCE of the bin probabilities against the one-hot LiDAR bin (summed over bins,
// averaged over supervised pixels) plus the mean L1 of the auxiliary depth.
inline DepthLossParts depth_loss(const ad::Var& probs, const ad::Var& aux_depth, const DepthTargets& targets,
                                 const DepthLossConfig& cfg = {}) {
  ad::Tape& t = *probs.tape();
  DepthLossParts out;
  const std::size_t n = targets.pixels.size();
  if (n == 0) {
    out.total = out.bce = out.aux_l1 = t.constant({1}, {0.0});
    return out;
  }
  const std::size_t d = probs.dim(1);
  std::vector<double> y(n * d, 0.0), ny(n * d, 1.0);
  for (std::size_t i = 0; i < n; ++i) {
    const auto b = static_cast<std::size_t>(targets.bins[i]);
    if (b >= d) throw DimensionError("depth target bin out of range");
    y[i * d + b] = 1.0;
    ny[i * d + b] = 0.0;
  }
  auto p = ad::clamp(ad::gather_rows(probs, targets.pixels), cfg.eps, 1.0 - cfg.eps);
  auto one = t.constant({n, d}, std::vector<double>(n * d, 1.0));
  auto ll = ad::add(ad::mul(t.constant({n, d}, y), ad::log(p)), ad::mul(t.constant({n, d}, ny), ad::log(ad::sub(one, p))));
  out.bce = ad::scale(ad::sum(ll), -1.0 / static_cast<double>(n));
  auto aux = ad::gather_rows(aux_depth, targets.pixels);
  out.aux_l1 = ad::mean(ad::abs(ad::sub(aux, t.constant({n, 1}, targets.depths))));
  out.total = ad::add(out.bce, ad::scale(out.aux_l1, cfg.aux_weight));
  return out;
}

// ---- distillation ------------------------------------------------------------

struct DistillResult {
  ad::Var loss;
  std::size_t cells = 0;
  bool empty = false;  // no supervised cell: loss is 0
};

// Mean over valid cells of 1 - cos(g(F_BEV), pseudo). pred is [R*R, C_f].
inline DistillResult distill_loss(const ad::Var& pred, const PseudoLabelGrid& pseudo) {
  ad::Tape& t = *pred.tape();
  const std::size_t cells = pseudo.valid.size(), c = pseudo.grid.channels;
  if (pred.dim(0) != cells || pred.dim(1) != c) throw DimensionError("distill_loss: prediction/pseudo-label mismatch");
  DistillResult out;
  std::vector<std::size_t> omega;
  for (std::size_t i = 0; i < cells; ++i)
    if (pseudo.valid[i]) omega.push_back(i);
  out.cells = omega.size();
  if (omega.empty()) {
    out.empty = true;
    out.loss = t.constant({1}, {0.0});
    return out;
  }
  const std::size_t n = omega.size();
  std::vector<double> y(n * c);
  for (std::size_t k = 0; k < n; ++k) {
    const double* src = pseudo.grid.values.data() + omega[k] * c;
    double nrm = 0.0;
    for (std::size_t j = 0; j < c; ++j) nrm += src[j] * src[j];
    nrm = std::sqrt(nrm + 1e-24);
    for (std::size_t j = 0; j < c; ++j) y[k * c + j] = src[j] / nrm;
  }
  auto g = ad::gather_rows(pred, omega);
  auto dot = ad::sum_last(ad::mul(g, t.constant({n, c}, y)));
  auto norm = ad::sqrt(ad::add_scalar(ad::sum_last(ad::square(g)), 1e-24));
  auto cos = ad::div(dot, norm);
  out.loss = ad::add_scalar(ad::scale(ad::mean(cos), -1.0), 1.0);
  return out;
}

// ---- total -------------------------------------------------------------------

struct LossWeights {
  double det = 1.0, distill = 7.0, depth = 1.0;
  void validate() const {
    if (det < 0 || distill < 0 || depth < 0) throw DomainError("loss weights must be non-negative");
  }
};

struct LossBreakdown {
  double total = 0, det = 0, distill = 0, depth = 0;
  double cls = 0, box = 0, yawness = 0, centerness = 0, depth_bce = 0, depth_aux = 0;
  std::size_t distill_cells = 0;
};

inline ad::Var total_loss(const ad::Var& det, const ad::Var& distill, const ad::Var& depth, const LossWeights& w) {
  w.validate();
  return ad::add(ad::add(ad::scale(det, w.det), ad::scale(distill, w.distill)), ad::scale(depth, w.depth));
}

}  // namespace bev
