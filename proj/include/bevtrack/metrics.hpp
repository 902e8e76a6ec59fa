#pragma once

// Detection and tracking evaluation: greedy centre-distance matching, AP over
// distance thresholds, TP errors and the composite score; MOT accounting per
// recall operating point for AMOTA/AMOTP, plus MOTA/MOTP/IDS/recall.

#include <algorithm>
#include <cmath>
#include <future>
#include <limits>
#include <map>
#include <numeric>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "bevtrack/decoder.hpp"
#include "bevtrack/losses.hpp"
#include "bevtrack/scene/types.hpp"
#include "bevtrack/tracker.hpp"

namespace bev {

struct EvalConfig {
  std::vector<double> thresholds = {0.5, 1.0, 2.0, 4.0};
  double tp_threshold = 2.0;
  double tracking_threshold = 2.0;
  int recall_points = 40;
  double min_recall = 0.1, min_precision = 0.1;
  int classes = kNumClasses;

  void validate() const {
    if (thresholds.empty() || !std::is_sorted(thresholds.begin(), thresholds.end()) || thresholds.front() <= 0)
      throw DomainError("match thresholds must be positive and ascending");
    if (std::find(thresholds.begin(), thresholds.end(), tp_threshold) == thresholds.end())
      throw DomainError("the TP threshold must be one of the match thresholds");
  }
};

inline double center_distance(const TrackRecord& p, const GtBox& g) {
  return std::hypot(p.anchor[kAX] - g.center.x(), p.anchor[kAY] - g.center.y());
}

// Indices of `v` by descending score, ties by ascending index.
inline std::vector<std::size_t> score_order(const std::vector<TrackRecord>& v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a].score > v[b].score; });
  return idx;
}

struct FrameMatch {
  std::vector<int> pred_to_gt;  // -1 for false positives
  std::vector<double> distance;
  std::size_t tp = 0, fp = 0, fn = 0;
};

// Predictions in score order claim the nearest unclaimed GT closer than `threshold`.
inline FrameMatch match_frame(const std::vector<TrackRecord>& preds, const std::vector<GtBox>& gts, double threshold) {
  FrameMatch m;
  m.pred_to_gt.assign(preds.size(), -1);
  m.distance.assign(preds.size(), std::numeric_limits<double>::infinity());
  std::vector<char> taken(gts.size(), 0);
  for (auto i : score_order(preds)) {
    double best = std::numeric_limits<double>::infinity();
    int bj = -1;
    for (std::size_t j = 0; j < gts.size(); ++j) {
      if (taken[j]) continue;
      const double d = center_distance(preds[i], gts[j]);
      if (d < best) {
        best = d;
        bj = static_cast<int>(j);
      }
    }
    if (bj >= 0 && best < threshold) {
      taken[static_cast<std::size_t>(bj)] = 1;
      m.pred_to_gt[i] = bj;
      m.distance[i] = best;
      ++m.tp;
    } else {
      ++m.fp;
    }
  }
  m.fn = gts.size() - m.tp;
  return m;
}

// Piecewise-linear interpolation with numpy's conventions: left of the first
// knot takes the first value, right of the last takes `right`.
inline double interp(double x, const std::vector<double>& xp, const std::vector<double>& fp, double right) {
  if (xp.empty()) return right;
  if (x < xp.front()) return fp.front();
  if (x > xp.back()) return right;
  if (x == xp.back()) return fp.back();
  const auto j = static_cast<std::size_t>(std::upper_bound(xp.begin(), xp.end(), x) - xp.begin()) - 1;
  const double slope = (fp[j + 1] - fp[j]) / (xp[j + 1] - xp[j]);
  return fp[j] + slope * (x - xp[j]);
}

// ---- detection ---------------------------------------------------------------

inline constexpr int kRecallBins = 101;

struct TpErrors {
  double trans = 1.0, scale = 1.0, orient = 1.0, vel = 1.0;
};

struct ClassDetection {
  std::vector<double> ap;  // per threshold
  double mean_ap = 0.0;
  TpErrors tp;
  std::size_t gt_count = 0;
};

struct DetectionReport {
  std::vector<ClassDetection> classes;
  double mAP = 0.0;
  TpErrors mean_tp;
  double composite = 0.0;
};

inline double scale_error(const Box3& p, const GtBox& g) {
  const double inter = std::min(p.width, g.width) * std::min(p.length, g.length) * std::min(p.height, g.height);
  const double vp = p.width * p.length * p.height, vg = g.width * g.length * g.height;
  return 1.0 - inter / (vp + vg - inter);
}

inline double yaw_error(double a, double b) { return std::fabs(wrap_angle(a - b)); }

struct ClassAccumulation {
  std::vector<double> precision, confidence;  // on the recall grid
  std::vector<double> trans, scale, orient, vel;  // cumulative means on the recall grid
  bool any_tp = false;
};

// All predictions and GT of one class. Frames are keyed by record frame index.
inline ClassAccumulation accumulate_class(const std::vector<TrackRecord>& preds, const std::vector<GtBox>& gts,
                                          double threshold) {
  ClassAccumulation acc;
  acc.precision.assign(kRecallBins, 0.0);
  acc.confidence.assign(kRecallBins, 0.0);
  for (auto* v : {&acc.trans, &acc.scale, &acc.orient, &acc.vel}) v->assign(kRecallBins, 1.0);
  if (gts.empty()) return acc;
  std::map<int, std::vector<std::size_t>> gt_by_frame;
  for (std::size_t j = 0; j < gts.size(); ++j) gt_by_frame[gts[j].frame].push_back(j);
  std::set<std::size_t> taken;
  std::vector<double> tp, fp, conf, e_t, e_s, e_o, e_v, match_conf;
  double ctp = 0, cfp = 0;
  for (auto i : score_order(preds)) {
    const auto& p = preds[i];
    double best = std::numeric_limits<double>::infinity();
    std::size_t bj = 0;
    bool found = false;
    auto it = gt_by_frame.find(p.frame);
    if (it != gt_by_frame.end())
      for (auto j : it->second) {
        if (taken.count(j)) continue;
        const double d = center_distance(p, gts[j]);
        if (d < best) {
          best = d;
          bj = j;
          found = true;
        }
      }
    if (found && best < threshold) {
      taken.insert(bj);
      ++ctp;
      const GtBox& g = gts[bj];
      e_t.push_back(best);
      e_s.push_back(scale_error(p.box(), g));
      e_o.push_back(yaw_error(p.box().yaw, g.yaw));
      const Vec3 dv = p.velocity() - g.velocity;
      e_v.push_back(std::hypot(dv.x(), dv.y()));
      match_conf.push_back(p.score);
    } else {
      ++cfp;
    }
    tp.push_back(ctp);
    fp.push_back(cfp);
    conf.push_back(p.score);
  }
  if (ctp == 0) return acc;
  acc.any_tp = true;
  std::vector<double> rec(tp.size()), prec(tp.size());
  for (std::size_t k = 0; k < tp.size(); ++k) {
    rec[k] = tp[k] / static_cast<double>(gts.size());
    prec[k] = tp[k] / (tp[k] + fp[k]);
  }
  for (int r = 0; r < kRecallBins; ++r) {
    const double x = r / 100.0;
    acc.precision[static_cast<std::size_t>(r)] = interp(x, rec, prec, 0.0);
    acc.confidence[static_cast<std::size_t>(r)] = interp(x, rec, conf, 0.0);
  }
  // cumulative mean of each error, interpolated by confidence (descending)
  std::vector<double> mc_rev(match_conf.rbegin(), match_conf.rend());
  auto fill = [&](const std::vector<double>& err, std::vector<double>& out) {
    std::vector<double> cm(err.size());
    double s = 0.0;
    for (std::size_t k = 0; k < err.size(); ++k) cm[k] = (s += err[k]) / static_cast<double>(k + 1);
    std::vector<double> cm_rev(cm.rbegin(), cm.rend());
    for (int r = 0; r < kRecallBins; ++r) out[static_cast<std::size_t>(r)] = interp(acc.confidence[static_cast<std::size_t>(r)], mc_rev, cm_rev, cm_rev.back());
  };
  fill(e_t, acc.trans);
  fill(e_s, acc.scale);
  fill(e_o, acc.orient);
  fill(e_v, acc.vel);
  return acc;
}

inline double average_precision(const ClassAccumulation& acc, const EvalConfig& cfg) {
  const auto first = static_cast<std::size_t>(std::lround(100.0 * cfg.min_recall)) + 1;
  double s = 0.0;
  std::size_t n = 0;
  for (std::size_t r = first; r < acc.precision.size(); ++r, ++n) s += std::max(0.0, acc.precision[r] - cfg.min_precision);
  return n ? s / static_cast<double>(n) / (1.0 - cfg.min_precision) : 0.0;
}

// Mean of a TP error over the recall range with non-zero confidence; 1 if empty.
inline double tp_error(const ClassAccumulation& acc, const std::vector<double>& err, const EvalConfig& cfg) {
  if (!acc.any_tp) return 1.0;
  const auto first = static_cast<std::size_t>(std::lround(100.0 * cfg.min_recall)) + 1;
  std::size_t last = 0;
  bool any = false;
  for (std::size_t r = 0; r < acc.confidence.size(); ++r)
    if (acc.confidence[r] != 0.0) {
      last = r;
      any = true;
    }
  if (!any || last < first) return 1.0;
  double s = 0.0;
  for (std::size_t r = first; r <= last; ++r) s += err[r];
  return s / static_cast<double>(last - first + 1);
}

inline DetectionReport detection_metrics(const std::vector<TrackRecord>& preds, const std::vector<GtBox>& gts,
                                         const EvalConfig& cfg = {}) {
  cfg.validate();
  DetectionReport rep;
  int counted = 0;
  TpErrors sum{0, 0, 0, 0};
  double map_sum = 0.0;
  for (int c = 0; c < cfg.classes; ++c) {
    std::vector<TrackRecord> pc;
    std::vector<GtBox> gc;
    for (const auto& p : preds)
      if (p.class_id == c) pc.push_back(p);
    for (const auto& g : gts)
      if (g.class_id == c) gc.push_back(g);
    ClassDetection cd;
    cd.gt_count = gc.size();
    for (double th : cfg.thresholds) {
      const auto acc = accumulate_class(pc, gc, th);
      cd.ap.push_back(average_precision(acc, cfg));
      if (th == cfg.tp_threshold)
        cd.tp = {tp_error(acc, acc.trans, cfg), tp_error(acc, acc.scale, cfg), tp_error(acc, acc.orient, cfg),
                 tp_error(acc, acc.vel, cfg)};
    }
    cd.mean_ap = std::accumulate(cd.ap.begin(), cd.ap.end(), 0.0) / static_cast<double>(cd.ap.size());
    if (!gc.empty()) {
      ++counted;
      map_sum += cd.mean_ap;
      sum.trans += cd.tp.trans;
      sum.scale += cd.tp.scale;
      sum.orient += cd.tp.orient;
      sum.vel += cd.tp.vel;
    }
    rep.classes.push_back(cd);
  }
  if (counted > 0) {
    rep.mAP = map_sum / counted;
    rep.mean_tp = {sum.trans / counted, sum.scale / counted, sum.orient / counted, sum.vel / counted};
  }
  double tp_score = 0.0;
  for (double e : {rep.mean_tp.trans, rep.mean_tp.scale, rep.mean_tp.orient, rep.mean_tp.vel}) tp_score += 1.0 - std::min(1.0, e);
  rep.composite = (5.0 * rep.mAP + tp_score) / 9.0;
  return rep;
}

// ---- tracking ----------------------------------------------------------------

struct MotCounts {
  std::size_t objects = 0, matches = 0, switches = 0, misses = 0, false_positives = 0;
  double distance_sum = 0.0;

  std::size_t detections() const { return matches + switches; }
  double recall() const { return objects ? static_cast<double>(detections()) / static_cast<double>(objects) : 0.0; }
  double mota() const {
    return objects ? 1.0 - static_cast<double>(misses + switches + false_positives) / static_cast<double>(objects) : 0.0;
  }
  double motp() const { return detections() ? distance_sum / static_cast<double>(detections()) : std::nan(""); }
  // MOTA normalised by the achieved recall, clipped at 0; NaN at zero recall.
  double motar() const {
    const double r = objects ? static_cast<double>(matches) / static_cast<double>(objects) : 0.0;
    const double den = r * static_cast<double>(objects);
    if (den == 0.0) return std::nan("");
    const double num = static_cast<double>(misses + switches + false_positives) - (1.0 - r) * static_cast<double>(objects);
    return std::max(0.0, 1.0 - num / den);
  }
};

// Per-frame MOT association: previous (gt, track) pairs are kept while still
// within the threshold, the rest is solved by minimum-distance assignment.
// A GT matched to a different track than before counts as a switch.
class MotAccumulator {
 public:
  explicit MotAccumulator(double threshold) : threshold_(threshold) {}

  // Returns the scores of the tracks matched without a switch.
  std::vector<double> update(const std::vector<GtBox>& gts, const std::vector<TrackRecord>& hyps) {
    std::vector<double> matched_scores;
    counts_.objects += gts.size();
    const std::size_t n = gts.size(), m = hyps.size();
    std::vector<double> dist(n * m);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) dist[i * m + j] = center_distance(hyps[j], gts[i]);
    auto feasible = [&](std::size_t i, std::size_t j) { return dist[i * m + j] < threshold_; };
    std::vector<int> gt_to_h(n, -1);
    std::vector<char> h_used(m, 0);
    for (std::size_t i = 0; i < n; ++i) {
      auto it = last_.find(gts[i].track_id);
      if (it == last_.end()) continue;
      for (std::size_t j = 0; j < m; ++j)
        if (!h_used[j] && hyps[j].track_id == it->second && feasible(i, j)) {
          gt_to_h[i] = static_cast<int>(j);
          h_used[j] = 1;
          break;
        }
    }
    std::vector<std::size_t> ri, cj;
    for (std::size_t i = 0; i < n; ++i)
      if (gt_to_h[i] < 0) ri.push_back(i);
    for (std::size_t j = 0; j < m; ++j)
      if (!h_used[j]) cj.push_back(j);
    if (!ri.empty() && !cj.empty()) {
      const double big = 1e6;
      std::vector<double> cost(ri.size() * cj.size());
      for (std::size_t a = 0; a < ri.size(); ++a)
        for (std::size_t b = 0; b < cj.size(); ++b)
          cost[a * cj.size() + b] = feasible(ri[a], cj[b]) ? dist[ri[a] * m + cj[b]] : big;
      const auto asg = hungarian(cost, ri.size(), cj.size());
      for (std::size_t a = 0; a < ri.size(); ++a) {
        if (asg[a] < 0) continue;
        const std::size_t j = cj[static_cast<std::size_t>(asg[a])];
        if (!feasible(ri[a], j)) continue;
        gt_to_h[ri[a]] = static_cast<int>(j);
        h_used[j] = 1;
      }
    }
    for (std::size_t i = 0; i < n; ++i) {
      if (gt_to_h[i] < 0) {
        ++counts_.misses;
        continue;
      }
      const auto& h = hyps[static_cast<std::size_t>(gt_to_h[i])];
      auto it = last_.find(gts[i].track_id);
      if (it != last_.end() && it->second != h.track_id)
        ++counts_.switches;
      else {
        ++counts_.matches;
        matched_scores.push_back(h.score);
      }
      counts_.distance_sum += dist[i * m + static_cast<std::size_t>(gt_to_h[i])];
      last_[gts[i].track_id] = h.track_id;
    }
    for (std::size_t j = 0; j < m; ++j)
      if (!h_used[j]) ++counts_.false_positives;
    return matched_scores;
  }

  const MotCounts& counts() const { return counts_; }

 private:
  double threshold_;
  std::map<int, int> last_;
  MotCounts counts_;
};

struct ClassTracking {
  double amota = 0.0, amotp = 0.0;
  double recall = 0.0, mota = 0.0, motp = 0.0;
  std::size_t ids = 0;
  std::size_t gt_count = 0;
  bool defined = false;  // false when the class has no GT
};

struct TrackingReport {
  std::vector<ClassTracking> classes;
  double amota = 0.0, amotp = 0.0, recall = 0.0, mota = 0.0, motp = 0.0;
  std::size_t ids = 0;
  bool defined = false;
};

inline MotCounts run_mot(const std::vector<TrackRecord>& preds, const std::vector<GtBox>& gts, double threshold,
                         double min_score, std::vector<double>* scores = nullptr) {
  std::map<int, std::pair<std::vector<GtBox>, std::vector<TrackRecord>>> frames;
  for (const auto& g : gts) frames[g.frame].first.push_back(g);
  for (const auto& p : preds)
    if (p.score >= min_score) frames[p.frame].second.push_back(p);
  MotAccumulator acc(threshold);
  for (const auto& [f, fr] : frames) {
    auto s = acc.update(fr.first, fr.second);
    if (scores) scores->insert(scores->end(), s.begin(), s.end());
  }
  return acc.counts();
}

inline ClassTracking tracking_metrics_class(const std::vector<TrackRecord>& preds, const std::vector<GtBox>& gts,
                                            const EvalConfig& cfg) {
  ClassTracking ct;
  ct.gt_count = gts.size();
  if (gts.empty()) return ct;
  ct.defined = true;
  std::vector<double> scores;
  run_mot(preds, gts, cfg.tracking_threshold, -std::numeric_limits<double>::infinity(), &scores);
  const int nt = cfg.recall_points;
  std::vector<double> rec_grid(static_cast<std::size_t>(nt));
  for (int k = 0; k < nt; ++k)
    rec_grid[static_cast<std::size_t>(k)] =
        std::round((cfg.min_recall + (1.0 - cfg.min_recall) * k / (nt - 1)) * 1e12) / 1e12;
  std::sort(scores.begin(), scores.end(), std::greater<>());
  std::vector<double> rec(scores.size());
  for (std::size_t k = 0; k < scores.size(); ++k) rec[k] = static_cast<double>(k + 1) / static_cast<double>(gts.size());
  const double max_rec = rec.empty() ? 0.0 : rec.back();
  double motar_sum = 0.0, motp_sum = 0.0, best_mota = -std::numeric_limits<double>::infinity();
  for (int k = 0; k < nt; ++k) {
    const double r = rec_grid[static_cast<std::size_t>(k)];
    if (scores.empty() || r > max_rec) {
      motp_sum += cfg.tracking_threshold;  // unreached recall: MOTAR 0, worst MOTP
      continue;
    }
    const double th = interp(r, rec, scores, 0.0);
    const auto c = run_mot(preds, gts, cfg.tracking_threshold, th);
    const double mr = c.motar();
    motar_sum += std::isnan(mr) ? 0.0 : mr;
    const double mp = c.motp();
    motp_sum += std::isnan(mp) ? cfg.tracking_threshold : mp;
    if (c.mota() > best_mota) {
      best_mota = c.mota();
      ct.mota = c.mota();
      ct.motp = std::isnan(mp) ? cfg.tracking_threshold : mp;
      ct.recall = c.recall();
      ct.ids = c.switches;
    }
  }
  ct.amota = motar_sum / nt;
  ct.amotp = motp_sum / nt;
  if (best_mota == -std::numeric_limits<double>::infinity()) {
    // no operating point reached: report the all-tracks counts
    const auto c = run_mot(preds, gts, cfg.tracking_threshold, -std::numeric_limits<double>::infinity());
    ct.mota = c.mota();
    ct.motp = cfg.tracking_threshold;
    ct.recall = c.recall();
    ct.ids = c.switches;
  }
  return ct;
}

inline TrackingReport tracking_metrics(const std::vector<TrackRecord>& preds, const std::vector<GtBox>& gts,
                                       const EvalConfig& cfg = {}) {
  cfg.validate();
  TrackingReport rep;
  int counted = 0;
  // classes are independent; reduced in class order so the result is deterministic
  std::vector<std::future<ClassTracking>> jobs;
  for (int c = 0; c < cfg.classes; ++c) {
    std::vector<TrackRecord> pc;
    std::vector<GtBox> gc;
    for (const auto& p : preds)
      if (p.class_id == c) pc.push_back(p);
    for (const auto& g : gts)
      if (g.class_id == c) gc.push_back(g);
    jobs.push_back(std::async(std::launch::async, [pc = std::move(pc), gc = std::move(gc), &cfg] {
      return tracking_metrics_class(pc, gc, cfg);
    }));
  }
  for (auto& job : jobs) {
    auto ct = job.get();
    if (ct.defined) {
      ++counted;
      rep.amota += ct.amota;
      rep.amotp += ct.amotp;
      rep.recall += ct.recall;
      rep.mota += ct.mota;
      rep.motp += ct.motp;
      rep.ids += ct.ids;
    }
    rep.classes.push_back(ct);
  }
  rep.defined = counted > 0;
  if (counted > 0) {
    for (double* v : {&rep.amota, &rep.amotp, &rep.recall, &rep.mota, &rep.motp}) *v /= counted;
  }
  return rep;
}

// ---- reports -----------------------------------------------------------------

struct EvalReport {
  DetectionReport detection;
  TrackingReport tracking;
};

inline EvalReport evaluate(const std::vector<TrackRecord>& detections, const std::vector<TrackRecord>& tracks,
                           const std::vector<GtBox>& gts, const EvalConfig& cfg = {}) {
  return {detection_metrics(detections, gts, cfg), tracking_metrics(tracks, gts, cfg)};
}

inline void write_report_text(std::ostream& os, const EvalReport& r) {
  char buf[256];
  const auto& d = r.detection;
  const auto& t = r.tracking;
  std::snprintf(buf, sizeof buf, "mAP %.4f  composite %.4f\nmATE %.4f  mASE %.4f  mAOE %.4f  mAVE %.4f  mAAE n/a\n",
                d.mAP, d.composite, d.mean_tp.trans, d.mean_tp.scale, d.mean_tp.orient, d.mean_tp.vel);
  os << buf;
  if (t.defined) {
    std::snprintf(buf, sizeof buf, "AMOTA %.4f  AMOTP %.4f  IDS %zu  Recall %.4f  MOTA %.4f  MOTP %.4f\n", t.amota,
                  t.amotp, t.ids, t.recall, t.mota, t.motp);
    os << buf;
  } else {
    os << "tracking metrics undefined: no ground truth\n";
  }
  for (std::size_t c = 0; c < d.classes.size(); ++c) {
    std::snprintf(buf, sizeof buf, "  %-10s gt %4zu  AP %.4f  ATE %.4f  AMOTA %.4f  IDS %zu\n",
                  class_name(static_cast<int>(c)), d.classes[c].gt_count, d.classes[c].mean_ap,
                  d.classes[c].tp.trans, t.classes[c].amota, t.classes[c].ids);
    os << buf;
  }
}

inline void write_report_csv(std::ostream& os, const EvalReport& r) {
  os << "class,gt,AP,ATE,ASE,AOE,AVE,AMOTA,AMOTP,IDS,Recall,MOTA,MOTP\n";
  auto row = [&](const std::string& name, std::size_t gt, double ap, const TpErrors& e, double amota, double amotp,
                 std::size_t ids, double rec, double mota, double motp) {
    char buf[256];
    std::snprintf(buf, sizeof buf, "%s,%zu,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%zu,%.6f,%.6f,%.6f\n", name.c_str(), gt,
                  ap, e.trans, e.scale, e.orient, e.vel, amota, amotp, ids, rec, mota, motp);
    os << buf;
  };
  std::size_t total_gt = 0;
  for (std::size_t c = 0; c < r.detection.classes.size(); ++c) {
    const auto& d = r.detection.classes[c];
    const auto& t = r.tracking.classes[c];
    total_gt += d.gt_count;
    row(class_name(static_cast<int>(c)), d.gt_count, d.mean_ap, d.tp, t.amota, t.amotp, t.ids, t.recall, t.mota, t.motp);
  }
  const auto& t = r.tracking;
  row("all", total_gt, r.detection.mAP, r.detection.mean_tp, t.amota, t.amotp, t.ids, t.recall, t.mota, t.motp);
}

}  // namespace bev
