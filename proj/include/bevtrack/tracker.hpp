#pragma once

// Query-propagation tracking: the instance memory carries the previous
// frame's top queries, which are moved by their velocity, transformed into the
// new ego frame and fed back to the decoder. IDs persist through the memory.

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "bevtrack/decoder.hpp"
#include "bevtrack/error.hpp"
#include "bevtrack/geometry.hpp"

namespace bev {

struct TrackerConfig {
  double tau = 0.4;  // confidence for emitting a track
  int n_temporal = 16;
};

struct MemoryEntry {
  Anchor anchor{};
  std::vector<double> feature;
  int id = -1;
  double confidence = 0.0;
};

struct InstanceMemory {
  std::vector<MemoryEntry> entries;
  Pose ego_pose;  // global-from-ego of the frame the entries live in
  double timestamp = 0.0;
  bool has_frame = false;
  int next_id = 0;

  void reset() { *this = InstanceMemory{}; }
};

// Moves an anchor by v*dt, then re-expresses centre, yaw vector and velocity
// through `new_from_old`.
inline Anchor propagate_anchor(const Anchor& a, const Pose& new_from_old, double dt) {
  const Vec3 v = anchor_velocity(a);
  const Vec3 c = Vec3(a[kAX], a[kAY], a[kAZ]) + v * dt;
  const Vec3 c2 = new_from_old.apply(c);
  const Vec3 yaw = new_from_old.apply_direction(Vec3(a[kACos], a[kASin], 0.0));
  const Vec3 v2 = new_from_old.apply_direction(v);
  Anchor out = a;
  out[kAX] = c2.x();
  out[kAY] = c2.y();
  out[kAZ] = c2.z();
  out[kACos] = yaw.x();
  out[kASin] = yaw.y();
  out[kAVx] = v2.x();
  out[kAVy] = v2.y();
  out[kAVz] = v2.z();
  return out;
}

// Memory queries motion-compensated into the frame at (pose, timestamp).
// Features are copied unchanged; re-encoding happens in the decoder.
inline PropagatedQueries propagate(const InstanceMemory& mem, const Pose& pose, double timestamp) {
  PropagatedQueries out;
  if (!mem.has_frame) return out;
  const double dt = timestamp - mem.timestamp;
  if (!(dt > 0.0)) throw DomainError("propagate needs a positive time step");
  const Pose new_from_old = compose(invert(pose), mem.ego_pose);
  for (const auto& e : mem.entries) {
    out.anchors.push_back(propagate_anchor(e.anchor, new_from_old, dt));
    out.features.push_back(e.feature);
    out.ids.push_back(e.id);
    out.confidences.push_back(e.confidence);
  }
  return out;
}

// One decoded query of the final layer.
struct QueryOutput {
  Anchor anchor{};
  std::vector<double> feature;
  double confidence = 0.0;
  int class_id = 0;
  int source = -1;  // index into the propagated queries, -1 if new
};

inline std::vector<QueryOutput> collect_queries(const DecodeResult& dec) {
  const auto& last = dec.layers.back();
  const auto conf = confidences(last.cls);
  const std::size_t m = last.anchors.dim(0), c = last.features.dim(1);
  std::vector<QueryOutput> out(m);
  auto fv = last.features.value();
  for (std::size_t i = 0; i < m; ++i) {
    out[i].anchor = anchor_row(last.anchors, i);
    out[i].feature.assign(fv.begin() + static_cast<std::ptrdiff_t>(i * c), fv.begin() + static_cast<std::ptrdiff_t>((i + 1) * c));
    out[i].confidence = conf[i];
    out[i].class_id = argmax_class(last.cls, i);
    out[i].source = i < dec.source.size() ? dec.source[i] : -1;
  }
  return out;
}

struct TrackRecord {
  int frame = 0;
  int track_id = -1;
  int class_id = 0;
  double score = 0.0;
  Anchor anchor{};

  Box3 box() const { return box_from_anchor(anchor); }
  Vec3 velocity() const { return anchor_velocity(anchor); }
};

struct TrackFrame {
  int frame = 0;
  std::vector<TrackRecord> tracks;      // confident queries with persistent ids
  std::vector<TrackRecord> detections;  // every final query, id -1 if none yet
};

// Assigns ids and rebuilds the memory from the top-N_t queries.
// A propagated query keeps its id; a new confident query gets a fresh one.
inline TrackFrame update_ids(const std::vector<QueryOutput>& queries, const PropagatedQueries& propagated,
                             InstanceMemory& mem, const TrackerConfig& cfg, const Pose& pose, double timestamp,
                             int frame) {
  TrackFrame out;
  out.frame = frame;
  std::vector<int> ids(queries.size(), -1);
  for (std::size_t i = 0; i < queries.size(); ++i) {
    const int src = queries[i].source;
    if (src >= 0) {
      if (static_cast<std::size_t>(src) >= propagated.size()) throw DimensionError("query source out of range");
      ids[i] = propagated.ids[static_cast<std::size_t>(src)];
    }
  }
  // fresh ids in descending confidence so numbering is deterministic
  std::vector<double> conf(queries.size());
  for (std::size_t i = 0; i < queries.size(); ++i) conf[i] = queries[i].confidence;
  const auto order = top_k(conf, queries.size());
  for (auto i : order)
    if (queries[i].confidence >= cfg.tau && ids[i] < 0) ids[i] = mem.next_id++;

  for (std::size_t i = 0; i < queries.size(); ++i) {
    TrackRecord r{frame, ids[i], queries[i].class_id, queries[i].confidence, queries[i].anchor};
    out.detections.push_back(r);
    if (queries[i].confidence >= cfg.tau) out.tracks.push_back(r);
  }
  std::vector<MemoryEntry> next;
  for (auto i : top_k(conf, static_cast<std::size_t>(std::max(0, cfg.n_temporal))))
    next.push_back({queries[i].anchor, queries[i].feature, ids[i], queries[i].confidence});
  mem.entries = std::move(next);
  mem.ego_pose = pose;
  mem.timestamp = timestamp;
  mem.has_frame = true;
  return out;
}

// ---- record format -----------------------------------------------------------
// One line per record: frame track_id class score followed by the 11 anchor fields.

inline void write_records(std::ostream& os, const std::vector<TrackRecord>& recs) {
  char buf[64];
  for (const auto& r : recs) {
    os << r.frame << ' ' << r.track_id << ' ' << r.class_id;
    std::snprintf(buf, sizeof buf, " %.17g", r.score);
    os << buf;
    for (double v : r.anchor) {
      std::snprintf(buf, sizeof buf, " %.17g", v);
      os << buf;
    }
    os << '\n';
  }
}

inline std::vector<TrackRecord> read_records(std::istream& is) {
  std::vector<TrackRecord> out;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    TrackRecord r;
    ls >> r.frame >> r.track_id >> r.class_id >> r.score;
    for (auto& v : r.anchor) ls >> v;
    if (!ls) throw IoError("bad track record on line " + std::to_string(lineno));
    out.push_back(r);
  }
  return out;
}

inline void write_records(const std::string& path, const std::vector<TrackRecord>& recs) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot write " + path);
  write_records(f, recs);
}

inline std::vector<TrackRecord> read_records(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot read " + path);
  return read_records(f);
}

}  // namespace bev
