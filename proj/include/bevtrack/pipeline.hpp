#pragma once

// Glue shared by the command-line tool and the acceptance gate: the feature
// provider of a scene, pseudo-label sets on disk, per-sequence model inputs,
// and flattening of tracker output into records.

#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

#include "bevtrack/featprov.hpp"
#include "bevtrack/model.hpp"
#include "bevtrack/pseudolabel.hpp"
#include "bevtrack/scene/array_io.hpp"
#include "bevtrack/scene/dataset.hpp"
#include "bevtrack/tracker.hpp"

namespace bev {

inline ProceduralFeatureProvider scene_provider(const Scene& s) {
  ProceduralFeatureProvider::Options o;
  o.channels = s.config.feature_channels;
  o.noise_seed = s.config.seed;
  return ProceduralFeatureProvider(o);
}

// Model defaults adapted to the scene's rig and BEV grid.
inline ModelConfig model_config_for(const Scene& s) {
  ModelConfig mc;
  mc.grid = s.config.grid;
  mc.cameras = s.config.n_cameras;
  mc.image_channels = s.config.feature_channels + kDepthCodeChannels;
  return mc;
}

// ---- pseudo-label sets -------------------------------------------------------

inline constexpr const char* kPseudoFormat = "bevtrack-pseudo";
inline constexpr int kPseudoVersion = 1;

struct PseudoLabelSet {
  PseudoLabelOptions options;
  BevGridSpec grid;
  std::vector<PseudoLabelGrid> frames;

  std::size_t valid_cells() const {
    std::size_t n = 0;
    for (const auto& f : frames) n += f.valid_count();
    return n;
  }
};

inline PseudoLabelSet make_pseudo_labels(const Scene& s, const PseudoLabelOptions& opt = {}) {
  const auto prov = scene_provider(s);
  return {opt, s.config.grid, build_pseudo_labels(s.frames, prov, s.config.grid, opt)};
}

// dir/pseudo.json plus dir/<k>.bin (f64 [R, R, C]) and dir/<k>.mask.bin (u8 [R, R]).
inline void write_pseudo_labels(const std::filesystem::path& dir, const PseudoLabelSet& set) {
  std::filesystem::create_directories(dir);
  nlohmann::json frames = nlohmann::json::array();
  for (std::size_t k = 0; k < set.frames.size(); ++k) {
    const auto& f = set.frames[k];
    const std::string g = std::to_string(k) + ".bin", m = std::to_string(k) + ".mask.bin";
    io::write_grid(dir / g, f.grid, io::DType::kF64);
    const std::vector<double> mask(f.valid.begin(), f.valid.end());
    io::write_array(dir / m, {f.grid.height, f.grid.width}, mask, io::DType::kU8);
    frames.push_back({{"grid", g}, {"mask", m}, {"valid", f.valid_count()}});
  }
  const nlohmann::json j = {{"format", kPseudoFormat},
                            {"version", kPseudoVersion},
                            {"options",
                             {{"accumulate", set.options.accumulate},
                              {"dynamic", set.options.dynamic},
                              {"causal", set.options.causal}}},
                            {"grid", io::grid_to_json(set.grid)},
                            {"valid_cells", set.valid_cells()},
                            {"frames", frames}};
  io::write_file(dir / "pseudo.json", j.dump(2) + "\n");
}

inline PseudoLabelSet read_pseudo_labels(const std::filesystem::path& dir) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(io::read_file(dir / "pseudo.json"));
  } catch (const nlohmann::json::exception& e) {
    throw IoError("bad pseudo-label manifest: " + std::string(e.what()));
  }
  if (j.value("format", "") != kPseudoFormat) throw IoError("not a pseudo-label set: " + dir.string());
  if (j.value("version", 0) != kPseudoVersion) throw VersionError("unsupported pseudo-label version");
  PseudoLabelSet set;
  set.options.accumulate = j.at("options").at("accumulate");
  set.options.dynamic = j.at("options").at("dynamic");
  set.options.causal = j.at("options").at("causal");
  set.grid = io::grid_from_json(j.at("grid"));
  for (const auto& f : j.at("frames")) {
    PseudoLabelGrid p;
    p.grid = io::read_grid(dir / f.at("grid").get<std::string>());
    const auto m = io::read_array(dir / f.at("mask").get<std::string>());
    if (m.shape != Shape{p.grid.height, p.grid.width}) throw DimensionError("pseudo-label mask shape mismatch");
    p.valid.assign(m.values.begin(), m.values.end());
    set.frames.push_back(std::move(p));
  }
  return set;
}

// ---- model inputs and outputs ------------------------------------------------

inline std::vector<FrameInputs> prepare_sequence(const Scene& s, const ModelConfig& mc,
                                                 const std::vector<PseudoLabelGrid>* pseudo = nullptr) {
  if (pseudo && pseudo->size() != s.frames.size()) throw DimensionError("one pseudo-label grid per frame expected");
  const auto prov = scene_provider(s);
  std::vector<FrameInputs> out;
  for (std::size_t i = 0; i < s.frames.size(); ++i)
    out.push_back(prepare_frame(s.frames[i], prov, mc, pseudo ? &(*pseudo)[i] : nullptr));
  return out;
}

inline std::vector<GtBox> all_gt(const Scene& s) {
  std::vector<GtBox> out;
  for (const auto& f : s.frames) out.insert(out.end(), f.gt_boxes.begin(), f.gt_boxes.end());
  return out;
}

// Ground truth as records with score 1, e.g. for an identity evaluation.
inline std::vector<TrackRecord> gt_records(const Scene& s) {
  std::vector<TrackRecord> out;
  for (const auto& g : all_gt(s)) out.push_back({g.frame, g.track_id, g.class_id, 1.0, anchor_from_gt(g)});
  return out;
}

struct RecordStreams {
  std::vector<TrackRecord> detections, tracks;
};

inline RecordStreams flatten(const std::vector<TrackFrame>& frames) {
  RecordStreams r;
  for (const auto& f : frames) {
    r.detections.insert(r.detections.end(), f.detections.begin(), f.detections.end());
    r.tracks.insert(r.tracks.end(), f.tracks.begin(), f.tracks.end());
  }
  return r;
}

// Makes frame indices and track ids of one scene disjoint from other scenes
// before pooling several scenes into one evaluation.
inline void offset_ids(std::vector<TrackRecord>& recs, int frame_offset, int id_offset) {
  for (auto& r : recs) {
    r.frame += frame_offset;
    if (r.track_id >= 0) r.track_id += id_offset;
  }
}

inline void offset_ids(std::vector<GtBox>& gts, int frame_offset, int id_offset) {
  for (auto& g : gts) {
    g.frame += frame_offset;
    g.track_id += id_offset;
  }
}

}  // namespace bev
