#pragma once

// Sequential per-frame training with temporal memory, optimizers and the
// learning-rate schedule, gradient clipping, checkpoints, BEV augmentation,
// and sequence inference.

#include <cmath>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "json.hpp"

#include "bevtrack/error.hpp"
#include "bevtrack/losses.hpp"
#include "bevtrack/model.hpp"
#include "bevtrack/scene/array_io.hpp"
#include "bevtrack/scene/dataset.hpp"
#include "bevtrack/tracker.hpp"

namespace bev {

enum class OptimizerKind { kSgd, kAdam };

struct TrainConfig {
  double lr = 2e-4;
  int warmup = 500;
  bool cosine = true;
  double clip = 5.0;
  int steps = 1000;
  OptimizerKind optimizer = OptimizerKind::kSgd;
  double momentum = 0.9;
  double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
  LossWeights weights;
  DetLossConfig det;
  DepthLossConfig depth;
  TrackerConfig tracker;

  void validate() const {
    if (!(lr >= 0.0)) throw DomainError("learning rate must be non-negative");
    if (!(clip > 0.0)) throw DomainError("clip norm must be positive");
    if (steps < 0 || warmup < 0) throw DomainError("steps and warmup must be non-negative");
    weights.validate();
  }
};

// Linear warmup, then cosine decay to zero at `steps`.
inline double learning_rate(const TrainConfig& cfg, int step) {
  if (step < cfg.warmup) return cfg.lr * static_cast<double>(step + 1) / static_cast<double>(cfg.warmup);
  if (!cfg.cosine || cfg.steps <= cfg.warmup) return cfg.lr;
  const double x = static_cast<double>(step - cfg.warmup) / static_cast<double>(cfg.steps - cfg.warmup);
  return cfg.lr * 0.5 * (1.0 + std::cos(kPi * std::min(1.0, x)));
}

inline double global_norm(const std::vector<Tensor>& g) {
  double s = 0.0;
  for (const auto& t : g)
    for (double v : t.vec()) s += v * v;
  return std::sqrt(s);
}

// Rescales the gradients to norm <= max_norm; returns the norm before clipping.
inline double clip_gradients(std::vector<Tensor>& g, double max_norm) {
  const double n = global_norm(g);
  if (n > max_norm) {
    const double f = max_norm / n;
    for (auto& t : g)
      for (auto& v : t.data()) v *= f;
  }
  return n;
}

class Optimizer {
 public:
  Optimizer(const ParamSet& ps, const TrainConfig& cfg) : cfg_(cfg) {
    for (const auto& v : ps.values()) {
      m_.emplace_back(v.shape());
      if (cfg.optimizer == OptimizerKind::kAdam) v_.emplace_back(v.shape());
    }
  }

  void step(ParamSet& ps, const std::vector<Tensor>& grads, double lr) {
    ++t_;
    for (std::size_t i = 0; i < ps.size(); ++i) {
      auto p = ps.values()[i].data();
      const auto& g = grads[i].vec();
      auto m = m_[i].data();
      if (cfg_.optimizer == OptimizerKind::kSgd) {
        for (std::size_t k = 0; k < p.size(); ++k) {
          m[k] = cfg_.momentum * m[k] + g[k];
          p[k] -= lr * m[k];
        }
      } else {
        auto v = v_[i].data();
        const double c1 = 1.0 - std::pow(cfg_.beta1, t_), c2 = 1.0 - std::pow(cfg_.beta2, t_);
        for (std::size_t k = 0; k < p.size(); ++k) {
          m[k] = cfg_.beta1 * m[k] + (1.0 - cfg_.beta1) * g[k];
          v[k] = cfg_.beta2 * v[k] + (1.0 - cfg_.beta2) * g[k] * g[k];
          p[k] -= lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + cfg_.adam_eps);
        }
      }
    }
  }

 private:
  TrainConfig cfg_;
  std::vector<Tensor> m_, v_;
  int t_ = 0;
};

// ---- losses of one forward pass ----------------------------------------------

struct FrameLoss {
  ad::Var total;
  LossBreakdown parts;
};

inline FrameLoss compute_losses(const ForwardOutput& fwd, const FrameInputs& in, const ModelConfig& mcfg,
                                const TrainConfig& cfg) {
  ad::Tape& t = *fwd.decode.layers.front().anchors.tape();
  FrameLoss out;
  auto det = det_loss(fwd.decode, in.gt, cfg.det);
  ad::Var distill = t.constant({1}, {0.0}), depth = t.constant({1}, {0.0});
  if (mcfg.use_bev) {
    if (in.pseudo && cfg.weights.distill > 0.0) {
      auto d = distill_loss(fwd.distill_pred, *in.pseudo);
      distill = d.loss;
      out.parts.distill_cells = d.cells;
    }
    auto dl = depth_loss(fwd.depth_probs, fwd.aux_depth, in.depth, cfg.depth);
    depth = dl.total;
    out.parts.depth_bce = dl.bce.item();
    out.parts.depth_aux = dl.aux_l1.item();
  }
  out.total = total_loss(det.total, distill, depth, cfg.weights);
  out.parts.total = out.total.item();
  out.parts.det = det.total.item();
  out.parts.distill = distill.item();
  out.parts.depth = depth.item();
  out.parts.cls = det.cls.item();
  out.parts.box = det.box.item();
  out.parts.yawness = det.yawness.item();
  out.parts.centerness = det.centerness.item();
  return out;
}

// ---- training ----------------------------------------------------------------

struct StepLog {
  int step = 0;
  int sequence = 0;
  int frame = 0;
  double lr = 0.0;
  double grad_norm = 0.0;
  LossBreakdown loss;
};

using StepCallback = std::function<void(const StepLog&)>;

// One optimisation step on one frame; updates the memory with the decoded queries.
inline StepLog train_step(ParamSet& ps, const ModelConfig& mcfg, const TrainConfig& cfg, const FrameInputs& in,
                          InstanceMemory& mem, Optimizer& opt, int step) {
  ad::Tape tape;
  BoundParams p(tape, ps, true);
  const auto propagated = propagate(mem, in.ego_pose, in.timestamp);
  const auto fwd = forward(p, mcfg, in, propagated);
  auto loss = compute_losses(fwd, in, mcfg, cfg);
  StepLog log;
  log.step = step;
  log.frame = in.frame_index;
  log.loss = loss.parts;
  if (!std::isfinite(loss.parts.total))
    throw DivergenceError("non-finite loss at step " + std::to_string(step) + " (det " + std::to_string(loss.parts.det) +
                          ", distill " + std::to_string(loss.parts.distill) + ", depth " +
                          std::to_string(loss.parts.depth) + ")");
  tape.backward(loss.total);
  auto grads = p.grads();
  log.grad_norm = clip_gradients(grads, cfg.clip);
  if (!std::isfinite(log.grad_norm)) throw DivergenceError("non-finite gradient at step " + std::to_string(step));
  log.lr = learning_rate(cfg, step);
  opt.step(ps, grads, log.lr);
  TrackerConfig tc = cfg.tracker;
  tc.n_temporal = mcfg.decoder.n_temporal;
  update_ids(collect_queries(fwd.decode), propagated, mem, tc, in.ego_pose, in.timestamp, in.frame_index);
  return log;
}

// Iterates the sequences frame by frame, one step per frame, cycling until
// cfg.steps steps are done. The memory is reset at the start of every sequence.
inline std::vector<StepLog> train_sequence(ParamSet& ps, const ModelConfig& mcfg, const TrainConfig& cfg,
                                           const std::vector<std::vector<FrameInputs>>& sequences,
                                           const StepCallback& on_step = {}) {
  cfg.validate();
  mcfg.validate();
  if (sequences.empty()) throw DomainError("train_sequence needs at least one sequence");
  Optimizer opt(ps, cfg);
  std::vector<StepLog> logs;
  InstanceMemory mem;
  int step = 0;
  while (step < cfg.steps) {
    for (std::size_t s = 0; s < sequences.size() && step < cfg.steps; ++s) {
      mem.reset();
      for (const auto& in : sequences[s]) {
        if (step >= cfg.steps) break;
        auto log = train_step(ps, mcfg, cfg, in, mem, opt, step);
        log.sequence = static_cast<int>(s);
        if (on_step) on_step(log);
        logs.push_back(log);
        ++step;
      }
    }
  }
  return logs;
}

// Runs the model over a sequence with the tracker; one TrackFrame per frame.
inline std::vector<TrackFrame> run_sequence(const ParamSet& ps, const ModelConfig& mcfg,
                                            const std::vector<FrameInputs>& frames, const TrackerConfig& tcfg = {}) {
  std::vector<TrackFrame> out;
  InstanceMemory mem;
  TrackerConfig tc = tcfg;
  tc.n_temporal = mcfg.decoder.n_temporal;
  for (const auto& in : frames) {
    ad::Tape tape;
    BoundParams p(tape, ps, false);
    const auto propagated = propagate(mem, in.ego_pose, in.timestamp);
    const auto fwd = forward(p, mcfg, in, propagated);
    out.push_back(update_ids(collect_queries(fwd.decode), propagated, mem, tc, in.ego_pose, in.timestamp, in.frame_index));
  }
  return out;
}

// ---- checkpoints -------------------------------------------------------------

inline constexpr const char* kCheckpointFormat = "bevtrack-checkpoint";
inline constexpr int kCheckpointVersion = 1;

inline nlohmann::json model_config_to_json(const ModelConfig& c) {
  return {{"n_queries", c.decoder.n_queries}, {"n_temporal", c.decoder.n_temporal},
          {"temporal_blocks", c.decoder.temporal_blocks}, {"embed", c.decoder.embed},
          {"learned_keypoints", c.decoder.learned_keypoints}, {"heads", c.decoder.heads},
          {"depth_bins", c.lift.depth_bins}, {"depth_min", c.lift.depth_min}, {"depth_max", c.lift.depth_max},
          {"lift_scale", c.lift.scale}, {"bev_channels", c.lift.bev_channels},
          {"encoder_blocks", c.lift.encoder_blocks}, {"depth_hidden", c.lift.depth_hidden},
          {"grid", io::grid_to_json(c.grid)}, {"cameras", c.cameras}, {"image_channels", c.image_channels},
          {"foundation_channels", c.foundation_channels}, {"use_bev", c.use_bev}, {"use_pv", c.use_pv},
          {"pv_scales", c.pv_scales}, {"seed", c.seed}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.decoder.n_queries = j.at("n_queries");
  c.decoder.n_temporal = j.at("n_temporal");
  c.decoder.temporal_blocks = j.at("temporal_blocks");
  c.decoder.embed = j.at("embed");
  c.decoder.learned_keypoints = j.at("learned_keypoints");
  c.decoder.heads = j.at("heads");
  c.lift.depth_bins = j.at("depth_bins");
  c.lift.depth_min = j.at("depth_min");
  c.lift.depth_max = j.at("depth_max");
  c.lift.scale = j.at("lift_scale");
  c.lift.bev_channels = j.at("bev_channels");
  c.lift.encoder_blocks = j.at("encoder_blocks");
  c.lift.depth_hidden = j.at("depth_hidden");
  c.grid = io::grid_from_json(j.at("grid"));
  c.cameras = j.at("cameras");
  c.image_channels = j.at("image_channels");
  c.foundation_channels = j.at("foundation_channels");
  c.use_bev = j.at("use_bev");
  c.use_pv = j.at("use_pv");
  c.pv_scales = j.at("pv_scales").get<std::vector<double>>();
  c.seed = j.at("seed");
  c.validate();
  return c;
}

// dir/checkpoint.json plus one f64 array per parameter under dir/params/.
inline void save_checkpoint(const std::filesystem::path& dir, const ParamSet& ps, const ModelConfig& cfg,
                            const nlohmann::json& extra = nlohmann::json::object()) {
  std::filesystem::create_directories(dir / "params");
  nlohmann::json params = nlohmann::json::array();
  for (std::size_t i = 0; i < ps.size(); ++i) {
    const std::string file = "params/" + std::to_string(i) + ".bin";
    const std::string bytes = io::encode_array(ps.values()[i].shape(), ps.values()[i].data(), io::DType::kF64);
    io::write_file(dir / file, bytes);
    params.push_back({{"name", ps.names()[i]}, {"file", file}, {"crc32", io::crc32_of(bytes)}});
  }
  nlohmann::json m = {{"format", kCheckpointFormat}, {"version", kCheckpointVersion},
                      {"model", model_config_to_json(cfg)}, {"params", params}, {"extra", extra}};
  io::write_file(dir / "checkpoint.json", m.dump(2) + "\n");
}

struct Checkpoint {
  ModelConfig config;
  ParamSet params;
  nlohmann::json extra;
};

inline Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(io::read_file(dir / "checkpoint.json"));
  } catch (const nlohmann::json::exception& e) {
    throw IoError("bad checkpoint manifest: " + std::string(e.what()));
  }
  if (m.value("format", "") != kCheckpointFormat) throw IoError("not a checkpoint: " + dir.string());
  if (m.value("version", 0) != kCheckpointVersion)
    throw VersionError("unsupported checkpoint version " + std::to_string(m.value("version", 0)));
  Checkpoint ck;
  ck.config = model_config_from_json(m.at("model"));
  ck.extra = m.value("extra", nlohmann::json::object());
  const ParamSet expected = init_params(ck.config);
  for (const auto& p : m.at("params")) {
    const std::string bytes = io::read_file(dir / p.at("file").get<std::string>());
    if (io::crc32_of(bytes) != p.at("crc32").get<std::uint32_t>()) throw ChecksumError("checksum mismatch in " + p.at("file").get<std::string>());
    auto a = io::decode_array(bytes, p.at("file").get<std::string>());
    const std::string name = p.at("name");
    if (a.shape != expected.get(name).shape()) throw DimensionError("parameter " + name + " has the wrong shape");
    ck.params.add(name, Tensor(a.shape, std::move(a.values)));
  }
  if (ck.params.size() != expected.size()) throw IoError("checkpoint is missing parameters");
  return ck;
}

// ---- augmentation ------------------------------------------------------------

// Applies a scaled rigid BEV transform to everything in the frame. Cameras are
// moved so that every scene point projects to the same pixel; with a flip the
// camera x axis is mirrored as well, which mirrors the image (u -> 2 cx - u).
inline Frame augment_bev(const Frame& in, const BevAugmentation& aug) {
  if (!(aug.scale > 0.0)) throw DomainError("augmentation scale must be positive");
  if (aug.is_identity()) return in;
  Frame f = in;
  const Mat3 a = aug.linear();
  for (auto& p : f.lidar_points) p = aug.apply(p);
  for (auto& g : f.gt_boxes) {
    const Box3 b = aug.apply(g.box());
    g.center = b.center;
    g.width = b.width;
    g.length = b.length;
    g.height = b.height;
    g.yaw = b.yaw;
    g.velocity = a * g.velocity;
  }
  for (auto& b : f.static_boxes) b = aug.apply(b);
  Mat3 mirror = Mat3::Identity();
  if (aug.flip) mirror(0, 0) = -1.0;
  const Mat3 a_inv_scaled = aug.scale * a.inverse();  // rotation part of A^-1 (with the flip)
  for (auto& cam : f.cameras) {
    const Mat3 r = mirror * cam.camera_from_ego.rotation * a_inv_scaled;
    const Vec3 t = aug.scale * (mirror * cam.camera_from_ego.translation);
    cam.camera_from_ego = {r, t};
  }
  f.augmentation = in.augmentation.followed_by(aug);
  return f;
}

}  // namespace bev
