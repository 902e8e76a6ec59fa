// Command-line front end: scene generation, pseudo-labels, training,
// inference, evaluation and rendering. Exit codes: 0 ok, 1 usage, 2 runtime.
// Errors are reported on stderr as "error: <kind>: <message>".

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <spdlog/cfg/env.h>
#include <spdlog/sinks/stdout_sinks.h>
#include <spdlog/spdlog.h>

#include "CLI11.hpp"

#include "bevtrack/metrics.hpp"
#include "bevtrack/pipeline.hpp"
#include "bevtrack/render.hpp"
#include "bevtrack/scene/generator.hpp"
#include "bevtrack/trainer.hpp"

namespace fs = std::filesystem;

namespace {

constexpr const char* kPseudoDir = "pseudolabels";

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct GenArgs {
  std::uint64_t seed = 0;
  int frames = 10, objects = 3, cameras = 6;
  std::string out;
};

struct PseudoArgs {
  std::string scene, out;
  bool no_accumulate = false, no_dynamic = false, causal = false;
};

struct TrainArgs {
  std::vector<std::string> scenes;
  std::string out;
  int steps = 1000, warmup = 500;
  double lr = 2e-4, distill_weight = 7.0;
  bool adam = false, no_bev = false, no_pv = false;
  std::uint64_t seed = 7;
};

struct InferArgs {
  std::string scene, checkpoint, out;
  double tau = 0.4;
};

struct EvalArgs {
  std::string tracks, scene, detections, csv;
};

struct RenderArgs {
  std::string input, out, mask, scene;
  std::optional<int> frame;
  int pixels_per_cell = 8;
};

struct ExportArgs {
  std::string scene, out;
};

void run_gen(const GenArgs& a) {
  bev::SceneConfig c;
  c.seed = a.seed;
  c.n_frames = a.frames;
  c.n_objects = a.objects;
  c.n_cameras = a.cameras;
  const auto s = bev::generate_scene(c);
  bev::io::write_dataset(s, a.out);
  spdlog::info("wrote {} frames with {} objects to {}", s.frames.size(), a.objects, a.out);
}

void run_pseudo(const PseudoArgs& a) {
  const auto s = bev::io::read_dataset(a.scene);
  bev::PseudoLabelOptions opt;
  opt.accumulate = !a.no_accumulate;
  opt.dynamic = !a.no_dynamic;
  opt.causal = a.causal;
  const auto set = bev::make_pseudo_labels(s, opt);
  const fs::path out = a.out.empty() ? fs::path(a.scene) / kPseudoDir : fs::path(a.out);
  bev::write_pseudo_labels(out, set);
  std::cout << "valid_cells " << set.valid_cells() << "\n";
  spdlog::info("wrote {} pseudo-label grids to {}", set.frames.size(), out.string());
}

// Pseudo-labels from <scene>/pseudolabels when present, otherwise built with the defaults.
bev::PseudoLabelSet pseudo_for(const bev::Scene& s, const fs::path& dir) {
  const auto p = dir / kPseudoDir;
  if (fs::exists(p / "pseudo.json")) return bev::read_pseudo_labels(p);
  spdlog::info("no pseudo-labels under {}, building them with the defaults", dir.string());
  return bev::make_pseudo_labels(s);
}

void check_compatible(const bev::ModelConfig& mc, const bev::Scene& s) {
  const auto want = bev::model_config_for(s);
  if (mc.cameras != want.cameras || mc.image_channels != want.image_channels ||
      bev::io::grid_to_json(mc.grid) != bev::io::grid_to_json(want.grid))
    throw bev::DimensionError("scene rig or BEV grid does not match the model");
}

void run_train(const TrainArgs& a) {
  if (a.no_bev && a.no_pv) throw UsageError("--no-bev and --no-pv together leave no feature source");
  std::vector<bev::Scene> scenes;
  for (const auto& d : a.scenes) scenes.push_back(bev::io::read_dataset(d));
  bev::ModelConfig mc = bev::model_config_for(scenes.front());
  mc.use_bev = !a.no_bev;
  mc.use_pv = !a.no_pv;
  mc.seed = a.seed;
  for (const auto& s : scenes) check_compatible(mc, s);

  bev::TrainConfig tc;
  tc.steps = a.steps;
  tc.lr = a.lr;
  tc.warmup = a.warmup;
  tc.optimizer = a.adam ? bev::OptimizerKind::kAdam : bev::OptimizerKind::kSgd;
  tc.weights.distill = a.distill_weight;
  tc.validate();
  if (!(a.lr > 0.0)) throw UsageError("--lr must be positive");

  std::vector<std::vector<bev::FrameInputs>> seqs;
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    if (mc.use_bev) {
      const auto pseudo = pseudo_for(scenes[i], a.scenes[i]);
      seqs.push_back(bev::prepare_sequence(scenes[i], mc, &pseudo.frames));
    } else {
      seqs.push_back(bev::prepare_sequence(scenes[i], mc));
    }
  }

  fs::create_directories(a.out);
  std::ofstream log(fs::path(a.out) / "loss.csv");
  if (!log) throw bev::IoError("cannot write loss log in " + a.out);
  log << "step,sequence,frame,lr,grad_norm,total,det,distill,depth\n";
  auto ps = bev::init_params(mc);
  bev::train_sequence(ps, mc, tc, seqs, [&](const bev::StepLog& s) {
    char buf[256];
    std::snprintf(buf, sizeof buf, "%d,%d,%d,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n", s.step, s.sequence, s.frame, s.lr,
                  s.grad_norm, s.loss.total, s.loss.det, s.loss.distill, s.loss.depth);
    log << buf;
    if (s.step % 50 == 0 || s.step + 1 == tc.steps)
      spdlog::info("step {} loss {:.4f} (det {:.4f} distill {:.4f} depth {:.4f})", s.step, s.loss.total, s.loss.det,
                   s.loss.distill, s.loss.depth);
  });
  const nlohmann::json extra = {{"steps", tc.steps}, {"lr", tc.lr}, {"warmup", tc.warmup}, {"adam", a.adam},
                                {"distill_weight", tc.weights.distill}, {"scenes", a.scenes.size()}};
  bev::save_checkpoint(a.out, ps, mc, extra);
  spdlog::info("wrote checkpoint to {}", a.out);
}

void run_infer(const InferArgs& a) {
  const auto ck = bev::load_checkpoint(a.checkpoint);
  const auto s = bev::io::read_dataset(a.scene);
  check_compatible(ck.config, s);
  bev::TrackerConfig tc;
  tc.tau = a.tau;
  const auto out = bev::flatten(bev::run_sequence(ck.params, ck.config, bev::prepare_sequence(s, ck.config), tc));
  const fs::path dir = a.out.empty() ? fs::path(".") : fs::path(a.out);
  fs::create_directories(dir);
  bev::write_records((dir / "detections.txt").string(), out.detections);
  bev::write_records((dir / "tracks.txt").string(), out.tracks);
  spdlog::info("{} detections, {} track records", out.detections.size(), out.tracks.size());
}

void run_eval(const EvalArgs& a) {
  const auto s = bev::io::read_dataset(a.scene);
  const auto tracks = bev::read_records(a.tracks);
  const auto dets = a.detections.empty() ? tracks : bev::read_records(a.detections);
  const auto rep = bev::evaluate(dets, tracks, bev::all_gt(s));
  bev::write_report_text(std::cout, rep);
  if (!a.csv.empty()) {
    std::ofstream f(a.csv);
    if (!f) throw bev::IoError("cannot write " + a.csv);
    bev::write_report_csv(f, rep);
  }
}

void run_render(const RenderArgs& a) {
  const fs::path in(a.input);
  if (in.extension() == ".bin") {
    const auto g = bev::io::read_grid(in);
    std::vector<std::uint8_t> mask;
    if (!a.mask.empty()) {
      const auto m = bev::io::read_array(a.mask);
      mask.assign(m.values.begin(), m.values.end());
    }
    bev::write_ppm(a.out, bev::render_grid(g, a.mask.empty() ? nullptr : &mask, a.pixels_per_cell));
  } else {
    const auto recs = bev::read_records(a.input);
    const bev::BevGridSpec grid = a.scene.empty() ? bev::BevGridSpec{} : bev::io::read_dataset(a.scene).config.grid;
    bev::io::write_file(a.out, bev::render_records_svg(recs, grid, a.frame));
  }
  spdlog::info("wrote {}", a.out);
}

void run_export(const ExportArgs& a) { bev::write_records(a.out, bev::gt_records(bev::io::read_dataset(a.scene))); }

int fail(const char* kind, const std::string& msg, int code) {
  std::cerr << "error: " << kind << ": " << msg << "\n";
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  // progress goes to stderr; SPDLOG_LEVEL (e.g. "warn", "debug") sets the verbosity
  spdlog::set_default_logger(spdlog::stderr_logger_mt("bevtrack"));
  spdlog::set_pattern("[%l] %v");
  spdlog::cfg::load_env_levels();

  CLI::App app{"Dual-view BEV detection and tracking on synthetic scenes"};
  app.require_subcommand(1);

  GenArgs gen;
  auto* g = app.add_subcommand("gen", "generate a synthetic scene");
  g->add_option("--seed", gen.seed, "scene seed");
  g->add_option("--frames", gen.frames, "number of frames")->check(CLI::PositiveNumber);
  g->add_option("--objects", gen.objects, "number of moving objects")->check(CLI::NonNegativeNumber);
  g->add_option("--cameras", gen.cameras, "number of cameras")->check(CLI::PositiveNumber);
  g->add_option("--out", gen.out, "output scene directory")->required();

  PseudoArgs pseudo;
  auto* p = app.add_subcommand("pseudo", "build BEV pseudo-labels for a scene");
  p->add_option("scene", pseudo.scene, "scene directory")->required()->check(CLI::ExistingDirectory);
  p->add_option("--out", pseudo.out, "output directory (default <scene>/pseudolabels)");
  p->add_flag("--no-accumulate", pseudo.no_accumulate, "only points of the reference frame");
  p->add_flag("--no-dynamic", pseudo.no_dynamic, "drop object-centric clouds");
  p->add_flag("--causal", pseudo.causal, "only frames up to the reference frame");

  TrainArgs train;
  auto* t = app.add_subcommand("train", "train a model on one or more scenes");
  t->add_option("scenes", train.scenes, "scene directories")->required()->check(CLI::ExistingDirectory);
  t->add_option("--out", train.out, "checkpoint directory")->required();
  t->add_option("--steps", train.steps, "optimisation steps")->check(CLI::NonNegativeNumber);
  t->add_option("--lr", train.lr, "base learning rate");
  t->add_option("--warmup", train.warmup, "linear warmup steps")->check(CLI::NonNegativeNumber);
  t->add_flag("--adam", train.adam, "adaptive optimiser instead of momentum SGD");
  t->add_option("--distill-weight", train.distill_weight, "distillation loss weight (sweep 0, 3, 7, 14)")
      ->check(CLI::NonNegativeNumber);
  t->add_flag("--no-bev", train.no_bev, "drop the BEV network");
  t->add_flag("--no-pv", train.no_pv, "drop PV aggregation");
  t->add_option("--seed", train.seed, "parameter initialisation seed");

  InferArgs infer;
  auto* i = app.add_subcommand("infer", "detect and track with a checkpoint");
  i->add_option("scene", infer.scene, "scene directory")->required()->check(CLI::ExistingDirectory);
  i->add_option("checkpoint", infer.checkpoint, "checkpoint directory")->required()->check(CLI::ExistingDirectory);
  i->add_option("--out", infer.out, "output directory for detections.txt and tracks.txt");
  i->add_option("--tau", infer.tau, "track confidence threshold")->check(CLI::Range(0.0, 1.0));

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "score track records against a scene");
  e->add_option("tracks", ev.tracks, "track records")->required()->check(CLI::ExistingFile);
  e->add_option("scene", ev.scene, "scene directory")->required()->check(CLI::ExistingDirectory);
  e->add_option("--detections", ev.detections, "detection records (default: the tracks)")->check(CLI::ExistingFile);
  e->add_option("--csv", ev.csv, "also write the report as CSV");

  RenderArgs render;
  auto* r = app.add_subcommand("render", "top-down image of a grid (.bin, PPM) or records (SVG)");
  r->add_option("input", render.input, "grid or record file")->required()->check(CLI::ExistingFile);
  r->add_option("--out", render.out, "output image")->required();
  r->add_option("--mask", render.mask, "cell mask for a grid")->check(CLI::ExistingFile);
  r->add_option("--scene", render.scene, "scene whose BEV range frames the records")->check(CLI::ExistingDirectory);
  r->add_option("--frame", render.frame, "draw a single frame");
  r->add_option("--pixels-per-cell", render.pixels_per_cell, "grid upscaling")->check(CLI::PositiveNumber);

  ExportArgs ex;
  auto* x = app.add_subcommand("export-gt", "ground truth as track records");
  x->add_option("scene", ex.scene, "scene directory")->required()->check(CLI::ExistingDirectory);
  x->add_option("--out", ex.out, "record file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& s) {
    return app.exit(s);
  } catch (const CLI::ParseError& err) {
    return fail("usage", err.what(), 1);
  }

  try {
    if (*g) run_gen(gen);
    if (*p) run_pseudo(pseudo);
    if (*t) run_train(train);
    if (*i) run_infer(infer);
    if (*e) run_eval(ev);
    if (*r) run_render(render);
    if (*x) run_export(ex);
  } catch (const UsageError& err) {
    return fail("usage", err.what(), 1);
  } catch (const bev::Error& err) {
    return fail(err.kind(), err.what(), 2);
  } catch (const std::exception& err) {
    return fail("runtime", err.what(), 2);
  }
  return 0;
}
