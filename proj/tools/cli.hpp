#pragma once

// Command-line surface: options, config-file mapping and the command bodies.
// Config files use the same names as the long flags, one [section] per
// command; flags given on the command line win over config values.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "rigidflow/rigidflow.hpp"

namespace rigidflow::cli {

namespace fs = std::filesystem;

/// Training allocates and frees the same large buffers every iteration; keep
/// them in the heap instead of mapping and unmapping pages each time.
inline void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 256 << 20);
  mallopt(M_TRIM_THRESHOLD, 512 << 20);
#endif
}

struct GenOptions {
  std::string scene = "fall+spin";  // preset name or JSON file with an "objects" list
  int particles = 300;              // total; 0 keeps the preset counts
  int frames = kPresetFrames;
  double horizon = kPresetHorizon;
  double noise = 0.0;
  double split = 0.75;
  std::string out;
};

struct TrainOptions {
  std::string dataset;
  std::string out;
  TrainConfig cfg;
  std::vector<std::string> ablations;
  int log_every = 100;
};

struct PredictOptions {
  std::string checkpoint;
  std::string out;
  std::string like;  // take output times from this dataset
  double horizon = kPresetHorizon;
  int steps = 20;
};

struct EvalOptions {
  std::string pred;
  std::string gt;
  std::string json;
};

struct SegmentOptions {
  std::string checkpoint;
  std::string dataset;  // trajectories for the ogc method; defaults to model predictions
  std::string out;
  std::string method = "physics";
  double lambda = 0.0;
  int clusters = 8;
  int samples = 10;  // predicted frames used by ogc without a dataset
  ObjectCodeConfig ogc;
};

struct DivcheckOptions {
  std::string checkpoint;
  int probes = 1000;
  double tolerance = 1e-8;
};

struct AblateOptions {
  std::string dataset;
  std::string extrapolation;
  std::string out;
  std::vector<std::string> flags;  // empty means all
  int iterations = 0;              // 0 keeps the [train] value
};

struct Options {
  std::uint64_t seed = 0;
  bool deterministic = true;
  GenOptions gen;
  TrainOptions train;
  PredictOptions predict;
  EvalOptions eval;
  SegmentOptions segment;
  DivcheckOptions divcheck;
  AblateOptions ablate;
};

inline void add_train_config(CLI::App* c, TrainConfig& t) {
  c->add_option("--iterations", t.iterations);
  c->add_option("--learning-rate", t.learning_rate);
  c->add_option("--decay-at", t.decay_at, "fraction of iterations before the rate decays");
  c->add_option("--decay-factor", t.decay_factor);
  c->add_option("--batch", t.batch_timestamps, "timestamps per iteration");
  c->add_option("--dt", t.dt, "transport step, also the frame gap");
  c->add_option("--lambda-deform", t.lambda_deform);
  c->add_option("--lambda-vel", t.lambda_vel);
  c->add_option("--lambda-rotation", t.lambda_rotation, "orientation term; ignored without orientations");
  ModelConfig& m = t.model;
  c->add_option("--code-dim", m.code_dim, "physics code length L");
  c->add_option("--bottleneck", m.bottleneck, "motion patterns K");
  c->add_option("--encoding-degree", m.encoding_degree);
  c->add_option("--code-width", m.code_width);
  c->add_option("--code-layers", m.code_layers);
  c->add_option("--neck-multiplier", m.neck_multiplier);
  c->add_option("--weight-width", m.weight_width);
  c->add_option("--weight-layers", m.weight_layers);
  c->add_option("--weight-skip", m.weight_skip);
  c->add_option("--deform-width", m.deform_width);
  c->add_option("--deform-layers", m.deform_layers);
  c->add_option("--deform-skip", m.deform_skip);
}

inline std::unique_ptr<CLI::App> make_app(Options& o) {
  auto app = std::make_unique<CLI::App>("Divergence-free particle velocity fields: fit, extrapolate, segment.", "rigidflow");
  app->allow_config_extras(CLI::config_extras_mode::error);
  app->option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  app->set_config("--config", "", "TOML config file");
  app->add_option("--seed", o.seed, "seed for every random choice");
  app->add_option("--deterministic", o.deterministic);

  auto* gen = app->add_subcommand("gen", "generate a synthetic scene and split it");
  gen->add_option("--scene", o.gen.scene, "preset (A, B, C, fall+spin, oscillate, screw) or JSON file");
  gen->add_option("--particles", o.gen.particles);
  gen->add_option("--frames", o.gen.frames);
  gen->add_option("--horizon", o.gen.horizon);
  gen->add_option("--noise", o.gen.noise);
  gen->add_option("--split", o.gen.split, "training fraction of the frames");
  gen->add_option("--out", o.gen.out, "run directory");

  auto* train = app->add_subcommand("train", "fit a model to a dataset");
  train->add_option("--dataset", o.train.dataset);
  train->add_option("--out", o.train.out, "run directory");
  train->add_option("--ablation", o.train.ablations, "ablation flags")->delimiter(',')->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);
  train->add_option("--log-every", o.train.log_every);
  add_train_config(train, o.train.cfg);

  auto* predict = app->add_subcommand("predict", "predict trajectories from a checkpoint");
  predict->add_option("--checkpoint", o.predict.checkpoint);
  predict->add_option("--out", o.predict.out);
  predict->add_option("--horizon", o.predict.horizon, "last output time");
  predict->add_option("--steps", o.predict.steps, "output frames after the training span; 0 echoes its end");
  predict->add_option("--like", o.predict.like, "use the timestamps of this dataset");

  auto* eval = app->add_subcommand("eval", "compare predicted and reference trajectories");
  eval->add_option("--pred", o.eval.pred);
  eval->add_option("--gt", o.eval.gt);
  eval->add_option("--json", o.eval.json, "also write the metrics here");

  auto* seg = app->add_subcommand("segment", "group particles into objects");
  seg->add_option("--checkpoint", o.segment.checkpoint);
  seg->add_option("--dataset", o.segment.dataset);
  seg->add_option("--out", o.segment.out);
  seg->add_option("--method", o.segment.method)->check(CLI::IsMember({"physics", "ogc"}));
  seg->add_option("--lambda", o.segment.lambda, "position weight in the grouping features");
  seg->add_option("--clusters", o.segment.clusters);
  seg->add_option("--samples", o.segment.samples);
  seg->add_option("--ogc-objects", o.segment.ogc.objects);
  seg->add_option("--ogc-learning-rate", o.segment.ogc.learning_rate);
  seg->add_option("--ogc-iterations", o.segment.ogc.iterations);
  seg->add_option("--ogc-neighbors", o.segment.ogc.neighbors);
  seg->add_option("--ogc-smooth-weight", o.segment.ogc.smooth_weight);

  auto* div = app->add_subcommand("divcheck", "probe the learned field for divergence");
  div->add_option("--checkpoint", o.divcheck.checkpoint);
  div->add_option("--probes", o.divcheck.probes);
  div->add_option("--tolerance", o.divcheck.tolerance);

  auto* abl = app->add_subcommand("ablate", "train the full model and each ablation, compare extrapolation");
  abl->add_option("--dataset", o.ablate.dataset);
  abl->add_option("--extrapolation", o.ablate.extrapolation);
  abl->add_option("--out", o.ablate.out);
  abl->add_option("--flags", o.ablate.flags)->delimiter(',')->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);
  abl->add_option("--iterations", o.ablate.iterations, "override; other settings come from [train]");
  return app;
}

// ---------------------------------------------------------------------------
// Helpers.

inline std::string need(const std::string& value, const char* what) {
  if (value.empty()) throw Error(ErrorKind::Config, std::string("--") + what + " is required");
  return fs::absolute(value).lexically_normal().string();
}

inline std::string need_file(const std::string& value, const char* what) {
  const std::string p = need(value, what);
  if (!fs::is_regular_file(p)) throw Error(ErrorKind::Io, p + " does not exist");
  return p;
}

inline std::string need_dir(const std::string& value, const char* what) { return need(value, what); }

inline void apply_ablations(AblationFlags& a, const std::vector<std::string>& names) {
  for (const auto& n : names) {
    bool* f = ablation_flag(a, n);
    if (!f) throw Error(ErrorKind::Config, "unknown ablation flag '" + n + "'");
    *f = true;
  }
}

inline std::vector<ObjectSpec> load_scene(const GenOptions& g) {
  std::vector<ObjectSpec> objects;
  if (fs::is_regular_file(g.scene)) {
    try {
      const auto j = nlohmann::json::parse(read_file(g.scene));
      j.at("objects").get_to(objects);
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorKind::Config, "scene file " + g.scene + ": " + e.what());
    }
  } else {
    objects = scene_by_name(g.scene).objects;
  }
  if (g.particles < 0) throw Error(ErrorKind::Config, "--particles must be >= 0");
  if (g.particles > 0 && !objects.empty()) {
    const int n = static_cast<int>(objects.size());
    if (g.particles < n) throw Error(ErrorKind::Config, "fewer particles than objects");
    for (int k = 0; k < n; ++k) objects[static_cast<std::size_t>(k)].count = g.particles / n + (k < g.particles % n ? 1 : 0);
  }
  return objects;
}

inline bool has_labels(const std::vector<std::int32_t>& labels) {
  return !labels.empty() && std::all_of(labels.begin(), labels.end(), [](std::int32_t l) { return l >= 0; });
}

inline std::string sci(double v) {
  std::ostringstream s;
  s << std::scientific << std::setprecision(6) << v;
  return s.str();
}

inline std::vector<double> output_times(const Checkpoint& ck, const PredictOptions& p) {
  if (!p.like.empty()) return load_dataset(need_file(p.like, "like")).timestamps;
  if (p.steps < 0) throw Error(ErrorKind::Config, "--steps must be >= 0");
  if (p.steps == 0) return {ck.span_end};
  if (!(p.horizon > ck.span_end)) throw Error(ErrorKind::Config, "--horizon must lie after the training span");
  std::vector<double> t;
  for (int k = 1; k <= p.steps; ++k) t.push_back(ck.span_end + (p.horizon - ck.span_end) * k / p.steps);
  return t;
}

inline double extrapolation_percent(const Checkpoint& ck, const TrajectoryDataset& gt) {
  const TrajectoryDataset pred = predict_dataset(ck, gt.timestamps);
  return compare_trajectories(pred, gt).percent_of_diagonal;
}

// ---------------------------------------------------------------------------
// Commands.

inline int cmd_gen(const Options& o) {
  const std::string dir = need_dir(o.gen.out, "out");
  const auto objects = load_scene(o.gen);
  const TrajectoryDataset full = generate(objects, o.gen.frames, o.gen.horizon, o.gen.noise, o.seed);
  const auto [train, extra] = split(full, o.gen.split);
  RunLock lock(dir);
  save_dataset(fs::path(dir) / "full.rfd", full);
  save_dataset(fs::path(dir) / "train.rfd", train);
  if (extra.frames() > 0) save_dataset(fs::path(dir) / "extrapolation.rfd", extra);
  std::set<int> labels(full.labels.begin(), full.labels.end());
  std::cout << "gen scene=" << o.gen.scene << " particles=" << full.particles << " objects=" << labels.size()
            << " frames=" << full.frames() << " train=" << train.frames() << " extrapolation=" << extra.frames()
            << " seed=" << o.seed << " dir=" << dir << "\n";
  return 0;
}

inline TrainConfig train_config(const Options& o, const std::vector<std::string>& ablations) {
  TrainConfig cfg = o.train.cfg;
  cfg.seed = o.seed;
  cfg.deterministic = o.deterministic;
  apply_ablations(cfg.model.ablation, ablations);
  return cfg;
}

inline int cmd_train(const Options& o) {
  const std::string data_path = need_file(o.train.dataset, "dataset");
  const std::string dir = need_dir(o.train.out, "out");
  const TrajectoryDataset ds = load_dataset(data_path);
  const TrainConfig cfg = train_config(o, o.train.ablations);
  RunLock lock(dir);
  const int every = std::max(1, o.train.log_every);
  TextTable loss({"iteration", "total", "deform", "velocity", "rotation"});
  auto progress = [&](int it, const LossRecord& r) {
    if (it % every != 0 && it + 1 != cfg.iterations) return;
    loss.add({std::to_string(it), sci(r.total), sci(r.deform), sci(r.velocity), sci(r.rotation)});
    std::cout << "iter " << it << " loss " << sci(r.total) << "\n";
  };
  TrainResult res;
  try {
    res = train(ds, cfg, progress);
  } catch (const TrainingDiverged& e) {
    save_checkpoint(fs::path(dir) / "last_good.rfc", make_checkpoint(e.last_good(), cfg, ds));
    write_atomic(fs::path(dir) / "loss.txt", loss.str());
    std::cerr << "training diverged at iteration " << e.iteration() << "; last finite parameters in "
              << (fs::path(dir) / "last_good.rfc").string() << "\n";
    throw;
  }
  save_checkpoint(fs::path(dir) / "checkpoint.rfc", make_checkpoint(std::move(res.model), cfg, ds));
  write_atomic(fs::path(dir) / "loss.txt", loss.str());
  nlohmann::json report = {{"dataset", data_path},
                           {"iterations", cfg.iterations},
                           {"wall_seconds", res.report.wall_seconds},
                           {"final_loss", res.report.losses.empty() ? 0.0 : res.report.losses.back().total},
                           {"config", cfg}};
  write_atomic(fs::path(dir) / "report.json", report.dump(2) + "\n");
  std::cout << "train done in " << fixed3(res.report.wall_seconds) << " s; checkpoint "
            << (fs::path(dir) / "checkpoint.rfc").string() << "\n";
  return 0;
}

inline int cmd_predict(const Options& o) {
  const Checkpoint ck = load_checkpoint(need_file(o.predict.checkpoint, "checkpoint"));
  const std::string out = need(o.predict.out, "out");
  const std::vector<double> times = output_times(ck, o.predict);
  TrajectoryDataset pred = predict_dataset(ck, times);
  pred.seed = ck.train.seed;
  pred.config = nlohmann::json{{"predicted_from", fs::absolute(o.predict.checkpoint).string()}}.dump();
  save_dataset(out, pred);
  std::cout << "predict frames=" << pred.frames() << " particles=" << pred.particles << " t=[" << fixed3(times.front())
            << ", " << fixed3(times.back()) << "] out=" << out << "\n";
  return 0;
}

inline int cmd_eval(const Options& o) {
  const TrajectoryDataset pred = load_dataset(need_file(o.eval.pred, "pred"));
  const TrajectoryDataset gt = load_dataset(need_file(o.eval.gt, "gt"));
  const TrajectoryErrors e = compare_trajectories(pred, gt);
  TextTable t({"frame", "t", "rmse"});
  for (int f = 0; f < gt.frames(); ++f)
    t.add({std::to_string(f), fixed3(gt.timestamps[static_cast<std::size_t>(f)]), fixed3(e.per_frame[static_cast<std::size_t>(f)])});
  std::cout << t.str();
  TextTable s({"rmse", "final_rmse", "pct_of_diagonal"});
  s.add({fixed3(e.overall), fixed3(e.final_frame), fixed3(e.percent_of_diagonal)});
  std::cout << s.str();
  if (!o.eval.json.empty()) {
    const nlohmann::json j = {{"per_frame", e.per_frame},
                              {"rmse", e.overall},
                              {"final_rmse", e.final_frame},
                              {"percent_of_diagonal", e.percent_of_diagonal}};
    write_atomic(need(o.eval.json, "json"), j.dump(2) + "\n");
  }
  return 0;
}

inline int cmd_segment(const Options& o) {
  const SegmentOptions& s = o.segment;
  const Checkpoint ck = load_checkpoint(need_file(s.checkpoint, "checkpoint"));
  std::vector<int> ids;
  if (s.method == "physics") {
    ids = group_by_physics(ck.model, ck.canonical, s.lambda, s.clusters, o.seed);
  } else {
    Matrix p0;
    std::vector<Matrix> frames;
    if (!s.dataset.empty()) {
      const TrajectoryDataset ds = load_dataset(need_file(s.dataset, "dataset"));
      if (ds.frames() < 2) throw Error(ErrorKind::Dataset, "ogc needs at least two frames");
      p0 = ds.frame(0);
      for (int f = 1; f < ds.frames(); ++f) frames.emplace_back(ds.frame(f));
    } else {
      if (s.samples < 1) throw Error(ErrorKind::Config, "--samples must be >= 1");
      std::vector<double> times;
      for (int k = 1; k <= s.samples; ++k) times.push_back(ck.span_end * k / s.samples);
      p0 = ck.canonical;
      frames = predict_positions(ck.model, ck.canonical, times, ck.train.dt, ck.span_end);
    }
    ObjectCodeConfig cfg = s.ogc;
    cfg.seed = o.seed;
    ids = optimize_object_codes(p0, frames, cfg).hard_ids();
  }
  nlohmann::json out = {{"method", s.method}, {"seed", o.seed}, {"ids", ids}};
  if (s.method == "physics") {
    out["lambda"] = s.lambda;
    out["clusters"] = s.clusters;
  }
  std::set<int> groups(ids.begin(), ids.end());
  std::cout << "segment method=" << s.method << " groups=" << groups.size() << " particles=" << ids.size() << "\n";
  if (has_labels(ck.labels)) {
    const SegmentationMetrics m = segmentation_metrics(ids, std::vector<int>(ck.labels.begin(), ck.labels.end()));
    TextTable t({"AP", "PQ", "F1", "Pre", "Rec", "mIoU"});
    t.add({fixed3(m.ap), fixed3(m.pq), fixed3(m.f1), fixed3(m.precision), fixed3(m.recall), fixed3(m.miou)});
    std::cout << t.str();
    out["metrics"] = {{"ap", m.ap}, {"pq", m.pq},     {"f1", m.f1},           {"precision", m.precision},
                      {"recall", m.recall}, {"miou", m.miou}, {"tp", m.tp}, {"fp", m.fp}, {"fn", m.fn}};
  }
  if (!s.out.empty()) write_atomic(need(s.out, "out"), out.dump(2) + "\n");
  return 0;
}

inline int cmd_divcheck(const Options& o) {
  const DivcheckOptions& d = o.divcheck;
  const Checkpoint ck = load_checkpoint(need_file(d.checkpoint, "checkpoint"));
  if (d.probes == 0) {
    std::cout << "divcheck: warning: 0 probes, nothing checked\nPASS\n";
    return 0;
  }
  const auto probes = divergence_probes(ck.model, ck.canonical, d.probes, o.seed, ck.span_end);
  double worst = 0.0;
  int bad = 0;
  for (const auto& p : probes) {
    worst = std::max(worst, std::abs(p.divergence));
    if (!(std::abs(p.divergence) <= d.tolerance)) ++bad;
  }
  std::cout << "divcheck probes=" << probes.size() << " max|div|=" << sci(worst) << " over_tolerance=" << bad
            << " tolerance=" << sci(d.tolerance) << "\n"
            << (bad == 0 ? "PASS" : "FAIL") << "\n";
  return bad == 0 ? 0 : 2;
}

inline int cmd_ablate(const Options& o) {
  const TrajectoryDataset ds = load_dataset(need_file(o.ablate.dataset, "dataset"));
  const TrajectoryDataset extra = load_dataset(need_file(o.ablate.extrapolation, "extrapolation"));
  const std::string dir = need_dir(o.ablate.out, "out");
  std::vector<std::string> flags = o.ablate.flags;
  if (flags.empty()) flags.assign(kAblationNames.begin(), kAblationNames.end());
  for (const auto& f : flags) {
    AblationFlags probe;
    apply_ablations(probe, {f});
  }
  RunLock lock(dir);
  TextTable t({"variant", "extrap_pct_of_diagonal", "train_seconds"});
  nlohmann::json rows = nlohmann::json::array();
  std::vector<std::string> variants = {"full"};
  variants.insert(variants.end(), flags.begin(), flags.end());
  for (const auto& v : variants) {
    TrainConfig cfg = train_config(o, v == "full" ? std::vector<std::string>{} : std::vector<std::string>{v});
    if (o.ablate.iterations > 0) cfg.iterations = o.ablate.iterations;
    std::string pct = "diverged", secs = "-";
    nlohmann::json row = {{"variant", v}};
    try {
      TrainResult res = train(ds, cfg);
      const Checkpoint ck = make_checkpoint(std::move(res.model), cfg, ds);
      save_checkpoint(fs::path(dir) / (v + ".rfc"), ck);
      const double p = extrapolation_percent(ck, extra);
      pct = fixed3(p);
      secs = fixed3(res.report.wall_seconds);
      row["percent_of_diagonal"] = p;
      row["train_seconds"] = res.report.wall_seconds;
    } catch (const TrainingDiverged& e) {
      row["diverged_at"] = e.iteration();
    }
    t.add({v, pct, secs});
    rows.push_back(row);
    std::cout << v << " " << pct << "\n";
  }
  write_atomic(fs::path(dir) / "ablation.txt", t.str());
  write_atomic(fs::path(dir) / "ablation.json", rows.dump(2) + "\n");
  std::cout << t.str();
  return 0;
}

/// Parses arguments and runs one command. Returns the process exit code:
/// 0 success, 1 validation error, 2 numeric failure, 3 I/O error.
inline int run(int argc, const char* const* argv) {
  Options o;
  auto app = make_app(o);
  app->require_subcommand(1);
  try {
    app->parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app->exit(e);
    return code == 0 ? 0 : 1;
  }
  try {
    const std::string cmd = app->get_subcommands().front()->get_name();
    if (cmd == "gen") return cmd_gen(o);
    if (cmd == "train") return cmd_train(o);
    if (cmd == "predict") return cmd_predict(o);
    if (cmd == "eval") return cmd_eval(o);
    if (cmd == "segment") return cmd_segment(o);
    if (cmd == "divcheck") return cmd_divcheck(o);
    if (cmd == "ablate") return cmd_ablate(o);
    return 1;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code_for(e.kind());
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace rigidflow::cli
