#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <random>
#include <set>

#include <sys/wait.h>

#include "../tools/cli.hpp"
#include "rigidflow/rigidflow.hpp"

using namespace rigidflow;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("rigidflow_io_" + std::to_string(::getpid())) / name;
  fs::remove_all(p);
  fs::create_directories(p.parent_path());
  return p;
}

TrajectoryDataset small_dataset(bool orientations, std::uint64_t seed = 3) {
  ObjectSpec a, b;
  a.count = 7;
  a.motion.kind = MotionKind::Screw;
  a.motion.velocity = Vec3(0.1, 0.2, 0.3);
  a.motion.axis = Vec3(0, 0, 1);
  a.motion.rate = 1.3;
  b.count = 5;
  b.label = 1;
  b.center = Vec3(2, 0, 0);
  b.motion.kind = MotionKind::ConstantVelocity;
  b.motion.velocity = Vec3(-0.4, 0.0, 0.1);
  TrajectoryDataset ds = generate({a, b}, 9, 1.0, 1e-3, seed);
  if (!orientations) ds.orientations.clear();
  return ds;
}

ModelConfig tiny_config() {
  ModelConfig c;
  c.code_dim = 4;
  c.bottleneck = 3;
  c.encoding_degree = 2;
  c.code_width = c.weight_width = c.deform_width = 8;
  return c;
}

std::string bytes_of(const fs::path& p) { return read_file(p); }

// Runs the command-line tool; returns its exit code.
int run_cli(const std::string& args, std::string* output = nullptr) {
  const fs::path log = scratch("cli_output.txt");
  const std::string cmd = std::string(RIGIDFLOW_CLI) + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  if (output) *output = read_file(log);
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

const std::string kDefault = std::string(RIGIDFLOW_CONFIG_DIR) + "/default.toml";
const std::string kTiny = " --iterations 30 --code-width 8 --weight-width 8 --deform-width 8 --encoding-degree 2";

cli::Options parse_config(const std::string& path) {
  cli::Options o;
  auto app = cli::make_app(o);
  const std::string cfg = "--config=" + path;
  const char* argv[] = {"rigidflow", cfg.c_str()};
  app->parse(2, argv);
  return o;
}

}  // namespace

// ---------------------------------------------------------------------------
// Files

TEST(DatasetFile, RoundTripIsBitExact) {
  for (bool q : {true, false}) {
    const TrajectoryDataset ds = small_dataset(q);
    const fs::path p = scratch("ds.rfd");
    save_dataset(p, ds);
    const TrajectoryDataset back = load_dataset(p);
    EXPECT_EQ(back.timestamps, ds.timestamps);
    EXPECT_EQ(back.positions, ds.positions);
    EXPECT_EQ(back.orientations, ds.orientations);
    EXPECT_EQ(back.labels, ds.labels);
    EXPECT_EQ(back.particles, ds.particles);
    EXPECT_EQ(back.seed, ds.seed);
    EXPECT_EQ(back.bbox.lo, ds.bbox.lo);
    EXPECT_EQ(back.bbox.hi, ds.bbox.hi);
    EXPECT_EQ(nlohmann::json::parse(back.config), nlohmann::json::parse(ds.config));
    EXPECT_EQ(encode_dataset(back), encode_dataset(ds));
  }
}

TEST(DatasetFile, RejectsCorruption) {
  const std::string good = encode_dataset(small_dataset(true));
  auto kind_of = [](const std::string& bytes) {
    try {
      decode_dataset(bytes);
    } catch (const Error& e) {
      return e.kind();
    }
    return ErrorKind::InvalidInput;
  };
  std::string bad = good;
  bad[0] = 'X';
  EXPECT_EQ(kind_of(bad), ErrorKind::Dataset);
  bad = good;
  bad[4] = 9;  // version
  EXPECT_EQ(kind_of(bad), ErrorKind::Dataset);
  EXPECT_EQ(kind_of(good.substr(0, good.size() - 8)), ErrorKind::Dataset);
  EXPECT_EQ(kind_of(good + "xxxxxxxx"), ErrorKind::Dataset);
  EXPECT_EQ(kind_of(good.substr(0, 10)), ErrorKind::Dataset);
  EXPECT_EQ(kind_of(encode_checkpoint([] {
              Checkpoint ck;
              ck.model = Model(tiny_config());
              ck.canonical = Matrix::Zero(3, 2);
              return ck;
            }())),
            ErrorKind::Dataset);
  try {
    load_dataset(scratch("missing.rfd"));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Io);
  }
}

TEST(CheckpointFile, RoundTripIsBitExact) {
  const TrajectoryDataset ds = small_dataset(true);
  TrainConfig cfg;
  cfg.model = tiny_config();
  cfg.model.ablation.no_scale_deform = true;
  cfg.iterations = 3;
  cfg.dt = 1.0 / 8.0;
  cfg.lambda_rotation = 0.25;
  TrainResult res = train(ds, cfg);
  cfg.model.particle_count = ds.particles;
  const Checkpoint ck = make_checkpoint(res.model, cfg, ds);
  const fs::path p = scratch("ck.rfc");
  save_checkpoint(p, ck);
  const Checkpoint back = load_checkpoint(p);
  EXPECT_EQ(back.model.params(), ck.model.params());
  EXPECT_EQ(back.model.config(), ck.model.config());
  EXPECT_EQ(back.model.normalization.center, ck.model.normalization.center);
  EXPECT_EQ(back.model.normalization.scale, ck.model.normalization.scale);
  EXPECT_EQ(back.canonical, ck.canonical);
  EXPECT_EQ(back.labels, ck.labels);
  EXPECT_EQ(back.span_end, ck.span_end);
  EXPECT_EQ(back.train.lambda_rotation, 0.25);
  EXPECT_EQ(encode_checkpoint(back), encode_checkpoint(ck));
  const std::vector<double> t = {1.0, 1.2};
  EXPECT_EQ(predict_dataset(back, t).positions, predict_dataset(ck, t).positions);
}

TEST(AtomicWrite, ReplacesWithoutLeavingTemp) {
  const fs::path p = scratch("atomic.txt");
  write_atomic(p, "first");
  write_atomic(p, "second");
  EXPECT_EQ(read_file(p), "second");
  EXPECT_FALSE(fs::exists(p.string() + ".tmp"));
  try {
    write_atomic(scratch("no_such_dir") / "x.txt", "y");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Io);
  }
}

TEST(RunLock, SecondHolderIsRefused) {
  const fs::path dir = scratch("locked");
  {
    RunLock a(dir);
    EXPECT_TRUE(fs::exists(dir / ".lock"));
    try {
      RunLock b(dir);
      FAIL();
    } catch (const Error& e) {
      EXPECT_EQ(e.kind(), ErrorKind::Io);
    }
  }
  EXPECT_FALSE(fs::exists(dir / ".lock"));
  EXPECT_NO_THROW(RunLock c(dir));
}

TEST(ConfigJson, TrainConfigRoundTrips) {
  TrainConfig c;
  c.iterations = 17;
  c.lambda_rotation = 0.3;
  c.model.bottleneck = 32;
  c.model.ablation.no_code_in_deform = true;
  const nlohmann::json j = c;
  const TrainConfig back = j.get<TrainConfig>();
  EXPECT_EQ(nlohmann::json(back), j);
  nlohmann::json bad = j;
  bad["model"]["ablation"]["no_such_flag"] = true;
  EXPECT_THROW(bad.get<TrainConfig>(), Error);
}

// ---------------------------------------------------------------------------
// Trajectory errors

TEST(CompareTrajectories, IdenticalIsZero) {
  const TrajectoryDataset ds = small_dataset(false);
  const TrajectoryErrors e = compare_trajectories(ds, ds);
  EXPECT_EQ(e.overall, 0.0);
  EXPECT_EQ(e.final_frame, 0.0);
  EXPECT_EQ(e.percent_of_diagonal, 0.0);
}

TEST(CompareTrajectories, UnitOffsetOnUnitBox) {
  TrajectoryDataset gt = small_dataset(false);
  gt.bbox.lo = Vec3::Zero();
  gt.bbox.hi = Vec3(1, 0, 0);
  TrajectoryDataset pred = gt;
  for (int f = 0; f < pred.frames(); ++f) pred.frame(f).row(0).array() += 1.0;
  const TrajectoryErrors e = compare_trajectories(pred, gt);
  EXPECT_NEAR(e.overall, 1.0, 1e-12);
  EXPECT_NEAR(e.final_frame, 1.0, 1e-12);
  EXPECT_NEAR(e.percent_of_diagonal, 100.0, 1e-10);
}

TEST(CompareTrajectories, MatchesBruteForce) {
  const TrajectoryDataset gt = small_dataset(false, 4);
  TrajectoryDataset pred = gt;
  std::mt19937_64 rng(5);
  std::normal_distribution<double> d(0.0, 0.1);
  for (double& v : pred.positions) v += d(rng);
  double sum = 0.0, last = 0.0;
  for (int f = 0; f < gt.frames(); ++f) {
    double frame = 0.0;
    for (int i = 0; i < gt.particles; ++i) {
      double sq = 0.0;
      for (int a = 0; a < 3; ++a) {
        const std::size_t k = (static_cast<std::size_t>(f) * gt.particles + i) * 3 + a;
        sq += (pred.positions[k] - gt.positions[k]) * (pred.positions[k] - gt.positions[k]);
      }
      frame += sq;
    }
    sum += frame;
    last = std::sqrt(frame / gt.particles);
  }
  const TrajectoryErrors e = compare_trajectories(pred, gt);
  EXPECT_NEAR(e.overall, std::sqrt(sum / (gt.frames() * gt.particles)), 1e-12);
  EXPECT_NEAR(e.final_frame, last, 1e-12);
  EXPECT_THROW(compare_trajectories(slice_frames(pred, 0, 2), gt), Error);
}

TEST(TextTable, ThreeDecimals) {
  TextTable t({"a", "value"});
  t.add({"x", fixed3(1.23456)});
  t.add({"yy", fixed3(-0.0004)});
  EXPECT_EQ(t.str(), " a   value\n x   1.235\nyy  -0.000\n");
}

// ---------------------------------------------------------------------------
// Shipped configuration files

TEST(ShippedConfig, DefaultCarriesReferenceConstants) {
  const cli::Options o = parse_config(kDefault);
  const TrainConfig& t = o.train.cfg;
  EXPECT_EQ(t.model.code_dim, 16);
  EXPECT_EQ(t.model.bottleneck, 16);
  EXPECT_EQ(t.model.encoding_degree, 8);
  EXPECT_NEAR(t.dt, 1.0 / 60.0, 1e-15);
  EXPECT_DOUBLE_EQ(o.segment.ogc.learning_rate, 0.01);
  EXPECT_EQ(o.segment.ogc.iterations, 1000);
  EXPECT_EQ(o.segment.ogc.objects, 8);
  EXPECT_EQ(o.segment.ogc.neighbors, 8);
  EXPECT_EQ(o.segment.lambda, 0.0);
  EXPECT_EQ(o.segment.clusters, 8);
}

TEST(ShippedConfig, ClutteredUsesWiderBottleneckAndSmoothing) {
  const cli::Options o = parse_config(std::string(RIGIDFLOW_CONFIG_DIR) + "/cluttered.toml");
  EXPECT_EQ(o.train.cfg.model.code_dim, 16);
  EXPECT_EQ(o.train.cfg.model.bottleneck, 32);
  EXPECT_EQ(o.train.cfg.model.encoding_degree, 8);
  EXPECT_NEAR(o.train.cfg.dt, 1.0 / 60.0, 1e-15);
  EXPECT_DOUBLE_EQ(o.segment.lambda, 0.5);
}

TEST(ShippedConfig, MatchesLibraryDefaults) {
  const cli::Options o = parse_config(kDefault);
  EXPECT_EQ(o.train.cfg.model, ModelConfig{});
  EXPECT_EQ(nlohmann::json(o.train.cfg), nlohmann::json(TrainConfig{}));
  const ObjectCodeConfig ogc;
  EXPECT_EQ(o.segment.ogc.smooth_weight, ogc.smooth_weight);
}

TEST(ShippedConfig, UnknownKeysAreRejected) {
  const fs::path p = scratch("bad.toml");
  write_atomic(p, "seed = 1\n[train]\niterations = 5\ncolour = 3\n");
  EXPECT_THROW(parse_config(p.string()), CLI::ParseError);
  write_atomic(p, "speling = 1\n");
  EXPECT_THROW(parse_config(p.string()), CLI::ParseError);
}

// ---------------------------------------------------------------------------
// Command line, end to end

TEST(Cli, ExitCodes) {
  EXPECT_EQ(run_cli(""), 1);
  EXPECT_EQ(run_cli("--help"), 0);
  EXPECT_EQ(run_cli("gen --no-such-flag 1"), 1);
  EXPECT_EQ(run_cli("train --dataset " + scratch("absent.rfd").string() + " --out " + scratch("o").string()), 3);
  const fs::path garbage = scratch("garbage.rfd");
  write_atomic(garbage, "not a dataset at all");
  EXPECT_EQ(run_cli("train --dataset " + garbage.string() + " --out " + scratch("o2").string()), 1);
  EXPECT_EQ(run_cli("gen --scene nowhere --out " + scratch("g").string()), 1);
  const fs::path empty = scratch("empty.json");
  write_atomic(empty, R"({"objects": []})");
  EXPECT_EQ(run_cli("gen --scene " + empty.string() + " --out " + scratch("g2").string()), 1);
}

TEST(Cli, GenIsByteIdenticalPerSeed) {
  const fs::path a = scratch("gen_a"), b = scratch("gen_b"), c = scratch("gen_c");
  std::string out;
  ASSERT_EQ(run_cli("--config " + kDefault + " --seed 5 gen --out " + a.string(), &out), 0) << out;
  ASSERT_EQ(run_cli("--config " + kDefault + " --seed 5 gen --out " + b.string()), 0);
  ASSERT_EQ(run_cli("--config " + kDefault + " --seed 6 gen --out " + c.string()), 0);
  for (const char* f : {"full.rfd", "train.rfd", "extrapolation.rfd"}) EXPECT_EQ(bytes_of(a / f), bytes_of(b / f)) << f;
  EXPECT_NE(bytes_of(a / "full.rfd"), bytes_of(c / "full.rfd"));
  EXPECT_NE(out.find("objects=3"), std::string::npos) << out;
  const TrajectoryDataset full = load_dataset(a / "full.rfd");
  EXPECT_EQ(std::set<int>(full.labels.begin(), full.labels.end()).size(), 3u);
  EXPECT_EQ(load_dataset(a / "train.rfd").frames(), 61);
  EXPECT_FALSE(fs::exists(a / ".lock"));
}

TEST(Cli, LockedRunDirectoryIsAnIoError) {
  const fs::path d = scratch("held");
  RunLock held(d);
  EXPECT_EQ(run_cli("gen --out " + d.string()), 3);
}

TEST(Cli, TrainPredictEvalSegmentPipeline) {
  const fs::path d = scratch("pipeline");
  ASSERT_EQ(run_cli("--config " + kDefault + " gen --particles 40 --out " + d.string()), 0);
  const std::string train = "--config " + kDefault + " train --dataset " + (d / "train.rfd").string() + kTiny;
  ASSERT_EQ(run_cli(train + " --out " + (d / "r1").string()), 0);
  ASSERT_EQ(run_cli(train + " --out " + (d / "r2").string()), 0);
  EXPECT_EQ(bytes_of(d / "r1" / "checkpoint.rfc"), bytes_of(d / "r2" / "checkpoint.rfc"));
  EXPECT_TRUE(fs::exists(d / "r1" / "loss.txt"));
  EXPECT_TRUE(fs::exists(d / "r1" / "report.json"));
  const std::string ck = (d / "r1" / "checkpoint.rfc").string();

  // steps = 0 echoes the state at the end of the training span.
  ASSERT_EQ(run_cli("predict --checkpoint " + ck + " --steps 0 --out " + (d / "echo.rfd").string()), 0);
  const Checkpoint model = load_checkpoint(ck);
  const TrajectoryDataset echo = load_dataset(d / "echo.rfd");
  ASSERT_EQ(echo.frames(), 1);
  EXPECT_EQ(echo.timestamps[0], 1.0);
  const std::vector<double> end = {model.span_end};
  EXPECT_EQ(echo.positions, predict_dataset(model, end).positions);

  ASSERT_EQ(run_cli("predict --checkpoint " + ck + " --steps 5 --horizon 1.5 --out " + (d / "p5.rfd").string()), 0);
  const TrajectoryDataset p5 = load_dataset(d / "p5.rfd");
  EXPECT_EQ(p5.frames(), 5);
  EXPECT_EQ(p5.positions.size(), 5u * 40 * 3);
  EXPECT_NEAR(p5.timestamps.back(), 1.5, 1e-12);

  const fs::path pred = d / "pred.rfd";
  ASSERT_EQ(run_cli("predict --checkpoint " + ck + " --like " + (d / "extrapolation.rfd").string() + " --out " + pred.string()), 0);
  const fs::path ej = d / "eval.json";
  ASSERT_EQ(run_cli("eval --pred " + pred.string() + " --gt " + (d / "extrapolation.rfd").string() + " --json " + ej.string()), 0);
  const auto metrics = nlohmann::json::parse(read_file(ej));
  const TrajectoryErrors e = compare_trajectories(load_dataset(pred), load_dataset(d / "extrapolation.rfd"));
  EXPECT_EQ(metrics.at("rmse").get<double>(), e.overall);
  EXPECT_EQ(metrics.at("per_frame").size(), 20u);
  const fs::path self = d / "self.json";
  ASSERT_EQ(run_cli("eval --pred " + pred.string() + " --gt " + pred.string() + " --json " + self.string()), 0);
  EXPECT_EQ(nlohmann::json::parse(read_file(self)).at("rmse").get<double>(), 0.0);

  const fs::path s1 = d / "s1.json", s2 = d / "s2.json", one = d / "one.json";
  const std::string seg = "--config " + kDefault + " --seed 2 segment --checkpoint " + ck + " --clusters 3 --out ";
  ASSERT_EQ(run_cli(seg + s1.string()), 0);
  ASSERT_EQ(run_cli(seg + s2.string()), 0);
  EXPECT_EQ(read_file(s1), read_file(s2));
  ASSERT_EQ(run_cli("segment --checkpoint " + ck + " --clusters 1 --out " + one.string()), 0);
  const auto j1 = nlohmann::json::parse(read_file(one));
  for (int id : j1.at("ids")) EXPECT_EQ(id, 0);
  EXPECT_GT(j1.at("metrics").at("miou").get<double>(), 0.0);
  const fs::path og = d / "ogc.json";
  ASSERT_EQ(run_cli("segment --method ogc --ogc-iterations 5 --checkpoint " + ck + " --out " + og.string()), 0);
  EXPECT_EQ(nlohmann::json::parse(read_file(og)).at("ids").size(), 40u);

  EXPECT_EQ(run_cli("divcheck --checkpoint " + ck + " --probes 50"), 0);
  std::string out;
  EXPECT_EQ(run_cli("divcheck --checkpoint " + ck + " --probes 0", &out), 0);
  EXPECT_NE(out.find("warning"), std::string::npos);
}

TEST(Cli, DivcheckFailsForUnconstrainedField) {
  const fs::path d = scratch("nodiv");
  ASSERT_EQ(run_cli("gen --particles 20 --out " + d.string()), 0);
  ASSERT_EQ(run_cli("train --dataset " + (d / "train.rfd").string() + kTiny +
                " --ablation no_divfree_basis --out " + (d / "run").string()),
            0);
  EXPECT_EQ(run_cli("divcheck --probes 100 --checkpoint " + (d / "run" / "checkpoint.rfc").string()), 2);
}

TEST(Cli, AblationNamesAreChecked) {
  const fs::path d = scratch("names");
  ASSERT_EQ(run_cli("gen --particles 20 --out " + d.string()), 0);
  const std::string base = "train --dataset " + (d / "train.rfd").string() + kTiny + " --iterations 1 --out ";
  for (const char* flag : kAblationNames) EXPECT_EQ(run_cli(base + (d / flag).string() + " --ablation " + flag), 0) << flag;
  EXPECT_EQ(run_cli(base + (d / "bad").string() + " --ablation no_such_thing"), 1);
}

TEST(Cli, DivergenceIsANumericFailure) {
  const fs::path d = scratch("nan");
  ASSERT_EQ(run_cli("gen --particles 20 --out " + d.string()), 0);
  std::string out;
  EXPECT_EQ(run_cli("train --dataset " + (d / "train.rfd").string() + kTiny + " --learning-rate 1e250 --out " +
                    (d / "run").string(),
                &out),
            2)
      << out;
  EXPECT_NE(out.find("diverged"), std::string::npos) << out;
  EXPECT_TRUE(fs::exists(d / "run" / "last_good.rfc"));
}

TEST(Cli, AblateWritesATable) {
  const fs::path d = scratch("ablate");
  ASSERT_EQ(run_cli("gen --particles 20 --out " + d.string()), 0);
  const fs::path cfg = scratch("tiny.toml");
  write_atomic(cfg, "[train]\ncode-width = 8\nweight-width = 8\ndeform-width = 8\nencoding-degree = 2\n");
  std::string out;
  ASSERT_EQ(run_cli("--config " + cfg.string() + " ablate --iterations 2 --flags no_deform_field,no_scale_deform --dataset " +
                    (d / "train.rfd").string() + " --extrapolation " + (d / "extrapolation.rfd").string() +
                    " --out " + (d / "sweep").string(),
                &out),
            0)
      << out;
  const auto rows = nlohmann::json::parse(read_file(d / "sweep" / "ablation.json"));
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[0].at("variant"), "full");
  EXPECT_EQ(rows[1].at("variant"), "no_deform_field");
}
