#pragma once

// Deformation-aided fitting of the velocity model to particle trajectories.
//
// Each step samples training times t, deforms the canonical particles to
// t' = t - dt with f_deform, transports them to t with one mid-point step and
// compares both the deformed and the transported state with the data. The
// state is position, plus orientation when the dataset carries it.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "rigidflow/error.hpp"
#include "rigidflow/networks.hpp"
#include "rigidflow/scenegen.hpp"
#include "rigidflow/transport.hpp"

namespace rigidflow {

struct TrainConfig {
  double dt = 1.0 / 60.0;
  double learning_rate = 1e-3;
  double decay_at = 0.7;  // fraction of iterations after which the rate is scaled
  double decay_factor = 0.1;
  int iterations = 4000;
  int batch_timestamps = 4;
  double lambda_deform = 1.0;
  double lambda_vel = 1.0;
  double lambda_rotation = 1.0;  // ignored for datasets without orientations
  std::uint64_t seed = 0;
  bool deterministic = true;
  ModelConfig model;

  void validate() const {
    if (!(dt > 0.0)) throw Error(ErrorKind::Config, "dt must be positive");
    if (!(learning_rate > 0.0)) throw Error(ErrorKind::Config, "learning rate must be positive");
    if (iterations < 0) throw Error(ErrorKind::Config, "iterations must be >= 0");
    if (batch_timestamps < 1) throw Error(ErrorKind::Config, "batch must hold at least one timestamp");
    if (!(lambda_deform >= 0.0) || !(lambda_vel >= 0.0) || !(lambda_rotation >= 0.0)) throw Error(ErrorKind::Config, "loss weights must be >= 0");
    if (!(decay_at >= 0.0 && decay_at <= 1.0)) throw Error(ErrorKind::Config, "decay_at must be in [0, 1]");
    model.validate();
  }

  double rate_at(int iteration) const {
    return iteration >= static_cast<int>(std::ceil(decay_at * iterations)) ? learning_rate * decay_factor
                                                                          : learning_rate;
  }
};

struct LossRecord {
  double total = 0.0;
  double deform = 0.0;
  double velocity = 0.0;
  double rotation = 0.0;
};

struct TrainReport {
  std::vector<LossRecord> losses;
  double wall_seconds = 0.0;
  std::uint64_t seed = 0;
  std::string checkpoint;
};

/// Training frames in the model frame.
struct TrainingData {
  std::vector<double> timestamps;
  std::vector<Matrix> frames;  // 3 x N each
  Matrix canonical;            // frame 0
  // Per frame and particle, the rotation since frame 0. Empty without orientations.
  std::vector<std::vector<Mat3>> rotations;

  int particles() const { return static_cast<int>(canonical.cols()); }

  int frame_at(double t) const {
    for (std::size_t f = 0; f < timestamps.size(); ++f)
      if (std::abs(timestamps[f] - t) <= 1e-9) return static_cast<int>(f);
    return -1;
  }
};

/// Center and scale the training span into roughly [-1, 1]^3.
inline Normalization normalization_for(const TrajectoryDataset& ds) {
  Vec3 lo = Vec3::Constant(std::numeric_limits<double>::infinity());
  Vec3 hi = -lo;
  for (int f = 0; f < ds.frames(); ++f) {
    const auto fr = ds.frame(f);
    lo = lo.cwiseMin(Vec3(fr.rowwise().minCoeff()));
    hi = hi.cwiseMax(Vec3(fr.rowwise().maxCoeff()));
  }
  Normalization n;
  n.center = 0.5 * (lo + hi);
  const double half = 0.5 * (hi - lo).maxCoeff();
  n.scale = half > 0.0 ? half : 1.0;
  return n;
}

inline TrainingData training_data(const TrajectoryDataset& ds, const Normalization& norm) {
  ds.validate();
  if (ds.frames() < 2) throw Error(ErrorKind::Dataset, "training needs at least two frames");
  if (std::abs(ds.timestamps.front()) > 1e-12) throw Error(ErrorKind::Dataset, "training data must start at t = 0");
  TrainingData d;
  d.timestamps = ds.timestamps;
  for (int f = 0; f < ds.frames(); ++f) d.frames.push_back(norm.to_model(Matrix(ds.frame(f))));
  d.canonical = d.frames.front();
  if (ds.has_orientations()) {
    auto at = [&](int f, int i) {
      const double* q = ds.orientations.data() + (static_cast<std::size_t>(f) * ds.particles + i) * 4;
      return quat_to_rot(UnitQuaternion::from_raw(q[0], q[1], q[2], q[3]));
    };
    d.rotations.resize(static_cast<std::size_t>(ds.frames()));
    for (int f = 0; f < ds.frames(); ++f) {
      auto& fr = d.rotations[static_cast<std::size_t>(f)];
      fr.resize(static_cast<std::size_t>(ds.particles));
      for (int i = 0; i < ds.particles; ++i) fr[static_cast<std::size_t>(i)] = at(f, i) * at(0, i).transpose();
    }
  }
  return d;
}

// ---------------------------------------------------------------------------

/// Deformed kernels at time t: p = p0 + dp, r = r0 o dr, s = s0 * ds.
inline KernelSet deform_to(const KernelSet& canonical, double t, const Model& m) {
  KernelSet out = canonical;
  out.time = t;
  if (canonical.kernels.empty()) return out;
  if (m.ablation().no_deform_field) throw Error(ErrorKind::Config, "model has no deformation field");
  const double ts[] = {t};
  const Matrix raw = deform_raw(m, deform_input(m, canonical.positions(), ts, canonical.codes()));
  for (std::size_t i = 0; i < canonical.kernels.size(); ++i) {
    const DeformationDelta d = deformation_from_raw(
        std::span<const double>(raw.col(static_cast<Eigen::Index>(i)).data(), 10), m.ablation().no_scale_deform);
    Kernel& k = out.kernels[i];
    k.p = canonical.kernels[i].p + d.dp;
    k.r = quat_compose(canonical.kernels[i].r, d.dr);
    k.s = canonical.kernels[i].s.cwiseProduct(d.ds);
  }
  return out;
}

/// Loss for the given training times; adds d(loss)/d(params) into `grad` when non-null.
inline LossRecord evaluate_loss(const Model& m, const TrainingData& data, std::span<const double> times,
                                const TrainConfig& cfg, Vector* grad) {
  const int n = data.particles();
  const auto idx = iota_indices(n);
  const double T = static_cast<double>(times.size());
  const double norm = 1.0 / (3.0 * n * T);
  const bool no_deform = m.ablation().no_deform_field;
  const bool rotations = cfg.lambda_rotation > 0.0 && !data.rotations.empty();
  const double rnorm = 1.0 / (9.0 * n * T);

  std::vector<int> target(times.size()), previous(times.size());
  std::vector<double> prev_times(times.size());
  for (std::size_t b = 0; b < times.size(); ++b) {
    target[b] = data.frame_at(times[b]);
    if (target[b] < 0) throw Error(ErrorKind::Dataset, "no frame at t = " + std::to_string(times[b]));
    prev_times[b] = times[b] - cfg.dt;
    if (!no_deform) {
      previous[b] = data.frame_at(prev_times[b]);
      if (previous[b] < 0) throw Error(ErrorKind::Dataset, "no frame at t' = " + std::to_string(prev_times[b]));
    }
  }

  CodeCache code_cache;
  const Matrix z = physics_codes(m, data.canonical, idx, grad ? &code_cache : nullptr);
  MLPCache neck_cache;
  const Matrix h = bottleneck(m, z, grad ? &neck_cache : nullptr);

  LossRecord rec;
  Matrix dz = Matrix::Zero(z.rows(), n);
  Matrix dh = Matrix::Zero(h.rows(), n);

  Matrix start;  // deformed positions, 3 x (N * T)
  Matrix raw;
  MLPCache deform_cache;
  if (!no_deform) {
    const Matrix in = deform_input(m, data.canonical, prev_times, z);
    raw = deform_raw(m, in, grad ? &deform_cache : nullptr);
    start = raw.topRows(3);
    for (std::size_t b = 0; b < times.size(); ++b) start.middleCols(static_cast<Eigen::Index>(b) * n, n) += data.canonical;
  }
  Matrix d_start = Matrix::Zero(3, no_deform ? 0 : n * static_cast<Eigen::Index>(times.size()));
  // Raw (w, x, y, z) of the deformed orientation; w is offset by one.
  auto raw_quat = [&](std::size_t b, int i) {
    const auto c = raw.col(static_cast<Eigen::Index>(b) * n + i);
    return Eigen::Vector4d(1.0 + c[3], c[4], c[5], c[6]);
  };
  Matrix d_quat = Matrix::Zero(4, rotations && !no_deform ? n * static_cast<Eigen::Index>(times.size()) : 0);

  // Rotation residual against the data: adds to the loss, returns dL/dR.
  auto rotation_term = [&](const std::vector<Mat3>& r, int frame, double weight, std::vector<Mat3>& g) {
    const auto& truth = data.rotations[static_cast<std::size_t>(frame)];
    g.resize(r.size());
    for (std::size_t i = 0; i < r.size(); ++i) {
      const Mat3 e = r[i] - truth[i];
      rec.rotation += weight * rnorm * e.squaredNorm();
      g[i] = weight * 2.0 * rnorm * e;
    }
  };

  for (std::size_t b = 0; b < times.size(); ++b) {
    TransportTape tape;
    Matrix p_end;
    Matrix p_begin;
    if (no_deform) {
      p_begin = data.canonical;
      p_end = transport_positions(m, z, h, p_begin, 0.0, times[b], 2, grad || rotations ? &tape : nullptr);
    } else {
      p_begin = start.middleCols(static_cast<Eigen::Index>(b) * n, n);
      const Matrix r_def = p_begin - data.frames[static_cast<std::size_t>(previous[b])];
      rec.deform += cfg.lambda_deform * norm * r_def.squaredNorm();
      if (grad) d_start.middleCols(static_cast<Eigen::Index>(b) * n, n) += cfg.lambda_deform * 2.0 * norm * r_def;
      p_end = transport_positions(m, z, h, p_begin, prev_times[b], times[b], 1, grad || rotations ? &tape : nullptr);
    }
    const Matrix r_vel = p_end - data.frames[static_cast<std::size_t>(target[b])];
    rec.velocity += cfg.lambda_vel * norm * r_vel.squaredNorm();

    RotationGrads rg;
    if (rotations) {
      // Starting orientations: identity without the deformation field, else the deformed ones.
      std::vector<Mat3> r_begin(static_cast<std::size_t>(n), Mat3::Identity());
      std::vector<Mat3> g_begin;
      if (!no_deform) {
        for (int i = 0; i < n; ++i) {
          const auto c = raw_quat(b, i);
          r_begin[static_cast<std::size_t>(i)] = quat_to_rot(UnitQuaternion::from_raw(c[0], c[1], c[2], c[3]));
        }
        rotation_term(r_begin, previous[b], cfg.lambda_deform * cfg.lambda_rotation, g_begin);
      }
      RotationTape rt;
      const std::vector<Mat3> r_end = transport_rotations(m, z, h, tape, r_begin, grad ? &rt : nullptr);
      std::vector<Mat3> g_end;
      rotation_term(r_end, target[b], cfg.lambda_vel * cfg.lambda_rotation, g_end);
      if (grad) {
        rg = transport_rotations_backward(m, tape, rt, z, h, g_end, *grad);
        if (rg.dz.size()) dz += rg.dz;
        if (rg.dh.size()) dh += rg.dh;
        if (!no_deform)
          for (int i = 0; i < n; ++i) {
            const Eigen::Index col = static_cast<Eigen::Index>(b) * n + i;
            d_quat.col(col) = quat_to_rot_backward(raw_quat(b, i),
                                                    rg.d_start[static_cast<std::size_t>(i)] + g_begin[static_cast<std::size_t>(i)]);
          }
      }
    }
    if (grad) {
      const Matrix d_end = cfg.lambda_vel * 2.0 * norm * r_vel;
      const TransportGrads g =
          transport_positions_backward(m, tape, z, h, d_end, *grad, rotations ? &rg.d_mid : nullptr);
      dz += g.dz;
      if (g.dh.size()) dh += g.dh;
      if (!no_deform) d_start.middleCols(static_cast<Eigen::Index>(b) * n, n) += g.dp;
    }
  }
  rec.total = rec.deform + rec.velocity + rec.rotation;
  if (!grad) return rec;

  if (!no_deform) {
    Matrix d_raw = Matrix::Zero(10, d_start.cols());
    d_raw.topRows(3) = d_start;
    if (d_quat.size()) d_raw.middleRows(3, 4) = d_quat;
    const Matrix d_in = deform_raw_backward(m, deform_cache, d_raw, *grad);
    if (!m.ablation().no_code_in_deform)
      for (std::size_t b = 0; b < times.size(); ++b)
        dz += d_in.block(4, static_cast<Eigen::Index>(b) * n, z.rows(), n);
  }
  if (h.rows() > 0) dz += bottleneck_backward(m, neck_cache, dh, *grad);
  physics_codes_backward(m, code_cache, dz, *grad);
  return rec;
}

class Adam {
 public:
  explicit Adam(Eigen::Index size, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : m_(Vector::Zero(size)), v_(Vector::Zero(size)), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(Vector& params, const Vector& grad, double lr) {
    ++t_;
    m_ = beta1_ * m_ + (1.0 - beta1_) * grad;
    v_ = beta2_ * v_ + (1.0 - beta2_) * grad.cwiseAbs2();
    const double c1 = 1.0 - std::pow(beta1_, t_);
    const double c2 = 1.0 - std::pow(beta2_, t_);
    params.array() -= lr * (m_.array() / c1) / ((v_.array() / c2).sqrt() + eps_);
  }

 private:
  Vector m_, v_;
  double beta1_, beta2_, eps_;
  int t_ = 0;
};

/// Times that can serve as targets: t > 0 and, with the deformation field,
/// a frame at t - dt.
inline std::vector<double> sampleable_times(const TrainingData& data, const TrainConfig& cfg, bool no_deform) {
  std::vector<double> out;
  for (double t : data.timestamps) {
    if (t <= 0.0) continue;
    if (!no_deform && data.frame_at(t - cfg.dt) < 0) continue;
    out.push_back(t);
  }
  return out;
}

/// Draws `count` distinct entries (all of them if fewer).
template <typename Rng>
std::vector<double> sample_times(std::span<const double> pool, int count, Rng& rng) {
  std::vector<double> v(pool.begin(), pool.end());
  const std::size_t k = std::min<std::size_t>(static_cast<std::size_t>(count), v.size());
  for (std::size_t i = 0; i < k; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, v.size() - 1);
    std::swap(v[i], v[pick(rng)]);
  }
  v.resize(k);
  return v;
}

class TrainingDiverged : public Error {
 public:
  TrainingDiverged(Model last_good, int iteration)
      : Error(ErrorKind::NumericOverflow, "loss became non-finite at iteration " + std::to_string(iteration)),
        last_good_(std::move(last_good)),
        iteration_(iteration) {}
  const Model& last_good() const { return last_good_; }
  int iteration() const { return iteration_; }

 private:
  Model last_good_;
  int iteration_;
};

/// Runs one optimizer step; returns the loss before the update.
template <typename Rng>
LossRecord train_step(Model& m, const TrainingData& data, std::span<const double> pool, const TrainConfig& cfg,
                      Adam& adam, int iteration, Rng& rng) {
  const std::vector<double> times = sample_times(pool, cfg.batch_timestamps, rng);
  Vector grad = Vector::Zero(m.params().size());
  const LossRecord rec = evaluate_loss(m, data, times, cfg, &grad);
  if (!std::isfinite(rec.total) || !grad.allFinite()) return {std::nan(""), rec.deform, rec.velocity, rec.rotation};
  adam.step(m.params(), grad, cfg.rate_at(iteration));
  return rec;
}

struct TrainResult {
  Model model;
  TrainReport report;
};

using ProgressFn = std::function<void(int iteration, const LossRecord&)>;

inline TrainResult train(const TrajectoryDataset& dataset, TrainConfig cfg, const ProgressFn& progress = {}) {
  cfg.model.particle_count = dataset.particles;
  cfg.validate();
  const auto t_begin = std::chrono::steady_clock::now();

  TrainResult result{Model(cfg.model), {}};
  Model& m = result.model;
  m.normalization = normalization_for(dataset);
  m.initialize(cfg.seed);
  const TrainingData data = training_data(dataset, m.normalization);

  const std::vector<double> pool = sampleable_times(data, cfg, m.ablation().no_deform_field);
  if (pool.empty())
    throw Error(ErrorKind::Dataset, "no training time has a frame at t - dt; dt must match the frame spacing");

  std::mt19937_64 rng(cfg.seed + 1);
  Adam adam(m.params().size());
  Vector last_good = m.params();
  result.report.seed = cfg.seed;
  result.report.losses.reserve(static_cast<std::size_t>(cfg.iterations));
  for (int it = 0; it < cfg.iterations; ++it) {
    LossRecord rec;
    try {
      rec = train_step(m, data, pool, cfg, adam, it, rng);
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::NumericOverflow && e.kind() != ErrorKind::DegenerateRotation) throw;
      rec.total = std::nan("");
    }
    if (!std::isfinite(rec.total) || !m.params().allFinite()) {
      m.params() = last_good;
      throw TrainingDiverged(m, it);
    }
    last_good = m.params();
    result.report.losses.push_back(rec);
    if (progress) progress(it, rec);
  }
  result.report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t_begin).count();
  return result;
}

// ---------------------------------------------------------------------------
// Prediction.

/// Positions (model frame) at each requested time. Times up to `span_end`
/// come from the deformation field; later times are reached by transporting
/// the state at `span_end` with sub-steps no longer than dt. Without the
/// deformation field everything is transported from t = 0.
inline std::vector<Matrix> predict_positions(const Model& m, const Matrix& canonical, std::span<const double> times,
                                             double dt, double span_end = 1.0) {
  if (!std::is_sorted(times.begin(), times.end())) throw Error(ErrorKind::InvalidInput, "prediction times must be sorted");
  const KernelSet base = canonical_kernels(m, canonical);
  const Matrix z = base.codes();
  const Matrix h = bottleneck(m, z);
  const bool no_deform = m.ablation().no_deform_field;

  std::vector<Matrix> out;
  out.reserve(times.size());
  double t_cur = no_deform ? 0.0 : span_end;
  Matrix p_cur = no_deform ? canonical : deform_to(base, span_end, m).positions();
  for (double t : times) {
    if (!no_deform && t <= span_end) {
      out.push_back(deform_to(base, t, m).positions());
      continue;
    }
    if (t < t_cur) throw Error(ErrorKind::InvalidInput, "cannot transport backwards in time");
    if (t > t_cur) {
      p_cur = transport_positions(m, z, h, p_cur, t_cur, t, substeps_for(t - t_cur, dt));
      t_cur = t;
    }
    out.push_back(p_cur);
  }
  return out;
}

/// Root-mean-square per-particle position error over all frames.
inline double trajectory_rmse(std::span<const Matrix> pred, std::span<const Matrix> truth) {
  if (pred.size() != truth.size()) throw Error(ErrorKind::InvalidInput, "frame count mismatch");
  double sum = 0.0;
  Eigen::Index count = 0;
  for (std::size_t f = 0; f < pred.size(); ++f) {
    sum += (pred[f] - truth[f]).squaredNorm();
    count += pred[f].cols();
  }
  return count ? std::sqrt(sum / static_cast<double>(count)) : 0.0;
}

}  // namespace rigidflow
