#pragma once

// Closed-form synthetic rigid-body trajectories with per-particle labels.

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <cstdint>
#include <numbers>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "rigidflow/error.hpp"
#include "rigidflow/geometry.hpp"

namespace rigidflow {

enum class MotionKind {
  Static,
  ConstantVelocity,
  ConstantAcceleration,
  ConstantAngular,
  HarmonicLinear,
  HarmonicAngular,
  Screw,
};

NLOHMANN_JSON_SERIALIZE_ENUM(MotionKind, {
                                             {MotionKind::Static, "static"},
                                             {MotionKind::ConstantVelocity, "constant_velocity"},
                                             {MotionKind::ConstantAcceleration, "constant_acceleration"},
                                             {MotionKind::ConstantAngular, "constant_angular"},
                                             {MotionKind::HarmonicLinear, "harmonic_linear"},
                                             {MotionKind::HarmonicAngular, "harmonic_angular"},
                                             {MotionKind::Screw, "screw"},
                                         })

struct MotionSpec {
  MotionKind kind = MotionKind::Static;
  Vec3 velocity = Vec3::Zero();      // constant_velocity, constant_acceleration (initial), screw
  Vec3 acceleration = Vec3::Zero();  // constant_acceleration
  Vec3 axis = Vec3::UnitZ();         // rotations and harmonic_linear direction
  double rate = 0.0;                 // rad / time for constant_angular and screw
  double amplitude = 0.0;            // length (harmonic_linear) or radians (harmonic_angular)
  double frequency = 0.0;            // angular frequency, rad / time
  double phase = 0.0;
  Vec3 pivot = Vec3::Zero();

  void validate() const {
    if (!velocity.allFinite() || !acceleration.allFinite() || !axis.allFinite() || !pivot.allFinite() ||
        !std::isfinite(rate) || !std::isfinite(amplitude) || !std::isfinite(frequency) || !std::isfinite(phase))
      throw Error(ErrorKind::Config, "non-finite motion parameter");
    if (std::abs(axis.norm() - 1.0) > 1e-9) throw Error(ErrorKind::Config, "motion axis must be unit length");
  }

  // Rotation angle about `axis` at time t.
  double angle(double t) const {
    switch (kind) {
      case MotionKind::ConstantAngular:
      case MotionKind::Screw:
        return rate * t;
      case MotionKind::HarmonicAngular:
        return amplitude * (std::sin(frequency * t + phase) - std::sin(phase));
      default:
        return 0.0;
    }
  }

  double angular_rate(double t) const {
    switch (kind) {
      case MotionKind::ConstantAngular:
      case MotionKind::Screw:
        return rate;
      case MotionKind::HarmonicAngular:
        return amplitude * frequency * std::cos(frequency * t + phase);
      default:
        return 0.0;
    }
  }

  Vec3 translation(double t) const {
    switch (kind) {
      case MotionKind::ConstantVelocity:
      case MotionKind::Screw:
        return velocity * t;
      case MotionKind::ConstantAcceleration:
        return velocity * t + 0.5 * acceleration * t * t;
      case MotionKind::HarmonicLinear:
        return amplitude * (std::sin(frequency * t + phase) - std::sin(phase)) * axis;
      default:
        return Vec3::Zero();
    }
  }

  Vec3 translation_rate(double t) const {
    switch (kind) {
      case MotionKind::ConstantVelocity:
      case MotionKind::Screw:
        return velocity;
      case MotionKind::ConstantAcceleration:
        return velocity + acceleration * t;
      case MotionKind::HarmonicLinear:
        return amplitude * frequency * std::cos(frequency * t + phase) * axis;
      default:
        return Vec3::Zero();
    }
  }

  Mat3 rotation(double t) const { return Eigen::AngleAxisd(angle(t), axis).toRotationMatrix(); }

  // x(t) = R(t) (x0 - c) + c + d(t)
  Vec3 position(const Vec3& x0, double t) const { return rotation(t) * (x0 - pivot) + pivot + translation(t); }

  Vec3 velocity_at(const Vec3& x0, double t) const {
    const Vec3 omega = angular_rate(t) * axis;
    return omega.cross(rotation(t) * (x0 - pivot)) + translation_rate(t);
  }
};

enum class Shape { Box, SphereShell, LineSegment };

NLOHMANN_JSON_SERIALIZE_ENUM(Shape, {
                                        {Shape::Box, "box"},
                                        {Shape::SphereShell, "sphere_shell"},
                                        {Shape::LineSegment, "line_segment"},
                                    })

struct ObjectSpec {
  Shape shape = Shape::Box;
  Vec3 center = Vec3::Zero();
  // Box: half extents. Sphere shell: radius in x. Line segment: half-length vector.
  Vec3 extent = Vec3::Ones();
  int count = 100;
  MotionSpec motion;
  int label = 0;
};

inline void to_json(nlohmann::json& j, const Vec3& v) { j = nlohmann::json::array({v.x(), v.y(), v.z()}); }
inline void from_json(const nlohmann::json& j, Vec3& v) { v = Vec3(j.at(0).get<double>(), j.at(1).get<double>(), j.at(2).get<double>()); }

inline void to_json(nlohmann::json& j, const MotionSpec& m) {
  j = {{"kind", m.kind},           {"velocity", m.velocity}, {"acceleration", m.acceleration},
       {"axis", m.axis},           {"rate", m.rate},         {"amplitude", m.amplitude},
       {"frequency", m.frequency}, {"phase", m.phase},       {"pivot", m.pivot}};
}
inline void from_json(const nlohmann::json& j, MotionSpec& m) {
  m = MotionSpec{};
  j.at("kind").get_to(m.kind);
  if (j.contains("velocity")) from_json(j.at("velocity"), m.velocity);
  if (j.contains("acceleration")) from_json(j.at("acceleration"), m.acceleration);
  if (j.contains("axis")) from_json(j.at("axis"), m.axis);
  if (j.contains("pivot")) from_json(j.at("pivot"), m.pivot);
  m.rate = j.value("rate", 0.0);
  m.amplitude = j.value("amplitude", 0.0);
  m.frequency = j.value("frequency", 0.0);
  m.phase = j.value("phase", 0.0);
}
inline void to_json(nlohmann::json& j, const ObjectSpec& o) {
  nlohmann::json c, e, mo;
  to_json(c, o.center);
  to_json(e, o.extent);
  to_json(mo, o.motion);
  j = {{"shape", o.shape}, {"center", c}, {"extent", e}, {"count", o.count}, {"motion", mo}, {"label", o.label}};
}
inline void from_json(const nlohmann::json& j, ObjectSpec& o) {
  j.at("shape").get_to(o.shape);
  from_json(j.at("center"), o.center);
  from_json(j.at("extent"), o.extent);
  o.count = j.at("count").get<int>();
  from_json(j.at("motion"), o.motion);
  o.label = j.at("label").get<int>();
}

struct BoundingBox {
  Vec3 lo = Vec3::Zero();
  Vec3 hi = Vec3::Zero();
  double diagonal() const { return (hi - lo).norm(); }
};

inline void to_json(nlohmann::json& j, const BoundingBox& b) {
  nlohmann::json lo, hi;
  to_json(lo, b.lo);
  to_json(hi, b.hi);
  j = {{"lo", lo}, {"hi", hi}};
}
inline void from_json(const nlohmann::json& j, BoundingBox& b) {
  from_json(j.at("lo"), b.lo);
  from_json(j.at("hi"), b.hi);
}

/// Dense trajectories: frames x particles x 3, row-major, so each frame is a
/// contiguous 3 x N column-major block.
struct TrajectoryDataset {
  std::vector<double> timestamps;
  int particles = 0;
  std::vector<double> positions;
  std::vector<double> orientations;  // frames x particles x 4 (w, x, y, z), optional
  std::vector<std::int32_t> labels;
  BoundingBox bbox;
  std::uint64_t seed = 0;
  std::string config;  // JSON echo of the generating scene
  int canonical_frame = 0;

  int frames() const { return static_cast<int>(timestamps.size()); }
  bool has_orientations() const { return !orientations.empty(); }

  Eigen::Map<const Matrix> frame(int f) const {
    return {positions.data() + static_cast<std::size_t>(f) * particles * 3, 3, particles};
  }
  Eigen::Map<Matrix> frame(int f) { return {positions.data() + static_cast<std::size_t>(f) * particles * 3, 3, particles}; }

  Vec3 position(int f, int i) const { return frame(f).col(i); }

  /// Frame index whose timestamp is within tol of t, or -1.
  int find_frame(double t, double tol = 1e-9) const {
    for (int f = 0; f < frames(); ++f)
      if (std::abs(timestamps[static_cast<std::size_t>(f)] - t) <= tol) return f;
    return -1;
  }

  void validate() const {
    if (particles < 0) throw Error(ErrorKind::Dataset, "negative particle count");
    if (positions.size() != timestamps.size() * particles * 3)
      throw Error(ErrorKind::Dataset, "position tensor does not match frames x particles x 3");
    if (!orientations.empty() && orientations.size() != timestamps.size() * particles * 4)
      throw Error(ErrorKind::Dataset, "orientation tensor does not match frames x particles x 4");
    if (labels.size() != static_cast<std::size_t>(particles)) throw Error(ErrorKind::Dataset, "label count mismatch");
    for (std::size_t f = 1; f < timestamps.size(); ++f)
      if (!(timestamps[f] > timestamps[f - 1])) throw Error(ErrorKind::Dataset, "timestamps must increase strictly");
  }
};

struct SceneSpec {
  std::string name;
  std::vector<ObjectSpec> objects;
};

namespace detail {

inline Vec3 sample_on_shape(const ObjectSpec& o, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  switch (o.shape) {
    case Shape::Box:
      return o.center + Vec3(u(rng) * o.extent.x(), u(rng) * o.extent.y(), u(rng) * o.extent.z());
    case Shape::SphereShell: {
      std::normal_distribution<double> g(0.0, 1.0);
      Vec3 d;
      do {
        d = Vec3(g(rng), g(rng), g(rng));
      } while (d.norm() < 1e-12);
      return o.center + o.extent.x() * d.normalized();
    }
    case Shape::LineSegment:
      return o.center + u(rng) * o.extent;
  }
  return o.center;
}

}  // namespace detail

/// Initial particle positions per object (object-major order).
inline std::vector<Vec3> sample_particles(const std::vector<ObjectSpec>& objects, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<Vec3> out;
  for (const auto& o : objects)
    for (int i = 0; i < o.count; ++i) out.push_back(detail::sample_on_shape(o, rng));
  return out;
}

inline void validate_scene(const std::vector<ObjectSpec>& objects) {
  if (objects.empty()) throw Error(ErrorKind::Config, "scene has no objects");
  std::set<int> labels;
  for (const auto& o : objects) {
    if (o.count < 1) throw Error(ErrorKind::Config, "object particle count must be >= 1");
    if (!labels.insert(o.label).second)
      throw Error(ErrorKind::Config, "duplicate object label " + std::to_string(o.label));
    if (o.label < 0) throw Error(ErrorKind::Config, "object labels must be non-negative");
    o.motion.validate();
  }
}

inline TrajectoryDataset generate(const std::vector<ObjectSpec>& objects, int frames, double horizon,
                                  double noise_sigma, std::uint64_t seed) {
  validate_scene(objects);
  if (frames < 2) throw Error(ErrorKind::Config, "need at least two frames");
  if (!(horizon > 0.0)) throw Error(ErrorKind::Config, "horizon must be positive");
  if (!(noise_sigma >= 0.0)) throw Error(ErrorKind::Config, "noise must be non-negative");

  TrajectoryDataset ds;
  ds.seed = seed;
  nlohmann::json echo = nlohmann::json::array();
  for (const auto& o : objects) echo.push_back(o);
  ds.config = nlohmann::json{{"objects", echo}, {"frames", frames}, {"horizon", horizon}, {"noise_sigma", noise_sigma},
                             {"seed", seed}}
                  .dump();

  const std::vector<Vec3> x0 = sample_particles(objects, seed);
  std::vector<const MotionSpec*> motion_of;
  for (const auto& o : objects)
    for (int i = 0; i < o.count; ++i) {
      motion_of.push_back(&o.motion);
      ds.labels.push_back(o.label);
    }
  ds.particles = static_cast<int>(x0.size());
  ds.timestamps.resize(static_cast<std::size_t>(frames));
  for (int f = 0; f < frames; ++f) ds.timestamps[static_cast<std::size_t>(f)] = horizon * f / (frames - 1);

  ds.positions.resize(static_cast<std::size_t>(frames) * ds.particles * 3);
  ds.orientations.resize(static_cast<std::size_t>(frames) * ds.particles * 4);
  // Noise uses its own stream so clean positions do not depend on it.
  std::mt19937_64 noise_rng(seed ^ 0x9e3779b97f4a7c15ULL);
  std::normal_distribution<double> noise(0.0, 1.0);
  for (int f = 0; f < frames; ++f) {
    const double t = ds.timestamps[static_cast<std::size_t>(f)];
    for (int i = 0; i < ds.particles; ++i) {
      const MotionSpec& m = *motion_of[static_cast<std::size_t>(i)];
      Vec3 p = m.position(x0[static_cast<std::size_t>(i)], t);
      if (noise_sigma > 0.0) p += noise_sigma * Vec3(noise(noise_rng), noise(noise_rng), noise(noise_rng));
      const std::size_t base = (static_cast<std::size_t>(f) * ds.particles + i);
      for (int a = 0; a < 3; ++a) ds.positions[base * 3 + a] = p[a];
      const UnitQuaternion q = UnitQuaternion::from_axis_angle(m.axis, m.angle(t));
      ds.orientations[base * 4 + 0] = q.w();
      ds.orientations[base * 4 + 1] = q.x();
      ds.orientations[base * 4 + 2] = q.y();
      ds.orientations[base * 4 + 3] = q.z();
    }
  }
  Vec3 lo = Vec3::Constant(std::numeric_limits<double>::infinity());
  Vec3 hi = -lo;
  for (int f = 0; f < frames; ++f) {
    const auto fr = ds.frame(f);
    lo = lo.cwiseMin(Vec3(fr.rowwise().minCoeff()));
    hi = hi.cwiseMax(Vec3(fr.rowwise().maxCoeff()));
  }
  ds.bbox = {lo, hi};
  return ds;
}

/// Analytic velocity of particle i (object-major order as in generate) at time t.
inline Vec3 ground_truth_velocity(const std::vector<ObjectSpec>& objects, std::uint64_t seed, int particle, double t) {
  const std::vector<Vec3> x0 = sample_particles(objects, seed);
  if (particle < 0 || particle >= static_cast<int>(x0.size())) throw Error(ErrorKind::InvalidInput, "particle index out of range");
  int i = particle;
  for (const auto& o : objects) {
    if (i < o.count) return o.motion.velocity_at(x0[static_cast<std::size_t>(particle)], t);
    i -= o.count;
  }
  return Vec3::Zero();
}

inline TrajectoryDataset slice_frames(const TrajectoryDataset& ds, int begin, int end) {
  TrajectoryDataset out = ds;
  out.timestamps.assign(ds.timestamps.begin() + begin, ds.timestamps.begin() + end);
  const std::size_t stride = static_cast<std::size_t>(ds.particles) * 3;
  out.positions.assign(ds.positions.begin() + begin * stride, ds.positions.begin() + end * stride);
  if (ds.has_orientations()) {
    const std::size_t qs = static_cast<std::size_t>(ds.particles) * 4;
    out.orientations.assign(ds.orientations.begin() + begin * qs, ds.orientations.begin() + end * qs);
  }
  return out;
}

/// Time-prefix split. The training part keeps round(fraction * frames) frames.
inline std::pair<TrajectoryDataset, TrajectoryDataset> split(const TrajectoryDataset& ds, double train_fraction) {
  if (!(train_fraction > 0.0 && train_fraction <= 1.0)) throw Error(ErrorKind::Config, "train fraction must be in (0, 1]");
  const int n_train = std::clamp(static_cast<int>(std::floor(train_fraction * ds.frames() + 0.5)), 1, ds.frames());
  return {slice_frames(ds, 0, n_train), slice_frames(ds, n_train, ds.frames())};
}

// ---------------------------------------------------------------------------
// Built-in scenes. All use 81 frames over a 4/3 horizon so that the 75%
// training prefix spans exactly t in [0, 1] with a frame gap of 1/60.

inline constexpr int kPresetFrames = 81;
inline constexpr double kPresetHorizon = 4.0 / 3.0;

inline SceneSpec scene_fall_spin(int per_object = 100) {
  using std::numbers::pi;
  SceneSpec s{"fall+spin", {}};
  ObjectSpec ball;
  ball.shape = Shape::Box;
  ball.center = Vec3(-1.2, 0.8, 0.0);
  ball.extent = Vec3(0.2, 0.2, 0.2);
  ball.count = per_object;
  ball.motion.kind = MotionKind::ConstantAcceleration;
  ball.motion.velocity = Vec3(0.9, 0.6, 0.0);
  ball.motion.acceleration = Vec3(0.0, -2.0, 0.0);
  ball.label = 0;

  ObjectSpec wheel;
  wheel.shape = Shape::Box;
  wheel.center = Vec3(1.0, 0.3, 0.0);
  wheel.extent = Vec3(0.35, 0.35, 0.08);
  wheel.count = per_object;
  wheel.motion.kind = MotionKind::ConstantAngular;
  wheel.motion.axis = Vec3::UnitZ();
  wheel.motion.rate = pi;
  wheel.motion.pivot = wheel.center;
  wheel.label = 1;

  ObjectSpec base;
  base.shape = Shape::Box;
  base.center = Vec3(0.0, -0.9, 0.0);
  base.extent = Vec3(0.5, 0.1, 0.3);
  base.count = per_object;
  base.motion.kind = MotionKind::Static;
  base.label = 2;

  s.objects = {ball, wheel, base};
  return s;
}

inline SceneSpec scene_oscillate(int per_object = 150) {
  using std::numbers::pi;
  SceneSpec s{"oscillate", {}};
  ObjectSpec spring;
  spring.shape = Shape::Box;
  spring.center = Vec3(-0.8, 0.0, 0.0);
  spring.extent = Vec3(0.2, 0.2, 0.2);
  spring.count = per_object;
  spring.motion.kind = MotionKind::HarmonicLinear;
  spring.motion.axis = Vec3::UnitY();
  spring.motion.amplitude = 0.4;
  spring.motion.frequency = 1.2 * pi;
  spring.label = 0;

  ObjectSpec pendulum;
  pendulum.shape = Shape::Box;
  pendulum.center = Vec3(0.8, -0.2, 0.0);
  pendulum.extent = Vec3(0.08, 0.4, 0.08);
  pendulum.count = per_object;
  pendulum.motion.kind = MotionKind::HarmonicAngular;
  pendulum.motion.axis = Vec3::UnitZ();
  pendulum.motion.pivot = Vec3(0.8, 0.3, 0.0);
  pendulum.motion.amplitude = 0.5;
  pendulum.motion.frequency = 1.2 * pi;
  pendulum.label = 1;

  s.objects = {spring, pendulum};
  return s;
}

inline SceneSpec scene_screw(int per_object = 150) {
  SceneSpec s{"screw", {}};
  ObjectSpec screw;
  screw.shape = Shape::Box;
  screw.center = Vec3(-0.7, 0.0, 0.0);
  screw.extent = Vec3(0.3, 0.15, 0.3);
  screw.count = per_object;
  screw.motion.kind = MotionKind::Screw;
  screw.motion.axis = Vec3::UnitY();
  screw.motion.rate = 2.0;
  screw.motion.velocity = Vec3(0.0, 0.6, 0.0);
  screw.motion.pivot = screw.center;
  screw.label = 0;

  ObjectSpec drifter;
  drifter.shape = Shape::SphereShell;
  drifter.center = Vec3(0.8, 0.0, 0.0);
  drifter.extent = Vec3(0.3, 0.0, 0.0);
  drifter.count = per_object;
  drifter.motion.kind = MotionKind::ConstantVelocity;
  drifter.motion.velocity = Vec3(0.3, -0.4, 0.2);
  drifter.label = 1;

  s.objects = {screw, drifter};
  return s;
}

inline SceneSpec scene_by_name(const std::string& name) {
  if (name == "fall+spin" || name == "A") return scene_fall_spin();
  if (name == "oscillate" || name == "B") return scene_oscillate();
  if (name == "screw" || name == "C") return scene_screw();
  throw Error(ErrorKind::Config, "unknown scene preset '" + name + "'");
}

}  // namespace rigidflow
