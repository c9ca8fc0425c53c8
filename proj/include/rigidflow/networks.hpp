#pragma once

// The learned pieces of the model: physics-code network, bottleneck network,
// time-weight network, deformation network, and the ablation variants that
// replace some of them. All parameters live in one flat vector; each network
// owns a contiguous block of it.

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "rigidflow/error.hpp"
#include "rigidflow/geometry.hpp"
#include "rigidflow/mlp.hpp"
#include "rigidflow/velocity_field.hpp"

namespace rigidflow {

struct AblationFlags {
  bool learnable_code = false;        // per-particle code table instead of f_code
  bool no_divfree_basis = false;      // v = f_neck(z) . f_motion(p, t)
  bool no_bottleneck_decomp = false;  // V = MLP(z, t)
  bool no_deform_field = false;       // transport from t = 0 in two half steps
  bool no_code_in_deform = false;     // f_deform(p0, t)
  bool no_scale_deform = false;       // delta s fixed to 1

  friend bool operator==(const AblationFlags&, const AblationFlags&) = default;

  bool any() const {
    return learnable_code || no_divfree_basis || no_bottleneck_decomp || no_deform_field || no_code_in_deform ||
           no_scale_deform;
  }
};

// Names accepted on the command line and in config files.
inline constexpr std::array<const char*, 6> kAblationNames = {
    "learnable_code", "no_divfree_basis", "no_bottleneck_decomp",
    "no_deform_field", "no_code_in_deform", "no_scale_deform"};

inline bool* ablation_flag(AblationFlags& f, std::string_view name) {
  if (name == "learnable_code") return &f.learnable_code;
  if (name == "no_divfree_basis") return &f.no_divfree_basis;
  if (name == "no_bottleneck_decomp") return &f.no_bottleneck_decomp;
  if (name == "no_deform_field") return &f.no_deform_field;
  if (name == "no_code_in_deform") return &f.no_code_in_deform;
  if (name == "no_scale_deform") return &f.no_scale_deform;
  return nullptr;
}

struct ModelConfig {
  int code_dim = 16;    // L
  int bottleneck = 16;  // K
  int encoding_degree = 8;

  int code_width = 128;
  int code_layers = 4;
  int neck_multiplier = 4;
  int weight_width = 128;
  int weight_layers = 5;
  int weight_skip = 3;
  int deform_width = 128;
  int deform_layers = 6;
  int deform_skip = 3;

  AblationFlags ablation;
  int particle_count = 0;  // only used by the learnable code table

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;

  void validate() const {
    if (code_dim <= 0 || bottleneck <= 0) throw Error(ErrorKind::Config, "L and K must be positive");
    if (encoding_degree < 1) throw Error(ErrorKind::Config, "encoding degree must be >= 1");
    if (code_layers < 2 || weight_layers < 2 || deform_layers < 2)
      throw Error(ErrorKind::Config, "networks need at least one hidden layer");
    if (ablation.no_divfree_basis && ablation.no_bottleneck_decomp)
      throw Error(ErrorKind::Config, "no_divfree_basis and no_bottleneck_decomp are mutually exclusive");
    if (ablation.learnable_code && particle_count <= 0)
      throw Error(ErrorKind::Config, "learnable_code needs the particle count");
  }
};

namespace detail {
inline std::vector<int> widths(int layers, int width) { return std::vector<int>(layers - 1, width); }
inline std::vector<int> skip_if_valid(int layers, int skip) {
  return skip > 0 && skip < layers ? std::vector<int>{skip} : std::vector<int>{};
}
}  // namespace detail

inline MLPSpec code_spec(const ModelConfig& c) {
  return {{{3, c.encoding_degree}}, detail::widths(c.code_layers, c.code_width), c.code_dim, {}};
}
inline MLPSpec neck_spec(const ModelConfig& c) {
  const int w = c.neck_multiplier * c.code_dim;
  return {{{c.code_dim, 0}}, {w, w}, c.bottleneck, {}};
}
inline MLPSpec weight_spec(const ModelConfig& c) {
  return {{{1, c.encoding_degree}},
          detail::widths(c.weight_layers, c.weight_width),
          6 * c.bottleneck,
          detail::skip_if_valid(c.weight_layers, c.weight_skip)};
}
inline MLPSpec deform_spec(const ModelConfig& c) {
  std::vector<InputSegment> in = {{3, c.encoding_degree}, {1, c.encoding_degree}};
  if (!c.ablation.no_code_in_deform) in.push_back({c.code_dim, 0});
  return {in, detail::widths(c.deform_layers, c.deform_width), 10, detail::skip_if_valid(c.deform_layers, c.deform_skip)};
}
// Ablation: position-dependent K x 3 motion matrix.
inline MLPSpec motion_spec(const ModelConfig& c) {
  return {{{3, c.encoding_degree}, {1, c.encoding_degree}},
          detail::widths(c.weight_layers, c.weight_width),
          3 * c.bottleneck,
          detail::skip_if_valid(c.weight_layers, c.weight_skip)};
}
// Ablation: velocity components straight from (z, t).
inline MLPSpec direct_spec(const ModelConfig& c) {
  return {{{c.code_dim, 0}, {1, c.encoding_degree}},
          detail::widths(c.weight_layers, c.weight_width),
          6,
          detail::skip_if_valid(c.weight_layers, c.weight_skip)};
}

/// Maps scene coordinates into the frame the networks see.
struct Normalization {
  Vec3 center = Vec3::Zero();
  double scale = 1.0;

  Vec3 to_model(const Vec3& p) const { return (p - center) / scale; }
  Vec3 to_world(const Vec3& p) const { return p * scale + center; }
  Matrix to_model(const Matrix& p) const { return (p.colwise() - center) / scale; }
  Matrix to_world(const Matrix& p) const { return (p * scale).colwise() + center; }
};

struct ParamBlock {
  std::size_t offset = 0;
  std::size_t size = 0;
  bool present() const { return size > 0; }
};

/// A DeformationDelta: position offset, rotation change, multiplicative scale.
struct DeformationDelta {
  Vec3 dp = Vec3::Zero();
  UnitQuaternion dr;
  Vec3 ds = Vec3::Ones();
};

inline DeformationDelta deformation_from_raw(std::span<const double> raw, bool no_scale) {
  DeformationDelta d;
  d.dp = Vec3(raw[0], raw[1], raw[2]);
  const double w = 1.0 + raw[3], x = raw[4], y = raw[5], z = raw[6];
  if (w * w + x * x + y * y + z * z > 0.0) d.dr = UnitQuaternion::from_raw(w, x, y, z);
  d.ds = no_scale ? Vec3::Ones() : Vec3(std::exp(raw[7]), std::exp(raw[8]), std::exp(raw[9]));
  return d;
}

class Model {
 public:
  Model() = default;

  explicit Model(const ModelConfig& config) : config_(config) {
    config_.validate();
    code_ = code_spec(config_);
    neck_ = neck_spec(config_);
    weight_ = weight_spec(config_);
    deform_ = deform_spec(config_);
    motion_ = motion_spec(config_);
    direct_ = direct_spec(config_);
    const auto& a = config_.ablation;
    std::size_t offset = 0;
    auto take = [&](bool present, std::size_t n) {
      ParamBlock b{offset, present ? n : 0};
      offset += b.size;
      return b;
    };
    code_block_ = take(!a.learnable_code, code_.param_count());
    table_block_ = take(a.learnable_code, static_cast<std::size_t>(config_.particle_count) * config_.code_dim);
    neck_block_ = take(!a.no_bottleneck_decomp, neck_.param_count());
    weight_block_ = take(!a.no_bottleneck_decomp && !a.no_divfree_basis, weight_.param_count());
    motion_block_ = take(a.no_divfree_basis, motion_.param_count());
    direct_block_ = take(a.no_bottleneck_decomp, direct_.param_count());
    deform_block_ = take(!a.no_deform_field, deform_.param_count());
    params_ = Vector::Zero(static_cast<Eigen::Index>(offset));
  }

  /// Random initialization. Output layers of f_deform and f_weight start at
  /// zero so the model starts from the identity motion.
  void initialize(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    auto init = [&](const MLPSpec& spec, const ParamBlock& b, bool zero_last) {
      if (b.present()) init_params(spec, block(b), rng, zero_last);
    };
    init(code_, code_block_, false);
    if (table_block_.present()) {
      const double a = std::sqrt(6.0 / (1.0 + config_.code_dim));
      std::uniform_real_distribution<double> dist(-a, a);
      for (double& v : block(table_block_)) v = dist(rng);
    }
    init(neck_, neck_block_, false);
    init(weight_, weight_block_, true);
    init(motion_, motion_block_, true);
    init(direct_, direct_block_, true);
    init(deform_, deform_block_, true);
  }

  const ModelConfig& config() const { return config_; }
  const AblationFlags& ablation() const { return config_.ablation; }

  Vector& params() { return params_; }
  const Vector& params() const { return params_; }

  std::span<double> block(const ParamBlock& b) { return {params_.data() + b.offset, b.size}; }
  std::span<const double> block(const ParamBlock& b) const { return {params_.data() + b.offset, b.size}; }
  static std::span<double> block(Vector& v, const ParamBlock& b) { return {v.data() + b.offset, b.size}; }

  const MLPSpec& code_net() const { return code_; }
  const MLPSpec& neck_net() const { return neck_; }
  const MLPSpec& weight_net() const { return weight_; }
  const MLPSpec& deform_net() const { return deform_; }
  const MLPSpec& motion_net() const { return motion_; }
  const MLPSpec& direct_net() const { return direct_; }

  const ParamBlock& code_block() const { return code_block_; }
  const ParamBlock& table_block() const { return table_block_; }
  const ParamBlock& neck_block() const { return neck_block_; }
  const ParamBlock& weight_block() const { return weight_block_; }
  const ParamBlock& motion_block() const { return motion_block_; }
  const ParamBlock& direct_block() const { return direct_block_; }
  const ParamBlock& deform_block() const { return deform_block_; }

  Normalization normalization;

 private:
  ModelConfig config_;
  MLPSpec code_, neck_, weight_, deform_, motion_, direct_;
  ParamBlock code_block_, table_block_, neck_block_, weight_block_, motion_block_, direct_block_, deform_block_;
  Vector params_;
};

// ---------------------------------------------------------------------------
// Physics codes and bottleneck vectors (batched, one particle per column).

struct CodeCache {
  MLPCache mlp;
  std::vector<int> indices;
};

/// z for each particle. `positions` are canonical positions (model frame);
/// `indices` name the particles for the learnable-code table.
inline Matrix physics_codes(const Model& m, const Matrix& positions, std::span<const int> indices,
                            CodeCache* cache = nullptr) {
  if (m.ablation().learnable_code) {
    const auto table = m.block(m.table_block());
    const int L = m.config().code_dim;
    Matrix z(L, static_cast<Eigen::Index>(indices.size()));
    for (std::size_t j = 0; j < indices.size(); ++j) {
      const int i = indices[j];
      if (i < 0 || i >= m.config().particle_count) throw Error(ErrorKind::Config, "particle index out of table range");
      for (int k = 0; k < L; ++k) z(k, static_cast<Eigen::Index>(j)) = table[static_cast<std::size_t>(i) * L + k];
    }
    if (cache) cache->indices.assign(indices.begin(), indices.end());
    return z;
  }
  return mlp_forward(m.code_net(), m.block(m.code_block()), positions, cache ? &cache->mlp : nullptr);
}

inline void physics_codes_backward(const Model& m, const CodeCache& cache, const Matrix& dz, Vector& grad) {
  if (m.ablation().learnable_code) {
    auto g = Model::block(grad, m.table_block());
    const int L = m.config().code_dim;
    for (std::size_t j = 0; j < cache.indices.size(); ++j)
      for (int k = 0; k < L; ++k)
        g[static_cast<std::size_t>(cache.indices[j]) * L + k] += dz(k, static_cast<Eigen::Index>(j));
    return;
  }
  mlp_backward(m.code_net(), m.block(m.code_block()), cache.mlp, dz, Model::block(grad, m.code_block()));
}

inline std::vector<int> iota_indices(int n) {
  std::vector<int> idx(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
  return idx;
}

/// h = f_neck(z). Empty when the bottleneck decomposition is ablated.
inline Matrix bottleneck(const Model& m, const Matrix& z, MLPCache* cache = nullptr) {
  if (!m.neck_block().present()) return Matrix(0, z.cols());
  return mlp_forward(m.neck_net(), m.block(m.neck_block()), z, cache);
}

inline Matrix bottleneck_backward(const Model& m, const MLPCache& cache, const Matrix& dh, Vector& grad) {
  return mlp_backward(m.neck_net(), m.block(m.neck_block()), cache, dh, Model::block(grad, m.neck_block()));
}

/// W_t as a 6 x K matrix (the transpose of the K x 6 row-major reshape of
/// f_weight's output), so that V = W_t^T-form . h is a plain product.
inline Matrix weight_matrix_transposed(const Model& m, double t, MLPCache* cache = nullptr) {
  Matrix in(1, 1);
  in(0, 0) = t;
  const Matrix flat = mlp_forward(m.weight_net(), m.block(m.weight_block()), in, cache);
  return Eigen::Map<const Matrix>(flat.data(), 6, m.config().bottleneck);
}

/// K x 6 weight matrix, element (k, j) = flat[k * 6 + j].
inline Matrix weight_matrix(const Model& m, double t) { return weight_matrix_transposed(m, t).transpose(); }

// ---------------------------------------------------------------------------
// Velocity at one time for a batch of particles.

struct VelocityCache {
  double t = 0.0;
  Matrix positions;   // 3 x N
  Matrix components;  // 6 x N (basis modes)
  Matrix wt;          // 6 x K (bottleneck mode)
  MLPCache net;       // f_weight (one column), f_direct or f_motion
  Matrix motion;      // 3K x N (no-basis mode)
};

/// Velocity components V for every particle (basis modes only).
inline Matrix velocity_components_batch(const Model& m, const Matrix& z, const Matrix& h, double t,
                                        VelocityCache* cache = nullptr) {
  if (m.ablation().no_divfree_basis) throw Error(ErrorKind::Config, "no velocity components without the basis");
  if (m.ablation().no_bottleneck_decomp) {
    Matrix in(z.rows() + 1, z.cols());
    in.topRows(z.rows()) = z;
    in.bottomRows(1).setConstant(t);
    return mlp_forward(m.direct_net(), m.block(m.direct_block()), in, cache ? &cache->net : nullptr);
  }
  Matrix wt = weight_matrix_transposed(m, t, cache ? &cache->net : nullptr);
  Matrix v = wt * h;
  if (cache) cache->wt = std::move(wt);
  return v;
}

/// V_t = h . W_t for a single particle.
inline VelocityComponents velocity_components(const Model& m, std::span<const double> z, double t) {
  const Matrix zc = Eigen::Map<const Matrix>(z.data(), static_cast<Eigen::Index>(z.size()), 1);
  const Matrix h = bottleneck(m, zc);
  const Matrix v = velocity_components_batch(m, zc, h, t);
  VelocityComponents out;
  for (int j = 0; j < 6; ++j) out[static_cast<std::size_t>(j)] = v(j, 0);
  return out;
}

inline Vec3 omega_of(const Matrix& comps, Eigen::Index i) { return {comps(5, i), comps(4, i), comps(3, i)}; }

/// Velocity at `positions` (model frame) at time t.
inline Matrix velocity_batch(const Model& m, const Matrix& z, const Matrix& h, const Matrix& positions, double t,
                             VelocityCache* cache = nullptr) {
  const Eigen::Index n = positions.cols();
  Matrix v(3, n);
  if (m.ablation().no_divfree_basis) {
    Matrix in(4, n);
    in.topRows(3) = positions;
    in.bottomRows(1).setConstant(t);
    Matrix motion = mlp_forward(m.motion_net(), m.block(m.motion_block()), in, cache ? &cache->net : nullptr);
    const int K = m.config().bottleneck;
    // Per particle, motion column reshaped K x 3 row-major: element (k, a) = col[k * 3 + a].
    for (Eigen::Index i = 0; i < n; ++i) {
      Eigen::Map<const Matrix> mk(motion.col(i).data(), 3, K);
      v.col(i) = mk * h.col(i);
    }
    if (cache) {
      cache->t = t;
      cache->positions = positions;
      cache->motion = std::move(motion);
    }
    return v;
  }
  Matrix comps = velocity_components_batch(m, z, h, t, cache);
  for (Eigen::Index i = 0; i < n; ++i) {
    const Vec3 p = positions.col(i);
    v.col(i) = Vec3(comps(0, i), comps(1, i), comps(2, i)) + omega_of(comps, i).cross(p);
  }
  if (cache) {
    cache->t = t;
    cache->positions = positions;
    cache->components = std::move(comps);
  }
  return v;
}

struct VelocityGrads {
  Matrix dz;  // L x N (or empty)
  Matrix dh;  // K x N (or empty)
  Matrix dp;  // 3 x N
};

/// Backward of velocity_components_batch for upstream `dcomps` (6 x N). dp is left empty.
inline VelocityGrads velocity_components_backward(const Model& m, const VelocityCache& cache, const Matrix& z,
                                                  const Matrix& h, const Matrix& dcomps, Vector& grad) {
  VelocityGrads g;
  if (m.ablation().no_bottleneck_decomp) {
    const Matrix d_in =
        mlp_backward(m.direct_net(), m.block(m.direct_block()), cache.net, dcomps, Model::block(grad, m.direct_block()));
    g.dz = d_in.topRows(z.rows());
    return g;
  }
  g.dh = cache.wt.transpose() * dcomps;
  const Matrix dwt = dcomps * h.transpose();  // 6 x K
  const Matrix dflat = Eigen::Map<const Matrix>(dwt.data(), 6 * m.config().bottleneck, 1);
  mlp_backward(m.weight_net(), m.block(m.weight_block()), cache.net, dflat, Model::block(grad, m.weight_block()));
  return g;
}

/// Backward of velocity_batch for upstream `dv`; parameter gradients go into `grad`.
inline VelocityGrads velocity_batch_backward(const Model& m, const VelocityCache& cache, const Matrix& z,
                                             const Matrix& h, const Matrix& dv, Vector& grad) {
  const Eigen::Index n = dv.cols();
  VelocityGrads g;
  g.dp = Matrix::Zero(3, n);
  if (m.ablation().no_divfree_basis) {
    const int K = m.config().bottleneck;
    Matrix d_motion(3 * K, n);
    g.dh = Matrix::Zero(K, n);
    for (Eigen::Index i = 0; i < n; ++i) {
      Eigen::Map<const Matrix> mk(cache.motion.col(i).data(), 3, K);
      g.dh.col(i) = mk.transpose() * dv.col(i);
      Eigen::Map<Matrix> dmk(d_motion.col(i).data(), 3, K);
      dmk = dv.col(i) * h.col(i).transpose();
    }
    const Matrix d_in =
        mlp_backward(m.motion_net(), m.block(m.motion_block()), cache.net, d_motion, Model::block(grad, m.motion_block()));
    g.dp = d_in.topRows(3);
    return g;
  }

  Matrix dcomps(6, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const Vec3 gv = dv.col(i);
    const Vec3 p = cache.positions.col(i);
    const Vec3 w = omega_of(cache.components, i);
    const Vec3 dw = p.cross(gv);
    dcomps(0, i) = gv.x();
    dcomps(1, i) = gv.y();
    dcomps(2, i) = gv.z();
    dcomps(3, i) = dw.z();
    dcomps(4, i) = dw.y();
    dcomps(5, i) = dw.x();
    g.dp.col(i) = gv.cross(w);
  }
  VelocityGrads c = velocity_components_backward(m, cache, z, h, dcomps, grad);
  c.dp = std::move(g.dp);
  return c;
}

inline constexpr double kJacobianStep = 1e-5;

/// dv/dp at each particle together with what its backward needs. Exact skew
/// matrix for basis modes (reusing the velocity cache at the same point and
/// time when given); central differences for the position-dependent ablation
/// field, with one cache per probe.
struct JacobianRecord {
  std::vector<Mat3> jac;
  std::vector<VelocityCache> probes;  // +x, -x, +y, -y, +z, -z (ablation field only)
  VelocityCache components;           // basis modes, when no cache was supplied
  bool own_components = false;
};

inline JacobianRecord velocity_jacobian_record(const Model& m, const Matrix& z, const Matrix& h,
                                               const Matrix& positions, double t,
                                               const VelocityCache* at_point = nullptr) {
  const Eigen::Index n = positions.cols();
  JacobianRecord r;
  r.jac.resize(static_cast<std::size_t>(n));
  if (m.ablation().no_divfree_basis) {
    r.probes.resize(6);
    for (int a = 0; a < 3; ++a) {
      Matrix plus = positions, minus = positions;
      plus.row(a).array() += kJacobianStep;
      minus.row(a).array() -= kJacobianStep;
      const Matrix d = (velocity_batch(m, z, h, plus, t, &r.probes[static_cast<std::size_t>(2 * a)]) -
                        velocity_batch(m, z, h, minus, t, &r.probes[static_cast<std::size_t>(2 * a + 1)])) /
                       (2 * kJacobianStep);
      for (Eigen::Index i = 0; i < n; ++i) r.jac[static_cast<std::size_t>(i)].col(a) = d.col(i);
    }
    return r;
  }
  const Matrix* comps = at_point ? &at_point->components : nullptr;
  if (!comps) {
    r.components.components = velocity_components_batch(m, z, h, t, &r.components);
    r.components.t = t;
    r.own_components = true;
    comps = &r.components.components;
  }
  for (Eigen::Index i = 0; i < n; ++i) r.jac[static_cast<std::size_t>(i)] = skew(omega_of(*comps, i));
  return r;
}

/// Backward of velocity_jacobian_record for upstream dJ per particle. `at_point`
/// must be the cache passed to the forward call (if any). dp is the gradient
/// with respect to the evaluation positions.
inline VelocityGrads velocity_jacobian_backward(const Model& m, const JacobianRecord& r, const Matrix& z,
                                                const Matrix& h, const std::vector<Mat3>& d_jac, Vector& grad,
                                                const VelocityCache* at_point = nullptr) {
  const Eigen::Index n = static_cast<Eigen::Index>(d_jac.size());
  VelocityGrads out;
  out.dp = Matrix::Zero(3, n);
  auto add = [&](const VelocityGrads& g) {
    if (g.dz.size()) out.dz = out.dz.size() ? Matrix(out.dz + g.dz) : g.dz;
    if (g.dh.size()) out.dh = out.dh.size() ? Matrix(out.dh + g.dh) : g.dh;
    if (g.dp.size()) out.dp += g.dp;
  };
  if (m.ablation().no_divfree_basis) {
    for (int a = 0; a < 3; ++a) {
      Matrix dv(3, n);
      for (Eigen::Index i = 0; i < n; ++i) dv.col(i) = d_jac[static_cast<std::size_t>(i)].col(a) / (2 * kJacobianStep);
      add(velocity_batch_backward(m, r.probes[static_cast<std::size_t>(2 * a)], z, h, dv, grad));
      add(velocity_batch_backward(m, r.probes[static_cast<std::size_t>(2 * a + 1)], z, h, -dv, grad));
    }
    return out;
  }
  // J = [omega]x, so dL/domega = vee(dJ - dJ^T).
  Matrix dcomps = Matrix::Zero(6, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const Mat3& g = d_jac[static_cast<std::size_t>(i)];
    dcomps(5, i) = g(2, 1) - g(1, 2);
    dcomps(4, i) = g(0, 2) - g(2, 0);
    dcomps(3, i) = g(1, 0) - g(0, 1);
  }
  const VelocityCache& cache = at_point && !r.own_components ? *at_point : r.components;
  add(velocity_components_backward(m, cache, z, h, dcomps, grad));
  return out;
}

/// dv/dp at each particle.
inline std::vector<Mat3> velocity_jacobians(const Model& m, const Matrix& z, const Matrix& h, const Matrix& positions,
                                            double t) {
  return velocity_jacobian_record(m, z, h, positions, t).jac;
}

struct DivergenceProbe {
  int particle = 0;
  double t = 0.0;
  Vec3 point = Vec3::Zero();
  double divergence = 0.0;  // central differences
  double trace = 0.0;       // of the analytic Jacobian
};

/// Random (particle, t, point) probes of the learned field. Points are drawn
/// around the particle's canonical position with standard deviation `spread`,
/// times uniformly from [0, t_max].
inline std::vector<DivergenceProbe> divergence_probes(const Model& m, const Matrix& canonical, int count,
                                                      std::uint64_t seed, double t_max = 1.0, double spread = 0.5) {
  if (count < 0) throw Error(ErrorKind::InvalidInput, "probe count must be >= 0");
  if (count > 0 && canonical.cols() == 0) throw Error(ErrorKind::InvalidInput, "no particles to probe");
  std::vector<DivergenceProbe> out;
  if (count == 0) return out;
  const Matrix z = physics_codes(m, canonical, iota_indices(static_cast<int>(canonical.cols())));
  const Matrix h = bottleneck(m, z);
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> pick(0, static_cast<int>(canonical.cols()) - 1);
  std::uniform_real_distribution<double> ut(0.0, t_max);
  std::normal_distribution<double> offset(0.0, spread);
  for (int k = 0; k < count; ++k) {
    DivergenceProbe p;
    p.particle = pick(rng);
    p.t = ut(rng);
    p.point = canonical.col(p.particle) + Vec3(offset(rng), offset(rng), offset(rng));
    const Matrix zi = z.col(p.particle), hi = h.col(p.particle);
    auto field = [&](const Vec3& q) -> Vec3 { return velocity_batch(m, zi, hi, Matrix(q), p.t).col(0); };
    p.divergence = numeric_divergence(field, p.point);
    p.trace = velocity_jacobians(m, zi, hi, Matrix(p.point), p.t)[0].trace();
    out.push_back(p);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Deformation field.

/// Input columns [p0; t; z] for each particle at each of `times` (time-major blocks).
inline Matrix deform_input(const Model& m, const Matrix& p0, std::span<const double> times, const Matrix& z) {
  const bool with_code = !m.ablation().no_code_in_deform;
  const Eigen::Index n = p0.cols();
  const Eigen::Index rows = 4 + (with_code ? z.rows() : 0);
  Matrix in(rows, n * static_cast<Eigen::Index>(times.size()));
  for (std::size_t b = 0; b < times.size(); ++b) {
    auto blk = in.middleCols(static_cast<Eigen::Index>(b) * n, n);
    blk.topRows(3) = p0;
    blk.row(3).setConstant(times[b]);
    if (with_code) blk.bottomRows(z.rows()) = z;
  }
  return in;
}

/// Raw 10-row deformation outputs: [dp(3), dr raw(4), log ds(3)].
inline Matrix deform_raw(const Model& m, const Matrix& input, MLPCache* cache = nullptr) {
  if (!m.deform_block().present()) throw Error(ErrorKind::Config, "model has no deformation field");
  return mlp_forward(m.deform_net(), m.block(m.deform_block()), input, cache);
}

/// Backward for an upstream gradient on the raw outputs; returns d(input).
inline Matrix deform_raw_backward(const Model& m, const MLPCache& cache, const Matrix& d_raw, Vector& grad) {
  return mlp_backward(m.deform_net(), m.block(m.deform_block()), cache, d_raw, Model::block(grad, m.deform_block()));
}

/// f_deform for a single particle.
inline DeformationDelta f_deform(const Model& m, const Vec3& p0, double t, std::span<const double> z) {
  Matrix zc = Eigen::Map<const Matrix>(z.data(), static_cast<Eigen::Index>(z.size()), 1);
  const double ts[] = {t};
  const Matrix raw = deform_raw(m, deform_input(m, Matrix(p0), ts, zc));
  return deformation_from_raw(std::span<const double>(raw.data(), 10), m.ablation().no_scale_deform);
}

/// f_code for a single canonical position.
inline std::vector<double> f_code(const Model& m, const Vec3& p0) {
  const Matrix z = mlp_forward(m.code_net(), m.block(m.code_block()), Matrix(p0));
  return {z.data(), z.data() + z.size()};
}

/// f_neck for a single code.
inline std::vector<double> f_neck(const Model& m, std::span<const double> z) {
  const Matrix h = bottleneck(m, Eigen::Map<const Matrix>(z.data(), static_cast<Eigen::Index>(z.size()), 1));
  return {h.data(), h.data() + h.size()};
}

}  // namespace rigidflow
