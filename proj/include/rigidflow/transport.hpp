#pragma once

// Interleaved mid-point transport of rigid kernels through the learned
// velocity field, and its reverse-mode gradient for the position path.

#include <cmath>
#include <string>
#include <vector>

#include "rigidflow/error.hpp"
#include "rigidflow/geometry.hpp"
#include "rigidflow/networks.hpp"

namespace rigidflow {

struct Kernel {
  Vec3 p = Vec3::Zero();
  UnitQuaternion r;
  Vec3 s = Vec3::Ones();
  double opacity = 1.0;
  Vec3 color = Vec3::Zero();
  std::vector<double> z;
};

struct KernelSet {
  std::vector<Kernel> kernels;
  double time = 0.0;

  std::size_t size() const { return kernels.size(); }

  Matrix positions() const {
    Matrix p(3, static_cast<Eigen::Index>(kernels.size()));
    for (std::size_t i = 0; i < kernels.size(); ++i) p.col(static_cast<Eigen::Index>(i)) = kernels[i].p;
    return p;
  }

  Matrix codes() const {
    const Eigen::Index L = kernels.empty() ? 0 : static_cast<Eigen::Index>(kernels.front().z.size());
    Matrix z(L, static_cast<Eigen::Index>(kernels.size()));
    for (std::size_t i = 0; i < kernels.size(); ++i) {
      if (static_cast<Eigen::Index>(kernels[i].z.size()) != L)
        throw Error(ErrorKind::InvalidInput, "kernels carry physics codes of different lengths");
      for (Eigen::Index k = 0; k < L; ++k) z(k, static_cast<Eigen::Index>(i)) = kernels[i].z[static_cast<std::size_t>(k)];
    }
    return z;
  }
};

/// Canonical kernels at t = 0 with codes from the model (unit scale, identity orientation).
inline KernelSet canonical_kernels(const Model& m, const Matrix& positions) {
  const auto idx = iota_indices(static_cast<int>(positions.cols()));
  const Matrix z = physics_codes(m, positions, idx);
  KernelSet set;
  set.time = 0.0;
  set.kernels.resize(static_cast<std::size_t>(positions.cols()));
  for (Eigen::Index i = 0; i < positions.cols(); ++i) {
    Kernel& k = set.kernels[static_cast<std::size_t>(i)];
    k.p = positions.col(i);
    k.z.assign(z.col(i).data(), z.col(i).data() + z.rows());
  }
  return set;
}

// ---------------------------------------------------------------------------
// Position path with a tape.

struct TransportStepRecord {
  double t = 0.0;
  double dt = 0.0;
  VelocityCache start;  // velocity at (p, t)
  VelocityCache mid;    // velocity at (p_mid, t + dt/2)
};

struct TransportTape {
  std::vector<TransportStepRecord> steps;
};

inline void check_finite(const Matrix& p, const char* what) {
  if (p.allFinite()) return;
  for (Eigen::Index i = 0; i < p.cols(); ++i)
    if (!p.col(i).allFinite())
      throw Error(ErrorKind::NumericOverflow, std::string(what) + " became non-finite at particle " + std::to_string(i));
}

/// One mid-point step on positions. Returns the new positions; the mid-point
/// velocity is written to `v_mid` when non-null.
inline Matrix midpoint_positions(const Model& m, const Matrix& z, const Matrix& h, const Matrix& p, double t, double dt,
                                 TransportStepRecord* rec = nullptr) {
  VelocityCache* c1 = rec ? &rec->start : nullptr;
  VelocityCache* c2 = rec ? &rec->mid : nullptr;
  const Matrix v = velocity_batch(m, z, h, p, t, c1);
  const Matrix pm = p + 0.5 * dt * v;
  check_finite(pm, "mid-point position");
  const Matrix vm = velocity_batch(m, z, h, pm, t + 0.5 * dt, c2);
  Matrix out = p + dt * vm;
  check_finite(out, "position");
  if (rec) {
    rec->t = t;
    rec->dt = dt;
  }
  return out;
}

/// n equal mid-point steps from t0 to t1 on positions only.
inline Matrix transport_positions(const Model& m, const Matrix& z, const Matrix& h, const Matrix& p0, double t0,
                                  double t1, int n_steps, TransportTape* tape = nullptr) {
  if (n_steps < 1) throw Error(ErrorKind::InvalidInput, "need at least one transport step");
  const double dt = (t1 - t0) / n_steps;
  if (tape) tape->steps.assign(static_cast<std::size_t>(n_steps), {});
  Matrix p = p0;
  for (int s = 0; s < n_steps; ++s) {
    const double t = t0 + s * dt;
    p = midpoint_positions(m, z, h, p, t, dt, tape ? &tape->steps[static_cast<std::size_t>(s)] : nullptr);
  }
  return p;
}

struct TransportGrads {
  Matrix dz;  // accumulated gradient w.r.t. physics codes (L x N), empty if unused
  Matrix dh;  // accumulated gradient w.r.t. bottleneck vectors (K x N), empty if unused
  Matrix dp;  // gradient w.r.t. starting positions
};

/// Reverse pass through a recorded transport. Parameter gradients of the
/// velocity networks are accumulated into `grad`.
/// `d_mid`, when given, holds extra gradient on each step's mid-point positions
/// (from the rotation path).
inline TransportGrads transport_positions_backward(const Model& m, const TransportTape& tape, const Matrix& z,
                                                   const Matrix& h, const Matrix& d_end, Vector& grad,
                                                   const std::vector<Matrix>* d_mid = nullptr) {
  TransportGrads out;
  const Eigen::Index n = d_end.cols();
  out.dz = Matrix::Zero(z.rows(), n);
  out.dh = Matrix::Zero(h.rows(), n);
  Matrix dp = d_end;
  auto accumulate = [&](const VelocityGrads& g) {
    if (g.dz.size()) out.dz += g.dz;
    if (g.dh.size()) out.dh += g.dh;
  };
  for (std::size_t s = tape.steps.size(); s-- > 0;) {
    const TransportStepRecord* it = &tape.steps[s];
    // p_next = p + dt * v(p_mid), p_mid = p + dt/2 * v(p)
    const Matrix dvm = it->dt * dp;
    const VelocityGrads gm = velocity_batch_backward(m, it->mid, z, h, dvm, grad);
    accumulate(gm);
    Matrix dpm = gm.dp;
    if (d_mid && (*d_mid)[s].size()) dpm += (*d_mid)[s];
    const Matrix dv = 0.5 * it->dt * dpm;
    const VelocityGrads g0 = velocity_batch_backward(m, it->start, z, h, dv, grad);
    accumulate(g0);
    dp = dp + dpm + g0.dp;
  }
  out.dp = std::move(dp);
  return out;
}

// ---------------------------------------------------------------------------
// Orientation path: R <- proj((I + dt J_mid) R) each step, J_mid the velocity
// Jacobian at the recorded mid-point.

struct RotationTape {
  std::vector<JacobianRecord> jac;         // per step
  std::vector<std::vector<Mat3>> start;    // R at the start of each step
  std::vector<std::vector<Mat3>> update;   // (I + dt J) R before projection
  std::vector<std::vector<Mat3>> end;      // projected
};

inline std::vector<Mat3> transport_rotations(const Model& m, const Matrix& z, const Matrix& h,
                                             const TransportTape& tape, const std::vector<Mat3>& r0,
                                             RotationTape* rt = nullptr) {
  std::vector<Mat3> r = r0;
  if (rt) *rt = {};
  for (const auto& step : tape.steps) {
    JacobianRecord jr = velocity_jacobian_record(m, z, h, step.mid.positions, step.t + 0.5 * step.dt, &step.mid);
    std::vector<Mat3> upd(r.size()), out(r.size());
    for (std::size_t i = 0; i < r.size(); ++i) {
      upd[i] = (Mat3::Identity() + step.dt * jr.jac[i]) * r[i];
      if (!upd[i].allFinite())
        throw Error(ErrorKind::NumericOverflow, "rotation became non-finite at particle " + std::to_string(i));
      out[i] = project_to_rotation(upd[i]);
    }
    if (rt) {
      rt->jac.push_back(std::move(jr));
      rt->start.push_back(r);
      rt->update.push_back(upd);
      rt->end.push_back(out);
    }
    r = std::move(out);
  }
  return r;
}

struct RotationGrads {
  Matrix dz;                  // L x N, empty if unused
  Matrix dh;                  // K x N, empty if unused
  std::vector<Matrix> d_mid;  // per step, gradient on the mid-point positions
  std::vector<Mat3> d_start;  // gradient on the starting rotations
};

inline RotationGrads transport_rotations_backward(const Model& m, const TransportTape& tape, const RotationTape& rt,
                                                  const Matrix& z, const Matrix& h, const std::vector<Mat3>& d_end,
                                                  Vector& grad) {
  RotationGrads out;
  const std::size_t n = d_end.size();
  out.d_mid.resize(tape.steps.size());
  std::vector<Mat3> g = d_end;
  std::vector<Mat3> d_jac(n);
  for (std::size_t s = tape.steps.size(); s-- > 0;) {
    const double dt = tape.steps[s].dt;
    for (std::size_t i = 0; i < n; ++i) {
      const Mat3 d_upd = rotation_projection_backward(rt.update[s][i], rt.end[s][i], g[i]);
      d_jac[i] = dt * d_upd * rt.start[s][i].transpose();
      g[i] = (Mat3::Identity() + dt * rt.jac[s].jac[i]).transpose() * d_upd;
    }
    const VelocityGrads vg = velocity_jacobian_backward(m, rt.jac[s], z, h, d_jac, grad, &tape.steps[s].mid);
    if (vg.dz.size()) out.dz = out.dz.size() ? Matrix(out.dz + vg.dz) : vg.dz;
    if (vg.dh.size()) out.dh = out.dh.size() ? Matrix(out.dh + vg.dh) : vg.dh;
    out.d_mid[s] = vg.dp;
  }
  out.d_start = std::move(g);
  return out;
}

// ---------------------------------------------------------------------------
// Kernel-level API.

/// One step of the interleaved mid-point method from set.time to set.time + dt.
/// Scale, opacity, color and code are carried through unchanged.
inline KernelSet transport_step(const KernelSet& set, double dt, const Model& m) {
  if (!(dt > 0.0)) throw Error(ErrorKind::InvalidInput, "transport step must be positive");
  KernelSet out = set;
  out.time = set.time + dt;
  if (set.kernels.empty()) return out;

  const Matrix z = set.codes();
  const Matrix h = bottleneck(m, z);
  const Matrix p = set.positions();

  TransportStepRecord rec;
  const Matrix pn = midpoint_positions(m, z, h, p, set.time, dt, &rec);
  const std::vector<Mat3> jac = velocity_jacobians(m, z, h, rec.mid.positions, set.time + 0.5 * dt);

  for (std::size_t i = 0; i < set.kernels.size(); ++i) {
    Kernel& k = out.kernels[i];
    k.p = pn.col(static_cast<Eigen::Index>(i));
    const Mat3 r = (Mat3::Identity() + dt * jac[i]) * quat_to_rot(set.kernels[i].r);
    if (!r.allFinite())
      throw Error(ErrorKind::NumericOverflow, "rotation became non-finite at particle " + std::to_string(i));
    k.r = rot_to_quat(project_to_rotation(r));
  }
  return out;
}

/// n_steps equal steps of transport_step from set.time to t1.
inline KernelSet transport_span(const KernelSet& set, double t1, int n_steps, const Model& m) {
  if (!(t1 > set.time)) throw Error(ErrorKind::InvalidInput, "transport target must be after the start time");
  if (n_steps < 1) throw Error(ErrorKind::InvalidInput, "need at least one transport step");
  const double dt = (t1 - set.time) / n_steps;
  const double t0 = set.time;
  KernelSet cur = set;
  for (int s = 0; s < n_steps; ++s) {
    cur = transport_step(cur, dt, m);
    cur.time = t0 + (s + 1) * dt;
  }
  cur.time = t1;
  return cur;
}

/// Number of sub-steps so that each is no longer than max_dt.
inline int substeps_for(double span, double max_dt) {
  return std::max(1, static_cast<int>(std::ceil(span / max_dt - 1e-9)));
}

/// Gradient of sum(upstream . transported positions) for one transport_step,
/// with respect to the velocity-network parameters, the codes and the
/// starting positions. Rotation and scale paths do not contribute.
struct TransportStepGradient {
  Vector params;
  Matrix dz;
  Matrix dp;
};

inline TransportStepGradient transport_gradient(const KernelSet& set, double dt, const Model& m,
                                                const Matrix& upstream) {
  if (upstream.rows() != 3 || upstream.cols() != static_cast<Eigen::Index>(set.size()))
    throw Error(ErrorKind::InvalidInput, "upstream gradient must be 3 x N");
  TransportStepGradient out;
  out.params = Vector::Zero(m.params().size());
  const Matrix z = set.codes();
  MLPCache neck_cache;
  const Matrix h = bottleneck(m, z, &neck_cache);
  TransportTape tape;
  transport_positions(m, z, h, set.positions(), set.time, set.time + dt, 1, &tape);
  const TransportGrads g = transport_positions_backward(m, tape, z, h, upstream, out.params);
  out.dz = g.dz;
  if (h.rows() > 0) out.dz += bottleneck_backward(m, neck_cache, g.dh, out.params);
  out.dp = g.dp;
  return out;
}

}  // namespace rigidflow
