#pragma once

// Rigid-motion velocity basis. A velocity field v(p) = V . B(p) with V
// independent of p is divergence free for every V, since each of the six
// basis fields is.

#include <array>

#include "rigidflow/geometry.hpp"

namespace rigidflow {

/// Six velocity components in the order [vx, vy, vz, wz, wy, wx].
///
/// The angular part is stored z-first to line up with the basis rows; use
/// angular() to get omega = (wx, wy, wz) in conventional order.
struct VelocityComponents {
  std::array<double, 6> v{};

  static VelocityComponents from_linear_angular(const Vec3& lin, const Vec3& omega) {
    return {{lin.x(), lin.y(), lin.z(), omega.z(), omega.y(), omega.x()}};
  }

  Vec3 linear() const { return {v[0], v[1], v[2]}; }
  Vec3 angular() const { return {v[5], v[4], v[3]}; }

  double operator[](std::size_t i) const { return v[i]; }
  double& operator[](std::size_t i) { return v[i]; }
};

using BasisMatrix = Eigen::Matrix<double, 6, 3>;

inline BasisMatrix basis_matrix(const Vec3& p) {
  BasisMatrix b;
  b << 1, 0, 0,
      0, 1, 0,
      0, 0, 1,
      -p.y(), p.x(), 0,
      p.z(), 0, -p.x(),
      0, -p.z(), p.y();
  return b;
}

inline Vec3 eval_velocity(const VelocityComponents& comps, const Vec3& p) {
  // Equivalent to V . B(p); written as lin + omega x p.
  return comps.linear() + comps.angular().cross(p);
}

/// dv/dp for the field above: the skew matrix of omega, constant in p.
inline Mat3 velocity_jacobian(const VelocityComponents& comps) { return skew(comps.angular()); }

inline constexpr double kDefaultDivergenceStep = 1e-4;

/// Central-difference divergence of an arbitrary field at p.
template <typename Field>
double numeric_divergence(const Field& field, const Vec3& p, double h = kDefaultDivergenceStep) {
  if (!(h > 0.0)) throw Error(ErrorKind::InvalidInput, "finite-difference step must be positive");
  double div = 0.0;
  for (int a = 0; a < 3; ++a) {
    Vec3 plus = p, minus = p;
    plus[a] += h;
    minus[a] -= h;
    const Vec3 fp = field(plus);
    const Vec3 fm = field(minus);
    div += (fp[a] - fm[a]) / (2.0 * h);
  }
  return div;
}

inline double numeric_divergence(const VelocityComponents& comps, const Vec3& p,
                                 double h = kDefaultDivergenceStep) {
  return numeric_divergence([&](const Vec3& q) { return eval_velocity(comps, q); }, p, h);
}

}  // namespace rigidflow
