#pragma once

// Rotation algebra and positional encoding shared by every module.
//
// Quaternions are Hamilton, scalar-first (w, x, y, z). Composition a * b
// applies b first when acting on vectors, so rot(a * b) = rot(a) * rot(b).

#include <Eigen/Dense>

#include <cmath>
#include <span>
#include <vector>

#include "rigidflow/error.hpp"

namespace rigidflow {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

inline bool all_finite(const Vec3& v) { return v.allFinite(); }

class UnitQuaternion {
 public:
  UnitQuaternion() = default;

  // Normalizes (w, x, y, z). Throws on non-finite or zero-norm input.
  static UnitQuaternion from_raw(double w, double x, double y, double z) {
    const double n = std::sqrt(w * w + x * x + y * y + z * z);
    if (!std::isfinite(n)) throw Error(ErrorKind::InvalidInput, "non-finite quaternion");
    if (n == 0.0) throw Error(ErrorKind::InvalidInput, "zero-norm quaternion");
    UnitQuaternion q;
    q.w_ = w / n;
    q.x_ = x / n;
    q.y_ = y / n;
    q.z_ = z / n;
    return q;
  }

  static UnitQuaternion identity() { return {}; }

  static UnitQuaternion from_axis_angle(const Vec3& axis, double angle) {
    const Vec3 a = axis.normalized();
    const double s = std::sin(0.5 * angle);
    return from_raw(std::cos(0.5 * angle), s * a.x(), s * a.y(), s * a.z());
  }

  double w() const { return w_; }
  double x() const { return x_; }
  double y() const { return y_; }
  double z() const { return z_; }

  UnitQuaternion conjugate() const {
    UnitQuaternion q = *this;
    q.x_ = -x_;
    q.y_ = -y_;
    q.z_ = -z_;
    return q;
  }

  UnitQuaternion negated() const {
    UnitQuaternion q;
    q.w_ = -w_;
    q.x_ = -x_;
    q.y_ = -y_;
    q.z_ = -z_;
    return q;
  }

  // Distance between orientations, insensitive to the q / -q ambiguity.
  double orientation_distance(const UnitQuaternion& o) const {
    const double plus = std::abs(w_ + o.w_) + std::abs(x_ + o.x_) + std::abs(y_ + o.y_) + std::abs(z_ + o.z_);
    const double minus = std::abs(w_ - o.w_) + std::abs(x_ - o.x_) + std::abs(y_ - o.y_) + std::abs(z_ - o.z_);
    return std::min(plus, minus);
  }

  friend bool operator==(const UnitQuaternion&, const UnitQuaternion&) = default;

 private:
  double w_ = 1.0, x_ = 0.0, y_ = 0.0, z_ = 0.0;
};

// Raw Hamilton product on (w, x, y, z) tuples; no normalization.
inline Eigen::Vector4d hamilton_product(const Eigen::Vector4d& a, const Eigen::Vector4d& b) {
  return {a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
          a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
          a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
          a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0]};
}

inline Eigen::Vector4d as_vector(const UnitQuaternion& q) { return {q.w(), q.x(), q.y(), q.z()}; }

inline UnitQuaternion quat_compose(const UnitQuaternion& a, const UnitQuaternion& b) {
  const Eigen::Vector4d p = hamilton_product(as_vector(a), as_vector(b));
  return UnitQuaternion::from_raw(p[0], p[1], p[2], p[3]);
}

inline Mat3 quat_to_rot(const UnitQuaternion& q) {
  // Re-normalize: callers may hand us quaternions that drifted through arithmetic.
  const UnitQuaternion u = UnitQuaternion::from_raw(q.w(), q.x(), q.y(), q.z());
  const double w = u.w(), x = u.x(), y = u.y(), z = u.z();
  Mat3 r;
  r << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
      2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
      2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
  return r;
}

inline Mat3 skew(const Vec3& w) {
  Mat3 s;
  s << 0, -w.z(), w.y(),
      w.z(), 0, -w.x(),
      -w.y(), w.x(), 0;
  return s;
}

// Nearest orthogonal matrix in Frobenius norm (polar factor), via SVD.
// The result may have det = -1 if the input does.
inline Mat3 polar_orthogonal_factor(const Mat3& m) {
  Eigen::JacobiSVD<Mat3> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
  return svd.matrixU() * svd.matrixV().transpose();
}

// Projects onto SO(3). Throws DegenerateRotation if the polar factor is a reflection.
inline Mat3 project_to_rotation(const Mat3& m) {
  if (!m.allFinite()) throw Error(ErrorKind::InvalidInput, "non-finite matrix");
  const Mat3 r = polar_orthogonal_factor(m);
  if (r.determinant() <= 0.0) throw Error(ErrorKind::DegenerateRotation, "projected matrix has det <= 0");
  return r;
}

/// Pulls dL/dR back to dL/dM through R = polar factor of M (det M > 0).
/// With S = R^T M symmetric, dR = R [u]x where (tr(S) I - S) u = vee(R^T dM - dM^T R).
inline Mat3 rotation_projection_backward(const Mat3& m, const Mat3& r, const Mat3& d_r) {
  const Mat3 S = r.transpose() * m;
  const Mat3 A = S.trace() * Mat3::Identity() - S;
  const Mat3 X = r.transpose() * d_r - d_r.transpose() * r;
  const Vec3 g(X(2, 1), X(0, 2), X(1, 0));
  const Vec3 u = A.fullPivLu().solve(g);
  if (!u.allFinite()) throw Error(ErrorKind::DegenerateRotation, "projection is not differentiable here");
  return r * skew(u);
}

/// Gradient of quat_to_rot(from_raw(q)) with respect to the raw (w, x, y, z).
inline Eigen::Vector4d quat_to_rot_backward(const Eigen::Vector4d& raw, const Mat3& d_r) {
  const double n = raw.norm();
  const Eigen::Vector4d q = raw / n;
  const double w = q[0], x = q[1], y = q[2], z = q[3];
  const Mat3& g = d_r;
  Eigen::Vector4d dq;
  dq[0] = 2 * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) + x * g(2, 1));
  dq[1] = 2 * (y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - 2 * x * g(1, 1) - w * g(1, 2) + z * g(2, 0) + w * g(2, 1) -
               2 * x * g(2, 2));
  dq[2] = 2 * (-2 * y * g(0, 0) + x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2) - w * g(2, 0) + z * g(2, 1) -
               2 * y * g(2, 2));
  dq[3] = 2 * (-2 * z * g(0, 0) - w * g(0, 1) + x * g(0, 2) + w * g(1, 0) - 2 * z * g(1, 1) + y * g(1, 2) + x * g(2, 0) +
               y * g(2, 1));
  return (dq - q * q.dot(dq)) / n;
}

// Tolerance on ||R^T R - I||_F accepted by rot_to_quat before projection.
inline constexpr double kMaxOrthogonalityDefect = 0.3;

inline UnitQuaternion rot_to_quat(const Mat3& m) {
  if (!m.allFinite()) throw Error(ErrorKind::InvalidInput, "non-finite matrix");
  const double defect = (m.transpose() * m - Mat3::Identity()).norm();
  if (defect > kMaxOrthogonalityDefect)
    throw Error(ErrorKind::InvalidInput, "matrix too far from orthogonal (defect " + std::to_string(defect) + ")");
  const Mat3 r = project_to_rotation(m);

  // Shepperd: branch on the largest of trace and diagonal entries.
  const double tr = r.trace();
  double w, x, y, z;
  if (tr >= r(0, 0) && tr >= r(1, 1) && tr >= r(2, 2)) {
    const double s = 2.0 * std::sqrt(1.0 + tr);
    w = 0.25 * s;
    x = (r(2, 1) - r(1, 2)) / s;
    y = (r(0, 2) - r(2, 0)) / s;
    z = (r(1, 0) - r(0, 1)) / s;
  } else if (r(0, 0) >= r(1, 1) && r(0, 0) >= r(2, 2)) {
    const double s = 2.0 * std::sqrt(1.0 + r(0, 0) - r(1, 1) - r(2, 2));
    w = (r(2, 1) - r(1, 2)) / s;
    x = 0.25 * s;
    y = (r(0, 1) + r(1, 0)) / s;
    z = (r(0, 2) + r(2, 0)) / s;
  } else if (r(1, 1) >= r(2, 2)) {
    const double s = 2.0 * std::sqrt(1.0 + r(1, 1) - r(0, 0) - r(2, 2));
    w = (r(0, 2) - r(2, 0)) / s;
    x = (r(0, 1) + r(1, 0)) / s;
    y = 0.25 * s;
    z = (r(1, 2) + r(2, 1)) / s;
  } else {
    const double s = 2.0 * std::sqrt(1.0 + r(2, 2) - r(0, 0) - r(1, 1));
    w = (r(1, 0) - r(0, 1)) / s;
    x = (r(0, 2) + r(2, 0)) / s;
    y = (r(1, 2) + r(2, 1)) / s;
    z = 0.25 * s;
  }
  if (w < 0.0) return UnitQuaternion::from_raw(-w, -x, -y, -z);
  return UnitQuaternion::from_raw(w, x, y, z);
}

// Length of the encoding of a `dim`-vector at the given degree.
inline constexpr int encoded_length(int dim, int degree) { return dim * (1 + 2 * degree); }

// Per component c: [x_c, sin(x_c), cos(x_c), sin(2 x_c), cos(2 x_c), ..., sin(2^{d-1} x_c), cos(2^{d-1} x_c)].
// Degree 0 passes the input through unchanged.
inline void positional_encoding_into(std::span<const double> x, int degree, std::span<double> out) {
  const std::size_t stride = 1 + 2 * static_cast<std::size_t>(degree);
  for (std::size_t c = 0; c < x.size(); ++c) {
    double* o = out.data() + c * stride;
    o[0] = x[c];
    double freq = 1.0;
    for (int k = 0; k < degree; ++k) {
      o[1 + 2 * k] = std::sin(freq * x[c]);
      o[2 + 2 * k] = std::cos(freq * x[c]);
      freq *= 2.0;
    }
  }
}

inline std::vector<double> positional_encoding(std::span<const double> x, int degree) {
  if (degree < 1) throw Error(ErrorKind::InvalidInput, "encoding degree must be >= 1");
  std::vector<double> out(static_cast<std::size_t>(encoded_length(static_cast<int>(x.size()), degree)));
  positional_encoding_into(x, degree, out);
  return out;
}

}  // namespace rigidflow
