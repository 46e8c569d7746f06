#pragma once

#include <Eigen/Dense>
#include <cmath>

#include "veloio/common.hpp"

// SO(3) primitives shared by the filter, the simulator and the metrics.
//
// Conventions used throughout:
//   - Rotation matrices map body -> navigation.
//   - Quaternions are Hamilton, scalar-first, body -> navigation.
//   - so3_log returns the canonical axis-angle with norm <= pi.
// All functions here are pure; concurrent use needs no synchronization.

namespace veloio::geom {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

// Axis-angle element of so(3), radians.
using RotVec = Eigen::Vector3d;

inline constexpr double kSmallAngle = 1e-8;      // Taylor fallback threshold
inline constexpr double kOrthoTol = 1e-9;        // rotation invariant tolerance

inline bool finite(const Vec3& v) {
  return std::isfinite(v.x()) && std::isfinite(v.y()) && std::isfinite(v.z());
}

/// Cross-product matrix: skew(v) * w == v x w.
inline Mat3 skew(const Vec3& v) {
  if (!finite(v)) throw ContractError("skew: non-finite input");
  Mat3 m;
  m << 0.0, -v.z(), v.y(),
      v.z(), 0.0, -v.x(),
      -v.y(), v.x(), 0.0;
  return m;
}

inline Vec3 unskew(const Mat3& m) {
  return Vec3(m(2, 1), m(0, 2), m(1, 0));
}

inline double orthonormality_error(const Mat3& m) {
  Mat3 e = m.transpose() * m - Mat3::Identity();
  return e.cwiseAbs().maxCoeff();
}

/// 3x3 special-orthogonal matrix. Factory-validated; composition does not
/// re-check (drift is handled by orthonormalized(), applied inside the EKF).
class Rotation {
 public:
  Rotation() : m_(Mat3::Identity()) {}

  static Rotation from_matrix(const Mat3& m) {
    if (!m.allFinite()) throw ContractError("Rotation: non-finite matrix");
    if (orthonormality_error(m) > kOrthoTol)
      throw ContractError("Rotation: matrix not orthonormal within 1e-9");
    if (std::abs(m.determinant() - 1.0) > kOrthoTol)
      throw ContractError("Rotation: determinant not +1 within 1e-9");
    return Rotation(m);
  }

  // For internal hot paths where the product of two valid rotations is used.
  static Rotation from_matrix_unchecked(const Mat3& m) { return Rotation(m); }

  const Mat3& matrix() const { return m_; }

  Rotation operator*(const Rotation& o) const { return Rotation(m_ * o.m_); }
  Vec3 operator*(const Vec3& v) const { return m_ * v; }

  Rotation inverse() const { return Rotation(m_.transpose()); }

  double ortho_error() const { return orthonormality_error(m_); }

  /// Nearest orthogonal matrix (symmetric orthogonalization via SVD).
  Rotation orthonormalized() const {
    Eigen::JacobiSVD<Mat3> svd(m_, Eigen::ComputeFullU | Eigen::ComputeFullV);
    Mat3 r = svd.matrixU() * svd.matrixV().transpose();
    if (r.determinant() < 0.0) {
      Mat3 u = svd.matrixU();
      u.col(2) *= -1.0;
      r = u * svd.matrixV().transpose();
    }
    return Rotation(r);
  }

 private:
  explicit Rotation(const Mat3& m) : m_(m) {}
  Mat3 m_;
};

/// Rodrigues formula; second-order Taylor below kSmallAngle.
inline Rotation so3_exp(const RotVec& v) {
  if (!finite(v)) throw ContractError("so3_exp: non-finite input");
  const double theta = v.norm();
  const Mat3 k = skew(v);
  Mat3 r;
  if (theta < kSmallAngle) {
    r = Mat3::Identity() + k + 0.5 * k * k;
  } else {
    const double s = std::sin(theta) / theta;
    const double c = (1.0 - std::cos(theta)) / (theta * theta);
    r = Mat3::Identity() + s * k + c * k * k;
  }
  return Rotation::from_matrix_unchecked(r);
}

/// Logarithmic map; returns the canonical representative with norm <= pi.
/// Near theta = pi the axis is recovered from the symmetric part of R and
/// the sign is fixed so the largest-magnitude component is positive.
inline RotVec so3_log(const Rotation& rot) {
  const Mat3& r = rot.matrix();
  if (orthonormality_error(r) > kOrthoTol || std::abs(r.determinant() - 1.0) > kOrthoTol)
    throw ContractError("so3_log: input violates rotation invariants");

  const Vec3 w = 0.5 * unskew(r - r.transpose());  // sin(theta) * axis
  const double s = w.norm();
  const double c = 0.5 * (r.trace() - 1.0);
  const double theta = std::atan2(s, std::min(1.0, std::max(-1.0, c)));

  if (theta < kSmallAngle) return w;  // v = w * (1 + O(theta^2))

  if (theta < M_PI - 1e-4) return (theta / s) * w;

  // Near pi: axis from the symmetric part, sign from w when usable.
  const Mat3 sym = 0.5 * (r + r.transpose());
  Vec3 axis;
  const double one_minus_c = 1.0 - c;
  int k = 0;
  sym.diagonal().maxCoeff(&k);
  axis[k] = std::sqrt(std::max(0.0, (sym(k, k) - c) / one_minus_c));
  for (int j = 0; j < 3; ++j)
    if (j != k) axis[j] = sym(j, k) / (one_minus_c * axis[k]);
  axis.normalize();
  if (s > 1e-11) {
    if (axis.dot(w) < 0.0) axis = -axis;
  } else {
    int kk = 0;
    axis.cwiseAbs().maxCoeff(&kk);
    if (axis[kk] < 0.0) axis = -axis;
  }
  return theta * axis;
}

/// Hamilton scalar-first quaternion (w,x,y,z) -> Rotation. Renormalizes;
/// rejects zero-norm input.
inline Rotation rot_from_quaternion(double w, double x, double y, double z) {
  const double n = std::sqrt(w * w + x * x + y * y + z * z);
  if (!(n > 1e-12) || !std::isfinite(n))
    throw ContractError("rot_from_quaternion: zero or non-finite norm");
  w /= n;
  x /= n;
  y /= n;
  z /= n;
  Mat3 m;
  m << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
      2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
      2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
  return Rotation::from_matrix_unchecked(m);
}

/// Rotation -> Hamilton scalar-first quaternion, canonical sign (w >= 0).
inline Eigen::Vector4d quaternion_wxyz(const Rotation& rot) {
  const Mat3& m = rot.matrix();
  Eigen::Vector4d q;  // w x y z
  const double tr = m.trace();
  if (tr > 0.0) {
    double s = std::sqrt(tr + 1.0) * 2.0;
    q << 0.25 * s, (m(2, 1) - m(1, 2)) / s, (m(0, 2) - m(2, 0)) / s,
        (m(1, 0) - m(0, 1)) / s;
  } else if (m(0, 0) > m(1, 1) && m(0, 0) > m(2, 2)) {
    double s = std::sqrt(1.0 + m(0, 0) - m(1, 1) - m(2, 2)) * 2.0;
    q << (m(2, 1) - m(1, 2)) / s, 0.25 * s, (m(0, 1) + m(1, 0)) / s,
        (m(0, 2) + m(2, 0)) / s;
  } else if (m(1, 1) > m(2, 2)) {
    double s = std::sqrt(1.0 + m(1, 1) - m(0, 0) - m(2, 2)) * 2.0;
    q << (m(0, 2) - m(2, 0)) / s, (m(0, 1) + m(1, 0)) / s, 0.25 * s,
        (m(1, 2) + m(2, 1)) / s;
  } else {
    double s = std::sqrt(1.0 + m(2, 2) - m(0, 0) - m(1, 1)) * 2.0;
    q << (m(1, 0) - m(0, 1)) / s, (m(0, 2) + m(2, 0)) / s,
        (m(1, 2) + m(2, 1)) / s, 0.25 * s;
  }
  if (q[0] < 0.0) q = -q;
  return q;
}

inline Rotation rot_z(double yaw) { return so3_exp(Vec3(0, 0, yaw)); }
inline Rotation rot_y(double pitch) { return so3_exp(Vec3(0, pitch, 0)); }
inline Rotation rot_x(double roll) { return so3_exp(Vec3(roll, 0, 0)); }

}  // namespace veloio::geom
