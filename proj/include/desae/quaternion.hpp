#pragma once

#include <Eigen/Core>

#include <cmath>

namespace desae::nn {

template <typename Scalar>
using Quat = Eigen::Matrix<Scalar, 4, 1>;  // (w, x, y, z)

inline constexpr double kMinQuaternionNorm = 1e-8;

/// Rotation matrix of the unit quaternion u = (w, x, y, z).
template <typename Scalar>
Eigen::Matrix<Scalar, 3, 3> unit_quat_to_rot(const Quat<Scalar>& u) {
  const Scalar w = u(0), x = u(1), y = u(2), z = u(3);
  Eigen::Matrix<Scalar, 3, 3> r;
  r(0, 0) = w * w + x * x - y * y - z * z;
  r(0, 1) = 2 * (x * y - w * z);
  r(0, 2) = 2 * (x * z + w * y);
  r(1, 0) = 2 * (x * y + w * z);
  r(1, 1) = w * w - x * x + y * y - z * z;
  r(1, 2) = 2 * (y * z - w * x);
  r(2, 0) = 2 * (x * z - w * y);
  r(2, 1) = 2 * (y * z + w * x);
  r(2, 2) = w * w - x * x - y * y + z * z;
  return r;
}

/// Normalizes q and converts it; quaternions shorter than kMinQuaternionNorm
/// map to the identity.
template <typename Scalar>
Eigen::Matrix<Scalar, 3, 3> quat_to_rot(const Quat<Scalar>& q) {
  const Scalar n = q.norm();
  if (!(n >= Scalar(kMinQuaternionNorm))) return Eigen::Matrix<Scalar, 3, 3>::Identity();
  return unit_quat_to_rot<Scalar>(q / n);
}

/// d vec(R) / d u for the unit-quaternion map, rows in row-major order of R.
template <typename Scalar>
Eigen::Matrix<Scalar, 9, 4> unit_quat_to_rot_jacobian(const Quat<Scalar>& u) {
  const Scalar w = 2 * u(0), x = 2 * u(1), y = 2 * u(2), z = 2 * u(3);
  Eigen::Matrix<Scalar, 9, 4> j;
  j << w, x, -y, -z,    //
      -z, y, x, -w,     //
      y, z, w, x,       //
      z, y, x, w,       //
      w, -x, y, -z,     //
      -x, -w, z, y,     //
      -y, z, -w, x,     //
      x, w, z, y,       //
      w, -x, -y, z;
  return j;
}

}  // namespace desae::nn
