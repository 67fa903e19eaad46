#pragma once

#include <Eigen/Dense>

#include "labelseg/error.hpp"

namespace labelseg {

// Spatial transforms act on world coordinates in mm. A transform returned by registration
// maps points of the moving image's world space into the fixed image's world space;
// resampling the moving image onto the fixed grid therefore samples at inverse(T)(x).

/// Rotation matrix for angles (radians) about x, then y, then z: Rz * Ry * Rx.
Eigen::Matrix3d rotation_from_euler(const Eigen::Vector3d& angles);

/// Rotation plus translation: T(x) = R x + t.
struct RigidTransform {
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();

  static RigidTransform identity() { return {}; }
  static RigidTransform from_translation(const Eigen::Vector3d& t) {
    RigidTransform r;
    r.translation = t;
    return r;
  }
  /// Rotation by euler angles about a centre point, followed by a translation.
  static RigidTransform about_center(const Eigen::Vector3d& angles, const Eigen::Vector3d& center,
                                     const Eigen::Vector3d& translation);
  /// Throws ValidationError unless the matrix is a proper rotation (tol 1e-9) and the
  /// 4x4 has last row (0,0,0,1).
  static RigidTransform from_matrix(const Eigen::Matrix4d& m);

  [[nodiscard]] Eigen::Vector3d apply(const Eigen::Vector3d& x) const {
    return rotation * x + translation;
  }
  [[nodiscard]] RigidTransform inverse() const {
    RigidTransform inv;
    inv.rotation = rotation.transpose();
    inv.translation = -(inv.rotation * translation);
    return inv;
  }
  [[nodiscard]] Eigen::Matrix4d matrix() const;
  /// Rotation angle in radians.
  [[nodiscard]] double angle() const;
  [[nodiscard]] bool is_orthonormal(double tol = 1e-9) const;
};

/// (a * b)(x) = a(b(x)).
RigidTransform operator*(const RigidTransform& a, const RigidTransform& b);

/// General 3D affine in homogeneous form.
struct AffineTransform {
  Eigen::Matrix4d matrix = Eigen::Matrix4d::Identity();

  AffineTransform() = default;
  explicit AffineTransform(const Eigen::Matrix4d& m);
  explicit AffineTransform(const RigidTransform& r) : matrix(r.matrix()) {}

  [[nodiscard]] Eigen::Vector3d apply(const Eigen::Vector3d& x) const {
    return matrix.topLeftCorner<3, 3>() * x + matrix.topRightCorner<3, 1>();
  }
  [[nodiscard]] AffineTransform inverse() const;
};

}  // namespace labelseg
