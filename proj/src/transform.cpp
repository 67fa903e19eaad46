#include "labelseg/transform.hpp"

#include <algorithm>
#include <cmath>

namespace labelseg {

Eigen::Matrix3d rotation_from_euler(const Eigen::Vector3d& angles) {
  const Eigen::Matrix3d rx = Eigen::AngleAxisd(angles.x(), Eigen::Vector3d::UnitX()).toRotationMatrix();
  const Eigen::Matrix3d ry = Eigen::AngleAxisd(angles.y(), Eigen::Vector3d::UnitY()).toRotationMatrix();
  const Eigen::Matrix3d rz = Eigen::AngleAxisd(angles.z(), Eigen::Vector3d::UnitZ()).toRotationMatrix();
  return rz * ry * rx;
}

RigidTransform RigidTransform::about_center(const Eigen::Vector3d& angles,
                                            const Eigen::Vector3d& center,
                                            const Eigen::Vector3d& translation) {
  RigidTransform r;
  r.rotation = rotation_from_euler(angles);
  r.translation = center - r.rotation * center + translation;
  return r;
}

RigidTransform RigidTransform::from_matrix(const Eigen::Matrix4d& m) {
  if ((m.row(3) - Eigen::RowVector4d(0, 0, 0, 1)).cwiseAbs().maxCoeff() > 1e-12) {
    throw ValidationError("rigid transform: last row must be (0,0,0,1)");
  }
  RigidTransform r;
  r.rotation = m.topLeftCorner<3, 3>();
  r.translation = m.topRightCorner<3, 1>();
  if (!r.is_orthonormal()) throw ValidationError("rigid transform: rotation is not orthonormal");
  return r;
}

Eigen::Matrix4d RigidTransform::matrix() const {
  Eigen::Matrix4d m = Eigen::Matrix4d::Identity();
  m.topLeftCorner<3, 3>() = rotation;
  m.topRightCorner<3, 1>() = translation;
  return m;
}

double RigidTransform::angle() const {
  const double c = std::clamp((rotation.trace() - 1.0) / 2.0, -1.0, 1.0);
  return std::acos(c);
}

bool RigidTransform::is_orthonormal(double tol) const {
  return (rotation.transpose() * rotation - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() <=
             tol &&
         rotation.determinant() > 0.0;
}

RigidTransform operator*(const RigidTransform& a, const RigidTransform& b) {
  RigidTransform r;
  r.rotation = a.rotation * b.rotation;
  r.translation = a.rotation * b.translation + a.translation;
  return r;
}

AffineTransform::AffineTransform(const Eigen::Matrix4d& m) : matrix(m) {
  if ((m.row(3) - Eigen::RowVector4d(0, 0, 0, 1)).cwiseAbs().maxCoeff() > 1e-12) {
    throw ValidationError("affine transform: last row must be (0,0,0,1)");
  }
  if (std::abs(m.topLeftCorner<3, 3>().determinant()) < 1e-12) {
    throw ValidationError("affine transform: singular linear part");
  }
}

AffineTransform AffineTransform::inverse() const {
  AffineTransform inv;
  const Eigen::Matrix3d lin = matrix.topLeftCorner<3, 3>().inverse();
  inv.matrix.topLeftCorner<3, 3>() = lin;
  inv.matrix.topRightCorner<3, 1>() = -(lin * matrix.topRightCorner<3, 1>());
  return inv;
}

}  // namespace labelseg
