#include "labelseg/volume.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace labelseg {

std::string to_string(const Shape3& s) {
  std::ostringstream os;
  os << s.nx << "x" << s.ny << "x" << s.nz;
  return os.str();
}

Geometry Geometry::axis_aligned(const Eigen::Vector3d& spacing, const Eigen::Vector3d& origin) {
  Geometry g;
  g.spacing = spacing;
  g.affine.setIdentity();
  for (int a = 0; a < 3; ++a) g.affine(a, a) = spacing[a];
  g.affine.topRightCorner<3, 1>() = origin;
  return g;
}

Eigen::Vector3d Geometry::world_to_voxel(const Eigen::Vector3d& xyz) const {
  const Eigen::Matrix3d lin = affine.topLeftCorner<3, 3>();
  return lin.partialPivLu().solve(xyz - affine.topRightCorner<3, 1>());
}

void Geometry::validate() const {
  for (int a = 0; a < 3; ++a) {
    if (!(spacing[a] > 0.0) || !std::isfinite(spacing[a])) {
      throw ValidationError("spacing must be positive, got axis " + std::to_string(a) + " = " +
                            std::to_string(spacing[a]));
    }
  }
  const double det = affine.topLeftCorner<3, 3>().determinant();
  if (!std::isfinite(det) || std::abs(det) < 1e-12) {
    throw ValidationError("voxel-to-world affine is singular");
  }
}

bool Geometry::approx_equal(const Geometry& other, double tol) const {
  return (spacing - other.spacing).cwiseAbs().maxCoeff() <= tol &&
         (affine - other.affine).cwiseAbs().maxCoeff() <= tol;
}

LabelVolume binarize(const LabelVolume& labels) {
  LabelVolume out(labels.shape, labels.geometry, 0, labels.protocol_id);
  std::transform(labels.data.begin(), labels.data.end(), out.data.begin(),
                 [](std::int32_t v) { return v != 0 ? 1 : 0; });
  return out;
}

std::size_t count_nonzero(const LabelVolume& labels) {
  return static_cast<std::size_t>(
      std::count_if(labels.data.begin(), labels.data.end(), [](std::int32_t v) { return v != 0; }));
}

}  // namespace labelseg
