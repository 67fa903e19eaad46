#pragma once

#include <Eigen/Dense>

#include <array>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "labelseg/error.hpp"

namespace labelseg {

/// Grid extent in voxels; axis 0 (x, NIfTI i) varies fastest in memory.
struct Shape3 {
  std::int64_t nx = 0;
  std::int64_t ny = 0;
  std::int64_t nz = 0;

  [[nodiscard]] std::size_t size() const {
    return static_cast<std::size_t>(nx * ny * nz);
  }
  [[nodiscard]] std::int64_t operator[](int axis) const {
    return axis == 0 ? nx : (axis == 1 ? ny : nz);
  }
  [[nodiscard]] std::size_t index(std::int64_t x, std::int64_t y, std::int64_t z) const {
    return static_cast<std::size_t>(x + nx * (y + ny * z));
  }
  [[nodiscard]] bool contains(std::int64_t x, std::int64_t y, std::int64_t z) const {
    return x >= 0 && y >= 0 && z >= 0 && x < nx && y < ny && z < nz;
  }
  bool operator==(const Shape3&) const = default;
};

std::string to_string(const Shape3& s);

/// Voxel spacing and voxel-to-world mapping in millimetres.
struct Geometry {
  Eigen::Vector3d spacing = Eigen::Vector3d::Ones();
  Eigen::Matrix4d affine = Eigen::Matrix4d::Identity();

  /// Axis-aligned geometry with the given spacing and world origin of voxel (0,0,0).
  static Geometry axis_aligned(const Eigen::Vector3d& spacing,
                               const Eigen::Vector3d& origin = Eigen::Vector3d::Zero());

  [[nodiscard]] Eigen::Vector3d voxel_to_world(const Eigen::Vector3d& ijk) const {
    return affine.topLeftCorner<3, 3>() * ijk + affine.topRightCorner<3, 1>();
  }
  [[nodiscard]] Eigen::Vector3d world_to_voxel(const Eigen::Vector3d& xyz) const;

  /// Throws ValidationError unless spacing > 0 and the affine is invertible.
  void validate() const;

  /// Shape-independent comparison with absolute tolerance on every entry.
  [[nodiscard]] bool approx_equal(const Geometry& other, double tol = 1e-6) const;
};

/// Dense scalar grid with geometry.
template <typename T>
struct Image {
  Shape3 shape;
  std::vector<T> data;
  Geometry geometry;

  Image() = default;
  Image(Shape3 s, const Geometry& g, T fill = T{})
      : shape(s), data(s.size(), fill), geometry(g) {}

  T& at(std::int64_t x, std::int64_t y, std::int64_t z) { return data[shape.index(x, y, z)]; }
  [[nodiscard]] const T& at(std::int64_t x, std::int64_t y, std::int64_t z) const {
    return data[shape.index(x, y, z)];
  }
  [[nodiscard]] std::size_t size() const { return data.size(); }
};

/// Real-valued intensity volume.
using Volume3D = Image<float>;

/// Integer label map bound to an annotation protocol (a LabelSetMapping name).
struct LabelVolume : Image<std::int32_t> {
  std::string protocol_id;

  LabelVolume() = default;
  LabelVolume(Shape3 s, const Geometry& g, std::int32_t fill = 0, std::string protocol = {})
      : Image<std::int32_t>(s, g, fill), protocol_id(std::move(protocol)) {}
};

/// Per-voxel class scores, channel-major: data[c * shape.size() + i].
struct ProbabilityMap {
  int channels = 0;
  Shape3 shape;
  Geometry geometry;
  std::vector<float> data;

  ProbabilityMap() = default;
  ProbabilityMap(int c, Shape3 s, const Geometry& g, float fill = 0.0f)
      : channels(c), shape(s), geometry(g), data(static_cast<std::size_t>(c) * s.size(), fill) {}

  float* channel(int c) { return data.data() + static_cast<std::size_t>(c) * shape.size(); }
  [[nodiscard]] const float* channel(int c) const {
    return data.data() + static_cast<std::size_t>(c) * shape.size();
  }
};

/// Throws ShapeError unless both images share shape and geometry (tol on affine/spacing).
template <typename A, typename B>
void require_same_grid(const Image<A>& a, const Image<B>& b, const std::string& what,
                       double tol = 1e-6) {
  if (!(a.shape == b.shape)) {
    throw ShapeError(what + ": shape " + to_string(a.shape) + " vs " + to_string(b.shape));
  }
  if (!a.geometry.approx_equal(b.geometry, tol)) {
    throw ShapeError(what + ": spacing/affine mismatch");
  }
}

/// Binary mask (0/1) from a label volume: label != 0.
LabelVolume binarize(const LabelVolume& labels);

/// Number of voxels with non-zero value.
std::size_t count_nonzero(const LabelVolume& labels);

}  // namespace labelseg
