#include "labelseg/resample.hpp"

#include <cmath>

namespace labelseg {
namespace {

// Coordinates within this distance of a grid point are treated as the grid point, so
// identity maps computed through floating-point affines reproduce values exactly.
constexpr double kSnap = 1e-9;

double snap(double v) {
  const double r = std::round(v);
  return std::abs(v - r) < kSnap ? r : v;
}

template <typename Fn>
void for_each_target(const Shape3& shape, const Eigen::Matrix4d& vmap, Fn&& fn) {
  const Eigen::Matrix3d lin = vmap.topLeftCorner<3, 3>();
  const Eigen::Vector3d off = vmap.topRightCorner<3, 1>();
  std::size_t idx = 0;
  for (std::int64_t z = 0; z < shape.nz; ++z) {
    for (std::int64_t y = 0; y < shape.ny; ++y) {
      for (std::int64_t x = 0; x < shape.nx; ++x, ++idx) {
        Eigen::Vector3d p = lin * Eigen::Vector3d(double(x), double(y), double(z)) + off;
        p = Eigen::Vector3d(snap(p.x()), snap(p.y()), snap(p.z()));
        fn(idx, p);
      }
    }
  }
}

}  // namespace

float sample_linear(std::span<const float> data, const Shape3& s, const Eigen::Vector3d& p) {
  const double fx = std::floor(p.x());
  const double fy = std::floor(p.y());
  const double fz = std::floor(p.z());
  const auto x0 = static_cast<std::int64_t>(fx);
  const auto y0 = static_cast<std::int64_t>(fy);
  const auto z0 = static_cast<std::int64_t>(fz);
  if (x0 < -1 || y0 < -1 || z0 < -1 || x0 >= s.nx || y0 >= s.ny || z0 >= s.nz) return 0.0f;
  const double tx = p.x() - fx;
  const double ty = p.y() - fy;
  const double tz = p.z() - fz;
  double acc = 0.0;
  for (int dz = 0; dz < 2; ++dz) {
    const double wz = dz ? tz : 1.0 - tz;
    if (wz == 0.0) continue;
    const std::int64_t z = z0 + dz;
    if (z < 0 || z >= s.nz) continue;
    for (int dy = 0; dy < 2; ++dy) {
      const double wy = dy ? ty : 1.0 - ty;
      if (wy == 0.0) continue;
      const std::int64_t y = y0 + dy;
      if (y < 0 || y >= s.ny) continue;
      for (int dx = 0; dx < 2; ++dx) {
        const double wx = dx ? tx : 1.0 - tx;
        if (wx == 0.0) continue;
        const std::int64_t x = x0 + dx;
        if (x < 0 || x >= s.nx) continue;
        acc += wz * wy * wx * static_cast<double>(data[s.index(x, y, z)]);
      }
    }
  }
  return static_cast<float>(acc);
}

float sample_linear(const Volume3D& vol, const Eigen::Vector3d& ijk) {
  return sample_linear(std::span<const float>(vol.data), vol.shape, ijk);
}

Eigen::Matrix4d voxel_map(const Geometry& source, const Geometry& target,
                          const Eigen::Matrix4d& target_world_to_source_world) {
  return source.affine.inverse() * target_world_to_source_world * target.affine;
}

Volume3D resample_linear(const Volume3D& source, const Shape3& shape, const Geometry& geometry,
                         const Eigen::Matrix4d& w) {
  Volume3D out(shape, geometry, 0.0f);
  const auto vmap = voxel_map(source.geometry, geometry, w);
  for_each_target(shape, vmap, [&](std::size_t i, const Eigen::Vector3d& p) {
    out.data[i] = sample_linear(source, p);
  });
  return out;
}

LabelVolume resample_nearest(const LabelVolume& source, const Shape3& shape,
                             const Geometry& geometry, const Eigen::Matrix4d& w,
                             std::int32_t outside) {
  LabelVolume out(shape, geometry, outside, source.protocol_id);
  const auto vmap = voxel_map(source.geometry, geometry, w);
  for_each_target(shape, vmap, [&](std::size_t i, const Eigen::Vector3d& p) {
    const auto x = static_cast<std::int64_t>(std::floor(p.x() + 0.5));
    const auto y = static_cast<std::int64_t>(std::floor(p.y() + 0.5));
    const auto z = static_cast<std::int64_t>(std::floor(p.z() + 0.5));
    if (source.shape.contains(x, y, z)) out.data[i] = source.at(x, y, z);
  });
  return out;
}

ProbabilityMap resample_linear(const ProbabilityMap& source, const Shape3& shape,
                               const Geometry& geometry, const Eigen::Matrix4d& w) {
  ProbabilityMap out(source.channels, shape, geometry, 0.0f);
  const auto vmap = voxel_map(source.geometry, geometry, w);
  const std::size_t n = source.shape.size();
  for_each_target(shape, vmap, [&](std::size_t i, const Eigen::Vector3d& p) {
    for (int c = 0; c < source.channels; ++c) {
      std::span<const float> ch(source.channel(c), n);
      out.channel(c)[i] = sample_linear(ch, source.shape, p);
    }
  });
  return out;
}

Volume3D to_float(const LabelVolume& labels) {
  Volume3D out(labels.shape, labels.geometry);
  for (std::size_t i = 0; i < labels.data.size(); ++i) out.data[i] = static_cast<float>(labels.data[i]);
  return out;
}

}  // namespace labelseg
