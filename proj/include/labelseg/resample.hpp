#pragma once

#include <Eigen/Dense>

#include <span>

#include "labelseg/transform.hpp"
#include "labelseg/volume.hpp"

namespace labelseg {

/// Trilinear sample at continuous voxel coordinates; neighbours outside the grid count as 0.
float sample_linear(const Volume3D& vol, const Eigen::Vector3d& ijk);

/// Same, over one channel of raw channel-major storage.
float sample_linear(std::span<const float> data, const Shape3& shape, const Eigen::Vector3d& ijk);

/// Voxel-to-voxel map: target voxel -> source voxel, given a target-world -> source-world map.
Eigen::Matrix4d voxel_map(const Geometry& source, const Geometry& target,
                          const Eigen::Matrix4d& target_world_to_source_world);

/// Resamples `source` onto the grid (shape, geometry) with trilinear interpolation.
/// `target_world_to_source_world` maps target world points to source world points.
Volume3D resample_linear(const Volume3D& source, const Shape3& shape, const Geometry& geometry,
                         const Eigen::Matrix4d& target_world_to_source_world);

/// Nearest-neighbour resampling; outside voxels receive `outside`.
LabelVolume resample_nearest(const LabelVolume& source, const Shape3& shape,
                             const Geometry& geometry,
                             const Eigen::Matrix4d& target_world_to_source_world,
                             std::int32_t outside = 0);

/// Per-channel trilinear resampling of a probability map.
ProbabilityMap resample_linear(const ProbabilityMap& source, const Shape3& shape,
                               const Geometry& geometry,
                               const Eigen::Matrix4d& target_world_to_source_world);

/// Label map -> float volume (for fractional warping).
Volume3D to_float(const LabelVolume& labels);

}  // namespace labelseg
