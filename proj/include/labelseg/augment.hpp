#pragma once

#include <array>
#include <cstdint>
#include <random>
#include <string_view>

#include <Eigen/Dense>

#include "json.hpp"
#include "labelseg/volume.hpp"

namespace labelseg {

struct AugmentConfig {
  double zoom_min = 0.7, zoom_max = 1.5, zoom_prob = 0.3;
  /// Per-axis rotation range in degrees.
  double rotate_min_deg = -15.0, rotate_max_deg = 15.0, rotate_prob = 0.3;
  double noise_std = 0.1, noise_prob = 0.3;
  /// Per-axis Gaussian kernel sigma range in voxels.
  double smooth_sigma_min = 0.5, smooth_sigma_max = 1.5, smooth_prob = 0.2;
  double gamma_min = 0.7, gamma_max = 1.5, gamma_prob = 0.3;
  /// Probability of flipping, drawn independently for each axis.
  double flip_prob = 0.5;

  void validate() const;
  /// Every gate closed.
  static AugmentConfig disabled();
};

nlohmann::json to_json(const AugmentConfig& c);
AugmentConfig augment_config_from_json(const nlohmann::json& j, AugmentConfig defaults = {});

/// Everything drawn for one sample. Parameters are drawn even when their gate is closed,
/// so the number of random numbers consumed per call is constant.
struct AugmentDraw {
  bool zoom = false, rotate = false, noise = false, smooth = false, gamma = false;
  std::array<bool, 3> flip{};
  double zoom_ratio = 1.0;
  Eigen::Vector3d angles_rad = Eigen::Vector3d::Zero();
  std::uint64_t noise_seed = 0;
  std::array<double, 3> smooth_sigma{};
  double gamma_value = 1.0;

  [[nodiscard]] bool spatial() const { return zoom || rotate; }
  /// Output voxel -> input voxel map of the zoom/rotate step (about the patch centre).
  [[nodiscard]] Eigen::Matrix4d voxel_map(const Shape3& shape) const;
};

AugmentDraw draw_augmentation(const AugmentConfig& config, std::mt19937_64& rng);

struct AugmentedPair {
  Volume3D image;
  LabelVolume target;
  AugmentDraw draw;
};

/// zoom -> rotate -> noise -> smooth -> gamma -> flip. Spatial steps use trilinear
/// interpolation with zero padding for the image and nearest-neighbour with edge clamping
/// for the target. `rng` is advanced by a fixed amount.
AugmentedPair apply_augmentations(const Volume3D& image, const LabelVolume& target,
                                  const AugmentConfig& config, std::mt19937_64& rng);

/// Samples `target` at round(map * j), clamping to the grid edge.
LabelVolume warp_labels_nearest(const LabelVolume& target, const Eigen::Matrix4d& voxel_map);
Volume3D warp_image_linear(const Volume3D& image, const Eigen::Matrix4d& voxel_map);

/// Min-max rescales to [0,1], raises to `gamma`, and maps back to the original range.
/// Constant images are returned unchanged.
Volume3D random_gamma(const Volume3D& image, double gamma);

Volume3D add_gaussian_noise(const Volume3D& image, double stddev, std::uint64_t seed);

/// Separable Gaussian blur with per-axis sigmas in voxels; edges replicate.
Volume3D gaussian_smooth(const Volume3D& image, const std::array<double, 3>& sigma);

template <typename T>
Image<T> flip_image(const Image<T>& in, const std::array<bool, 3>& axes);
LabelVolume flip_image(const LabelVolume& in, const std::array<bool, 3>& axes);

/// Seed for one sample, mixed from the run seed, epoch, and case id.
std::uint64_t sample_seed(std::uint64_t run_seed, std::int64_t epoch, std::string_view case_id);

std::uint64_t splitmix64(std::uint64_t x);
std::uint64_t fnv1a64(std::string_view bytes);

}  // namespace labelseg
