#pragma once

#include <vector>

#include "labelseg/transform.hpp"
#include "labelseg/volume.hpp"

namespace labelseg {

enum class RegistrationMode { kRigid, kAffine };

/// Multi-resolution intensity registration driven by normalized cross-correlation and a
/// derivative-free pattern search with shrinking steps.
struct RegistrationOptions {
  int levels = 3;
  int max_iterations_per_level = 200;
  /// Initial steps at the finest level; doubled per coarser level.
  double translation_step_voxels = 1.0;
  double rotation_step_degrees = 2.0;
  double scale_step = 0.02;
  double shear_step = 0.02;
  /// A level stops once steps have been halved this many times without improvement.
  int max_step_halvings = 6;
  /// Below this final NCC the result is flagged as not converged.
  double min_similarity = 0.5;
  /// Minimum fraction of fixed samples that must map inside the moving image.
  double min_overlap = 0.1;
};

struct RegistrationResult {
  /// Maps moving world coordinates into fixed world coordinates.
  AffineTransform transform;
  /// Populated in rigid mode (identity rotation/translation otherwise).
  RigidTransform rigid;
  bool converged = false;
  double similarity = -1.0;
  int iterations = 0;
  /// Accepted similarity values per pyramid level, coarsest first.
  std::vector<std::vector<double>> level_history;
};

/// Normalized cross-correlation of `fixed` against `moving` sampled through
/// `fixed_world_to_moving_world`, over fixed voxels mapping inside the moving grid.
/// Returns -1 when the overlap is below `min_overlap` or either side has no variance.
double normalized_cross_correlation(const Volume3D& fixed, const Volume3D& moving,
                                    const Eigen::Matrix4d& fixed_world_to_moving_world,
                                    double min_overlap = 0.1);

/// 2x2x2 block-average downsampling with matching geometry.
Volume3D downsample2(const Volume3D& vol);

/// Translation aligning the intensity-weighted centroid of the moving image's non-zero
/// voxels with that of the fixed image. Throws ValidationError on an all-zero input.
RigidTransform centroid_translation_init(const Volume3D& fixed, const Volume3D& moving);

/// Same, using binary mask centroids.
RigidTransform centroid_translation_init(const LabelVolume& fixed_mask,
                                         const LabelVolume& moving_mask);

/// Intensity-weighted centroid (world mm) of non-zero voxels; throws on all-zero.
Eigen::Vector3d weighted_centroid(const Volume3D& vol);

RegistrationResult register_volumes(const Volume3D& fixed, const Volume3D& moving,
                                    RegistrationMode mode, const AffineTransform& init,
                                    const RegistrationOptions& options = {});

}  // namespace labelseg
