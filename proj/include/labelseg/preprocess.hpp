#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "labelseg/registration.hpp"
#include "labelseg/transform.hpp"
#include "labelseg/volume.hpp"

namespace labelseg {

struct AtlasTemplate {
  Volume3D volume;
  LabelVolume brain_mask;
  double ga = 0.0;
  std::string name;
};

struct AtlasCollection {
  std::vector<AtlasTemplate> templates;
};

/// Reads `<dir>/atlas.json`: {"templates": [{"image": ..., "mask": ..., "ga_weeks": ...}]}.
AtlasCollection load_atlas(const std::filesystem::path& dir);

/// Window half-width used to pick atlas templates around the subject's gestational age.
inline constexpr double kTemplateGaWindowWeeks = 1.5;

/// Templates with |ga - template.ga| <= 1.5 weeks; if none, the nearest one (a warning is
/// passed to `warn` when provided). Throws ValidationError on an empty atlas or ga <= 0.
std::vector<const AtlasTemplate*> select_templates(
    const AtlasCollection& atlas, double ga,
    const std::function<void(const std::string&)>& warn = nullptr);

/// Voxelwise mean of warped masks (values in [0,1]) thresholded at mean >= 0.5.
LabelVolume fuse_masks(std::span<const Volume3D> warped_masks);

/// Affine-registers each selected template to `image`, warps its mask (trilinear),
/// and fuses. Registration options are shared across templates.
LabelVolume compute_brain_mask(const Volume3D& image, const AtlasCollection& atlas, double ga,
                               const RegistrationOptions& options = {},
                               const std::function<void(const std::string&)>& warn = nullptr);

/// Isotropic resolution of the model input grid in mm.
inline constexpr double kTemplateSpacingMm = 0.8;

struct TemplateSpaceResult {
  Volume3D image;
  LabelVolume mask;
  /// Maps native image world coordinates into template world coordinates.
  RigidTransform transform;
  RegistrationResult registration;
};

/// Grid covering the template's field of view at `spacing` mm with the template's axes.
std::pair<Shape3, Geometry> template_grid(const Volume3D& atlas_template,
                                          double spacing = kTemplateSpacingMm);

/// Rigidly registers `image` to the template (mask-centroid initialization) and resamples
/// image (trilinear) and mask (nearest) onto the 0.8 mm template grid. When `register_rigid`
/// is false the transform is the identity.
TemplateSpaceResult to_template_space(const Volume3D& image, const LabelVolume& mask,
                                      const Volume3D& atlas_template,
                                      const std::optional<LabelVolume>& template_mask = std::nullopt,
                                      const RegistrationOptions& options = {},
                                      bool register_rigid = true);

/// Iterated 6-connected binary dilation.
LabelVolume dilate_mask(const LabelVolume& mask, int iterations);

/// Zeroes voxels outside the mask dilated `dilation_voxels` times.
Volume3D skull_strip(const Volume3D& image, const LabelVolume& mask, int dilation_voxels = 5);

/// Linear-interpolation percentile (q in [0,100]) of sorted values.
double percentile_linear(std::span<const double> sorted, double q);

inline constexpr double kClipPercentile = 99.9;

struct NormalizationStats {
  double clip_threshold = 0.0;
  double mean = 0.0;
  double stddev = 1.0;
};

/// Over non-zero voxels: clip above the 99.9th percentile, then z-normalize. Zero voxels
/// stay zero. Throws ValidationError on an all-zero image or zero variance after clipping.
Volume3D normalize_intensity(const Volume3D& image, NormalizationStats* stats = nullptr);

/// Default network input size.
inline constexpr std::array<std::int64_t, 3> kPatchShape = {128, 160, 128};

/// Book-keeping for a centred crop / symmetric zero-pad and the spatial pre-processing
/// that preceded it, sufficient to map predictions back to the native grid.
struct PatchGeometry {
  std::array<std::int64_t, 3> crop_low{};
  std::array<std::int64_t, 3> crop_high{};
  std::array<std::int64_t, 3> pad_low{};
  std::array<std::int64_t, 3> pad_high{};
  Shape3 original_shape;      // template-space grid before crop/pad
  Geometry original_geometry;
  Shape3 patch_shape;
  RigidTransform transform;   // native world -> template world
  double target_spacing = kTemplateSpacingMm;
  Shape3 native_shape;
  Geometry native_geometry;

  [[nodiscard]] bool is_identity_crop() const;
};

nlohmann::json to_json(const PatchGeometry& g);
PatchGeometry patch_geometry_from_json(const nlohmann::json& j);
void save_patch_geometry(const PatchGeometry& g, const std::filesystem::path& path);
PatchGeometry load_patch_geometry(const std::filesystem::path& path);

/// Computes offsets for cropping/padding `shape` to `patch_shape` (low side gets the floor).
PatchGeometry plan_crop_or_pad(const Shape3& shape, const Geometry& geometry,
                               const Shape3& patch_shape);

/// Applies a plan to any image on the planned grid.
template <typename T>
Image<T> apply_crop_or_pad(const Image<T>& in, const PatchGeometry& g, T fill = T{});
LabelVolume apply_crop_or_pad(const LabelVolume& in, const PatchGeometry& g);

/// Inverse of apply_crop_or_pad: restores the original grid, cropped-away voxels get `fill`.
template <typename T>
Image<T> invert_crop_or_pad(const Image<T>& patch, const PatchGeometry& g, T fill = T{});
ProbabilityMap invert_crop_or_pad(const ProbabilityMap& patch, const PatchGeometry& g);

struct Patch {
  Volume3D image;
  PatchGeometry geometry;
};

Patch crop_or_pad(const Volume3D& image, const Shape3& patch_shape = {kPatchShape[0], kPatchShape[1],
                                                                      kPatchShape[2]});

}  // namespace labelseg
