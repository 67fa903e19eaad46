#pragma once

#include <functional>
#include <optional>
#include <string>

#include "json.hpp"
#include "labelseg/preprocess.hpp"

namespace labelseg {

enum class RegistrationChoice { kRigid, kIdentity };

struct PreprocessOptions {
  RegistrationChoice registration = RegistrationChoice::kRigid;
  int dilation_voxels = 5;
  std::array<std::int64_t, 3> patch_shape = kPatchShape;
  RegistrationOptions registration_options;

  void validate() const;
};

nlohmann::json to_json(const PreprocessOptions& o);
PreprocessOptions preprocess_options_from_json(const nlohmann::json& j, PreprocessOptions defaults = {});

struct PreprocessedCase {
  Volume3D image;                    // normalized patch
  LabelVolume mask;                  // brain mask patch
  std::optional<LabelVolume> labels; // label patch when labels were given
  PatchGeometry geometry;
  bool registration_converged = true;
};

/// Brain mask (from `mask` or atlas fusion) -> template space at 0.8 mm -> skull strip ->
/// intensity normalization -> crop/pad. The reference grid is the atlas template nearest to
/// `ga`; without an atlas (identity registration only) the image's own field of view is used.
PreprocessedCase preprocess_case(const Volume3D& image, const std::optional<LabelVolume>& labels,
                                 const std::optional<LabelVolume>& mask, std::optional<double> ga,
                                 const AtlasCollection* atlas, const PreprocessOptions& options,
                                 const std::function<void(const std::string&)>& warn = nullptr);

}  // namespace labelseg
