#include "labelseg/pipeline.hpp"

#include <cmath>

#include "labelseg/resample.hpp"

namespace labelseg {

void PreprocessOptions::validate() const {
  if (dilation_voxels < 0) throw ValidationError("preprocess: dilation_voxels must be >= 0");
  for (auto n : patch_shape) {
    if (n < 1) throw ValidationError("preprocess: patch dimensions must be positive");
  }
  if (registration_options.levels < 1) throw ValidationError("preprocess: registration levels must be >= 1");
}

nlohmann::json to_json(const PreprocessOptions& o) {
  const auto& r = o.registration_options;
  return {{"registration", o.registration == RegistrationChoice::kRigid ? "rigid" : "identity"},
          {"dilation_voxels", o.dilation_voxels},
          {"patch_shape", o.patch_shape},
          {"registration_options",
           {{"levels", r.levels},
            {"max_iterations_per_level", r.max_iterations_per_level},
            {"translation_step_voxels", r.translation_step_voxels},
            {"rotation_step_degrees", r.rotation_step_degrees},
            {"scale_step", r.scale_step},
            {"shear_step", r.shear_step},
            {"max_step_halvings", r.max_step_halvings},
            {"min_similarity", r.min_similarity},
            {"min_overlap", r.min_overlap}}}};
}

PreprocessOptions preprocess_options_from_json(const nlohmann::json& j, PreprocessOptions o) {
  try {
    if (j.contains("registration")) {
      const auto s = j.at("registration").get<std::string>();
      if (s == "rigid") {
        o.registration = RegistrationChoice::kRigid;
      } else if (s == "identity") {
        o.registration = RegistrationChoice::kIdentity;
      } else {
        throw ValidationError("preprocess: registration must be \"rigid\" or \"identity\", got \"" + s + "\"");
      }
    }
    o.dilation_voxels = j.value("dilation_voxels", o.dilation_voxels);
    if (j.contains("patch_shape")) o.patch_shape = j.at("patch_shape").get<std::array<std::int64_t, 3>>();
    if (j.contains("registration_options")) {
      const auto& rj = j.at("registration_options");
      auto& r = o.registration_options;
      r.levels = rj.value("levels", r.levels);
      r.max_iterations_per_level = rj.value("max_iterations_per_level", r.max_iterations_per_level);
      r.translation_step_voxels = rj.value("translation_step_voxels", r.translation_step_voxels);
      r.rotation_step_degrees = rj.value("rotation_step_degrees", r.rotation_step_degrees);
      r.scale_step = rj.value("scale_step", r.scale_step);
      r.shear_step = rj.value("shear_step", r.shear_step);
      r.max_step_halvings = rj.value("max_step_halvings", r.max_step_halvings);
      r.min_similarity = rj.value("min_similarity", r.min_similarity);
      r.min_overlap = rj.value("min_overlap", r.min_overlap);
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("preprocess config: ") + e.what());
  }
  return o;
}

namespace {

const AtlasTemplate* nearest_template(const AtlasCollection& atlas, std::optional<double> ga) {
  if (atlas.templates.empty()) throw ValidationError("atlas has no templates");
  if (!ga) return &atlas.templates.front();
  const AtlasTemplate* best = nullptr;
  for (const auto& t : atlas.templates) {
    if (best == nullptr || std::abs(t.ga - *ga) < std::abs(best->ga - *ga)) best = &t;
  }
  return best;
}

}  // namespace

PreprocessedCase preprocess_case(const Volume3D& image, const std::optional<LabelVolume>& labels,
                                 const std::optional<LabelVolume>& mask, std::optional<double> ga,
                                 const AtlasCollection* atlas, const PreprocessOptions& options,
                                 const std::function<void(const std::string&)>& warn) {
  options.validate();
  if (labels) require_same_grid(image, *labels, "preprocess labels");

  LabelVolume brain;
  if (mask) {
    require_same_grid(image, *mask, "preprocess mask");
    brain = binarize(*mask);
  } else {
    if (atlas == nullptr) throw ValidationError("preprocess: no brain mask given and no atlas configured");
    if (!ga) throw ValidationError("preprocess: atlas-based brain masks need a gestational age");
    brain = compute_brain_mask(image, *atlas, *ga, options.registration_options, warn);
  }

  const bool rigid = options.registration == RegistrationChoice::kRigid;
  if (rigid && atlas == nullptr) throw ValidationError("preprocess: rigid registration needs an atlas");
  const AtlasTemplate* tpl = atlas != nullptr ? nearest_template(*atlas, ga) : nullptr;
  const Volume3D& reference = tpl != nullptr ? tpl->volume : image;
  std::optional<LabelVolume> reference_mask;
  if (tpl != nullptr) reference_mask = tpl->brain_mask;

  TemplateSpaceResult ts =
      to_template_space(image, brain, reference, reference_mask, options.registration_options, rigid);
  if (!ts.registration.converged && warn) warn("rigid registration did not converge");

  PreprocessedCase out;
  out.registration_converged = ts.registration.converged;
  const Volume3D stripped = skull_strip(ts.image, ts.mask, options.dilation_voxels);
  const Volume3D normalized = normalize_intensity(stripped);
  const Shape3 patch{options.patch_shape[0], options.patch_shape[1], options.patch_shape[2]};
  out.geometry = plan_crop_or_pad(normalized.shape, normalized.geometry, patch);
  out.geometry.transform = ts.transform;
  out.geometry.native_shape = image.shape;
  out.geometry.native_geometry = image.geometry;
  out.image = apply_crop_or_pad(normalized, out.geometry);
  out.mask = apply_crop_or_pad(ts.mask, out.geometry);
  if (labels) {
    const LabelVolume warped = resample_nearest(*labels, normalized.shape, normalized.geometry,
                                                ts.transform.inverse().matrix(), 0);
    out.labels = apply_crop_or_pad(warped, out.geometry);
    out.labels->protocol_id = labels->protocol_id;
  }
  return out;
}

}  // namespace labelseg
