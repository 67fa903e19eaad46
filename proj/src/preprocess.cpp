#include "labelseg/preprocess.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

#include "labelseg/nifti_io.hpp"
#include "labelseg/resample.hpp"

namespace labelseg {

AtlasCollection load_atlas(const std::filesystem::path& dir) {
  const auto meta = dir / "atlas.json";
  std::ifstream in(meta);
  if (!in) throw IoError("cannot open atlas metadata: " + meta.string());
  nlohmann::json doc;
  try {
    in >> doc;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(meta.string() + ": " + e.what());
  }
  AtlasCollection atlas;
  try {
    for (const auto& jt : doc.at("templates")) {
      AtlasTemplate t;
      const auto image = dir / jt.at("image").get<std::string>();
      t.name = image.filename().string();
      t.volume = read_volume(image);
      t.brain_mask = binarize(read_label_volume(dir / jt.at("mask").get<std::string>()));
      t.ga = jt.at("ga_weeks").get<double>();
      if (!std::isfinite(t.ga)) throw ValidationError("atlas template " + t.name + ": ga not finite");
      require_same_grid(t.volume, t.brain_mask, "atlas template " + t.name);
      atlas.templates.push_back(std::move(t));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(meta.string() + ": " + e.what());
  }
  return atlas;
}

std::vector<const AtlasTemplate*> select_templates(
    const AtlasCollection& atlas, double ga, const std::function<void(const std::string&)>& warn) {
  if (atlas.templates.empty()) throw ValidationError("atlas has no templates");
  if (!(ga > 0.0)) throw ValidationError("gestational age must be positive");
  std::vector<const AtlasTemplate*> out;
  for (const auto& t : atlas.templates) {
    if (std::abs(t.ga - ga) <= kTemplateGaWindowWeeks) out.push_back(&t);
  }
  if (out.empty()) {
    const auto it = std::min_element(
        atlas.templates.begin(), atlas.templates.end(),
        [&](const AtlasTemplate& a, const AtlasTemplate& b) { return std::abs(a.ga - ga) < std::abs(b.ga - ga); });
    out.push_back(&*it);
    if (warn) {
      warn("no atlas template within " + std::to_string(kTemplateGaWindowWeeks) + " weeks of ga " +
           std::to_string(ga) + "; using nearest template at ga " + std::to_string(it->ga));
    }
  }
  return out;
}

LabelVolume fuse_masks(std::span<const Volume3D> warped) {
  if (warped.empty()) throw ValidationError("fuse_masks: no masks");
  LabelVolume out(warped.front().shape, warped.front().geometry, 0);
  const double n = static_cast<double>(warped.size());
  for (std::size_t i = 0; i < out.data.size(); ++i) {
    double acc = 0.0;
    for (const auto& m : warped) {
      if (!(m.shape == out.shape)) throw ShapeError("fuse_masks: grid mismatch");
      acc += m.data[i];
    }
    out.data[i] = acc / n >= 0.5 ? 1 : 0;
  }
  return out;
}

LabelVolume compute_brain_mask(const Volume3D& image, const AtlasCollection& atlas, double ga,
                               const RegistrationOptions& options,
                               const std::function<void(const std::string&)>& warn) {
  const auto selected = select_templates(atlas, ga, warn);
  std::vector<Volume3D> warped;
  warped.reserve(selected.size());
  for (const AtlasTemplate* t : selected) {
    const RigidTransform init = centroid_translation_init(image, t->volume);
    const auto reg =
        register_volumes(image, t->volume, RegistrationMode::kAffine, AffineTransform(init), options);
    if (!reg.converged && warn) warn("affine registration of template " + t->name + " did not converge");
    warped.push_back(resample_linear(to_float(t->brain_mask), image.shape, image.geometry,
                                     reg.transform.inverse().matrix));
  }
  return fuse_masks(warped);
}

std::pair<Shape3, Geometry> template_grid(const Volume3D& tpl, double spacing) {
  Geometry g;
  g.spacing = Eigen::Vector3d::Constant(spacing);
  Eigen::Matrix3d dir = tpl.geometry.affine.topLeftCorner<3, 3>();
  Eigen::Vector3d extent_mm;
  for (int a = 0; a < 3; ++a) {
    const double len = dir.col(a).norm();
    dir.col(a) /= len;
    extent_mm[a] = static_cast<double>(tpl.shape[a]) * len;
  }
  Shape3 s;
  std::array<std::int64_t, 3> n{};
  for (int a = 0; a < 3; ++a) {
    n[static_cast<std::size_t>(a)] = std::max<std::int64_t>(1, std::llround(extent_mm[a] / spacing));
  }
  s.nx = n[0];
  s.ny = n[1];
  s.nz = n[2];
  // First output voxel centre sits half a voxel inside the template's field-of-view corner.
  Eigen::Vector3d corner_offset;
  for (int a = 0; a < 3; ++a) {
    const double len = tpl.geometry.affine.col(a).head<3>().norm();
    corner_offset[a] = -0.5 * len + 0.5 * spacing;
  }
  g.affine.setIdentity();
  g.affine.topLeftCorner<3, 3>() = dir * spacing;
  g.affine.topRightCorner<3, 1>() = tpl.geometry.affine.topRightCorner<3, 1>() + dir * corner_offset;
  return {s, g};
}

TemplateSpaceResult to_template_space(const Volume3D& image, const LabelVolume& mask,
                                      const Volume3D& atlas_template,
                                      const std::optional<LabelVolume>& template_mask,
                                      const RegistrationOptions& options, bool register_rigid) {
  require_same_grid(image, mask, "to_template_space mask");
  if (count_nonzero(mask) == 0) throw ValidationError("to_template_space: brain mask is empty");
  TemplateSpaceResult out;
  if (register_rigid) {
    LabelVolume tmask;
    if (template_mask) {
      tmask = binarize(*template_mask);
    } else {
      tmask = LabelVolume(atlas_template.shape, atlas_template.geometry, 0);
      for (std::size_t i = 0; i < tmask.data.size(); ++i) tmask.data[i] = atlas_template.data[i] != 0.0f;
    }
    const RigidTransform init = centroid_translation_init(tmask, mask);
    out.registration = register_volumes(atlas_template, image, RegistrationMode::kRigid,
                                        AffineTransform(init), options);
    out.transform = out.registration.rigid;
  } else {
    out.registration.converged = true;
    out.transform = RigidTransform::identity();
  }
  const auto [shape, geom] = template_grid(atlas_template);
  const Eigen::Matrix4d back = out.transform.inverse().matrix();
  out.image = resample_linear(image, shape, geom, back);
  out.mask = resample_nearest(binarize(mask), shape, geom, back, 0);
  return out;
}

LabelVolume dilate_mask(const LabelVolume& mask, int iterations) {
  LabelVolume cur = binarize(mask);
  const Shape3 s = cur.shape;
  for (int it = 0; it < iterations; ++it) {
    LabelVolume next = cur;
    for (std::int64_t z = 0; z < s.nz; ++z) {
      for (std::int64_t y = 0; y < s.ny; ++y) {
        for (std::int64_t x = 0; x < s.nx; ++x) {
          if (cur.at(x, y, z) == 0) continue;
          static constexpr int kOffsets[6][3] = {{1, 0, 0},  {-1, 0, 0}, {0, 1, 0},
                                                 {0, -1, 0}, {0, 0, 1},  {0, 0, -1}};
          for (const auto& o : kOffsets) {
            const auto xx = x + o[0], yy = y + o[1], zz = z + o[2];
            if (s.contains(xx, yy, zz)) next.at(xx, yy, zz) = 1;
          }
        }
      }
    }
    cur = std::move(next);
  }
  return cur;
}

Volume3D skull_strip(const Volume3D& image, const LabelVolume& mask, int dilation_voxels) {
  require_same_grid(image, mask, "skull_strip");
  if (dilation_voxels < 0) throw ValidationError("skull_strip: negative dilation");
  const LabelVolume dil = dilate_mask(mask, dilation_voxels);
  Volume3D out = image;
  for (std::size_t i = 0; i < out.data.size(); ++i) {
    if (dil.data[i] == 0) out.data[i] = 0.0f;
  }
  return out;
}

double percentile_linear(std::span<const double> sorted, double q) {
  if (sorted.empty()) throw ValidationError("percentile of an empty set");
  if (q < 0.0 || q > 100.0) throw ValidationError("percentile rank outside [0,100]");
  const double pos = q / 100.0 * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

Volume3D normalize_intensity(const Volume3D& image, NormalizationStats* stats) {
  std::vector<double> values;
  values.reserve(image.data.size());
  for (float v : image.data) {
    if (v != 0.0f) values.push_back(v);
  }
  if (values.empty()) throw ValidationError("normalize_intensity: image has no non-zero voxels");
  std::vector<double> sorted = values;
  std::sort(sorted.begin(), sorted.end());
  const double thr = percentile_linear(sorted, kClipPercentile);
  double sum = 0.0;
  for (double& v : values) {
    v = std::min(v, thr);
    sum += v;
  }
  const double mean = sum / static_cast<double>(values.size());
  double ss = 0.0;
  for (double v : values) ss += (v - mean) * (v - mean);
  const double sd = std::sqrt(ss / static_cast<double>(values.size()));
  if (!(sd > 1e-12 * std::max(1.0, std::abs(mean)))) {
    throw ValidationError("normalize_intensity: zero variance after clipping");
  }
  Volume3D out = image;
  for (float& v : out.data) {
    if (v == 0.0f) continue;
    v = static_cast<float>((std::min(static_cast<double>(v), thr) - mean) / sd);
  }
  if (stats) *stats = {thr, mean, sd};
  return out;
}

bool PatchGeometry::is_identity_crop() const {
  for (int a = 0; a < 3; ++a) {
    if (crop_low[a] || crop_high[a] || pad_low[a] || pad_high[a]) return false;
  }
  return true;
}

PatchGeometry plan_crop_or_pad(const Shape3& shape, const Geometry& geometry, const Shape3& patch) {
  PatchGeometry g;
  g.original_shape = shape;
  g.original_geometry = geometry;
  g.patch_shape = patch;
  g.native_shape = shape;
  g.native_geometry = geometry;
  for (int a = 0; a < 3; ++a) {
    const auto diff = patch[a] - shape[a];
    if (diff >= 0) {
      g.pad_low[a] = diff / 2;
      g.pad_high[a] = diff - diff / 2;
    } else {
      g.crop_low[a] = (-diff) / 2;
      g.crop_high[a] = -diff - (-diff) / 2;
    }
  }
  return g;
}

namespace {

Eigen::Vector3d patch_offset(const PatchGeometry& g) {
  return Eigen::Vector3d(double(g.crop_low[0] - g.pad_low[0]), double(g.crop_low[1] - g.pad_low[1]),
                         double(g.crop_low[2] - g.pad_low[2]));
}

Geometry patch_geometry_of(const PatchGeometry& g) {
  Geometry pg = g.original_geometry;
  pg.affine.topRightCorner<3, 1>() = g.original_geometry.voxel_to_world(patch_offset(g));
  return pg;
}

template <typename T>
void copy_shifted(const std::vector<T>& src, const Shape3& ss, std::vector<T>& dst, const Shape3& ds,
                  const std::array<std::int64_t, 3>& off) {
  // dst voxel j reads src voxel j + off
  for (std::int64_t z = 0; z < ds.nz; ++z) {
    const auto sz = z + off[2];
    if (sz < 0 || sz >= ss.nz) continue;
    for (std::int64_t y = 0; y < ds.ny; ++y) {
      const auto sy = y + off[1];
      if (sy < 0 || sy >= ss.ny) continue;
      for (std::int64_t x = 0; x < ds.nx; ++x) {
        const auto sx = x + off[0];
        if (sx < 0 || sx >= ss.nx) continue;
        dst[ds.index(x, y, z)] = src[ss.index(sx, sy, sz)];
      }
    }
  }
}

std::array<std::int64_t, 3> forward_offset(const PatchGeometry& g) {
  return {g.crop_low[0] - g.pad_low[0], g.crop_low[1] - g.pad_low[1], g.crop_low[2] - g.pad_low[2]};
}

std::array<std::int64_t, 3> negate(std::array<std::int64_t, 3> a) {
  for (auto& v : a) v = -v;
  return a;
}

}  // namespace

template <typename T>
Image<T> apply_crop_or_pad(const Image<T>& in, const PatchGeometry& g, T fill) {
  if (!(in.shape == g.original_shape)) {
    throw ShapeError("crop/pad plan made for " + to_string(g.original_shape) + ", got " +
                     to_string(in.shape));
  }
  Image<T> out(g.patch_shape, patch_geometry_of(g), fill);
  copy_shifted(in.data, in.shape, out.data, out.shape, forward_offset(g));
  return out;
}

LabelVolume apply_crop_or_pad(const LabelVolume& in, const PatchGeometry& g) {
  LabelVolume out;
  static_cast<Image<std::int32_t>&>(out) = apply_crop_or_pad<std::int32_t>(in, g, 0);
  out.protocol_id = in.protocol_id;
  return out;
}

template <typename T>
Image<T> invert_crop_or_pad(const Image<T>& patch, const PatchGeometry& g, T fill) {
  if (!(patch.shape == g.patch_shape)) {
    throw ShapeError("patch shape " + to_string(patch.shape) + " does not match plan " +
                     to_string(g.patch_shape));
  }
  Image<T> out(g.original_shape, g.original_geometry, fill);
  copy_shifted(patch.data, patch.shape, out.data, out.shape, negate(forward_offset(g)));
  return out;
}

ProbabilityMap invert_crop_or_pad(const ProbabilityMap& patch, const PatchGeometry& g) {
  if (!(patch.shape == g.patch_shape)) {
    throw ShapeError("probability map shape " + to_string(patch.shape) + " does not match plan " +
                     to_string(g.patch_shape));
  }
  ProbabilityMap out(patch.channels, g.original_shape, g.original_geometry, 0.0f);
  const auto off = negate(forward_offset(g));
  for (int c = 0; c < patch.channels; ++c) {
    std::vector<float> src(patch.channel(c), patch.channel(c) + patch.shape.size());
    std::vector<float> dst(g.original_shape.size(), 0.0f);
    copy_shifted(src, patch.shape, dst, g.original_shape, off);
    std::copy(dst.begin(), dst.end(), out.channel(c));
  }
  return out;
}

template Image<float> apply_crop_or_pad<float>(const Image<float>&, const PatchGeometry&, float);
template Image<std::int32_t> apply_crop_or_pad<std::int32_t>(const Image<std::int32_t>&,
                                                             const PatchGeometry&, std::int32_t);
template Image<float> invert_crop_or_pad<float>(const Image<float>&, const PatchGeometry&, float);
template Image<std::int32_t> invert_crop_or_pad<std::int32_t>(const Image<std::int32_t>&,
                                                              const PatchGeometry&, std::int32_t);

Patch crop_or_pad(const Volume3D& image, const Shape3& patch_shape) {
  Patch p;
  p.geometry = plan_crop_or_pad(image.shape, image.geometry, patch_shape);
  p.image = apply_crop_or_pad<float>(image, p.geometry, 0.0f);
  return p;
}

namespace {

nlohmann::json matrix_json(const Eigen::Matrix4d& m) {
  std::vector<double> v;
  for (int r = 0; r < 4; ++r) {
    for (int c = 0; c < 4; ++c) v.push_back(m(r, c));
  }
  return v;
}

Eigen::Matrix4d matrix_from_json(const nlohmann::json& j) {
  const auto v = j.get<std::vector<double>>();
  if (v.size() != 16) throw FormatError("expected a 4x4 row-major matrix (16 numbers)");
  Eigen::Matrix4d m;
  for (int r = 0; r < 4; ++r) {
    for (int c = 0; c < 4; ++c) m(r, c) = v[static_cast<std::size_t>(4 * r + c)];
  }
  return m;
}

nlohmann::json shape_json(const Shape3& s) { return {s.nx, s.ny, s.nz}; }

Shape3 shape_from_json(const nlohmann::json& j) {
  const auto v = j.get<std::vector<std::int64_t>>();
  if (v.size() != 3) throw FormatError("expected a 3-element shape");
  return {v[0], v[1], v[2]};
}

nlohmann::json geometry_json(const Geometry& g) {
  return {{"spacing", {g.spacing[0], g.spacing[1], g.spacing[2]}}, {"affine", matrix_json(g.affine)}};
}

Geometry geometry_from_json(const nlohmann::json& j) {
  Geometry g;
  const auto sp = j.at("spacing").get<std::vector<double>>();
  if (sp.size() != 3) throw FormatError("expected 3 spacing values");
  g.spacing = Eigen::Vector3d(sp[0], sp[1], sp[2]);
  g.affine = matrix_from_json(j.at("affine"));
  g.validate();
  return g;
}

}  // namespace

nlohmann::json to_json(const PatchGeometry& g) {
  return {{"version", 1},
          {"crop_low", g.crop_low},
          {"crop_high", g.crop_high},
          {"pad_low", g.pad_low},
          {"pad_high", g.pad_high},
          {"original_shape", shape_json(g.original_shape)},
          {"original_geometry", geometry_json(g.original_geometry)},
          {"patch_shape", shape_json(g.patch_shape)},
          {"rigid_transform", matrix_json(g.transform.matrix())},
          {"target_spacing_mm", g.target_spacing},
          {"native_shape", shape_json(g.native_shape)},
          {"native_geometry", geometry_json(g.native_geometry)}};
}

PatchGeometry patch_geometry_from_json(const nlohmann::json& j) {
  try {
    PatchGeometry g;
    g.crop_low = j.at("crop_low").get<std::array<std::int64_t, 3>>();
    g.crop_high = j.at("crop_high").get<std::array<std::int64_t, 3>>();
    g.pad_low = j.at("pad_low").get<std::array<std::int64_t, 3>>();
    g.pad_high = j.at("pad_high").get<std::array<std::int64_t, 3>>();
    g.original_shape = shape_from_json(j.at("original_shape"));
    g.original_geometry = geometry_from_json(j.at("original_geometry"));
    g.patch_shape = shape_from_json(j.at("patch_shape"));
    g.transform = RigidTransform::from_matrix(matrix_from_json(j.at("rigid_transform")));
    g.target_spacing = j.at("target_spacing_mm").get<double>();
    g.native_shape = shape_from_json(j.at("native_shape"));
    g.native_geometry = geometry_from_json(j.at("native_geometry"));
    for (int a = 0; a < 3; ++a) {
      if (g.original_shape[a] + g.pad_low[a] + g.pad_high[a] - g.crop_low[a] - g.crop_high[a] !=
          g.patch_shape[a]) {
        throw FormatError("inconsistent crop/pad amounts on axis " + std::to_string(a));
      }
    }
    return g;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("patch geometry: ") + e.what());
  }
}

void save_patch_geometry(const PatchGeometry& g, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write geometry sidecar: " + path.string());
  out << to_json(g).dump(2) << '\n';
  if (!out) throw IoError("write failed: " + path.string());
}

PatchGeometry load_patch_geometry(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("missing geometry sidecar: " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  return patch_geometry_from_json(j);
}

}  // namespace labelseg
