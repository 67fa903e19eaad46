#include "labelseg/augment.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "labelseg/resample.hpp"
#include "labelseg/transform.hpp"

namespace labelseg {

namespace {

void check_prob(double p, const char* name) {
  if (!(p >= 0.0 && p <= 1.0)) {
    throw ValidationError(std::string("augment: ") + name + " probability must be in [0,1]");
  }
}

void check_range(double lo, double hi, const char* name) {
  if (!(std::isfinite(lo) && std::isfinite(hi) && lo < hi)) {
    throw ValidationError(std::string("augment: ") + name + " range must satisfy min < max");
  }
}

double uniform01(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

double uniform(std::mt19937_64& rng, double lo, double hi) { return lo + (hi - lo) * uniform01(rng); }

bool gate(std::mt19937_64& rng, double p) { return uniform01(rng) < p; }

}  // namespace

void AugmentConfig::validate() const {
  check_prob(zoom_prob, "zoom");
  check_prob(rotate_prob, "rotate");
  check_prob(noise_prob, "noise");
  check_prob(smooth_prob, "smooth");
  check_prob(gamma_prob, "gamma");
  check_prob(flip_prob, "flip");
  check_range(zoom_min, zoom_max, "zoom");
  check_range(rotate_min_deg, rotate_max_deg, "rotate");
  check_range(smooth_sigma_min, smooth_sigma_max, "smooth sigma");
  check_range(gamma_min, gamma_max, "gamma");
  if (!(zoom_min > 0.0)) throw ValidationError("augment: zoom ratios must be positive");
  if (!(gamma_min > 0.0)) throw ValidationError("augment: gamma values must be positive");
  if (!(smooth_sigma_min > 0.0)) throw ValidationError("augment: smoothing sigma must be positive");
  if (!(noise_std >= 0.0)) throw ValidationError("augment: noise std must be non-negative");
}

AugmentConfig AugmentConfig::disabled() {
  AugmentConfig c;
  c.zoom_prob = c.rotate_prob = c.noise_prob = c.smooth_prob = c.gamma_prob = c.flip_prob = 0.0;
  return c;
}

nlohmann::json to_json(const AugmentConfig& c) {
  return {{"zoom", {{"min", c.zoom_min}, {"max", c.zoom_max}, {"prob", c.zoom_prob}}},
          {"rotate", {{"min_deg", c.rotate_min_deg}, {"max_deg", c.rotate_max_deg}, {"prob", c.rotate_prob}}},
          {"noise", {{"std", c.noise_std}, {"prob", c.noise_prob}}},
          {"smooth", {{"sigma_min", c.smooth_sigma_min}, {"sigma_max", c.smooth_sigma_max}, {"prob", c.smooth_prob}}},
          {"gamma", {{"min", c.gamma_min}, {"max", c.gamma_max}, {"prob", c.gamma_prob}}},
          {"flip", {{"prob", c.flip_prob}}}};
}

AugmentConfig augment_config_from_json(const nlohmann::json& j, AugmentConfig c) {
  auto read = [&](const char* section, const char* key, double& dst) {
    if (j.contains(section) && j.at(section).contains(key)) dst = j.at(section).at(key).get<double>();
  };
  try {
    read("zoom", "min", c.zoom_min);
    read("zoom", "max", c.zoom_max);
    read("zoom", "prob", c.zoom_prob);
    read("rotate", "min_deg", c.rotate_min_deg);
    read("rotate", "max_deg", c.rotate_max_deg);
    read("rotate", "prob", c.rotate_prob);
    read("noise", "std", c.noise_std);
    read("noise", "prob", c.noise_prob);
    read("smooth", "sigma_min", c.smooth_sigma_min);
    read("smooth", "sigma_max", c.smooth_sigma_max);
    read("smooth", "prob", c.smooth_prob);
    read("gamma", "min", c.gamma_min);
    read("gamma", "max", c.gamma_max);
    read("gamma", "prob", c.gamma_prob);
    read("flip", "prob", c.flip_prob);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("augment config: ") + e.what());
  }
  return c;
}

Eigen::Matrix4d AugmentDraw::voxel_map(const Shape3& shape) const {
  const Eigen::Vector3d center((shape.nx - 1) * 0.5, (shape.ny - 1) * 0.5, (shape.nz - 1) * 0.5);
  Eigen::Matrix3d forward = Eigen::Matrix3d::Identity();
  if (zoom) forward *= zoom_ratio;
  if (rotate) forward = rotation_from_euler(angles_rad) * forward;
  // Output voxel j shows input voxel c + forward^-1 (j - c).
  const Eigen::Matrix3d inv = forward.inverse();
  Eigen::Matrix4d m = Eigen::Matrix4d::Identity();
  m.topLeftCorner<3, 3>() = inv;
  m.topRightCorner<3, 1>() = center - inv * center;
  return m;
}

AugmentDraw draw_augmentation(const AugmentConfig& c, std::mt19937_64& rng) {
  AugmentDraw d;
  d.zoom = gate(rng, c.zoom_prob);
  d.zoom_ratio = uniform(rng, c.zoom_min, c.zoom_max);
  d.rotate = gate(rng, c.rotate_prob);
  const double to_rad = std::numbers::pi / 180.0;
  for (int a = 0; a < 3; ++a) d.angles_rad[a] = uniform(rng, c.rotate_min_deg, c.rotate_max_deg) * to_rad;
  d.noise = gate(rng, c.noise_prob);
  d.noise_seed = rng();
  d.smooth = gate(rng, c.smooth_prob);
  for (auto& s : d.smooth_sigma) s = uniform(rng, c.smooth_sigma_min, c.smooth_sigma_max);
  d.gamma = gate(rng, c.gamma_prob);
  d.gamma_value = uniform(rng, c.gamma_min, c.gamma_max);
  for (auto& f : d.flip) f = gate(rng, c.flip_prob);
  if (!d.zoom) d.zoom_ratio = 1.0;
  if (!d.rotate) d.angles_rad.setZero();
  return d;
}

Volume3D warp_image_linear(const Volume3D& image, const Eigen::Matrix4d& map) {
  Volume3D out(image.shape, image.geometry, 0.0f);
  const Shape3 s = image.shape;
  for (std::int64_t z = 0; z < s.nz; ++z) {
    for (std::int64_t y = 0; y < s.ny; ++y) {
      for (std::int64_t x = 0; x < s.nx; ++x) {
        const Eigen::Vector4d src = map * Eigen::Vector4d(double(x), double(y), double(z), 1.0);
        out.at(x, y, z) = sample_linear(image, src.head<3>());
      }
    }
  }
  return out;
}

LabelVolume warp_labels_nearest(const LabelVolume& target, const Eigen::Matrix4d& map) {
  LabelVolume out = target;
  const Shape3 s = target.shape;
  auto nearest = [](double v, std::int64_t n) {
    const auto i = static_cast<std::int64_t>(std::floor(v + 0.5));
    return std::clamp<std::int64_t>(i, 0, n - 1);
  };
  for (std::int64_t z = 0; z < s.nz; ++z) {
    for (std::int64_t y = 0; y < s.ny; ++y) {
      for (std::int64_t x = 0; x < s.nx; ++x) {
        const Eigen::Vector4d src = map * Eigen::Vector4d(double(x), double(y), double(z), 1.0);
        out.at(x, y, z) =
            target.at(nearest(src[0], s.nx), nearest(src[1], s.ny), nearest(src[2], s.nz));
      }
    }
  }
  return out;
}

Volume3D random_gamma(const Volume3D& image, double gamma) {
  if (!(gamma > 0.0)) throw ValidationError("random_gamma: gamma must be > 0");
  if (image.data.empty()) return image;
  const auto [lo_it, hi_it] = std::minmax_element(image.data.begin(), image.data.end());
  const double lo = *lo_it, hi = *hi_it;
  const double range = hi - lo;
  if (!(range > 0.0)) return image;
  Volume3D out = image;
  for (float& v : out.data) {
    const double u = std::clamp((static_cast<double>(v) - lo) / range, 0.0, 1.0);
    v = static_cast<float>(lo + range * std::pow(u, gamma));
  }
  return out;
}

Volume3D add_gaussian_noise(const Volume3D& image, double stddev, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, stddev);
  Volume3D out = image;
  for (float& v : out.data) v = static_cast<float>(v + dist(rng));
  return out;
}

namespace {

std::vector<double> gaussian_kernel(double sigma) {
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    const double v = std::exp(-0.5 * i * i / (sigma * sigma));
    k[static_cast<std::size_t>(i + radius)] = v;
    sum += v;
  }
  for (double& v : k) v /= sum;
  return k;
}

void blur_axis(std::vector<double>& data, const Shape3& s, int axis, const std::vector<double>& k) {
  const auto radius = static_cast<std::int64_t>(k.size() / 2);
  const std::int64_t n = s[axis];
  const std::int64_t stride = axis == 0 ? 1 : (axis == 1 ? s.nx : s.nx * s.ny);
  std::vector<double> line(static_cast<std::size_t>(n));
  const std::int64_t total = static_cast<std::int64_t>(s.size());
  for (std::int64_t base = 0; base < total; ++base) {
    // Visit each line once, from its first element.
    if ((base / stride) % n != 0) continue;
    for (std::int64_t i = 0; i < n; ++i) line[static_cast<std::size_t>(i)] = data[static_cast<std::size_t>(base + i * stride)];
    for (std::int64_t i = 0; i < n; ++i) {
      double acc = 0.0;
      for (std::int64_t t = -radius; t <= radius; ++t) {
        const std::int64_t j = std::clamp<std::int64_t>(i + t, 0, n - 1);
        acc += k[static_cast<std::size_t>(t + radius)] * line[static_cast<std::size_t>(j)];
      }
      data[static_cast<std::size_t>(base + i * stride)] = acc;
    }
  }
}

}  // namespace

Volume3D gaussian_smooth(const Volume3D& image, const std::array<double, 3>& sigma) {
  std::vector<double> buf(image.data.begin(), image.data.end());
  for (int a = 0; a < 3; ++a) {
    if (!(sigma[static_cast<std::size_t>(a)] > 0.0)) continue;
    blur_axis(buf, image.shape, a, gaussian_kernel(sigma[static_cast<std::size_t>(a)]));
  }
  Volume3D out = image;
  for (std::size_t i = 0; i < buf.size(); ++i) out.data[i] = static_cast<float>(buf[i]);
  return out;
}

template <typename T>
Image<T> flip_image(const Image<T>& in, const std::array<bool, 3>& axes) {
  if (!axes[0] && !axes[1] && !axes[2]) return in;
  Image<T> out = in;
  const Shape3 s = in.shape;
  for (std::int64_t z = 0; z < s.nz; ++z) {
    const auto zz = axes[2] ? s.nz - 1 - z : z;
    for (std::int64_t y = 0; y < s.ny; ++y) {
      const auto yy = axes[1] ? s.ny - 1 - y : y;
      for (std::int64_t x = 0; x < s.nx; ++x) {
        const auto xx = axes[0] ? s.nx - 1 - x : x;
        out.at(x, y, z) = in.at(xx, yy, zz);
      }
    }
  }
  return out;
}

template Image<float> flip_image(const Image<float>&, const std::array<bool, 3>&);
template Image<std::int32_t> flip_image(const Image<std::int32_t>&, const std::array<bool, 3>&);

LabelVolume flip_image(const LabelVolume& in, const std::array<bool, 3>& axes) {
  LabelVolume out = in;
  static_cast<Image<std::int32_t>&>(out) = flip_image(static_cast<const Image<std::int32_t>&>(in), axes);
  return out;
}

AugmentedPair apply_augmentations(const Volume3D& image, const LabelVolume& target,
                                  const AugmentConfig& config, std::mt19937_64& rng) {
  config.validate();
  require_same_grid(image, target, "augment: image and target");
  AugmentedPair out{image, target, draw_augmentation(config, rng)};
  const AugmentDraw& d = out.draw;
  if (d.spatial()) {
    const Eigen::Matrix4d map = d.voxel_map(image.shape);
    out.image = warp_image_linear(out.image, map);
    out.target = warp_labels_nearest(out.target, map);
  }
  if (d.noise) out.image = add_gaussian_noise(out.image, config.noise_std, d.noise_seed);
  if (d.smooth) out.image = gaussian_smooth(out.image, d.smooth_sigma);
  if (d.gamma) out.image = random_gamma(out.image, d.gamma_value);
  out.image = flip_image(out.image, d.flip);
  out.target = flip_image(out.target, d.flip);
  return out;
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t sample_seed(std::uint64_t run_seed, std::int64_t epoch, std::string_view case_id) {
  std::uint64_t h = splitmix64(run_seed);
  h = splitmix64(h ^ static_cast<std::uint64_t>(epoch));
  return splitmix64(h ^ fnv1a64(case_id));
}

}  // namespace labelseg
