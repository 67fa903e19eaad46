#include "labelseg/registration.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "labelseg/resample.hpp"

namespace labelseg {
namespace {

Eigen::Vector3d grid_center_world(const Volume3D& v) {
  const Eigen::Vector3d c((v.shape.nx - 1) / 2.0, (v.shape.ny - 1) / 2.0, (v.shape.nz - 1) / 2.0);
  return v.geometry.voxel_to_world(c);
}

/// Fixed-world -> moving-world map for a parameter vector.
struct Parameterization {
  RegistrationMode mode;
  Eigen::Matrix4d init_sampling;  // fixed world -> moving world at p = 0
  Eigen::Vector3d center;

  [[nodiscard]] int size() const { return mode == RegistrationMode::kRigid ? 6 : 12; }

  [[nodiscard]] Eigen::Matrix4d sampling(const std::vector<double>& p) const {
    Eigen::Matrix3d lin = rotation_from_euler(Eigen::Vector3d(p[0], p[1], p[2]));
    if (mode == RegistrationMode::kAffine) {
      const Eigen::Vector3d scale(std::exp(p[6]), std::exp(p[7]), std::exp(p[8]));
      Eigen::Matrix3d shear = Eigen::Matrix3d::Identity();
      shear(0, 1) = p[9];
      shear(0, 2) = p[10];
      shear(1, 2) = p[11];
      lin = lin * scale.asDiagonal() * shear;
    }
    Eigen::Matrix4d delta = Eigen::Matrix4d::Identity();
    delta.topLeftCorner<3, 3>() = lin;
    delta.topRightCorner<3, 1>() = center - lin * center + Eigen::Vector3d(p[3], p[4], p[5]);
    return init_sampling * delta;
  }
};

}  // namespace

double normalized_cross_correlation(const Volume3D& fixed, const Volume3D& moving,
                                    const Eigen::Matrix4d& w, double min_overlap) {
  const Eigen::Matrix4d vmap = voxel_map(moving.geometry, fixed.geometry, w);
  const Eigen::Matrix3d lin = vmap.topLeftCorner<3, 3>();
  const Eigen::Vector3d off = vmap.topRightCorner<3, 1>();
  const double mx = double(moving.shape.nx - 1);
  const double my = double(moving.shape.ny - 1);
  const double mz = double(moving.shape.nz - 1);
  double sf = 0, sm = 0, sff = 0, smm = 0, sfm = 0;
  std::size_t n = 0;
  std::size_t idx = 0;
  for (std::int64_t z = 0; z < fixed.shape.nz; ++z) {
    for (std::int64_t y = 0; y < fixed.shape.ny; ++y) {
      Eigen::Vector3d p = lin * Eigen::Vector3d(0.0, double(y), double(z)) + off;
      const Eigen::Vector3d dx = lin.col(0);
      for (std::int64_t x = 0; x < fixed.shape.nx; ++x, ++idx, p += dx) {
        if (p.x() < 0 || p.y() < 0 || p.z() < 0 || p.x() > mx || p.y() > my || p.z() > mz) continue;
        const double f = fixed.data[idx];
        const double m = sample_linear(moving, p);
        sf += f;
        sm += m;
        sff += f * f;
        smm += m * m;
        sfm += f * m;
        ++n;
      }
    }
  }
  if (n < 2 || double(n) < min_overlap * double(fixed.shape.size())) return -1.0;
  const double dn = double(n);
  const double cov = sfm - sf * sm / dn;
  const double vf = sff - sf * sf / dn;
  const double vm = smm - sm * sm / dn;
  if (vf <= 1e-12 * dn || vm <= 1e-12 * dn) return -1.0;
  return cov / std::sqrt(vf * vm);
}

Volume3D downsample2(const Volume3D& vol) {
  Shape3 s{(vol.shape.nx + 1) / 2, (vol.shape.ny + 1) / 2, (vol.shape.nz + 1) / 2};
  Geometry g = vol.geometry;
  g.spacing *= 2.0;
  Eigen::Matrix4d scale = Eigen::Matrix4d::Identity();
  for (int a = 0; a < 3; ++a) {
    scale(a, a) = 2.0;
    scale(a, 3) = 0.5;
  }
  g.affine = vol.geometry.affine * scale;
  Volume3D out(s, g, 0.0f);
  for (std::int64_t z = 0; z < s.nz; ++z) {
    for (std::int64_t y = 0; y < s.ny; ++y) {
      for (std::int64_t x = 0; x < s.nx; ++x) {
        double acc = 0.0;
        int cnt = 0;
        for (int dz = 0; dz < 2; ++dz) {
          for (int dy = 0; dy < 2; ++dy) {
            for (int dx = 0; dx < 2; ++dx) {
              const auto xx = 2 * x + dx, yy = 2 * y + dy, zz = 2 * z + dz;
              if (!vol.shape.contains(xx, yy, zz)) continue;
              acc += vol.at(xx, yy, zz);
              ++cnt;
            }
          }
        }
        out.at(x, y, z) = static_cast<float>(acc / cnt);
      }
    }
  }
  return out;
}

Eigen::Vector3d weighted_centroid(const Volume3D& vol) {
  Eigen::Vector3d acc = Eigen::Vector3d::Zero();
  double wsum = 0.0;
  for (std::int64_t z = 0; z < vol.shape.nz; ++z) {
    for (std::int64_t y = 0; y < vol.shape.ny; ++y) {
      for (std::int64_t x = 0; x < vol.shape.nx; ++x) {
        const double w = std::abs(static_cast<double>(vol.at(x, y, z)));
        if (w == 0.0) continue;
        acc += w * Eigen::Vector3d(double(x), double(y), double(z));
        wsum += w;
      }
    }
  }
  if (wsum == 0.0) throw ValidationError("centroid of an all-zero volume is undefined");
  return vol.geometry.voxel_to_world(acc / wsum);
}

RigidTransform centroid_translation_init(const Volume3D& fixed, const Volume3D& moving) {
  return RigidTransform::from_translation(weighted_centroid(fixed) - weighted_centroid(moving));
}

RigidTransform centroid_translation_init(const LabelVolume& fixed_mask,
                                         const LabelVolume& moving_mask) {
  return centroid_translation_init(to_float(binarize(fixed_mask)), to_float(binarize(moving_mask)));
}

RegistrationResult register_volumes(const Volume3D& fixed, const Volume3D& moving,
                                    RegistrationMode mode, const AffineTransform& init,
                                    const RegistrationOptions& options) {
  fixed.geometry.validate();
  moving.geometry.validate();

  std::vector<Volume3D> fixed_pyr{fixed};
  std::vector<Volume3D> moving_pyr{moving};
  for (int l = 1; l < options.levels; ++l) {
    const auto& f = fixed_pyr.back();
    if (std::min({f.shape.nx, f.shape.ny, f.shape.nz}) < 16) break;
    fixed_pyr.push_back(downsample2(f));
    moving_pyr.push_back(downsample2(moving_pyr.back()));
  }

  Parameterization param{mode, init.inverse().matrix, Eigen::Vector3d::Zero()};
  try {
    param.center = weighted_centroid(fixed);
  } catch (const ValidationError&) {
    param.center = grid_center_world(fixed);
  }

  const double base_spacing = fixed.geometry.spacing.mean();
  std::vector<double> base_steps(static_cast<std::size_t>(param.size()));
  for (int i = 0; i < 3; ++i) {
    base_steps[i] = options.rotation_step_degrees * std::numbers::pi / 180.0;
    base_steps[i + 3] = options.translation_step_voxels * base_spacing;
  }
  if (mode == RegistrationMode::kAffine) {
    for (int i = 6; i < 9; ++i) base_steps[i] = options.scale_step;
    for (int i = 9; i < 12; ++i) base_steps[i] = options.shear_step;
  }

  RegistrationResult result;
  std::vector<double> p(static_cast<std::size_t>(param.size()), 0.0);
  bool all_levels_settled = true;
  double best = -1.0;
  const int nlev = static_cast<int>(fixed_pyr.size());
  for (int l = nlev - 1; l >= 0; --l) {
    const auto& fl = fixed_pyr[static_cast<std::size_t>(l)];
    const auto& ml = moving_pyr[static_cast<std::size_t>(l)];
    auto eval = [&](const std::vector<double>& q) {
      return normalized_cross_correlation(fl, ml, param.sampling(q), options.min_overlap);
    };
    std::vector<double> steps = base_steps;
    for (auto& s : steps) s *= std::pow(2.0, l);
    best = eval(p);
    std::vector<double> history{best};
    int halvings = 0;
    int sweeps = 0;
    bool settled = false;
    while (sweeps < options.max_iterations_per_level) {
      ++sweeps;
      bool improved = false;
      for (std::size_t i = 0; i < p.size(); ++i) {
        for (double sign : {1.0, -1.0}) {
          auto q = p;
          q[i] += sign * steps[i];
          const double v = eval(q);
          if (v > best + 1e-12) {
            best = v;
            p = std::move(q);
            history.push_back(best);
            improved = true;
            break;
          }
        }
      }
      if (!improved) {
        if (++halvings > options.max_step_halvings) {
          settled = true;
          break;
        }
        for (auto& s : steps) s *= 0.5;
      }
    }
    result.iterations += sweeps;
    result.level_history.push_back(std::move(history));
    all_levels_settled = all_levels_settled && settled;
  }

  const Eigen::Matrix4d sampling = param.sampling(p);
  result.transform = AffineTransform(sampling).inverse();
  if (mode == RegistrationMode::kRigid) {
    result.rigid.rotation = result.transform.matrix.topLeftCorner<3, 3>();
    result.rigid.translation = result.transform.matrix.topRightCorner<3, 1>();
  }
  result.similarity = best;
  result.converged = all_levels_settled && best >= options.min_similarity;
  return result;
}

}  // namespace labelseg
