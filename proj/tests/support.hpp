#pragma once

#include <cmath>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "labelseg/labelset.hpp"
#include "labelseg/volume.hpp"

namespace testing {

/// Scratch directory removed on destruction.
class TempDir {
 public:
  TempDir() {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() /
            ("labelseg_test_" + std::to_string(rd()) + "_" + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  [[nodiscard]] const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

/// Smooth asymmetric blob phantom: a sum of anisotropic Gaussians in voxel coordinates.
inline labelseg::Volume3D make_phantom(const labelseg::Shape3& s, const labelseg::Geometry& g,
                                       double spread = 1.0) {
  labelseg::Volume3D v(s, g, 0.0f);
  struct Blob {
    double cx, cy, cz, sx, sy, sz, amp;
  };
  const double nx = static_cast<double>(s.nx), ny = static_cast<double>(s.ny), nz = static_cast<double>(s.nz);
  const Blob blobs[] = {
      {0.50 * nx, 0.50 * ny, 0.50 * nz, 0.22 * nx, 0.18 * ny, 0.16 * nz, 1.0},
      {0.36 * nx, 0.60 * ny, 0.45 * nz, 0.08 * nx, 0.07 * ny, 0.10 * nz, 0.8},
      {0.64 * nx, 0.38 * ny, 0.58 * nz, 0.06 * nx, 0.10 * ny, 0.07 * nz, -0.5},
      {0.52 * nx, 0.70 * ny, 0.30 * nz, 0.05 * nx, 0.05 * ny, 0.05 * nz, 0.6},
  };
  for (std::int64_t z = 0; z < s.nz; ++z) {
    for (std::int64_t y = 0; y < s.ny; ++y) {
      for (std::int64_t x = 0; x < s.nx; ++x) {
        double val = 0.0;
        for (const auto& b : blobs) {
          const double dx = (x - b.cx) / (spread * b.sx), dy = (y - b.cy) / (spread * b.sy),
                       dz = (z - b.cz) / (spread * b.sz);
          val += b.amp * std::exp(-0.5 * (dx * dx + dy * dy + dz * dz));
        }
        v.at(x, y, z) = static_cast<float>(std::max(0.0, val));
      }
    }
  }
  return v;
}

/// Random per-voxel softmax probabilities, channel-major [C][N].
inline std::vector<double> random_probs(std::mt19937_64& rng, int c, std::size_t n, double scale = 2.0) {
  std::normal_distribution<double> d(0.0, scale);
  std::vector<double> p(static_cast<std::size_t>(c) * n);
  for (std::size_t i = 0; i < n; ++i) {
    double mx = -1e300;
    std::vector<double> z(static_cast<std::size_t>(c));
    for (auto& v : z) {
      v = d(rng);
      mx = std::max(mx, v);
    }
    double sum = 0.0;
    for (auto& v : z) {
      v = std::exp(v - mx);
      sum += v;
    }
    for (int k = 0; k < c; ++k) p[static_cast<std::size_t>(k) * n + i] = z[static_cast<std::size_t>(k)] / sum;
  }
  return p;
}

/// Four-leaf protocol with a partial mapping that merges leaves 2 and 3.
inline labelseg::LabelRegistry toy_registry() {
  labelseg::LabelRegistry r = labelseg::LabelRegistry::with_defaults();
  r.load_json(nlohmann::json::parse(R"({
    "protocols": [{"name": "toy", "background_id": 0,
                   "classes": [{"id": 0, "name": "bg"}, {"id": 1, "name": "a"},
                               {"id": 2, "name": "b"}, {"id": 3, "name": "c"}]}],
    "mappings": [{"name": "toy_full", "protocol": "toy",
                  "labels": [{"id": 0, "name": "bg", "leaves": [0]}, {"id": 1, "name": "a", "leaves": [1]},
                             {"id": 2, "name": "b", "leaves": [2]}, {"id": 3, "name": "c", "leaves": [3]}]},
                 {"name": "toy_partial", "protocol": "toy",
                  "labels": [{"id": 0, "name": "bg", "leaves": [0]}, {"id": 1, "name": "a", "leaves": [1]},
                             {"id": 2, "name": "bc", "leaves": [2, 3]}]}]
  })"));
  return r;
}

}  // namespace testing
