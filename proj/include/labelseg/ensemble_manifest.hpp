#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace labelseg {

struct EnsembleMember {
  int index = 0;
  std::uint64_t seed = 0;
  std::filesystem::path checkpoint;
  std::string split_id;
  bool ok = true;
  std::string error;  // set for failed members
};

struct EnsembleManifest {
  std::vector<EnsembleMember> members;
  int num_classes = 0;
  std::array<std::int64_t, 3> patch_shape{};
  std::uint64_t base_seed = 0;

  [[nodiscard]] std::vector<EnsembleMember> valid_members() const;
};

/// Paths are stored relative to the manifest's directory when possible.
void save_ensemble_manifest(const EnsembleManifest& m, const std::filesystem::path& path);
/// Relative checkpoint paths are resolved against the manifest's directory.
EnsembleManifest load_ensemble_manifest(const std::filesystem::path& path);

}  // namespace labelseg
