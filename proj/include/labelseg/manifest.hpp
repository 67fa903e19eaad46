#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "labelseg/labelset.hpp"
#include "labelseg/volume.hpp"

namespace labelseg {

/// One case of a dataset. Relative paths are resolved against the manifest's directory.
struct ManifestEntry {
  std::string case_id;
  std::filesystem::path image_path;
  std::optional<std::filesystem::path> label_path;
  std::optional<std::filesystem::path> mask_path;
  std::string protocol_id;
  std::optional<double> gestational_age;
};

struct DatasetManifest {
  std::vector<ManifestEntry> entries;

  [[nodiscard]] std::size_t size() const { return entries.size(); }
  [[nodiscard]] const ManifestEntry& find(const std::string& case_id) const;
};

/// Column names of the tab-separated manifest, in the order written by save_manifest.
inline constexpr const char* kManifestColumns[] = {"case_id", "image",    "labels",
                                                   "mask",    "protocol", "ga_weeks"};

/// Parses a manifest: tab-separated table with a header row (columns in any order,
/// "labels"/"mask"/"ga_weeks" optional; empty or "-" means absent), or a JSON array of
/// objects with the same keys when the file ends in ".json". Lines starting with '#' are
/// comments.
DatasetManifest load_manifest(const std::filesystem::path& path, const LabelRegistry& registry);

/// Writes the tab-separated form with absolute paths.
void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);

/// Throws ValidationError on duplicate case ids or unregistered protocols.
void validate_manifest(const DatasetManifest& manifest, const LabelRegistry& registry);

/// Image, labels, and mask of one case, geometry-checked against each other.
struct CaseData {
  std::string case_id;
  Volume3D image;
  std::optional<LabelVolume> labels;
  std::optional<LabelVolume> mask;
};

/// Reads the files of an entry; fails if labels or mask do not share the image grid, or if
/// a label id is outside the protocol's partial label range.
CaseData load_case(const ManifestEntry& entry, const LabelRegistry& registry);

}  // namespace labelseg
