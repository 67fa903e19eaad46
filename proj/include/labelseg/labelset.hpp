#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "labelseg/error.hpp"

namespace labelseg {

struct LeafClass {
  int id = 0;
  std::string name;
};

/// Finest-grained classes of an annotation scheme. Ids are 0..C-1.
struct LabelProtocol {
  std::string name;
  std::vector<LeafClass> leaf_classes;
  int background_id = 0;

  [[nodiscard]] int num_classes() const { return static_cast<int>(leaf_classes.size()); }
  /// Throws ValidationError on non-contiguous ids, duplicate names, or a missing background.
  void validate() const;
};

/// The canonical fetal brain protocol: background plus seven tissues.
LabelProtocol feta_protocol();

/// One annotated label of a partial protocol and the leaves it stands for.
struct PartialLabel {
  int id = 0;
  std::string name;
  std::vector<int> leaves;
};

/// Partition of a protocol's leaf classes into annotated label-sets.
///
/// A label map written under this mapping stores partial ids 0..K-1; voxel value k
/// means "one of the leaves in partial_labels[k].leaves".
struct LabelSetMapping {
  std::string name;
  std::shared_ptr<const LabelProtocol> protocol;
  std::vector<PartialLabel> partial_labels;

  [[nodiscard]] int num_partial() const { return static_cast<int>(partial_labels.size()); }
  [[nodiscard]] int num_leaves() const { return protocol ? protocol->num_classes() : 0; }
  /// Leaf id if partial label k is a singleton, otherwise -1.
  [[nodiscard]] int singleton_leaf(int k) const;
  /// For every leaf, the partial label containing it.
  [[nodiscard]] std::vector<int> leaf_to_partial() const;
};

/// Throws ValidationError naming the offending leaf on overlap, gaps, or bad ids.
void validate_partition(const LabelSetMapping& mapping);

/// Every leaf labelled by itself.
LabelSetMapping identity_mapping(std::shared_ptr<const LabelProtocol> protocol, std::string name);

/// dHCP-style: background, white matter, ventricles, cerebellum, and the rest of the brain.
LabelSetMapping dhcp_partial_mapping(std::shared_ptr<const LabelProtocol> protocol);

/// K x C binary matrix, row k is the indicator of set k. Stored row-major.
struct MarginalizationMatrix {
  int rows = 0;  // K
  int cols = 0;  // C
  std::vector<double> phi;

  [[nodiscard]] double operator()(int k, int c) const {
    return phi[static_cast<std::size_t>(k) * static_cast<std::size_t>(cols) + static_cast<std::size_t>(c)];
  }
};

MarginalizationMatrix marginalization_matrix(const LabelSetMapping& mapping);

/// q = phi * p per voxel. Both maps are channel-major: p[c * num_voxels + i].
std::vector<double> marginalize_probs(std::span<const double> p, const MarginalizationMatrix& phi,
                                      std::size_t num_voxels);

/// Named protocols and mappings. Ships feta_full and dhcp_partial by default.
class LabelRegistry {
 public:
  static LabelRegistry with_defaults();

  /// Adds the protocols and mappings of a JSON definition file (replacing same-named entries).
  void load_file(const std::filesystem::path& path);
  void load_json(const nlohmann::json& doc);

  void add_protocol(LabelProtocol protocol);
  void add_mapping(LabelSetMapping mapping);

  [[nodiscard]] bool has_mapping(const std::string& name) const;
  [[nodiscard]] const LabelSetMapping& mapping(const std::string& name) const;
  [[nodiscard]] std::shared_ptr<const LabelProtocol> protocol(const std::string& name) const;
  [[nodiscard]] std::vector<std::string> mapping_names() const;

 private:
  std::map<std::string, std::shared_ptr<const LabelProtocol>> protocols_;
  std::map<std::string, LabelSetMapping> mappings_;
};

}  // namespace labelseg
