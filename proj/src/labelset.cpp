#include "labelseg/labelset.hpp"

#include <algorithm>
#include <fstream>
#include <set>

#include "json.hpp"

namespace labelseg {

void LabelProtocol::validate() const {
  if (leaf_classes.empty()) throw ValidationError("protocol '" + name + "' has no classes");
  std::set<std::string> names;
  for (std::size_t i = 0; i < leaf_classes.size(); ++i) {
    if (leaf_classes[i].id != static_cast<int>(i)) {
      throw ValidationError("protocol '" + name + "': class ids must be 0..C-1 in order");
    }
    if (!names.insert(leaf_classes[i].name).second) {
      throw ValidationError("protocol '" + name + "': duplicate class name '" +
                            leaf_classes[i].name + "'");
    }
  }
  if (background_id < 0 || background_id >= num_classes()) {
    throw ValidationError("protocol '" + name + "': background id not among classes");
  }
}

LabelProtocol feta_protocol() {
  LabelProtocol p;
  p.name = "feta";
  p.background_id = 0;
  p.leaf_classes = {{0, "background"},
                    {1, "extra_axial_csf"},
                    {2, "cortical_gm"},
                    {3, "white_matter"},
                    {4, "ventricles"},
                    {5, "cerebellum"},
                    {6, "deep_gm"},
                    {7, "brainstem"}};
  return p;
}

int LabelSetMapping::singleton_leaf(int k) const {
  const auto& leaves = partial_labels.at(static_cast<std::size_t>(k)).leaves;
  return leaves.size() == 1 ? leaves.front() : -1;
}

std::vector<int> LabelSetMapping::leaf_to_partial() const {
  std::vector<int> out(static_cast<std::size_t>(num_leaves()), -1);
  for (const auto& pl : partial_labels) {
    for (int leaf : pl.leaves) out.at(static_cast<std::size_t>(leaf)) = pl.id;
  }
  return out;
}

void validate_partition(const LabelSetMapping& m) {
  if (!m.protocol) throw ValidationError("mapping '" + m.name + "' has no protocol");
  const int c = m.num_leaves();
  std::vector<int> owner(static_cast<std::size_t>(c), -1);
  for (std::size_t k = 0; k < m.partial_labels.size(); ++k) {
    const auto& pl = m.partial_labels[k];
    if (pl.id != static_cast<int>(k)) {
      throw ValidationError("mapping '" + m.name + "': partial ids must be 0..K-1 in order");
    }
    if (pl.leaves.empty()) {
      throw ValidationError("mapping '" + m.name + "': label set '" + pl.name + "' is empty");
    }
    for (int leaf : pl.leaves) {
      if (leaf < 0 || leaf >= c) {
        throw ValidationError("mapping '" + m.name + "': leaf " + std::to_string(leaf) +
                              " is not a class of protocol '" + m.protocol->name + "'");
      }
      auto& o = owner[static_cast<std::size_t>(leaf)];
      if (o != -1) {
        throw ValidationError("mapping '" + m.name + "': overlap, leaf " + std::to_string(leaf) +
                              " is in sets " + std::to_string(o) + " and " + std::to_string(k));
      }
      o = static_cast<int>(k);
    }
  }
  for (int leaf = 0; leaf < c; ++leaf) {
    if (owner[static_cast<std::size_t>(leaf)] == -1) {
      throw ValidationError("mapping '" + m.name + "': coverage, leaf " + std::to_string(leaf) +
                            " belongs to no set");
    }
  }
}

LabelSetMapping identity_mapping(std::shared_ptr<const LabelProtocol> protocol, std::string name) {
  LabelSetMapping m;
  m.name = std::move(name);
  for (const auto& leaf : protocol->leaf_classes) {
    m.partial_labels.push_back({leaf.id, leaf.name, {leaf.id}});
  }
  m.protocol = std::move(protocol);
  return m;
}

LabelSetMapping dhcp_partial_mapping(std::shared_ptr<const LabelProtocol> protocol) {
  LabelSetMapping m;
  m.name = "dhcp_partial";
  m.protocol = std::move(protocol);
  m.partial_labels = {{0, "background", {0}},
                      {1, "white_matter", {3}},
                      {2, "ventricles", {4}},
                      {3, "cerebellum", {5}},
                      {4, "other_brain", {1, 2, 6, 7}}};
  return m;
}

MarginalizationMatrix marginalization_matrix(const LabelSetMapping& mapping) {
  validate_partition(mapping);
  MarginalizationMatrix m;
  m.rows = mapping.num_partial();
  m.cols = mapping.num_leaves();
  m.phi.assign(static_cast<std::size_t>(m.rows) * static_cast<std::size_t>(m.cols), 0.0);
  for (const auto& pl : mapping.partial_labels) {
    for (int leaf : pl.leaves) {
      m.phi[static_cast<std::size_t>(pl.id) * static_cast<std::size_t>(m.cols) +
            static_cast<std::size_t>(leaf)] = 1.0;
    }
  }
  return m;
}

std::vector<double> marginalize_probs(std::span<const double> p, const MarginalizationMatrix& phi,
                                      std::size_t num_voxels) {
  const auto cols = static_cast<std::size_t>(phi.cols);
  if (p.size() != cols * num_voxels) {
    throw ShapeError("marginalize_probs: expected " + std::to_string(cols) + " x " +
                     std::to_string(num_voxels) + " probabilities, got " + std::to_string(p.size()));
  }
  std::vector<double> q(static_cast<std::size_t>(phi.rows) * num_voxels, 0.0);
  for (int k = 0; k < phi.rows; ++k) {
    double* qk = q.data() + static_cast<std::size_t>(k) * num_voxels;
    for (int c = 0; c < phi.cols; ++c) {
      if (phi(k, c) == 0.0) continue;
      const double* pc = p.data() + static_cast<std::size_t>(c) * num_voxels;
      for (std::size_t i = 0; i < num_voxels; ++i) qk[i] += phi(k, c) * pc[i];
    }
  }
  return q;
}

LabelRegistry LabelRegistry::with_defaults() {
  LabelRegistry r;
  auto feta = std::make_shared<const LabelProtocol>(feta_protocol());
  r.add_protocol(*feta);
  auto proto = r.protocol("feta");
  r.add_mapping(identity_mapping(proto, "feta_full"));
  r.add_mapping(dhcp_partial_mapping(proto));
  return r;
}

void LabelRegistry::add_protocol(LabelProtocol protocol) {
  protocol.validate();
  auto name = protocol.name;
  protocols_[name] = std::make_shared<const LabelProtocol>(std::move(protocol));
}

void LabelRegistry::add_mapping(LabelSetMapping mapping) {
  validate_partition(mapping);
  auto name = mapping.name;
  mappings_.insert_or_assign(name, std::move(mapping));
}

bool LabelRegistry::has_mapping(const std::string& name) const { return mappings_.count(name) > 0; }

const LabelSetMapping& LabelRegistry::mapping(const std::string& name) const {
  auto it = mappings_.find(name);
  if (it == mappings_.end()) throw ValidationError("unknown protocol id '" + name + "'");
  return it->second;
}

std::shared_ptr<const LabelProtocol> LabelRegistry::protocol(const std::string& name) const {
  auto it = protocols_.find(name);
  if (it == protocols_.end()) throw ValidationError("unknown leaf protocol '" + name + "'");
  return it->second;
}

std::vector<std::string> LabelRegistry::mapping_names() const {
  std::vector<std::string> names;
  for (const auto& [name, m] : mappings_) names.push_back(name);
  return names;
}

void LabelRegistry::load_json(const nlohmann::json& doc) {
  try {
    for (const auto& jp : doc.value("protocols", nlohmann::json::array())) {
      LabelProtocol p;
      p.name = jp.at("name").get<std::string>();
      p.background_id = jp.value("background_id", 0);
      for (const auto& jc : jp.at("classes")) {
        p.leaf_classes.push_back({jc.at("id").get<int>(), jc.at("name").get<std::string>()});
      }
      add_protocol(std::move(p));
    }
    for (const auto& jm : doc.value("mappings", nlohmann::json::array())) {
      LabelSetMapping m;
      m.name = jm.at("name").get<std::string>();
      m.protocol = protocol(jm.at("protocol").get<std::string>());
      for (const auto& jl : jm.at("labels")) {
        m.partial_labels.push_back({jl.at("id").get<int>(), jl.value("name", std::string{}),
                                    jl.at("leaves").get<std::vector<int>>()});
      }
      add_mapping(std::move(m));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("label definition: ") + e.what());
  }
}

void LabelRegistry::load_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open label definition file: " + path.string());
  nlohmann::json doc;
  try {
    in >> doc;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  load_json(doc);
}

}  // namespace labelseg
