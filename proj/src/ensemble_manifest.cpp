#include "labelseg/ensemble_manifest.hpp"

#include <fstream>

#include "json.hpp"
#include "labelseg/error.hpp"

namespace labelseg {

std::vector<EnsembleMember> EnsembleManifest::valid_members() const {
  std::vector<EnsembleMember> out;
  for (const auto& m : members) {
    if (m.ok) out.push_back(m);
  }
  return out;
}

void save_ensemble_manifest(const EnsembleManifest& m, const std::filesystem::path& path) {
  const auto dir = path.parent_path().empty() ? std::filesystem::path(".") : path.parent_path();
  nlohmann::json members = nlohmann::json::array();
  for (const auto& e : m.members) {
    nlohmann::json j = {{"index", e.index}, {"seed", e.seed}, {"status", e.ok ? "ok" : "failed"}};
    if (e.ok) {
      std::error_code ec;
      auto rel = std::filesystem::relative(e.checkpoint, dir, ec);
      j["checkpoint"] = (ec || rel.empty()) ? e.checkpoint.string() : rel.generic_string();
      j["split_id"] = e.split_id;
    } else {
      j["error"] = e.error;
    }
    members.push_back(std::move(j));
  }
  nlohmann::json doc = {{"format", "labelseg-ensemble"},
                        {"version", 1},
                        {"num_classes", m.num_classes},
                        {"patch_shape", m.patch_shape},
                        {"base_seed", m.base_seed},
                        {"members", members}};
  std::ofstream out(path);
  if (!out) throw IoError("cannot write ensemble manifest: " + path.string());
  out << doc.dump(2) << '\n';
  if (!out) throw IoError("failed writing ensemble manifest: " + path.string());
}

EnsembleManifest load_ensemble_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open ensemble manifest: " + path.string());
  EnsembleManifest m;
  try {
    const auto doc = nlohmann::json::parse(in);
    m.num_classes = doc.at("num_classes").get<int>();
    m.patch_shape = doc.at("patch_shape").get<std::array<std::int64_t, 3>>();
    m.base_seed = doc.value("base_seed", std::uint64_t{0});
    const auto dir = path.parent_path();
    for (const auto& j : doc.at("members")) {
      EnsembleMember e;
      e.index = j.at("index").get<int>();
      e.seed = j.at("seed").get<std::uint64_t>();
      e.ok = j.at("status").get<std::string>() == "ok";
      if (e.ok) {
        std::filesystem::path p = j.at("checkpoint").get<std::string>();
        e.checkpoint = p.is_absolute() ? p : dir / p;
        e.split_id = j.value("split_id", "");
      } else {
        e.error = j.value("error", "");
      }
      m.members.push_back(std::move(e));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("ensemble manifest " + path.string() + ": " + e.what());
  }
  return m;
}

}  // namespace labelseg
