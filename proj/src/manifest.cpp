#include "labelseg/manifest.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "json.hpp"
#include "labelseg/nifti_io.hpp"

namespace labelseg {
namespace {

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream is(line);
  while (std::getline(is, cell, '\t')) out.push_back(cell);
  if (!line.empty() && line.back() == '\t') out.emplace_back();
  return out;
}

std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \r\n");
  return s.substr(b, e - b + 1);
}

bool absent(const std::string& v) { return v.empty() || v == "-"; }

std::filesystem::path resolve(const std::filesystem::path& base, const std::string& p) {
  std::filesystem::path path(p);
  return path.is_absolute() ? path : base / path;
}

ManifestEntry entry_from_fields(const std::map<std::string, std::string>& f,
                                const std::filesystem::path& base, const std::string& where) {
  auto required = [&](const char* key) {
    auto it = f.find(key);
    if (it == f.end() || absent(it->second)) {
      throw FormatError(where + ": missing required field '" + key + "'");
    }
    return it->second;
  };
  auto optional_field = [&](const char* key) -> std::optional<std::string> {
    auto it = f.find(key);
    if (it == f.end() || absent(it->second)) return std::nullopt;
    return it->second;
  };
  ManifestEntry e;
  e.case_id = required("case_id");
  e.image_path = resolve(base, required("image"));
  e.protocol_id = required("protocol");
  if (auto v = optional_field("labels")) e.label_path = resolve(base, *v);
  if (auto v = optional_field("mask")) e.mask_path = resolve(base, *v);
  if (auto v = optional_field("ga_weeks")) {
    try {
      std::size_t used = 0;
      e.gestational_age = std::stod(*v, &used);
      if (used != v->size()) throw std::invalid_argument("trailing characters");
    } catch (const std::exception&) {
      throw FormatError(where + ": ga_weeks is not a number: '" + *v + "'");
    }
  }
  return e;
}

DatasetManifest parse_tsv(std::istream& in, const std::filesystem::path& path) {
  const auto base = path.parent_path();
  DatasetManifest m;
  std::vector<std::string> header;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty() || trim(line).front() == '#') continue;
    auto cells = split_tabs(line);
    for (auto& c : cells) c = trim(c);
    if (header.empty()) {
      header = cells;
      continue;
    }
    const std::string where = path.string() + ":" + std::to_string(lineno);
    if (cells.size() > header.size()) throw FormatError(where + ": more cells than header columns");
    std::map<std::string, std::string> fields;
    for (std::size_t i = 0; i < cells.size(); ++i) fields[header[i]] = cells[i];
    m.entries.push_back(entry_from_fields(fields, base, where));
  }
  if (header.empty()) throw FormatError(path.string() + ": manifest has no header row");
  return m;
}

DatasetManifest parse_json(std::istream& in, const std::filesystem::path& path) {
  nlohmann::json doc;
  try {
    in >> doc;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  if (doc.is_object() && doc.contains("cases")) doc = doc["cases"];
  if (!doc.is_array()) throw FormatError(path.string() + ": expected an array of cases");
  DatasetManifest m;
  for (std::size_t i = 0; i < doc.size(); ++i) {
    std::map<std::string, std::string> fields;
    for (const auto& [k, v] : doc[i].items()) {
      fields[k] = v.is_string() ? v.get<std::string>() : v.dump();
    }
    m.entries.push_back(
        entry_from_fields(fields, path.parent_path(), path.string() + "[" + std::to_string(i) + "]"));
  }
  return m;
}

}  // namespace

const ManifestEntry& DatasetManifest::find(const std::string& case_id) const {
  auto it = std::find_if(entries.begin(), entries.end(),
                         [&](const ManifestEntry& e) { return e.case_id == case_id; });
  if (it == entries.end()) throw ValidationError("unknown case id '" + case_id + "'");
  return *it;
}

void validate_manifest(const DatasetManifest& manifest, const LabelRegistry& registry) {
  std::set<std::string> seen;
  for (const auto& e : manifest.entries) {
    if (!seen.insert(e.case_id).second) {
      throw ValidationError("duplicate case id '" + e.case_id + "' in manifest");
    }
    if (!registry.has_mapping(e.protocol_id)) {
      throw ValidationError("case '" + e.case_id + "': unknown protocol id '" + e.protocol_id + "'");
    }
  }
}

DatasetManifest load_manifest(const std::filesystem::path& path, const LabelRegistry& registry) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest: " + path.string());
  DatasetManifest m = path.extension() == ".json" ? parse_json(in, path) : parse_tsv(in, path);
  validate_manifest(m, registry);
  return m;
}

void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write manifest: " + path.string());
  out << "case_id\timage\tlabels\tmask\tprotocol\tga_weeks\n";
  auto opt_path = [](const std::optional<std::filesystem::path>& p) {
    return p ? std::filesystem::absolute(*p).string() : std::string("-");
  };
  for (const auto& e : manifest.entries) {
    std::ostringstream ga;
    if (e.gestational_age) {
      ga.precision(17);
      ga << *e.gestational_age;
    } else {
      ga << "-";
    }
    out << e.case_id << '\t' << std::filesystem::absolute(e.image_path).string() << '\t'
        << opt_path(e.label_path) << '\t' << opt_path(e.mask_path) << '\t' << e.protocol_id << '\t'
        << ga.str() << '\n';
  }
  if (!out) throw IoError("write failed: " + path.string());
}

CaseData load_case(const ManifestEntry& entry, const LabelRegistry& registry) {
  CaseData c;
  c.case_id = entry.case_id;
  c.image = read_volume(entry.image_path);
  if (entry.label_path) {
    c.labels = read_label_volume(*entry.label_path, entry.protocol_id);
    require_same_grid(c.image, *c.labels, "case '" + entry.case_id + "' labels");
    const int k = registry.mapping(entry.protocol_id).num_partial();
    for (auto v : c.labels->data) {
      if (v >= k) {
        throw ValidationError("case '" + entry.case_id + "': label id " + std::to_string(v) +
                              " not declared by protocol '" + entry.protocol_id + "'");
      }
    }
  }
  if (entry.mask_path) {
    c.mask = binarize(read_label_volume(*entry.mask_path));
    require_same_grid(c.image, *c.mask, "case '" + entry.case_id + "' mask");
  }
  return c;
}

}  // namespace labelseg
