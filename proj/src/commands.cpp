#include "labelseg/commands.hpp"

#include <fstream>
#include <map>
#include <set>

#include "labelseg/infer_eval.hpp"
#include "labelseg/nifti_io.hpp"

namespace labelseg {

namespace fs = std::filesystem;

namespace {

fs::path resolve(const nlohmann::json& paths, const char* key, const fs::path& base) {
  if (!paths.contains(key) || paths.at(key).is_null()) return {};
  fs::path p = paths.at(key).get<std::string>();
  if (p.empty() || p.is_absolute() || base.empty()) return p;
  return (base / p).lexically_normal();
}

const nlohmann::json& section(const nlohmann::json& j, const char* key) {
  static const nlohmann::json empty = nlohmann::json::object();
  if (!j.contains(key)) return empty;
  if (!j.at(key).is_object()) throw FormatError(std::string("run config: section '") + key + "' must be an object");
  return j.at(key);
}

void require_path(const fs::path& p, const char* what) {
  if (p.empty()) throw ValidationError(std::string("run config: paths.") + what + " is required");
  if (!fs::exists(p)) throw ValidationError(std::string("run config: paths.") + what + " does not exist: " + p.string());
}

std::string strip_nifti_ext(const std::string& name) {
  for (const char* ext : {".nii.gz", ".nii"}) {
    const std::string e = ext;
    if (name.size() > e.size() && name.compare(name.size() - e.size(), e.size(), e) == 0) {
      return name.substr(0, name.size() - e.size());
    }
  }
  return {};
}

std::map<std::string, fs::path> nifti_files_by_case(const fs::path& dir) {
  std::map<std::string, fs::path> out;
  if (!fs::is_directory(dir)) throw ValidationError("not a directory: " + dir.string());
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    std::string stem = strip_nifti_ext(entry.path().filename().string());
    if (stem.empty()) continue;
    for (const char* suffix : {"_pred", "_labels"}) {
      const std::string s = suffix;
      if (stem.size() > s.size() && stem.compare(stem.size() - s.size(), s.size(), s) == 0) {
        stem.resize(stem.size() - s.size());
        break;
      }
    }
    out[stem] = entry.path();
  }
  return out;
}

}  // namespace

RunConfig run_config_from_json(const nlohmann::json& j, const fs::path& base_dir) {
  if (!j.is_object()) throw FormatError("run config must be a JSON object");
  RunConfig c;
  try {
    const auto& paths = section(j, "paths");
    c.paths.manifest = resolve(paths, "manifest", base_dir);
    c.paths.atlas = resolve(paths, "atlas", base_dir);
    c.paths.output = resolve(paths, "output", base_dir);
    c.paths.labels = resolve(paths, "labels", base_dir);
    c.paths.ensemble = resolve(paths, "ensemble", base_dir);
    c.preprocess = preprocess_options_from_json(section(j, "preprocess"));
    c.job.unet = unet_config_from_json(section(j, "unet"));
    c.job.train = train_config_from_json(section(j, "train"));
    c.job.loss = loss_config_from_json(section(j, "loss"));
    if (!section(j, "loss").contains("deep_supervision_weights")) {
      c.job.loss.deep_supervision_weights = halving_weights(c.job.unet.deep_supervision_levels);
    }
    c.job.augment = augment_config_from_json(section(j, "augment"));
    const auto& inf = section(j, "inference");
    c.tta = inf.value("tta", c.tta);
    const auto& ens = section(j, "ensemble");
    c.members = ens.value("members", c.members);
    c.base_seed = ens.value("base_seed", c.base_seed);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("run config: ") + e.what());
  }
  return c;
}

nlohmann::json to_json(const RunConfig& c) {
  return {{"paths",
           {{"manifest", c.paths.manifest.string()},
            {"atlas", c.paths.atlas.string()},
            {"output", c.paths.output.string()},
            {"labels", c.paths.labels.string()},
            {"ensemble", c.paths.ensemble.string()}}},
          {"preprocess", to_json(c.preprocess)},
          {"unet", to_json(c.job.unet)},
          {"train", to_json(c.job.train)},
          {"loss", to_json(c.job.loss)},
          {"augment", to_json(c.job.augment)},
          {"inference", {{"tta", c.tta}}},
          {"ensemble", {{"members", c.members}, {"base_seed", c.base_seed}}}};
}

RunConfig load_run_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open run config: " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("run config " + path.string() + ": " + e.what());
  }
  return run_config_from_json(j, fs::absolute(path).parent_path());
}

LabelRegistry make_registry(const RunConfig& c) {
  LabelRegistry r = LabelRegistry::with_defaults();
  if (!c.paths.labels.empty()) r.load_file(c.paths.labels);
  return r;
}

CaseFiles case_files(const fs::path& dir, const std::string& id) {
  return {dir / (id + "_image.nii.gz"), dir / (id + "_mask.nii.gz"), dir / (id + "_labels.nii.gz"),
          dir / (id + "_geometry.json")};
}

int cmd_preprocess(const RunConfig& config, std::ostream& log) {
  config.preprocess.validate();
  require_path(config.paths.manifest, "manifest");
  if (config.paths.output.empty()) throw ValidationError("run config: paths.output is required");
  const LabelRegistry registry = make_registry(config);
  const DatasetManifest manifest = load_manifest(config.paths.manifest, registry);
  validate_manifest(manifest, registry);
  std::optional<AtlasCollection> atlas;
  if (!config.paths.atlas.empty()) {
    require_path(config.paths.atlas, "atlas");
    atlas = load_atlas(config.paths.atlas);
  }
  if (config.preprocess.registration == RegistrationChoice::kRigid && !atlas) {
    throw ValidationError("rigid registration requires paths.atlas");
  }
  for (const auto& e : manifest.entries) {
    if (!e.mask_path && !atlas) {
      throw ValidationError("case '" + e.case_id + "' has no mask and no atlas is configured");
    }
  }

  fs::create_directories(config.paths.output);
  DatasetManifest out_manifest;
  int failures = 0;
  for (const auto& e : manifest.entries) {
    try {
      CaseData data = load_case(e, registry);
      if (data.labels) data.labels->protocol_id = e.protocol_id;
      auto warn = [&](const std::string& m) { log << "warning: " << e.case_id << ": " << m << '\n'; };
      PreprocessedCase pc = preprocess_case(data.image, data.labels, data.mask, e.gestational_age,
                                            atlas ? &*atlas : nullptr, config.preprocess, warn);
      const CaseFiles f = case_files(config.paths.output, e.case_id);
      write_volume(pc.image, f.image);
      write_volume(pc.mask, f.mask);
      ManifestEntry oe;
      oe.case_id = e.case_id;
      oe.image_path = f.image;
      oe.mask_path = f.mask;
      oe.protocol_id = e.protocol_id;
      oe.gestational_age = e.gestational_age;
      if (pc.labels) {
        write_volume(*pc.labels, f.labels);
        oe.label_path = f.labels;
      }
      save_patch_geometry(pc.geometry, f.geometry);
      out_manifest.entries.push_back(std::move(oe));
      log << "preprocessed " << e.case_id << '\n';
    } catch (const std::exception& ex) {
      ++failures;
      log << "FAILED " << e.case_id << ": " << ex.what() << '\n';
    }
  }
  save_manifest(out_manifest, config.paths.output / kPreprocessedManifest);
  log << out_manifest.size() << " case(s) preprocessed, " << failures << " failed\n";
  return failures > 0 ? kExitPartial : kExitOk;
}

int cmd_train(const RunConfig& config, std::ostream& log) {
  validate_job(config.job);
  if (config.members < 1) throw ValidationError("run config: ensemble.members must be >= 1");
  require_path(config.paths.manifest, "manifest");
  if (config.paths.output.empty()) throw ValidationError("run config: paths.output is required");
  const LabelRegistry registry = make_registry(config);
  const DatasetManifest manifest = load_manifest(config.paths.manifest, registry);
  validate_manifest(manifest, registry);
  for (const auto& e : manifest.entries) {
    if (!e.label_path) throw ValidationError("training case '" + e.case_id + "' has no labels");
  }
  if (manifest.size() < 2) throw ValidationError("training needs at least 2 cases");

  fs::create_directories(config.paths.output);
  {
    std::ofstream cfg(config.paths.output / "run_config.json");
    cfg << to_json(config).dump(2) << '\n';
  }
  MemberTrainer trainer = [&log](const TrainJob& job, const DatasetManifest& m, const LabelRegistry& r,
                                 const fs::path& dir) {
    log << "training " << dir.filename().string() << " (seed " << job.train.seed << ")\n";
    return train_model(job, m, r, dir, [&log](const EpochRecord& e) {
      log << "  epoch " << e.epoch << " lr " << e.lr << " train_loss " << e.train_loss;
      if (std::isfinite(e.validation_loss)) log << " validation_loss " << e.validation_loss;
      log << '\n';
    });
  };
  const EnsembleManifest em =
      train_ensemble(config.job, config.members, config.base_seed, manifest, registry, config.paths.output, trainer);
  int failed = 0;
  for (const auto& m : em.members) {
    if (!m.ok) {
      ++failed;
      log << "member " << m.index << " FAILED: " << m.error << '\n';
    }
  }
  log << em.members.size() - static_cast<std::size_t>(failed) << " member(s) trained, " << failed << " failed\n";
  return failed > 0 ? kExitPartial : kExitOk;
}

int cmd_predict(const RunConfig& config, const std::optional<fs::path>& cases, std::ostream& log) {
  require_path(config.paths.ensemble, "ensemble");
  if (config.paths.output.empty()) throw ValidationError("run config: paths.output is required");
  fs::path manifest_path = cases ? *cases : config.paths.manifest;
  if (manifest_path.empty()) throw ValidationError("predict: no cases given (--cases or paths.manifest)");
  if (fs::is_directory(manifest_path)) manifest_path /= kPreprocessedManifest;
  if (!fs::exists(manifest_path)) throw ValidationError("predict: case manifest not found: " + manifest_path.string());
  const LabelRegistry registry = make_registry(config);
  const DatasetManifest manifest = load_manifest(manifest_path, registry);
  if (manifest.entries.empty()) throw ValidationError("predict: no cases in " + manifest_path.string());
  const EnsembleManifest em = load_ensemble_manifest(config.paths.ensemble);
  const auto members = load_ensemble(em);

  fs::create_directories(config.paths.output);
  int failures = 0;
  for (const auto& e : manifest.entries) {
    try {
      const fs::path sidecar = case_files(e.image_path.parent_path(), e.case_id).geometry;
      const PatchGeometry g = load_patch_geometry(sidecar);
      const Volume3D patch = read_volume(e.image_path);
      const Shape3 want{em.patch_shape[0], em.patch_shape[1], em.patch_shape[2]};
      if (!(patch.shape == want)) {
        throw ShapeError("patch " + to_string(patch.shape) + " does not match the network input " + to_string(want));
      }
      const nn::Tensor probs = ensemble_predict(members, to_tensor(patch), config.tta);
      LabelVolume pred = postprocess(to_probability_map(probs, patch.geometry), g);
      pred.protocol_id = "feta_full";
      write_volume(pred, config.paths.output / (e.case_id + "_pred.nii.gz"));
      log << "predicted " << e.case_id << '\n';
    } catch (const std::exception& ex) {
      ++failures;
      log << "FAILED " << e.case_id << ": " << ex.what() << '\n';
    }
  }
  log << manifest.size() - static_cast<std::size_t>(failures) << " case(s) predicted, " << failures << " failed\n";
  return failures > 0 ? kExitPartial : kExitOk;
}

int cmd_evaluate(const fs::path& predictions, const fs::path& ground_truth, const std::string& mapping,
                 const fs::path& output, const LabelRegistry& registry, std::ostream& log) {
  if (output.empty()) throw ValidationError("evaluate: an output directory is required");
  const LabelSetMapping& m = registry.mapping(mapping);
  const auto pred = nifti_files_by_case(predictions);
  const auto gt = nifti_files_by_case(ground_truth);
  if (pred.empty() && gt.empty()) throw ValidationError("evaluate: no cases found in either directory");

  std::vector<EvaluationPair> pairs;
  std::vector<std::string> unpaired;
  std::set<std::string> ids;
  for (const auto& [id, _] : pred) ids.insert(id);
  for (const auto& [id, _] : gt) ids.insert(id);
  for (const auto& id : ids) {
    const auto p = pred.find(id);
    const auto g = gt.find(id);
    if (p == pred.end()) {
      unpaired.push_back(id + " (no prediction)");
      continue;
    }
    if (g == gt.end()) {
      unpaired.push_back(id + " (no ground truth)");
      continue;
    }
    pairs.push_back({id, read_label_volume(p->second, mapping), read_label_volume(g->second, mapping)});
  }
  EvaluationReport report = evaluate_cases(pairs, *m.protocol);
  report.unpaired = unpaired;
  write_report(report, output);
  for (const auto& s : report.summary) {
    log << s.name << ": mean " << s.mean << " sd " << s.sd << " (N=" << s.n << ")\n";
  }
  for (const auto& u : unpaired) log << "unpaired: " << u << '\n';
  return unpaired.empty() ? kExitOk : kExitPartial;
}

}  // namespace labelseg
