#pragma once

#include <filesystem>
#include <optional>
#include <ostream>
#include <string>

#include "json.hpp"
#include "labelseg/pipeline.hpp"
#include "labelseg/train.hpp"

namespace labelseg {

enum ExitCode : int {
  kExitOk = 0,
  kExitError = 1,       // unexpected I/O or runtime error
  kExitValidation = 2,  // bad config or inputs, nothing was written
  kExitPartial = 3,     // some cases or members failed
};

struct RunPaths {
  std::filesystem::path manifest;
  std::filesystem::path atlas;
  std::filesystem::path output;
  std::filesystem::path labels;    // optional label-set definition file
  std::filesystem::path ensemble;  // ensemble manifest used by predict
};

struct RunConfig {
  RunPaths paths;
  PreprocessOptions preprocess;
  TrainJob job;
  bool tta = true;
  int members = 10;
  std::uint64_t base_seed = 0;
};

/// Missing sections and keys take their defaults. Relative paths resolve against `base_dir`.
RunConfig run_config_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
nlohmann::json to_json(const RunConfig& c);
RunConfig load_run_config(const std::filesystem::path& path);

/// Label registry with the built-in mappings plus the optional definition file.
LabelRegistry make_registry(const RunConfig& c);

/// Output names of a pre-processed case inside a directory.
struct CaseFiles {
  std::filesystem::path image, mask, labels, geometry;
};
CaseFiles case_files(const std::filesystem::path& dir, const std::string& case_id);

/// Name of the manifest written by cmd_preprocess in its output directory.
inline constexpr const char* kPreprocessedManifest = "preprocessed.tsv";

int cmd_preprocess(const RunConfig& config, std::ostream& log);
int cmd_train(const RunConfig& config, std::ostream& log);
/// `cases` is a pre-processed manifest or a directory holding one; defaults to paths.manifest.
int cmd_predict(const RunConfig& config, const std::optional<std::filesystem::path>& cases,
                std::ostream& log);
/// Pairs prediction and ground-truth NIfTI files by case id (file stem without a trailing
/// "_pred"/"_labels"), evaluates the protocol's foreground classes, writes the report.
int cmd_evaluate(const std::filesystem::path& predictions, const std::filesystem::path& ground_truth,
                 const std::string& mapping, const std::filesystem::path& output, const LabelRegistry& registry,
                 std::ostream& log);

}  // namespace labelseg
