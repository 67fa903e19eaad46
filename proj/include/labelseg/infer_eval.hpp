#pragma once

#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "labelseg/ensemble_manifest.hpp"
#include "labelseg/labelset.hpp"
#include "labelseg/model.hpp"
#include "labelseg/preprocess.hpp"

namespace labelseg {

/// Mean over the 8 axis-flip combinations of flip^-1(net(flip(x))), accumulated in double in
/// a fixed order. With `enabled` false this is a single forward pass.
nn::Tensor tta_predict(const Network& net, const nn::Tensor& x, bool enabled = true);

struct LoadedMember {
  std::uint64_t seed = 0;
  std::filesystem::path path;
  std::shared_ptr<const Network> network;
};

/// Loads every valid member; throws IoError naming the first member that cannot be read.
std::vector<LoadedMember> load_ensemble(const EnsembleManifest& manifest);

/// Mean of tta_predict over members, summed in canonical (seed, path) order.
nn::Tensor ensemble_predict(std::vector<LoadedMember> members, const nn::Tensor& x, bool tta = true);

/// Argmax over channels; ties resolve to the lower class index.
LabelVolume argmax_labels(const ProbabilityMap& probs);

/// Undoes crop/pad, resamples each channel (trilinear) onto the native grid via the inverse
/// rigid transform, and takes the argmax.
LabelVolume postprocess(const ProbabilityMap& patch_probs, const PatchGeometry& geometry);
LabelVolume postprocess(const ProbabilityMap& patch_probs, const PatchGeometry& geometry,
                        const Shape3& native_shape, const Geometry& native_geometry);

ProbabilityMap to_probability_map(const nn::Tensor& t, const Geometry& geometry);

/// 2|A and B| / (|A| + |B|) over nonzero voxels; 1 if both are empty.
double dice_score(const LabelVolume& pred, const LabelVolume& gt);
/// Dice of the masks (label == cls) in both volumes.
double class_dice(const LabelVolume& pred, const LabelVolume& gt, int cls);

struct CaseEvaluation {
  std::string case_id;
  std::vector<double> dice;    // per evaluated class
  std::vector<bool> absent;    // class missing from both prediction and ground truth
};

struct ClassSummary {
  int class_id = 0;
  std::string name;
  double mean = 0.0;
  double sd = 0.0;  // population standard deviation
  int n = 0;
  int absent = 0;
};

struct EvaluationReport {
  std::vector<int> class_ids;
  std::vector<std::string> class_names;
  std::vector<CaseEvaluation> cases;
  std::vector<ClassSummary> summary;
  std::vector<std::string> unpaired;
};

struct EvaluationPair {
  std::string case_id;
  LabelVolume prediction;
  LabelVolume ground_truth;
};

/// Per-class Dice for every non-background class of the protocol.
EvaluationReport evaluate_cases(const std::vector<EvaluationPair>& pairs, const LabelProtocol& protocol);

/// dice_per_case.tsv and dice_summary.tsv in `dir`; unpaired cases are listed in both.
void write_report(const EvaluationReport& report, const std::filesystem::path& dir);

}  // namespace labelseg
