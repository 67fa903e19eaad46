#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "json.hpp"
#include "labelseg/augment.hpp"
#include "labelseg/ensemble_manifest.hpp"
#include "labelseg/losses.hpp"
#include "labelseg/manifest.hpp"
#include "labelseg/model.hpp"

namespace labelseg {

struct TrainConfig {
  double momentum = 0.99;
  bool nesterov = true;
  int batch_size = 2;
  double weight_decay = 3e-5;
  double lr_initial = 0.01;
  double lr_power = 0.9;
  int epochs = 2200;
  double split_fraction = 0.9;
  std::uint64_t seed = 0;
  /// Samples drawn per epoch; 0 means one per training case.
  int samples_per_epoch = 0;
  /// Compute the validation loss every this many epochs (and at the last epoch); 0 disables it.
  int validate_every = 1;

  void validate() const;
};

nlohmann::json to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig defaults = {});

/// lr_initial * (1 - epoch/epochs)^lr_power, for 0 <= epoch <= epochs.
double lr_schedule(int epoch, const TrainConfig& config);

struct DatasetSplit {
  std::vector<std::string> train;
  std::vector<std::string> validation;
  /// Hash of the sorted training ids.
  std::string id;
};

/// Random split with ceil(fraction * N) training cases (at most N - 1).
DatasetSplit split_dataset(const std::vector<std::string>& case_ids, double fraction, std::uint64_t seed);
DatasetSplit split_dataset(const DatasetManifest& manifest, double fraction, std::uint64_t seed);

/// SGD with (Nesterov) momentum and L2 weight decay added to the gradient.
class SgdOptimizer {
 public:
  SgdOptimizer(double momentum, bool nesterov, double weight_decay)
      : momentum_(momentum), nesterov_(nesterov), weight_decay_(weight_decay) {}
  void step(const std::vector<nn::Param*>& params, double lr);

 private:
  double momentum_;
  bool nesterov_;
  double weight_decay_;
  std::vector<std::vector<float>> velocity_;
};

/// A pre-processed case ready for training.
struct TrainingCase {
  std::string case_id;
  Volume3D image;
  LabelVolume target;
  const LabelSetMapping* mapping = nullptr;
};

std::vector<TrainingCase> load_training_cases(const DatasetManifest& manifest,
                                              const std::vector<std::string>& ids,
                                              const LabelRegistry& registry);

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  /// NaN when not computed.
  double validation_loss = 0.0;
  double lr = 0.0;
};

struct RunRecord {
  std::uint64_t seed = 0;
  std::vector<EpochRecord> epochs;
  std::vector<double> step_losses;
  std::vector<std::string> train_ids;
  std::vector<std::string> validation_ids;
  std::string split_id;
  std::filesystem::path checkpoint;
  bool ok = true;
  std::string error;
};

/// Line-oriented log (run_log.tsv) plus a JSON summary (run_summary.json) in `dir`.
void write_run_record(const RunRecord& record, const std::filesystem::path& dir);

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Runs the optimisation loop in place on `net`. Stops and marks the record failed on a
/// non-finite loss.
RunRecord train_on_cases(Network& net, const std::vector<TrainingCase>& train,
                         const std::vector<TrainingCase>& validation, const TrainConfig& config,
                         const LossConfig& loss, const AugmentConfig& augment,
                         const EpochCallback& on_epoch = {});

struct TrainJob {
  TrainConfig train;
  UNetConfig unet;
  LossConfig loss;
  AugmentConfig augment;
};

/// Validates every configuration section and their mutual consistency.
void validate_job(const TrainJob& job);

/// Splits, builds, trains, and writes checkpoint.lsck plus the run record into `output_dir`.
RunRecord train_model(const TrainJob& job, const DatasetManifest& manifest, const LabelRegistry& registry,
                      const std::filesystem::path& output_dir, const EpochCallback& on_epoch = {});

using MemberTrainer = std::function<RunRecord(const TrainJob&, const DatasetManifest&, const LabelRegistry&,
                                              const std::filesystem::path&)>;

/// Seed of ensemble member `index`.
std::uint64_t member_seed(std::uint64_t base_seed, int index);

/// Trains `members` independent models into output_dir/member_XX and writes
/// output_dir/ensemble.json. Failed members are recorded, not fatal.
EnsembleManifest train_ensemble(const TrainJob& job, int members, std::uint64_t base_seed,
                                const DatasetManifest& manifest, const LabelRegistry& registry,
                                const std::filesystem::path& output_dir, MemberTrainer trainer = {});

}  // namespace labelseg
