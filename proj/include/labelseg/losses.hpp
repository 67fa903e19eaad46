#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "json.hpp"
#include "labelseg/labelset.hpp"
#include "labelseg/volume.hpp"

namespace labelseg {

struct LossConfig {
  double epsilon_dice = 1e-5;
  double epsilon_log = 1e-8;
  /// Weight of each supervised level, full resolution first. Proportional to 2^-s.
  std::vector<double> deep_supervision_weights = {8.0 / 15, 4.0 / 15, 2.0 / 15, 1.0 / 15};

  void validate() const;
};

/// Normalized weights w_s proportional to 2^-s for `levels` levels.
std::vector<double> halving_weights(int levels);

nlohmann::json to_json(const LossConfig& c);
LossConfig loss_config_from_json(const nlohmann::json& j, LossConfig defaults = {});

/// Per-voxel partial label ids interpreted through a label-set mapping.
struct PartialTarget {
  Shape3 shape;
  std::vector<std::int32_t> labels;
  const LabelSetMapping* mapping = nullptr;

  [[nodiscard]] std::size_t voxels() const { return labels.size(); }
  /// Throws ValidationError if any id is outside 0..K-1 or sizes disagree.
  void validate() const;
};

PartialTarget make_target(const LabelVolume& labels, const LabelSetMapping& mapping);

struct LossResult {
  double value = 0.0;
  /// dL/dp, channel-major like the probabilities. Empty when not requested.
  std::vector<double> grad;
};

// Probabilities are channel-major: p[c * N + i] with C = mapping leaf count.

/// Mean over voxels of -log(sum_{c in S(g_i)} p_ic + eps).
LossResult marginalized_cross_entropy(std::span<const double> p, const PartialTarget& target,
                                      double epsilon_log, bool want_grad = true);

/// 1 - mean_c (2 sum_i gs_ic p_ic + eps) / (sum_i gs_ic + sum_i p_ic^2 + eps), where gs_ic = 1
/// iff voxel i is annotated with the singleton set {c}.
LossResult leaf_dice(std::span<const double> p, const PartialTarget& target, double epsilon_dice,
                     bool want_grad = true);

/// leaf_dice + marginalized_cross_entropy.
LossResult combined_loss(std::span<const double> p, const PartialTarget& target,
                         const LossConfig& config, bool want_grad = true);

/// Nearest-neighbour target downsampling by 2^times: voxel j takes voxel j * 2^times.
PartialTarget downsample_target(const PartialTarget& target, int times);

struct DeepSupervisionResult {
  double value = 0.0;
  std::vector<double> level_values;
  std::vector<std::vector<double>> grads;  // per level, already weighted
};

/// sum_s w_s * combined_loss(outputs[s], downsample(target, s)).
DeepSupervisionResult deep_supervision_loss(const std::vector<std::span<const double>>& outputs,
                                            const PartialTarget& target, const LossConfig& config,
                                            bool want_grad = true);

}  // namespace labelseg
