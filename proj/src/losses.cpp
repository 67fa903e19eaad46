#include "labelseg/losses.hpp"

#include <cmath>
#include <numeric>

namespace labelseg {

void LossConfig::validate() const {
  if (!(epsilon_dice > 0.0)) throw ValidationError("loss: epsilon_dice must be > 0");
  if (!(epsilon_log > 0.0)) throw ValidationError("loss: epsilon_log must be > 0");
  if (deep_supervision_weights.empty()) throw ValidationError("loss: no deep-supervision weights");
  double sum = 0.0;
  for (double w : deep_supervision_weights) {
    if (!(w >= 0.0)) throw ValidationError("loss: deep-supervision weights must be non-negative");
    sum += w;
  }
  if (std::abs(sum - 1.0) > 1e-9) throw ValidationError("loss: deep-supervision weights must sum to 1");
}

std::vector<double> halving_weights(int levels) {
  std::vector<double> w(static_cast<std::size_t>(levels));
  double sum = 0.0;
  for (int s = 0; s < levels; ++s) {
    w[static_cast<std::size_t>(s)] = std::ldexp(1.0, -s);
    sum += w[static_cast<std::size_t>(s)];
  }
  for (double& v : w) v /= sum;
  return w;
}

nlohmann::json to_json(const LossConfig& c) {
  return {{"epsilon_dice", c.epsilon_dice},
          {"epsilon_log", c.epsilon_log},
          {"deep_supervision_weights", c.deep_supervision_weights}};
}

LossConfig loss_config_from_json(const nlohmann::json& j, LossConfig c) {
  try {
    c.epsilon_dice = j.value("epsilon_dice", c.epsilon_dice);
    c.epsilon_log = j.value("epsilon_log", c.epsilon_log);
    if (j.contains("deep_supervision_weights")) {
      c.deep_supervision_weights = j.at("deep_supervision_weights").get<std::vector<double>>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("loss config: ") + e.what());
  }
  return c;
}

void PartialTarget::validate() const {
  if (mapping == nullptr) throw ValidationError("target has no label-set mapping");
  if (labels.size() != shape.size()) throw ShapeError("target label count does not match its shape");
  const int k = mapping->num_partial();
  for (auto v : labels) {
    if (v < 0 || v >= k) {
      throw ValidationError("target label " + std::to_string(v) + " outside mapping '" + mapping->name +
                            "' (K = " + std::to_string(k) + ")");
    }
  }
}

PartialTarget make_target(const LabelVolume& labels, const LabelSetMapping& mapping) {
  PartialTarget t{labels.shape, labels.data, &mapping};
  t.validate();
  return t;
}

namespace {

int check_inputs(std::span<const double> p, const PartialTarget& t) {
  t.validate();
  const int c = t.mapping->num_leaves();
  const std::size_t n = t.voxels();
  if (p.size() != static_cast<std::size_t>(c) * n) {
    throw ShapeError("loss: probabilities hold " + std::to_string(p.size()) + " values, expected " +
                     std::to_string(c) + " x " + std::to_string(n));
  }
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (int k = 0; k < c; ++k) s += p[static_cast<std::size_t>(k) * n + i];
    if (!(std::abs(s - 1.0) <= 1e-3)) {
      throw ValidationError("loss: probabilities at voxel " + std::to_string(i) + " sum to " +
                            std::to_string(s));
    }
  }
  return c;
}

}  // namespace

LossResult marginalized_cross_entropy(std::span<const double> p, const PartialTarget& t,
                                      double eps, bool want_grad) {
  const int c = check_inputs(p, t);
  const std::size_t n = t.voxels();
  LossResult r;
  if (want_grad) r.grad.assign(p.size(), 0.0);
  const double inv_n = 1.0 / static_cast<double>(n);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& leaves = t.mapping->partial_labels[static_cast<std::size_t>(t.labels[i])].leaves;
    double mass = 0.0;
    for (int leaf : leaves) mass += p[static_cast<std::size_t>(leaf) * n + i];
    total -= std::log(mass + eps);
    if (want_grad) {
      const double g = -inv_n / (mass + eps);
      for (int leaf : leaves) r.grad[static_cast<std::size_t>(leaf) * n + i] = g;
    }
  }
  (void)c;
  r.value = total * inv_n;
  return r;
}

LossResult leaf_dice(std::span<const double> p, const PartialTarget& t, double eps, bool want_grad) {
  const int c = check_inputs(p, t);
  const std::size_t n = t.voxels();
  // Singleton leaf of each voxel's annotation, or -1.
  std::vector<int> single(n);
  for (std::size_t i = 0; i < n; ++i) single[i] = t.mapping->singleton_leaf(t.labels[i]);

  LossResult r;
  if (want_grad) r.grad.assign(p.size(), 0.0);
  double mean_ratio = 0.0;
  for (int k = 0; k < c; ++k) {
    const double* pk = p.data() + static_cast<std::size_t>(k) * n;
    double inter = 0.0, gsum = 0.0, psq = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const bool g = single[i] == k;
      if (g) {
        inter += pk[i];
        gsum += 1.0;
      }
      psq += pk[i] * pk[i];
    }
    const double num = 2.0 * inter + eps;
    const double den = gsum + psq + eps;
    mean_ratio += num / den;
    if (want_grad) {
      double* gk = r.grad.data() + static_cast<std::size_t>(k) * n;
      const double scale = -1.0 / static_cast<double>(c);
      for (std::size_t i = 0; i < n; ++i) {
        const double dnum = single[i] == k ? 2.0 : 0.0;
        const double dden = 2.0 * pk[i];
        gk[i] = scale * (dnum * den - num * dden) / (den * den);
      }
    }
  }
  r.value = 1.0 - mean_ratio / static_cast<double>(c);
  return r;
}

LossResult combined_loss(std::span<const double> p, const PartialTarget& t, const LossConfig& config,
                         bool want_grad) {
  LossResult d = leaf_dice(p, t, config.epsilon_dice, want_grad);
  LossResult ce = marginalized_cross_entropy(p, t, config.epsilon_log, want_grad);
  LossResult r;
  r.value = d.value + ce.value;
  if (want_grad) {
    r.grad = std::move(d.grad);
    for (std::size_t i = 0; i < r.grad.size(); ++i) r.grad[i] += ce.grad[i];
  }
  return r;
}

PartialTarget downsample_target(const PartialTarget& t, int times) {
  if (times <= 0) return t;
  const std::int64_t f = std::int64_t{1} << times;
  const Shape3 in = t.shape;
  for (int a = 0; a < 3; ++a) {
    if (in[a] % f != 0) throw ShapeError("target shape not divisible by downsampling factor");
  }
  PartialTarget out;
  out.mapping = t.mapping;
  out.shape = {in.nx / f, in.ny / f, in.nz / f};
  out.labels.resize(out.shape.size());
  for (std::int64_t z = 0; z < out.shape.nz; ++z) {
    for (std::int64_t y = 0; y < out.shape.ny; ++y) {
      for (std::int64_t x = 0; x < out.shape.nx; ++x) {
        out.labels[out.shape.index(x, y, z)] = t.labels[in.index(x * f, y * f, z * f)];
      }
    }
  }
  return out;
}

DeepSupervisionResult deep_supervision_loss(const std::vector<std::span<const double>>& outputs,
                                            const PartialTarget& target, const LossConfig& config,
                                            bool want_grad) {
  config.validate();
  if (outputs.size() != config.deep_supervision_weights.size()) {
    throw ValidationError("deep supervision: " + std::to_string(outputs.size()) + " outputs but " +
                          std::to_string(config.deep_supervision_weights.size()) + " weights");
  }
  DeepSupervisionResult r;
  for (std::size_t s = 0; s < outputs.size(); ++s) {
    const double w = config.deep_supervision_weights[s];
    const PartialTarget ts = downsample_target(target, static_cast<int>(s));
    LossResult l = combined_loss(outputs[s], ts, config, want_grad);
    r.level_values.push_back(l.value);
    r.value += w * l.value;
    if (want_grad) {
      for (double& g : l.grad) g *= w;
      r.grads.push_back(std::move(l.grad));
    }
  }
  return r;
}

}  // namespace labelseg
