#include "labelseg/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>

namespace labelseg {

void TrainConfig::validate() const {
  if (!(split_fraction > 0.0 && split_fraction < 1.0)) {
    throw ValidationError("train: split_fraction must be in (0,1)");
  }
  if (epochs < 1) throw ValidationError("train: epochs must be >= 1");
  if (batch_size < 1) throw ValidationError("train: batch_size must be >= 1");
  if (samples_per_epoch < 0) throw ValidationError("train: samples_per_epoch must be >= 0");
  if (validate_every < 0) throw ValidationError("train: validate_every must be >= 0");
  if (!(lr_initial >= 0.0)) throw ValidationError("train: lr_initial must be >= 0");
  if (!(lr_power > 0.0)) throw ValidationError("train: lr_power must be > 0");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ValidationError("train: momentum must be in [0,1)");
  if (!(weight_decay >= 0.0)) throw ValidationError("train: weight_decay must be >= 0");
}

nlohmann::json to_json(const TrainConfig& c) {
  return {{"momentum", c.momentum},
          {"nesterov", c.nesterov},
          {"batch_size", c.batch_size},
          {"weight_decay", c.weight_decay},
          {"lr_initial", c.lr_initial},
          {"lr_power", c.lr_power},
          {"epochs", c.epochs},
          {"split_fraction", c.split_fraction},
          {"seed", c.seed},
          {"samples_per_epoch", c.samples_per_epoch},
          {"validate_every", c.validate_every}};
}

TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig c) {
  try {
    c.momentum = j.value("momentum", c.momentum);
    c.nesterov = j.value("nesterov", c.nesterov);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.lr_initial = j.value("lr_initial", c.lr_initial);
    c.lr_power = j.value("lr_power", c.lr_power);
    c.epochs = j.value("epochs", c.epochs);
    c.split_fraction = j.value("split_fraction", c.split_fraction);
    c.seed = j.value("seed", c.seed);
    c.samples_per_epoch = j.value("samples_per_epoch", c.samples_per_epoch);
    c.validate_every = j.value("validate_every", c.validate_every);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("train config: ") + e.what());
  }
  return c;
}

double lr_schedule(int epoch, const TrainConfig& config) {
  if (epoch < 0 || epoch > config.epochs) {
    throw ValidationError("lr_schedule: epoch " + std::to_string(epoch) + " outside [0, " +
                          std::to_string(config.epochs) + "]");
  }
  if (epoch == 0) return config.lr_initial;
  if (epoch == config.epochs) return 0.0;
  const double frac = 1.0 - static_cast<double>(epoch) / static_cast<double>(config.epochs);
  return config.lr_initial * std::pow(frac, config.lr_power);
}

namespace {

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

template <typename T>
void shuffle_in_place(std::vector<T>& v, std::mt19937_64& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(v[i - 1], v[j]);
  }
}

}  // namespace

DatasetSplit split_dataset(const std::vector<std::string>& ids, double fraction, std::uint64_t seed) {
  if (ids.size() < 2) throw ValidationError("split_dataset: need at least 2 cases, got " + std::to_string(ids.size()));
  if (!(fraction > 0.0 && fraction < 1.0)) throw ValidationError("split_dataset: fraction must be in (0,1)");
  const std::size_t n = ids.size();
  auto n_train = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(n) - 1e-9));
  n_train = std::clamp<std::size_t>(n_train, 1, n - 1);
  std::vector<std::string> order = ids;
  std::sort(order.begin(), order.end());
  std::mt19937_64 rng(splitmix64(seed));
  shuffle_in_place(order, rng);
  DatasetSplit s;
  s.train.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
  s.validation.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train), order.end());
  std::vector<std::string> sorted = s.train;
  std::sort(sorted.begin(), sorted.end());
  std::string joined;
  for (const auto& id : sorted) joined += id + '\n';
  s.id = hex64(fnv1a64(joined));
  return s;
}

DatasetSplit split_dataset(const DatasetManifest& manifest, double fraction, std::uint64_t seed) {
  std::vector<std::string> ids;
  for (const auto& e : manifest.entries) ids.push_back(e.case_id);
  return split_dataset(ids, fraction, seed);
}

void SgdOptimizer::step(const std::vector<nn::Param*>& params, double lr) {
  if (velocity_.empty()) {
    for (const auto* p : params) velocity_.emplace_back(p->size(), 0.0f);
  }
  if (velocity_.size() != params.size()) throw ValidationError("optimizer: parameter list changed");
  const auto mu = static_cast<float>(momentum_);
  const auto wd = static_cast<float>(weight_decay_);
  const auto flr = static_cast<float>(lr);
  for (std::size_t k = 0; k < params.size(); ++k) {
    nn::Param& p = *params[k];
    std::vector<float>& v = velocity_[k];
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const float g = p.grad[i] + wd * p.value[i];
      v[i] = mu * v[i] + g;
      const float update = nesterov_ ? g + mu * v[i] : v[i];
      p.value[i] -= flr * update;
    }
  }
}

std::vector<TrainingCase> load_training_cases(const DatasetManifest& manifest,
                                              const std::vector<std::string>& ids,
                                              const LabelRegistry& registry) {
  std::vector<TrainingCase> out;
  out.reserve(ids.size());
  for (const auto& id : ids) {
    const ManifestEntry& e = manifest.find(id);
    CaseData data = load_case(e, registry);
    if (!data.labels) throw ValidationError("training case '" + id + "' has no label file");
    TrainingCase tc;
    tc.case_id = id;
    tc.image = std::move(data.image);
    tc.target = std::move(*data.labels);
    tc.mapping = &registry.mapping(e.protocol_id);
    out.push_back(std::move(tc));
  }
  return out;
}

namespace {

std::vector<std::vector<double>> to_double(const std::vector<nn::Tensor>& probs) {
  std::vector<std::vector<double>> out;
  out.reserve(probs.size());
  for (const auto& t : probs) out.emplace_back(t.data.begin(), t.data.end());
  return out;
}

std::vector<std::span<const double>> spans(const std::vector<std::vector<double>>& v) {
  return {v.begin(), v.end()};
}

double case_loss(const Network& net, const TrainingCase& c, const LossConfig& loss) {
  const auto probs = to_double(net.forward(to_tensor(c.image)));
  PartialTarget target{c.target.shape, c.target.data, c.mapping};
  return deep_supervision_loss(spans(probs), target, loss, false).value;
}

}  // namespace

RunRecord train_on_cases(Network& net, const std::vector<TrainingCase>& train,
                         const std::vector<TrainingCase>& validation, const TrainConfig& config,
                         const LossConfig& loss, const AugmentConfig& augment, const EpochCallback& on_epoch) {
  config.validate();
  loss.validate();
  augment.validate();
  if (train.empty()) throw ValidationError("train: empty training split");
  RunRecord rec;
  rec.seed = config.seed;
  for (const auto& c : train) rec.train_ids.push_back(c.case_id);
  for (const auto& c : validation) rec.validation_ids.push_back(c.case_id);

  SgdOptimizer opt(config.momentum, config.nesterov, config.weight_decay);
  const auto params = net.params();
  const std::size_t samples =
      config.samples_per_epoch > 0 ? static_cast<std::size_t>(config.samples_per_epoch) : train.size();
  const auto batch = static_cast<std::size_t>(config.batch_size);
  Network::TrainCache cache;

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    const double lr = lr_schedule(epoch, config);
    net.set_mode(NetworkMode::kTrain);
    std::mt19937_64 order_rng(splitmix64(config.seed ^ splitmix64(static_cast<std::uint64_t>(epoch) + 1)));
    std::vector<std::size_t> order;
    while (order.size() < samples) {
      std::vector<std::size_t> round(train.size());
      for (std::size_t i = 0; i < round.size(); ++i) round[i] = i;
      shuffle_in_place(round, order_rng);
      order.insert(order.end(), round.begin(), round.end());
    }
    order.resize(samples);
    std::map<std::size_t, int> occurrences;

    double epoch_loss = 0.0;
    std::size_t epoch_steps = 0;
    for (std::size_t start = 0; start < samples; start += batch) {
      const std::size_t end = std::min(samples, start + batch);
      const double scale = 1.0 / static_cast<double>(end - start);
      net.zero_grad();
      double step_loss = 0.0;
      for (std::size_t s = start; s < end; ++s) {
        const TrainingCase& c = train[order[s]];
        std::uint64_t seed = sample_seed(config.seed, epoch, c.case_id);
        if (const int k = occurrences[order[s]]++; k > 0) seed = splitmix64(seed + static_cast<std::uint64_t>(k));
        std::mt19937_64 rng(seed);
        AugmentedPair aug = apply_augmentations(c.image, c.target, augment, rng);
        const auto probs = net.forward_train(to_tensor(aug.image), cache);
        const auto probs_d = to_double(probs);
        auto fail = [&](const std::string& what) {
          rec.ok = false;
          rec.error = what + " at epoch " + std::to_string(epoch) + ", step " +
                      std::to_string(rec.step_losses.size()) + " (case " + c.case_id + ")";
          return rec;
        };
        for (const auto& level : probs_d) {
          if (!std::all_of(level.begin(), level.end(), [](double v) { return std::isfinite(v); })) {
            return fail("non-finite network output");
          }
        }
        PartialTarget target{aug.target.shape, std::move(aug.target.data), c.mapping};
        const DeepSupervisionResult ds = deep_supervision_loss(spans(probs_d), target, loss, true);
        if (!std::isfinite(ds.value)) return fail("non-finite loss");
        step_loss += ds.value * scale;
        std::vector<nn::Tensor> dprobs;
        dprobs.reserve(probs.size());
        for (std::size_t l = 0; l < probs.size(); ++l) {
          nn::Tensor d(probs[l].channels, probs[l].shape);
          for (std::size_t i = 0; i < d.data.size(); ++i) d.data[i] = static_cast<float>(ds.grads[l][i] * scale);
          dprobs.push_back(std::move(d));
        }
        net.backward(cache, dprobs);
      }
      opt.step(params, lr);
      rec.step_losses.push_back(step_loss);
      epoch_loss += step_loss;
      ++epoch_steps;
    }

    EpochRecord er;
    er.epoch = epoch;
    er.lr = lr;
    er.train_loss = epoch_loss / static_cast<double>(epoch_steps);
    er.validation_loss = std::numeric_limits<double>::quiet_NaN();
    const bool last = epoch + 1 == config.epochs;
    if (!validation.empty() && config.validate_every > 0 &&
        ((epoch + 1) % config.validate_every == 0 || last)) {
      double v = 0.0;
      for (const auto& c : validation) v += case_loss(net, c, loss);
      er.validation_loss = v / static_cast<double>(validation.size());
    }
    if (!std::isfinite(er.train_loss)) {
      rec.ok = false;
      rec.error = "non-finite training loss at epoch " + std::to_string(epoch);
      return rec;
    }
    rec.epochs.push_back(er);
    if (on_epoch) on_epoch(er);
  }
  net.set_mode(NetworkMode::kEval);
  return rec;
}

void write_run_record(const RunRecord& r, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream log(dir / "run_log.tsv");
    if (!log) throw IoError("cannot write run log in " + dir.string());
    log << "epoch\ttrain_loss\tvalidation_loss\tlr\n";
    log.precision(17);
    for (const auto& e : r.epochs) {
      log << e.epoch << '\t' << e.train_loss << '\t';
      if (std::isfinite(e.validation_loss)) {
        log << e.validation_loss;
      } else {
        log << "nan";
      }
      log << '\t' << e.lr << '\n';
    }
  }
  nlohmann::json epochs = nlohmann::json::array();
  for (const auto& e : r.epochs) {
    nlohmann::json j = {{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"lr", e.lr}};
    j["validation_loss"] = std::isfinite(e.validation_loss) ? nlohmann::json(e.validation_loss) : nlohmann::json();
    epochs.push_back(std::move(j));
  }
  nlohmann::json doc = {{"status", r.ok ? "ok" : "failed"},
                        {"seed", r.seed},
                        {"split_id", r.split_id},
                        {"train_ids", r.train_ids},
                        {"validation_ids", r.validation_ids},
                        {"checkpoint", r.checkpoint.empty() ? "" : r.checkpoint.filename().string()},
                        {"steps", r.step_losses.size()},
                        {"epochs", epochs}};
  if (!r.ok) doc["error"] = r.error;
  std::ofstream out(dir / "run_summary.json");
  if (!out) throw IoError("cannot write run summary in " + dir.string());
  out << doc.dump(2) << '\n';
}

void validate_job(const TrainJob& job) {
  job.train.validate();
  job.unet.validate();
  job.loss.validate();
  job.augment.validate();
  if (static_cast<int>(job.loss.deep_supervision_weights.size()) != job.unet.deep_supervision_levels) {
    throw ValidationError("loss has " + std::to_string(job.loss.deep_supervision_weights.size()) +
                          " deep-supervision weights but the network has " +
                          std::to_string(job.unet.deep_supervision_levels) + " supervised levels");
  }
}

RunRecord train_model(const TrainJob& job, const DatasetManifest& manifest, const LabelRegistry& registry,
                      const std::filesystem::path& output_dir, const EpochCallback& on_epoch) {
  validate_job(job);
  validate_manifest(manifest, registry);
  for (const auto& e : manifest.entries) {
    const int leaves = registry.mapping(e.protocol_id).num_leaves();
    if (leaves != job.unet.num_classes) {
      throw ValidationError("case '" + e.case_id + "' protocol '" + e.protocol_id + "' has " +
                            std::to_string(leaves) + " leaf classes, network has " +
                            std::to_string(job.unet.num_classes));
    }
  }
  const DatasetSplit split = split_dataset(manifest, job.train.split_fraction, job.train.seed);
  const auto train_cases = load_training_cases(manifest, split.train, registry);
  const auto val_cases = load_training_cases(manifest, split.validation, registry);
  auto net = build_network(job.unet, job.train.seed);
  RunRecord rec = train_on_cases(*net, train_cases, val_cases, job.train, job.loss, job.augment, on_epoch);
  rec.split_id = split.id;
  if (rec.ok) {
    rec.checkpoint = output_dir / "checkpoint.lsck";
    std::filesystem::create_directories(output_dir);
    save_checkpoint(*net, {job.train.seed, static_cast<int>(rec.epochs.size()), split.id}, rec.checkpoint);
  }
  write_run_record(rec, output_dir);
  return rec;
}

std::uint64_t member_seed(std::uint64_t base_seed, int index) {
  return splitmix64(base_seed + 0x9E3779B97F4A7C15ULL * static_cast<std::uint64_t>(index + 1));
}

EnsembleManifest train_ensemble(const TrainJob& job, int members, std::uint64_t base_seed,
                                const DatasetManifest& manifest, const LabelRegistry& registry,
                                const std::filesystem::path& output_dir, MemberTrainer trainer) {
  if (members < 1) throw ValidationError("train_ensemble: need at least one member");
  validate_job(job);
  if (!trainer) {
    trainer = [](const TrainJob& j, const DatasetManifest& m, const LabelRegistry& r,
                 const std::filesystem::path& dir) { return train_model(j, m, r, dir); };
  }
  EnsembleManifest em;
  em.num_classes = job.unet.num_classes;
  em.patch_shape = job.unet.patch_shape;
  em.base_seed = base_seed;
  std::filesystem::create_directories(output_dir);
  for (int i = 0; i < members; ++i) {
    TrainJob mj = job;
    mj.train.seed = member_seed(base_seed, i);
    char name[32];
    std::snprintf(name, sizeof name, "member_%02d", i);
    EnsembleMember em_i;
    em_i.index = i;
    em_i.seed = mj.train.seed;
    try {
      RunRecord r = trainer(mj, manifest, registry, output_dir / name);
      em_i.ok = r.ok;
      em_i.error = r.error;
      em_i.checkpoint = r.checkpoint;
      em_i.split_id = r.split_id;
    } catch (const std::exception& e) {
      em_i.ok = false;
      em_i.error = e.what();
    }
    em.members.push_back(std::move(em_i));
  }
  save_ensemble_manifest(em, output_dir / "ensemble.json");
  return em;
}

}  // namespace labelseg
