#include <cmath>
#include <fstream>
#include <limits>
#include <set>

#include "doctest.h"
#include "labelseg/train.hpp"
#include "support.hpp"
#include "toy_data.hpp"

using namespace labelseg;

namespace {

std::vector<std::string> ids(int n) {
  std::vector<std::string> out;
  for (int i = 0; i < n; ++i) out.push_back("case" + std::to_string(1000 + i));
  return out;
}

std::size_t count_lines(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::size_t n = 0;
  for (std::string line; std::getline(in, line);) ++n;
  return n;
}

}  // namespace

TEST_CASE("polynomial learning rate schedule") {
  const TrainConfig cfg;
  CHECK(lr_schedule(0, cfg) == 0.01);
  CHECK(lr_schedule(cfg.epochs, cfg) == 0.0);
  CHECK(lr_schedule(1100, cfg) == doctest::Approx(0.01 * std::pow(0.5, 0.9)).epsilon(1e-15));
  for (int e = 1; e <= cfg.epochs; ++e) REQUIRE(lr_schedule(e, cfg) < lr_schedule(e - 1, cfg));
  CHECK_THROWS_AS((void)lr_schedule(-1, cfg), ValidationError);
  CHECK_THROWS_AS((void)lr_schedule(cfg.epochs + 1, cfg), ValidationError);
}

TEST_CASE("dataset split sizes and determinism") {
  const auto a = split_dataset(ids(10), 0.9, 5);
  CHECK(a.train.size() == 9);
  CHECK(a.validation.size() == 1);
  const auto b = split_dataset(ids(10), 0.9, 5);
  CHECK(a.train == b.train);
  CHECK(a.validation == b.validation);
  CHECK(a.id == b.id);

  const auto full_size = split_dataset(ids(223), 0.9, 0);
  CHECK(full_size.train.size() == 201);
  CHECK(full_size.validation.size() == 22);

  // Partition of the input, independent of input order.
  std::set<std::string> all(full_size.train.begin(), full_size.train.end());
  for (const auto& v : full_size.validation) CHECK(all.insert(v).second);
  auto reversed = ids(223);
  CHECK(all == std::set<std::string>(reversed.begin(), reversed.end()));
  std::reverse(reversed.begin(), reversed.end());
  CHECK(split_dataset(reversed, 0.9, 0).validation == full_size.validation);

  CHECK(split_dataset(ids(2), 0.9, 0).train.size() == 1);
  CHECK(split_dataset(ids(4), 0.1, 0).train.size() == 1);
  CHECK_THROWS_AS(split_dataset(ids(1), 0.9, 0), ValidationError);
}

TEST_CASE("different seeds give different memberships") {
  const auto base = split_dataset(ids(30), 0.9, 0);
  std::set<std::string> distinct;
  int differ = 0;
  for (std::uint64_t s = 1; s <= 100; ++s) {
    const auto sp = split_dataset(ids(30), 0.9, s);
    REQUIRE(sp.train.size() == base.train.size());
    if (sp.validation != base.validation) ++differ;
    distinct.insert(sp.id);
  }
  CHECK(differ >= 95);
  CHECK(distinct.size() >= 95);
}

TEST_CASE("sgd updates") {
  nn::Param p;
  p.name = "w";
  p.value = {1.0f, -2.0f};
  p.grad = {0.5f, 0.25f};
  SgdOptimizer frozen(0.99, true, 3e-5);
  for (int k = 0; k < 3; ++k) frozen.step({&p}, 0.0);
  CHECK(p.value == std::vector<float>{1.0f, -2.0f});

  // Nesterov reference: g = grad + wd w; v = mu v + g; w -= lr (g + mu v).
  const double mu = 0.9, wd = 0.1, lr = 0.05;
  SgdOptimizer nesterov(mu, true, wd);
  double w = 1.0, v = 0.0;
  p.value = {1.0f};
  for (int k = 0; k < 3; ++k) {
    const double grad = 0.5 - 0.1 * k;
    p.grad = {static_cast<float>(grad)};
    nesterov.step({&p}, lr);
    const double g = grad + wd * w;
    v = mu * v + g;
    w -= lr * (g + mu * v);
    CHECK(p.value[0] == doctest::Approx(w).epsilon(1e-6));
  }

  SgdOptimizer classic(mu, false, 0.0);
  p.value = {1.0f};
  w = 1.0;
  v = 0.0;
  for (int k = 0; k < 3; ++k) {
    p.grad = {0.5f};
    classic.step({&p}, lr);
    v = mu * v + 0.5;
    w -= lr * v;
    CHECK(p.value[0] == doctest::Approx(w).epsilon(1e-6));
  }
}

TEST_CASE("training is deterministic and records every epoch") {
  const Shape3 s{16, 16, 16};
  const auto reg = testing::toy_registry();
  const auto cases = testing::training_cases(testing::make_toy_cases(4, s), reg);
  const std::vector<TrainingCase> train(cases.begin(), cases.begin() + 3);
  const std::vector<TrainingCase> val(cases.begin() + 3, cases.end());
  auto job = testing::toy_job(s);
  job.train.epochs = 3;
  job.train.seed = 17;
  job.augment = AugmentConfig{};

  auto run = [&] {
    auto net = build_network(job.unet, job.train.seed);
    std::vector<int> seen;
    auto rec = train_on_cases(*net, train, val, job.train, job.loss, job.augment,
                              [&](const EpochRecord& e) { seen.push_back(e.epoch); });
    CHECK(seen == std::vector<int>{0, 1, 2});
    return std::make_pair(std::move(rec), std::move(net));
  };
  const auto [r1, n1] = run();
  const auto [r2, n2] = run();
  REQUIRE(r1.ok);
  CHECK(r1.step_losses.size() == 6);  // 3 epochs x ceil(3 / 2) steps
  CHECK(r1.step_losses == r2.step_losses);
  for (std::size_t i = 0; i < r1.epochs.size(); ++i) {
    CHECK(r1.epochs[i].epoch == static_cast<int>(i));
    CHECK(r1.epochs[i].lr == lr_schedule(static_cast<int>(i), job.train));
    CHECK(std::isfinite(r1.epochs[i].validation_loss));
  }
  const auto p1 = n1->params();
  const auto p2 = n2->params();
  for (std::size_t i = 0; i < p1.size(); ++i) CHECK(p1[i]->value == p2[i]->value);
  CHECK(n1->mode() == NetworkMode::kEval);

  testing::TempDir tmp;
  write_run_record(r1, tmp.path());
  CHECK(count_lines(tmp / "run_log.tsv") == 4);
  std::ifstream in(tmp / "run_summary.json");
  const auto j = nlohmann::json::parse(in);
  CHECK(j.at("status") == "ok");
  CHECK(j.at("epochs").size() == 3);

  job.train.validate_every = 0;
  auto net = build_network(job.unet, 1);
  const auto no_val = train_on_cases(*net, train, val, job.train, job.loss, job.augment);
  CHECK(std::isnan(no_val.epochs[0].validation_loss));
}

TEST_CASE("loss on a fixed batch decreases over ten steps") {
  const Shape3 s{16, 16, 16};
  const auto reg = testing::toy_registry();
  const auto cases = testing::training_cases(testing::make_toy_cases(2, s), reg);
  auto job = testing::toy_job(s);
  job.train.epochs = 10;
  job.train.batch_size = 2;
  job.train.momentum = 0.9;
  job.train.lr_initial = 0.05;
  int decreased = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    job.train.seed = seed;
    auto net = build_network(job.unet, seed);
    const auto rec = train_on_cases(*net, cases, {}, job.train, job.loss, job.augment);
    REQUIRE(rec.ok);
    REQUIRE(rec.step_losses.size() == 10);
    if (rec.step_losses.back() < rec.step_losses.front()) ++decreased;
  }
  CHECK(decreased >= 9);
}

TEST_CASE("non-finite values abort with a diagnostic record") {
  const Shape3 s{16, 16, 16};
  const auto reg = testing::toy_registry();
  auto cases = testing::training_cases(testing::make_toy_cases(2, s), reg);
  cases[1].image.data[100] = std::numeric_limits<float>::quiet_NaN();
  auto job = testing::toy_job(s);
  auto net = build_network(job.unet, 0);
  const auto rec = train_on_cases(*net, cases, {}, job.train, job.loss, job.augment);
  CHECK_FALSE(rec.ok);
  CHECK(rec.error.find("toy1") != std::string::npos);
  CHECK(rec.epochs.empty());

  CHECK_THROWS_AS(train_on_cases(*net, {}, {}, job.train, job.loss, job.augment), ValidationError);
}

TEST_CASE("train_model writes a loadable checkpoint") {
  const Shape3 s{16, 16, 16};
  testing::TempDir tmp;
  const auto reg = testing::toy_registry();
  const auto manifest = testing::write_toy_dataset(tmp / "data", testing::make_toy_cases(4, s));
  auto job = testing::toy_job(s);
  job.train.seed = 3;
  const auto rec = train_model(job, manifest, reg, tmp / "run");
  REQUIRE(rec.ok);
  CHECK(rec.train_ids.size() == 3);
  CHECK(rec.validation_ids.size() == 1);
  CHECK(rec.split_id == split_dataset(manifest, 0.75, 3).id);
  const auto ck = load_checkpoint(rec.checkpoint, &job.unet);
  CHECK(ck.info.seed == 3);
  CHECK(ck.info.epoch == 2);
  CHECK(ck.info.split_id == rec.split_id);
  CHECK(std::filesystem::exists(tmp / "run" / "run_log.tsv"));

  auto bad = job;
  bad.unet.num_classes = 8;
  CHECK_THROWS_AS(train_model(bad, manifest, reg, tmp / "bad"), ValidationError);
  bad = job;
  bad.loss.deep_supervision_weights = halving_weights(3);
  CHECK_THROWS_AS(validate_job(bad), ValidationError);
}

TEST_CASE("ensemble training") {
  const Shape3 s{16, 16, 16};
  testing::TempDir tmp;
  const auto reg = testing::toy_registry();
  const auto manifest = testing::write_toy_dataset(tmp / "data", testing::make_toy_cases(8, s));
  auto job = testing::toy_job(s);
  job.train.epochs = 1;

  const auto two = train_ensemble(job, 2, 11, manifest, reg, tmp / "ens2");
  REQUIRE(two.members.size() == 2);
  CHECK(two.valid_members().size() == 2);
  CHECK(two.members[0].split_id != two.members[1].split_id);
  CHECK(two.members[0].seed == member_seed(11, 0));
  for (const auto& m : two.members) CHECK(std::filesystem::exists(m.checkpoint));
  const auto loaded = load_ensemble_manifest(tmp / "ens2" / "ensemble.json");
  CHECK(loaded.members.size() == 2);
  CHECK(loaded.members[1].checkpoint == two.members[1].checkpoint);
  CHECK(loaded.num_classes == 4);

  // Cheap stand-in trainer: member 3 diverges, member 5 throws.
  MemberTrainer fake = [&](const TrainJob& j, const DatasetManifest& m, const LabelRegistry&,
                           const std::filesystem::path& dir) {
    if (j.train.seed == member_seed(0, 5)) throw IoError("disk full");
    RunRecord r;
    r.seed = j.train.seed;
    r.split_id = split_dataset(m, j.train.split_fraction, j.train.seed).id;
    if (j.train.seed == member_seed(0, 3)) {
      r.ok = false;
      r.error = "non-finite loss at epoch 0";
      return r;
    }
    std::filesystem::create_directories(dir);
    r.checkpoint = dir / "checkpoint.lsck";
    std::ofstream(r.checkpoint) << "stub";
    return r;
  };
  const auto ten = train_ensemble(job, 10, 0, manifest, reg, tmp / "ens10", fake);
  REQUIRE(ten.members.size() == 10);
  CHECK(ten.valid_members().size() == 8);
  CHECK_FALSE(ten.members[3].ok);
  CHECK(ten.members[3].error.find("non-finite") != std::string::npos);
  CHECK_FALSE(ten.members[5].ok);
  CHECK(ten.members[5].error.find("disk full") != std::string::npos);
  std::set<std::uint64_t> seeds;
  for (const auto& m : ten.members) seeds.insert(m.seed);
  CHECK(seeds.size() == 10);
  const auto reread = load_ensemble_manifest(tmp / "ens10" / "ensemble.json");
  CHECK(reread.valid_members().size() == 8);
  CHECK_FALSE(reread.members[3].ok);
}

TEST_CASE("config round trip and validation") {
  TrainConfig c;
  c.seed = 99;
  c.samples_per_epoch = 4;
  const auto back = train_config_from_json(to_json(c));
  CHECK(back.seed == 99);
  CHECK(back.samples_per_epoch == 4);
  CHECK(back.momentum == 0.99);
  CHECK(back.nesterov);
  c.split_fraction = 1.0;
  CHECK_THROWS_AS(c.validate(), ValidationError);
  c = TrainConfig{};
  c.batch_size = 0;
  CHECK_THROWS_AS(c.validate(), ValidationError);
}
