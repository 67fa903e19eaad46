#include <cmath>
#include <random>

#include "doctest.h"
#include "labelseg/losses.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace labelseg;

namespace {

LabelRegistry tri_registry() {
  LabelRegistry r = LabelRegistry::with_defaults();
  r.load_json(nlohmann::json::parse(R"({
    "protocols": [{"name": "tri", "background_id": 0,
                   "classes": [{"id": 0, "name": "bg"}, {"id": 1, "name": "a"}, {"id": 2, "name": "b"}]}],
    "mappings": [{"name": "tri_full", "protocol": "tri",
                  "labels": [{"id": 0, "name": "bg", "leaves": [0]}, {"id": 1, "name": "a", "leaves": [1]},
                             {"id": 2, "name": "b", "leaves": [2]}]},
                 {"name": "tri_partial", "protocol": "tri",
                  "labels": [{"id": 0, "name": "bg", "leaves": [0]}, {"id": 1, "name": "ab", "leaves": [1, 2]}]},
                 {"name": "tri_none", "protocol": "tri",
                  "labels": [{"id": 0, "name": "all", "leaves": [0, 1, 2]}]}]
  })"));
  return r;
}

PartialTarget target_of(const LabelSetMapping& m, std::vector<std::int32_t> labels) {
  const auto n = static_cast<std::int64_t>(labels.size());
  return PartialTarget{{n, 1, 1}, std::move(labels), &m};
}

std::vector<std::int32_t> random_labels(std::mt19937_64& rng, std::size_t n, int k) {
  std::uniform_int_distribution<int> d(0, k - 1);
  std::vector<std::int32_t> out(n);
  for (auto& v : out) v = d(rng);
  return out;
}

std::vector<double> one_hot(const std::vector<int>& leaf, int classes) {
  std::vector<double> p(static_cast<std::size_t>(classes) * leaf.size(), 0.0);
  for (std::size_t i = 0; i < leaf.size(); ++i) p[static_cast<std::size_t>(leaf[i]) * leaf.size() + i] = 1.0;
  return p;
}

}  // namespace

TEST_CASE("marginalized cross entropy examples") {
  const auto reg = tri_registry();
  const auto& none = reg.mapping("tri_none");
  const std::vector<double> p = {0.5, 0.2, 0.3};
  CHECK(marginalized_cross_entropy(p, target_of(none, {0}), 1e-8).value ==
        doctest::Approx(-std::log(1.0 + 1e-8)).epsilon(1e-15));

  const auto feta = LabelRegistry::with_defaults();
  const std::vector<double> uniform(8, 1.0 / 8);
  CHECK(marginalized_cross_entropy(uniform, target_of(feta.mapping("feta_full"), {5}), 1e-8).value ==
        doctest::Approx(std::log(8.0)).epsilon(1e-7));

  const auto& part = reg.mapping("tri_partial");
  const double a = marginalized_cross_entropy(p, target_of(part, {1}), 1e-8).value;
  const double b = marginalized_cross_entropy(std::vector<double>{0.5, 0.5, 0.0}, target_of(part, {1}), 1e-8).value;
  CHECK(a == doctest::Approx(-std::log(0.5 + 1e-8)).epsilon(1e-14));
  CHECK(a == b);
}

TEST_CASE("leaf dice examples") {
  const auto reg = tri_registry();
  const auto& full = reg.mapping("tri_full");
  const std::vector<int> leaf = {0, 1, 2, 2, 1, 0};
  std::vector<std::int32_t> ids(leaf.begin(), leaf.end());
  CHECK(leaf_dice(one_hot(leaf, 3), target_of(full, ids), 1e-5).value <= 1e-3);
  std::vector<int> wrong = leaf;
  for (auto& v : wrong) v = (v + 1) % 3;
  CHECK(leaf_dice(one_hot(wrong, 3), target_of(full, ids), 1e-5).value >= 1.0 - 1e-3);

  // Hand transcription on 4 voxels and 3 classes, target (0, 1, 1, 2).
  const std::vector<double> p = {0.7, 0.1, 0.2, 0.3,   // class 0
                                 0.2, 0.6, 0.5, 0.3,   // class 1
                                 0.1, 0.3, 0.3, 0.4};  // class 2
  const double e = 1e-5;
  const double d0 = (2 * 0.7 + e) / (1 + (0.49 + 0.01 + 0.04 + 0.09) + e);
  const double d1 = (2 * (0.6 + 0.5) + e) / (2 + (0.04 + 0.36 + 0.25 + 0.09) + e);
  const double d2 = (2 * 0.4 + e) / (1 + (0.01 + 0.09 + 0.09 + 0.16) + e);
  const double want = 1.0 - (d0 + d1 + d2) / 3.0;
  CHECK(leaf_dice(p, target_of(full, {0, 1, 1, 2}), e).value == doctest::Approx(want).epsilon(1e-14));

  // Partially annotated voxels leave the numerator and ground-truth sums, keep the p^2 terms.
  const auto& part = reg.mapping("tri_partial");
  const double p0 = (2 * 0.7 + e) / (1 + 0.63 + e);
  const double p1 = e / (0 + 0.74 + e);
  const double p2 = e / (0 + 0.35 + e);
  CHECK(leaf_dice(p, target_of(part, {0, 1, 1, 1}), e).value ==
        doctest::Approx(1.0 - (p0 + p1 + p2) / 3.0).epsilon(1e-14));
}

TEST_CASE("combined loss is the sum of its terms") {
  const auto reg = tri_registry();
  const auto& full = reg.mapping("tri_full");
  const std::vector<int> leaf = {0, 1, 2, 1};
  std::vector<std::int32_t> ids(leaf.begin(), leaf.end());
  const LossConfig cfg;
  CHECK(combined_loss(one_hot(leaf, 3), target_of(full, ids), cfg).value < 2e-3);

  std::mt19937_64 rng(3);
  const auto p = oracle::bounded_probs(rng, 3, 4);
  const auto t = target_of(full, ids);
  const auto ce = marginalized_cross_entropy(p, t, cfg.epsilon_log);
  const auto ld = leaf_dice(p, t, cfg.epsilon_dice);
  const auto sum = combined_loss(p, t, cfg);
  CHECK(sum.value == doctest::Approx(ce.value + ld.value).epsilon(1e-15));
  for (std::size_t i = 0; i < p.size(); ++i) CHECK(sum.grad[i] == doctest::Approx(ce.grad[i] + ld.grad[i]));
}

TEST_CASE("full supervision reduces to standard losses") {
  const auto reg = LabelRegistry::with_defaults();
  const auto& full = reg.mapping("feta_full");
  std::mt19937_64 rng(101);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = std::uniform_int_distribution<std::size_t>(1, 30)(rng);
    const auto p = testing::random_probs(rng, 8, n);
    const auto ids = random_labels(rng, n, 8);
    const std::vector<int> leaf(ids.begin(), ids.end());
    const auto t = target_of(full, ids);
    CHECK(std::abs(marginalized_cross_entropy(p, t, 1e-8, false).value - oracle::cross_entropy(p, leaf, 8, 1e-8)) <
          1e-9);
    CHECK(std::abs(leaf_dice(p, t, 1e-5, false).value - oracle::soft_dice_loss(p, leaf, 8, 1e-5)) < 1e-9);
  }
}

TEST_CASE("within-set redistribution leaves cross entropy unchanged") {
  const auto reg = LabelRegistry::with_defaults();
  const auto& part = reg.mapping("dhcp_partial");
  const std::vector<int> other = {1, 2, 6, 7};
  std::mt19937_64 rng(202);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = std::uniform_int_distribution<std::size_t>(1, 30)(rng);
    auto p = testing::random_probs(rng, 8, n);
    auto ids = random_labels(rng, n, 5);
    ids[0] = 4;
    const auto t = target_of(part, ids);
    const double before = marginalized_cross_entropy(p, t, 1e-8, false).value;
    for (std::size_t i = 0; i < n; ++i) {
      if (ids[i] != 4) continue;
      double mass = 0.0;
      for (int c : other) mass += p[static_cast<std::size_t>(c) * n + i];
      std::vector<double> w(other.size());
      double ws = 0.0;
      for (auto& v : w) ws += (v = std::uniform_real_distribution<double>(0.0, 1.0)(rng));
      for (std::size_t k = 0; k < other.size(); ++k) {
        p[static_cast<std::size_t>(other[k]) * n + i] = mass * w[k] / ws;
      }
    }
    CHECK(std::abs(marginalized_cross_entropy(p, t, 1e-8, false).value - before) < 1e-12);
  }
}

TEST_CASE("analytic gradients match central differences") {
  const auto reg = tri_registry();
  std::mt19937_64 rng(303);
  const LossConfig cfg;
  double worst = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = std::uniform_int_distribution<std::size_t>(1, 30)(rng);
    const auto& m = reg.mapping(trial % 2 == 0 ? "tri_full" : "tri_partial");
    const auto t = target_of(m, random_labels(rng, n, m.num_partial()));
    const auto p = oracle::bounded_probs(rng, 3, n);
    auto check = [&](const auto& loss) {
      const auto analytic = loss(p, true).grad;
      const auto numeric =
          oracle::numeric_gradient([&](const std::vector<double>& q) { return loss(q, false).value; }, p, 1e-4);
      worst = std::max(worst, oracle::max_relative_error(analytic, numeric));
    };
    check([&](const std::vector<double>& q, bool g) { return marginalized_cross_entropy(q, t, cfg.epsilon_log, g); });
    check([&](const std::vector<double>& q, bool g) { return leaf_dice(q, t, cfg.epsilon_dice, g); });
    check([&](const std::vector<double>& q, bool g) { return combined_loss(q, t, cfg, g); });
  }
  CHECK(worst < 1e-5);
}

TEST_CASE("range and monotonicity") {
  const auto reg = LabelRegistry::with_defaults();
  const auto& part = reg.mapping("dhcp_partial");
  std::mt19937_64 rng(404);
  for (int trial = 0; trial < 50; ++trial) {
    const auto p = testing::random_probs(rng, 8, 20, 3.0);
    const auto t = target_of(part, random_labels(rng, 20, 5));
    CHECK(marginalized_cross_entropy(p, t, 1e-8, false).value >= 0.0);
    const double ld = leaf_dice(p, t, 1e-5, false).value;
    CHECK(ld >= 0.0);
    CHECK(ld <= 1.0 + 1e-5);
  }
  const auto tri_reg = tri_registry();
  const auto& tri = tri_reg.mapping("tri_partial");
  double prev = 1e300;
  for (double mass = 0.05; mass < 1.0; mass += 0.05) {
    const std::vector<double> p = {1.0 - mass, mass * 0.3, mass * 0.7};
    const double v = marginalized_cross_entropy(p, target_of(tri, {1}), 1e-8, false).value;
    CHECK(v < prev);
    prev = v;
  }
}

TEST_CASE("input validation") {
  const auto reg = tri_registry();
  const auto& full = reg.mapping("tri_full");
  CHECK_THROWS_AS(marginalized_cross_entropy(std::vector<double>{0.5, 0.2, 0.2}, target_of(full, {0}), 1e-8),
                  ValidationError);
  CHECK_NOTHROW(marginalized_cross_entropy(std::vector<double>{0.5, 0.2, 0.2995}, target_of(full, {0}), 1e-8));
  CHECK_THROWS_AS(leaf_dice(std::vector<double>{0.5, 0.5}, target_of(full, {0}), 1e-5), ShapeError);
  CHECK_THROWS_AS(leaf_dice(std::vector<double>{0.5, 0.2, 0.3}, target_of(full, {3}), 1e-5), ValidationError);
  PartialTarget unmapped{{1, 1, 1}, {0}, nullptr};
  CHECK_THROWS_AS(unmapped.validate(), ValidationError);

  LossConfig cfg;
  cfg.deep_supervision_weights = {0.5, 0.4};
  CHECK_THROWS_AS(cfg.validate(), ValidationError);
  cfg.deep_supervision_weights = {1.2, -0.2};
  CHECK_THROWS_AS(cfg.validate(), ValidationError);
  cfg = LossConfig{};
  cfg.epsilon_dice = 0.0;
  CHECK_THROWS_AS(cfg.validate(), ValidationError);

  const auto round = loss_config_from_json(to_json(LossConfig{}));
  CHECK(round.deep_supervision_weights == LossConfig{}.deep_supervision_weights);
  CHECK(round.epsilon_log == 1e-8);
}

TEST_CASE("deep supervision weights and target downsampling") {
  const auto w = halving_weights(4);
  REQUIRE(w.size() == 4);
  CHECK(w[0] == doctest::Approx(8.0 / 15).epsilon(1e-15));
  CHECK(w[3] == doctest::Approx(1.0 / 15).epsilon(1e-15));
  CHECK(halving_weights(1) == std::vector<double>{1.0});

  const auto reg = tri_registry();
  const auto& full = reg.mapping("tri_full");
  PartialTarget t{{4, 4, 2}, std::vector<std::int32_t>(32), &full};
  for (std::int64_t z = 0; z < 2; ++z) {
    for (std::int64_t y = 0; y < 4; ++y) {
      for (std::int64_t x = 0; x < 4; ++x) t.labels[static_cast<std::size_t>(x + 4 * (y + 4 * z))] = (x + y + z) % 3;
    }
  }
  const auto d = downsample_target(t, 1);
  CHECK(d.shape == Shape3{2, 2, 1});
  CHECK(d.labels == std::vector<std::int32_t>{0, 2, 2, 1});
  CHECK(downsample_target(t, 0).labels == t.labels);
  CHECK_THROWS_AS(downsample_target(t, 2), ShapeError);
}

TEST_CASE("deep supervision aggregation") {
  const auto reg = tri_registry();
  const auto& part = reg.mapping("tri_partial");
  std::mt19937_64 rng(505);
  PartialTarget t{{8, 8, 8}, random_labels(rng, 512, 2), &part};
  std::vector<std::vector<double>> maps;
  for (int s = 0; s < 4; ++s) maps.push_back(testing::random_probs(rng, 3, static_cast<std::size_t>(512 >> (3 * s))));
  std::vector<std::span<const double>> views(maps.begin(), maps.end());

  LossConfig cfg;
  const auto res = deep_supervision_loss(views, t, cfg);
  double want = 0.0;
  for (int s = 0; s < 4; ++s) {
    const auto ts = downsample_target(t, s);
    want += cfg.deep_supervision_weights[static_cast<std::size_t>(s)] *
            combined_loss(maps[static_cast<std::size_t>(s)], ts, cfg, false).value;
  }
  CHECK(res.value == doctest::Approx(want).epsilon(1e-14));
  REQUIRE(res.grads.size() == 4);
  const auto g3 = combined_loss(maps[3], downsample_target(t, 3), cfg).grad;
  for (std::size_t i = 0; i < g3.size(); ++i) CHECK(res.grads[3][i] == doctest::Approx(g3[i] / 15.0));

  cfg.deep_supervision_weights = {1.0, 0.0, 0.0, 0.0};
  CHECK(deep_supervision_loss(views, t, cfg).value ==
        doctest::Approx(combined_loss(maps[0], t, cfg, false).value).epsilon(1e-15));

  // Perfect probabilities at every scale.
  const auto& full = reg.mapping("tri_full");
  PartialTarget tf{{8, 8, 8}, random_labels(rng, 512, 3), &full};
  std::vector<std::vector<double>> perfect;
  for (int s = 0; s < 4; ++s) {
    const auto ts = downsample_target(tf, s);
    perfect.push_back(one_hot(std::vector<int>(ts.labels.begin(), ts.labels.end()), 3));
  }
  std::vector<std::span<const double>> pviews(perfect.begin(), perfect.end());
  CHECK(deep_supervision_loss(pviews, tf, LossConfig{}).value < 2e-3);

  pviews.pop_back();
  CHECK_THROWS_AS(deep_supervision_loss(pviews, tf, LossConfig{}), ValidationError);
}
