#include <cmath>
#include <fstream>
#include <random>

#include "doctest.h"
#include "labelseg/infer_eval.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace labelseg;

namespace {

UNetConfig tiny_config() {
  UNetConfig c;
  c.num_classes = 3;
  c.base_features = 4;
  c.num_resolution_reductions = 2;
  c.deep_supervision_levels = 2;
  c.patch_shape = {8, 12, 8};
  return c;
}

nn::Tensor random_input(const Shape3& s, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> n(0.0f, 1.0f);
  nn::Tensor t(1, s);
  for (auto& v : t.data) v = n(rng);
  return t;
}

const Shape3 kTiny{8, 12, 8};

EnsembleManifest manifest_of(const std::vector<std::pair<std::uint64_t, std::filesystem::path>>& members) {
  EnsembleManifest m;
  m.num_classes = 3;
  m.patch_shape = {8, 12, 8};
  for (std::size_t i = 0; i < members.size(); ++i) {
    m.members.push_back({static_cast<int>(i), members[i].first, members[i].second, "s", true, ""});
  }
  return m;
}

ProbabilityMap one_hot_map(const LabelVolume& labels, int classes) {
  ProbabilityMap p(classes, labels.shape, labels.geometry, 0.0f);
  const std::size_t n = labels.data.size();
  for (std::size_t i = 0; i < n; ++i) p.data[static_cast<std::size_t>(labels.data[i]) * n + i] = 1.0f;
  return p;
}

LabelVolume blocky_labels(const Shape3& s, const Geometry& g, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> d(0, 3);
  LabelVolume out(s, g);
  // Constant 2x2x2 blocks.
  for (std::int64_t z = 0; z < s.nz; z += 2) {
    for (std::int64_t y = 0; y < s.ny; y += 2) {
      for (std::int64_t x = 0; x < s.nx; x += 2) {
        const int v = d(rng);
        for (std::int64_t k = z; k < std::min(z + 2, s.nz); ++k) {
          for (std::int64_t j = y; j < std::min(y + 2, s.ny); ++j) {
            for (std::int64_t i = x; i < std::min(x + 2, s.nx); ++i) out.at(i, j, k) = v;
          }
        }
      }
    }
  }
  return out;
}

PatchGeometry identity_plan(const Shape3& s, const Geometry& g) {
  PatchGeometry pg = plan_crop_or_pad(s, g, s);
  pg.native_shape = s;
  pg.native_geometry = g;
  return pg;
}

}  // namespace

TEST_CASE("test-time augmentation commutes with flips") {
  const auto net = build_network(tiny_config(), 4);
  const auto x = random_input(kTiny, 5);
  const nn::Tensor base = tta_predict(*net, x);
  for (unsigned axes = 0; axes < 8; ++axes) {
    const nn::Tensor lhs = tta_predict(*net, nn::flip(x, axes));
    const nn::Tensor rhs = nn::flip(base, axes);
    double worst = 0.0;
    for (std::size_t i = 0; i < lhs.data.size(); ++i) {
      worst = std::max(worst, static_cast<double>(std::abs(lhs.data[i] - rhs.data[i])));
    }
    CHECK(worst <= 1e-6);
  }
  CHECK(tta_predict(*net, x, false).data == net->forward(x)[0].data);
  CHECK(tta_predict(*net, x).data != net->forward(x)[0].data);

  auto train_net = build_network(tiny_config(), 4);
  train_net->set_mode(NetworkMode::kTrain);
  CHECK_THROWS_AS((void)tta_predict(*train_net, x), ValidationError);
  CHECK_THROWS_AS((void)tta_predict(*net, random_input({8, 8, 8}, 1)), ShapeError);
}

TEST_CASE("input-independent network gives the single forward pass") {
  auto net = build_network(tiny_config(), 6);
  for (auto* p : net->params()) {
    const bool head_bias = p->name.rfind("head", 0) == 0 && p->name.find(".bias") != std::string::npos;
    if (!head_bias) std::fill(p->value.begin(), p->value.end(), 0.0f);
  }
  const auto x = random_input(kTiny, 7);
  const auto single = net->forward(x)[0];
  CHECK(tta_predict(*net, x).data == single.data);
}

TEST_CASE("ensemble averaging") {
  testing::TempDir tmp;
  const auto a = build_network(tiny_config(), 1);
  const auto b = build_network(tiny_config(), 2);
  const auto c = build_network(tiny_config(), 3);
  save_checkpoint(*a, {1, 1, "x"}, tmp / "a.lsck");
  save_checkpoint(*b, {2, 1, "y"}, tmp / "b.lsck");
  save_checkpoint(*c, {3, 1, "z"}, tmp / "c.lsck");
  const auto x = random_input(kTiny, 8);

  const auto copies = load_ensemble(manifest_of({{1, tmp / "a.lsck"}, {1, tmp / "a.lsck"}, {1, tmp / "a.lsck"}}));
  REQUIRE(copies.size() == 3);
  CHECK(ensemble_predict(copies, x).data == tta_predict(*a, x).data);

  const auto pair = load_ensemble(manifest_of({{1, tmp / "a.lsck"}, {2, tmp / "b.lsck"}}));
  const auto mean = ensemble_predict(pair, x);
  const auto pa = tta_predict(*a, x);
  const auto pb = tta_predict(*b, x);
  for (std::size_t i = 0; i < mean.data.size(); ++i) {
    const double want = (static_cast<double>(pa.data[i]) + pb.data[i]) / 2.0;
    REQUIRE(std::abs(static_cast<double>(mean.data[i]) - static_cast<float>(want)) <= 1e-12);
  }

  auto three = load_ensemble(manifest_of({{3, tmp / "c.lsck"}, {1, tmp / "a.lsck"}, {2, tmp / "b.lsck"}}));
  const auto ref = ensemble_predict(three, x);
  std::mt19937_64 rng(9);
  for (int k = 0; k < 5; ++k) {
    std::shuffle(three.begin(), three.end(), rng);
    CHECK(ensemble_predict(three, x).data == ref.data);
  }

  auto missing = manifest_of({{1, tmp / "a.lsck"}, {2, tmp / "gone.lsck"}});
  try {
    (void)load_ensemble(missing);
    FAIL("expected an error");
  } catch (const IoError& e) {
    CHECK(std::string(e.what()).find("member 1") != std::string::npos);
    CHECK(std::string(e.what()).find("gone.lsck") != std::string::npos);
  }
  missing.members[1].ok = false;
  CHECK(load_ensemble(missing).size() == 1);
  missing.members[0].ok = false;
  CHECK_THROWS_AS(load_ensemble(missing), ValidationError);

  auto wrong = manifest_of({{1, tmp / "a.lsck"}});
  wrong.num_classes = 5;
  CHECK_THROWS_AS(load_ensemble(wrong), ValidationError);
}

TEST_CASE("argmax tie-break") {
  const Geometry g = Geometry::axis_aligned({1.0, 1.0, 1.0});
  ProbabilityMap p(3, {2, 1, 1}, g, 0.0f);
  p.data = {0.2f, 0.4f,   // class 0
            0.4f, 0.4f,   // class 1
            0.4f, 0.2f};  // class 2
  const auto l = argmax_labels(p);
  CHECK(l.data == std::vector<std::int32_t>{1, 0});
}

TEST_CASE("postprocess geometry") {
  const Geometry g = Geometry::axis_aligned({1.0, 1.0, 1.0});
  const Shape3 s{12, 10, 8};
  const auto labels = blocky_labels(s, g, 11);
  const auto probs = one_hot_map(labels, 4);

  SUBCASE("identity geometry") {
    CHECK(postprocess(probs, identity_plan(s, g)).data == labels.data);
  }
  SUBCASE("pure translation") {
    PatchGeometry pg = identity_plan(s, g);
    const Eigen::Vector3d t(2.0, -3.0, 1.0);
    pg.transform.translation = t;  // native world -> template world
    const auto out = postprocess(probs, pg);
    CHECK(out.shape == s);
    for (std::int64_t z = 1; z < s.nz - 1; ++z) {
      for (std::int64_t y = 3; y < s.ny - 3; ++y) {
        for (std::int64_t x = 0; x < s.nx - 2; ++x) {
          REQUIRE(out.at(x, y, z) == labels.at(x + 2, y - 3, z + 1));
        }
      }
    }
  }
  SUBCASE("crop and pad are undone") {
    // Template grid 12x10x8 into a 16x8x8 patch: pad x, crop y.
    PatchGeometry pg = plan_crop_or_pad(s, g, {16, 8, 8});
    pg.native_shape = s;
    pg.native_geometry = g;
    const ProbabilityMap patch_probs = [&] {
      const auto patch_labels = apply_crop_or_pad(labels, pg);
      return one_hot_map(patch_labels, 4);
    }();
    const auto out = postprocess(patch_probs, pg);
    for (std::int64_t z = 0; z < s.nz; ++z) {
      for (std::int64_t y = pg.crop_low[1]; y < s.ny - pg.crop_high[1]; ++y) {
        for (std::int64_t x = 0; x < s.nx; ++x) REQUIRE(out.at(x, y, z) == labels.at(x, y, z));
      }
    }
    CHECK_THROWS_AS(postprocess(probs, pg), ShapeError);
  }
}

TEST_CASE("dice score") {
  const Geometry g = Geometry::axis_aligned({1.0, 1.0, 1.0});
  const Shape3 s{8, 8, 8};
  std::mt19937_64 rng(12);
  for (int trial = 0; trial < 1000; ++trial) {
    const double density = std::uniform_real_distribution<double>(0.0, 0.6)(rng);
    std::bernoulli_distribution bit(density);
    LabelVolume a(s, g), b(s, g);
    std::vector<std::uint8_t> ma(s.size()), mb(s.size());
    for (std::size_t i = 0; i < s.size(); ++i) {
      ma[i] = bit(rng);
      mb[i] = bit(rng);
      a.data[i] = ma[i] ? 1 + static_cast<int>(i % 3) : 0;
      b.data[i] = mb[i];
    }
    REQUIRE(dice_score(a, b) == oracle::dice_count(ma, mb));
    REQUIRE(dice_score(a, b) == dice_score(b, a));
  }
  LabelVolume empty(s, g), full(s, g, 1), half(s, g);
  for (std::size_t i = 0; i < 256; ++i) half.data[i] = 1;
  LabelVolume other_half(s, g);
  for (std::size_t i = 256; i < 512; ++i) other_half.data[i] = 1;
  CHECK(dice_score(empty, empty) == 1.0);
  CHECK(dice_score(empty, full) == 0.0);
  CHECK(dice_score(full, full) == 1.0);
  CHECK(dice_score(half, other_half) == 0.0);
  CHECK(dice_score(half, full) == doctest::Approx(2.0 * 256 / (256 + 512)));
  CHECK_THROWS_AS((void)dice_score(empty, LabelVolume({8, 8, 4}, g)), ShapeError);
  CHECK(class_dice(half, half, 1) == 1.0);
  CHECK(class_dice(half, half, 2) == 1.0);
}

TEST_CASE("evaluation report") {
  const auto reg = testing::toy_registry();
  const LabelProtocol& toy = *reg.mapping("toy_full").protocol;
  const Geometry g = Geometry::axis_aligned({1.0, 1.0, 1.0});
  const Shape3 s{10, 1, 1};
  LabelVolume gt(s, g);
  gt.data = {0, 1, 1, 1, 1, 1, 2, 2, 0, 0};

  // Class 1: first case perfect, second case 4 of 5 voxels predicted -> 8/9; class 3 absent.
  LabelVolume second = gt;
  second.data[5] = 0;
  const auto report = evaluate_cases({{"c1", gt, gt}, {"c2", second, gt}}, toy);
  CHECK(report.class_ids == std::vector<int>{1, 2, 3});
  CHECK(report.class_names == std::vector<std::string>{"a", "b", "c"});
  REQUIRE(report.cases.size() == 2);
  CHECK(report.cases[0].dice == std::vector<double>{1.0, 1.0, 1.0});
  CHECK(report.cases[0].absent == std::vector<bool>{false, false, true});
  const double d = 2.0 * 4 / 9;
  CHECK(report.cases[1].dice[0] == doctest::Approx(d));
  REQUIRE(report.summary.size() == 3);
  CHECK(report.summary[0].mean == doctest::Approx((1.0 + d) / 2));
  CHECK(report.summary[0].sd == doctest::Approx((1.0 - d) / 2));
  CHECK(report.summary[0].n == 2);
  CHECK(report.summary[1].sd == 0.0);
  CHECK(report.summary[2].absent == 2);

  // Dice 0.8 and 1.0 -> mean 0.9, population sd 0.1.
  LabelVolume g2(s, g), p2(s, g);
  g2.data = {1, 1, 1, 1, 1, 1, 0, 0, 0, 0};
  p2.data = {1, 1, 1, 1, 0, 0, 0, 0, 0, 0};
  const auto stats = evaluate_cases({{"x", g2, g2}, {"y", p2, g2}}, toy);
  CHECK(stats.summary[0].mean == doctest::Approx(0.9).epsilon(1e-12));
  CHECK(stats.summary[0].sd == doctest::Approx(0.1).epsilon(1e-12));

  CHECK_THROWS_AS(evaluate_cases({{"bad", LabelVolume({9, 1, 1}, g), gt}}, toy), ShapeError);

  testing::TempDir tmp;
  auto with_unpaired = report;
  with_unpaired.unpaired = {"lonely"};
  write_report(with_unpaired, tmp.path());
  std::ifstream per_case(tmp / "dice_per_case.tsv");
  std::string header, row1;
  std::getline(per_case, header);
  std::getline(per_case, row1);
  CHECK(header.find("case_id") == 0);
  CHECK(header.find("a") != std::string::npos);
  CHECK(row1.rfind("c1", 0) == 0);
  std::ifstream summary(tmp / "dice_summary.tsv");
  const std::string text((std::istreambuf_iterator<char>(summary)), {});
  CHECK(text.find("lonely") != std::string::npos);
  CHECK(text.find("mean") != std::string::npos);
}
