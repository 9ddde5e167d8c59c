// Copyright 2026 The prior3d Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <set>

#include "fixtures.hpp"
#include "oracles.hpp"
#include "prior3d/training.hpp"

using namespace prior3d;
using namespace prior3d::testing;
namespace fs = std::filesystem;

namespace {

void check_matching(const MatchResult& r, const Eigen::MatrixXd& cost) {
  const auto expected = std::min(cost.rows(), cost.cols());
  REQUIRE(static_cast<Eigen::Index>(r.pairs.size()) == expected);
  std::set<int> rows, cols;
  double total = 0;
  for (const auto& [i, j] : r.pairs) {
    rows.insert(i);
    cols.insert(j);
    total += cost(i, j);
  }
  CHECK(static_cast<Eigen::Index>(rows.size()) == expected);
  CHECK(static_cast<Eigen::Index>(cols.size()) == expected);
  CHECK(std::is_sorted(r.pairs.begin(), r.pairs.end()));
  CHECK(total == doctest::Approx(r.total_cost).epsilon(1e-12));
}

DetectionOutput<double> random_output(std::mt19937_64& rng, int n) {
  DetectionOutput<double> out;
  out.logits = random_param(rng, {n, kNumClasses}, -3, 3);
  out.reference = TensorD::constant({n, 3}, random_values(rng, 3 * n, -20, 20));
  out.offsets = random_param(rng, {n, 3}, -2, 2);
  out.centers = add(out.reference, out.offsets);
  out.extents = random_param(rng, {n, 3}, 0.5, 5);
  out.yaw = random_param(rng, {n, 2});
  return out;
}

std::vector<Cuboid> random_gts(std::mt19937_64& rng, int m) {
  std::vector<Cuboid> gts;
  for (int j = 0; j < m; ++j) {
    Cuboid c = random_cuboid(rng, 20);
    c.label = static_cast<ObjectClass>(j % 2);
    gts.push_back(c);
  }
  return gts;
}

DetectionOutput<double> permute_rows(const DetectionOutput<double>& o, const std::vector<int>& perm) {
  const std::span<const int> idx(perm);
  DetectionOutput<double> p;
  p.logits = gather_rows(o.logits, idx);
  p.reference = gather_rows(o.reference, idx);
  p.offsets = gather_rows(o.offsets, idx);
  p.centers = gather_rows(o.centers, idx);
  p.extents = gather_rows(o.extents, idx);
  p.yaw = gather_rows(o.yaw, idx);
  return p;
}

std::vector<Frame> training_frames(int count) {
  std::vector<Frame> frames;
  for (int i = 0; i < count; ++i) {
    Frame f = make_test_frame({make_cuboid({9, 0.5 - i, 0.9}, {4, 2, 1.8}, 0.4 * i)}, 1, 32, 16, "f" + std::to_string(i));
    for (auto& v : f.views) {
      for (auto& b : v.boxes) b.score = 0.9;
    }
    frames.push_back(std::move(f));
  }
  return frames;
}

}  // namespace

TEST_CASE("hungarian examples") {
  Eigen::MatrixXd c(3, 3);
  c << 4, 1, 3, 2, 0, 5, 3, 2, 2;
  const auto r = hungarian(c);
  CHECK(r.total_cost == 5);
  CHECK(r.pairs == std::vector<std::pair<int, int>>{{0, 1}, {1, 0}, {2, 2}});

  Eigen::MatrixXd wide(1, 3);
  wide << 5, 2, 7;
  CHECK(hungarian(wide).pairs == std::vector<std::pair<int, int>>{{0, 1}});
  CHECK(hungarian(Eigen::MatrixXd(0, 4)).pairs.empty());
  CHECK(hungarian(Eigen::MatrixXd(3, 0)).pairs.empty());

  c(1, 1) = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(hungarian(c), std::invalid_argument);
  c(1, 1) = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(hungarian(c), std::invalid_argument);
}

TEST_CASE("hungarian equals brute force") {
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<int> dim(1, 6), small(0, 9);
  std::uniform_real_distribution<double> real(-5, 5);
  for (int trial = 0; trial < 1000; ++trial) {
    const int n = dim(rng), m = dim(rng);
    Eigen::MatrixXd cost(n, m);
    // Half with small integers (many ties, exact sums), half real-valued.
    const bool integer = trial % 2 == 0;
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < m; ++j) cost(i, j) = integer ? small(rng) : real(rng);
    }
    const auto r = hungarian(cost);
    check_matching(r, cost);
    if (integer) {
      CHECK(r.total_cost == brute_force_assignment(cost));
    } else {
      CHECK(r.total_cost == doctest::Approx(brute_force_assignment(cost)).epsilon(1e-12));
    }
  }
  // Full 6x6 cases against all 720 permutations.
  for (int trial = 0; trial < 50; ++trial) {
    Eigen::MatrixXd cost(6, 6);
    for (int i = 0; i < 36; ++i) cost(i) = small(rng);
    CHECK(hungarian(cost).total_cost == brute_force_assignment(cost));
  }
}

TEST_CASE("box parameters") {
  const Cuboid c = make_cuboid({1, 2, 3}, {4, 5, 6}, std::numbers::pi / 2);
  const auto p = box_params(c);
  CHECK(p(0) == 1);
  CHECK(p(5) == 6);
  CHECK(p(6) == doctest::Approx(1));
  CHECK(p(7) == doctest::Approx(0).epsilon(1e-12));
}

TEST_CASE("match cost formula") {
  std::mt19937_64 rng(12);
  const auto out = random_output(rng, 5);
  const auto gts = random_gts(rng, 3);
  const LossWeights w{2.0, 0.25};
  const auto cost = match_cost(out, gts, w);
  REQUIRE(cost.rows() == 5);
  REQUIRE(cost.cols() == 3);
  for (int i = 0; i < 5; ++i) {
    for (int j = 0; j < 3; ++j) {
      const Cuboid& g = gts[j];
      const double p = 1 / (1 + std::exp(-out.logits.at(i, static_cast<int>(g.label))));
      double l1 = 0;
      for (int k = 0; k < 3; ++k) {
        l1 += std::abs(out.centers.at(i, k) - g.center[k]) + std::abs(out.extents.at(i, k) - g.extents[k]);
      }
      l1 += std::abs(out.yaw.at(i, 0) - std::sin(g.yaw)) + std::abs(out.yaw.at(i, 1) - std::cos(g.yaw));
      CHECK(cost(i, j) == doctest::Approx(2.0 * (1 - p) + 0.25 * l1).epsilon(1e-12));
    }
  }
}

TEST_CASE("set loss") {
  std::mt19937_64 rng(13);
  const LossWeights w;
  const FocalParams focal;

  SUBCASE("permutation invariance") {
    for (int trial = 0; trial < 20; ++trial) {
      const auto out = random_output(rng, 7);
      auto gts = random_gts(rng, 4);
      const auto base = set_loss<double>({out}, gts, w, focal);
      std::vector<int> perm(7);
      std::iota(perm.begin(), perm.end(), 0);
      std::shuffle(perm.begin(), perm.end(), rng);
      std::shuffle(gts.begin(), gts.end(), rng);
      const auto shuffled = set_loss<double>({permute_rows(out, perm)}, gts, w, focal);
      CHECK(shuffled.total.item() == doctest::Approx(base.total.item()).epsilon(1e-12));
    }
  }
  SUBCASE("no ground truth") {
    const auto out = random_output(rng, 4);
    const auto l = set_loss<double>({out}, {}, w, focal);
    CHECK(l.box == 0);
    CHECK(l.matches[0].pairs.empty());
    const auto neg = sigmoid_focal_loss(out.logits, RowMatrix<double>(RowMatrix<double>::Zero(4, kNumClasses)), 0.25, 2.0);
    CHECK(l.cls == doctest::Approx(neg.item()).epsilon(1e-12));
    CHECK(l.total.item() == doctest::Approx(w.cls * neg.item()).epsilon(1e-12));
  }
  SUBCASE("perfect boxes have zero regression loss") {
    auto gts = random_gts(rng, 2);
    DetectionOutput<double> out = random_output(rng, 3);
    Vec<double> c(9), e(9), y(6);
    for (int i = 0; i < 3; ++i) {
      const Cuboid& g = gts[i % 2];
      c.segment<3>(3 * i) = g.center;
      e.segment<3>(3 * i) = g.extents;
      y[2 * i] = std::sin(g.yaw);
      y[2 * i + 1] = std::cos(g.yaw);
    }
    out.centers = TensorD::constant({3, 3}, c);
    out.extents = TensorD::constant({3, 3}, e);
    out.yaw = TensorD::constant({3, 2}, y);
    const auto l = set_loss<double>({out}, gts, w, focal);
    CHECK(l.box == doctest::Approx(0).epsilon(1e-12));
    CHECK(l.matches[0].pairs.size() == 2);
  }
  SUBCASE("blocks are averaged") {
    const auto a = random_output(rng, 5), b = random_output(rng, 5);
    const auto gts = random_gts(rng, 3);
    const double la = set_loss<double>({a}, gts, w, focal).total.item();
    const double lb = set_loss<double>({b}, gts, w, focal).total.item();
    const auto both = set_loss<double>({a, b}, gts, w, focal);
    CHECK(both.total.item() == doctest::Approx(0.5 * (la + lb)).epsilon(1e-12));
    CHECK(both.matches.size() == 2);
    CHECK_THROWS_AS(set_loss<double>({}, gts, w, focal), std::invalid_argument);
  }
  SUBCASE("gradient") {
    const auto gts = random_gts(rng, 3);
    const auto out = random_output(rng, 5);
    auto f = [&](const std::vector<TensorD>& in) {
      DetectionOutput<double> o = out;
      o.logits = in[0];
      o.centers = in[1];
      o.extents = in[2];
      o.yaw = in[3];
      return set_loss<double>({o}, gts, w, focal).total;
    };
    const auto r = grad_check(f, {out.logits, out.centers, out.extents, out.yaw});
    INFO(r.worst);
    CHECK(r.max_rel_err < 1e-4);
  }
}

TEST_CASE("train config json") {
  TrainConfig c;
  c.epochs = 3;
  c.overfit = 10;
  const auto back = train_config_from_json(to_json(c));
  CHECK(to_json(back) == to_json(c));
  CHECK_THROWS_AS(train_config_from_json({{"epoch", 3}}), std::invalid_argument);
  c.batch_size = 0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
}

TEST_CASE("learning curve csv") {
  const auto dir = fs::temp_directory_path() / "prior3d_test_curve";
  fs::create_directories(dir);
  LearningCurve curve;
  for (int e = 1; e <= 3; ++e) {
    EpochRecord r;
    r.epoch = e;
    r.loss = 1.0 / e;
    r.cls = 0.25;
    r.box = 3.5 / e;
    r.lr = 2e-4;
    r.val_ap_vehicle = 0.1 * e;
    r.val_ap_human = e == 2 ? std::numeric_limits<double>::quiet_NaN() : 0.5;
    r.val_ap_mean = 0.3;
    r.seconds = 1.5;
    curve.epochs.push_back(r);
  }
  curve.write_csv(dir / "curve.csv");
  const auto back = LearningCurve::read_csv(dir / "curve.csv");
  REQUIRE(back.epochs.size() == 3);
  CHECK(back.epochs[2].loss == doctest::Approx(1.0 / 3).epsilon(1e-8));
  CHECK(std::isnan(back.epochs[1].val_ap_human));
  CHECK(back.epochs[0].val_ap_human == 0.5);

  auto write = [&](const std::string& text) {
    std::ofstream(dir / "bad.csv") << text;
    return dir / "bad.csv";
  };
  const std::string header = "epoch,loss,cls,box,lr,val_ap_vehicle,val_ap_human,val_ap_mean,seconds\n";
  CHECK_THROWS_AS(LearningCurve::read_csv(write("epoch,loss\n")), std::invalid_argument);
  CHECK_THROWS_AS(LearningCurve::read_csv(write(header + "1,2,3\n")), std::invalid_argument);
  CHECK_THROWS_AS(LearningCurve::read_csv(write(header + "1,x,0,0,0,0,0,0,0\n")), std::invalid_argument);
  CHECK_THROWS_AS(LearningCurve::read_csv(write(header + "2,1,0,0,0,0,0,0,0\n1,1,0,0,0,0,0,0,0\n")),
                  std::invalid_argument);
  CHECK_THROWS_AS(LearningCurve::read_csv(dir / "missing.csv"), std::invalid_argument);
}

TEST_CASE("training reduces the loss and writes its outputs") {
  const auto frames = training_frames(3);
  const auto dir = fs::temp_directory_path() / "prior3d_test_train";
  fs::remove_all(dir);
  TrainConfig tc;
  tc.epochs = 15;
  tc.batch_size = 2;
  tc.base_lr = 5e-3;
  tc.val_every = 0;
  Detector<double> model(tiny_config(), 1);
  const auto result = train(model, frames, {}, tc, dir, {{"note", "smoke"}});
  REQUIRE_FALSE(result.aborted);
  REQUIRE(result.curve.epochs.size() == 15);
  CHECK(result.curve.epochs.back().loss < 0.8 * result.curve.epochs.front().loss);
  CHECK(result.best_epoch == 15);
  CHECK(fs::exists(dir / kCheckpointDir));
  CHECK(read_json_file(dir / kRunConfigFile).at("note") == "smoke");
  const auto curve = LearningCurve::read_csv(dir / kCurveFile);
  CHECK(curve.epochs.size() == 15);

  Detector<double> reloaded(tiny_config(), 99);
  reloaded.load(dir / kCheckpointDir);
  for (std::size_t i = 0; i < model.parameters().size(); ++i) {
    CHECK(reloaded.parameters()[i].second.value().cast<float>() == model.parameters()[i].second.value().cast<float>());
  }

  // Same seed, same curve.
  Detector<double> again(tiny_config(), 1);
  const auto second = train(again, frames, {}, tc);
  for (std::size_t e = 0; e < 15; ++e) CHECK(second.curve.epochs[e].loss == result.curve.epochs[e].loss);
}

TEST_CASE("validation keeps the best epoch") {
  const auto frames = training_frames(2);
  TrainConfig tc;
  tc.epochs = 3;
  tc.batch_size = 2;
  tc.val_every = 1;
  Detector<double> model(tiny_config(), 2);
  const auto result = train(model, frames, frames, tc);
  REQUIRE(result.curve.epochs.size() == 3);
  for (const auto& e : result.curve.epochs) CHECK_FALSE(std::isnan(e.val_ap_mean));
  double best = -1;
  for (const auto& e : result.curve.epochs) best = std::max(best, e.val_ap_mean);
  CHECK(result.best_val == best);
  CHECK(result.curve.epochs[result.best_epoch - 1].val_ap_mean == best);
}

TEST_CASE("non-finite loss aborts training") {
  const auto frames = training_frames(2);
  TrainConfig tc;
  tc.epochs = 2;
  Detector<double> model(tiny_config(), 3);
  for (auto& [name, t] : model.parameters()) {
    if (name.rfind("head.cls", 0) == 0) t.mutable_value().setConstant(std::numeric_limits<double>::quiet_NaN());
  }
  const auto result = train(model, frames, {}, tc);
  CHECK(result.aborted);
  CHECK(result.abort_reason.find("non-finite") != std::string::npos);
  CHECK(result.curve.epochs.empty());
  CHECK_THROWS_AS(train(model, std::vector<Frame>{}, {}, tc), std::invalid_argument);
}

TEST_CASE("assignment probe gives one matched query per object") {
  for (const char* priors : {"none", "feat,loc,query"}) {
    DetectorConfig c = tiny_config();
    c.priors = parse_prior_flags(priors);
    c.num_vanilla = 6;
    Detector<double> model(c, 4);
    const Frame f = make_test_frame({make_cuboid({9, 2.5, 0.9}, {4, 2, 1.8}), make_cuboid({8, -3, 0.9}, {0.8, 0.8, 1.8}, 0, ObjectClass::kHuman)},
                                    1, 32, 16);
    const auto census = footnote_assignment_probe(model, f);
    REQUIRE(census.per_gt.size() == 2);
    CHECK(census.positives == 2);
    CHECK(census.negatives == census.total_queries - 2);
    for (const auto& g : census.per_gt) {
      CHECK(g.matched_queries == 1);
      CHECK(g.ray_negatives <= g.ray_queries);
      if (std::string(priors) == "none") CHECK(g.ray_queries == 0);
      else CHECK(g.ray_queries == 2);
    }
  }
}
