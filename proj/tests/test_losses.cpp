// Copyright 2026 The Stif Authors
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
#include "stif/losses.hpp"

#include <gtest/gtest.h>

#include <cmath>

#include "gradcheck.hpp"
#include "stif/rng.hpp"

using namespace stif;
using namespace stif::loss;
using stif::ad::Tape;
using stif::ad::Tensor;

namespace {

net::AffinityMatrix make_affinity(Tape& t, int K, std::vector<double> logits,
                                  std::vector<uint8_t> vr, std::vector<uint8_t> vc,
                                  bool requires_grad = false) {
  net::AffinityMatrix am;
  am.logits = t.input({K + 1, K + 1}, std::move(logits), requires_grad);
  am.valid_rows = std::move(vr);
  am.valid_cols = std::move(vc);
  return am;
}

GroundTruthAssociation diag_gt(int K, int n_matched, std::vector<uint8_t> vr,
                               std::vector<uint8_t> vc) {
  GroundTruthAssociation gt;
  gt.K = K;
  gt.matrix.assign(static_cast<size_t>(K + 1) * (K + 1), 0.0);
  gt.valid_rows = std::move(vr);
  gt.valid_cols = std::move(vc);
  for (int i = 0; i < n_matched; ++i) gt.matrix[static_cast<size_t>(i) * (K + 1) + i] = 1.0;
  return gt;
}

}  // namespace

TEST(TrackingLoss, AllZeroTwoByTwoIsLogQuarter) {
  // Both softmaxes are uniform (0.5); the product entry is 0.25.
  Tape t;
  auto am = make_affinity(t, 1, {0, 0, 0, 0}, {1, 1}, {1, 1});
  auto gt = diag_gt(1, 1, {1, 1}, {1, 1});
  Tensor l = tracking_loss(t, am, gt);
  EXPECT_NEAR(t.item(l), -std::log(0.25), 1e-9);
}

TEST(TrackingLoss, SaturatedLogitsDriveLossToZero) {
  int K = 2, n = K + 1;
  Tape t;
  std::vector<double> logits(static_cast<size_t>(n) * n, -40.0);
  logits[0 * n + 0] = 40.0;
  logits[1 * n + 1] = 40.0;
  auto am = make_affinity(t, K, logits, {1, 1, 1}, {1, 1, 1});
  auto gt = diag_gt(K, 2, {1, 1, 1}, {1, 1, 1});
  EXPECT_LT(t.item(tracking_loss(t, am, gt)), 1e-6);
  EXPECT_GE(t.item(tracking_loss(t, am, gt)), 0.0);
}

TEST(TrackingLoss, FullMatrixConstantShiftInvariance) {
  Rng rng(3);
  int K = 3, n = K + 1;
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<double> logits(static_cast<size_t>(n) * n);
    for (auto& v : logits) v = rng.uniform(-2, 2);
    std::vector<double> shifted = logits;
    double c = rng.uniform(-7, 7);
    for (auto& v : shifted) v += c;
    std::vector<uint8_t> vr{1, 1, 0, 1}, vc{1, 1, 1, 1};
    GroundTruthAssociation gt;
    gt.K = K;
    gt.matrix.assign(static_cast<size_t>(n) * n, 0.0);
    gt.valid_rows = vr;
    gt.valid_cols = vc;
    gt.matrix[0 * n + 1] = 1.0;  // obj0 <-> prev1
    gt.matrix[1 * n + K] = 1.0;  // obj1 is a birth
    gt.matrix[K * n + 0] = 1.0;  // prev0 died
    gt.matrix[K * n + 2] = 1.0;  // prev2 died
    Tape t;
    auto am1 = make_affinity(t, K, logits, vr, vc);
    auto am2 = make_affinity(t, K, shifted, vr, vc);
    double l1 = t.item(tracking_loss(t, am1, gt));
    double l2 = t.item(tracking_loss(t, am2, gt));
    EXPECT_NEAR(l1, l2, 1e-12);
    EXPECT_GE(l1, 0.0);
  }
}

TEST(TrackingLoss, BadGroundTruthRowSumThrows) {
  Tape t;
  int K = 2, n = K + 1;
  auto am = make_affinity(t, K, std::vector<double>(static_cast<size_t>(n) * n, 0.0),
                          {1, 1, 1}, {1, 1, 1});
  GroundTruthAssociation gt = diag_gt(K, 2, {1, 1, 1}, {1, 1, 1});
  gt.matrix[0 * n + 1] = 1.0;  // row 0 now sums to 2
  EXPECT_THROW(tracking_loss(t, am, gt), InvalidArgument);

  GroundTruthAssociation gt2 = diag_gt(K, 2, {1, 1, 1}, {1, 1, 1});
  gt2.matrix[2 * n + 2] = 1.0;  // corner must stay 0
  EXPECT_THROW(tracking_loss(t, am, gt2), InvalidArgument);
}

TEST(TrackingLoss, MaskMismatchThrows) {
  Tape t;
  int K = 1, n = 2;
  auto am = make_affinity(t, K, std::vector<double>(static_cast<size_t>(n) * n, 0.0), {1, 1}, {1, 1});
  auto gt = diag_gt(K, 1, {0, 1}, {1, 1});
  EXPECT_THROW(tracking_loss(t, am, gt), InvalidArgument);
}

TEST(TrackingLoss, GradientsMatchFiniteDifferences) {
  Rng rng(7);
  int K = 3, n = K + 1;
  std::vector<uint8_t> vr{1, 1, 1, 1}, vc{1, 1, 0, 1};
  GroundTruthAssociation gt;
  gt.K = K;
  gt.matrix.assign(static_cast<size_t>(n) * n, 0.0);
  gt.valid_rows = vr;
  gt.valid_cols = vc;
  gt.matrix[0 * n + 1] = 1.0;
  gt.matrix[1 * n + 0] = 1.0;
  gt.matrix[2 * n + K] = 1.0;
  for (int trial = 0; trial < 5; ++trial) {
    std::vector<double> x0(static_cast<size_t>(n) * n);
    for (auto& v : x0) v = rng.uniform(-2, 2);
    auto build = [&](Tape& t, const std::vector<double>& x) -> stif::testing::BuiltGraph {
      auto am = make_affinity(t, K, x, vr, vc, true);
      return {tracking_loss(t, am, gt), {am.logits}};
    };
    EXPECT_LE(stif::testing::gradcheck(build, x0), 1e-4);
  }
}

namespace {

geom::Box3D box_at(double x, double y, double z, double yaw = 0.3) {
  return {x, y, z, 4.2, 1.8, 1.5, yaw};
}

}  // namespace

TEST(ConsistencyLoss, PerfectPredictionIsExactlyZero) {
  Tape t;
  std::vector<geom::Box3D> cur{box_at(10, 2, 0.7), box_at(20, -4, 0.7)};
  std::vector<geom::Box3D> prev{box_at(8, 2, 0.7), box_at(19, -4, 0.7)};
  Tensor zc = t.zeros({4, 7});
  Tensor zp = t.zeros({4, 7});
  std::vector<ConsistencyPair> pairs{{0, 0, cur[0], prev[0]}, {1, 1, cur[1], prev[1]}};
  Tensor l = temporal_consistency_loss(t, cur, zc, {prev}, {zp}, {pairs});
  EXPECT_DOUBLE_EQ(t.item(l), 0.0);
}

TEST(ConsistencyLoss, EmptyCorrespondenceIsZero) {
  Tape t;
  std::vector<geom::Box3D> cur{box_at(10, 2, 0.7)};
  Tensor z = t.zeros({2, 7});
  Tensor l = temporal_consistency_loss(t, cur, z, {cur}, {z}, {{}});
  EXPECT_DOUBLE_EQ(t.item(l), 0.0);
}

TEST(ConsistencyLoss, GlobalTranslationInvariance) {
  Rng rng(5);
  for (int trial = 0; trial < 5; ++trial) {
    auto mk = [&](double dx, double dy, double dz) {
      std::vector<geom::Box3D> cur{box_at(10 + dx, 2 + dy, 0.7 + dz, 0.4),
                                   box_at(22 + dx, -3 + dy, 0.6 + dz, -0.9)};
      std::vector<geom::Box3D> prev{box_at(9 + dx, 2.5 + dy, 0.7 + dz, 0.5),
                                    box_at(21 + dx, -2.5 + dy, 0.6 + dz, -1.0)};
      return std::make_pair(cur, prev);
    };
    std::vector<double> refc(2 * 7), refp(2 * 7);
    for (auto& v : refc) v = rng.uniform(-0.3, 0.3);
    for (auto& v : refp) v = rng.uniform(-0.3, 0.3);
    auto [cur0, prev0] = mk(0, 0, 0);
    auto [cur1, prev1] = mk(5.5, -7.25, 1.5);  // translate predictions only
    std::vector<ConsistencyPair> pairs{{0, 0, box_at(10, 2, 0.7), box_at(9, 2.4, 0.7)},
                                       {1, 1, box_at(22, -3, 0.6), box_at(21, -2.4, 0.6)}};
    Tape t;
    Tensor rc = t.constant({2, 7}, refc);
    Tensor rp = t.constant({2, 7}, refp);
    double l0 = t.item(temporal_consistency_loss(t, cur0, rc, {prev0}, {rp}, {pairs}));
    double l1 = t.item(temporal_consistency_loss(t, cur1, rc, {prev1}, {rp}, {pairs}));
    EXPECT_NEAR(l0, l1, 1e-12);
  }
}

TEST(ConsistencyLoss, UniformOneMeterOffsetGivesOne) {
  // GT: the same box in both frames (all relative corner distances 0).
  // Prediction: the current box translated by 1 m, so every per-corner
  // distance is exactly 1; mean over corners = 1.0.
  Tape t;
  geom::Box3D b = box_at(15, 1, 0.8, 0.6);
  geom::Box3D moved = b;
  moved.x += 1.0;
  std::vector<geom::Box3D> cur{moved}, prev{b};
  Tensor z = t.zeros({1, 7});
  std::vector<ConsistencyPair> pairs{{0, 0, b, b}};
  Tensor l = temporal_consistency_loss(t, cur, z, {prev}, {z}, {pairs});
  EXPECT_NEAR(t.item(l), 1.0, 1e-12);
}

TEST(ConsistencyLoss, GradientsMatchFiniteDifferences) {
  Rng rng(9);
  std::vector<geom::Box3D> cur{box_at(10, 2, 0.7, 0.2), box_at(20, -4, 0.6, 1.1)};
  std::vector<geom::Box3D> prev{box_at(9, 2.2, 0.7, 0.3), box_at(19, -3.7, 0.6, 1.0)};
  std::vector<ConsistencyPair> pairs{{0, 0, box_at(10, 2, 0.7), box_at(9, 2.2, 0.7)},
                                     {1, 1, box_at(20, -4, 0.6), box_at(19, -3.7, 0.6)}};
  for (int trial = 0; trial < 5; ++trial) {
    std::vector<double> x0(2 * 2 * 7);
    for (auto& v : x0) v = rng.uniform(-0.4, 0.4);
    auto build = [&](Tape& t, const std::vector<double>& x) -> stif::testing::BuiltGraph {
      Tensor rc = t.input({2, 7}, {x.begin(), x.begin() + 14}, true);
      Tensor rp = t.input({2, 7}, {x.begin() + 14, x.end()}, true);
      return {temporal_consistency_loss(t, cur, rc, {prev}, {rp}, {pairs}), {rc, rp}};
    };
    if (!stif::testing::instance_is_smooth(build, x0, 1e-4)) continue;
    EXPECT_LE(stif::testing::gradcheck(build, x0), 1e-4);
  }
}

namespace {

net::HeadsOut manual_heads(Tape& t, int K, std::vector<double> vel, std::vector<double> attr,
                           std::vector<double> box, int n_attr, bool requires_grad = false) {
  net::HeadsOut h;
  h.velocity = t.input({K, 3}, std::move(vel), requires_grad);
  h.attribute_logits = t.input({K, n_attr}, std::move(attr), requires_grad);
  h.box_refine = t.input({K, 7}, std::move(box), requires_grad);
  return h;
}

}  // namespace

TEST(AuxLosses, PerfectPredictionsNearZero) {
  net::NetConfig cfg;
  cfg.n_attributes = 3;
  int K = 2;
  Tape t;
  std::vector<geom::Box3D> det{box_at(10, 2, 0.7), box_at(20, -1, 0.6)};
  AuxTargets tg;
  tg.matched = {1, 1};
  tg.velocity = {{1, 0, 0}, {0, 2, 0}};
  tg.attribute = {0, 1};
  tg.boxes = det;  // refinement target: zero delta
  // velocity exactly right, attribute saturated at the right class, zero deltas
  auto h = manual_heads(t, K, {1, 0, 0, 0, 2, 0}, {100, -100, -100, -100, 100, -100},
                        std::vector<double>(static_cast<size_t>(K) * 7, 0.0), 3);
  EXPECT_NEAR(t.item(aux_losses(t, h, det, tg, cfg)), 0.0, 1e-12);
}

TEST(AuxLosses, UniformAttributeLogitsGiveLnThree) {
  net::NetConfig cfg;
  cfg.n_attributes = 3;
  int K = 2;
  Tape t;
  std::vector<geom::Box3D> det{box_at(10, 2, 0.7), box_at(20, -1, 0.6)};
  AuxTargets tg;
  tg.matched = {1, 1};
  tg.velocity = {{0, 0, 0}, {0, 0, 0}};
  tg.attribute = {2, 0};
  tg.boxes = det;
  auto h = manual_heads(t, K, std::vector<double>(6, 0.0), std::vector<double>(6, 0.25),
                        std::vector<double>(static_cast<size_t>(K) * 7, 0.0), 3);
  EXPECT_NEAR(t.item(aux_losses(t, h, det, tg, cfg)), std::log(3.0), 1e-9);
}

TEST(AuxLosses, VelocityOffByUnitVectorGivesThird) {
  net::NetConfig cfg;
  cfg.n_attributes = 3;
  int K = 1;
  Tape t;
  std::vector<geom::Box3D> det{box_at(10, 2, 0.7)};
  AuxTargets tg;
  tg.matched = {1};
  tg.velocity = {{3, -1, 0.5}};
  tg.attribute = {0};
  tg.boxes = det;
  auto h = manual_heads(t, K, {4, -1, 0.5}, {100, -100, -100},
                        std::vector<double>(7, 0.0), 3);
  EXPECT_NEAR(t.item(aux_losses(t, h, det, tg, cfg)), 1.0 / 3.0, 1e-9);
}

TEST(AuxLosses, YawComparedAsAngularDifference) {
  net::NetConfig cfg;
  cfg.n_attributes = 3;
  int K = 1;
  Tape t;
  geom::Box3D d = box_at(10, 2, 0.7, 3.1);
  geom::Box3D g = d;
  g.yaw = -3.1;  // only 2*pi - 6.2 ~ 0.083 rad away around the circle
  AuxTargets tg;
  tg.matched = {1};
  tg.velocity = {{0, 0, 0}};
  tg.attribute = {0};
  tg.boxes = {g};
  auto h = manual_heads(t, K, {0, 0, 0}, {100, -100, -100}, std::vector<double>(7, 0.0), 3);
  double delta = wrap_angle(3.1 - (-3.1));
  double want = delta * delta / 7.0;  // one row, averaged over 7 box params
  EXPECT_NEAR(t.item(aux_losses(t, h, {d}, tg, cfg)), want, 1e-9);
}

TEST(AuxLosses, UnmatchedRowsExcluded) {
  net::NetConfig cfg;
  cfg.n_attributes = 3;
  int K = 2;
  Tape t;
  std::vector<geom::Box3D> det{box_at(10, 2, 0.7), box_at(50, 9, 0.6)};
  AuxTargets tg;
  tg.matched = {1, 0};  // second row is a false positive
  tg.velocity = {{1, 0, 0}, {0, 0, 0}};
  tg.attribute = {0, 0};
  tg.boxes = det;
  auto h = manual_heads(t, K, {1, 0, 0, 99, 99, 99}, {100, -100, -100, 0, 0, 0},
                        {0, 0, 0, 0, 0, 0, 0, 5, 5, 5, 5, 5, 5, 5}, 3);
  EXPECT_NEAR(t.item(aux_losses(t, h, det, tg, cfg)), 0.0, 1e-12);
}

TEST(CombinedLoss, SumsPartsExactly) {
  Tape t;
  Tensor a = t.scalar(0.75), b = t.scalar(1.25), c = t.scalar(-0.5);
  EXPECT_DOUBLE_EQ(t.item(combined_loss(t, {a, b, c})), 1.5);
  EXPECT_DOUBLE_EQ(t.item(combined_loss(t, {t.scalar(0.0), t.scalar(0.0)})), 0.0);
}

TEST(CombinedLoss, GradientOfSumIsSumOfGradients) {
  Rng rng(11);
  for (int trial = 0; trial < 5; ++trial) {
    std::vector<double> x0(8);
    for (auto& v : x0) v = rng.uniform(0.2, 2.0);
    auto build = [&](Tape& t, const std::vector<double>& x) -> stif::testing::BuiltGraph {
      Tensor a = t.input({2, 4}, x, true);
      Tensor p1 = t.mean(a);
      Tensor p2 = t.mse(a, t.constant({2, 4}, std::vector<double>(8, 1.0)), {1, 1});
      Tensor p3 = t.mul_scalar(t.sum(t.log_eps(a)), 0.1);
      return {combined_loss(t, {p1, p2, p3}), {a}};
    };
    EXPECT_LE(stif::testing::gradcheck(build, x0), 1e-4);
  }
}
