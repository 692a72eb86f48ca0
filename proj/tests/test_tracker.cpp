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
#include "stif/tracker.hpp"

#include <gtest/gtest.h>

#include <set>

using namespace stif;
using namespace stif::track;

namespace {

net::NetConfig test_cfg() {
  net::NetConfig c;
  c.d = 16;
  c.heads = 2;
  c.K = 8;
  c.d_reid = 8;
  c.n_categories = 3;
  c.affinity_hidden = 8;
  return c;
}

sim::Scenario tiny_scene(uint64_t seed, double dropout = 0.0) {
  sim::ScenarioConfig c;
  c.n_objects = 4;
  c.n_frames = 12;
  c.seed = seed;
  c.K = 8;
  c.d_reid = 8;
  c.dropout_prob = dropout;
  return sim::generate(c);
}

}  // namespace

TEST(ApplyRefinement, IdentityClampAndYawWrap) {
  geom::Box3D b{5, 2, 0.8, 4, 2, 1.5, 1.0};
  geom::Box3D same = apply_refinement(b, {0, 0, 0, 0, 0, 0, 0});
  EXPECT_DOUBLE_EQ(same.x, b.x);
  EXPECT_DOUBLE_EQ(same.yaw, b.yaw);

  geom::Box3D wrapped = apply_refinement(b, {0, 0, 0, 0, 0, 0, 2 * std::numbers::pi});
  EXPECT_NEAR(wrapped.yaw, b.yaw, 1e-12);

  geom::Box3D clamped = apply_refinement(b, {0, 0, 0, -10, 0, 0, 0});
  EXPECT_DOUBLE_EQ(clamped.l, 0.1);
}

TEST(Tracker, ColdStartSpawnsSequentialIds) {
  net::NetConfig cfg = test_cfg();
  net::Weights wts = net::init_weights(cfg, 5);
  Tracker tk(cfg, wts);
  sim::Scenario s = tiny_scene(3);
  auto out = tk.step(s.det[0]);
  ASSERT_EQ(out.rows.size(), s.det[0].detections.size());
  for (size_t i = 0; i < out.rows.size(); ++i) {
    EXPECT_EQ(out.rows[i].track_id, static_cast<int>(i));
    EXPECT_TRUE(out.rows[i].newborn);
  }
}

TEST(Tracker, EmptyFrameIncrementsMissedAndNoEarlyDeath) {
  net::NetConfig cfg = test_cfg();
  net::Weights wts = net::init_weights(cfg, 6);
  TrackerConfig tc;
  tc.max_missed = 3;
  Tracker tk(cfg, wts, tc);
  sim::Scenario s = tiny_scene(4);
  tk.step(s.det[0]);
  size_t n_tracks = tk.tracks().size();
  ASSERT_GT(n_tracks, 0u);
  sim::DetectionFrame empty;
  for (int k = 1; k <= 3; ++k) {
    empty.timestamp = k * 0.5;
    tk.step(empty);
    for (const auto& t : tk.tracks()) {
      EXPECT_EQ(t.missed, k);
      EXPECT_TRUE(t.alive());
    }
  }
  empty.timestamp = 2.0;
  tk.step(empty);  // missed = 4 > 3: dead
  for (const auto& t : tk.tracks()) EXPECT_FALSE(t.alive());
}

TEST(Tracker, NonIncreasingTimestampThrows) {
  net::NetConfig cfg = test_cfg();
  net::Weights wts = net::init_weights(cfg, 7);
  Tracker tk(cfg, wts);
  sim::Scenario s = tiny_scene(5);
  tk.step(s.det[0]);
  EXPECT_THROW(tk.step(s.det[0]), InvalidArgument);
}

TEST(Tracker, IdsNeverReusedAndHistoryBounded) {
  net::NetConfig cfg = test_cfg();
  net::Weights wts = net::init_weights(cfg, 8);
  TrackerConfig tc;
  tc.tau = 5;
  tc.min_confidence = 0.0;
  Tracker tk(cfg, wts, tc);
  sim::Scenario s = tiny_scene(9, 0.3);
  std::set<int> seen;
  int max_id = -1;
  for (const auto& f : s.det) {
    auto out = tk.step(f);
    std::set<int> this_frame;
    for (const auto& r : out.rows) {
      EXPECT_TRUE(this_frame.insert(r.track_id).second) << "duplicate id in one frame";
      if (!seen.count(r.track_id)) {
        EXPECT_GT(r.track_id, max_id) << "ids must be fresh and increasing";
        max_id = r.track_id;
        seen.insert(r.track_id);
      }
    }
    for (const auto& t : tk.tracks())
      EXPECT_LE(static_cast<int>(t.history.size()), tc.tau);
  }
}

TEST(Tracker, LowConfidenceDetectionsDoNotFoundTracks) {
  net::NetConfig cfg = test_cfg();
  net::Weights wts = net::init_weights(cfg, 10);
  TrackerConfig tc;
  tc.min_confidence = 0.9;
  Tracker tk(cfg, wts, tc);
  sim::Scenario s = tiny_scene(11);
  sim::DetectionFrame f = s.det[0];
  for (auto& d : f.detections) d.confidence = 0.5;
  auto out = tk.step(f);
  EXPECT_TRUE(out.rows.empty());
  EXPECT_TRUE(tk.tracks().empty());
}

TEST(Tracker, RunsWholeScenarioWithFiniteOutputs) {
  net::NetConfig cfg = test_cfg();
  net::Weights wts = net::init_weights(cfg, 12);
  Tracker tk(cfg, wts);
  sim::Scenario s = tiny_scene(13, 0.1);
  for (const auto& f : s.det) {
    auto out = tk.step(f);
    for (const auto& r : out.rows) {
      EXPECT_TRUE(r.box.valid());
      EXPECT_TRUE(std::isfinite(r.velocity[0]));
      EXPECT_GE(r.attribute, 0);
      EXPECT_LT(r.attribute, cfg.n_attributes);
    }
  }
}

TEST(GreedyBaseline, TracksCleanSceneConsistently) {
  GreedyBaselineTracker tk({}, 2.0);
  sim::Scenario s = tiny_scene(14);
  // with no noise and moderate speeds, greedy should hold identities for the
  // objects that stay visible; ids present in consecutive frames must refer
  // to a consistent gt identity
  std::map<int, int> track_to_gt;
  int mismatches = 0, checks = 0;
  for (const auto& f : s.det) {
    auto out = tk.step(f);
    for (const auto& r : out.rows) {
      int gt = f.detections[r.detection_index].gt_identity;
      auto [it, fresh] = track_to_gt.emplace(r.track_id, gt);
      if (!fresh) {
        ++checks;
        if (it->second != gt) ++mismatches;
      }
    }
  }
  EXPECT_GT(checks, 10);
  EXPECT_EQ(mismatches, 0);
}
