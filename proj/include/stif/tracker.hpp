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
#pragma once

#include <array>
#include <map>
#include <optional>
#include <vector>

#include "stif/hungarian.hpp"
#include "stif/net.hpp"
#include "stif/simulator.hpp"

// Online inference: per frame, detections are embedded and passed through the
// spatial flow once; their features are matched against the spatial features
// stored in the trajectory memory over the past tau frames via the
// light-weight temporal flow, the per-frame dual-softmax scores are summed
// into a semi-global similarity, and the Hungarian assignment extends tracks.
namespace stif::track {

struct TrackerConfig {
  int tau = 5;                    // association horizon, frames
  double match_threshold = 0.1;   // minimum summed similarity
  int max_missed = 3;             // frames a track may go unmatched
  double min_confidence = 0.3;    // detection confidence to found a track
};

struct TrackEntry {
  double timestamp = 0.0;
  geom::Box3D box;                // refined, world frame
  std::vector<double> feature;    // spatial feature, d
  double confidence = 0.0;
};

struct Track {
  enum class State { kActive, kLost, kDead };
  int id = -1;
  std::vector<TrackEntry> history;  // time-ordered, at most tau entries
  State state = State::kActive;
  int missed = 0;
  std::array<double, 3> velocity{0, 0, 0};
  int attribute = 0;
  int category = 0;

  bool alive() const { return state != State::kDead; }
};

// Additive refinement with dimension floor and yaw renormalization.
inline geom::Box3D apply_refinement(const geom::Box3D& b, const std::array<double, 7>& delta) {
  geom::Box3D out = b;
  out.x += delta[0];
  out.y += delta[1];
  out.z += delta[2];
  out.l = std::max(0.1, b.l + delta[3]);
  out.w = std::max(0.1, b.w + delta[4]);
  out.h = std::max(0.1, b.h + delta[5]);
  out.yaw = wrap_angle(b.yaw + delta[6]);
  return out;
}

struct OutputRow {
  int track_id = -1;
  int detection_index = -1;
  geom::Box3D box;       // refined
  geom::Box3D box_raw;   // detection as reported
  double confidence = 0.0;
  std::array<double, 3> velocity{0, 0, 0};
  int attribute = 0;
  int category = 0;
  bool newborn = false;
};

struct StepOutput {
  std::vector<OutputRow> rows;           // one per tracked detection
  std::vector<std::pair<int, int>> assignments;  // (detection index, track id)
};

class Tracker {
 public:
  Tracker(const net::NetConfig& net_cfg, const net::Weights& weights, TrackerConfig cfg = {})
      : net_cfg_(net_cfg), weights_(&weights), cfg_(cfg) {
    net_cfg_.validate();
    if (cfg_.tau < 1 || cfg_.max_missed < 0) throw InvalidArgument("TrackerConfig: bad values");
  }

  const std::vector<Track>& tracks() const { return tracks_; }

  StepOutput step(const sim::DetectionFrame& frame) {
    if (has_time_ && !(frame.timestamp > last_time_))
      throw InvalidArgument("Tracker::step: timestamps must strictly increase");
    has_time_ = true;
    last_time_ = frame.timestamp;

    int n = static_cast<int>(frame.detections.size());
    if (n > net_cfg_.K) throw InvalidArgument("Tracker::step: frame exceeds K slots");

    StepOutput out;
    ad::Tape tape;
    net::TapeWeights w(tape, *weights_, false);

    // per-frame heavy pass: embedding + spatial flow, once
    std::vector<std::vector<double>> spatial_rows;
    HeadValues hv;
    hv.velocity.assign(static_cast<size_t>(net_cfg_.K) * 3, 0.0);
    hv.attr.assign(static_cast<size_t>(net_cfg_.K) * net_cfg_.n_attributes, 0.0);
    hv.refine.assign(static_cast<size_t>(net_cfg_.K) * 7, 0.0);
    if (n > 0) {
      auto emb = net::embed_frame(tape, sim::to_frame_input(frame), w, net_cfg_);
      ad::Tensor sp = net::spatial_flow(tape, emb.fused, emb.valid, w, net_cfg_);
      auto vals = tape.val(sp);
      for (int i = 0; i < n; ++i)
        spatial_rows.emplace_back(vals.begin() + static_cast<size_t>(i) * net_cfg_.d,
                                  vals.begin() + static_cast<size_t>(i + 1) * net_cfg_.d);

      // memory entries of alive tracks, grouped by stored timestamp
      std::map<double, std::vector<std::pair<int, const TrackEntry*>>, std::greater<>> by_time;
      for (int ti = 0; ti < static_cast<int>(tracks_.size()); ++ti) {
        if (!tracks_[ti].alive()) continue;
        for (const auto& e : tracks_[ti].history) by_time[e.timestamp].emplace_back(ti, &e);
      }
      while (static_cast<int>(by_time.size()) > cfg_.tau) by_time.erase(std::prev(by_time.end()));

      std::vector<std::vector<double>> similarity(n, std::vector<double>(tracks_.size(), 0.0));
      bool heads_done = false;
      std::vector<uint8_t> valid_cur(net_cfg_.K, 0);
      for (int i = 0; i < n; ++i) valid_cur[i] = 1;
      ad::Tensor cur_padded = pad_rows(tape, spatial_rows, net_cfg_.K);

      for (const auto& [ts, entries] : by_time) {
        int m = static_cast<int>(entries.size());
        if (m == 0) continue;
        if (m > net_cfg_.K) continue;  // cannot exceed K by construction
        std::vector<std::vector<double>> prev_rows;
        prev_rows.reserve(m);
        for (const auto& [ti, e] : entries) prev_rows.push_back(e->feature);
        ad::Tensor prev_padded = pad_rows(tape, prev_rows, net_cfg_.K);
        std::vector<uint8_t> valid_prev(net_cfg_.K, 0);
        for (int j = 0; j < m; ++j) valid_prev[j] = 1;
        ad::Tensor motion = net::motion_modeling(tape, prev_padded, frame.timestamp - ts, w, net_cfg_);
        auto tf = net::temporal_flow(tape, cur_padded, motion, valid_cur, valid_prev, w, net_cfg_);
        ad::Tensor prob = net::affinity_product(tape, tf.affinity);
        auto pv = tape.val(prob);
        int stride = net_cfg_.K + 1;
        for (int i = 0; i < n; ++i)
          for (int j = 0; j < m; ++j)
            similarity[i][entries[j].first] += pv[static_cast<size_t>(i) * stride + j];
        if (!heads_done) {  // most recent stored frame drives the heads
          heads_done = true;
          auto hd = net::heads(tape, tf.aggregated, w, net_cfg_);
          hv.velocity.assign(tape.val(hd.velocity).begin(), tape.val(hd.velocity).end());
          hv.attr.assign(tape.val(hd.attribute_logits).begin(), tape.val(hd.attribute_logits).end());
          hv.refine.assign(tape.val(hd.box_refine).begin(), tape.val(hd.box_refine).end());
        }
      }

      // Hungarian on negated similarity; pairs below threshold are priced as
      // just-worse-than-nothing so they are never preferred over leaving the
      // detection unmatched, then filtered from the result.
      std::vector<int> det_track(n, -1);
      if (!tracks_.empty()) {
        std::vector<int> alive_idx;
        for (int ti = 0; ti < static_cast<int>(tracks_.size()); ++ti)
          if (tracks_[ti].alive()) alive_idx.push_back(ti);
        if (!alive_idx.empty()) {
          std::vector<std::vector<double>> cost(n, std::vector<double>(alive_idx.size(), 1.0));
          for (int i = 0; i < n; ++i)
            for (size_t a = 0; a < alive_idx.size(); ++a) {
              double s = similarity[i][alive_idx[a]];
              cost[i][a] = s >= cfg_.match_threshold ? -s : 1.0;
            }
          Assignment asg = hungarian(cost);
          for (auto [i, a] : asg.pairs)
            if (cost[i][a] < 0.0) det_track[i] = alive_idx[a];
        }
      }

      process_assignments(frame, spatial_rows, det_track, hv, &out);
    } else {
      process_assignments(frame, spatial_rows, {}, hv, &out);
    }
    return out;
  }

 private:
  struct HeadValues {
    std::vector<double> velocity, attr, refine;
  };
  static ad::Tensor pad_rows(ad::Tape& tape, const std::vector<std::vector<double>>& rows, int K) {
    int d = rows.empty() ? 1 : static_cast<int>(rows[0].size());
    std::vector<double> flat(static_cast<size_t>(K) * d, 0.0);
    for (size_t i = 0; i < rows.size(); ++i)
      std::copy(rows[i].begin(), rows[i].end(), flat.begin() + i * d);
    return tape.constant({K, d}, std::move(flat));
  }

  void process_assignments(const sim::DetectionFrame& frame,
                           const std::vector<std::vector<double>>& spatial_rows,
                           std::vector<int> det_track, const HeadValues& hv, StepOutput* out) {
    int n = static_cast<int>(frame.detections.size());
    det_track.resize(n, -1);
    std::vector<uint8_t> matched(tracks_.size(), 0);

    for (int i = 0; i < n; ++i) {
      const auto& det = frame.detections[i];
      int ti = det_track[i];
      bool newborn = false;
      if (ti < 0) {
        if (det.confidence < cfg_.min_confidence) continue;
        Track t;
        t.id = next_id_++;
        t.state = Track::State::kActive;
        t.category = det.category;
        tracks_.push_back(std::move(t));
        ti = static_cast<int>(tracks_.size()) - 1;
        matched.push_back(1);
        newborn = true;
      } else {
        matched[ti] = 1;
      }
      Track& tr = tracks_[ti];
      std::array<double, 7> delta{0, 0, 0, 0, 0, 0, 0};
      std::array<double, 3> vel{0, 0, 0};
      for (int k = 0; k < 7; ++k) delta[k] = hv.refine[static_cast<size_t>(i) * 7 + k];
      for (int k = 0; k < 3; ++k) vel[k] = hv.velocity[static_cast<size_t>(i) * 3 + k];
      int attr = argmax_attr(hv, i);
      geom::Box3D refined = apply_refinement(det.box3d, delta);
      tr.state = Track::State::kActive;
      tr.missed = 0;
      tr.velocity = vel;
      tr.attribute = attr;
      tr.history.push_back({frame.timestamp, refined, spatial_rows[i], det.confidence});
      while (static_cast<int>(tr.history.size()) > cfg_.tau)
        tr.history.erase(tr.history.begin());

      OutputRow row;
      row.track_id = tr.id;
      row.detection_index = i;
      row.box = refined;
      row.box_raw = det.box3d;
      row.confidence = det.confidence;
      row.velocity = vel;
      row.attribute = attr;
      row.category = det.category;
      row.newborn = newborn;
      out->rows.push_back(row);
      out->assignments.emplace_back(i, tr.id);
    }

    for (size_t ti = 0; ti < tracks_.size(); ++ti) {
      Track& tr = tracks_[ti];
      if (!tr.alive() || (ti < matched.size() && matched[ti])) continue;
      tr.missed += 1;
      tr.state = tr.missed > cfg_.max_missed ? Track::State::kDead : Track::State::kLost;
    }
  }

  int argmax_attr(const HeadValues& hv, int i) const {
    int best = 0;
    double bv = hv.attr[static_cast<size_t>(i) * net_cfg_.n_attributes];
    for (int k = 1; k < net_cfg_.n_attributes; ++k) {
      double v = hv.attr[static_cast<size_t>(i) * net_cfg_.n_attributes + k];
      if (v > bv) {
        bv = v;
        best = k;
      }
    }
    return best;
  }

  net::NetConfig net_cfg_;
  const net::Weights* weights_;
  TrackerConfig cfg_;
  std::vector<Track> tracks_;
  int next_id_ = 0;
  bool has_time_ = false;
  double last_time_ = 0.0;
};

// No-learning reference tracker: greedy nearest-BEV-center association with a
// distance gate and the same lifecycle rules. Serves as the baseline the
// learned tracker is compared against.
class GreedyBaselineTracker {
 public:
  explicit GreedyBaselineTracker(TrackerConfig cfg = {}, double gate_meters = 2.0)
      : cfg_(cfg), gate_(gate_meters) {}

  StepOutput step(const sim::DetectionFrame& frame) {
    if (has_time_ && !(frame.timestamp > last_time_))
      throw InvalidArgument("GreedyBaselineTracker::step: timestamps must increase");
    has_time_ = true;
    last_time_ = frame.timestamp;
    int n = static_cast<int>(frame.detections.size());

    struct Cand {
      double dist;
      int det, track;
    };
    std::vector<Cand> cands;
    for (int i = 0; i < n; ++i)
      for (size_t t = 0; t < tracks_.size(); ++t) {
        if (!tracks_[t].alive()) continue;
        double dist = geom::bev_center_distance(frame.detections[i].box3d,
                                                tracks_[t].history.back().box);
        if (dist <= gate_) cands.push_back({dist, i, static_cast<int>(t)});
      }
    std::sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
      if (a.dist != b.dist) return a.dist < b.dist;
      if (a.det != b.det) return a.det < b.det;
      return a.track < b.track;
    });
    std::vector<int> det_track(n, -1);
    std::vector<uint8_t> track_used(tracks_.size(), 0);
    for (const auto& c : cands) {
      if (det_track[c.det] >= 0 || track_used[c.track]) continue;
      det_track[c.det] = c.track;
      track_used[c.track] = 1;
    }

    StepOutput out;
    std::vector<uint8_t> matched(tracks_.size(), 0);
    for (int i = 0; i < n; ++i) {
      const auto& det = frame.detections[i];
      int ti = det_track[i];
      bool newborn = false;
      if (ti < 0) {
        if (det.confidence < cfg_.min_confidence) continue;
        Track t;
        t.id = next_id_++;
        t.category = det.category;
        tracks_.push_back(std::move(t));
        ti = static_cast<int>(tracks_.size()) - 1;
        matched.push_back(1);
        newborn = true;
      } else {
        matched[ti] = 1;
      }
      Track& tr = tracks_[ti];
      tr.state = Track::State::kActive;
      tr.missed = 0;
      tr.history.push_back({frame.timestamp, det.box3d, {}, det.confidence});
      if (static_cast<int>(tr.history.size()) > cfg_.tau) tr.history.erase(tr.history.begin());
      OutputRow row;
      row.track_id = tr.id;
      row.detection_index = i;
      row.box = det.box3d;
      row.box_raw = det.box3d;
      row.confidence = det.confidence;
      row.category = det.category;
      row.newborn = newborn;
      out.rows.push_back(row);
      out.assignments.emplace_back(i, tr.id);
    }
    for (size_t ti = 0; ti < tracks_.size(); ++ti) {
      Track& tr = tracks_[ti];
      if (!tr.alive() || (ti < matched.size() && matched[ti])) continue;
      tr.missed += 1;
      tr.state = tr.missed > cfg_.max_missed ? Track::State::kDead : Track::State::kLost;
    }
    return out;
  }

  const std::vector<Track>& tracks() const { return tracks_; }

 private:
  TrackerConfig cfg_;
  double gate_;
  std::vector<Track> tracks_;
  int next_id_ = 0;
  bool has_time_ = false;
  double last_time_ = 0.0;
};

}  // namespace stif::track
