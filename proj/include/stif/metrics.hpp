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

#include <map>
#include <vector>

#include "stif/geometry.hpp"
#include "stif/hungarian.hpp"

// Tracking evaluation. Matching is BEV-center-distance CLEAR-MOT: previous
// gt/hyp pairings persist while still within the gate, the remainder is
// matched per frame by the Hungarian algorithm, and an identity switch is
// counted whenever a gt identity's matched hypothesis id differs from its
// most recent one. AMOTA/AMOTP average the recall-normalized sMOTA and the
// matched distance over a fixed grid of recall thresholds, sweeping the
// hypothesis confidence cutoff (see README for the worked sMOTA example).
namespace stif::metrics {

struct EvalConfig {
  double match_dist = 2.0;        // meters, BEV gate
  int n_recall_thresholds = 40;   // evenly spaced over [0.05, 1.0]
  // The confidence sweep evaluates at most this many candidate cutoffs,
  // chosen as rank quantiles of the pooled confidences. Whenever there are
  // fewer distinct confidences than this, the sweep is exhaustive.
  int sweep_resolution = 200;

  void validate() const {
    if (match_dist <= 0) throw InvalidArgument("EvalConfig: match_dist must be positive");
    if (n_recall_thresholds < 1) throw InvalidArgument("EvalConfig: need thresholds");
    if (sweep_resolution < 1) throw InvalidArgument("EvalConfig: sweep_resolution");
  }

  std::vector<double> recall_thresholds() const {
    std::vector<double> r(n_recall_thresholds);
    if (n_recall_thresholds == 1) {
      r[0] = 1.0;
      return r;
    }
    for (int k = 0; k < n_recall_thresholds; ++k)
      r[k] = 0.05 + (1.0 - 0.05) * k / (n_recall_thresholds - 1);
    return r;
  }
};

struct GtBox {
  int id = -1;
  geom::Box3D box;
};

struct HypBox {
  int id = -1;
  geom::Box3D box;
  double confidence = 1.0;
};

using GtSequence = std::vector<std::vector<GtBox>>;
using HypSequence = std::vector<std::vector<HypBox>>;

struct FrameMatchResult {
  struct Match {
    int gt_id, hyp_id;
    double distance;
  };
  std::vector<Match> matches;
  int misses = 0;
  int false_positives = 0;
  int id_switches = 0;
};

// One frame of CLEAR-MOT matching. `last_matched` carries each gt identity's
// most recent hypothesis id across frames (in/out). When two gt identities
// share a prior hypothesis, the lower gt id claims it.
inline FrameMatchResult match_frame(const std::vector<GtBox>& gt,
                                    const std::vector<HypBox>& hyp,
                                    std::map<int, int>* last_matched,
                                    const EvalConfig& cfg) {
  cfg.validate();
  FrameMatchResult out;
  int n = static_cast<int>(gt.size()), m = static_cast<int>(hyp.size());
  std::vector<uint8_t> gt_done(n, 0), hyp_done(m, 0);
  std::map<int, int> hyp_index;
  for (int j = 0; j < m; ++j) {
    if (!hyp_index.emplace(hyp[j].id, j).second)
      throw InvalidArgument("match_frame: duplicate hypothesis id in frame");
  }

  // 1) persist surviving pairings (ascending gt id for determinism)
  std::vector<int> order(n);
  for (int i = 0; i < n; ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](int a, int b) { return gt[a].id < gt[b].id; });
  for (int i : order) {
    auto it = last_matched->find(gt[i].id);
    if (it == last_matched->end()) continue;
    auto jh = hyp_index.find(it->second);
    if (jh == hyp_index.end() || hyp_done[jh->second]) continue;
    double d = geom::bev_center_distance(gt[i].box, hyp[jh->second].box);
    if (d <= cfg.match_dist) {
      gt_done[i] = 1;
      hyp_done[jh->second] = 1;
      out.matches.push_back({gt[i].id, hyp[jh->second].id, d});
    }
  }

  // 2) Hungarian on the remainder, gated by match_dist
  std::vector<int> gl, hl;
  for (int i = 0; i < n; ++i)
    if (!gt_done[i]) gl.push_back(i);
  for (int j = 0; j < m; ++j)
    if (!hyp_done[j]) hl.push_back(j);
  if (!gl.empty() && !hl.empty()) {
    double big = cfg.match_dist * 1000.0;
    std::vector<std::vector<double>> cost(gl.size(), std::vector<double>(hl.size()));
    for (size_t a = 0; a < gl.size(); ++a)
      for (size_t b = 0; b < hl.size(); ++b) {
        double d = geom::bev_center_distance(gt[gl[a]].box, hyp[hl[b]].box);
        cost[a][b] = d <= cfg.match_dist ? d : big;
      }
    for (auto [a, b] : track::hungarian_basic(cost).pairs) {
      if (cost[a][b] >= big) continue;
      gt_done[gl[a]] = 1;
      hyp_done[hl[b]] = 1;
      out.matches.push_back({gt[gl[a]].id, hyp[hl[b]].id, cost[a][b]});
    }
  }

  // 3) bookkeeping
  for (const auto& mt : out.matches) {
    auto it = last_matched->find(mt.gt_id);
    if (it != last_matched->end() && it->second != mt.hyp_id) out.id_switches += 1;
    (*last_matched)[mt.gt_id] = mt.hyp_id;
  }
  out.misses = n - static_cast<int>(out.matches.size());
  out.false_positives = m - static_cast<int>(out.matches.size());
  return out;
}

struct SequenceStats {
  int gt_total = 0;
  int matches = 0;
  int misses = 0;
  int false_positives = 0;
  int id_switches = 0;
  double distance_sum = 0.0;

  double recall() const { return gt_total > 0 ? static_cast<double>(matches) / gt_total : 0.0; }
};

inline SequenceStats evaluate_sequence(const GtSequence& gt, const HypSequence& hyp,
                                       const EvalConfig& cfg) {
  if (gt.size() != hyp.size())
    throw InvalidArgument("evaluate_sequence: frame count mismatch");
  SequenceStats s;
  std::map<int, int> last_matched;
  for (size_t f = 0; f < gt.size(); ++f) {
    FrameMatchResult r = match_frame(gt[f], hyp[f], &last_matched, cfg);
    s.gt_total += static_cast<int>(gt[f].size());
    s.matches += static_cast<int>(r.matches.size());
    s.misses += r.misses;
    s.false_positives += r.false_positives;
    s.id_switches += r.id_switches;
    for (const auto& mt : r.matches) s.distance_sum += mt.distance;
  }
  return s;
}

// MOTA = 1 - (misses + FP + IDSW) / gt_total; MOTP is the mean matched BEV
// distance in meters (lower is better).
inline std::pair<double, double> mota_motp(const SequenceStats& s) {
  if (s.gt_total == 0) throw InvalidArgument("mota_motp: no ground truth objects");
  double mota = 1.0 - static_cast<double>(s.misses + s.false_positives + s.id_switches) / s.gt_total;
  double motp = s.matches > 0 ? s.distance_sum / s.matches : 0.0;
  return {mota, motp};
}

struct RecallPoint {
  double threshold = 0.0;   // target recall
  bool achieved = false;
  double cutoff = 0.0;      // confidence cutoff used
  double smota = 0.0;
  double motp = 0.0;
  SequenceStats stats;
};

struct AmotaResult {
  double amota = 0.0;
  double amotp = 0.0;
  std::vector<RecallPoint> points;
};

namespace detail {

inline HypSequence filter_by_confidence(const HypSequence& hyp, double cutoff) {
  HypSequence out(hyp.size());
  for (size_t f = 0; f < hyp.size(); ++f)
    for (const auto& h : hyp[f])
      if (h.confidence >= cutoff) out[f].push_back(h);
  return out;
}

}  // namespace detail

// Recall-averaged metrics, nuScenes style. Candidate operating points are the
// distinct hypothesis confidences; for each target recall the highest cutoff
// whose achieved recall reaches it is used. sMOTA at recall r is
//   clamp(1 - (IDSW + FP + FN - (1 - r) * P) / (r * P), 0, 1),  P = #gt,
// and unachieved recalls contribute 0 to AMOTA and are excluded from AMOTP.
inline AmotaResult amota_amotp(const GtSequence& gt, const HypSequence& hyp,
                               const EvalConfig& cfg) {
  cfg.validate();
  int gt_total = 0;
  for (const auto& f : gt) gt_total += static_cast<int>(f.size());
  if (gt_total == 0) throw InvalidArgument("amota_amotp: no ground truth objects");

  std::vector<double> cutoffs;
  for (const auto& f : hyp)
    for (const auto& h : f) cutoffs.push_back(h.confidence);
  std::sort(cutoffs.begin(), cutoffs.end(), std::greater<>());
  cutoffs.erase(std::unique(cutoffs.begin(), cutoffs.end()), cutoffs.end());
  if (static_cast<int>(cutoffs.size()) > cfg.sweep_resolution) {
    std::vector<double> picked;
    picked.reserve(cfg.sweep_resolution);
    size_t n_all = cutoffs.size();
    for (int k = 1; k <= cfg.sweep_resolution; ++k) {
      size_t idx = k * n_all / cfg.sweep_resolution;
      picked.push_back(cutoffs[idx == 0 ? 0 : idx - 1]);
    }
    picked.erase(std::unique(picked.begin(), picked.end()), picked.end());
    cutoffs = std::move(picked);
  }

  struct Point {
    double cutoff;
    SequenceStats stats;
  };
  std::vector<Point> curve;
  curve.reserve(cutoffs.size());
  for (double c : cutoffs)
    curve.push_back({c, evaluate_sequence(gt, detail::filter_by_confidence(hyp, c), cfg)});

  AmotaResult out;
  double amota_sum = 0.0, amotp_sum = 0.0;
  int amotp_n = 0;
  for (double r : cfg.recall_thresholds()) {
    RecallPoint pt;
    pt.threshold = r;
    // highest cutoff whose recall reaches r (cutoffs are descending, recall
    // non-decreasing along the sweep)
    for (const auto& p : curve) {
      if (p.stats.recall() >= r) {
        pt.achieved = true;
        pt.cutoff = p.cutoff;
        pt.stats = p.stats;
        break;
      }
    }
    if (pt.achieved) {
      const auto& s = pt.stats;
      double smota = 1.0 - (s.id_switches + s.false_positives + s.misses -
                            (1.0 - r) * gt_total) /
                               (r * gt_total);
      pt.smota = std::clamp(smota, 0.0, 1.0);
      pt.motp = s.matches > 0 ? s.distance_sum / s.matches : 0.0;
      amota_sum += pt.smota;
      amotp_sum += pt.motp;
      ++amotp_n;
    }
    out.points.push_back(pt);
  }
  out.amota = amota_sum / cfg.n_recall_thresholds;
  out.amotp = amotp_n > 0 ? amotp_sum / amotp_n : 0.0;
  return out;
}

}  // namespace stif::metrics
