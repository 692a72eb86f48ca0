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

#include <atomic>
#include <cmath>
#include <cstdlib>
#include <map>
#include <string>
#include <thread>
#include <vector>

#include "stif/losses.hpp"
#include "stif/metrics.hpp"
#include "stif/net.hpp"
#include "stif/simulator.hpp"
#include "stif/tracker.hpp"

// End-to-end optimization of the association network on simulator scenarios:
// frame-pair sampling over the association horizon, the combined loss
// (tracking + temporal consistency + auxiliary heads), Adam updates in
// canonical parameter order, and evaluation through the full tracker.
namespace stif::train {

struct TrainConfig {
  int epochs = 3;
  int steps_per_epoch = 0;        // 0: derived from the data size
  int batch_pairs = 4;
  double learning_rate = 1.25e-4;
  std::vector<int> lr_drop_epochs;  // divide lr by 10 entering these epochs
  int min_zeta = 1;
  int max_zeta = 5;               // frame gaps sampled uniformly from [min, max]
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double consistency_weight = 1.0;  // 0 ablates the Eq-7 style term
  int eval_every_epochs = 1;
  int threads = 0;                // 0: STIF_THREADS env var, else hardware
  uint64_t seed = 0;

  void validate() const {
    if (epochs < 0 || batch_pairs < 1) throw InvalidArgument("TrainConfig: sizes");
    if (learning_rate <= 0) throw InvalidArgument("TrainConfig: learning_rate must be > 0");
    if (min_zeta < 1 || max_zeta < min_zeta) throw InvalidArgument("TrainConfig: zeta range");
    if (consistency_weight < 0) throw InvalidArgument("TrainConfig: consistency weight");
  }
};

struct LossBreakdown {
  double tracking = 0.0;
  double consistency = 0.0;
  double aux = 0.0;
  double total = 0.0;
};

struct Checkpoint {
  net::NetConfig net;
  net::Weights weights;
  net::Weights adam_m;
  net::Weights adam_v;
  int64_t step = 0;
  std::string rng_state;
};

struct PairSample {
  const sim::Scenario* scenario = nullptr;
  int t = 0;
  int zeta = 1;
};

namespace detail {

inline std::map<int, const sim::GtObject*> gt_by_id(const sim::GroundTruthFrame& f) {
  std::map<int, const sim::GtObject*> m;
  for (const auto& o : f.objects) m.emplace(o.id, &o);
  return m;
}

inline loss::AuxTargets aux_targets(const sim::DetectionFrame& det,
                                    const sim::GroundTruthFrame& gt) {
  loss::AuxTargets tg;
  auto by_id = gt_by_id(gt);
  for (const auto& d : det.detections) {
    auto it = d.gt_identity >= 0 ? by_id.find(d.gt_identity) : by_id.end();
    bool ok = it != by_id.end();
    tg.matched.push_back(ok ? 1 : 0);
    tg.velocity.push_back(ok ? it->second->velocity : std::array<double, 3>{0, 0, 0});
    tg.attribute.push_back(ok ? static_cast<int>(it->second->attribute) : 0);
    tg.boxes.push_back(ok ? it->second->box : d.box3d);
  }
  return tg;
}

inline std::vector<geom::Box3D> det_boxes(const sim::DetectionFrame& f) {
  std::vector<geom::Box3D> out;
  for (const auto& d : f.detections) out.push_back(d.box3d);
  return out;
}

}  // namespace detail

// Builds the full two-frame training graph on the given tape and returns the
// combined scalar loss. The pair is processed in both directions with the
// same time gap: the reversed pass supplies the earlier frame's refinements
// for the consistency term, mirroring how each frame of a pair receives its
// own predictions.
inline ad::Tensor pair_loss(ad::Tape& tape, net::TapeWeights& w, const net::NetConfig& cfg,
                            const sim::Scenario& scn, int t, int zeta,
                            double consistency_weight, LossBreakdown* breakdown) {
  if (t - zeta < 0 || t >= static_cast<int>(scn.det.size()))
    throw InvalidArgument("pair_loss: frame pair out of range");
  const sim::DetectionFrame& cur = scn.det[t];
  const sim::DetectionFrame& prev = scn.det[t - zeta];
  if (cur.detections.empty() || prev.detections.empty())
    throw InvalidArgument("pair_loss: empty frame in pair");
  double dt = cur.timestamp - prev.timestamp;

  auto ec = net::embed_frame(tape, sim::to_frame_input(cur), w, cfg);
  auto ep = net::embed_frame(tape, sim::to_frame_input(prev), w, cfg);
  ad::Tensor sc = net::spatial_flow(tape, ec.fused, ec.valid, w, cfg);
  ad::Tensor sp = net::spatial_flow(tape, ep.fused, ep.valid, w, cfg);

  ad::Tensor motion_p = net::motion_modeling(tape, sp, dt, w, cfg);
  auto fwd = net::temporal_flow(tape, sc, motion_p, ec.valid, ep.valid, w, cfg);
  ad::Tensor motion_c = net::motion_modeling(tape, sc, dt, w, cfg);
  auto rev = net::temporal_flow(tape, sp, motion_c, ep.valid, ec.valid, w, cfg);

  auto heads_cur = net::heads(tape, fwd.aggregated, w, cfg);
  auto heads_prev = net::heads(tape, rev.aggregated, w, cfg);

  ad::Tensor l_track = loss::tracking_loss(tape, fwd.affinity,
                                           sim::gt_association(cur, prev, cfg.K));

  // consistency pairs: identities detected in both frames
  std::vector<loss::ConsistencyPair> pairs;
  {
    auto gt_cur = detail::gt_by_id(scn.gt[t]);
    auto gt_prev = detail::gt_by_id(scn.gt[t - zeta]);
    for (int i = 0; i < static_cast<int>(cur.detections.size()); ++i) {
      int id = cur.detections[i].gt_identity;
      if (id < 0) continue;
      for (int j = 0; j < static_cast<int>(prev.detections.size()); ++j) {
        if (prev.detections[j].gt_identity != id) continue;
        auto gc = gt_cur.find(id);
        auto gp = gt_prev.find(id);
        if (gc != gt_cur.end() && gp != gt_prev.end())
          pairs.push_back({i, j, gc->second->box, gp->second->box});
        break;
      }
    }
  }
  ad::Tensor l_cons = loss::temporal_consistency_loss(
      tape, detail::det_boxes(cur), heads_cur.box_refine, {detail::det_boxes(prev)},
      {heads_prev.box_refine}, {pairs});
  ad::Tensor l_cons_w = tape.mul_scalar(l_cons, consistency_weight);

  ad::Tensor l_aux_c = loss::aux_losses(tape, heads_cur, detail::det_boxes(cur),
                                        detail::aux_targets(cur, scn.gt[t]), cfg);
  ad::Tensor l_aux_p = loss::aux_losses(tape, heads_prev, detail::det_boxes(prev),
                                        detail::aux_targets(prev, scn.gt[t - zeta]), cfg);
  ad::Tensor l_aux = tape.mul_scalar(tape.add(l_aux_c, l_aux_p), 0.5);

  ad::Tensor total = loss::combined_loss(tape, {l_track, l_cons_w, l_aux});
  if (breakdown) {
    breakdown->tracking = tape.item(l_track);
    breakdown->consistency = tape.item(l_cons_w);
    breakdown->aux = tape.item(l_aux);
    breakdown->total = tape.item(total);
  }
  return total;
}

struct FitResult {
  Checkpoint final;
  Checkpoint best;        // by validation AMOTA; equals final when no eval ran
  double best_amota = -1.0;
  std::vector<LossBreakdown> epoch_losses;
  std::vector<double> val_amota_history;
};

struct EvalReport {
  double amota = 0.0, amotp = 0.0, mota = 0.0, motp = 0.0;
  int gt_total = 0, matches = 0, misses = 0, false_positives = 0, id_switches = 0;
};

// Runs the full tracker over each scenario and evaluates pooled CLEAR-MOT and
// recall-averaged metrics. Scenes are concatenated with per-scene id offsets.
inline EvalReport evaluate(const net::NetConfig& net_cfg, const net::Weights& weights,
                           const std::vector<sim::Scenario>& scenarios,
                           const track::TrackerConfig& tcfg = {},
                           const metrics::EvalConfig& ecfg = {}) {
  metrics::GtSequence gt_all;
  metrics::HypSequence hyp_all;
  int offset = 0;
  for (const auto& scn : scenarios) {
    track::Tracker tracker(net_cfg, weights, tcfg);
    for (size_t f = 0; f < scn.det.size(); ++f) {
      std::vector<metrics::GtBox> gtf;
      for (const auto& o : scn.gt[f].objects) gtf.push_back({offset + o.id, o.box});
      auto out = tracker.step(scn.det[f]);
      std::vector<metrics::HypBox> hypf;
      for (const auto& r : out.rows)
        hypf.push_back({offset + 100000 + r.track_id, r.box, r.confidence});
      gt_all.push_back(std::move(gtf));
      hyp_all.push_back(std::move(hypf));
    }
    offset += 1000000;
  }
  EvalReport rep;
  auto stats = metrics::evaluate_sequence(gt_all, hyp_all, ecfg);
  auto [mota, motp] = metrics::mota_motp(stats);
  rep.mota = mota;
  rep.motp = motp;
  rep.gt_total = stats.gt_total;
  rep.matches = stats.matches;
  rep.misses = stats.misses;
  rep.false_positives = stats.false_positives;
  rep.id_switches = stats.id_switches;
  auto am = metrics::amota_amotp(gt_all, hyp_all, ecfg);
  rep.amota = am.amota;
  rep.amotp = am.amotp;
  return rep;
}

class Trainer {
 public:
  Trainer(const net::NetConfig& net_cfg, const TrainConfig& cfg)
      : net_cfg_(net_cfg), cfg_(cfg), rng_(cfg.seed) {
    cfg_.validate();
    net_cfg_.validate();
    weights_ = net::init_weights(net_cfg_, cfg_.seed);
    init_moments();
  }

  explicit Trainer(const Checkpoint& ck, const TrainConfig& cfg) : net_cfg_(ck.net), cfg_(cfg), rng_(0) {
    cfg_.validate();
    weights_ = ck.weights;
    adam_m_ = ck.adam_m;
    adam_v_ = ck.adam_v;
    step_ = ck.step;
    rng_.set_state(ck.rng_state);
  }

  const net::Weights& weights() const { return weights_; }
  int64_t step() const { return step_; }

  Checkpoint checkpoint() const {
    return {net_cfg_, weights_, adam_m_, adam_v_, step_, rng_.state()};
  }

  // Uniform (scenario, t, zeta) with both frames non-empty; deterministic
  // under the trainer seed.
  std::vector<PairSample> sample_pairs(const std::vector<sim::Scenario>& scenarios, int count) {
    if (scenarios.empty()) throw InvalidArgument("sample_pairs: no scenarios");
    for (const auto& s : scenarios)
      if (static_cast<int>(s.det.size()) < cfg_.max_zeta + 1)
        throw InvalidArgument("sample_pairs: scenario shorter than the association horizon");
    std::vector<PairSample> out;
    int guard = 0;
    while (static_cast<int>(out.size()) < count) {
      if (++guard > 1000 * count)
        throw NumericError("sample_pairs: could not find usable frame pairs");
      const sim::Scenario& scn = scenarios[static_cast<size_t>(
          rng_.uniform_int(0, static_cast<int64_t>(scenarios.size()) - 1))];
      int zeta = static_cast<int>(rng_.uniform_int(cfg_.min_zeta, cfg_.max_zeta));
      int t = static_cast<int>(rng_.uniform_int(zeta, static_cast<int64_t>(scn.det.size()) - 1));
      if (scn.det[t].detections.empty() || scn.det[t - zeta].detections.empty()) continue;
      out.push_back({&scn, t, zeta});
    }
    return out;
  }

  // One optimizer step over a batch of independent pairs. Per-pair gradients
  // run on worker threads with their own tapes; the reduction sums them in
  // batch order, so results do not depend on the thread count.
  LossBreakdown train_step(const std::vector<PairSample>& batch, double lr) {
    if (batch.empty()) throw InvalidArgument("train_step: empty batch");
    int n = static_cast<int>(batch.size());
    std::vector<std::map<std::string, std::vector<double>>> grads(n);
    std::vector<LossBreakdown> breakdowns(n);
    std::vector<std::string> errors(n);

    auto work = [&](int i) {
      try {
        ad::Tape tape;
        net::TapeWeights w(tape, weights_, true);
        LossBreakdown bd;
        ad::Tensor total = pair_loss(tape, w, net_cfg_, *batch[i].scenario, batch[i].t,
                                     batch[i].zeta, cfg_.consistency_weight, &bd);
        if (!std::isfinite(tape.item(total)))
          throw NumericError("train_step: non-finite loss");
        tape.backward(total);
        grads[i] = w.grads();
        breakdowns[i] = bd;
      } catch (const std::exception& e) {
        errors[i] = e.what();
      }
    };
    int n_threads = std::min(n, thread_budget());
    if (n_threads <= 1) {
      for (int i = 0; i < n; ++i) work(i);
    } else {
      std::vector<std::thread> pool;
      std::atomic<int> cursor{0};
      for (int t = 0; t < n_threads; ++t)
        pool.emplace_back([&] {
          for (int i = cursor.fetch_add(1); i < n; i = cursor.fetch_add(1)) work(i);
        });
      for (auto& th : pool) th.join();
    }
    for (const auto& e : errors)
      if (!e.empty()) throw NumericError("train_step: " + e);

    // fixed-order reduction, then Adam in canonical (lexicographic) order
    step_ += 1;
    double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
    double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
    for (auto& [name, entry] : weights_) {
      std::vector<double> g(entry.value.size(), 0.0);
      for (int i = 0; i < n; ++i) {
        auto it = grads[i].find(name);
        if (it == grads[i].end()) continue;
        for (size_t k = 0; k < g.size(); ++k) g[k] += it->second[k];
      }
      for (auto& v : g) v /= n;
      auto& m = adam_m_.at(name).value;
      auto& v2 = adam_v_.at(name).value;
      for (size_t k = 0; k < g.size(); ++k) {
        m[k] = cfg_.beta1 * m[k] + (1.0 - cfg_.beta1) * g[k];
        v2[k] = cfg_.beta2 * v2[k] + (1.0 - cfg_.beta2) * g[k] * g[k];
        double mh = m[k] / bc1;
        double vh = v2[k] / bc2;
        entry.value[k] -= lr * mh / (std::sqrt(vh) + cfg_.adam_eps);
      }
    }

    LossBreakdown avg;
    for (const auto& b : breakdowns) {
      avg.tracking += b.tracking / n;
      avg.consistency += b.consistency / n;
      avg.aux += b.aux / n;
      avg.total += b.total / n;
    }
    return avg;
  }

  double lr_at_epoch(int epoch) const {
    double lr = cfg_.learning_rate;
    for (int drop : cfg_.lr_drop_epochs)
      if (epoch >= drop) lr /= 10.0;
    return lr;
  }

  FitResult fit(const std::vector<sim::Scenario>& train_scenarios,
                const std::vector<sim::Scenario>& val_scenarios,
                const track::TrackerConfig& tcfg = {},
                std::vector<LossBreakdown>* step_log = nullptr) {
    if (train_scenarios.empty()) throw InvalidArgument("fit: no training scenarios");
    int steps = cfg_.steps_per_epoch;
    if (steps <= 0) {
      int64_t usable = 0;
      for (const auto& s : train_scenarios)
        usable += static_cast<int64_t>(s.det.size()) - cfg_.max_zeta;
      steps = static_cast<int>(std::max<int64_t>(1, usable / cfg_.batch_pairs));
    }
    FitResult res;
    int start_epoch = static_cast<int>(step_ / std::max(1, steps));
    for (int epoch = start_epoch; epoch < cfg_.epochs; ++epoch) {
      double lr = lr_at_epoch(epoch);
      LossBreakdown epoch_avg;
      for (int s = 0; s < steps; ++s) {
        auto batch = sample_pairs(train_scenarios, cfg_.batch_pairs);
        LossBreakdown bd = train_step(batch, lr);
        if (step_log) step_log->push_back(bd);
        epoch_avg.tracking += bd.tracking / steps;
        epoch_avg.consistency += bd.consistency / steps;
        epoch_avg.aux += bd.aux / steps;
        epoch_avg.total += bd.total / steps;
      }
      res.epoch_losses.push_back(epoch_avg);
      bool last = epoch + 1 == cfg_.epochs;
      if (!val_scenarios.empty() &&
          (last || (cfg_.eval_every_epochs > 0 && (epoch + 1) % cfg_.eval_every_epochs == 0))) {
        EvalReport rep = evaluate(net_cfg_, weights_, val_scenarios, tcfg);
        res.val_amota_history.push_back(rep.amota);
        if (rep.amota > res.best_amota) {
          res.best_amota = rep.amota;
          res.best = checkpoint();
        }
      }
    }
    res.final = checkpoint();
    if (res.best_amota < 0) res.best = res.final;
    return res;
  }

 private:
  void init_moments() {
    for (const auto& [name, e] : weights_) {
      adam_m_.define(name, e.shape, std::vector<double>(e.value.size(), 0.0));
      adam_v_.define(name, e.shape, std::vector<double>(e.value.size(), 0.0));
    }
  }

  int thread_budget() const {
    if (cfg_.threads > 0) return cfg_.threads;
    if (const char* env = std::getenv("STIF_THREADS")) {
      int v = std::atoi(env);
      if (v > 0) return v;
    }
    unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : static_cast<int>(hw);
  }

  net::NetConfig net_cfg_;
  TrainConfig cfg_;
  Rng rng_;
  net::Weights weights_;
  net::Weights adam_m_, adam_v_;
  int64_t step_ = 0;
};

}  // namespace stif::train
