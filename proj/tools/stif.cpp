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
//
// stif: simulate, train, track, evaluate and report on synthetic driving
// scenes. See README.md for formats and a worked walkthrough.
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "stif/io.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace stif;

namespace {

struct Timer {
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  }
};

std::string scene_name(int i, const char* suffix) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "scene_%03d.%s.jsonl", i, suffix);
  return buf;
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

json default_simulate_config() {
  json j = io::to_json(sim::ScenarioConfig{});
  j["n_scenes"] = 1;
  return j;
}

int cmd_simulate(const std::string& config_path, const std::string& out_dir,
                 std::optional<uint64_t> seed_override, bool verbose) {
  Timer timer;
  json cfg_json = config_path.empty() ? default_simulate_config() : io::load_json_file(config_path);
  int n_scenes = cfg_json.value("n_scenes", 1);
  if (n_scenes < 1) throw InvalidArgument("simulate: n_scenes must be >= 1");
  sim::ScenarioConfig base = io::scenario_config_from_json(cfg_json);
  if (seed_override) base.seed = *seed_override;

  fs::create_directories(out_dir);
  json outputs = json::array();
  for (int i = 0; i < n_scenes; ++i) {
    sim::ScenarioConfig sc = base;
    sc.seed = base.seed + static_cast<uint64_t>(i);
    sim::Scenario s = sim::generate(sc);
    std::string gt_path = out_dir + "/" + scene_name(i, "gt");
    std::string det_path = out_dir + "/" + scene_name(i, "det");
    io::write_gt_jsonl(gt_path, s.gt);
    io::write_detections_jsonl(det_path, s.det);
    outputs.push_back(gt_path);
    outputs.push_back(det_path);
    if (verbose)
      std::cerr << "scene " << i << ": " << s.gt.size() << " frames, seed " << sc.seed << "\n";
  }
  json snapshot = io::to_json(base);
  snapshot["n_scenes"] = n_scenes;
  io::write_manifest(out_dir + "/manifest.json", "simulate", snapshot,
                     json::array({config_path}), outputs, timer.seconds());
  return 0;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

json default_train_config() {
  return {{"net", io::to_json(net::NetConfig{})},
          {"train", io::to_json(train::TrainConfig{})},
          {"tracker", io::to_json(track::TrackerConfig{})},
          {"val_every", 5}};
}

std::vector<sim::Scenario> load_scenario_dir(const std::string& dir, bool verbose) {
  std::vector<std::string> det_files;
  for (const auto& e : fs::directory_iterator(dir)) {
    std::string name = e.path().filename().string();
    if (name.size() > 10 && name.find(".det.jsonl") != std::string::npos)
      det_files.push_back(e.path().string());
  }
  std::sort(det_files.begin(), det_files.end());
  if (det_files.empty()) throw ParseError("no *.det.jsonl files under " + dir);
  std::vector<sim::Scenario> out;
  for (const auto& det_path : det_files) {
    std::string gt_path = det_path;
    auto pos = gt_path.find(".det.jsonl");
    gt_path.replace(pos, 10, ".gt.jsonl");
    sim::Scenario s;
    s.det = io::read_detections_jsonl(det_path);
    s.gt = io::read_gt_jsonl(gt_path);
    if (s.det.size() != s.gt.size())
      throw ParseError("frame count mismatch between " + det_path + " and " + gt_path);
    out.push_back(std::move(s));
    if (verbose) std::cerr << "loaded " << det_path << " (" << out.back().det.size() << " frames)\n";
  }
  return out;
}

int cmd_train(const std::string& config_path, const std::string& scenario_dir,
              const std::string& out_path, std::optional<uint64_t> seed_override, bool verbose) {
  Timer timer;
  json cfg = config_path.empty() ? default_train_config() : io::load_json_file(config_path);
  net::NetConfig net_cfg = io::net_config_from_json(cfg.value("net", json::object()));
  train::TrainConfig train_cfg = io::train_config_from_json(cfg.value("train", json::object()));
  track::TrackerConfig tracker_cfg = io::tracker_config_from_json(cfg.value("tracker", json::object()));
  if (seed_override) train_cfg.seed = *seed_override;
  int val_every = cfg.value("val_every", 5);

  auto all = load_scenario_dir(scenario_dir, verbose);
  std::vector<sim::Scenario> train_set, val_set;
  for (size_t i = 0; i < all.size(); ++i) {
    // deterministic split: every val_every-th scene is held out
    if (val_every > 0 && static_cast<int>(i % val_every) == val_every - 1)
      val_set.push_back(std::move(all[i]));
    else
      train_set.push_back(std::move(all[i]));
  }
  if (train_set.empty()) throw InvalidArgument("train: no training scenes after split");

  train::Trainer trainer(net_cfg, train_cfg);
  std::vector<train::LossBreakdown> step_log;
  train::FitResult res = trainer.fit(train_set, val_set, tracker_cfg, &step_log);

  io::save_checkpoint(out_path, res.best_amota >= 0 ? res.best : res.final);
  std::string csv_path = out_path + ".loss.csv";
  {
    std::ofstream csv(csv_path);
    csv << "step,tracking,consistency,aux,total\n";
    for (size_t s = 0; s < step_log.size(); ++s)
      csv << s << "," << step_log[s].tracking << "," << step_log[s].consistency << ","
          << step_log[s].aux << "," << step_log[s].total << "\n";
  }
  if (verbose) {
    for (size_t e = 0; e < res.epoch_losses.size(); ++e)
      std::cerr << "epoch " << e << " loss " << res.epoch_losses[e].total << "\n";
    if (res.best_amota >= 0) std::cerr << "best val AMOTA " << res.best_amota << "\n";
  }
  json snapshot{{"net", io::to_json(net_cfg)},
                {"train", io::to_json(train_cfg)},
                {"tracker", io::to_json(tracker_cfg)},
                {"val_every", val_every}};
  io::write_manifest(out_path + ".manifest.json", "train", snapshot,
                     json::array({scenario_dir}), json::array({out_path, csv_path}),
                     timer.seconds());
  return 0;
}

// ---------------------------------------------------------------------------
// track
// ---------------------------------------------------------------------------

int cmd_track(const std::string& checkpoint_path, const std::string& det_path,
              const std::string& out_path, const std::string& config_path, bool verbose) {
  Timer timer;
  train::Checkpoint ck = io::load_checkpoint(checkpoint_path);
  track::TrackerConfig tcfg;
  json cfg_json = json::object();
  if (!config_path.empty()) {
    cfg_json = io::load_json_file(config_path);
    tcfg = io::tracker_config_from_json(cfg_json);
  }
  auto frames = io::read_detections_jsonl(det_path);
  track::Tracker tracker(ck.net, ck.weights, tcfg);
  std::vector<io::TrackFrame> out_frames;
  for (const auto& f : frames) {
    auto step = tracker.step(f);
    io::TrackFrame tf;
    tf.frame_index = f.frame_index;
    tf.timestamp = f.timestamp;
    tf.rows = std::move(step.rows);
    out_frames.push_back(std::move(tf));
  }
  io::write_tracks_jsonl(out_path, out_frames);
  if (verbose) std::cerr << "tracked " << frames.size() << " frames\n";
  io::write_manifest(out_path + ".manifest.json", "track",
                     json{{"tracker", io::to_json(tcfg)}},
                     json::array({checkpoint_path, det_path, config_path}),
                     json::array({out_path}), timer.seconds());
  return 0;
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

int cmd_eval(const std::string& gt_path, const std::string& tracks_path,
             const std::string& out_path, const std::string& config_path, bool verbose) {
  Timer timer;
  metrics::EvalConfig ecfg;
  if (!config_path.empty()) ecfg = io::eval_config_from_json(io::load_json_file(config_path));
  auto gt_frames = io::read_gt_jsonl(gt_path);
  auto trk_frames = io::read_tracks_jsonl(tracks_path);
  if (gt_frames.size() != trk_frames.size())
    throw ParseError("eval: gt has " + std::to_string(gt_frames.size()) + " frames, tracks " +
                     std::to_string(trk_frames.size()));
  metrics::GtSequence gts(gt_frames.size());
  metrics::HypSequence hyps(trk_frames.size());
  for (size_t f = 0; f < gt_frames.size(); ++f) {
    for (const auto& o : gt_frames[f].objects) gts[f].push_back({o.id, o.box});
    for (const auto& r : trk_frames[f].rows) hyps[f].push_back({r.track_id, r.box, r.confidence});
  }
  auto stats = metrics::evaluate_sequence(gts, hyps, ecfg);
  auto [mota, motp] = metrics::mota_motp(stats);
  auto am = metrics::amota_amotp(gts, hyps, ecfg);

  json report{{"schema_version", kSchemaVersion},
              {"kind", "eval_report"},
              {"amota", am.amota},
              {"amotp", am.amotp},
              {"mota", mota},
              {"motp", motp},
              {"gt_total", stats.gt_total},
              {"matches", stats.matches},
              {"misses", stats.misses},
              {"false_positives", stats.false_positives},
              {"id_switches", stats.id_switches},
              {"config", io::to_json(ecfg)}};
  {
    std::ofstream f(out_path);
    if (!f) throw ParseError("cannot open for writing: " + out_path);
    f << report.dump(2) << "\n";
  }
  std::string csv_path = out_path + ".csv";
  {
    std::ofstream csv(csv_path);
    csv << "recall_threshold,achieved,cutoff,smota,motp\n";
    for (const auto& p : am.points)
      csv << p.threshold << "," << (p.achieved ? 1 : 0) << "," << p.cutoff << "," << p.smota
          << "," << p.motp << "\n";
  }
  if (verbose)
    std::cerr << "AMOTA " << am.amota << " AMOTP " << am.amotp << " MOTA " << mota << " MOTP "
              << motp << "\n";
  io::write_manifest(out_path + ".manifest.json", "eval", io::to_json(ecfg),
                     json::array({gt_path, tracks_path}), json::array({out_path, csv_path}),
                     timer.seconds());
  return 0;
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

int cmd_report(const std::string& gt_path, const std::string& tracks_path,
               const std::string& out_dir, const std::string& checkpoint_path,
               const std::string& det_path, const std::string& train_log,
               int max_affinity_frames, bool verbose) {
  Timer timer;
  fs::create_directories(out_dir);
  json outputs = json::array();

  // BEV trajectory paths (ground truth and tracks)
  {
    auto gt_frames = io::read_gt_jsonl(gt_path);
    auto trk_frames = io::read_tracks_jsonl(tracks_path);
    std::string path = out_dir + "/bev_paths.csv";
    std::ofstream csv(path);
    csv << "kind,frame_index,timestamp,id,x,y,yaw\n";
    for (const auto& f : gt_frames)
      for (const auto& o : f.objects)
        csv << "gt," << f.frame_index << "," << f.timestamp << "," << o.id << "," << o.box.x
            << "," << o.box.y << "," << o.box.yaw << "\n";
    for (const auto& f : trk_frames)
      for (const auto& r : f.rows)
        csv << "track," << f.frame_index << "," << f.timestamp << "," << r.track_id << ","
            << r.box.x << "," << r.box.y << "," << r.box.yaw << "\n";
    outputs.push_back(path);
  }

  // affinity heatmaps over consecutive frame pairs, when a checkpoint and the
  // matching detections are provided
  if (!checkpoint_path.empty() && !det_path.empty()) {
    train::Checkpoint ck = io::load_checkpoint(checkpoint_path);
    auto frames = io::read_detections_jsonl(det_path);
    int dumped = 0;
    for (size_t f = 1; f < frames.size() && dumped < max_affinity_frames; ++f) {
      const auto& cur = frames[f];
      const auto& prev = frames[f - 1];
      if (cur.detections.empty() || prev.detections.empty()) continue;
      ad::Tape tape;
      net::TapeWeights w(tape, ck.weights, false);
      train::LossBreakdown bd;
      // forward only for the affinity; reuse the training-path builder
      auto ecur = net::embed_frame(tape, sim::to_frame_input(cur), w, ck.net);
      auto eprev = net::embed_frame(tape, sim::to_frame_input(prev), w, ck.net);
      (void)bd;
      ad::Tensor sc = net::spatial_flow(tape, ecur.fused, ecur.valid, w, ck.net);
      ad::Tensor sp = net::spatial_flow(tape, eprev.fused, eprev.valid, w, ck.net);
      ad::Tensor mp = net::motion_modeling(tape, sp, cur.timestamp - prev.timestamp, w, ck.net);
      auto tf = net::temporal_flow(tape, sc, mp, ecur.valid, eprev.valid, w, ck.net);
      ad::Tensor prob = net::affinity_product(tape, tf.affinity);
      auto pv = tape.val(prob);
      int stride = ck.net.K + 1;
      char buf[64];
      std::snprintf(buf, sizeof(buf), "%s/affinity_%04zu.csv", out_dir.c_str(), f);
      std::ofstream csv(buf);
      csv << "row";
      for (int j = 0; j < static_cast<int>(prev.detections.size()); ++j) csv << ",prev" << j;
      csv << ",unidentified,gt_col\n";
      auto gt = sim::gt_association(cur, prev, ck.net.K);
      for (int i = 0; i < static_cast<int>(cur.detections.size()); ++i) {
        csv << i;
        for (int j = 0; j < static_cast<int>(prev.detections.size()); ++j)
          csv << "," << pv[static_cast<size_t>(i) * stride + j];
        csv << "," << pv[static_cast<size_t>(i) * stride + ck.net.K];
        int gt_col = -1;
        for (int j = 0; j <= ck.net.K; ++j)
          if (gt.matrix[static_cast<size_t>(i) * stride + j] == 1.0) gt_col = j;
        csv << "," << gt_col << "\n";
      }
      outputs.push_back(std::string(buf));
      ++dumped;
    }
  }

  if (!train_log.empty()) {
    std::string dst = out_dir + "/loss_curves.csv";
    fs::copy_file(train_log, dst, fs::copy_options::overwrite_existing);
    outputs.push_back(dst);
  }
  if (verbose) std::cerr << "report written to " << out_dir << "\n";
  io::write_manifest(out_dir + "/manifest.json", "report",
                     json{{"max_affinity_frames", max_affinity_frames}},
                     json::array({gt_path, tracks_path, checkpoint_path, det_path, train_log}),
                     outputs, timer.seconds());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"stif: spatial-temporal association tracking on synthetic driving scenes"};
  app.require_subcommand(1);

  std::string config, out, scenarios, checkpoint, detections, gt, tracks, train_log;
  uint64_t seed_val = 0;
  bool seed_set = false, verbose = false, dump = false;
  int max_affinity_frames = 5;

  app.add_flag("--verbose", verbose, "chatty progress on stderr");

  auto add_seed = [&](CLI::App* cmd) {
    cmd->add_option("--seed", seed_val, "seed override")->each([&](const std::string&) {
      seed_set = true;
    });
  };

  CLI::App* simulate = app.add_subcommand("simulate", "generate synthetic scenario files");
  simulate->add_option("--config", config, "scenario config JSON");
  simulate->add_option("--out", out, "output directory");
  simulate->add_flag("--dump-config", dump, "print the full default config and exit");
  add_seed(simulate);

  CLI::App* train_cmd = app.add_subcommand("train", "train the association network");
  train_cmd->add_option("--config", config, "net+train+tracker config JSON");
  train_cmd->add_option("--scenarios", scenarios, "directory of scene_*.{gt,det}.jsonl");
  train_cmd->add_option("--out", out, "output checkpoint path");
  train_cmd->add_flag("--dump-config", dump, "print the full default config and exit");
  add_seed(train_cmd);

  CLI::App* track_cmd = app.add_subcommand("track", "run the tracker over detections");
  track_cmd->add_option("--checkpoint", checkpoint, "trained checkpoint");
  track_cmd->add_option("--detections", detections, "detections JSONL");
  track_cmd->add_option("--config", config, "tracker config JSON");
  track_cmd->add_option("--out", out, "output tracks JSONL");
  track_cmd->add_flag("--dump-config", dump, "print the full default config and exit");

  CLI::App* eval_cmd = app.add_subcommand("eval", "evaluate tracks against ground truth");
  eval_cmd->add_option("--gt", gt, "ground-truth JSONL");
  eval_cmd->add_option("--tracks", tracks, "tracks JSONL");
  eval_cmd->add_option("--config", config, "eval config JSON");
  eval_cmd->add_option("--out", out, "output report JSON path");
  eval_cmd->add_flag("--dump-config", dump, "print the full default config and exit");

  CLI::App* report_cmd = app.add_subcommand("report", "plot-ready CSV dumps");
  report_cmd->add_option("--gt", gt, "ground-truth JSONL");
  report_cmd->add_option("--tracks", tracks, "tracks JSONL");
  report_cmd->add_option("--checkpoint", checkpoint, "checkpoint for affinity dumps");
  report_cmd->add_option("--detections", detections, "detections JSONL for affinity dumps");
  report_cmd->add_option("--train-log", train_log, "loss curve CSV to include");
  report_cmd->add_option("--max-affinity-frames", max_affinity_frames, "heatmap dump count");
  report_cmd->add_option("--out", out, "output directory");

  CLI11_PARSE(app, argc, argv);

  try {
    std::optional<uint64_t> seed = seed_set ? std::optional<uint64_t>(seed_val) : std::nullopt;
    if (simulate->parsed()) {
      if (dump) {
        std::cout << default_simulate_config().dump(2) << "\n";
        return 0;
      }
      if (out.empty()) throw InvalidArgument("simulate: --out is required");
      return cmd_simulate(config, out, seed, verbose);
    }
    if (train_cmd->parsed()) {
      if (dump) {
        std::cout << default_train_config().dump(2) << "\n";
        return 0;
      }
      if (scenarios.empty() || out.empty())
        throw InvalidArgument("train: --scenarios and --out are required");
      return cmd_train(config, scenarios, out, seed, verbose);
    }
    if (track_cmd->parsed()) {
      if (dump) {
        std::cout << io::to_json(track::TrackerConfig{}).dump(2) << "\n";
        return 0;
      }
      if (checkpoint.empty() || detections.empty() || out.empty())
        throw InvalidArgument("track: --checkpoint, --detections and --out are required");
      return cmd_track(checkpoint, detections, out, config, verbose);
    }
    if (eval_cmd->parsed()) {
      if (dump) {
        std::cout << io::to_json(metrics::EvalConfig{}).dump(2) << "\n";
        return 0;
      }
      if (gt.empty() || tracks.empty() || out.empty())
        throw InvalidArgument("eval: --gt, --tracks and --out are required");
      return cmd_eval(gt, tracks, out, config, verbose);
    }
    if (report_cmd->parsed()) {
      if (gt.empty() || tracks.empty() || out.empty())
        throw InvalidArgument("report: --gt, --tracks and --out are required");
      return cmd_report(gt, tracks, out, checkpoint, detections, train_log,
                        max_affinity_frames, verbose);
    }
  } catch (const ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const InvalidArgument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const ShapeError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
