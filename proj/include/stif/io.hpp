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

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "stif/metrics.hpp"
#include "stif/simulator.hpp"
#include "stif/tracker.hpp"
#include "stif/trainer.hpp"

// File formats. Frame data travels as JSON Lines: the first line is a header
// object carrying schema_version and the payload kind, every further line is
// one frame. Checkpoints are a single binary container: magic, version, a
// JSON header with tensor names/shapes and the net config, then little-endian
// f64 payloads in header order. Appearance vectors are base64 of
// little-endian f32.
namespace stif::io {

static_assert(std::endian::native == std::endian::little,
              "file formats are defined little-endian");

using nlohmann::json;

inline constexpr int kSchemaMajor = 1;

// ---------------------------------------------------------------------------
// base64 (RFC 4648, no padding stripping) for f32 arrays
// ---------------------------------------------------------------------------

namespace detail {

inline constexpr char kB64[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

inline std::string b64_encode(const std::vector<uint8_t>& in) {
  std::string out;
  out.reserve((in.size() + 2) / 3 * 4);
  for (size_t i = 0; i < in.size(); i += 3) {
    uint32_t v = in[i] << 16;
    int rem = static_cast<int>(in.size() - i);
    if (rem > 1) v |= in[i + 1] << 8;
    if (rem > 2) v |= in[i + 2];
    out.push_back(kB64[(v >> 18) & 63]);
    out.push_back(kB64[(v >> 12) & 63]);
    out.push_back(rem > 1 ? kB64[(v >> 6) & 63] : '=');
    out.push_back(rem > 2 ? kB64[v & 63] : '=');
  }
  return out;
}

inline std::vector<uint8_t> b64_decode(const std::string& in) {
  auto val = [](char c) -> int {
    if (c >= 'A' && c <= 'Z') return c - 'A';
    if (c >= 'a' && c <= 'z') return c - 'a' + 26;
    if (c >= '0' && c <= '9') return c - '0' + 52;
    if (c == '+') return 62;
    if (c == '/') return 63;
    if (c == '=') return -1;
    throw ParseError("base64: invalid character");
  };
  if (in.size() % 4 != 0) throw ParseError("base64: length not a multiple of 4");
  std::vector<uint8_t> out;
  out.reserve(in.size() / 4 * 3);
  for (size_t i = 0; i < in.size(); i += 4) {
    int a = val(in[i]), b = val(in[i + 1]), c = val(in[i + 2]), d = val(in[i + 3]);
    if (a < 0 || b < 0) throw ParseError("base64: malformed quartet");
    uint32_t v = (static_cast<uint32_t>(a) << 18) | (static_cast<uint32_t>(b) << 12) |
                 ((c < 0 ? 0u : static_cast<uint32_t>(c)) << 6) | (d < 0 ? 0u : static_cast<uint32_t>(d));
    out.push_back((v >> 16) & 0xff);
    if (c >= 0) out.push_back((v >> 8) & 0xff);
    if (d >= 0) out.push_back(v & 0xff);
  }
  return out;
}

}  // namespace detail

inline std::string encode_f32(const std::vector<double>& v) {
  std::vector<uint8_t> bytes(v.size() * 4);
  for (size_t i = 0; i < v.size(); ++i) {
    float f = static_cast<float>(v[i]);
    std::memcpy(bytes.data() + i * 4, &f, 4);
  }
  return detail::b64_encode(bytes);
}

inline std::vector<double> decode_f32(const std::string& s) {
  auto bytes = detail::b64_decode(s);
  if (bytes.size() % 4 != 0) throw ParseError("appearance payload not f32-aligned");
  std::vector<double> out(bytes.size() / 4);
  for (size_t i = 0; i < out.size(); ++i) {
    float f;
    std::memcpy(&f, bytes.data() + i * 4, 4);
    out[i] = static_cast<double>(f);
  }
  return out;
}

// ---------------------------------------------------------------------------
// JSONL plumbing
// ---------------------------------------------------------------------------

namespace detail {

inline json parse_line(const std::string& line, const std::string& path, int line_no) {
  try {
    return json::parse(line);
  } catch (const json::exception& e) {
    throw ParseError(path + ":" + std::to_string(line_no) + ": " + e.what());
  }
}

inline void check_header(const json& h, const std::string& kind, const std::string& path) {
  if (!h.contains("schema_version") || !h["schema_version"].is_string())
    throw ParseError(path + ":1: missing schema_version");
  std::string v = h["schema_version"];
  int major = std::atoi(v.c_str());
  if (major != kSchemaMajor)
    throw ParseError(path + ":1: unsupported schema major version " + v);
  if (!h.contains("kind") || h["kind"] != kind)
    throw ParseError(path + ":1: expected kind '" + kind + "'");
}

inline std::ofstream open_out(const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ParseError("cannot open for writing: " + path);
  return f;
}

inline std::ifstream open_in(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ParseError("cannot open: " + path);
  return f;
}

inline json box3d_json(const geom::Box3D& b) {
  return json::array({b.x, b.y, b.z, b.l, b.w, b.h, b.yaw});
}

inline geom::Box3D box3d_from(const json& a, const std::string& where) {
  if (!a.is_array() || a.size() != 7) throw ParseError(where + ": box3d must have 7 numbers");
  geom::Box3D b{a[0], a[1], a[2], a[3], a[4], a[5], a[6]};
  if (!b.valid()) throw ParseError(where + ": invalid box3d");
  return b;
}

inline json box2d_json(const geom::Box2D& b) { return json::array({b.cx, b.cy, b.w, b.h}); }

inline geom::Box2D box2d_from(const json& a, const std::string& where) {
  if (!a.is_array() || a.size() != 4) throw ParseError(where + ": box2d must have 4 numbers");
  geom::Box2D b{a[0], a[1], a[2], a[3]};
  if (!b.valid()) throw ParseError(where + ": invalid box2d");
  return b;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// scenario files
// ---------------------------------------------------------------------------

inline void write_gt_jsonl(const std::string& path, const std::vector<sim::GroundTruthFrame>& frames) {
  auto f = detail::open_out(path);
  json hdr{{"schema_version", kSchemaVersion}, {"kind", "gt"}, {"n_frames", frames.size()}};
  f << hdr.dump() << "\n";
  for (const auto& fr : frames) {
    json objs = json::array();
    for (const auto& o : fr.objects) {
      objs.push_back({{"gt_id", o.id},
                      {"box3d", detail::box3d_json(o.box)},
                      {"velocity", json::array({o.velocity[0], o.velocity[1], o.velocity[2]})},
                      {"attribute", static_cast<int>(o.attribute)},
                      {"category", o.category}});
    }
    json line{{"frame_index", fr.frame_index}, {"timestamp", fr.timestamp}, {"objects", objs}};
    f << line.dump() << "\n";
  }
}

inline std::vector<sim::GroundTruthFrame> read_gt_jsonl(const std::string& path) {
  auto f = detail::open_in(path);
  std::string line;
  int line_no = 0;
  std::vector<sim::GroundTruthFrame> out;
  while (std::getline(f, line)) {
    ++line_no;
    if (line.empty()) continue;
    json j = detail::parse_line(line, path, line_no);
    if (line_no == 1) {
      detail::check_header(j, "gt", path);
      continue;
    }
    sim::GroundTruthFrame fr;
    fr.frame_index = j.value("frame_index", -1);
    fr.timestamp = j.value("timestamp", 0.0);
    for (const auto& o : j.at("objects")) {
      sim::GtObject g;
      g.id = o.at("gt_id");
      g.box = detail::box3d_from(o.at("box3d"), path + ":" + std::to_string(line_no));
      auto v = o.at("velocity");
      g.velocity = {v[0], v[1], v[2]};
      g.attribute = static_cast<sim::Attribute>(o.value("attribute", 0));
      g.category = o.value("category", 0);
      fr.objects.push_back(g);
    }
    out.push_back(std::move(fr));
  }
  return out;
}

inline void write_detections_jsonl(const std::string& path,
                                   const std::vector<sim::DetectionFrame>& frames) {
  auto f = detail::open_out(path);
  json hdr{{"schema_version", kSchemaVersion}, {"kind", "detections"}, {"n_frames", frames.size()}};
  f << hdr.dump() << "\n";
  for (const auto& fr : frames) {
    json objs = json::array();
    for (const auto& d : fr.detections) {
      json o{{"box3d", detail::box3d_json(d.box3d)},
             {"box2d", detail::box2d_json(d.box2d)},
             {"category", d.category},
             {"confidence", d.confidence},
             {"appearance", encode_f32(d.appearance)}};
      if (d.gt_identity >= 0) o["gt_id"] = d.gt_identity;
      objs.push_back(std::move(o));
    }
    json line{{"frame_index", fr.frame_index}, {"timestamp", fr.timestamp}, {"objects", objs}};
    f << line.dump() << "\n";
  }
}

inline std::vector<sim::DetectionFrame> read_detections_jsonl(const std::string& path) {
  auto f = detail::open_in(path);
  std::string line;
  int line_no = 0;
  std::vector<sim::DetectionFrame> out;
  while (std::getline(f, line)) {
    ++line_no;
    if (line.empty()) continue;
    json j = detail::parse_line(line, path, line_no);
    if (line_no == 1) {
      detail::check_header(j, "detections", path);
      continue;
    }
    sim::DetectionFrame fr;
    fr.frame_index = j.value("frame_index", -1);
    fr.timestamp = j.value("timestamp", 0.0);
    for (const auto& o : j.at("objects")) {
      sim::Detection d;
      d.box3d = detail::box3d_from(o.at("box3d"), path + ":" + std::to_string(line_no));
      d.box2d = detail::box2d_from(o.at("box2d"), path + ":" + std::to_string(line_no));
      d.category = o.value("category", 0);
      d.confidence = o.value("confidence", 1.0);
      d.appearance = decode_f32(o.at("appearance"));
      // f32 storage dequantizes slightly off unit norm
      double n = 0;
      for (double v : d.appearance) n += v * v;
      if (n > 1e-12) {
        n = std::sqrt(n);
        for (auto& v : d.appearance) v /= n;
      }
      d.gt_identity = o.value("gt_id", -1);
      fr.detections.push_back(std::move(d));
    }
    out.push_back(std::move(fr));
  }
  return out;
}

// ---------------------------------------------------------------------------
// track output files
// ---------------------------------------------------------------------------

struct TrackFrame {
  int frame_index = 0;
  double timestamp = 0.0;
  std::vector<track::OutputRow> rows;
};

inline void write_tracks_jsonl(const std::string& path, const std::vector<TrackFrame>& frames) {
  auto f = detail::open_out(path);
  json hdr{{"schema_version", kSchemaVersion}, {"kind", "tracks"}, {"n_frames", frames.size()}};
  f << hdr.dump() << "\n";
  for (const auto& fr : frames) {
    json objs = json::array();
    for (const auto& r : fr.rows) {
      objs.push_back({{"track_id", r.track_id},
                      {"box3d", detail::box3d_json(r.box)},
                      {"box3d_raw", detail::box3d_json(r.box_raw)},
                      {"confidence", r.confidence},
                      {"velocity", json::array({r.velocity[0], r.velocity[1], r.velocity[2]})},
                      {"attribute", r.attribute},
                      {"category", r.category}});
    }
    json line{{"frame_index", fr.frame_index}, {"timestamp", fr.timestamp}, {"objects", objs}};
    f << line.dump() << "\n";
  }
}

inline std::vector<TrackFrame> read_tracks_jsonl(const std::string& path) {
  auto f = detail::open_in(path);
  std::string line;
  int line_no = 0;
  std::vector<TrackFrame> out;
  while (std::getline(f, line)) {
    ++line_no;
    if (line.empty()) continue;
    json j = detail::parse_line(line, path, line_no);
    if (line_no == 1) {
      detail::check_header(j, "tracks", path);
      continue;
    }
    TrackFrame fr;
    fr.frame_index = j.value("frame_index", -1);
    fr.timestamp = j.value("timestamp", 0.0);
    for (const auto& o : j.at("objects")) {
      track::OutputRow r;
      r.track_id = o.at("track_id");
      r.box = detail::box3d_from(o.at("box3d"), path + ":" + std::to_string(line_no));
      if (o.contains("box3d_raw"))
        r.box_raw = detail::box3d_from(o.at("box3d_raw"), path + ":" + std::to_string(line_no));
      else
        r.box_raw = r.box;
      r.confidence = o.value("confidence", 1.0);
      if (o.contains("velocity")) {
        auto v = o.at("velocity");
        r.velocity = {v[0], v[1], v[2]};
      }
      r.attribute = o.value("attribute", 0);
      r.category = o.value("category", 0);
      fr.rows.push_back(r);
    }
    out.push_back(std::move(fr));
  }
  return out;
}

// ---------------------------------------------------------------------------
// config (de)serialization, full-default emission
// ---------------------------------------------------------------------------

inline json to_json(const net::NetConfig& c) {
  return {{"d", c.d},
          {"heads", c.heads},
          {"n_spatial_layers", c.n_spatial_layers},
          {"n_temporal_layers", c.n_temporal_layers},
          {"affinity_layer_index", c.affinity_layer_index},
          {"K", c.K},
          {"d_reid", c.d_reid},
          {"n_categories", c.n_categories},
          {"n_attributes", c.n_attributes},
          {"tau", c.tau},
          {"ffn_mult", c.ffn_mult},
          {"affinity_hidden", c.affinity_hidden},
          {"use_geometric_cue", c.use_geometric_cue},
          {"use_appearance_cue", c.use_appearance_cue}};
}

inline net::NetConfig net_config_from_json(const json& j) {
  net::NetConfig c;
  c.d = j.value("d", c.d);
  c.heads = j.value("heads", c.heads);
  c.n_spatial_layers = j.value("n_spatial_layers", c.n_spatial_layers);
  c.n_temporal_layers = j.value("n_temporal_layers", c.n_temporal_layers);
  c.affinity_layer_index = j.value("affinity_layer_index", c.affinity_layer_index);
  c.K = j.value("K", c.K);
  c.d_reid = j.value("d_reid", c.d_reid);
  c.n_categories = j.value("n_categories", c.n_categories);
  c.n_attributes = j.value("n_attributes", c.n_attributes);
  c.tau = j.value("tau", c.tau);
  c.ffn_mult = j.value("ffn_mult", c.ffn_mult);
  c.affinity_hidden = j.value("affinity_hidden", c.affinity_hidden);
  c.use_geometric_cue = j.value("use_geometric_cue", c.use_geometric_cue);
  c.use_appearance_cue = j.value("use_appearance_cue", c.use_appearance_cue);
  c.validate();
  return c;
}

inline json to_json(const sim::ScenarioConfig& c) {
  return {{"n_objects", c.n_objects},
          {"n_frames", c.n_frames},
          {"frame_dt", c.frame_dt},
          {"motion_cv", c.motion_cv},
          {"motion_ct", c.motion_ct},
          {"motion_stationary", c.motion_stationary},
          {"pos_noise_sigma", c.pos_noise_sigma},
          {"dim_noise_sigma", c.dim_noise_sigma},
          {"yaw_noise_sigma", c.yaw_noise_sigma},
          {"reid_noise_sigma", c.reid_noise_sigma},
          {"dropout_prob", c.dropout_prob},
          {"fp_rate", c.fp_rate},
          {"seed", c.seed},
          {"K", c.K},
          {"d_reid", c.d_reid},
          {"n_categories", c.n_categories}};
}

inline sim::ScenarioConfig scenario_config_from_json(const json& j) {
  sim::ScenarioConfig c;
  c.n_objects = j.value("n_objects", c.n_objects);
  c.n_frames = j.value("n_frames", c.n_frames);
  c.frame_dt = j.value("frame_dt", c.frame_dt);
  c.motion_cv = j.value("motion_cv", c.motion_cv);
  c.motion_ct = j.value("motion_ct", c.motion_ct);
  c.motion_stationary = j.value("motion_stationary", c.motion_stationary);
  c.pos_noise_sigma = j.value("pos_noise_sigma", c.pos_noise_sigma);
  c.dim_noise_sigma = j.value("dim_noise_sigma", c.dim_noise_sigma);
  c.yaw_noise_sigma = j.value("yaw_noise_sigma", c.yaw_noise_sigma);
  c.reid_noise_sigma = j.value("reid_noise_sigma", c.reid_noise_sigma);
  c.dropout_prob = j.value("dropout_prob", c.dropout_prob);
  c.fp_rate = j.value("fp_rate", c.fp_rate);
  c.seed = j.value("seed", c.seed);
  c.K = j.value("K", c.K);
  c.d_reid = j.value("d_reid", c.d_reid);
  c.n_categories = j.value("n_categories", c.n_categories);
  c.validate();
  return c;
}

inline json to_json(const train::TrainConfig& c) {
  return {{"epochs", c.epochs},
          {"steps_per_epoch", c.steps_per_epoch},
          {"batch_pairs", c.batch_pairs},
          {"learning_rate", c.learning_rate},
          {"lr_drop_epochs", c.lr_drop_epochs},
          {"min_zeta", c.min_zeta},
          {"max_zeta", c.max_zeta},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"adam_eps", c.adam_eps},
          {"consistency_weight", c.consistency_weight},
          {"eval_every_epochs", c.eval_every_epochs},
          {"threads", c.threads},
          {"seed", c.seed}};
}

inline train::TrainConfig train_config_from_json(const json& j) {
  train::TrainConfig c;
  c.epochs = j.value("epochs", c.epochs);
  c.steps_per_epoch = j.value("steps_per_epoch", c.steps_per_epoch);
  c.batch_pairs = j.value("batch_pairs", c.batch_pairs);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.lr_drop_epochs = j.value("lr_drop_epochs", c.lr_drop_epochs);
  c.min_zeta = j.value("min_zeta", c.min_zeta);
  c.max_zeta = j.value("max_zeta", c.max_zeta);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.adam_eps = j.value("adam_eps", c.adam_eps);
  c.consistency_weight = j.value("consistency_weight", c.consistency_weight);
  c.eval_every_epochs = j.value("eval_every_epochs", c.eval_every_epochs);
  c.threads = j.value("threads", c.threads);
  c.seed = j.value("seed", c.seed);
  c.validate();
  return c;
}

inline json to_json(const track::TrackerConfig& c) {
  return {{"tau", c.tau},
          {"match_threshold", c.match_threshold},
          {"max_missed", c.max_missed},
          {"min_confidence", c.min_confidence}};
}

inline track::TrackerConfig tracker_config_from_json(const json& j) {
  track::TrackerConfig c;
  c.tau = j.value("tau", c.tau);
  c.match_threshold = j.value("match_threshold", c.match_threshold);
  c.max_missed = j.value("max_missed", c.max_missed);
  c.min_confidence = j.value("min_confidence", c.min_confidence);
  return c;
}

inline json to_json(const metrics::EvalConfig& c) {
  return {{"match_dist", c.match_dist},
          {"n_recall_thresholds", c.n_recall_thresholds},
          {"sweep_resolution", c.sweep_resolution}};
}

inline metrics::EvalConfig eval_config_from_json(const json& j) {
  metrics::EvalConfig c;
  c.match_dist = j.value("match_dist", c.match_dist);
  c.n_recall_thresholds = j.value("n_recall_thresholds", c.n_recall_thresholds);
  c.sweep_resolution = j.value("sweep_resolution", c.sweep_resolution);
  c.validate();
  return c;
}

inline json load_json_file(const std::string& path) {
  auto f = detail::open_in(path);
  try {
    return json::parse(f);
  } catch (const json::exception& e) {
    throw ParseError(path + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// checkpoint container
// ---------------------------------------------------------------------------

inline void save_checkpoint(const std::string& path, const train::Checkpoint& ck) {
  json tensors = json::array();
  for (const auto& [name, e] : ck.weights) tensors.push_back({{"name", name}, {"shape", e.shape}});
  json hdr{{"schema_version", kSchemaVersion},
           {"kind", "checkpoint"},
           {"net_config", to_json(ck.net)},
           {"step", ck.step},
           {"rng_state", ck.rng_state},
           {"sections", json::array({"weights", "adam_m", "adam_v"})},
           {"tensors", tensors}};
  std::string h = hdr.dump();
  auto f = detail::open_out(path);
  f.write("STIF", 4);
  uint32_t version = 1;
  uint64_t hlen = h.size();
  f.write(reinterpret_cast<const char*>(&version), 4);
  f.write(reinterpret_cast<const char*>(&hlen), 8);
  f.write(h.data(), static_cast<std::streamsize>(h.size()));
  auto dump_section = [&](const net::Weights& w) {
    for (const auto& [name, e] : w)
      f.write(reinterpret_cast<const char*>(e.value.data()),
              static_cast<std::streamsize>(e.value.size() * sizeof(double)));
  };
  dump_section(ck.weights);
  dump_section(ck.adam_m);
  dump_section(ck.adam_v);
  if (!f) throw ParseError("checkpoint write failed: " + path);
}

inline train::Checkpoint load_checkpoint(const std::string& path) {
  auto f = detail::open_in(path);
  char magic[4];
  f.read(magic, 4);
  if (!f || std::string(magic, 4) != "STIF") throw ParseError(path + ": not a checkpoint file");
  uint32_t version = 0;
  uint64_t hlen = 0;
  f.read(reinterpret_cast<char*>(&version), 4);
  f.read(reinterpret_cast<char*>(&hlen), 8);
  if (!f || version != 1) throw ParseError(path + ": unsupported checkpoint version");
  std::string h(hlen, '\0');
  f.read(h.data(), static_cast<std::streamsize>(hlen));
  if (!f) throw ParseError(path + ": truncated header");
  json hdr;
  try {
    hdr = json::parse(h);
  } catch (const json::exception& e) {
    throw ParseError(path + ": bad checkpoint header: " + e.what());
  }
  detail::check_header(hdr, "checkpoint", path);

  train::Checkpoint ck;
  ck.net = net_config_from_json(hdr.at("net_config"));
  ck.step = hdr.value("step", 0);
  ck.rng_state = hdr.value("rng_state", std::string());
  auto read_section = [&](net::Weights& w) {
    for (const auto& t : hdr.at("tensors")) {
      ad::Shape shape = t.at("shape").get<std::vector<int>>();
      std::vector<double> vals(static_cast<size_t>(ad::numel(shape)));
      f.read(reinterpret_cast<char*>(vals.data()),
             static_cast<std::streamsize>(vals.size() * sizeof(double)));
      if (!f) throw ParseError(path + ": truncated payload");
      w.define(t.at("name"), std::move(shape), std::move(vals));
    }
  };
  read_section(ck.weights);
  read_section(ck.adam_m);
  read_section(ck.adam_v);
  return ck;
}

// ---------------------------------------------------------------------------
// run manifest
// ---------------------------------------------------------------------------

// Every command emits <out>.manifest.json describing the run. The wall_clock
// field is informational and is the one part of the outputs that varies
// between otherwise identical runs.
inline void write_manifest(const std::string& path, const std::string& command,
                           const json& config, const json& inputs, const json& outputs,
                           double wall_clock_sec) {
  json m{{"schema_version", kSchemaVersion},
         {"kind", "manifest"},
         {"command", command},
         {"config", config},
         {"inputs", inputs},
         {"outputs", outputs},
         {"tool_version", kVersion},
         {"wall_clock_sec", wall_clock_sec}};
  auto f = detail::open_out(path);
  f << m.dump(2) << "\n";
}

}  // namespace stif::io
