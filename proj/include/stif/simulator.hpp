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
#include <string>
#include <vector>

#include "stif/geometry.hpp"
#include "stif/losses.hpp"
#include "stif/rng.hpp"

// Synthetic driving scenes: ground-truth trajectories plus noisy detections
// with identity-consistent appearance vectors. The world is z-up with a
// single static camera at the origin looking along +x; an object is visible
// while every 3D corner stays in front of the camera plane (x >= 0.5 m) and
// within range. Identities never return once they leave.
namespace stif::sim {

struct ScenarioConfig {
  int n_objects = 8;
  int n_frames = 40;
  double frame_dt = 0.5;  // 2 Hz keyframes
  // motion class mix; normalized fractions of constant-velocity,
  // constant-turn and stationary objects
  double motion_cv = 0.5;
  double motion_ct = 0.3;
  double motion_stationary = 0.2;
  double pos_noise_sigma = 0.0;   // meters, per axis
  double dim_noise_sigma = 0.0;   // meters
  double yaw_noise_sigma = 0.0;   // radians
  double reid_noise_sigma = 0.0;  // before re-normalization
  double dropout_prob = 0.0;      // per object-frame
  double fp_rate = 0.0;           // expected false positives per frame
  uint64_t seed = 0;
  int K = 16;  // slot bound shared with the network
  int d_reid = 32;
  int n_categories = 3;

  void validate() const {
    if (n_objects < 1 || n_frames < 1) throw InvalidArgument("scenario: empty");
    if (n_objects > K) throw InvalidArgument("scenario: n_objects exceeds K");
    if (frame_dt <= 0) throw InvalidArgument("scenario: frame_dt must be positive");
    if (motion_cv < 0 || motion_ct < 0 || motion_stationary < 0 ||
        motion_cv + motion_ct + motion_stationary <= 0)
      throw InvalidArgument("scenario: bad motion mix");
    for (double s : {pos_noise_sigma, dim_noise_sigma, yaw_noise_sigma, reid_noise_sigma})
      if (s < 0) throw InvalidArgument("scenario: negative noise sigma");
    if (dropout_prob < 0 || dropout_prob > 1) throw InvalidArgument("scenario: dropout_prob");
    if (fp_rate < 0) throw InvalidArgument("scenario: fp_rate");
    if (d_reid < 1 || n_categories < 1) throw InvalidArgument("scenario: dims");
  }
};

enum class Attribute : int { kMoving = 0, kStopped = 1, kParked = 2 };

inline const char* attribute_name(Attribute a) {
  switch (a) {
    case Attribute::kMoving: return "moving";
    case Attribute::kStopped: return "stopped";
    case Attribute::kParked: return "parked";
  }
  return "?";
}

struct GtObject {
  int id = 0;
  geom::Box3D box;  // world frame
  std::array<double, 3> velocity{0, 0, 0};
  Attribute attribute = Attribute::kMoving;
  int category = 0;
};

struct GroundTruthFrame {
  int frame_index = 0;
  double timestamp = 0.0;
  std::vector<GtObject> objects;
};

struct Detection {
  geom::Box2D box2d;
  geom::Box3D box3d;  // world frame
  int category = 0;
  double confidence = 1.0;
  std::vector<double> appearance;  // unit norm, d_reid
  int gt_identity = -1;            // hidden label; -1 marks a false positive
};

struct DetectionFrame {
  int frame_index = 0;
  double timestamp = 0.0;
  std::vector<Detection> detections;
};

struct Scenario {
  ScenarioConfig config;
  std::vector<GroundTruthFrame> gt;
  std::vector<DetectionFrame> det;
};

inline geom::CameraModel default_camera() { return {1000, 1000, 960, 540, 1920, 1080}; }

inline net::FrameInput to_frame_input(const DetectionFrame& f) {
  net::FrameInput in;
  in.timestamp = f.timestamp;
  for (const auto& d : f.detections) {
    in.box2d.push_back(d.box2d);
    in.box3d.push_back(d.box3d);
    in.category.push_back(d.category);
    in.reid.push_back(d.appearance);
  }
  return in;
}

namespace detail {

enum class Motion { kConstVel, kConstTurn, kStationary };

struct ObjectSpec {
  int id;
  int category;
  Motion motion;
  double l, w, h;
  double x0, y0;      // spawn center
  double speed;       // m/s
  double heading0;    // rad
  double yaw_rate;    // rad/s, constant-turn only
  int spawn_frame;
  std::vector<double> identity_appearance;  // unit
};

inline std::vector<double> random_unit(Rng& rng, int d) {
  std::vector<double> v(d);
  double n = 0;
  do {
    n = 0;
    for (auto& x : v) {
      x = rng.gaussian();
      n += x * x;
    }
  } while (n < 1e-12);
  n = std::sqrt(n);
  for (auto& x : v) x /= n;
  return v;
}

// Closed-form state at elapsed time s since spawn.
inline void state_at(const ObjectSpec& o, double s, geom::Box3D* box,
                     std::array<double, 3>* vel) {
  double x, y, yaw, vx, vy;
  switch (o.motion) {
    case Motion::kStationary:
      x = o.x0;
      y = o.y0;
      yaw = o.heading0;
      vx = vy = 0;
      break;
    case Motion::kConstVel:
      x = o.x0 + o.speed * std::cos(o.heading0) * s;
      y = o.y0 + o.speed * std::sin(o.heading0) * s;
      yaw = o.heading0;
      vx = o.speed * std::cos(o.heading0);
      vy = o.speed * std::sin(o.heading0);
      break;
    case Motion::kConstTurn: {
      double th = o.heading0 + o.yaw_rate * s;
      double r = o.speed / o.yaw_rate;
      x = o.x0 + r * (std::sin(th) - std::sin(o.heading0));
      y = o.y0 - r * (std::cos(th) - std::cos(o.heading0));
      yaw = wrap_angle(th);
      vx = o.speed * std::cos(th);
      vy = o.speed * std::sin(th);
      break;
    }
  }
  box->x = x;
  box->y = y;
  box->z = o.h / 2.0;
  box->l = o.l;
  box->w = o.w;
  box->h = o.h;
  box->yaw = wrap_angle(yaw);
  (*vel) = {vx, vy, 0.0};
}

// Camera frame: x_cam = -y_w (right), y_cam = -z_w (down), z_cam = x_w.
inline geom::Vec3 world_to_camera(const geom::Vec3& p) {
  return {-p[1], -p[2], p[0]};
}

inline bool visible(const geom::Box3D& b) {
  if (b.x > 250.0) return false;
  auto corners = geom::corners3d(b);
  for (const auto& c : corners)
    if (c[0] < 0.5) return false;
  return true;
}

// Axis-aligned pixel hull of the projected 3D corners.
inline geom::Box2D project_hull(const geom::CameraModel& cam, const geom::Box3D& b) {
  auto corners = geom::corners3d(b);
  double xmin = 1e300, xmax = -1e300, ymin = 1e300, ymax = -1e300;
  for (const auto& c : corners) {
    geom::Vec2 px = geom::project(cam, world_to_camera(c));
    xmin = std::min(xmin, px[0]);
    xmax = std::max(xmax, px[0]);
    ymin = std::min(ymin, px[1]);
    ymax = std::max(ymax, px[1]);
  }
  return {(xmin + xmax) / 2.0, (ymin + ymax) / 2.0, std::max(xmax - xmin, 1.0),
          std::max(ymax - ymin, 1.0)};
}

inline void object_dims(Rng& rng, int category, double* l, double* w, double* h) {
  switch (category % 3) {
    case 0:  // car
      *l = rng.uniform(3.8, 5.2);
      *w = rng.uniform(1.7, 2.1);
      *h = rng.uniform(1.4, 1.8);
      break;
    case 1:  // pedestrian
      *l = rng.uniform(0.5, 0.8);
      *w = rng.uniform(0.5, 0.8);
      *h = rng.uniform(1.6, 1.9);
      break;
    default:  // cyclist
      *l = rng.uniform(1.6, 2.0);
      *w = rng.uniform(0.5, 0.8);
      *h = rng.uniform(1.5, 1.8);
      break;
  }
}

}  // namespace detail

// Deterministic synthesis: everything is drawn from one mt19937_64 stream in
// a fixed order, so a seed fully determines the scenario.
inline Scenario generate(const ScenarioConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed);
  geom::CameraModel cam = default_camera();

  double mix_total = cfg.motion_cv + cfg.motion_ct + cfg.motion_stationary;
  std::vector<detail::ObjectSpec> objects;
  for (int i = 0; i < cfg.n_objects; ++i) {
    detail::ObjectSpec o;
    o.id = i;
    o.category = static_cast<int>(rng.uniform_int(0, cfg.n_categories - 1));
    detail::object_dims(rng, o.category, &o.l, &o.w, &o.h);
    o.x0 = rng.uniform(12.0, 70.0);
    o.y0 = rng.uniform(-25.0, 25.0);
    double u = rng.uniform() * mix_total;
    o.motion = u < cfg.motion_cv
                   ? detail::Motion::kConstVel
                   : (u < cfg.motion_cv + cfg.motion_ct ? detail::Motion::kConstTurn
                                                        : detail::Motion::kStationary);
    o.speed = o.motion == detail::Motion::kStationary ? 0.0 : rng.uniform(1.5, 10.0);
    if (o.category % 3 == 1) o.speed = std::min(o.speed, 2.5);  // pedestrians walk
    o.heading0 = rng.uniform(-std::numbers::pi, std::numbers::pi);
    o.yaw_rate = 0.0;
    if (o.motion == detail::Motion::kConstTurn) {
      o.yaw_rate = rng.uniform(0.08, 0.35) * (rng.uniform() < 0.5 ? -1.0 : 1.0);
    }
    o.spawn_frame = rng.uniform() < 0.7 ? 0 : static_cast<int>(rng.uniform_int(1, std::max(1, cfg.n_frames / 2)));
    o.identity_appearance = detail::random_unit(rng, cfg.d_reid);
    objects.push_back(std::move(o));
  }

  Scenario out;
  out.config = cfg;
  std::vector<uint8_t> exited(objects.size(), 0);

  for (int f = 0; f < cfg.n_frames; ++f) {
    GroundTruthFrame gtf;
    gtf.frame_index = f;
    gtf.timestamp = f * cfg.frame_dt;
    DetectionFrame detf;
    detf.frame_index = f;
    detf.timestamp = gtf.timestamp;

    for (auto& o : objects) {
      if (f < o.spawn_frame || exited[o.id]) continue;
      geom::Box3D box;
      std::array<double, 3> vel;
      detail::state_at(o, (f - o.spawn_frame) * cfg.frame_dt, &box, &vel);
      if (!detail::visible(box)) {
        if (f > o.spawn_frame) exited[o.id] = 1;  // never comes back
        continue;
      }
      GtObject g;
      g.id = o.id;
      g.box = box;
      g.velocity = vel;
      double speed = std::hypot(vel[0], vel[1]);
      g.attribute = o.motion == detail::Motion::kStationary
                        ? Attribute::kParked
                        : (speed > 0.5 ? Attribute::kMoving : Attribute::kStopped);
      g.category = o.category;
      gtf.objects.push_back(g);

      // detection of this object (one noise draw block per visible object,
      // consumed in a fixed order even when dropped)
      double drop = rng.uniform();
      double nx = rng.gaussian(), ny = rng.gaussian(), nz = rng.gaussian();
      double nl = rng.gaussian(), nw = rng.gaussian(), nh = rng.gaussian();
      double nyaw = rng.gaussian();
      double nconf = rng.gaussian();
      std::vector<double> reid = o.identity_appearance;
      for (auto& v : reid) v += cfg.reid_noise_sigma * rng.gaussian();
      if (drop < cfg.dropout_prob) continue;
      Detection d;
      d.box3d = box;
      d.box3d.x += cfg.pos_noise_sigma * nx;
      d.box3d.y += cfg.pos_noise_sigma * ny;
      d.box3d.z += cfg.pos_noise_sigma * nz;
      d.box3d.l = std::max(0.2, box.l + cfg.dim_noise_sigma * nl);
      d.box3d.w = std::max(0.2, box.w + cfg.dim_noise_sigma * nw);
      d.box3d.h = std::max(0.2, box.h + cfg.dim_noise_sigma * nh);
      d.box3d.yaw = wrap_angle(box.yaw + cfg.yaw_noise_sigma * nyaw);
      // keep the noisy box in front of the camera plane
      {
        auto cs = geom::corners3d(d.box3d);
        double minx = 1e300;
        for (const auto& c : cs) minx = std::min(minx, c[0]);
        if (minx < 0.1) d.box3d.x += 0.1 - minx;
      }
      d.box2d = detail::project_hull(cam, d.box3d);
      d.category = o.category;
      double noise_mag = cfg.pos_noise_sigma * std::sqrt(nx * nx + ny * ny + nz * nz);
      d.confidence = std::clamp(0.95 - 0.5 * noise_mag + 0.05 * nconf, 0.55, 0.995);
      double norm = 0;
      for (double v : reid) norm += v * v;
      norm = std::sqrt(std::max(norm, 1e-12));
      for (auto& v : reid) v /= norm;
      d.appearance = std::move(reid);
      d.gt_identity = o.id;
      detf.detections.push_back(std::move(d));
    }

    // false positives, capped so the frame stays within K slots
    int n_fp = rng.poisson(cfg.fp_rate);
    n_fp = std::min<int>(n_fp, cfg.K - static_cast<int>(detf.detections.size()));
    for (int k = 0; k < n_fp; ++k) {
      Detection d;
      d.category = static_cast<int>(rng.uniform_int(0, cfg.n_categories - 1));
      double l, w, h;
      detail::object_dims(rng, d.category, &l, &w, &h);
      d.box3d = {rng.uniform(8.0, 120.0), rng.uniform(-30.0, 30.0), h / 2.0,
                 l, w, h, wrap_angle(rng.uniform(-std::numbers::pi, std::numbers::pi))};
      d.box2d = detail::project_hull(cam, d.box3d);
      d.confidence = rng.uniform(0.05, 0.5);
      d.appearance = detail::random_unit(rng, cfg.d_reid);
      d.gt_identity = -1;
      detf.detections.push_back(std::move(d));
    }

    out.gt.push_back(std::move(gtf));
    out.det.push_back(std::move(detf));
  }
  return out;
}

// Ground-truth association between two detection frames via the hidden
// identity labels. Unmatched detections on either side map to the
// un-identified slot; false positives always do.
inline loss::GroundTruthAssociation gt_association(const DetectionFrame& cur,
                                                   const DetectionFrame& prev, int K) {
  int n_cur = static_cast<int>(cur.detections.size());
  int n_prev = static_cast<int>(prev.detections.size());
  if (n_cur > K || n_prev > K) throw InvalidArgument("gt_association: frame exceeds K");
  loss::GroundTruthAssociation gt;
  gt.K = K;
  int n = K + 1;
  gt.matrix.assign(static_cast<size_t>(n) * n, 0.0);
  gt.valid_rows.assign(n, 0);
  gt.valid_cols.assign(n, 0);
  for (int i = 0; i < n_cur; ++i) gt.valid_rows[i] = 1;
  for (int j = 0; j < n_prev; ++j) gt.valid_cols[j] = 1;
  gt.valid_rows[K] = gt.valid_cols[K] = 1;

  std::vector<uint8_t> prev_matched(n_prev, 0);
  for (int i = 0; i < n_cur; ++i) {
    int id = cur.detections[i].gt_identity;
    int match = -1;
    if (id >= 0) {
      for (int j = 0; j < n_prev; ++j)
        if (prev.detections[j].gt_identity == id) {
          match = j;
          break;
        }
    }
    if (match >= 0) {
      gt.matrix[static_cast<size_t>(i) * n + match] = 1.0;
      prev_matched[match] = 1;
    } else {
      gt.matrix[static_cast<size_t>(i) * n + K] = 1.0;
    }
  }
  for (int j = 0; j < n_prev; ++j)
    if (!prev_matched[j]) gt.matrix[static_cast<size_t>(K) * n + j] = 1.0;
  gt.validate();
  return gt;
}

}  // namespace stif::sim
