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
#include <cmath>

#include "stif/common.hpp"

namespace stif::geom {

using Vec2 = std::array<double, 2>;
using Vec3 = std::array<double, 3>;
using Mat3 = std::array<std::array<double, 3>, 3>;
using Corners2 = std::array<Vec2, 4>;  // rows: (-,-), (-,+), (+,+), (+,-)
using Corners3 = std::array<Vec3, 8>;  // bottom ring then top ring, see corners3d

// Axis-aligned 2D box, pixel units, full extents.
struct Box2D {
  double cx = 0.0, cy = 0.0, w = 0.0, h = 0.0;

  bool valid() const {
    return is_finite(cx) && is_finite(cy) && is_finite(w) && is_finite(h) &&
           w > 0.0 && h > 0.0;
  }
};

// Oriented 3D box. z-up frame, yaw about +z in (-pi, pi], length along the
// heading direction, full extents in meters.
struct Box3D {
  double x = 0.0, y = 0.0, z = 0.0;
  double l = 0.0, w = 0.0, h = 0.0;
  double yaw = 0.0;

  bool valid() const {
    return is_finite(x) && is_finite(y) && is_finite(z) && is_finite(l) &&
           is_finite(w) && is_finite(h) && is_finite(yaw) && l > 0.0 &&
           w > 0.0 && h > 0.0 && yaw > -std::numbers::pi - 1e-12 &&
           yaw <= std::numbers::pi + 1e-12;
  }

  Box3D normalized() const {
    Box3D b = *this;
    b.yaw = wrap_angle(b.yaw);
    return b;
  }
};

// Pinhole intrinsics; x right, y down, z forward in the camera frame.
struct CameraModel {
  double fx = 1000.0, fy = 1000.0;
  double cx0 = 960.0, cy0 = 540.0;
  double image_w = 1920.0, image_h = 1080.0;

  bool valid() const {
    return fx > 0.0 && fy > 0.0 && cx0 >= 0.0 && cx0 <= image_w &&
           cy0 >= 0.0 && cy0 <= image_h;
  }
};

// Rigid transform ego -> world.
struct EgoPose {
  Mat3 rotation = {{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}};
  Vec3 translation = {0, 0, 0};

  // Orthonormality and det = +1, both within 1e-9.
  bool valid() const {
    const Mat3& r = rotation;
    for (int i = 0; i < 3; ++i) {
      for (int j = 0; j < 3; ++j) {
        double dot = 0.0;
        for (int k = 0; k < 3; ++k) dot += r[k][i] * r[k][j];
        double want = (i == j) ? 1.0 : 0.0;
        if (std::abs(dot - want) > 1e-9) return false;
      }
    }
    double det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1]) -
                 r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0]) +
                 r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
    return std::abs(det - 1.0) <= 1e-9;
  }

  EgoPose inverse() const {
    EgoPose inv;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) inv.rotation[i][j] = rotation[j][i];
    for (int i = 0; i < 3; ++i) {
      double s = 0.0;
      for (int j = 0; j < 3; ++j) s += inv.rotation[i][j] * translation[j];
      inv.translation[i] = -s;
    }
    return inv;
  }

  // Heading about +z; well-defined for the yaw-only poses used here.
  double heading() const { return std::atan2(rotation[1][0], rotation[0][0]); }

  Vec3 apply(const Vec3& p) const {
    Vec3 q;
    for (int i = 0; i < 3; ++i)
      q[i] = rotation[i][0] * p[0] + rotation[i][1] * p[1] +
             rotation[i][2] * p[2] + translation[i];
    return q;
  }

  static EgoPose yaw_translation(double yaw, const Vec3& t) {
    EgoPose p;
    double c = std::cos(yaw), s = std::sin(yaw);
    p.rotation = {{{c, -s, 0}, {s, c, 0}, {0, 0, 1}}};
    p.translation = t;
    return p;
  }
};

// Corner order is part of the file format and of every cross-frame
// correspondence: (cx-w/2, cy-h/2), (cx-w/2, cy+h/2), (cx+w/2, cy+h/2),
// (cx+w/2, cy-h/2).
inline Corners2 corners2d(const Box2D& b) {
  if (!b.valid()) throw InvalidArgument("corners2d: invalid Box2D");
  double hw = b.w / 2.0, hh = b.h / 2.0;
  return {{{b.cx - hw, b.cy - hh},
           {b.cx - hw, b.cy + hh},
           {b.cx + hw, b.cy + hh},
           {b.cx + hw, b.cy - hh}}};
}

// Local corner offsets before yaw rotation, fixed order: bottom ring
// (+l,+w),(-l,+w),(-l,-w),(+l,-w) at -h/2, then the same ring at +h/2.
inline Corners3 corner_offsets(double l, double w, double h) {
  double hl = l / 2.0, hw = w / 2.0, hh = h / 2.0;
  return {{{+hl, +hw, -hh},
           {-hl, +hw, -hh},
           {-hl, -hw, -hh},
           {+hl, -hw, -hh},
           {+hl, +hw, +hh},
           {-hl, +hw, +hh},
           {-hl, -hw, +hh},
           {+hl, -hw, +hh}}};
}

// corners = center + Rz(yaw) * offsets; mean of the rows equals the center.
inline Corners3 corners3d(const Box3D& b) {
  if (!b.valid()) throw InvalidArgument("corners3d: invalid Box3D");
  Corners3 out = corner_offsets(b.l, b.w, b.h);
  double c = std::cos(b.yaw), s = std::sin(b.yaw);
  for (auto& p : out) {
    double x = p[0], y = p[1];
    p[0] = b.x + c * x - s * y;
    p[1] = b.y + s * x + c * y;
    p[2] = b.z + p[2];
  }
  return out;
}

// Pinhole projection of a camera-frame point, z forward.
inline Vec2 project(const CameraModel& cam, const Vec3& p) {
  if (!cam.valid()) throw InvalidArgument("project: invalid CameraModel");
  if (!(is_finite(p[0]) && is_finite(p[1]) && is_finite(p[2])))
    throw InvalidArgument("project: non-finite point");
  if (p[2] <= 1e-6) throw NumericError("project: point behind camera");
  return {cam.fx * p[0] / p[2] + cam.cx0, cam.fy * p[1] / p[2] + cam.cy0};
}

// Inverse of project at a known depth z > 0.
inline Vec3 unproject(const CameraModel& cam, const Vec2& px, double z) {
  if (z <= 1e-6) throw NumericError("unproject: non-positive depth");
  return {(px[0] - cam.cx0) * z / cam.fx, (px[1] - cam.cy0) * z / cam.fy, z};
}

inline Box3D to_world(const EgoPose& pose, const Box3D& b) {
  if (!pose.valid()) throw InvalidArgument("to_world: invalid EgoPose");
  if (!b.valid()) throw InvalidArgument("to_world: invalid Box3D");
  Vec3 c = pose.apply({b.x, b.y, b.z});
  Box3D out = b;
  out.x = c[0];
  out.y = c[1];
  out.z = c[2];
  out.yaw = wrap_angle(b.yaw + pose.heading());
  return out;
}

// Ground-plane center distance; z is ignored.
inline double bev_center_distance(const Box3D& a, const Box3D& b) {
  return std::hypot(a.x - b.x, a.y - b.y);
}

}  // namespace stif::geom
