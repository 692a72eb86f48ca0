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
#include <vector>

#include "stif/geometry.hpp"
#include "stif/net.hpp"
#include "stif/tensor.hpp"

namespace stif::loss {

// Ground-truth association between two frames: (K+1) x (K+1) zero/one matrix
// whose last row/column is the un-identified slot. Every valid object row and
// column sums to exactly 1; the un-identified lane absorbs births, deaths and
// false positives and is exempt from the sum rule.
struct GroundTruthAssociation {
  int K = 0;
  std::vector<double> matrix;       // (K+1)^2 row-major, entries 0 or 1
  std::vector<uint8_t> valid_rows;  // K+1, slot K always valid
  std::vector<uint8_t> valid_cols;

  void validate() const {
    int n = K + 1;
    if (static_cast<int>(matrix.size()) != n * n ||
        static_cast<int>(valid_rows.size()) != n ||
        static_cast<int>(valid_cols.size()) != n)
      throw ShapeError("GroundTruthAssociation: inconsistent sizes");
    if (!valid_rows[K] || !valid_cols[K])
      throw InvalidArgument("GroundTruthAssociation: un-identified slot must be valid");
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) {
        double v = matrix[static_cast<size_t>(i) * n + j];
        if (v != 0.0 && v != 1.0)
          throw InvalidArgument("GroundTruthAssociation: entries must be 0/1");
        if (v == 1.0 && (!valid_rows[i] || !valid_cols[j]))
          throw InvalidArgument("GroundTruthAssociation: match outside valid region");
      }
    if (matrix[static_cast<size_t>(K) * n + K] != 0.0)
      throw InvalidArgument("GroundTruthAssociation: corner must be 0");
    for (int i = 0; i < K; ++i) {
      if (!valid_rows[i]) continue;
      double s = 0;
      for (int j = 0; j < n; ++j) s += matrix[static_cast<size_t>(i) * n + j];
      if (s != 1.0) throw InvalidArgument("GroundTruthAssociation: row sum != 1");
    }
    for (int j = 0; j < K; ++j) {
      if (!valid_cols[j]) continue;
      double s = 0;
      for (int i = 0; i < n; ++i) s += matrix[static_cast<size_t>(i) * n + j];
      if (s != 1.0) throw InvalidArgument("GroundTruthAssociation: column sum != 1");
    }
  }

  int match_count() const {
    double s = 0;
    for (double v : matrix) s += v;
    return static_cast<int>(s);
  }
};

// Association loss on the affinity matrix: row- and column-wise softmax over
// the valid region, multiplied elementwise into the dual-softmax score, then
// cross-entropy against the ground-truth matches, normalized by their count.
// Supervises matches, births and deaths alike.
inline ad::Tensor tracking_loss(ad::Tape& t, const net::AffinityMatrix& am,
                                const GroundTruthAssociation& gt) {
  gt.validate();
  int n = t.rows(am.logits);
  if (n != gt.K + 1) throw ShapeError("tracking_loss: K mismatch");
  if (am.valid_rows != gt.valid_rows || am.valid_cols != gt.valid_cols)
    throw InvalidArgument("tracking_loss: affinity/gt masks disagree");
  int matches = gt.match_count();
  if (matches == 0) return t.scalar(0.0);
  constexpr double kEps = 1e-12;
  ad::Tensor prob = net::affinity_product(t, am);
  ad::Tensor logp = t.log_eps(prob, kEps);
  ad::Tensor nll = t.weighted_sum(logp, gt.matrix);
  // log((p + eps) / (1 + eps)) keeps the loss non-negative at saturation;
  // the relu only trims last-ulp rounding below zero.
  nll = t.sub(nll, t.scalar(matches * std::log1p(kEps)));
  return t.relu(t.mul_scalar(nll, -1.0 / matches));
}

// One identity observed in both frames of a pair; indices address detection
// rows, boxes are ground truth in the world frame.
struct ConsistencyPair {
  int cur_index = 0;
  int prev_index = 0;
  geom::Box3D gt_cur;
  geom::Box3D gt_prev;
};

namespace detail {

inline std::vector<double> box_params(const geom::Box3D& b) {
  return {b.x, b.y, b.z, b.l, b.w, b.h, b.yaw};
}

// Gathers detection boxes (constants) plus their refinement rows from the
// K x 7 head output, producing the refined n x 7 parameter matrix on tape.
inline ad::Tensor refined_params(ad::Tape& t, const std::vector<geom::Box3D>& det,
                                 ad::Tensor refine, const std::vector<int>& rows) {
  std::vector<double> base;
  base.reserve(rows.size() * 7);
  for (int r : rows)
    for (double v : box_params(det.at(r))) base.push_back(v);
  ad::Tensor det_rows = t.constant({static_cast<int>(rows.size()), 7}, std::move(base));
  return t.add(det_rows, t.gather_rows(refine, rows));
}

}  // namespace detail

// Relative 3D corner-distance consistency between frame t and each past frame
// t - zeta: per corner, the distance between the refined boxes of one identity
// across the pair is compared with the same distance under ground truth.
// Aggregation is the mean of absolute deviations over the 8 corners, then over
// identity pairs, then over the zetas that have any pair. Returns 0 when no
// correspondence exists. All boxes are world-frame.
inline ad::Tensor temporal_consistency_loss(
    ad::Tape& t, const std::vector<geom::Box3D>& det_cur, ad::Tensor refine_cur,
    const std::vector<std::vector<geom::Box3D>>& det_prev_per_zeta,
    const std::vector<ad::Tensor>& refine_prev_per_zeta,
    const std::vector<std::vector<ConsistencyPair>>& pairs_per_zeta) {
  if (det_prev_per_zeta.size() != pairs_per_zeta.size() ||
      refine_prev_per_zeta.size() != pairs_per_zeta.size())
    throw ShapeError("temporal_consistency_loss: zeta list sizes differ");
  std::vector<ad::Tensor> per_zeta;
  for (size_t z = 0; z < pairs_per_zeta.size(); ++z) {
    const auto& pairs = pairs_per_zeta[z];
    if (pairs.empty()) continue;
    std::vector<int> cur_rows, prev_rows;
    std::vector<double> gt_dist;
    gt_dist.reserve(pairs.size() * 8);
    for (const auto& p : pairs) {
      cur_rows.push_back(p.cur_index);
      prev_rows.push_back(p.prev_index);
      auto cc = geom::corners3d(p.gt_cur);
      auto cp = geom::corners3d(p.gt_prev);
      for (int k = 0; k < 8; ++k) {
        double dx = cc[k][0] - cp[k][0], dy = cc[k][1] - cp[k][1], dz = cc[k][2] - cp[k][2];
        gt_dist.push_back(std::sqrt(dx * dx + dy * dy + dz * dz));
      }
    }
    int p = static_cast<int>(pairs.size());
    ad::Tensor cur = t.box_corners(detail::refined_params(t, det_cur, refine_cur, cur_rows));
    ad::Tensor prev = t.box_corners(
        detail::refined_params(t, det_prev_per_zeta[z], refine_prev_per_zeta[z], prev_rows));
    ad::Tensor diff = t.reshape(t.sub(cur, prev), {p * 8, 3});
    ad::Tensor dist = t.row_l2norm(diff);
    ad::Tensor err = t.abs(t.sub(dist, t.constant({p * 8, 1}, std::move(gt_dist))));
    per_zeta.push_back(t.mean(err));
  }
  if (per_zeta.empty()) return t.scalar(0.0);
  ad::Tensor total = per_zeta[0];
  for (size_t i = 1; i < per_zeta.size(); ++i) total = t.add(total, per_zeta[i]);
  return t.mul_scalar(total, 1.0 / static_cast<double>(per_zeta.size()));
}

// Ground-truth targets for one frame's prediction heads, aligned with the
// detection rows. Rows without an identity (false positives) are unmatched
// and excluded from every term.
struct AuxTargets {
  std::vector<uint8_t> matched;                    // n flags
  std::vector<std::array<double, 3>> velocity;     // m/s, world frame
  std::vector<int> attribute;                      // class ids
  std::vector<geom::Box3D> boxes;                  // GT boxes, world frame
};

// Velocity MSE + attribute cross-entropy + refined-box MSE (yaw compared as
// an angular difference), each averaged over matched rows.
inline ad::Tensor aux_losses(ad::Tape& t, const net::HeadsOut& h,
                             const std::vector<geom::Box3D>& det_boxes,
                             const AuxTargets& tg, const net::NetConfig& cfg) {
  int K = t.rows(h.velocity);
  int n = static_cast<int>(tg.matched.size());
  if (n > K) throw ShapeError("aux_losses: more targets than slots");
  if (tg.velocity.size() != tg.matched.size() || tg.attribute.size() != tg.matched.size() ||
      tg.boxes.size() != tg.matched.size() || det_boxes.size() != tg.matched.size())
    throw ShapeError("aux_losses: ragged targets");
  std::vector<uint8_t> mask(K, 0);
  bool any = false;
  for (int i = 0; i < n; ++i) {
    mask[i] = tg.matched[i];
    any = any || mask[i];
  }
  if (!any) return t.scalar(0.0);

  std::vector<double> vel(static_cast<size_t>(K) * 3, 0.0);
  std::vector<double> attr(static_cast<size_t>(K) * cfg.n_attributes, 0.0);
  for (int i = 0; i < n; ++i) {
    if (!mask[i]) continue;
    for (int j = 0; j < 3; ++j) vel[static_cast<size_t>(i) * 3 + j] = tg.velocity[i][j];
    if (tg.attribute[i] < 0 || tg.attribute[i] >= cfg.n_attributes)
      throw InvalidArgument("aux_losses: attribute id out of range");
    attr[static_cast<size_t>(i) * cfg.n_attributes + tg.attribute[i]] = 1.0;
  }
  ad::Tensor l_vel = t.mse(h.velocity, t.constant({K, 3}, std::move(vel)), mask);
  ad::Tensor l_attr = t.cross_entropy(h.attribute_logits, attr, mask);

  // refined box vs GT; the yaw target is shifted by whole turns so that the
  // residual equals the wrapped angular difference at the current prediction
  std::vector<double> det_params(static_cast<size_t>(K) * 7, 0.0);
  for (int i = 0; i < n; ++i) {
    auto p = detail::box_params(det_boxes[i]);
    std::copy(p.begin(), p.end(), det_params.begin() + static_cast<size_t>(i) * 7);
  }
  ad::Tensor refined = t.add(t.constant({K, 7}, std::move(det_params)), h.box_refine);
  std::vector<double> gt_params(static_cast<size_t>(K) * 7, 0.0);
  for (int i = 0; i < n; ++i) {
    if (!mask[i]) continue;
    auto p = detail::box_params(tg.boxes[i]);
    double pred_yaw = t.val(refined)[static_cast<size_t>(i) * 7 + 6];
    p[6] = pred_yaw - wrap_angle(pred_yaw - tg.boxes[i].yaw);
    std::copy(p.begin(), p.end(), gt_params.begin() + static_cast<size_t>(i) * 7);
  }
  ad::Tensor l_box = t.mse(refined, t.constant({K, 7}, std::move(gt_params)), mask);
  return t.add(t.add(l_vel, l_attr), l_box);
}

// Multi-task combination: the unweighted sum of the given parts.
inline ad::Tensor combined_loss(ad::Tape& t, const std::vector<ad::Tensor>& parts) {
  if (parts.empty()) return t.scalar(0.0);
  ad::Tensor total = parts[0];
  for (size_t i = 1; i < parts.size(); ++i) total = t.add(total, parts[i]);
  return total;
}

}  // namespace stif::loss
