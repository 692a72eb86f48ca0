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

#include <string>
#include <vector>

#include "stif/attention.hpp"
#include "stif/geometry.hpp"
#include "stif/tensor.hpp"
#include "stif/weights.hpp"

// The association network: heterogeneous cue embedding, spatial information
// flow (per-frame self-attention), time-aware motion modeling, temporal
// information flow (cross-attention with an affinity head), and the
// velocity / attribute / box-refinement prediction heads.
namespace stif::net {

struct NetConfig {
  int d = 64;
  int heads = 4;
  int n_spatial_layers = 3;
  int n_temporal_layers = 4;
  int affinity_layer_index = 2;  // 1-based cross-attention layer feeding the affinity head
  int K = 16;                    // object slots per frame
  int d_reid = 32;
  int n_categories = 3;
  int n_attributes = 3;
  int tau = 5;             // association horizon in frames
  int ffn_mult = 2;        // transformer feed-forward expansion
  int affinity_hidden = 16;  // entrywise affinity FFN width
  bool use_geometric_cue = true;
  bool use_appearance_cue = true;

  int ffn_dim() const { return d * ffn_mult; }

  void validate() const {
    if (d <= 0 || heads <= 0 || d % heads != 0)
      throw InvalidArgument("NetConfig: d must be a positive multiple of heads");
    if (affinity_layer_index < 1 || affinity_layer_index > n_temporal_layers)
      throw InvalidArgument("NetConfig: affinity layer out of range");
    if (K < 1 || tau < 1) throw InvalidArgument("NetConfig: K and tau must be >= 1");
    if (d_reid <= 0 || n_categories <= 0 || n_attributes <= 0)
      throw InvalidArgument("NetConfig: embedding dims must be positive");
    if (!use_geometric_cue && !use_appearance_cue)
      throw InvalidArgument("NetConfig: at least one cue must be enabled");
  }
};

// Raw corner coordinates are scaled to O(1) before entering the per-point
// perceptrons: pixels by 1/1000, meters by 1/50.
inline constexpr double kCorner2DScale = 1e-3;
inline constexpr double kCorner3DScale = 0.02;

// (K+1) x (K+1) association logits. Row/col K is the un-identified slot and
// is always valid; padded object slots carry kMaskedLogit and are masked out.
struct AffinityMatrix {
  ad::Tensor logits;
  std::vector<uint8_t> valid_rows;  // length K+1
  std::vector<uint8_t> valid_cols;  // length K+1
};

// One detection frame as consumed by the network, compactly packed (row i of
// every field is detection i; i < n <= K).
struct FrameInput {
  double timestamp = 0.0;
  std::vector<geom::Box2D> box2d;
  std::vector<geom::Box3D> box3d;  // world frame
  std::vector<int> category;
  std::vector<std::vector<double>> reid;  // unit vectors, length d_reid

  int size() const { return static_cast<int>(box3d.size()); }
};

struct FrameEmbedding {
  ad::Tensor fused;            // K x d
  std::vector<uint8_t> valid;  // K, true for rows [0, n)
  int n = 0;
  double timestamp = 0.0;
};

// ---------------------------------------------------------------------------
// Parameter inventory
// ---------------------------------------------------------------------------

namespace detail {

// Biases start small but nonzero: exact zeros propagate through dead relu
// rows into exact kinks, which poisons finite-difference gradient checks.
inline void def_linear(Weights& w, Rng& rng, const std::string& name, int in, int out) {
  w.define(name + ".w", {in, out}, glorot(rng, in, out));
  std::vector<double> b(out);
  for (auto& x : b) x = rng.uniform(-0.01, 0.01);
  w.define(name + ".b", {out}, std::move(b));
}

inline void def_block(Weights& w, Rng& rng, const std::string& p, const NetConfig& c) {
  for (const char* m : {".attn.wq", ".attn.wk", ".attn.wv", ".attn.wo"})
    w.define(p + m, {c.d, c.d}, glorot(rng, c.d, c.d));
  for (const char* m : {".attn.bq", ".attn.bk", ".attn.bv", ".attn.bo"})
    w.define(p + m, {c.d}, std::vector<double>(c.d, 0.0));
  for (const char* m : {".ln1", ".ln2"}) {
    w.define(p + m + ".g", {c.d}, std::vector<double>(c.d, 1.0));
    w.define(p + m + ".b", {c.d}, std::vector<double>(c.d, 0.0));
  }
  def_linear(w, rng, p + ".ffn.l0", c.d, c.ffn_dim());
  def_linear(w, rng, p + ".ffn.l1", c.ffn_dim(), c.d);
}

}  // namespace detail

inline Weights init_weights(const NetConfig& c, uint64_t seed) {
  c.validate();
  Weights w;
  Rng rng(seed);
  using detail::def_block;
  using detail::def_linear;

  def_linear(w, rng, "embed.geo.p2.l0", 2, c.d);
  def_linear(w, rng, "embed.geo.p2.l1", c.d, c.d);
  def_linear(w, rng, "embed.geo.p2.l2", c.d, c.d);
  def_linear(w, rng, "embed.geo.p3.l0", 3, c.d);
  def_linear(w, rng, "embed.geo.p3.l1", c.d, c.d);
  def_linear(w, rng, "embed.geo.p3.l2", c.d, c.d);
  def_linear(w, rng, "embed.geo.mix", 2 * c.d, c.d);
  def_linear(w, rng, "embed.app.cat", c.n_categories, c.d);
  def_linear(w, rng, "embed.app.reid", c.d_reid, c.d);
  def_linear(w, rng, "embed.fuse", 2 * c.d, c.d);

  for (int i = 0; i < c.n_spatial_layers; ++i)
    def_block(w, rng, "spatial." + std::to_string(i), c);
  def_linear(w, rng, "motion.l0", c.d + 1, c.d);
  def_linear(w, rng, "motion.l1", c.d, c.d);
  for (int i = 0; i < c.n_temporal_layers; ++i)
    def_block(w, rng, "temporal." + std::to_string(i), c);

  def_linear(w, rng, "affinity.ffn.l0", 1, c.affinity_hidden);
  def_linear(w, rng, "affinity.ffn.l1", c.affinity_hidden, 1);
  w.define("affinity.birth", {1}, {0.0});
  w.define("affinity.death", {1}, {0.0});

  for (const char* head : {"heads.vel", "heads.attr", "heads.box"}) {
    def_linear(w, rng, std::string(head) + ".l0", c.d, c.d);
    def_linear(w, rng, std::string(head) + ".l1", c.d, c.d);
  }
  def_linear(w, rng, "heads.vel.l2", c.d, 3);
  def_linear(w, rng, "heads.attr.l2", c.d, c.n_attributes);
  def_linear(w, rng, "heads.box.l2", c.d, 7);
  return w;
}

// ---------------------------------------------------------------------------
// Forward pieces
// ---------------------------------------------------------------------------

namespace detail {

inline ad::Tensor linear(ad::Tape& t, ad::Tensor x, TapeWeights& w, const std::string& p) {
  return t.add_rowvec(t.matmul(x, w[p + ".w"]), w[p + ".b"]);
}

inline ad::AttentionWeights attn_weights(TapeWeights& w, const std::string& p) {
  ad::AttentionWeights aw;
  aw.wq = w[p + ".attn.wq"];
  aw.bq = w[p + ".attn.bq"];
  aw.wk = w[p + ".attn.wk"];
  aw.bk = w[p + ".attn.bk"];
  aw.wv = w[p + ".attn.wv"];
  aw.bv = w[p + ".attn.bv"];
  aw.wo = w[p + ".attn.wo"];
  aw.bo = w[p + ".attn.bo"];
  return aw;
}

// Key-side admissibility: query i may attend key j iff valid_keys[j].
inline std::vector<uint8_t> key_mask(int n_q, const std::vector<uint8_t>& valid_keys) {
  std::vector<uint8_t> m(static_cast<size_t>(n_q) * valid_keys.size());
  for (int i = 0; i < n_q; ++i)
    for (size_t j = 0; j < valid_keys.size(); ++j)
      m[static_cast<size_t>(i) * valid_keys.size() + j] = valid_keys[j];
  return m;
}

}  // namespace detail

// PointNet-style geometric embedding: each corner lifted by a shared 3-layer
// per-point perceptron, max-pooled over points; the 2D and 3D streams are
// pooled separately, concatenated and mixed down to d. Returns a 1 x d row.
inline ad::Tensor embed_geometric(ad::Tape& t, const geom::Corners2& c2,
                                  const geom::Corners3& c3, TapeWeights& w,
                                  const NetConfig& cfg) {
  std::vector<double> v2, v3;
  v2.reserve(8);
  v3.reserve(24);
  for (const auto& p : c2)
    for (double x : p) v2.push_back(x * kCorner2DScale);
  for (const auto& p : c3)
    for (double x : p) v3.push_back(x * kCorner3DScale);
  ad::Tensor p2 = t.input({4, 2}, std::move(v2), false);  // throws on non-finite
  ad::Tensor p3 = t.input({8, 3}, std::move(v3), false);
  auto stream = [&](ad::Tensor pts, const std::string& p) {
    ad::Tensor h = t.relu(detail::linear(t, pts, w, p + ".l0"));
    h = t.relu(detail::linear(t, h, w, p + ".l1"));
    h = detail::linear(t, h, w, p + ".l2");
    return t.max_pool(h, 0);  // 1 x d
  };
  ad::Tensor g2 = stream(p2, "embed.geo.p2");
  ad::Tensor g3 = stream(p3, "embed.geo.p3");
  return detail::linear(t, t.concat({g2, g3}, 1), w, "embed.geo.mix");
}

// Category one-hot through a perceptron plus a linear lift of the Re-ID
// vector, summed. Returns a 1 x d row.
inline ad::Tensor embed_appearance(ad::Tape& t, const std::vector<double>& reid,
                                   int category, TapeWeights& w, const NetConfig& cfg) {
  if (static_cast<int>(reid.size()) != cfg.d_reid)
    throw ShapeError("embed_appearance: reid dimension mismatch");
  if (category < 0 || category >= cfg.n_categories)
    throw InvalidArgument("embed_appearance: category out of range");
  double norm = 0.0;
  for (double x : reid) norm += x * x;
  if (std::abs(std::sqrt(norm) - 1.0) > 1e-3)
    throw InvalidArgument("embed_appearance: reid vector not unit-normalized");
  std::vector<double> onehot(cfg.n_categories, 0.0);
  onehot[category] = 1.0;
  ad::Tensor cat = t.relu(detail::linear(t, t.constant({1, cfg.n_categories}, std::move(onehot)),
                                         w, "embed.app.cat"));
  ad::Tensor rd = detail::linear(t, t.constant({1, cfg.d_reid}, reid), w, "embed.app.reid");
  return t.add(cat, rd);
}

// Concatenation of appearance and geometric embeddings through one perceptron.
inline ad::Tensor fuse(ad::Tape& t, ad::Tensor appearance, ad::Tensor geometric,
                       TapeWeights& w, const NetConfig& cfg) {
  return t.relu(detail::linear(t, t.concat({appearance, geometric}, 1), w, "embed.fuse"));
}

// Embeds a whole frame into the K x d fused feature matrix. Rows n..K-1 are
// zero padding, reported invalid in the mask. Disabled cue streams contribute
// zero rows, so ablations keep the interface unchanged.
inline FrameEmbedding embed_frame(ad::Tape& t, const FrameInput& frame, TapeWeights& w,
                                  const NetConfig& cfg) {
  int n = frame.size();
  if (n > cfg.K) throw InvalidArgument("embed_frame: more detections than K slots");
  if (frame.box2d.size() != frame.box3d.size() ||
      frame.category.size() != frame.box3d.size() || frame.reid.size() != frame.box3d.size())
    throw InvalidArgument("embed_frame: ragged frame input");
  FrameEmbedding out;
  out.n = n;
  out.timestamp = frame.timestamp;
  out.valid.assign(cfg.K, 0);
  std::vector<ad::Tensor> rows;
  rows.reserve(n + 1);
  for (int i = 0; i < n; ++i) {
    out.valid[i] = 1;
    ad::Tensor geo = cfg.use_geometric_cue
                         ? embed_geometric(t, geom::corners2d(frame.box2d[i]),
                                           geom::corners3d(frame.box3d[i]), w, cfg)
                         : t.zeros({1, cfg.d});
    ad::Tensor app = cfg.use_appearance_cue
                         ? embed_appearance(t, frame.reid[i], frame.category[i], w, cfg)
                         : t.zeros({1, cfg.d});
    rows.push_back(fuse(t, app, geo, w, cfg));
  }
  if (n < cfg.K) rows.push_back(t.zeros({cfg.K - n, cfg.d}));
  out.fused = rows.size() == 1 ? rows[0] : t.concat(rows, 0);
  return out;
}

// Self-attention encoder over the objects of one frame, positional encoding
// zero. Invalid rows are excluded from the keys and passed through untouched.
inline ad::Tensor spatial_flow(ad::Tape& t, ad::Tensor fused,
                               const std::vector<uint8_t>& valid, TapeWeights& w,
                               const NetConfig& cfg) {
  int K = t.rows(fused);
  if (static_cast<int>(valid.size()) != K) throw ShapeError("spatial_flow: mask length");
  bool any = false;
  for (uint8_t u : valid) any = any || u;
  if (!any) throw NumericError("spatial_flow: no valid rows");
  std::vector<uint8_t> mask = detail::key_mask(K, valid);
  ad::Tensor x = fused;
  for (int i = 0; i < cfg.n_spatial_layers; ++i) {
    std::string p = "spatial." + std::to_string(i);
    auto attn = ad::multi_head_attention(t, x, x, x, detail::attn_weights(w, p), cfg.heads, &mask);
    ad::Tensor x1 = t.layer_norm(t.add(x, attn.out), w[p + ".ln1.g"], w[p + ".ln1.b"]);
    x1 = t.select_rows(valid, x1, x);
    ad::Tensor f = detail::linear(t, t.relu(detail::linear(t, x1, w, p + ".ffn.l0")), w, p + ".ffn.l1");
    ad::Tensor x2 = t.layer_norm(t.add(x1, f), w[p + ".ln2.g"], w[p + ".ln2.b"]);
    x = t.select_rows(valid, x2, x1);
  }
  return x;
}

// Time-aware motion modeling: the relative time gap is concatenated to every
// stored feature row and mapped back to d dims by a feed-forward layer.
inline ad::Tensor motion_modeling(ad::Tape& t, ad::Tensor spatial_prev, double dt,
                                  TapeWeights& w, const NetConfig& cfg) {
  if (!(dt > 0.0)) throw InvalidArgument("motion_modeling: dt must be positive");
  int K = t.rows(spatial_prev);
  ad::Tensor dtcol = t.constant({K, 1}, std::vector<double>(K, dt));
  ad::Tensor x = t.concat({spatial_prev, dtcol}, 1);
  ad::Tensor h = t.relu(detail::linear(t, x, w, "motion.l0"));
  return detail::linear(t, h, w, "motion.l1");
}

struct TemporalOut {
  ad::Tensor aggregated;  // K x d
  AffinityMatrix affinity;
};

// Cross-attention decoder: queries are the current frame's spatial features,
// keys/values the motion-modeled previous frame. At the configured layer the
// head-averaged pre-softmax scores pass through an entrywise FFN to form the
// K x K affinity core; the un-identified row and column come from the learned
// birth/death scalars (the corner takes the death value).
inline TemporalOut temporal_flow(ad::Tape& t, ad::Tensor spatial_cur, ad::Tensor motion_prev,
                                 const std::vector<uint8_t>& valid_cur,
                                 const std::vector<uint8_t>& valid_prev, TapeWeights& w,
                                 const NetConfig& cfg) {
  int K = t.rows(spatial_cur);
  if (t.rows(motion_prev) != K) throw ShapeError("temporal_flow: slot count mismatch");
  bool any_cur = false, any_prev = false;
  for (uint8_t u : valid_cur) any_cur = any_cur || u;
  for (uint8_t u : valid_prev) any_prev = any_prev || u;
  if (!any_cur || !any_prev) throw NumericError("temporal_flow: empty frame");

  std::vector<uint8_t> mask = detail::key_mask(K, valid_prev);
  ad::Tensor x = spatial_cur;
  ad::Tensor core;  // K x K affinity logits before padding
  for (int i = 0; i < cfg.n_temporal_layers; ++i) {
    std::string p = "temporal." + std::to_string(i);
    auto attn = ad::multi_head_attention(t, x, motion_prev, motion_prev,
                                         detail::attn_weights(w, p), cfg.heads, &mask);
    if (i + 1 == cfg.affinity_layer_index) {
      ad::Tensor avg = attn.head_logits[0];
      for (int h = 1; h < cfg.heads; ++h) avg = t.add(avg, attn.head_logits[h]);
      avg = t.mul_scalar(avg, 1.0 / cfg.heads);
      ad::Tensor flat = t.reshape(avg, {K * K, 1});
      ad::Tensor h0 = t.relu(detail::linear(t, flat, w, "affinity.ffn.l0"));
      core = t.reshape(detail::linear(t, h0, w, "affinity.ffn.l1"), {K, K});
    }
    ad::Tensor x1 = t.layer_norm(t.add(x, attn.out), w[p + ".ln1.g"], w[p + ".ln1.b"]);
    x1 = t.select_rows(valid_cur, x1, x);
    ad::Tensor f = detail::linear(t, t.relu(detail::linear(t, x1, w, p + ".ffn.l0")), w, p + ".ffn.l1");
    ad::Tensor x2 = t.layer_norm(t.add(x1, f), w[p + ".ln2.g"], w[p + ".ln2.b"]);
    x = t.select_rows(valid_cur, x2, x1);
  }

  TemporalOut out;
  out.aggregated = x;
  ad::Tensor birth_col = t.broadcast_scalar(w["affinity.birth"], K, 1);
  ad::Tensor death_row = t.broadcast_scalar(w["affinity.death"], 1, K + 1);
  ad::Tensor top = t.concat({core, birth_col}, 1);       // K x (K+1)
  ad::Tensor full = t.concat({top, death_row}, 0);       // (K+1) x (K+1)
  AffinityMatrix& am = out.affinity;
  am.valid_rows.assign(K + 1, 0);
  am.valid_cols.assign(K + 1, 0);
  for (int i = 0; i < K; ++i) {
    am.valid_rows[i] = valid_cur[i];
    am.valid_cols[i] = valid_prev[i];
  }
  am.valid_rows[K] = 1;
  am.valid_cols[K] = 1;
  std::vector<uint8_t> keep(static_cast<size_t>(K + 1) * (K + 1));
  for (int i = 0; i <= K; ++i)
    for (int j = 0; j <= K; ++j)
      keep[static_cast<size_t>(i) * (K + 1) + j] = am.valid_rows[i] && am.valid_cols[j];
  am.logits = t.fill_masked(full, keep, ad::kMaskedLogit);
  return out;
}

struct HeadsOut {
  ad::Tensor velocity;         // K x 3, m/s
  ad::Tensor attribute_logits; // K x n_attributes
  ad::Tensor box_refine;       // K x 7 deltas (x, y, z, l, w, h, yaw)
};

inline HeadsOut heads(ad::Tape& t, ad::Tensor aggregated, TapeWeights& w,
                      const NetConfig& cfg) {
  auto mlp3 = [&](const std::string& p) {
    ad::Tensor h = t.relu(detail::linear(t, aggregated, w, p + ".l0"));
    h = t.relu(detail::linear(t, h, w, p + ".l1"));
    return detail::linear(t, h, w, p + ".l2");
  };
  return {mlp3("heads.vel"), mlp3("heads.attr"), mlp3("heads.box")};
}

// Dual-softmax association scores: row-softmax(logits) times
// column-softmax(logits), elementwise, over the valid region. Entries outside
// the valid region are exactly zero. Values are probability-like in [0, 1].
inline ad::Tensor affinity_product(ad::Tape& t, const AffinityMatrix& am) {
  int n = t.rows(am.logits);
  std::vector<uint8_t> keep(static_cast<size_t>(n) * n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      keep[static_cast<size_t>(i) * n + j] = am.valid_rows[i] && am.valid_cols[j];
  ad::Tensor fwd = t.masked_softmax(am.logits, 1, keep, false);
  ad::Tensor bwd = t.masked_softmax(am.logits, 0, keep, false);
  return t.mul(fwd, bwd);
}

}  // namespace stif::net
