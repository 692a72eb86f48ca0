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

#include <cmath>
#include <optional>
#include <vector>

#include "stif/tensor.hpp"

namespace stif::ad {

struct AttentionWeights {
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
};

struct AttentionOut {
  Tensor out;  // n_q x d
  // Pre-softmax scaled scores, shape {heads, n_q, n_k}; masked entries are
  // filled with kMaskedLogit. The affinity head reads head_logits instead,
  // which keep the raw (unfilled) per-head scores.
  Tensor attn_logits;
  std::vector<Tensor> head_logits;  // raw n_q x n_k per head
};

inline constexpr double kMaskedLogit = -1e30;

// Scaled dot-product multi-head attention with no positional encoding.
// q: n_q x d, k/v: n_k x d, weights project d -> d. The optional mask is a
// row-major n_q x n_k boolean table of admissible (query, key) pairs; a query
// row with every key masked is a caller error. Logits are scaled by
// 1/sqrt(d/heads), the per-head channel count.
inline AttentionOut multi_head_attention(Tape& t, Tensor q, Tensor k, Tensor v,
                                         const AttentionWeights& w, int heads,
                                         const std::vector<uint8_t>* mask = nullptr) {
  int n_q = t.rows(q), n_k = t.rows(k);
  int d = t.cols(q);
  if (t.cols(k) != d || t.cols(v) != d) throw ShapeError("attention: feature dims differ");
  if (t.rows(v) != n_k) throw ShapeError("attention: key/value row mismatch");
  if (heads <= 0 || d % heads != 0) throw ShapeError("attention: d not divisible by heads");
  int dh = d / heads;
  std::vector<uint8_t> allow;
  if (mask != nullptr) {
    if (static_cast<int64_t>(mask->size()) != static_cast<int64_t>(n_q) * n_k)
      throw ShapeError("attention: mask size");
    allow = *mask;
  } else {
    allow.assign(static_cast<size_t>(n_q) * n_k, 1);
  }

  Tensor qp = t.add_rowvec(t.matmul(q, w.wq), w.bq);
  Tensor kp = t.add_rowvec(t.matmul(k, w.wk), w.bk);
  Tensor vp = t.add_rowvec(t.matmul(v, w.wv), w.bv);

  double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Tensor> contexts, raw, filled;
  contexts.reserve(heads);
  for (int h = 0; h < heads; ++h) {
    Tensor qh = t.slice_cols(qp, h * dh, dh);
    Tensor kh = t.slice_cols(kp, h * dh, dh);
    Tensor vh = t.slice_cols(vp, h * dh, dh);
    Tensor logits = t.mul_scalar(t.matmul(qh, t.transpose(kh)), scale);
    raw.push_back(logits);
    filled.push_back(t.fill_masked(logits, allow, kMaskedLogit));
    Tensor attn = t.masked_softmax(logits, 1, allow, /*error_on_empty=*/true);
    contexts.push_back(t.matmul(attn, vh));
  }
  Tensor ctx = heads == 1 ? contexts[0] : t.concat(contexts, 1);
  AttentionOut out;
  out.out = t.add_rowvec(t.matmul(ctx, w.wo), w.bo);
  Tensor stacked = heads == 1 ? filled[0] : t.concat(filled, 0);
  out.attn_logits = t.reshape(stacked, {heads, n_q, n_k});
  out.head_logits = std::move(raw);
  return out;
}

}  // namespace stif::ad
