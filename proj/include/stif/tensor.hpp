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

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "stif/common.hpp"

// Dense f64 tensors with reverse-mode differentiation. A Tape owns every
// node created through it; Tensor is a cheap handle (tape pointer + index).
// A tape and its tensors are single-owner during forward/backward; distinct
// tapes may run on distinct threads concurrently.
namespace stif::ad {

using Shape = std::vector<int>;

inline int64_t numel(const Shape& s) {
  int64_t n = 1;
  for (int d : s) {
    if (d <= 0) throw ShapeError("shape dims must be positive");
    n *= d;
  }
  return n;
}

inline bool same_shape(const Shape& a, const Shape& b) { return a == b; }

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i)
    out += std::to_string(s[i]) + (i + 1 < s.size() ? "," : "");
  return out + "]";
}

class Tape;

struct Tensor {
  Tape* tape = nullptr;
  int id = -1;

  bool defined() const { return tape != nullptr && id >= 0; }
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // ---- leaves -----------------------------------------------------------

  Tensor input(Shape shape, std::vector<double> values, bool requires_grad) {
    if (static_cast<int64_t>(values.size()) != numel(shape))
      throw ShapeError("input: values length does not match shape");
    ensure_finite(values, "input");
    return push(std::move(shape), std::move(values), requires_grad, {});
  }

  Tensor constant(Shape shape, std::vector<double> values) {
    return input(std::move(shape), std::move(values), false);
  }

  Tensor scalar(double v, bool requires_grad = false) {
    return input({1}, {v}, requires_grad);
  }

  Tensor zeros(Shape shape) {
    std::vector<double> v(numel(shape), 0.0);
    return push(std::move(shape), std::move(v), false, {});
  }

  // ---- accessors --------------------------------------------------------

  const Shape& shape(Tensor t) const { return node(t).shape; }
  std::span<const double> val(Tensor t) const { return node(t).value; }
  std::span<const double> grad(Tensor t) const { return node(t).grad; }

  // Smallest distance any non-smooth op (relu, abs, max_pool, row_l2norm) came
  // to its kink during forward passes on this tape. Finite-difference checks
  // are only valid when this comfortably exceeds the probe step.
  double kink_margin() const { return kink_margin_; }
  bool requires_grad(Tensor t) const { return node(t).requires_grad; }
  double item(Tensor t) const {
    if (node(t).value.size() != 1) throw ShapeError("item: tensor not scalar");
    return node(t).value[0];
  }
  int rows(Tensor t) const { return dim(t, 0); }
  int cols(Tensor t) const { return dim(t, 1); }
  int dim(Tensor t, int i) const {
    const Shape& s = node(t).shape;
    if (i >= static_cast<int>(s.size())) throw ShapeError("dim: rank too low");
    return s[i];
  }
  size_t size() const { return nodes_.size(); }

  // ---- elementwise ------------------------------------------------------

  Tensor add(Tensor a, Tensor b) {
    return zip(a, b, "add", [](double x, double y) { return x + y; },
               [](double, double, double g, double& da, double& db) {
                 da += g;
                 db += g;
               });
  }

  Tensor sub(Tensor a, Tensor b) {
    return zip(a, b, "sub", [](double x, double y) { return x - y; },
               [](double, double, double g, double& da, double& db) {
                 da += g;
                 db -= g;
               });
  }

  Tensor mul(Tensor a, Tensor b) {
    return zip(a, b, "mul", [](double x, double y) { return x * y; },
               [](double x, double y, double g, double& da, double& db) {
                 da += g * y;
                 db += g * x;
               });
  }

  Tensor mul_scalar(Tensor a, double c) {
    const auto& av = node(a).value;
    std::vector<double> out(av.size());
    for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] * c;
    Tensor r = push(node(a).shape, std::move(out), node(a).requires_grad, "mul_scalar");
    if (node(r).requires_grad)
      node(r).backprop = [this, a, r, c] {
        auto& da = grad_buf(a);
        const auto& g = node(r).grad;
        for (size_t i = 0; i < g.size(); ++i) da[i] += g[i] * c;
      };
    return r;
  }

  Tensor relu(Tensor a) {
    const auto& av = node(a).value;
    std::vector<double> out(av.size());
    for (size_t i = 0; i < av.size(); ++i) {
      note_kink(std::abs(av[i]));
      out[i] = av[i] > 0.0 ? av[i] : 0.0;
    }
    Tensor r = push(node(a).shape, std::move(out), node(a).requires_grad, "relu");
    if (node(r).requires_grad)
      node(r).backprop = [this, a, r] {
        auto& da = grad_buf(a);
        const auto& g = node(r).grad;
        const auto& x = node(a).value;
        for (size_t i = 0; i < g.size(); ++i)
          if (x[i] > 0.0) da[i] += g[i];
      };
    return r;
  }

  // ln(x + eps); eps guards the log at zero.
  Tensor log_eps(Tensor a, double eps = 1e-12) {
    const auto& av = node(a).value;
    std::vector<double> out(av.size());
    for (size_t i = 0; i < av.size(); ++i) out[i] = std::log(av[i] + eps);
    Tensor r = push(node(a).shape, std::move(out), node(a).requires_grad, "log_eps");
    if (node(r).requires_grad)
      node(r).backprop = [this, a, r, eps] {
        auto& da = grad_buf(a);
        const auto& g = node(r).grad;
        const auto& x = node(a).value;
        for (size_t i = 0; i < g.size(); ++i) da[i] += g[i] / (x[i] + eps);
      };
    return r;
  }

  // |x| with subgradient 0 at x = 0.
  Tensor abs(Tensor a) {
    const auto& av = node(a).value;
    std::vector<double> out(av.size());
    for (size_t i = 0; i < av.size(); ++i) {
      note_kink(std::abs(av[i]));
      out[i] = std::abs(av[i]);
    }
    Tensor r = push(node(a).shape, std::move(out), node(a).requires_grad, "abs");
    if (node(r).requires_grad)
      node(r).backprop = [this, a, r] {
        auto& da = grad_buf(a);
        const auto& g = node(r).grad;
        const auto& x = node(a).value;
        for (size_t i = 0; i < g.size(); ++i) {
          if (x[i] > 0.0)
            da[i] += g[i];
          else if (x[i] < 0.0)
            da[i] -= g[i];
        }
      };
    return r;
  }

  // ---- structural -------------------------------------------------------

  Tensor reshape(Tensor a, Shape shape) {
    if (numel(shape) != static_cast<int64_t>(node(a).value.size()))
      throw ShapeError("reshape: element count mismatch");
    Tensor r = push(std::move(shape), node(a).value, node(a).requires_grad, "reshape");
    if (node(r).requires_grad)
      node(r).backprop = [this, a, r] {
        auto& da = grad_buf(a);
        const auto& g = node(r).grad;
        for (size_t i = 0; i < g.size(); ++i) da[i] += g[i];
      };
    return r;
  }

  Tensor transpose(Tensor a) {
    auto [n, m] = dims2(a, "transpose");
    const auto& av = node(a).value;
    std::vector<double> out(av.size());
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < m; ++j) out[j * n + i] = av[i * m + j];
    Tensor r = push({m, n}, std::move(out), node(a).requires_grad, "transpose");
    if (node(r).requires_grad)
      node(r).backprop = [this, a, r, n, m] {
        auto& da = grad_buf(a);
        const auto& g = node(r).grad;
        for (int i = 0; i < n; ++i)
          for (int j = 0; j < m; ++j) da[i * m + j] += g[j * n + i];
      };
    return r;
  }

  // Concatenate 2D tensors along axis 0 (stack rows) or 1 (join columns).
  Tensor concat(const std::vector<Tensor>& parts, int axis) {
    if (parts.empty()) throw ShapeError("concat: no parts");
    if (axis != 0 && axis != 1) throw ShapeError("concat: axis must be 0 or 1");
    auto [n0, m0] = dims2(parts[0], "concat");
    int n = n0, m = m0;
    bool req = false;
    for (size_t p = 1; p < parts.size(); ++p) {
      auto [ni, mi] = dims2(parts[p], "concat");
      if (axis == 0) {
        if (mi != m0) throw ShapeError("concat axis 0: column mismatch");
        n += ni;
      } else {
        if (ni != n0) throw ShapeError("concat axis 1: row mismatch");
        m += mi;
      }
    }
    for (Tensor p : parts) req = req || node(p).requires_grad;
    std::vector<double> out(static_cast<size_t>(n) * m);
    if (axis == 0) {
      size_t off = 0;
      for (Tensor p : parts) {
        const auto& v = node(p).value;
        std::copy(v.begin(), v.end(), out.begin() + off);
        off += v.size();
      }
    } else {
      int coff = 0;
      for (Tensor p : parts) {
        auto [ni, mi] = dims2(p, "concat");
        const auto& v = node(p).value;
        for (int i = 0; i < ni; ++i)
          for (int j = 0; j < mi; ++j) out[static_cast<size_t>(i) * m + coff + j] = v[static_cast<size_t>(i) * mi + j];
        coff += mi;
      }
    }
    Tensor r = push({n, m}, std::move(out), req, "concat");
    if (req) {
      std::vector<Tensor> ps = parts;
      node(r).backprop = [this, ps, r, axis, n, m] {
        const auto& g = node(r).grad;
        if (axis == 0) {
          size_t off = 0;
          for (Tensor p : ps) {
            size_t len = node(p).value.size();
            if (node(p).requires_grad) {
              auto& dp = grad_buf(p);
              for (size_t i = 0; i < len; ++i) dp[i] += g[off + i];
            }
            off += len;
          }
        } else {
          int coff = 0;
          for (Tensor p : ps) {
            int ni = node(p).shape[0], mi = node(p).shape[1];
            if (node(p).requires_grad) {
              auto& dp = grad_buf(p);
              for (int i = 0; i < ni; ++i)
                for (int j = 0; j < mi; ++j)
                  dp[static_cast<size_t>(i) * mi + j] += g[static_cast<size_t>(i) * m + coff + j];
            }
            coff += mi;
          }
        }
      };
    }
    return r;
  }

  Tensor slice_rows(Tensor a, int r0, int count) {
    auto [n, m] = dims2(a, "slice_rows");
    if (r0 < 0 || count <= 0 || r0 + count > n) throw ShapeError("slice_rows: out of range");
    const auto& av = node(a).value;
    std::vector<double> out(av.begin() + static_cast<size_t>(r0) * m,
                            av.begin() + static_cast<size_t>(r0 + count) * m);
    Tensor r = push({count, m}, std::move(out), node(a).requires_grad, "slice_rows");
    if (node(r).requires_grad)
      node(r).backprop = [this, a, r, r0, m] {
        auto& da = grad_buf(a);
        const auto& g = node(r).grad;
        for (size_t i = 0; i < g.size(); ++i) da[static_cast<size_t>(r0) * m + i] += g[i];
      };
    return r;
  }

  Tensor slice_cols(Tensor a, int c0, int count) {
    auto [n, m] = dims2(a, "slice_cols");
    if (c0 < 0 || count <= 0 || c0 + count > m) throw ShapeError("slice_cols: out of range");
    const auto& av = node(a).value;
    std::vector<double> out(static_cast<size_t>(n) * count);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < count; ++j) out[static_cast<size_t>(i) * count + j] = av[static_cast<size_t>(i) * m + c0 + j];
    Tensor r = push({n, count}, std::move(out), node(a).requires_grad, "slice_cols");
    if (node(r).requires_grad)
      node(r).backprop = [this, a, r, c0, n, m, count] {
        auto& da = grad_buf(a);
        const auto& g = node(r).grad;
        for (int i = 0; i < n; ++i)
          for (int j = 0; j < count; ++j)
            da[static_cast<size_t>(i) * m + c0 + j] += g[static_cast<size_t>(i) * count + j];
      };
    return r;
  }

  // Rows of `a` gathered by index; duplicate indices accumulate on backward.
  Tensor gather_rows(Tensor a, std::vector<int> idx) {
    auto [n, m] = dims2(a, "gather_rows");
    for (int i : idx)
      if (i < 0 || i >= n) throw ShapeError("gather_rows: index out of range");
    if (idx.empty()) throw ShapeError("gather_rows: empty index list");
    const auto& av = node(a).value;
    std::vector<double> out(idx.size() * m);
    for (size_t r = 0; r < idx.size(); ++r)
      std::copy(av.begin() + static_cast<size_t>(idx[r]) * m,
                av.begin() + static_cast<size_t>(idx[r] + 1) * m,
                out.begin() + r * m);
    Tensor t = push({static_cast<int>(idx.size()), m}, std::move(out),
                    node(a).requires_grad, "gather_rows");
    if (node(t).requires_grad)
      node(t).backprop = [this, a, t, idx, m] {
        auto& da = grad_buf(a);
        const auto& g = node(t).grad;
        for (size_t r = 0; r < idx.size(); ++r)
          for (int j = 0; j < m; ++j) da[static_cast<size_t>(idx[r]) * m + j] += g[r * m + j];
      };
    return t;
  }

  // Row-wise select: rows where mask[i] is true come from `a`, others from `b`.
  Tensor select_rows(const std::vector<uint8_t>& mask, Tensor a, Tensor b) {
    auto [n, m] = dims2(a, "select_rows");
    if (!same_shape(node(a).shape, node(b).shape))
      throw ShapeError("select_rows: shape mismatch");
    if (static_cast<int>(mask.size()) != n) throw ShapeError("select_rows: mask length");
    const auto& av = node(a).value;
    const auto& bv = node(b).value;
    std::vector<double> out(av.size());
    for (int i = 0; i < n; ++i) {
      const auto& src = mask[i] ? av : bv;
      std::copy(src.begin() + static_cast<size_t>(i) * m, src.begin() + static_cast<size_t>(i + 1) * m,
                out.begin() + static_cast<size_t>(i) * m);
    }
    bool req = node(a).requires_grad || node(b).requires_grad;
    Tensor r = push(node(a).shape, std::move(out), req, "select_rows");
    if (req)
      node(r).backprop = [this, a, b, r, mask, n, m] {
        const auto& g = node(r).grad;
        for (int i = 0; i < n; ++i) {
          Tensor dst = mask[i] ? a : b;
          if (!node(dst).requires_grad) continue;
          auto& d = grad_buf(dst);
          for (int j = 0; j < m; ++j) d[static_cast<size_t>(i) * m + j] += g[static_cast<size_t>(i) * m + j];
        }
      };
    return r;
  }

  // Masked entries are replaced by a constant; no gradient flows through them.
  Tensor fill_masked(Tensor a, const std::vector<uint8_t>& keep, double fill) {
    const auto& av = node(a).value;
    if (keep.size() != av.size()) throw ShapeError("fill_masked: mask length");
    std::vector<double> out(av.size());
    for (size_t i = 0; i < av.size(); ++i) out[i] = keep[i] ? av[i] : fill;
    Tensor r = push(node(a).shape, std::move(out), node(a).requires_grad, "fill_masked");
    if (node(r).requires_grad)
      node(r).backprop = [this, a, r, keep] {
        auto& da = grad_buf(a);
        const auto& g = node(r).grad;
        for (size_t i = 0; i < g.size(); ++i)
          if (keep[i]) da[i] += g[i];
      };
    return r;
  }

  // Scalar broadcast to an n x m block; backward sums the incoming grads.
  Tensor broadcast_scalar(Tensor a, int n, int m) {
    if (node(a).value.size() != 1) throw ShapeError("broadcast_scalar: not a scalar");
    std::vector<double> out(static_cast<size_t>(n) * m, node(a).value[0]);
    Tensor r = push({n, m}, std::move(out), node(a).requires_grad, "broadcast_scalar");
    if (node(r).requires_grad)
      node(r).backprop = [this, a, r] {
        auto& da = grad_buf(a);
        const auto& g = node(r).grad;
        double s = 0.0;
        for (double v : g) s += v;
        da[0] += s;
      };
    return r;
  }

  // ---- linear algebra ---------------------------------------------------

  Tensor matmul(Tensor a, Tensor b) {
    auto [n, k] = dims2(a, "matmul");
    auto [k2, m] = dims2(b, "matmul");
    if (k != k2)
      throw ShapeError("matmul: inner dims " + shape_str(node(a).shape) + " x " +
                       shape_str(node(b).shape));
    const auto& av = node(a).value;
    const auto& bv = node(b).value;
    std::vector<double> out(static_cast<size_t>(n) * m, 0.0);
    for (int i = 0; i < n; ++i) {
      const double* arow = av.data() + static_cast<size_t>(i) * k;
      double* orow = out.data() + static_cast<size_t>(i) * m;
      for (int p = 0; p < k; ++p) {
        double aip = arow[p];
        if (aip == 0.0) continue;
        const double* brow = bv.data() + static_cast<size_t>(p) * m;
        for (int j = 0; j < m; ++j) orow[j] += aip * brow[j];
      }
    }
    bool req = node(a).requires_grad || node(b).requires_grad;
    Tensor r = push({n, m}, std::move(out), req, "matmul");
    if (req)
      node(r).backprop = [this, a, b, r, n, k, m] {
        const auto& g = node(r).grad;
        const auto& av = node(a).value;
        const auto& bv = node(b).value;
        if (node(a).requires_grad) {
          auto& da = grad_buf(a);
          // dA = g * B^T
          for (int i = 0; i < n; ++i) {
            const double* grow = g.data() + static_cast<size_t>(i) * m;
            double* darow = da.data() + static_cast<size_t>(i) * k;
            for (int p = 0; p < k; ++p) {
              const double* brow = bv.data() + static_cast<size_t>(p) * m;
              double s = 0.0;
              for (int j = 0; j < m; ++j) s += grow[j] * brow[j];
              darow[p] += s;
            }
          }
        }
        if (node(b).requires_grad) {
          auto& db = grad_buf(b);
          // dB = A^T * g
          for (int i = 0; i < n; ++i) {
            const double* arow = av.data() + static_cast<size_t>(i) * k;
            const double* grow = g.data() + static_cast<size_t>(i) * m;
            for (int p = 0; p < k; ++p) {
              double aip = arow[p];
              if (aip == 0.0) continue;
              double* dbrow = db.data() + static_cast<size_t>(p) * m;
              for (int j = 0; j < m; ++j) dbrow[j] += aip * grow[j];
            }
          }
        }
      };
    return r;
  }

  // a: n x m, b: length-m vector added to every row.
  Tensor add_rowvec(Tensor a, Tensor b) {
    auto [n, m] = dims2(a, "add_rowvec");
    if (node(b).shape != Shape{m} && node(b).shape != Shape{1, m})
      throw ShapeError("add_rowvec: vector shape mismatch");
    const auto& av = node(a).value;
    const auto& bv = node(b).value;
    std::vector<double> out(av.size());
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < m; ++j) out[static_cast<size_t>(i) * m + j] = av[static_cast<size_t>(i) * m + j] + bv[j];
    bool req = node(a).requires_grad || node(b).requires_grad;
    Tensor r = push(node(a).shape, std::move(out), req, "add_rowvec");
    if (req)
      node(r).backprop = [this, a, b, r, n, m] {
        const auto& g = node(r).grad;
        if (node(a).requires_grad) {
          auto& da = grad_buf(a);
          for (size_t i = 0; i < g.size(); ++i) da[i] += g[i];
        }
        if (node(b).requires_grad) {
          auto& db = grad_buf(b);
          for (int i = 0; i < n; ++i)
            for (int j = 0; j < m; ++j) db[j] += g[static_cast<size_t>(i) * m + j];
        }
      };
    return r;
  }

  // ---- reductions and normalizations -------------------------------------

  Tensor sum(Tensor a) {
    const auto& av = node(a).value;
    double s = std::accumulate(av.begin(), av.end(), 0.0);
    Tensor r = push({1}, {s}, node(a).requires_grad, "sum");
    if (node(r).requires_grad)
      node(r).backprop = [this, a, r] {
        auto& da = grad_buf(a);
        double g = node(r).grad[0];
        for (double& d : da) d += g;
      };
    return r;
  }

  Tensor mean(Tensor a) {
    double inv = 1.0 / static_cast<double>(node(a).value.size());
    return mul_scalar(sum(a), inv);
  }

  // Sum of w[i] * a[i] with a constant weight vector; backward adds w * g.
  Tensor weighted_sum(Tensor a, std::vector<double> w) {
    const auto& av = node(a).value;
    if (w.size() != av.size()) throw ShapeError("weighted_sum: weight length");
    double s = 0.0;
    for (size_t i = 0; i < av.size(); ++i) s += w[i] * av[i];
    Tensor r = push({1}, {s}, node(a).requires_grad, "weighted_sum");
    if (node(r).requires_grad)
      node(r).backprop = [this, a, r, w = std::move(w)] {
        auto& da = grad_buf(a);
        double g = node(r).grad[0];
        for (size_t i = 0; i < da.size(); ++i) da[i] += g * w[i];
      };
    return r;
  }

  // Softmax along axis (0 = down columns, 1 = across rows) over entries whose
  // mask is true; masked entries get probability exactly 0 and the reduction
  // never touches them, so results are independent of padding. A fully masked
  // lane yields all zeros, or throws when error_on_empty is set.
  Tensor masked_softmax(Tensor a, int axis, const std::vector<uint8_t>& mask,
                        bool error_on_empty) {
    auto [n, m] = dims2(a, "masked_softmax");
    if (static_cast<int64_t>(mask.size()) != static_cast<int64_t>(n) * m)
      throw ShapeError("masked_softmax: mask length");
    if (axis != 0 && axis != 1) throw ShapeError("masked_softmax: axis");
    const auto& av = node(a).value;
    std::vector<double> out(av.size(), 0.0);
    int lanes = axis == 1 ? n : m;
    int width = axis == 1 ? m : n;
    auto at = [&](int lane, int k) -> size_t {
      return axis == 1 ? static_cast<size_t>(lane) * m + k : static_cast<size_t>(k) * m + lane;
    };
    for (int lane = 0; lane < lanes; ++lane) {
      double mx = -std::numeric_limits<double>::infinity();
      int cnt = 0;
      for (int k = 0; k < width; ++k)
        if (mask[at(lane, k)]) {
          mx = std::max(mx, av[at(lane, k)]);
          ++cnt;
        }
      if (cnt == 0) {
        if (error_on_empty) throw NumericError("masked_softmax: fully masked lane");
        continue;
      }
      double z = 0.0;
      for (int k = 0; k < width; ++k)
        if (mask[at(lane, k)]) z += std::exp(av[at(lane, k)] - mx);
      for (int k = 0; k < width; ++k)
        if (mask[at(lane, k)]) out[at(lane, k)] = std::exp(av[at(lane, k)] - mx) / z;
    }
    Tensor r = push(node(a).shape, std::move(out), node(a).requires_grad, "masked_softmax");
    if (node(r).requires_grad)
      node(r).backprop = [this, a, r, axis, mask, n, m] {
        auto& da = grad_buf(a);
        const auto& g = node(r).grad;
        const auto& y = node(r).value;
        int lanes = axis == 1 ? n : m;
        int width = axis == 1 ? m : n;
        auto at = [&](int lane, int k) -> size_t {
          return axis == 1 ? static_cast<size_t>(lane) * m + k : static_cast<size_t>(k) * m + lane;
        };
        for (int lane = 0; lane < lanes; ++lane) {
          double dot = 0.0;
          for (int k = 0; k < width; ++k)
            if (mask[at(lane, k)]) dot += g[at(lane, k)] * y[at(lane, k)];
          for (int k = 0; k < width; ++k)
            if (mask[at(lane, k)])
              da[at(lane, k)] += y[at(lane, k)] * (g[at(lane, k)] - dot);
        }
      };
    return r;
  }

  Tensor softmax(Tensor a, int axis) {
    return masked_softmax(a, axis, std::vector<uint8_t>(node(a).value.size(), 1), true);
  }

  // Per-row layer normalization with learnable gain/bias, epsilon 1e-8.
  Tensor layer_norm(Tensor a, Tensor gamma, Tensor beta) {
    constexpr double kEps = 1e-8;
    auto [n, m] = dims2(a, "layer_norm");
    if (node(gamma).shape != Shape{m} || node(beta).shape != Shape{m})
      throw ShapeError("layer_norm: gain/bias must be length-m vectors");
    const auto& av = node(a).value;
    const auto& gv = node(gamma).value;
    const auto& bv = node(beta).value;
    std::vector<double> out(av.size());
    std::vector<double> xhat(av.size());
    std::vector<double> inv_sd(n);
    for (int i = 0; i < n; ++i) {
      const double* x = av.data() + static_cast<size_t>(i) * m;
      double mu = 0.0;
      for (int j = 0; j < m; ++j) mu += x[j];
      mu /= m;
      double var = 0.0;
      for (int j = 0; j < m; ++j) var += (x[j] - mu) * (x[j] - mu);
      var /= m;
      double inv = 1.0 / std::sqrt(var + kEps);
      inv_sd[i] = inv;
      for (int j = 0; j < m; ++j) {
        double xh = (x[j] - mu) * inv;
        xhat[static_cast<size_t>(i) * m + j] = xh;
        out[static_cast<size_t>(i) * m + j] = gv[j] * xh + bv[j];
      }
    }
    bool req = node(a).requires_grad || node(gamma).requires_grad || node(beta).requires_grad;
    Tensor r = push(node(a).shape, std::move(out), req, "layer_norm");
    if (req)
      node(r).backprop = [this, a, gamma, beta, r, n, m, xhat = std::move(xhat),
                          inv_sd = std::move(inv_sd)] {
        const auto& g = node(r).grad;
        const auto& gv = node(gamma).value;
        if (node(gamma).requires_grad) {
          auto& dg = grad_buf(gamma);
          for (int i = 0; i < n; ++i)
            for (int j = 0; j < m; ++j) dg[j] += g[static_cast<size_t>(i) * m + j] * xhat[static_cast<size_t>(i) * m + j];
        }
        if (node(beta).requires_grad) {
          auto& db = grad_buf(beta);
          for (int i = 0; i < n; ++i)
            for (int j = 0; j < m; ++j) db[j] += g[static_cast<size_t>(i) * m + j];
        }
        if (node(a).requires_grad) {
          auto& da = grad_buf(a);
          for (int i = 0; i < n; ++i) {
            double mean_h = 0.0, mean_hx = 0.0;
            for (int j = 0; j < m; ++j) {
              double h = g[static_cast<size_t>(i) * m + j] * gv[j];
              mean_h += h;
              mean_hx += h * xhat[static_cast<size_t>(i) * m + j];
            }
            mean_h /= m;
            mean_hx /= m;
            for (int j = 0; j < m; ++j) {
              double h = g[static_cast<size_t>(i) * m + j] * gv[j];
              da[static_cast<size_t>(i) * m + j] +=
                  inv_sd[i] * (h - mean_h - xhat[static_cast<size_t>(i) * m + j] * mean_hx);
            }
          }
        }
      };
    return r;
  }

  // Max over an axis of a 2D tensor. Ties route the gradient to the lowest
  // index, which keeps backward deterministic.
  Tensor max_pool(Tensor a, int axis) {
    auto [n, m] = dims2(a, "max_pool");
    if (axis != 0 && axis != 1) throw ShapeError("max_pool: axis");
    const auto& av = node(a).value;
    int lanes = axis == 0 ? m : n;
    int width = axis == 0 ? n : m;
    auto at = [&](int lane, int k) -> size_t {
      return axis == 0 ? static_cast<size_t>(k) * m + lane : static_cast<size_t>(lane) * m + k;
    };
    std::vector<double> out(lanes);
    std::vector<int> arg(lanes);
    for (int lane = 0; lane < lanes; ++lane) {
      double best = av[at(lane, 0)];
      int bi = 0;
      double second = -std::numeric_limits<double>::infinity();
      for (int k = 1; k < width; ++k) {
        double v = av[at(lane, k)];
        if (v > best) {
          second = best;
          best = v;
          bi = k;
        } else if (v > second) {
          second = v;
        }
      }
      if (width > 1) note_kink(best - second);
      out[lane] = best;
      arg[lane] = bi;
    }
    Shape oshape = axis == 0 ? Shape{1, m} : Shape{n, 1};
    Tensor r = push(oshape, std::move(out), node(a).requires_grad, "max_pool");
    if (node(r).requires_grad)
      node(r).backprop = [this, a, r, axis, m, arg = std::move(arg)] {
        auto& da = grad_buf(a);
        const auto& g = node(r).grad;
        for (size_t lane = 0; lane < g.size(); ++lane) {
          size_t idx = axis == 0 ? static_cast<size_t>(arg[lane]) * m + lane
                                 : lane * m + arg[lane];
          da[idx] += g[lane];
        }
      };
    return r;
  }

  // L2 norm of each row; n x m -> n x 1. Zero rows get zero subgradient.
  Tensor row_l2norm(Tensor a) {
    auto [n, m] = dims2(a, "row_l2norm");
    const auto& av = node(a).value;
    std::vector<double> out(n);
    for (int i = 0; i < n; ++i) {
      double s = 0.0;
      for (int j = 0; j < m; ++j) {
        double v = av[static_cast<size_t>(i) * m + j];
        s += v * v;
      }
      out[i] = std::sqrt(s);
      note_kink(out[i]);
    }
    Tensor r = push({n, 1}, std::move(out), node(a).requires_grad, "row_l2norm");
    if (node(r).requires_grad)
      node(r).backprop = [this, a, r, n, m] {
        auto& da = grad_buf(a);
        const auto& g = node(r).grad;
        const auto& y = node(r).value;
        const auto& x = node(a).value;
        for (int i = 0; i < n; ++i) {
          if (y[i] <= 1e-300) continue;
          double s = g[i] / y[i];
          for (int j = 0; j < m; ++j) da[static_cast<size_t>(i) * m + j] += s * x[static_cast<size_t>(i) * m + j];
        }
      };
    return r;
  }

  // ---- losses -----------------------------------------------------------

  // Mean over unmasked rows of -sum_j target[j] * log softmax(logits)[j].
  // Targets are constant distributions (rows need not be one-hot).
  Tensor cross_entropy(Tensor logits, const std::vector<double>& target,
                       const std::vector<uint8_t>& row_mask) {
    auto [n, c] = dims2(logits, "cross_entropy");
    if (target.size() != node(logits).value.size())
      throw ShapeError("cross_entropy: target size");
    if (static_cast<int>(row_mask.size()) != n) throw ShapeError("cross_entropy: mask size");
    const auto& lv = node(logits).value;
    int active = 0;
    for (uint8_t u : row_mask) active += u ? 1 : 0;
    double total = 0.0;
    std::vector<double> probs(lv.size(), 0.0);
    for (int i = 0; i < n; ++i) {
      if (!row_mask[i]) continue;
      const double* row = lv.data() + static_cast<size_t>(i) * c;
      double mx = *std::max_element(row, row + c);
      double z = 0.0;
      for (int j = 0; j < c; ++j) z += std::exp(row[j] - mx);
      double lse = mx + std::log(z);
      for (int j = 0; j < c; ++j) {
        probs[static_cast<size_t>(i) * c + j] = std::exp(row[j] - mx) / z;
        total += target[static_cast<size_t>(i) * c + j] * (lse - row[j]);
      }
    }
    if (active > 0) total /= active;
    Tensor r = push({1}, {total}, node(logits).requires_grad, "cross_entropy");
    if (node(r).requires_grad)
      node(r).backprop = [this, logits, r, target, row_mask, n, c, active,
                          probs = std::move(probs)] {
        if (active == 0) return;
        auto& dl = grad_buf(logits);
        double g = node(r).grad[0] / active;
        for (int i = 0; i < n; ++i) {
          if (!row_mask[i]) continue;
          double tsum = 0.0;
          for (int j = 0; j < c; ++j) tsum += target[static_cast<size_t>(i) * c + j];
          for (int j = 0; j < c; ++j)
            dl[static_cast<size_t>(i) * c + j] +=
                g * (probs[static_cast<size_t>(i) * c + j] * tsum - target[static_cast<size_t>(i) * c + j]);
        }
      };
    return r;
  }

  // Mean squared error over unmasked rows, averaged over rows and columns.
  Tensor mse(Tensor a, Tensor b, const std::vector<uint8_t>& row_mask) {
    auto [n, m] = dims2(a, "mse");
    if (!same_shape(node(a).shape, node(b).shape)) throw ShapeError("mse: shape mismatch");
    if (static_cast<int>(row_mask.size()) != n) throw ShapeError("mse: mask size");
    const auto& av = node(a).value;
    const auto& bv = node(b).value;
    int active = 0;
    for (uint8_t u : row_mask) active += u ? 1 : 0;
    double total = 0.0;
    for (int i = 0; i < n; ++i) {
      if (!row_mask[i]) continue;
      for (int j = 0; j < m; ++j) {
        double d = av[static_cast<size_t>(i) * m + j] - bv[static_cast<size_t>(i) * m + j];
        total += d * d;
      }
    }
    int denom = active * m;
    if (denom > 0) total /= denom;
    bool req = node(a).requires_grad || node(b).requires_grad;
    Tensor r = push({1}, {total}, req, "mse");
    if (req)
      node(r).backprop = [this, a, b, r, row_mask, n, m, denom] {
        if (denom == 0) return;
        const auto& av = node(a).value;
        const auto& bv = node(b).value;
        double g = 2.0 * node(r).grad[0] / denom;
        for (int i = 0; i < n; ++i) {
          if (!row_mask[i]) continue;
          for (int j = 0; j < m; ++j) {
            double d = g * (av[static_cast<size_t>(i) * m + j] - bv[static_cast<size_t>(i) * m + j]);
            if (node(a).requires_grad) grad_buf(a)[static_cast<size_t>(i) * m + j] += d;
            if (node(b).requires_grad) grad_buf(b)[static_cast<size_t>(i) * m + j] -= d;
          }
        }
      };
    return r;
  }

  // ---- box geometry on tape ----------------------------------------------

  // params: n x 7 rows (x, y, z, l, w, h, yaw) -> n x 24 corners, the 8
  // corners of geometry::corner_offsets order flattened as (x,y,z) triples.
  Tensor box_corners(Tensor params) {
    auto [n, seven] = dims2(params, "box_corners");
    if (seven != 7) throw ShapeError("box_corners: expected n x 7");
    const auto& pv = node(params).value;
    static constexpr int kSign[8][3] = {{+1, +1, -1}, {-1, +1, -1}, {-1, -1, -1},
                                        {+1, -1, -1}, {+1, +1, +1}, {-1, +1, +1},
                                        {-1, -1, +1}, {+1, -1, +1}};
    std::vector<double> out(static_cast<size_t>(n) * 24);
    for (int i = 0; i < n; ++i) {
      const double* p = pv.data() + static_cast<size_t>(i) * 7;
      double c = std::cos(p[6]), s = std::sin(p[6]);
      for (int k = 0; k < 8; ++k) {
        double ox = kSign[k][0] * p[3] / 2.0;
        double oy = kSign[k][1] * p[4] / 2.0;
        double oz = kSign[k][2] * p[5] / 2.0;
        double* o = out.data() + static_cast<size_t>(i) * 24 + k * 3;
        o[0] = p[0] + c * ox - s * oy;
        o[1] = p[1] + s * ox + c * oy;
        o[2] = p[2] + oz;
      }
    }
    Tensor r = push({n, 24}, std::move(out), node(params).requires_grad, "box_corners");
    if (node(r).requires_grad)
      node(r).backprop = [this, params, r, n] {
        static constexpr int kSign[8][3] = {{+1, +1, -1}, {-1, +1, -1}, {-1, -1, -1},
                                            {+1, -1, -1}, {+1, +1, +1}, {-1, +1, +1},
                                            {-1, -1, +1}, {+1, -1, +1}};
        auto& dp = grad_buf(params);
        const auto& g = node(r).grad;
        const auto& pv = node(params).value;
        for (int i = 0; i < n; ++i) {
          const double* p = pv.data() + static_cast<size_t>(i) * 7;
          double c = std::cos(p[6]), s = std::sin(p[6]);
          double* d = dp.data() + static_cast<size_t>(i) * 7;
          for (int k = 0; k < 8; ++k) {
            double ox = kSign[k][0] * p[3] / 2.0;
            double oy = kSign[k][1] * p[4] / 2.0;
            const double* gk = g.data() + static_cast<size_t>(i) * 24 + k * 3;
            d[0] += gk[0];
            d[1] += gk[1];
            d[2] += gk[2];
            d[3] += gk[0] * c * kSign[k][0] / 2.0 + gk[1] * s * kSign[k][0] / 2.0;
            d[4] += -gk[0] * s * kSign[k][1] / 2.0 + gk[1] * c * kSign[k][1] / 2.0;
            d[5] += gk[2] * kSign[k][2] / 2.0;
            d[6] += gk[0] * (-s * ox - c * oy) + gk[1] * (c * ox - s * oy);
          }
        }
      };
    return r;
  }

  // ---- reverse pass -------------------------------------------------------

  // Populates grads of every requires_grad ancestor of a scalar root.
  // Nodes are revisited never: the tape records ops in topological order, so
  // one reverse sweep suffices.
  void backward(Tensor root) {
    if (root.tape != this) throw InvalidArgument("backward: foreign tensor");
    if (node(root).value.size() != 1) throw InvalidArgument("backward: root must be scalar");
    for (auto& nd : nodes_)
      if (nd.requires_grad) {
        nd.grad.assign(nd.value.size(), 0.0);
      }
    if (!node(root).requires_grad) return;
    node(root).grad[0] = 1.0;
    for (int i = root.id; i >= 0; --i) {
      Node& nd = nodes_[i];
      if (nd.requires_grad && nd.backprop) nd.backprop();
    }
  }

 private:
  struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;
    bool requires_grad = false;
    std::function<void()> backprop;
  };

  Node& node(Tensor t) {
    if (t.tape != this) throw InvalidArgument("tensor belongs to another tape");
    return nodes_[t.id];
  }
  const Node& node(Tensor t) const {
    if (t.tape != this) throw InvalidArgument("tensor belongs to another tape");
    return nodes_[t.id];
  }

  std::vector<double>& grad_buf(Tensor t) {
    Node& nd = node(t);
    if (nd.grad.size() != nd.value.size()) nd.grad.assign(nd.value.size(), 0.0);
    return nd.grad;
  }

  void note_kink(double margin) { kink_margin_ = std::min(kink_margin_, margin); }

  std::pair<int, int> dims2(Tensor t, const char* op) const {
    const Shape& s = node(t).shape;
    if (s.size() == 1) return {1, s[0]};
    if (s.size() != 2) throw ShapeError(std::string(op) + ": expected 2D, got " + shape_str(s));
    return {s[0], s[1]};
  }

  static void ensure_finite(const std::vector<double>& v, const char* op) {
    for (double x : v)
      if (!std::isfinite(x)) throw NumericError(std::string(op) + ": non-finite value");
  }

  Tensor push(Shape shape, std::vector<double> value, bool requires_grad,
              std::string_view op) {
    if (!op.empty()) ensure_finite(value, op.data());
    Node nd;
    nd.shape = std::move(shape);
    nd.value = std::move(value);
    nd.requires_grad = requires_grad;
    nodes_.push_back(std::move(nd));
    return Tensor{this, static_cast<int>(nodes_.size()) - 1};
  }

  template <typename F, typename B>
  Tensor zip(Tensor a, Tensor b, const char* op, F fwd, B bwd) {
    if (!same_shape(node(a).shape, node(b).shape))
      throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(node(a).shape) +
                       " vs " + shape_str(node(b).shape));
    const auto& av = node(a).value;
    const auto& bv = node(b).value;
    std::vector<double> out(av.size());
    for (size_t i = 0; i < av.size(); ++i) out[i] = fwd(av[i], bv[i]);
    bool req = node(a).requires_grad || node(b).requires_grad;
    Tensor r = push(node(a).shape, std::move(out), req, op);
    if (req)
      node(r).backprop = [this, a, b, r, bwd] {
        const auto& av = node(a).value;
        const auto& bv = node(b).value;
        const auto& g = node(r).grad;
        bool ra = node(a).requires_grad, rb = node(b).requires_grad;
        double sink = 0.0;
        double* da = ra ? grad_buf(a).data() : nullptr;
        double* db = rb ? grad_buf(b).data() : nullptr;
        for (size_t i = 0; i < g.size(); ++i) {
          sink = 0.0;
          bwd(av[i], bv[i], g[i], ra ? da[i] : sink, rb ? db[i] : sink);
        }
      };
    return r;
  }

  std::vector<Node> nodes_;
  double kink_margin_ = std::numeric_limits<double>::infinity();
};

}  // namespace stif::ad
