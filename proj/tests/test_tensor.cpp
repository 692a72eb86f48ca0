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
#include "stif/tensor.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <cstring>

#include "gradcheck.hpp"
#include "stif/geometry.hpp"
#include "stif/rng.hpp"

using namespace stif;
using namespace stif::ad;
using stif::testing::BuiltGraph;
using stif::testing::gradcheck;

namespace {

constexpr int kTrials = 25;  // random instances per primitive
constexpr double kTol = 1e-4;

// Random values bounded away from zero, for ops with kinks at the origin.
std::vector<double> random_vec(Rng& rng, size_t n, bool avoid_zero = false) {
  std::vector<double> v(n);
  for (auto& x : v) {
    x = rng.uniform(-2.0, 2.0);
    if (avoid_zero && std::abs(x) < 0.1) x += x >= 0 ? 0.15 : -0.15;
  }
  return v;
}

std::vector<double> random_pos(Rng& rng, size_t n, double lo = 0.1, double hi = 3.0) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.uniform(lo, hi);
  return v;
}

// Fixed readout weights turn any op output into a scalar for grad checking.
Tensor scalarize(Tape& t, Tensor out, Rng& rng) {
  std::vector<double> w(t.val(out).size());
  for (auto& x : w) x = rng.uniform(-1.0, 1.0);
  return t.weighted_sum(out, std::move(w));
}

}  // namespace

// ---------------------------------------------------------------------------
// Forward values
// ---------------------------------------------------------------------------

TEST(TensorForward, MatmulIdentity) {
  Rng rng(1);
  for (int k = 0; k < 10; ++k) {
    Tape t;
    auto a = t.constant({2, 2}, random_vec(rng, 4));
    auto eye = t.constant({2, 2}, {1, 0, 0, 1});
    auto r = t.matmul(eye, a);
    for (int i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(t.val(r)[i], t.val(a)[i]);
  }
}

TEST(TensorForward, SoftmaxUniformRow) {
  Tape t;
  auto x = t.constant({1, 2}, {0.0, 0.0});
  auto y = t.softmax(x, 1);
  EXPECT_DOUBLE_EQ(t.val(y)[0], 0.5);
  EXPECT_DOUBLE_EQ(t.val(y)[1], 0.5);
}

TEST(TensorForward, SoftmaxRowsSumToOneAndShiftInvariant) {
  Rng rng(2);
  for (int k = 0; k < 20; ++k) {
    int n = 1 + static_cast<int>(rng.uniform_int(0, 5));
    int m = 2 + static_cast<int>(rng.uniform_int(0, 6));
    auto v = random_vec(rng, static_cast<size_t>(n) * m);
    Tape t;
    auto x = t.constant({n, m}, v);
    auto y = t.softmax(x, 1);
    for (int i = 0; i < n; ++i) {
      double s = 0;
      for (int j = 0; j < m; ++j) s += t.val(y)[static_cast<size_t>(i) * m + j];
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
    // add a per-row constant
    auto shifted = v;
    double c = rng.uniform(-5, 5);
    for (auto& e : shifted) e += c;
    auto x2 = t.constant({n, m}, shifted);
    auto y2 = t.softmax(x2, 1);
    for (size_t i = 0; i < shifted.size(); ++i)
      EXPECT_NEAR(t.val(y2)[i], t.val(y)[i], 1e-12);
  }
}

TEST(TensorForward, CrossEntropyUniformLogits) {
  // -log(1/4) for a one-hot target under uniform logits over 4 classes.
  Tape t;
  auto logits = t.constant({1, 4}, {0.3, 0.3, 0.3, 0.3});
  auto ce = t.cross_entropy(logits, {0, 0, 1, 0}, {1});
  EXPECT_NEAR(t.item(ce), std::log(4.0), 1e-12);
}

TEST(TensorForward, DeterministicBitIdentical) {
  auto run = [] {
    Rng rng(99);
    Tape t;
    auto a = t.input({4, 4}, random_vec(rng, 16), true);
    auto b = t.input({4, 4}, random_vec(rng, 16), true);
    auto c = t.matmul(t.softmax(a, 1), t.relu(b));
    auto g = t.constant({4}, {1, 2, 3, 4});
    auto d = t.layer_norm(c, t.constant({4}, {1, 1, 1, 1}), g);
    auto s = t.sum(d);
    std::vector<double> out(t.val(d).begin(), t.val(d).end());
    out.push_back(t.item(s));
    return out;
  };
  auto r1 = run(), r2 = run();
  ASSERT_EQ(r1.size(), r2.size());
  EXPECT_EQ(0, std::memcmp(r1.data(), r2.data(), r1.size() * sizeof(double)));
}

TEST(TensorErrors, ShapeMismatchThrows) {
  Tape t;
  auto a = t.constant({2, 3}, std::vector<double>(6, 1.0));
  auto b = t.constant({2, 2}, std::vector<double>(4, 1.0));
  EXPECT_THROW(t.add(a, b), ShapeError);
  EXPECT_THROW(t.matmul(a, a), ShapeError);
}

TEST(TensorErrors, NonFiniteThrows) {
  Tape t;
  EXPECT_THROW(t.constant({1}, {std::nan("")}), NumericError);
  // log of a negative argument produces NaN inside the op
  auto a = t.constant({1}, {-5.0});
  EXPECT_THROW(t.log_eps(a), NumericError);
}

TEST(TensorErrors, BackwardNonScalarRoot) {
  Tape t;
  auto a = t.input({2, 2}, {1, 2, 3, 4}, true);
  EXPECT_THROW(t.backward(a), InvalidArgument);
}

TEST(TensorBackward, SumGivesOnes) {
  Tape t;
  auto x = t.input({3, 2}, {1, 2, 3, 4, 5, 6}, true);
  auto s = t.sum(x);
  t.backward(s);
  for (double g : t.grad(x)) EXPECT_DOUBLE_EQ(g, 1.0);
}

TEST(TensorBackward, MseAgainstDetachedSelfIsZeroGrad) {
  Tape t;
  std::vector<double> v{0.5, -1.0, 2.0, 0.25};
  auto x = t.input({2, 2}, v, true);
  auto x0 = t.constant({2, 2}, v);
  auto l = t.mse(x, x0, {1, 1});
  EXPECT_DOUBLE_EQ(t.item(l), 0.0);
  t.backward(l);
  for (double g : t.grad(x)) EXPECT_DOUBLE_EQ(g, 0.0);
}

TEST(TensorForward, MaxPoolAndConcat) {
  Tape t;
  auto a = t.constant({2, 3}, {1, 5, 3, 4, 2, 6});
  auto mp0 = t.max_pool(a, 0);
  EXPECT_EQ(t.shape(mp0), (Shape{1, 3}));
  EXPECT_DOUBLE_EQ(t.val(mp0)[0], 4);
  EXPECT_DOUBLE_EQ(t.val(mp0)[1], 5);
  EXPECT_DOUBLE_EQ(t.val(mp0)[2], 6);
  auto mp1 = t.max_pool(a, 1);
  EXPECT_EQ(t.shape(mp1), (Shape{2, 1}));
  EXPECT_DOUBLE_EQ(t.val(mp1)[0], 5);
  EXPECT_DOUBLE_EQ(t.val(mp1)[1], 6);

  auto b = t.constant({2, 1}, {9, 8});
  auto c = t.concat({a, b}, 1);
  EXPECT_EQ(t.shape(c), (Shape{2, 4}));
  EXPECT_DOUBLE_EQ(t.val(c)[3], 9);
  EXPECT_DOUBLE_EQ(t.val(c)[7], 8);
}

TEST(TensorForward, BoxCornersMatchesGeometry) {
  Rng rng(17);
  for (int k = 0; k < 20; ++k) {
    geom::Box3D b;
    b.x = rng.uniform(-20, 20);
    b.y = rng.uniform(-20, 20);
    b.z = rng.uniform(-2, 2);
    b.l = rng.uniform(0.5, 5);
    b.w = rng.uniform(0.5, 3);
    b.h = rng.uniform(0.5, 3);
    b.yaw = wrap_angle(rng.uniform(-3, 3));
    Tape t;
    auto p = t.constant({1, 7}, {b.x, b.y, b.z, b.l, b.w, b.h, b.yaw});
    auto c = t.box_corners(p);
    auto want = geom::corners3d(b);
    for (int i = 0; i < 8; ++i)
      for (int j = 0; j < 3; ++j)
        EXPECT_NEAR(t.val(c)[i * 3 + j], want[i][j], 1e-12);
  }
}

// ---------------------------------------------------------------------------
// Gradient oracle per primitive: >= 20 random instances, shapes <= 8 per axis
// ---------------------------------------------------------------------------

TEST(TensorGrad, ElementwiseOps) {
  Rng rng(101);
  for (int k = 0; k < kTrials; ++k) {
    int n = 1 + static_cast<int>(rng.uniform_int(0, 7));
    int m = 1 + static_cast<int>(rng.uniform_int(0, 7));
    size_t sz = static_cast<size_t>(n) * m;
    auto xa = random_vec(rng, sz, true);
    auto xb = random_vec(rng, sz, true);
    std::vector<double> x0 = xa;
    x0.insert(x0.end(), xb.begin(), xb.end());
    uint64_t sub_seed = rng.next_u64();
    auto build = [=](Tape& t, const std::vector<double>& x) -> BuiltGraph {
      Rng r2(sub_seed);
      auto a = t.input({n, m}, {x.begin(), x.begin() + sz}, true);
      auto b = t.input({n, m}, {x.begin() + sz, x.end()}, true);
      auto s = t.add(t.mul(t.add(a, b), t.sub(a, b)), t.mul_scalar(t.relu(a), 0.7));
      s = t.add(s, t.abs(b));
      return {scalarize(t, s, r2), {a, b}};
    };
    EXPECT_LE(gradcheck(build, x0), kTol) << "elementwise trial " << k;
  }
}

TEST(TensorGrad, MatmulTransposeReshape) {
  Rng rng(102);
  for (int k = 0; k < kTrials; ++k) {
    int n = 1 + static_cast<int>(rng.uniform_int(0, 7));
    int p = 1 + static_cast<int>(rng.uniform_int(0, 7));
    int m = 1 + static_cast<int>(rng.uniform_int(0, 7));
    size_t sa = static_cast<size_t>(n) * p, sb = static_cast<size_t>(p) * m;
    auto x0 = random_vec(rng, sa + sb);
    uint64_t sub_seed = rng.next_u64();
    auto build = [=](Tape& t, const std::vector<double>& x) -> BuiltGraph {
      Rng r2(sub_seed);
      auto a = t.input({n, p}, {x.begin(), x.begin() + sa}, true);
      auto b = t.input({p, m}, {x.begin() + sa, x.end()}, true);
      auto c = t.matmul(a, b);
      auto d = t.transpose(c);
      auto e = t.reshape(d, {n * m});
      return {scalarize(t, e, r2), {a, b}};
    };
    EXPECT_LE(gradcheck(build, x0), kTol) << "matmul trial " << k;
  }
}

TEST(TensorGrad, AddRowvecConcatSlices) {
  Rng rng(103);
  for (int k = 0; k < kTrials; ++k) {
    int n = 2 + static_cast<int>(rng.uniform_int(0, 6));
    int m = 2 + static_cast<int>(rng.uniform_int(0, 6));
    size_t sa = static_cast<size_t>(n) * m;
    auto x0 = random_vec(rng, sa + m + sa);
    uint64_t sub_seed = rng.next_u64();
    auto build = [=](Tape& t, const std::vector<double>& x) -> BuiltGraph {
      Rng r2(sub_seed);
      auto a = t.input({n, m}, {x.begin(), x.begin() + sa}, true);
      auto v = t.input({m}, {x.begin() + sa, x.begin() + sa + m}, true);
      auto b = t.input({n, m}, {x.begin() + sa + m, x.end()}, true);
      auto c = t.add_rowvec(a, v);
      auto cat = t.concat({c, b}, 0);
      auto s1 = t.slice_rows(cat, 1, n);
      auto cat2 = t.concat({s1, b}, 1);
      auto s2 = t.slice_cols(cat2, 1, m);
      return {scalarize(t, s2, r2), {a, v, b}};
    };
    EXPECT_LE(gradcheck(build, x0), kTol) << "structure trial " << k;
  }
}

TEST(TensorGrad, GatherSelectFillBroadcast) {
  Rng rng(104);
  for (int k = 0; k < kTrials; ++k) {
    int n = 2 + static_cast<int>(rng.uniform_int(0, 6));
    int m = 1 + static_cast<int>(rng.uniform_int(0, 7));
    size_t sa = static_cast<size_t>(n) * m;
    std::vector<int> idx;
    for (int i = 0; i < n + 1; ++i) idx.push_back(static_cast<int>(rng.uniform_int(0, n - 1)));
    std::vector<uint8_t> rmask(n), emask(sa);
    for (auto& u : rmask) u = rng.uniform() < 0.5;
    for (auto& u : emask) u = rng.uniform() < 0.7;
    auto x0 = random_vec(rng, 2 * sa + 1);
    uint64_t sub_seed = rng.next_u64();
    auto build = [=](Tape& t, const std::vector<double>& x) -> BuiltGraph {
      Rng r2(sub_seed);
      auto a = t.input({n, m}, {x.begin(), x.begin() + sa}, true);
      auto b = t.input({n, m}, {x.begin() + sa, x.begin() + 2 * sa}, true);
      auto s = t.input({1}, {x.back()}, true);
      auto g1 = t.gather_rows(a, idx);
      auto sel = t.select_rows(rmask, a, b);
      auto fm = t.fill_masked(sel, emask, -3.0);
      auto bc = t.broadcast_scalar(s, n, m);
      auto sum = t.add(t.add(fm, bc), t.slice_rows(g1, 0, n));
      return {scalarize(t, sum, r2), {a, b, s}};
    };
    EXPECT_LE(gradcheck(build, x0), kTol) << "gather/select trial " << k;
  }
}

TEST(TensorGrad, SoftmaxBothAxes) {
  Rng rng(105);
  for (int k = 0; k < kTrials; ++k) {
    int n = 1 + static_cast<int>(rng.uniform_int(0, 7));
    int m = 1 + static_cast<int>(rng.uniform_int(0, 7));
    size_t sa = static_cast<size_t>(n) * m;
    auto x0 = random_vec(rng, sa);
    int axis = k % 2;
    uint64_t sub_seed = rng.next_u64();
    auto build = [=](Tape& t, const std::vector<double>& x) -> BuiltGraph {
      Rng r2(sub_seed);
      auto a = t.input({n, m}, x, true);
      return {scalarize(t, t.softmax(a, axis), r2), {a}};
    };
    EXPECT_LE(gradcheck(build, x0), kTol) << "softmax trial " << k;
  }
}

TEST(TensorGrad, MaskedSoftmax) {
  Rng rng(106);
  for (int k = 0; k < kTrials; ++k) {
    int n = 2 + static_cast<int>(rng.uniform_int(0, 6));
    int m = 2 + static_cast<int>(rng.uniform_int(0, 6));
    size_t sa = static_cast<size_t>(n) * m;
    int axis = k % 2;
    std::vector<uint8_t> mask(sa);
    // guarantee at least one unmasked entry per lane
    for (auto& u : mask) u = rng.uniform() < 0.6;
    for (int i = 0; i < n; ++i) mask[static_cast<size_t>(i) * m + static_cast<size_t>(rng.uniform_int(0, m - 1))] = 1;
    for (int j = 0; j < m; ++j) mask[static_cast<size_t>(rng.uniform_int(0, n - 1)) * m + j] = 1;
    auto x0 = random_vec(rng, sa);
    uint64_t sub_seed = rng.next_u64();
    auto build = [=](Tape& t, const std::vector<double>& x) -> BuiltGraph {
      Rng r2(sub_seed);
      auto a = t.input({n, m}, x, true);
      return {scalarize(t, t.masked_softmax(a, axis, mask, true), r2), {a}};
    };
    EXPECT_LE(gradcheck(build, x0), kTol) << "masked softmax trial " << k;
  }
}

TEST(TensorGrad, LayerNorm) {
  Rng rng(107);
  for (int k = 0; k < kTrials; ++k) {
    int n = 1 + static_cast<int>(rng.uniform_int(0, 7));
    int m = 2 + static_cast<int>(rng.uniform_int(0, 6));
    size_t sa = static_cast<size_t>(n) * m;
    auto x0 = random_vec(rng, sa + 2 * m);
    uint64_t sub_seed = rng.next_u64();
    auto build = [=](Tape& t, const std::vector<double>& x) -> BuiltGraph {
      Rng r2(sub_seed);
      auto a = t.input({n, m}, {x.begin(), x.begin() + sa}, true);
      auto g = t.input({m}, {x.begin() + sa, x.begin() + sa + m}, true);
      auto b = t.input({m}, {x.begin() + sa + m, x.end()}, true);
      return {scalarize(t, t.layer_norm(a, g, b), r2), {a, g, b}};
    };
    EXPECT_LE(gradcheck(build, x0), kTol) << "layer_norm trial " << k;
  }
}

TEST(TensorGrad, MaxPoolRowNormLog) {
  Rng rng(108);
  for (int k = 0; k < kTrials; ++k) {
    int n = 1 + static_cast<int>(rng.uniform_int(0, 7));
    int m = 1 + static_cast<int>(rng.uniform_int(0, 7));
    size_t sa = static_cast<size_t>(n) * m;
    auto x0 = random_pos(rng, sa, 0.2, 3.0);
    int axis = k % 2;
    uint64_t sub_seed = rng.next_u64();
    auto build = [=](Tape& t, const std::vector<double>& x) -> BuiltGraph {
      Rng r2(sub_seed);
      auto a = t.input({n, m}, x, true);
      auto mp = t.max_pool(a, axis);
      auto rn = t.row_l2norm(a);
      auto lg = t.log_eps(a, 1e-12);
      auto s = t.add(t.sum(mp), t.add(t.sum(rn), t.sum(lg)));
      return {s, {a}};
    };
    EXPECT_LE(gradcheck(build, x0), kTol) << "pool/norm trial " << k;
  }
}

TEST(TensorGrad, CrossEntropyAndMse) {
  Rng rng(109);
  for (int k = 0; k < kTrials; ++k) {
    int n = 1 + static_cast<int>(rng.uniform_int(0, 7));
    int c = 2 + static_cast<int>(rng.uniform_int(0, 6));
    size_t sa = static_cast<size_t>(n) * c;
    std::vector<double> target(sa, 0.0);
    std::vector<uint8_t> rmask(n);
    bool any = false;
    for (int i = 0; i < n; ++i) {
      target[static_cast<size_t>(i) * c + static_cast<size_t>(rng.uniform_int(0, c - 1))] = 1.0;
      rmask[i] = rng.uniform() < 0.8;
      any = any || rmask[i];
    }
    if (!any) rmask[0] = 1;
    auto x0 = random_vec(rng, 2 * sa);
    auto build = [=](Tape& t, const std::vector<double>& x) -> BuiltGraph {
      auto logits = t.input({n, c}, {x.begin(), x.begin() + sa}, true);
      auto a = t.input({n, c}, {x.begin() + sa, x.end()}, true);
      auto ref = t.constant({n, c}, std::vector<double>(sa, 0.3));
      auto loss = t.add(t.cross_entropy(logits, target, rmask), t.mse(a, ref, rmask));
      return {loss, {logits, a}};
    };
    EXPECT_LE(gradcheck(build, x0), kTol) << "loss trial " << k;
  }
}

TEST(TensorGrad, WeightedSumMeanSub) {
  Rng rng(110);
  for (int k = 0; k < kTrials; ++k) {
    int n = 1 + static_cast<int>(rng.uniform_int(0, 7));
    auto x0 = random_vec(rng, static_cast<size_t>(n));
    std::vector<double> w = random_vec(rng, static_cast<size_t>(n));
    auto build = [=](Tape& t, const std::vector<double>& x) -> BuiltGraph {
      auto a = t.input({n}, x, true);
      auto s = t.add(t.weighted_sum(a, w), t.mean(a));
      return {s, {a}};
    };
    EXPECT_LE(gradcheck(build, x0), kTol) << "reduction trial " << k;
  }
}

TEST(TensorGrad, BoxCorners) {
  Rng rng(111);
  for (int k = 0; k < kTrials; ++k) {
    int n = 1 + static_cast<int>(rng.uniform_int(0, 3));
    std::vector<double> x0;
    for (int i = 0; i < n; ++i) {
      x0.push_back(rng.uniform(-10, 10));  // x
      x0.push_back(rng.uniform(-10, 10));  // y
      x0.push_back(rng.uniform(-2, 2));    // z
      x0.push_back(rng.uniform(0.5, 5));   // l
      x0.push_back(rng.uniform(0.5, 3));   // w
      x0.push_back(rng.uniform(0.5, 3));   // h
      x0.push_back(rng.uniform(-3, 3));    // yaw
    }
    uint64_t sub_seed = rng.next_u64();
    auto build = [=](Tape& t, const std::vector<double>& x) -> BuiltGraph {
      Rng r2(sub_seed);
      auto p = t.input({n, 7}, x, true);
      return {scalarize(t, t.box_corners(p), r2), {p}};
    };
    EXPECT_LE(gradcheck(build, x0), kTol) << "box corners trial " << k;
  }
}

// Random composite graph: mixes most primitives, checked against the oracle.
TEST(TensorGrad, CompositeGraph) {
  Rng rng(112);
  for (int k = 0; k < 5; ++k) {
    int n = 3, m = 8;
    size_t sa = static_cast<size_t>(n) * m;
    auto x0 = random_vec(rng, sa + sa + m);
    uint64_t sub_seed = rng.next_u64();
    auto build = [=](Tape& t, const std::vector<double>& x) -> BuiltGraph {
      Rng r2(sub_seed);
      auto a = t.input({n, m}, {x.begin(), x.begin() + sa}, true);
      auto b = t.input({n, m}, {x.begin() + sa, x.begin() + 2 * sa}, true);
      auto v = t.input({m}, {x.begin() + 2 * sa, x.end()}, true);
      auto att = t.softmax(t.mul_scalar(t.matmul(a, t.transpose(b)), 0.5), 1);
      auto h = t.relu(t.add_rowvec(t.matmul(att, b), v));
      auto ones = t.constant({m}, std::vector<double>(m, 1.0));
      auto g = t.layer_norm(h, ones, v);
      auto s = t.add(t.mean(g), t.sum(t.max_pool(g, 0)));
      return {s, {a, b, v}};
    };
    EXPECT_LE(gradcheck(build, x0), kTol) << "composite trial " << k;
  }
}
