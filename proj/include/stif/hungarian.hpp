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
#include <limits>
#include <utility>
#include <vector>

#include "stif/common.hpp"

namespace stif::track {

struct Assignment {
  std::vector<std::pair<int, int>> pairs;  // (row, col), ascending rows
  double total_cost = 0.0;
};

namespace detail {

// Shortest-augmenting-path assignment on a dense square matrix (the classic
// potentials formulation). Fills p[1..n] with the row matched to each column.
inline void solve_square(const std::vector<double>& a, int n, std::vector<int>& p) {
  const double kInf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0), minv(n + 1);
  std::vector<int> way(n + 1);
  p.assign(n + 1, 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    minv.assign(n + 1, kInf);
    std::vector<char> used(n + 1, 0);
    do {
      used[j0] = 1;
      int i0 = p[j0], j1 = -1;
      double delta = kInf;
      for (int j = 1; j <= n; ++j) {
        if (used[j]) continue;
        double cur = a[static_cast<size_t>(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0);
  }
}

// Minimum-cost maximal matching of an n x m matrix under per-row pins:
// pinned[i] == -1 leaves row i free, in [0, m) forces that column, == m
// forces the row unmatched. Infeasible pin sets (column collisions, or a
// matching that would fall short of min(n, m) pairs) return +infinity.
// Pinned rows and claimed columns are removed and the remainder is solved
// exactly on a zero-padded square submatrix; no sentinel costs are involved.
inline double restricted_optimum(const std::vector<double>& cost, int n, int m,
                                 const std::vector<int>& pinned,
                                 std::vector<int>* row_to_col) {
  const double kInf = std::numeric_limits<double>::infinity();
  std::vector<int> rc(n, -1);
  std::vector<char> col_taken(m, 0);
  double base = 0.0;
  int pins_real = 0, pins_off = 0;
  std::vector<int> free_rows;
  for (int i = 0; i < n; ++i) {
    int p = i < static_cast<int>(pinned.size()) ? pinned[i] : -1;
    if (p < 0) {
      free_rows.push_back(i);
    } else if (p == m) {
      ++pins_off;
    } else {
      if (col_taken[p]) return kInf;
      col_taken[p] = 1;
      rc[i] = p;
      base += cost[static_cast<size_t>(i) * m + p];
      ++pins_real;
    }
  }
  std::vector<int> free_cols;
  for (int j = 0; j < m; ++j)
    if (!col_taken[j]) free_cols.push_back(j);

  int nf = static_cast<int>(free_rows.size());
  int mf = static_cast<int>(free_cols.size());
  if (pins_real + std::min(nf, mf) != std::min(n, m)) return kInf;  // not maximal

  double sub_total = 0.0;
  if (nf > 0 && mf > 0) {
    int N = std::max(nf, mf);
    std::vector<double> sq(static_cast<size_t>(N) * N, 0.0);
    for (int i = 0; i < nf; ++i)
      for (int j = 0; j < mf; ++j)
        sq[static_cast<size_t>(i) * N + j] =
            cost[static_cast<size_t>(free_rows[i]) * m + free_cols[j]];
    std::vector<int> p;
    solve_square(sq, N, p);
    for (int j = 1; j <= N; ++j) {
      int i = p[j] - 1;
      if (i < nf && j - 1 < mf) {
        rc[free_rows[i]] = free_cols[j - 1];
        sub_total += cost[static_cast<size_t>(free_rows[i]) * m + free_cols[j - 1]];
      }
    }
  }
  if (row_to_col) *row_to_col = std::move(rc);
  return base + sub_total;
}

}  // namespace detail

namespace detail {

inline std::vector<double> flatten_checked(const std::vector<std::vector<double>>& cost,
                                           int n, int m) {
  std::vector<double> flat;
  flat.reserve(static_cast<size_t>(n) * m);
  for (const auto& row : cost) {
    if (static_cast<int>(row.size()) != m) throw ShapeError("hungarian: ragged matrix");
    for (double c : row) {
      if (!std::isfinite(c)) throw InvalidArgument("hungarian: non-finite cost");
      flat.push_back(c);
    }
  }
  return flat;
}

}  // namespace detail

// Minimum-cost maximal matching without the lexicographic tie-break pass;
// ties resolve by solver order. The cheap variant for inner loops (metric
// sweeps) where tie identity is irrelevant.
inline Assignment hungarian_basic(const std::vector<std::vector<double>>& cost) {
  int n = static_cast<int>(cost.size());
  if (n == 0) return {};
  int m = static_cast<int>(cost[0].size());
  if (m == 0) return {};
  std::vector<double> flat = detail::flatten_checked(cost, n, m);
  std::vector<int> rc;
  detail::restricted_optimum(flat, n, m, std::vector<int>(n, -1), &rc);
  Assignment out;
  for (int i = 0; i < n; ++i)
    if (rc[i] >= 0) {
      out.pairs.emplace_back(i, rc[i]);
      out.total_cost += flat[static_cast<size_t>(i) * m + rc[i]];
    }
  return out;
}

// Minimum-total-cost maximal matching of an n x m cost matrix; rectangular
// inputs are handled by square padding with zero-cost dummies. Among optimal
// matchings the result is the lexicographically smallest row->column vector
// (unmatched sorting after every real column), fixed greedily row by row.
// Ties are only meaningful for exactly-representable costs; generic float
// matrices have a unique optimum and the refinement simply re-derives it.
inline Assignment hungarian(const std::vector<std::vector<double>>& cost) {
  int n = static_cast<int>(cost.size());
  if (n == 0) return {};
  int m = static_cast<int>(cost[0].size());
  if (m == 0) return {};
  std::vector<double> flat = detail::flatten_checked(cost, n, m);

  std::vector<int> pinned(n, -1);
  std::vector<int> row_to_col;
  double best = detail::restricted_optimum(flat, n, m, pinned, &row_to_col);

  for (int i = 0; i < n; ++i) {
    int chosen = -1;
    for (int c = 0; c <= m; ++c) {
      pinned[i] = c;
      double total = detail::restricted_optimum(flat, n, m, pinned, nullptr);
      if (total == best) {
        chosen = c;
        break;
      }
    }
    if (chosen < 0) {
      // numerical fallback: keep the unrestricted optimum's choice for this row
      pinned[i] = -1;
      detail::restricted_optimum(flat, n, m, pinned, &row_to_col);
      pinned[i] = row_to_col[i] < 0 ? m : row_to_col[i];
    }
  }

  Assignment out;
  std::vector<int> final_rc;
  detail::restricted_optimum(flat, n, m, pinned, &final_rc);
  for (int i = 0; i < n; ++i)
    if (final_rc[i] >= 0) {
      out.pairs.emplace_back(i, final_rc[i]);
      out.total_cost += flat[static_cast<size_t>(i) * m + final_rc[i]];
    }
  return out;
}

}  // namespace stif::track
