// Copyright 2026 The tractflow Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//    http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cmath>
#include <vector>

namespace tractflow {

// In-place LU with partial pivoting; returns false on an exactly zero pivot.
inline bool lu_decompose(std::vector<double>& a, int n, std::vector<int>& piv,
                         double& sign) {
  piv.resize(static_cast<size_t>(n));
  sign = 1.0;
  for (int i = 0; i < n; ++i) piv[static_cast<size_t>(i)] = i;
  for (int col = 0; col < n; ++col) {
    int best = col;
    double best_abs = std::fabs(a[static_cast<size_t>(col) * n + col]);
    for (int r = col + 1; r < n; ++r) {
      double v = std::fabs(a[static_cast<size_t>(r) * n + col]);
      if (v > best_abs) {
        best_abs = v;
        best = r;
      }
    }
    if (best_abs == 0.0) return false;
    if (best != col) {
      for (int j = 0; j < n; ++j)
        std::swap(a[static_cast<size_t>(col) * n + j],
                  a[static_cast<size_t>(best) * n + j]);
      std::swap(piv[static_cast<size_t>(col)], piv[static_cast<size_t>(best)]);
      sign = -sign;
    }
    double pivot = a[static_cast<size_t>(col) * n + col];
    for (int r = col + 1; r < n; ++r) {
      double f = a[static_cast<size_t>(r) * n + col] / pivot;
      a[static_cast<size_t>(r) * n + col] = f;
      for (int j = col + 1; j < n; ++j)
        a[static_cast<size_t>(r) * n + j] -=
            f * a[static_cast<size_t>(col) * n + j];
    }
  }
  return true;
}

inline void lu_solve(const std::vector<double>& lu, const std::vector<int>& piv,
                     int n, const double* b, double* x) {
  std::vector<double> y(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    double s = b[piv[static_cast<size_t>(i)]];
    for (int j = 0; j < i; ++j)
      s -= lu[static_cast<size_t>(i) * n + j] * y[static_cast<size_t>(j)];
    y[static_cast<size_t>(i)] = s;
  }
  for (int i = n - 1; i >= 0; --i) {
    double s = y[static_cast<size_t>(i)];
    for (int j = i + 1; j < n; ++j) s -= lu[static_cast<size_t>(i) * n + j] * x[j];
    x[i] = s / lu[static_cast<size_t>(i) * n + i];
  }
}

/// log|det| of a square matrix, computed in double. Returns false if singular.
inline bool mat_logabsdet(const std::vector<double>& m, int n, double& out) {
  std::vector<double> lu = m;
  std::vector<int> piv;
  double sign;
  if (!lu_decompose(lu, n, piv, sign)) return false;
  double s = 0;
  for (int i = 0; i < n; ++i)
    s += std::log(std::fabs(lu[static_cast<size_t>(i) * n + i]));
  out = s;
  return true;
}

inline bool mat_inverse_d(const std::vector<double>& m, int n,
                          std::vector<double>& inv) {
  std::vector<double> lu = m;
  std::vector<int> piv;
  double sign;
  if (!lu_decompose(lu, n, piv, sign)) return false;
  inv.assign(static_cast<size_t>(n) * n, 0.0);
  std::vector<double> e(static_cast<size_t>(n), 0.0), col(static_cast<size_t>(n));
  for (int j = 0; j < n; ++j) {
    std::fill(e.begin(), e.end(), 0.0);
    e[static_cast<size_t>(j)] = 1.0;
    lu_solve(lu, piv, n, e.data(), col.data());
    for (int i = 0; i < n; ++i) inv[static_cast<size_t>(i) * n + j] = col[static_cast<size_t>(i)];
  }
  return true;
}

}  // namespace tractflow
