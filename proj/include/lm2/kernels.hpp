// Copyright 2026 The LM2 Authors.
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

// Raw row-major kernels. No allocation except the transpose scratch in
// gemm_nt and gemm_tn; every output row depends only on the matching input row(s), which
// the causality tests rely on.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstring>
#include <limits>
#include <numeric>
#include <span>
#include <vector>

namespace lm2::kernels {

namespace detail {

template <class Real>
using Vec [[gnu::vector_size(32)]] = Real;

template <class Real>
inline Vec<Real> load(const Real* p) {
  Vec<Real> v;
  std::memcpy(&v, p, sizeof v);
  return v;
}

// MR rows × NV vectors of C, accumulated from zero in p order and then
// added to C. The scalar edge path below uses the same order, so a row's
// result does not depend on how many rows or columns surround it.
template <class Real, std::size_t MR, std::size_t NV>
inline void tile(std::size_t k, std::size_t n, const Real* a, const Real* b, Real* c) {
  constexpr std::size_t L = sizeof(Vec<Real>) / sizeof(Real);
  Vec<Real> acc[MR][NV] = {};
  for (std::size_t p = 0; p < k; ++p) {
    Vec<Real> bv[NV];
    for (std::size_t v = 0; v < NV; ++v) bv[v] = load(b + p * n + v * L);
    for (std::size_t r = 0; r < MR; ++r) {
      const Real x = a[r * k + p];
      for (std::size_t v = 0; v < NV; ++v) acc[r][v] += x * bv[v];
    }
  }
  for (std::size_t r = 0; r < MR; ++r) {
    for (std::size_t v = 0; v < NV; ++v) {
      Real* out = c + r * n + v * L;
      const Vec<Real> sum = load(out) + acc[r][v];
      std::memcpy(out, &sum, sizeof sum);
    }
  }
}

template <class Real, std::size_t MR>
inline void panel(std::size_t k, std::size_t n, const Real* a, const Real* b, Real* c) {
  constexpr std::size_t L = sizeof(Vec<Real>) / sizeof(Real);
  std::size_t j = 0;
  for (; j + 2 * L <= n; j += 2 * L) tile<Real, MR, 2>(k, n, a, b + j, c + j);
  for (; j + L <= n; j += L) tile<Real, MR, 1>(k, n, a, b + j, c + j);
  for (; j < n; ++j) {
    for (std::size_t r = 0; r < MR; ++r) {
      Real acc = 0;
      for (std::size_t p = 0; p < k; ++p) acc += a[r * k + p] * b[p * n + j];
      c[r * n + j] += acc;
    }
  }
}

}  // namespace detail

// C[m×n] += A[m×k] · B[k×n]
template <class Real>
void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const Real* a,
             const Real* b, Real* c) {
  std::size_t i = 0;
  for (; i + 4 <= m; i += 4) detail::panel<Real, 4>(k, n, a + i * k, b, c + i * n);
  for (; i < m; ++i) detail::panel<Real, 1>(k, n, a + i * k, b, c + i * n);
}

// C[m×n] += A[m×k] · B[n×k]ᵀ
template <class Real>
void gemm_nt(std::size_t m, std::size_t k, std::size_t n, const Real* a,
             const Real* b, Real* c) {
  std::vector<Real> bt(k * n);
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t p = 0; p < k; ++p) bt[p * n + j] = b[j * k + p];
  gemm_nn(m, k, n, a, bt.data(), c);
}

// C[k×n] += A[m×k]ᵀ · B[m×n]
template <class Real>
void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const Real* a,
             const Real* b, Real* c) {
  std::vector<Real> at(k * m);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) at[p * m + i] = a[i * k + p];
  gemm_nn(k, m, n, at.data(), b, c);
}

// In-place stabilized softmax over row[0..n) restricted to entries whose
// `keep` flag is set; other entries become exactly 0. Returns false when no
// entry is kept (row left all-zero).
template <class Real>
bool softmax_row(Real* row, std::size_t n, const unsigned char* keep) {
  Real mx = -std::numeric_limits<Real>::infinity();
  bool any = false;
  for (std::size_t j = 0; j < n; ++j) {
    if (keep && !keep[j]) continue;
    mx = std::max(mx, row[j]);
    any = true;
  }
  if (!any) {
    std::fill(row, row + n, Real(0));
    return false;
  }
  Real sum = 0;
  for (std::size_t j = 0; j < n; ++j) {
    if (keep && !keep[j]) {
      row[j] = Real(0);
      continue;
    }
    row[j] = std::exp(row[j] - mx);
    sum += row[j];
  }
  const Real inv = Real(1) / sum;
  for (std::size_t j = 0; j < n; ++j) row[j] *= inv;
  return true;
}

// Marks the `top_k` largest entries of row (ties go to the lower index)
// among those already allowed by `keep`.
template <class Real>
void top_k_keep(const Real* row, std::size_t n, std::size_t top_k,
                unsigned char* keep) {
  std::vector<std::size_t> idx;
  idx.reserve(n);
  for (std::size_t j = 0; j < n; ++j)
    if (keep[j]) idx.push_back(j);
  if (idx.size() <= top_k) return;
  std::stable_sort(idx.begin(), idx.end(), [row](std::size_t x, std::size_t y) {
    return row[x] > row[y];
  });
  for (std::size_t i = top_k; i < idx.size(); ++i) keep[idx[i]] = 0;
}

template <class Real>
Real sigmoid(Real x) {
  // Split on sign so exp never overflows.
  if (x >= Real(0)) {
    const Real z = std::exp(-x);
    return Real(1) / (Real(1) + z);
  }
  const Real z = std::exp(x);
  return z / (Real(1) + z);
}

}  // namespace lm2::kernels
