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

// Differentiable tensor operations. Every op takes the tape first, computes
// its forward value eagerly and registers a backward closure that accumulates
// into the grads of tracked inputs.

#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "lm2/error.hpp"
#include "lm2/kernels.hpp"
#include "lm2/tape.hpp"
#include "lm2/tensor.hpp"

namespace lm2::ops {

namespace detail {

inline void require_matrix(const char* op, const Shape& s) {
  if (s.size() != 2) {
    throw DimensionError(std::string(op) + ": expected a matrix, got " +
                         shape_string(s));
  }
}

inline void require_same(const char* op, const Shape& a, const Shape& b) {
  if (a != b) {
    throw DimensionError(std::string(op) + ": shape mismatch " +
                         shape_string(a) + " vs " + shape_string(b));
  }
}

template <class Real>
void accumulate(Tensor<Real>& t, std::span<const Real> g) {
  if (!t.requires_grad()) return;
  auto dst = t.grad();
  for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
}

}  // namespace detail

// ---------------------------------------------------------------- products

template <RealType Real>
Tensor<Real> matmul(Tape<Real>& tape, Tensor<Real> a, Tensor<Real> b) {
  detail::require_matrix("matmul", a.shape());
  detail::require_matrix("matmul", b.shape());
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k) {
    throw DimensionError("matmul: inner extents disagree, " +
                         shape_string(a.shape()) + " · " +
                         shape_string(b.shape()));
  }
  Tensor<Real> out({m, n});
  kernels::gemm_nn(m, k, n, a.data().data(), b.data().data(), out.data().data());
  return tape.record("matmul", {a, b}, out, [a, b, out, m, k, n]() mutable {
    const Real* g = out.grad().data();
    if (a.requires_grad()) kernels::gemm_nt(m, n, k, g, b.data().data(), a.grad().data());
    if (b.requires_grad()) kernels::gemm_tn(m, k, n, a.data().data(), g, b.grad().data());
  });
}

// a[m×k] · b[n×k]ᵀ
template <RealType Real>
Tensor<Real> matmul_nt(Tape<Real>& tape, Tensor<Real> a, Tensor<Real> b) {
  detail::require_matrix("matmul_nt", a.shape());
  detail::require_matrix("matmul_nt", b.shape());
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[0];
  if (b.shape()[1] != k) {
    throw DimensionError("matmul_nt: inner extents disagree, " +
                         shape_string(a.shape()) + " · " +
                         shape_string(b.shape()) + "ᵀ");
  }
  Tensor<Real> out({m, n});
  kernels::gemm_nt(m, k, n, a.data().data(), b.data().data(), out.data().data());
  return tape.record("matmul_nt", {a, b}, out, [a, b, out, m, k, n]() mutable {
    const Real* g = out.grad().data();
    if (a.requires_grad()) kernels::gemm_nn(m, n, k, g, b.data().data(), a.grad().data());
    if (b.requires_grad()) kernels::gemm_tn(m, n, k, g, a.data().data(), b.grad().data());
  });
}

// a[m×k]ᵀ · b[m×n]
template <RealType Real>
Tensor<Real> matmul_tn(Tape<Real>& tape, Tensor<Real> a, Tensor<Real> b) {
  detail::require_matrix("matmul_tn", a.shape());
  detail::require_matrix("matmul_tn", b.shape());
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != m) {
    throw DimensionError("matmul_tn: inner extents disagree, " +
                         shape_string(a.shape()) + "ᵀ · " +
                         shape_string(b.shape()));
  }
  Tensor<Real> out({k, n});
  kernels::gemm_tn(m, k, n, a.data().data(), b.data().data(), out.data().data());
  return tape.record("matmul_tn", {a, b}, out, [a, b, out, m, k, n]() mutable {
    const Real* g = out.grad().data();
    if (a.requires_grad()) kernels::gemm_nt(m, n, k, b.data().data(), g, a.grad().data());
    if (b.requires_grad()) kernels::gemm_nn(m, k, n, a.data().data(), g, b.grad().data());
  });
}

// ------------------------------------------------------------- elementwise

template <RealType Real>
Tensor<Real> add(Tape<Real>& tape, Tensor<Real> a, Tensor<Real> b) {
  detail::require_same("add", a.shape(), b.shape());
  Tensor<Real> out(a.shape());
  auto o = out.data();
  auto x = a.data();
  auto y = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] + y[i];
  return tape.record("add", {a, b}, out, [a, b, out]() mutable {
    detail::accumulate(a, std::span<const Real>(out.grad()));
    detail::accumulate(b, std::span<const Real>(out.grad()));
  });
}

template <RealType Real>
Tensor<Real> mul(Tape<Real>& tape, Tensor<Real> a, Tensor<Real> b) {
  detail::require_same("mul", a.shape(), b.shape());
  Tensor<Real> out(a.shape());
  auto o = out.data();
  auto x = a.data();
  auto y = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] * y[i];
  return tape.record("mul", {a, b}, out, [a, b, out]() mutable {
    auto g = out.grad();
    if (a.requires_grad()) {
      auto da = a.grad();
      auto y = b.data();
      for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * y[i];
    }
    if (b.requires_grad()) {
      auto db = b.grad();
      auto x = a.data();
      for (std::size_t i = 0; i < g.size(); ++i) db[i] += g[i] * x[i];
    }
  });
}

template <RealType Real>
Tensor<Real> scale(Tape<Real>& tape, Tensor<Real> a, Real s) {
  Tensor<Real> out(a.shape());
  auto o = out.data();
  auto x = a.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] * s;
  return tape.record("scale", {a}, out, [a, out, s]() mutable {
    if (!a.requires_grad()) return;
    auto g = out.grad();
    auto da = a.grad();
    for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * s;
  });
}

// x[T×d] + bias[d] broadcast over rows.
template <RealType Real>
Tensor<Real> add_row_vector(Tape<Real>& tape, Tensor<Real> x, Tensor<Real> bias) {
  detail::require_matrix("add_row_vector", x.shape());
  const std::size_t rows = x.shape()[0], cols = x.shape()[1];
  if (bias.size() != cols) {
    throw DimensionError("add_row_vector: bias " + shape_string(bias.shape()) +
                         " for input " + shape_string(x.shape()));
  }
  Tensor<Real> out(x.shape());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c)
      out.data()[r * cols + c] = x.data()[r * cols + c] + bias.data()[c];
  return tape.record("add_row_vector", {x, bias}, out,
                     [x, bias, out, rows, cols]() mutable {
    auto g = out.grad();
    detail::accumulate(x, std::span<const Real>(g));
    if (bias.requires_grad()) {
      auto db = bias.grad();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) db[c] += g[r * cols + c];
    }
  });
}

enum class Activation { sigmoid, tanh, silu };

inline const char* activation_name(Activation kind) {
  switch (kind) {
    case Activation::sigmoid: return "sigmoid";
    case Activation::tanh: return "tanh";
    case Activation::silu: return "silu";
  }
  return "?";
}

template <RealType Real>
Tensor<Real> elementwise(Tape<Real>& tape, Tensor<Real> x, Activation kind) {
  Tensor<Real> out(x.shape());
  auto o = out.data();
  auto v = x.data();
  for (std::size_t i = 0; i < o.size(); ++i) {
    switch (kind) {
      case Activation::sigmoid: o[i] = kernels::sigmoid(v[i]); break;
      case Activation::tanh: o[i] = std::tanh(v[i]); break;
      case Activation::silu: o[i] = v[i] * kernels::sigmoid(v[i]); break;
    }
  }
  return tape.record(activation_name(kind), {x}, out, [x, out, kind]() mutable {
    if (!x.requires_grad()) return;
    auto g = out.grad();
    auto dx = x.grad();
    auto y = out.data();
    auto v = x.data();
    for (std::size_t i = 0; i < g.size(); ++i) {
      Real d = 0;
      switch (kind) {
        case Activation::sigmoid: d = y[i] * (Real(1) - y[i]); break;
        case Activation::tanh: d = Real(1) - y[i] * y[i]; break;
        case Activation::silu: {
          const Real s = kernels::sigmoid(v[i]);
          d = s * (Real(1) + v[i] * (Real(1) - s));
          break;
        }
      }
      dx[i] += g[i] * d;
    }
  });
}

template <RealType Real>
Tensor<Real> sigmoid(Tape<Real>& tape, Tensor<Real> x) {
  return elementwise(tape, std::move(x), Activation::sigmoid);
}
template <RealType Real>
Tensor<Real> tanh(Tape<Real>& tape, Tensor<Real> x) {
  return elementwise(tape, std::move(x), Activation::tanh);
}
template <RealType Real>
Tensor<Real> silu(Tape<Real>& tape, Tensor<Real> x) {
  return elementwise(tape, std::move(x), Activation::silu);
}

// Sigmoid whose outputs stay strictly inside (0,1) even when the logistic
// saturates in the working precision. Used for memory gates.
template <RealType Real>
Tensor<Real> open_sigmoid(Tape<Real>& tape, Tensor<Real> x) {
  constexpr Real lo = std::numeric_limits<Real>::min();
  constexpr Real hi = Real(1) - std::numeric_limits<Real>::epsilon() / Real(2);
  Tensor<Real> out(x.shape());
  auto o = out.data();
  auto v = x.data();
  for (std::size_t i = 0; i < o.size(); ++i)
    o[i] = std::clamp(kernels::sigmoid(v[i]), lo, hi);
  return tape.record("gate_sigmoid", {x}, out, [x, out]() mutable {
    if (!x.requires_grad()) return;
    auto g = out.grad();
    auto dx = x.grad();
    auto y = out.data();
    for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * y[i] * (Real(1) - y[i]);
  });
}

// ------------------------------------------------------------- reductions

template <RealType Real>
Tensor<Real> sum(Tape<Real>& tape, Tensor<Real> x) {
  Real acc = 0;
  for (Real v : x.data()) acc += v;
  Tensor<Real> out({1}, std::vector<Real>{acc});
  return tape.record("sum", {x}, out, [x, out]() mutable {
    if (!x.requires_grad()) return;
    const Real g = out.grad()[0];
    for (Real& d : x.grad()) d += g;
  });
}

// Σ x ⊙ w for a constant weight tensor (random projections in gradient checks).
template <RealType Real>
Tensor<Real> dot_const(Tape<Real>& tape, Tensor<Real> x, const Tensor<Real>& w) {
  detail::require_same("dot_const", x.shape(), w.shape());
  Real acc = 0;
  for (std::size_t i = 0; i < x.size(); ++i) acc += x.data()[i] * w.data()[i];
  Tensor<Real> out({1}, std::vector<Real>{acc});
  return tape.record("dot_const", {x}, out, [x, w, out]() mutable {
    if (!x.requires_grad()) return;
    const Real g = out.grad()[0];
    auto dx = x.grad();
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += g * w.data()[i];
  });
}

// ---------------------------------------------------------------- softmax

// Boolean matrix; true marks an entry that may receive probability.
struct Mask {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<unsigned char> allow;

  static Mask all(std::size_t r, std::size_t c) {
    return Mask{r, c, std::vector<unsigned char>(r * c, 1)};
  }
  static Mask causal(std::size_t n) {
    Mask m{n, n, std::vector<unsigned char>(n * n, 0)};
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j <= i; ++j) m.allow[i * n + j] = 1;
    return m;
  }
};

struct SoftmaxOptions {
  const Mask* mask = nullptr;
  std::optional<std::size_t> top_k;
};

template <RealType Real>
struct SoftmaxResult {
  Tensor<Real> probs;
  // Rows with no admissible entry; their output is all zeros.
  std::vector<std::size_t> fully_masked_rows;
};

template <RealType Real>
SoftmaxResult<Real> softmax_rows(Tape<Real>& tape, Tensor<Real> x,
                                 const SoftmaxOptions& opts = {}) {
  detail::require_matrix("softmax_rows", x.shape());
  const std::size_t m = x.shape()[0], n = x.shape()[1];
  if (opts.mask && (opts.mask->rows != m || opts.mask->cols != n)) {
    throw DimensionError("softmax_rows: mask [" + std::to_string(opts.mask->rows) +
                         "x" + std::to_string(opts.mask->cols) + "] for input " +
                         shape_string(x.shape()));
  }
  if (opts.top_k && (*opts.top_k == 0 || *opts.top_k > n)) {
    throw ConfigError("softmax_rows: top_k=" + std::to_string(*opts.top_k) +
                      " must lie in [1, " + std::to_string(n) + "]");
  }
  SoftmaxResult<Real> res;
  Tensor<Real> out = x.clone();
  out.set_requires_grad(false);
  std::vector<unsigned char> keep(n);
  for (std::size_t r = 0; r < m; ++r) {
    Real* row = out.data().data() + r * n;
    if (opts.mask) {
      std::copy_n(opts.mask->allow.begin() + r * n, n, keep.begin());
    } else {
      std::fill(keep.begin(), keep.end(), 1);
    }
    if (opts.top_k) kernels::top_k_keep(row, n, *opts.top_k, keep.data());
    if (!kernels::softmax_row(row, n, keep.data())) res.fully_masked_rows.push_back(r);
  }
  res.probs = tape.record("softmax_rows", {x}, out, [x, out, m, n]() mutable {
    if (!x.requires_grad()) return;
    auto g = out.grad();
    auto p = out.data();
    auto dx = x.grad();
    for (std::size_t r = 0; r < m; ++r) {
      Real dot = 0;
      for (std::size_t j = 0; j < n; ++j) dot += g[r * n + j] * p[r * n + j];
      for (std::size_t j = 0; j < n; ++j)
        dx[r * n + j] += p[r * n + j] * (g[r * n + j] - dot);
    }
  });
  return res;
}

// ---------------------------------------------------------- normalization

template <RealType Real>
Tensor<Real> rms_norm(Tape<Real>& tape, Tensor<Real> x, Tensor<Real> gain, Real eps) {
  detail::require_matrix("rms_norm", x.shape());
  if (!(eps > Real(0))) throw ConfigError("rms_norm: eps must be positive");
  const std::size_t rows = x.shape()[0], d = x.shape()[1];
  if (gain.size() != d) {
    throw DimensionError("rms_norm: gain " + shape_string(gain.shape()) +
                         " for input " + shape_string(x.shape()));
  }
  Tensor<Real> out(x.shape());
  std::vector<Real> inv_rms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const Real* xr = x.data().data() + r * d;
    Real ms = 0;
    for (std::size_t c = 0; c < d; ++c) ms += xr[c] * xr[c];
    ms /= Real(d);
    inv_rms[r] = Real(1) / std::sqrt(ms + eps);
    for (std::size_t c = 0; c < d; ++c)
      out.data()[r * d + c] = xr[c] * inv_rms[r] * gain.data()[c];
  }
  return tape.record("rms_norm", {x, gain}, out,
                     [x, gain, out, inv_rms, rows, d]() mutable {
    auto g = out.grad();
    auto xv = x.data();
    auto gv = gain.data();
    if (gain.requires_grad()) {
      auto dg = gain.grad();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < d; ++c)
          dg[c] += g[r * d + c] * xv[r * d + c] * inv_rms[r];
    }
    if (x.requires_grad()) {
      auto dx = x.grad();
      for (std::size_t r = 0; r < rows; ++r) {
        const Real s = inv_rms[r];
        Real dot = 0;
        for (std::size_t c = 0; c < d; ++c) dot += g[r * d + c] * gv[c] * xv[r * d + c];
        const Real coef = dot * s * s * s / Real(d);
        for (std::size_t c = 0; c < d; ++c)
          dx[r * d + c] += g[r * d + c] * gv[c] * s - coef * xv[r * d + c];
      }
    }
  });
}

// ------------------------------------------------------------------ rotary

// Rotary position embedding. Accepts [T×h×d_h] or [T×(h·d_h)] with an
// explicit head count. Pairs (2i, 2i+1) of each head rotate by
// (pos_offset + t) · base^(−2i/d_h).
template <RealType Real>
Tensor<Real> rope_apply(Tape<Real>& tape, Tensor<Real> x, std::size_t n_heads,
                        std::size_t pos_offset, double base) {
  std::size_t T = 0, head_dim = 0;
  if (x.rank() == 3) {
    T = x.shape()[0];
    n_heads = x.shape()[1];
    head_dim = x.shape()[2];
  } else {
    detail::require_matrix("rope_apply", x.shape());
    T = x.shape()[0];
    if (n_heads == 0 || x.shape()[1] % n_heads != 0) {
      throw DimensionError("rope_apply: width " + std::to_string(x.shape()[1]) +
                           " not divisible by " + std::to_string(n_heads) + " heads");
    }
    head_dim = x.shape()[1] / n_heads;
  }
  if (head_dim % 2 != 0) {
    throw ConfigError("rope_apply: head dimension " + std::to_string(head_dim) +
                      " must be even");
  }
  const std::size_t half = head_dim / 2;
  const std::size_t width = n_heads * head_dim;
  std::vector<Real> cosv(T * half), sinv(T * half);
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t i = 0; i < half; ++i) {
      const double freq = std::pow(base, -2.0 * double(i) / double(head_dim));
      const double angle = double(pos_offset + t) * freq;
      cosv[t * half + i] = Real(std::cos(angle));
      sinv[t * half + i] = Real(std::sin(angle));
    }
  }
  Tensor<Real> out(x.shape());
  auto rotate = [cosv, sinv, T, n_heads, half, width, head_dim](
                    std::span<const Real> in, std::span<Real> dst, Real sign) {
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t h = 0; h < n_heads; ++h)
        for (std::size_t i = 0; i < half; ++i) {
          const std::size_t o = t * width + h * head_dim + 2 * i;
          const Real c = cosv[t * half + i], s = sign * sinv[t * half + i];
          const Real a = in[o], b = in[o + 1];
          dst[o] += a * c - b * s;
          dst[o + 1] += a * s + b * c;
        }
  };
  rotate(x.data(), out.data(), Real(1));
  return tape.record("rope_apply", {x}, out, [x, out, rotate]() mutable {
    if (!x.requires_grad()) return;
    // Inverse rotation is the transpose.
    rotate(std::span<const Real>(out.grad()), x.grad(), Real(-1));
  });
}

// --------------------------------------------------------------- attention

// Multi-head causal attention with grouped key/value heads.
//   q: [T×(n_heads·d_h)], k,v: [S×(n_kv_heads·d_h)] with S ≥ T.
// Query row i sits at absolute key position (S − T + i) and attends keys
// 0..S−T+i. Probabilities are computed with the same masked row softmax as
// softmax_rows, restricted to admissible keys.
template <RealType Real>
Tensor<Real> causal_attention(Tape<Real>& tape, Tensor<Real> q, Tensor<Real> k,
                              Tensor<Real> v, std::size_t n_heads,
                              std::size_t n_kv_heads) {
  detail::require_matrix("causal_attention", q.shape());
  detail::require_matrix("causal_attention", k.shape());
  detail::require_same("causal_attention", k.shape(), v.shape());
  if (n_kv_heads == 0 || n_heads % n_kv_heads != 0) {
    throw ConfigError("causal_attention: n_heads must be a multiple of n_kv_heads");
  }
  const std::size_t T = q.shape()[0], S = k.shape()[0];
  const std::size_t hd = q.shape()[1] / n_heads;
  if (hd * n_heads != q.shape()[1] || k.shape()[1] != hd * n_kv_heads || S < T) {
    throw DimensionError("causal_attention: q " + shape_string(q.shape()) + ", k " +
                         shape_string(k.shape()) + " inconsistent with " +
                         std::to_string(n_heads) + "/" + std::to_string(n_kv_heads) +
                         " heads");
  }
  const std::size_t group = n_heads / n_kv_heads;
  const std::size_t qw = n_heads * hd, kw = n_kv_heads * hd;
  const std::size_t past = S - T;
  const Real scale = Real(1) / std::sqrt(Real(hd));

  // probs[h][i][j] for j ≤ past + i, stored densely as [h][T][S].
  std::vector<Real> probs(n_heads * T * S, Real(0));
  Tensor<Real> out({T, qw});
  const Real* qd = q.data().data();
  const Real* kd = k.data().data();
  const Real* vd = v.data().data();
  for (std::size_t h = 0; h < n_heads; ++h) {
    const std::size_t kvh = h / group;
    for (std::size_t i = 0; i < T; ++i) {
      Real* p = probs.data() + (h * T + i) * S;
      const std::size_t n_keys = past + i + 1;
      const Real* qi = qd + i * qw + h * hd;
      for (std::size_t j = 0; j < n_keys; ++j) {
        const Real* kj = kd + j * kw + kvh * hd;
        Real dot = 0;
        for (std::size_t c = 0; c < hd; ++c) dot += qi[c] * kj[c];
        p[j] = dot * scale;
      }
      kernels::softmax_row(p, n_keys, static_cast<const unsigned char*>(nullptr));
      Real* o = out.data().data() + i * qw + h * hd;
      for (std::size_t j = 0; j < n_keys; ++j) {
        const Real pj = p[j];
        const Real* vj = vd + j * kw + kvh * hd;
        for (std::size_t c = 0; c < hd; ++c) o[c] += pj * vj[c];
      }
    }
  }
  return tape.record(
      "causal_attention", {q, k, v}, out,
      [q, k, v, out, probs = std::move(probs), T, S, hd, n_heads, group, qw, kw,
       past, scale]() mutable {
        const Real* g = out.grad().data();
        const Real* qd = q.data().data();
        const Real* kd = k.data().data();
        const Real* vd = v.data().data();
        Real* dq = q.requires_grad() ? q.grad().data() : nullptr;
        Real* dk = k.requires_grad() ? k.grad().data() : nullptr;
        Real* dv = v.requires_grad() ? v.grad().data() : nullptr;
        std::vector<Real> dp(S);
        for (std::size_t h = 0; h < n_heads; ++h) {
          const std::size_t kvh = h / group;
          for (std::size_t i = 0; i < T; ++i) {
            const Real* p = probs.data() + (h * T + i) * S;
            const std::size_t n_keys = past + i + 1;
            const Real* gi = g + i * qw + h * hd;
            Real dot = 0;
            for (std::size_t j = 0; j < n_keys; ++j) {
              const Real* vj = vd + j * kw + kvh * hd;
              Real s = 0;
              for (std::size_t c = 0; c < hd; ++c) s += gi[c] * vj[c];
              dp[j] = s;
              dot += s * p[j];
              if (dv) {
                Real* dvj = dv + j * kw + kvh * hd;
                for (std::size_t c = 0; c < hd; ++c) dvj[c] += p[j] * gi[c];
              }
            }
            const Real* qi = qd + i * qw + h * hd;
            for (std::size_t j = 0; j < n_keys; ++j) {
              const Real ds = p[j] * (dp[j] - dot) * scale;
              if (ds == Real(0)) continue;
              const Real* kj = kd + j * kw + kvh * hd;
              if (dq) {
                Real* dqi = dq + i * qw + h * hd;
                for (std::size_t c = 0; c < hd; ++c) dqi[c] += ds * kj[c];
              }
              if (dk) {
                Real* dkj = dk + j * kw + kvh * hd;
                for (std::size_t c = 0; c < hd; ++c) dkj[c] += ds * qi[c];
              }
            }
          }
        }
      });
}

// ------------------------------------------------------------ reshaping

// Stacks a[m×d] on top of b[n×d].
template <RealType Real>
Tensor<Real> concat_rows(Tape<Real>& tape, Tensor<Real> a, Tensor<Real> b) {
  detail::require_matrix("concat_rows", a.shape());
  detail::require_matrix("concat_rows", b.shape());
  if (a.shape()[1] != b.shape()[1]) {
    throw DimensionError("concat_rows: widths differ, " + shape_string(a.shape()) +
                         " and " + shape_string(b.shape()));
  }
  Tensor<Real> out({a.shape()[0] + b.shape()[0], a.shape()[1]});
  std::copy(a.data().begin(), a.data().end(), out.data().begin());
  std::copy(b.data().begin(), b.data().end(), out.data().begin() + a.size());
  return tape.record("concat_rows", {a, b}, out, [a, b, out]() mutable {
    auto g = out.grad();
    detail::accumulate(a, std::span<const Real>(g.first(a.size())));
    detail::accumulate(b, std::span<const Real>(g.subspan(a.size())));
  });
}

// Selects rows of x (indices may repeat).
template <RealType Real>
Tensor<Real> gather_rows(Tape<Real>& tape, Tensor<Real> x,
                         std::vector<std::size_t> rows) {
  detail::require_matrix("gather_rows", x.shape());
  const std::size_t d = x.shape()[1];
  if (rows.empty()) throw DimensionError("gather_rows: empty index list");
  Tensor<Real> out({rows.size(), d});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= x.shape()[0]) {
      throw DimensionError("gather_rows: row " + std::to_string(rows[i]) +
                           " out of range for " + shape_string(x.shape()));
    }
    std::copy_n(x.data().begin() + rows[i] * d, d, out.data().begin() + i * d);
  }
  return tape.record("gather_rows", {x}, out, [x, out, rows = std::move(rows), d]() mutable {
    if (!x.requires_grad()) return;
    auto g = out.grad();
    auto dx = x.grad();
    for (std::size_t i = 0; i < rows.size(); ++i)
      for (std::size_t c = 0; c < d; ++c) dx[rows[i] * d + c] += g[i * d + c];
  });
}

// Row lookup into an embedding table [V×d].
template <RealType Real>
Tensor<Real> embedding(Tape<Real>& tape, Tensor<Real> table,
                       const std::vector<int>& ids) {
  detail::require_matrix("embedding", table.shape());
  std::vector<std::size_t> rows;
  rows.reserve(ids.size());
  for (int id : ids) {
    if (id < 0 || std::size_t(id) >= table.shape()[0]) {
      throw TokenError("token id " + std::to_string(id) + " outside vocabulary of " +
                       std::to_string(table.shape()[0]));
    }
    rows.push_back(std::size_t(id));
  }
  return gather_rows(tape, std::move(table), std::move(rows));
}

// Write weights for slot aggregation: divides each column of A[T×N] by
// max(column sum, floor). Returns Ŵᵀ (same shape as A).
template <RealType Real>
Tensor<Real> column_normalize(Tape<Real>& tape, Tensor<Real> a, Real floor) {
  detail::require_matrix("column_normalize", a.shape());
  const std::size_t T = a.shape()[0], N = a.shape()[1];
  std::vector<Real> denom(N, 0);
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t r = 0; r < N; ++r) denom[r] += a.data()[t * N + r];
  std::vector<bool> floored(N);
  for (std::size_t r = 0; r < N; ++r) {
    floored[r] = denom[r] < floor;
    if (floored[r]) denom[r] = floor;
  }
  Tensor<Real> out(a.shape());
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t r = 0; r < N; ++r)
      out.data()[t * N + r] = a.data()[t * N + r] / denom[r];
  return tape.record("column_normalize", {a}, out, [a, out, denom, floored, T, N]() mutable {
    if (!a.requires_grad()) return;
    auto g = out.grad();
    auto w = out.data();
    auto da = a.grad();
    for (std::size_t r = 0; r < N; ++r) {
      Real dot = 0;
      if (!floored[r])
        for (std::size_t t = 0; t < T; ++t) dot += g[t * N + r] * w[t * N + r];
      for (std::size_t t = 0; t < T; ++t)
        da[t * N + r] += (g[t * N + r] - dot) / denom[r];
    }
  });
}

// ------------------------------------------------------------------- loss

// Summed token cross-entropy of logits[R×V] against targets (one per row),
// multiplied by `weight` (1/count gives a mean).
template <RealType Real>
Tensor<Real> cross_entropy(Tape<Real>& tape, Tensor<Real> logits,
                           const std::vector<int>& targets, Real weight) {
  detail::require_matrix("cross_entropy", logits.shape());
  const std::size_t R = logits.shape()[0], V = logits.shape()[1];
  if (targets.size() != R) {
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) +
                         " targets for " + std::to_string(R) + " rows");
  }
  std::vector<Real> probs(logits.data().begin(), logits.data().end());
  Real total = 0;
  for (std::size_t r = 0; r < R; ++r) {
    const int y = targets[r];
    if (y < 0 || std::size_t(y) >= V) {
      throw TokenError("target id " + std::to_string(y) + " outside vocabulary of " +
                       std::to_string(V));
    }
    const Real* row = logits.data().data() + r * V;
    Real mx = row[0];
    for (std::size_t j = 1; j < V; ++j) mx = std::max(mx, row[j]);
    Real s = 0;
    for (std::size_t j = 0; j < V; ++j) s += std::exp(row[j] - mx);
    const Real lse = mx + std::log(s);
    total += lse - row[y];
    kernels::softmax_row(probs.data() + r * V, V,
                         static_cast<const unsigned char*>(nullptr));
  }
  Tensor<Real> out({1}, std::vector<Real>{total * weight});
  return tape.record("cross_entropy", {logits}, out,
                     [logits, out, probs = std::move(probs), targets, weight, R,
                      V]() mutable {
    if (!logits.requires_grad()) return;
    const Real g = out.grad()[0] * weight;
    auto dl = logits.grad();
    for (std::size_t r = 0; r < R; ++r) {
      for (std::size_t j = 0; j < V; ++j) dl[r * V + j] += g * probs[r * V + j];
      dl[r * V + std::size_t(targets[r])] -= g;
    }
  });
}

}  // namespace lm2::ops
