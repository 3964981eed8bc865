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

// Explicit memory bank: N slots of width d, read by cross-attention from the
// token stream and rewritten through input/forget gates.
//
//   Q = E·W_Q, K = M·W_K, V = M·W_V
//   A = softmax(Q·Kᵀ / √d)                    [T×N]
//   E_mem = A·V,  g_out = σ(E_mem·W_out + b_out),  E_gated = g_out ⊙ E_mem
//   g_in = σ(E·W_in),  g_forget = σ(E_mem·W_forget)
//
// Gates are token-space [T×d] while the bank is slot-space [N×d]. Writes are
// aggregated through the read alignment: Ŵ[r,t] = A[t,r] / max(Σ_t A[t,r], ε),
//
//   M_next[r] = Σ_t Ŵ[r,t]·(g_in ⊙ tanh(E_mem))[t]  +  (Σ_t Ŵ[r,t]·g_forget[t]) ⊙ M[r]
//
// which is the per-slot recurrence M ← g_in ⊙ tanh(E_mem) + g_forget ⊙ M when
// T = 1. A slot with no attention mass at all (top-k reads) is left as is.

#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "lm2/error.hpp"
#include "lm2/ops.hpp"
#include "lm2/rng.hpp"
#include "lm2/tape.hpp"
#include "lm2/tensor.hpp"

namespace lm2 {

// Floor on a slot's attention mass in the write weights.
inline constexpr double kWriteEps = 1e-30;

template <RealType Real>
Tensor<Real> init_normal(Shape shape, double stddev, Rng rng) {
  Tensor<Real> t(std::move(shape));
  for (auto& v : t.data()) v = Real(rng.normal(0.0, stddev));
  return t;
}

template <RealType Real>
struct MemoryBank {
  Tensor<Real> slots;  // [N×d]
  // Bumped on every write; reads remember the version they saw.
  std::uint64_t version = 0;

  std::size_t num_slots() const { return slots.shape()[0]; }
  std::size_t dim() const { return slots.shape()[1]; }
};

// Identity rows, cycled when N ≠ d: row r is the one-hot e_{r mod d}.
template <RealType Real>
MemoryBank<Real> init_bank(std::size_t num_slots, std::size_t dim) {
  if (num_slots == 0 || dim == 0) {
    throw ConfigError("memory bank needs positive slot count and width");
  }
  Tensor<Real> m({num_slots, dim});
  for (std::size_t r = 0; r < num_slots; ++r) m(r, r % dim) = Real(1);
  return MemoryBank<Real>{m, 0};
}

template <RealType Real>
struct MemoryParams {
  Tensor<Real> w_query, w_key, w_value;  // [d×d]
  Tensor<Real> w_out;                    // [d×d]
  Tensor<Real> b_out;                    // [d]
  Tensor<Real> w_in, w_forget;           // [d×d]

  static MemoryParams init(std::size_t d, double stddev, double gate_bias,
                           std::uint64_t seed, const std::string& prefix) {
    auto mat = [&](const char* name) {
      return init_normal<Real>({d, d}, stddev, Rng(seed, prefix + name));
    };
    MemoryParams p{mat("w_query"), mat("w_key"),   mat("w_value"), mat("w_out"),
                   Tensor<Real>({d}, Real(gate_bias)), mat("w_in"), mat("w_forget")};
    for (auto& [name, t] : p.named("")) t.set_requires_grad(true);
    return p;
  }

  std::size_t dim() const { return w_query.shape()[0]; }

  // Stable parameter order and names; checkpoints rely on it.
  std::vector<std::pair<std::string, Tensor<Real>>> named(const std::string& prefix) const {
    return {{prefix + "w_query", w_query}, {prefix + "w_key", w_key},
            {prefix + "w_value", w_value}, {prefix + "w_out", w_out},
            {prefix + "b_out", b_out},     {prefix + "w_in", w_in},
            {prefix + "w_forget", w_forget}};
  }
};

template <RealType Real>
struct MemoryReadResult {
  Tensor<Real> e_mem;      // [T×d]
  Tensor<Real> attention;  // A, [T×N]
  Tensor<Real> e_gated;    // [T×d]
  Tensor<Real> g_out;      // [T×d]
  Tensor<Real> values;     // V = M·W_V, [N×d]; kept for slot analysis
  std::uint64_t bank_version = 0;
  std::vector<std::size_t> fully_masked_rows;
};

enum class GateKind { input, forget, output };

// σ of the gate's affine map. `x` is E_t for the input gate and E_mem for
// forget/output. Outputs lie strictly inside (0,1).
template <RealType Real>
Tensor<Real> gate(Tape<Real>& tape, Tensor<Real> x, GateKind kind,
                  const MemoryParams<Real>& params) {
  switch (kind) {
    case GateKind::input:
      return ops::open_sigmoid(tape, ops::matmul(tape, x, params.w_in));
    case GateKind::forget:
      return ops::open_sigmoid(tape, ops::matmul(tape, x, params.w_forget));
    case GateKind::output:
      return ops::open_sigmoid(
          tape, ops::add_row_vector(tape, ops::matmul(tape, x, params.w_out), params.b_out));
  }
  throw ConfigError("unknown gate kind");
}

template <RealType Real>
MemoryReadResult<Real> memory_read(Tape<Real>& tape, Tensor<Real> e,
                                   const MemoryBank<Real>& bank,
                                   const MemoryParams<Real>& params,
                                   std::optional<std::size_t> top_k = std::nullopt) {
  const std::size_t d = bank.dim();
  if (e.rank() != 2 || e.shape()[1] != d) {
    throw DimensionError("memory_read: input " + shape_string(e.shape()) +
                         " against bank " + shape_string(bank.slots.shape()));
  }
  MemoryReadResult<Real> out;
  out.bank_version = bank.version;
  auto q = ops::matmul(tape, e, params.w_query);
  auto k = ops::matmul(tape, bank.slots, params.w_key);
  out.values = ops::matmul(tape, bank.slots, params.w_value);
  auto scores = ops::scale(tape, ops::matmul_nt(tape, q, k), Real(1) / std::sqrt(Real(d)));
  ops::SoftmaxOptions opt;
  opt.top_k = top_k;
  auto sm = ops::softmax_rows(tape, scores, opt);
  out.attention = sm.probs;
  out.fully_masked_rows = std::move(sm.fully_masked_rows);
  out.e_mem = ops::matmul(tape, out.attention, out.values);
  out.g_out = gate(tape, out.e_mem, GateKind::output, params);
  out.e_gated = ops::mul(tape, out.g_out, out.e_mem);
  return out;
}

enum class WriteAggregation { attention, mean };

// A slot-space write computed from one read, not yet applied:
// M_next = candidate + retain ⊙ M.
template <RealType Real>
struct PendingWrite {
  Tensor<Real> candidate;  // [N×d]
  Tensor<Real> retain;     // G_f, [N×d]
  std::uint64_t source_version = 0;
};

// Token-to-slot write weights, returned transposed as [T×N].
template <RealType Real>
Tensor<Real> write_weights(Tape<Real>& tape, const MemoryReadResult<Real>& read,
                           WriteAggregation mode) {
  if (mode == WriteAggregation::mean) {
    const auto& s = read.attention.shape();
    return Tensor<Real>(s, Real(1) / Real(s[0]));
  }
  return ops::column_normalize(tape, read.attention, Real(kWriteEps));
}

template <RealType Real>
PendingWrite<Real> propose_write(Tape<Real>& tape, Tensor<Real> e,
                                 const MemoryReadResult<Real>& read,
                                 const MemoryParams<Real>& params,
                                 WriteAggregation mode = WriteAggregation::attention) {
  auto g_in = gate(tape, e, GateKind::input, params);
  auto g_forget = gate(tape, read.e_mem, GateKind::forget, params);
  auto content = ops::mul(tape, g_in, ops::tanh(tape, read.e_mem));
  auto w = write_weights(tape, read, mode);
  auto retain = ops::matmul_tn(tape, w, g_forget);
  // Slots that no token attended (only possible under top-k) have no write
  // weight at all; they keep their content instead of being zeroed.
  const std::size_t T = read.attention.shape()[0], N = read.attention.shape()[1];
  const std::size_t d = read.e_mem.shape()[1];
  Tensor<Real> idle({N, d});
  bool any_idle = false;
  for (std::size_t r = 0; r < N; ++r) {
    bool attended = false;
    for (std::size_t t = 0; t < T && !attended; ++t) attended = read.attention(t, r) != Real(0);
    if (attended) continue;
    any_idle = true;
    for (std::size_t c = 0; c < d; ++c) idle(r, c) = Real(1);
  }
  if (any_idle) retain = ops::add(tape, retain, idle);
  return PendingWrite<Real>{ops::matmul_tn(tape, w, content), retain, read.bank_version};
}

// Applies a pending write on top of the bank's current state. The write may
// have been proposed against an earlier version (block-threaded banks chain
// several writes proposed at segment start).
template <RealType Real>
MemoryBank<Real> apply_write(Tape<Real>& tape, const MemoryBank<Real>& bank,
                             const PendingWrite<Real>& write) {
  if (write.candidate.shape() != bank.slots.shape()) {
    throw DimensionError("apply_write: update " + shape_string(write.candidate.shape()) +
                         " for bank " + shape_string(bank.slots.shape()));
  }
  auto next = ops::add(tape, write.candidate, ops::mul(tape, write.retain, bank.slots));
  return MemoryBank<Real>{next, bank.version + 1};
}

// Read-then-write step against one bank. `read` must come from this bank's
// current version.
template <RealType Real>
MemoryBank<Real> memory_update(Tape<Real>& tape, const MemoryBank<Real>& bank,
                               Tensor<Real> e, const MemoryReadResult<Real>& read,
                               const MemoryParams<Real>& params,
                               WriteAggregation mode = WriteAggregation::attention) {
  if (read.bank_version != bank.version) {
    throw StateError("memory_update: read taken at bank version " +
                     std::to_string(read.bank_version) + ", bank is at version " +
                     std::to_string(bank.version));
  }
  return apply_write(tape, bank, propose_write(tape, std::move(e), read, params, mode));
}

}  // namespace lm2
