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

// One decoder block with an optional memory path:
//
//   E_attn = E + Attn(RMSNorm(E))            causal, rotary, grouped KV
//   E_skip = E_attn + g_out ⊙ E_mem(E, M)    memory read uses the raw block input
//   E_next = E_skip + FFN(RMSNorm(E_skip))   SwiGLU
//
// The block only proposes a bank write; the model applies it after the
// segment so reads never observe writes from the same segment.

#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "lm2/error.hpp"
#include "lm2/memory.hpp"
#include "lm2/ops.hpp"
#include "lm2/tape.hpp"
#include "lm2/tensor.hpp"

namespace lm2 {

struct BlockShape {
  std::size_t d = 64;
  std::size_t n_heads = 4;
  std::size_t n_kv_heads = 1;
  std::size_t d_ff = 256;
  double rope_base = 10000.0;
  double norm_eps = 1e-5;
  std::optional<std::size_t> top_k;  // memory read; disabled when empty
  WriteAggregation aggregation = WriteAggregation::attention;

  std::size_t head_dim() const { return d / n_heads; }
  std::size_t kv_width() const { return n_kv_heads * head_dim(); }

  void validate() const {
    if (d == 0 || n_heads == 0 || n_kv_heads == 0 || d_ff == 0) {
      throw ConfigError("block dimensions must be positive");
    }
    if (d % n_heads != 0) {
      throw ConfigError("d_model=" + std::to_string(d) + " not divisible by n_heads=" +
                        std::to_string(n_heads));
    }
    if (n_heads % n_kv_heads != 0) {
      throw ConfigError("n_heads=" + std::to_string(n_heads) +
                        " not divisible by n_kv_heads=" + std::to_string(n_kv_heads));
    }
    if (head_dim() % 2 != 0) {
      throw ConfigError("head dimension " + std::to_string(head_dim()) +
                        " must be even for rotary embeddings");
    }
  }
};

template <RealType Real>
struct BlockParams {
  Tensor<Real> attn_norm;                // [d]
  Tensor<Real> w_q, w_k, w_v, w_o;       // [d×d], [d×kv], [d×kv], [d×d]
  Tensor<Real> ffn_norm;                 // [d]
  Tensor<Real> w_gate, w_up, w_down;     // [d×d_ff], [d×d_ff], [d_ff×d]
  std::optional<MemoryParams<Real>> memory;

  static BlockParams init(const BlockShape& s, bool with_memory, double stddev,
                          double gate_bias, std::uint64_t seed, const std::string& prefix) {
    s.validate();
    auto w = [&](const char* name, Shape shape) {
      return init_normal<Real>(std::move(shape), stddev, Rng(seed, prefix + name));
    };
    BlockParams p;
    p.attn_norm = Tensor<Real>({s.d}, Real(1));
    p.w_q = w("w_q", {s.d, s.d});
    p.w_k = w("w_k", {s.d, s.kv_width()});
    p.w_v = w("w_v", {s.d, s.kv_width()});
    p.w_o = w("w_o", {s.d, s.d});
    p.ffn_norm = Tensor<Real>({s.d}, Real(1));
    p.w_gate = w("w_gate", {s.d, s.d_ff});
    p.w_up = w("w_up", {s.d, s.d_ff});
    p.w_down = w("w_down", {s.d_ff, s.d});
    if (with_memory) {
      p.memory = MemoryParams<Real>::init(s.d, stddev, gate_bias, seed, prefix + "mem.");
    }
    for (auto& [name, t] : p.named("")) t.set_requires_grad(true);
    return p;
  }

  std::vector<std::pair<std::string, Tensor<Real>>> named(const std::string& prefix) const {
    std::vector<std::pair<std::string, Tensor<Real>>> out = {
        {prefix + "attn_norm", attn_norm}, {prefix + "w_q", w_q},
        {prefix + "w_k", w_k},             {prefix + "w_v", w_v},
        {prefix + "w_o", w_o},             {prefix + "ffn_norm", ffn_norm},
        {prefix + "w_gate", w_gate},       {prefix + "w_up", w_up},
        {prefix + "w_down", w_down}};
    if (memory) {
      for (auto& kv : memory->named(prefix + "mem.")) out.push_back(std::move(kv));
    }
    return out;
  }
};

// Rotated keys and values of every position consumed so far.
template <RealType Real>
struct KvCache {
  Tensor<Real> keys;    // [length × kv_width], undefined while empty
  Tensor<Real> values;
  std::size_t length = 0;
};

template <RealType Real>
Tensor<Real> causal_self_attention(Tape<Real>& tape, Tensor<Real> e,
                                   const BlockParams<Real>& p, const BlockShape& s,
                                   std::size_t pos_offset, KvCache<Real>* cache = nullptr) {
  if (e.rank() != 2 || e.shape()[1] != s.d) {
    throw DimensionError("attention input " + shape_string(e.shape()) +
                         " for d_model=" + std::to_string(s.d));
  }
  if (cache) {
    if (cache->length != pos_offset) {
      throw StateError("kv cache holds " + std::to_string(cache->length) +
                       " positions but segment starts at " + std::to_string(pos_offset));
    }
    if (cache->length > 0 &&
        (cache->keys.shape() != Shape{cache->length, s.kv_width()} ||
         cache->values.shape() != cache->keys.shape())) {
      throw DimensionError("kv cache shape " + shape_string(cache->keys.shape()) +
                           " inconsistent with kv width " + std::to_string(s.kv_width()));
    }
  }
  const Real eps = Real(s.norm_eps);
  auto x = ops::rms_norm(tape, e, p.attn_norm, eps);
  auto q = ops::rope_apply(tape, ops::matmul(tape, x, p.w_q), s.n_heads, pos_offset, s.rope_base);
  auto k = ops::rope_apply(tape, ops::matmul(tape, x, p.w_k), s.n_kv_heads, pos_offset,
                           s.rope_base);
  auto v = ops::matmul(tape, x, p.w_v);
  if (cache) {
    if (cache->length > 0) {
      k = ops::concat_rows(tape, cache->keys, k);
      v = ops::concat_rows(tape, cache->values, v);
    }
    cache->keys = k;
    cache->values = v;
    cache->length = k.shape()[0];
  }
  auto att = ops::causal_attention(tape, q, k, v, s.n_heads, s.n_kv_heads);
  return ops::add(tape, e, ops::matmul(tape, att, p.w_o));
}

template <RealType Real>
Tensor<Real> swiglu_ffn(Tape<Real>& tape, Tensor<Real> x, const BlockParams<Real>& p,
                        const BlockShape& s) {
  auto h = ops::rms_norm(tape, x, p.ffn_norm, Real(s.norm_eps));
  auto gated = ops::mul(tape, ops::silu(tape, ops::matmul(tape, h, p.w_gate)),
                        ops::matmul(tape, h, p.w_up));
  return ops::add(tape, x, ops::matmul(tape, gated, p.w_down));
}

template <RealType Real>
struct BlockOutput {
  Tensor<Real> e_next;
  std::optional<MemoryReadResult<Real>> read;
  std::optional<PendingWrite<Real>> proposed_update;
};

// `bank` may be null (or memory disabled, or the block has no memory
// parameters), in which case the block is a plain decoder block.
template <RealType Real>
BlockOutput<Real> block_forward(Tape<Real>& tape, Tensor<Real> e,
                                const MemoryBank<Real>* bank, const BlockParams<Real>& p,
                                const BlockShape& s, bool memory_enabled,
                                std::size_t pos_offset, KvCache<Real>* cache = nullptr) {
  BlockOutput<Real> out;
  auto e_skip = causal_self_attention(tape, e, p, s, pos_offset, cache);
  if (memory_enabled && bank && p.memory) {
    out.read = memory_read(tape, e, *bank, *p.memory, s.top_k);
    e_skip = ops::add(tape, e_skip, out.read->e_gated);
    out.proposed_update = propose_write(tape, e, *out.read, *p.memory, s.aggregation);
  }
  out.e_next = swiglu_ffn(tape, e_skip, p, s);
  return out;
}

}  // namespace lm2
