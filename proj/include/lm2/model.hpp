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

// Full decoder: embeddings, L blocks (memory in the first k), final norm and
// LM head, plus the per-sequence segment protocol.
//
// Within a segment every memory block reads the bank as it stood at segment
// start. Proposed writes are collected and applied after the last block, in
// block order. With a shared bank the writes chain through one bank; in
// per_block mode block b owns bank b.

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "lm2/config.hpp"
#include "lm2/decoder.hpp"
#include "lm2/error.hpp"
#include "lm2/memory.hpp"
#include "lm2/ops.hpp"
#include "lm2/rng.hpp"
#include "lm2/tape.hpp"
#include "lm2/tensor.hpp"

namespace lm2 {

template <RealType Real>
struct SequenceState {
  std::vector<MemoryBank<Real>> banks;
  std::vector<KvCache<Real>> caches;  // one per block
  std::size_t position = 0;           // tokens consumed so far
};

template <RealType Real>
using ReadObserver = std::function<void(std::size_t block, const MemoryReadResult<Real>&)>;

template <RealType Real>
struct LossResult {
  Tensor<Real> loss;  // mean token cross-entropy, scalar
  double ppl = 0;
};

// Mean next-token cross-entropy over the rows of `logits`.
template <RealType Real>
LossResult<Real> lm_loss(Tape<Real>& tape, Tensor<Real> logits, const std::vector<int>& targets) {
  if (logits.rank() != 2 || targets.size() != logits.shape()[0]) {
    throw DimensionError("lm_loss: " + std::to_string(targets.size()) + " targets for logits " +
                         shape_string(logits.shape()));
  }
  auto loss = ops::cross_entropy(tape, logits, targets, Real(1) / Real(targets.size()));
  return {loss, std::exp(double(loss.item()))};
}

struct DecodeOptions {
  double temperature = 0.0;  // 0 selects greedy decoding
};

template <RealType Real>
class Model {
 public:
  using Named = std::vector<std::pair<std::string, Tensor<Real>>>;

  explicit Model(const ModelConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    const auto s = cfg_.block_shape();
    const std::uint64_t seed = cfg_.seed;
    embed_ = init_normal<Real>({cfg_.vocab_size, cfg_.d_model}, cfg_.init_std, Rng(seed, "embed"));
    embed_.set_requires_grad(true);
    for (std::size_t b = 0; b < cfg_.n_layers; ++b) {
      blocks_.push_back(BlockParams<Real>::init(s, b < cfg_.memory_blocks, cfg_.init_std,
                                                cfg_.gate_bias_init, seed, block_prefix(b)));
    }
    final_norm_ = Tensor<Real>({cfg_.d_model}, Real(1));
    final_norm_.set_requires_grad(true);
    if (!cfg_.tie_embeddings) {
      head_ = init_normal<Real>({cfg_.d_model, cfg_.vocab_size}, cfg_.init_std, Rng(seed, "head"));
      head_.set_requires_grad(true);
    }
  }

  const ModelConfig& config() const { return cfg_; }
  BlockShape shape() const { return cfg_.block_shape(); }

  bool memory_enabled() const { return cfg_.memory_enabled; }
  void set_memory_enabled(bool on) { cfg_.memory_enabled = on; }

  const BlockParams<Real>& block(std::size_t b) const { return blocks_.at(b); }
  BlockParams<Real>& block(std::size_t b) { return blocks_.at(b); }
  const Tensor<Real>& embedding() const { return embed_; }

  // Same attention/FFN/embedding tensors with the memory parameters removed.
  Model vanilla_twin() const {
    Model m = *this;
    for (auto& b : m.blocks_) b.memory.reset();
    return m;
  }

  // Stable names and order; checkpoints depend on both.
  Named parameters() const {
    Named out{{"embed", embed_}};
    for (std::size_t b = 0; b < blocks_.size(); ++b) {
      for (auto& kv : blocks_[b].named(block_prefix(b))) out.push_back(std::move(kv));
    }
    out.emplace_back("final_norm", final_norm_);
    if (head_.defined()) out.emplace_back("head", head_);
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : parameters()) n += t.size();
    return n;
  }

  SequenceState<Real> new_state() const {
    SequenceState<Real> st;
    for (std::size_t i = 0; i < cfg_.num_banks(); ++i) {
      st.banks.push_back(init_bank<Real>(cfg_.memory_slots, cfg_.d_model));
    }
    st.caches.resize(cfg_.n_layers);
    return st;
  }

  // Bank read by block b, or null for blocks without memory.
  static const MemoryBank<Real>* bank_for(const ModelConfig& cfg, const SequenceState<Real>& st,
                                          std::size_t b) {
    if (b >= cfg.memory_blocks) return nullptr;
    return &st.banks.at(cfg.bank_mode == BankMode::shared_threaded ? 0 : b);
  }

  // Runs one segment and returns the final-normed hidden states [T×d].
  Tensor<Real> forward_hidden(Tape<Real>& tape, SequenceState<Real>& st,
                              const std::vector<int>& tokens,
                              const ReadObserver<Real>* observer = nullptr) const {
    if (tokens.empty()) throw DimensionError("forward_segment: empty segment");
    if (tokens.size() > cfg_.segment_len) {
      throw DimensionError("forward_segment: segment of " + std::to_string(tokens.size()) +
                           " tokens exceeds segment_len " + std::to_string(cfg_.segment_len));
    }
    if (st.caches.size() != blocks_.size() || st.banks.size() != cfg_.num_banks()) {
      throw StateError("sequence state does not match the model configuration");
    }
    const auto s = shape();
    auto e = ops::embedding(tape, embed_, tokens);
    std::vector<std::pair<std::size_t, PendingWrite<Real>>> writes;
    for (std::size_t b = 0; b < blocks_.size(); ++b) {
      auto out = block_forward(tape, e, bank_for(cfg_, st, b), blocks_[b], s, cfg_.memory_enabled,
                               st.position, &st.caches[b]);
      if (out.read && observer) (*observer)(b, *out.read);
      if (out.proposed_update) writes.emplace_back(b, std::move(*out.proposed_update));
      e = out.e_next;
    }
    for (auto& [b, w] : writes) {
      auto& bank = st.banks[cfg_.bank_mode == BankMode::shared_threaded ? 0 : b];
      bank = apply_write(tape, bank, w);
    }
    st.position += tokens.size();
    return ops::rms_norm(tape, e, final_norm_, Real(cfg_.norm_eps));
  }

  Tensor<Real> head_logits(Tape<Real>& tape, Tensor<Real> hidden) const {
    return cfg_.tie_embeddings ? ops::matmul_nt(tape, hidden, embed_)
                               : ops::matmul(tape, hidden, head_);
  }

  Tensor<Real> forward_segment(Tape<Real>& tape, SequenceState<Real>& st,
                               const std::vector<int>& tokens,
                               const ReadObserver<Real>* observer = nullptr) const {
    return head_logits(tape, forward_hidden(tape, st, tokens, observer));
  }

  // Consumes `tokens` in segments of at most segment_len and returns the
  // logits of the last position only.
  Tensor<Real> ingest(Tape<Real>& tape, SequenceState<Real>& st,
                      const std::vector<int>& tokens) const {
    if (tokens.empty()) throw UsageError("cannot ingest an empty token sequence");
    Tensor<Real> hidden;
    for (std::size_t i = 0; i < tokens.size(); i += cfg_.segment_len) {
      const std::size_t n = std::min(cfg_.segment_len, tokens.size() - i);
      hidden = forward_hidden(tape, st,
                              std::vector<int>(tokens.begin() + i, tokens.begin() + i + n));
    }
    return head_logits(tape, ops::gather_rows(tape, hidden, {hidden.shape()[0] - 1}));
  }

  // Autoregressive decoding, one token per forward pass after the prompt.
  std::vector<int> generate(SequenceState<Real>& st, const std::vector<int>& prompt,
                            std::size_t max_new, const DecodeOptions& opt = {},
                            Rng* rng = nullptr) const {
    if (prompt.empty()) throw UsageError("generate: prompt is empty");
    if (max_new < 1) throw UsageError("generate: max_new must be at least 1");
    if (opt.temperature < 0) throw ConfigError("temperature: must be non-negative");
    if (opt.temperature > 0 && !rng) throw UsageError("generate: sampling needs an rng");
    Tape<Real> tape(false);
    auto logits = ingest(tape, st, prompt);
    std::vector<int> out;
    for (std::size_t i = 0; i < max_new; ++i) {
      out.push_back(pick(logits, opt, rng));
      if (i + 1 < max_new) logits = forward_segment(tape, st, {out.back()});
    }
    return out;
  }

  static int argmax(const Tensor<Real>& logits_row) {
    auto v = logits_row.data();
    std::size_t best = 0;
    for (std::size_t j = 1; j < v.size(); ++j)
      if (v[j] > v[best]) best = j;
    return int(best);
  }

 private:
  static std::string block_prefix(std::size_t b) { return "blocks." + std::to_string(b) + "."; }

  static int pick(const Tensor<Real>& logits, const DecodeOptions& opt, Rng* rng) {
    if (opt.temperature == 0.0) return argmax(logits);
    auto v = logits.data();
    double mx = -std::numeric_limits<double>::infinity();
    for (Real x : v) mx = std::max(mx, double(x));
    std::vector<double> w(v.size());
    for (std::size_t j = 0; j < v.size(); ++j) w[j] = std::exp((double(v[j]) - mx) / opt.temperature);
    std::discrete_distribution<int> dist(w.begin(), w.end());
    return dist(rng->engine());
  }

  ModelConfig cfg_;
  Tensor<Real> embed_;
  std::vector<BlockParams<Real>> blocks_;
  Tensor<Real> final_norm_;
  Tensor<Real> head_;  // undefined when tied
};

// Closed-form parameter count for a config.
inline std::size_t analytic_parameter_count(const ModelConfig& c) {
  const std::size_t d = c.d_model, V = c.vocab_size;
  const std::size_t kv = c.n_kv_heads * (d / c.n_heads);
  const std::size_t attention = 2 * d * d + 2 * d * kv;
  const std::size_t ffn = 3 * d * c.d_ff;
  const std::size_t norms = 2 * d;
  const std::size_t memory = 6 * d * d + d;
  return V * d + c.n_layers * (attention + ffn + norms) + c.memory_blocks * memory + d +
         (c.tie_embeddings ? 0 : d * V);
}

}  // namespace lm2
