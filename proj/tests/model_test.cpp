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

#include <algorithm>
#include <cmath>
#include <random>
#include <set>

#include "gtest/gtest.h"
#include "lm2/grad_check.hpp"
#include "lm2/model.hpp"
#include "test_support.hpp"

namespace lm2 {
namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.vocab_size = 32;
  c.d_model = 16;
  c.n_layers = 2;
  c.memory_blocks = 2;
  c.memory_slots = 16;
  c.n_heads = 4;
  c.n_kv_heads = 1;
  c.d_ff = 64;
  c.segment_len = 8;
  c.init_std = 0.2;
  c.gate_bias_init = 0.0;
  return c;
}

std::vector<int> random_tokens(std::mt19937_64& gen, std::size_t n, std::size_t vocab) {
  std::vector<int> t(n);
  for (auto& x : t) x = int(gen() % vocab);
  return t;
}

// Logits of every position, feeding `tokens` in segments of segment_len.
template <class Real>
std::vector<Tensor<Real>> run_segments(const Model<Real>& m, const std::vector<int>& tokens) {
  Tape<Real> tape(false);
  auto st = m.new_state();
  std::vector<Tensor<Real>> out;
  const std::size_t S = m.config().segment_len;
  for (std::size_t i = 0; i < tokens.size(); i += S) {
    const std::size_t n = std::min(S, tokens.size() - i);
    out.push_back(
        m.forward_segment(tape, st, std::vector<int>(tokens.begin() + i, tokens.begin() + i + n)));
  }
  return out;
}

TEST(ModelConfig, RejectsInvalidMemoryPlacement) {
  auto c = tiny_config();
  c.memory_blocks = 3;
  EXPECT_THROW(Model<float>{c}, ConfigError);
  c.memory_blocks = 0;
  EXPECT_THROW(Model<float>{c}, ConfigError);
  c = tiny_config();
  c.vocab_size = 1;
  EXPECT_THROW(Model<float>{c}, ConfigError);
}

TEST(Model, ParameterCountMatchesFormula) {
  std::mt19937_64 gen(1);
  for (int trial = 0; trial < 3; ++trial) {
    ModelConfig c;
    c.n_kv_heads = 1 + gen() % 2;
    c.n_heads = c.n_kv_heads * (1 + gen() % 3);
    c.d_model = c.n_heads * 2 * (1 + gen() % 4);
    c.d_ff = 4 * c.d_model;
    c.n_layers = 1 + gen() % 4;
    c.memory_blocks = 1 + gen() % c.n_layers;
    c.vocab_size = 10 + gen() % 50;
    c.tie_embeddings = trial == 1;
    Model<float> m(c);
    EXPECT_EQ(m.parameter_count(), analytic_parameter_count(c));
  }
}

TEST(Model, ParameterNamesAreUnique) {
  Model<float> m(tiny_config());
  std::set<std::string> names;
  for (const auto& [n, t] : m.parameters()) EXPECT_TRUE(names.insert(n).second) << n;
}

TEST(Model, MemoryOffEqualsVanillaStackBitwise) {
  auto c = tiny_config();
  c.segment_len = 4;
  Model<float> m(c);
  m.set_memory_enabled(false);
  auto vanilla = m.vanilla_twin();
  vanilla.set_memory_enabled(true);  // no memory parameters, so nothing to read
  std::mt19937_64 gen(3);
  for (int trial = 0; trial < 20; ++trial) {
    auto toks = random_tokens(gen, 1 + gen() % 11, c.vocab_size);
    auto a = run_segments(m, toks);
    auto b = run_segments(vanilla, toks);
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_TRUE(bitwise_equal(a[i], b[i]));
  }
}

TEST(Model, VanillaInitMatchesMemoryModelWeights) {
  // Per-tensor seeding: adding memory must not shift the other weights.
  auto c = tiny_config();
  Model<float> with_mem(c);
  auto p = with_mem.parameters();
  c.memory_blocks = 1;
  Model<float> fewer(c);
  for (const auto& [name, t] : fewer.parameters()) {
    auto it = std::find_if(p.begin(), p.end(), [&](const auto& kv) { return kv.first == name; });
    ASSERT_NE(it, p.end()) << name;
    EXPECT_TRUE(bitwise_equal(it->second, t)) << name;
  }
}

TEST(Model, ClosedGateApproachesMemoryOff) {
  auto c = tiny_config();
  c.gate_bias_init = -40.0;
  Model<float> m(c);
  std::mt19937_64 gen(5);
  auto toks = random_tokens(gen, 16, c.vocab_size);
  auto on = run_segments(m, toks);
  m.set_memory_enabled(false);
  auto off = run_segments(m, toks);
  for (std::size_t i = 0; i < on.size(); ++i) EXPECT_LE(max_abs_diff(on[i], off[i]), 1e-5);
}

TEST(Model, LaterTokensNeverChangeEarlierLogits) {
  auto c = tiny_config();
  c.segment_len = 4;
  Model<float> m(c);
  std::mt19937_64 gen(7);
  for (int trial = 0; trial < 10; ++trial) {
    auto toks = random_tokens(gen, 12, c.vocab_size);
    auto base = run_segments(m, toks);
    const std::size_t j = 1 + gen() % 11;
    auto pert = toks;
    pert[j] = (pert[j] + 1 + int(gen() % (c.vocab_size - 1))) % int(c.vocab_size);
    auto other = run_segments(m, pert);
    for (std::size_t pos = 0; pos < j; ++pos) {
      const std::size_t seg = pos / 4, row = pos % 4;
      for (std::size_t v = 0; v < c.vocab_size; ++v) {
        ASSERT_EQ(other[seg](row, v), base[seg](row, v)) << "pos " << pos << " perturbed " << j;
      }
    }
  }
}

TEST(Model, SegmentationInvariantOnlyWithoutMemory) {
  auto c = tiny_config();
  std::mt19937_64 gen(9);
  auto toks = random_tokens(gen, 8, c.vocab_size);
  auto split = [&](const Model<double>& m) {
    Tape<double> tape(false);
    auto st = m.new_state();
    auto a = m.forward_segment(tape, st, {toks.begin(), toks.begin() + 4});
    auto b = m.forward_segment(tape, st, {toks.begin() + 4, toks.end()});
    return ops::concat_rows(tape, a, b);
  };
  auto whole = [&](const Model<double>& m) {
    Tape<double> tape(false);
    auto st = m.new_state();
    return m.forward_segment(tape, st, toks);
  };
  Model<double> m(c);
  m.set_memory_enabled(false);
  EXPECT_LE(max_abs_diff(split(m), whole(m)), 1e-4);
  m.set_memory_enabled(true);
  // The second half reads a bank written after the first four tokens.
  EXPECT_GT(max_abs_diff(split(m), whole(m)), 1e-6);
}

TEST(Model, SingleTokenStepsUpdateTheBank) {
  auto c = tiny_config();
  c.segment_len = 1;
  Model<float> m(c);
  auto st = m.new_state();
  Tape<float> tape(false);
  for (int tok : {3, 17, 5, 29}) {
    auto before = st.banks[0].slots.clone();
    m.forward_segment(tape, st, {tok});
    double l1 = 0;
    for (std::size_t i = 0; i < before.size(); ++i)
      l1 += std::abs(double(st.banks[0].slots.data()[i]) - before.data()[i]);
    EXPECT_GT(l1, 0.0);
  }
  EXPECT_EQ(st.position, 4u);
  EXPECT_EQ(st.banks[0].version, 8u);  // two memory blocks write per step
}

TEST(Model, PerBlockModeKeepsOneBankPerMemoryBlock) {
  auto c = tiny_config();
  c.bank_mode = BankMode::per_block;
  Model<float> m(c);
  auto st = m.new_state();
  ASSERT_EQ(st.banks.size(), 2u);
  Tape<float> tape(false);
  m.forward_segment(tape, st, {1, 2, 3});
  EXPECT_EQ(st.banks[0].version, 1u);
  EXPECT_EQ(st.banks[1].version, 1u);
  EXPECT_GT(max_abs_diff(st.banks[0].slots, st.banks[1].slots), 0.0);
}

TEST(Model, RejectsBadSegments) {
  auto c = tiny_config();
  c.segment_len = 4;
  Model<float> m(c);
  auto st = m.new_state();
  Tape<float> tape(false);
  EXPECT_THROW(m.forward_segment(tape, st, {1, 2, 3, 4, 5}), DimensionError);
  EXPECT_THROW(m.forward_segment(tape, st, {1, 32}), TokenError);
  EXPECT_THROW(m.forward_segment(tape, st, {1, -1}), TokenError);
}

TEST(LmLoss, UniformLogitsGiveLogVocab) {
  Tape<double> tape(false);
  auto r = lm_loss(tape, Tensor<double>({5, 16}), {0, 3, 15, 7, 7});
  EXPECT_NEAR(r.loss.item(), std::log(16.0), 1e-12);
  EXPECT_NEAR(r.ppl, 16.0, 1e-9);
}

TEST(LmLoss, ConfidentCorrectLogitsGiveNearZeroLoss) {
  Tape<double> tape(false);
  Tensor<double> logits({3, 8});
  std::vector<int> y = {2, 0, 7};
  for (std::size_t r = 0; r < 3; ++r) logits(r, std::size_t(y[r])) = 40.0;
  EXPECT_LT(lm_loss(tape, logits, y).loss.item(), 1e-6);
}

TEST(LmLoss, MatchesIndependentLogSumExp) {
  std::mt19937_64 gen(11);
  auto logits = testing::random_tensor({6, 10}, gen, 5.0);
  std::vector<int> y = {1, 9, 0, 4, 4, 2};
  double expect = 0;
  for (std::size_t r = 0; r < 6; ++r) {
    long double s = 0;
    for (std::size_t j = 0; j < 10; ++j) s += std::exp((long double)logits(r, j));
    expect += double(std::log(s) - logits(r, std::size_t(y[r])));
  }
  Tape<double> tape(false);
  EXPECT_NEAR(lm_loss(tape, logits, y).loss.item(), expect / 6, 1e-6);
}

TEST(LmLoss, LengthMismatchThrows) {
  Tape<double> tape(false);
  EXPECT_THROW(lm_loss(tape, Tensor<double>({3, 4}), {0, 1}), DimensionError);
}

TEST(Generate, GreedyIsDeterministicAndEqualsZeroTemperature) {
  auto c = tiny_config();
  Model<float> m(c);
  std::vector<int> prompt = {4, 8, 15, 16, 23, 1, 2, 3, 4, 5, 6};
  auto s1 = m.new_state(), s2 = m.new_state(), s3 = m.new_state();
  auto a = m.generate(s1, prompt, 6);
  auto b = m.generate(s2, prompt, 6);
  Rng rng(1);
  auto z = m.generate(s3, prompt, 6, DecodeOptions{0.0}, &rng);
  EXPECT_EQ(a, b);
  EXPECT_EQ(a, z);
  EXPECT_EQ(a.size(), 6u);
  EXPECT_EQ(s1.position, prompt.size() + 5);
}

TEST(Generate, SampledTokensAreReproducibleFromSeed) {
  Model<float> m(tiny_config());
  auto s1 = m.new_state(), s2 = m.new_state();
  Rng r1(42), r2(42);
  EXPECT_EQ(m.generate(s1, {1, 2}, 10, {1.0}, &r1), m.generate(s2, {1, 2}, 10, {1.0}, &r2));
}

TEST(Generate, RejectsEmptyPromptAndZeroLength) {
  Model<float> m(tiny_config());
  auto st = m.new_state();
  EXPECT_THROW(m.generate(st, {}, 3), UsageError);
  EXPECT_THROW(m.generate(st, {1}, 0), UsageError);
}

TEST(Model, TinyFullModelPassesGradCheck) {
  auto c = tiny_config();
  c.segment_len = 3;  // two segments so the loss depends on a bank write
  c.precision = 64;
  Model<double> m(c);
  const std::vector<int> toks = {3, 14, 15, 9, 26, 5};
  const std::vector<int> targets = {14, 15, 9, 26, 5, 3};
  GradCheckOptions opt;
  opt.h = 1e-4;
  opt.tol = 1e-3;
  auto report = grad_check(
      [&](Tape<double>& t) {
        auto st = m.new_state();
        auto a = m.forward_segment(t, st, {toks.begin(), toks.begin() + 3});
        auto b = m.forward_segment(t, st, {toks.begin() + 3, toks.end()});
        return lm_loss(t, ops::concat_rows(t, a, b), targets).loss;
      },
      m.parameters(), opt);
  EXPECT_EQ(report.params.size(), m.parameters().size());
  for (const auto& pc : report.params) EXPECT_TRUE(pc.passed) << pc.name << " " << pc.max_rel_err;
}

}  // namespace
}  // namespace lm2
