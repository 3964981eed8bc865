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
#include <numeric>
#include <random>

#include "gtest/gtest.h"
#include "lm2/grad_check.hpp"
#include "lm2/memory.hpp"
#include "test_support.hpp"

namespace lm2 {
namespace {

using testing::random_tensor;
using T64 = Tensor<double>;

MemoryParams<double> random_params(std::size_t d, std::uint64_t seed, double std = 0.5) {
  return MemoryParams<double>::init(d, std, 0.0, seed, "mem.");
}

MemoryBank<double> random_bank(std::size_t n, std::size_t d, std::mt19937_64& gen) {
  return MemoryBank<double>{random_tensor({n, d}, gen), 0};
}

double inf_norm(const T64& t) {
  double m = 0;
  for (double v : t.data()) m = std::max(m, std::abs(v));
  return m;
}

TEST(InitBank, SquareBankIsIdentity) {
  auto bank = init_bank<double>(4, 4);
  EXPECT_TRUE(bitwise_equal(bank.slots, T64::identity(4)));
}

TEST(InitBank, RowsCycleThroughIdentity) {
  auto small = init_bank<double>(2, 4);
  EXPECT_TRUE(bitwise_equal(small.slots, T64::from_rows({{1, 0, 0, 0}, {0, 1, 0, 0}})));
  auto tall = init_bank<double>(6, 4);
  for (std::size_t r = 0; r < 6; ++r) {
    double row_sum = 0;
    for (std::size_t c = 0; c < 4; ++c) {
      EXPECT_EQ(tall.slots(r, c), c == r % 4 ? 1.0 : 0.0);
      row_sum += tall.slots(r, c);
    }
    EXPECT_EQ(row_sum, 1.0);
  }
}

TEST(MemoryRead, SingleSlotBroadcastsValue) {
  std::mt19937_64 gen(1);
  auto params = random_params(3, 2);
  auto bank = random_bank(1, 3, gen);
  Tape<double> tape(false);
  auto read = memory_read(tape, random_tensor({4, 3}, gen), bank, params);
  for (std::size_t t = 0; t < 4; ++t) {
    EXPECT_EQ(read.attention(t, 0), 1.0);
    for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(read.e_mem(t, c), read.values(0, c));
  }
}

TEST(MemoryRead, ZeroOutputGateHalvesRetrieval) {
  std::mt19937_64 gen(3);
  auto params = random_params(4, 4);
  params.w_out = T64({4, 4});
  params.b_out = T64({4});
  Tape<double> tape(false);
  auto read = memory_read(tape, random_tensor({3, 4}, gen), random_bank(5, 4, gen), params);
  for (std::size_t i = 0; i < read.g_out.size(); ++i) {
    EXPECT_EQ(read.g_out.data()[i], 0.5);
    EXPECT_EQ(read.e_gated.data()[i], 0.5 * read.e_mem.data()[i]);
  }
}

TEST(MemoryRead, MatchesStraightLineEvaluation) {
  // T=2, N=2, d=2 with hand-set weights.
  MemoryParams<double> p;
  p.w_query = T64::from_rows({{0.5, -1.0}, {2.0, 0.25}});
  p.w_key = T64::from_rows({{1.0, 0.5}, {-0.5, 1.5}});
  p.w_value = T64::from_rows({{0.3, 0.7}, {-1.2, 0.4}});
  p.w_out = T64::from_rows({{0.1, -0.2}, {0.3, 0.4}});
  p.b_out = T64({2}, std::vector<double>{0.05, -0.1});
  p.w_in = T64::identity(2);
  p.w_forget = T64::identity(2);
  MemoryBank<double> bank{T64::from_rows({{1.0, 0.2}, {-0.4, 0.9}}), 0};
  auto e = T64::from_rows({{0.6, -0.3}, {1.1, 0.8}});

  Tape<double> tape(false);
  auto read = memory_read(tape, e, bank, p);

  // Independent dense evaluation.
  double Q[2][2], K[2][2], V[2][2];
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 2; ++j) {
      Q[i][j] = e(i, 0) * p.w_query(0, j) + e(i, 1) * p.w_query(1, j);
      K[i][j] = bank.slots(i, 0) * p.w_key(0, j) + bank.slots(i, 1) * p.w_key(1, j);
      V[i][j] = bank.slots(i, 0) * p.w_value(0, j) + bank.slots(i, 1) * p.w_value(1, j);
    }
  for (int t = 0; t < 2; ++t) {
    double s[2];
    for (int r = 0; r < 2; ++r) s[r] = (Q[t][0] * K[r][0] + Q[t][1] * K[r][1]) / std::sqrt(2.0);
    const double z = std::exp(s[0]) + std::exp(s[1]);
    const double a[2] = {std::exp(s[0]) / z, std::exp(s[1]) / z};
    for (int c = 0; c < 2; ++c) {
      const double mem = a[0] * V[0][c] + a[1] * V[1][c];
      EXPECT_NEAR(read.e_mem(t, c), mem, 1e-6);
      EXPECT_NEAR(read.attention(t, c), a[c], 1e-6);
    }
    for (int c = 0; c < 2; ++c) {
      const double pre = read.e_mem(t, 0) * p.w_out(0, c) + read.e_mem(t, 1) * p.w_out(1, c) +
                         p.b_out.data()[c];
      const double g = 1.0 / (1.0 + std::exp(-pre));
      EXPECT_NEAR(read.g_out(t, c), g, 1e-6);
      EXPECT_NEAR(read.e_gated(t, c), g * read.e_mem(t, c), 1e-6);
    }
  }
}

TEST(MemoryRead, WidthMismatchIsDimensionError) {
  Tape<double> tape;
  auto params = random_params(4, 1);
  EXPECT_THROW(memory_read(tape, T64({2, 3}), init_bank<double>(4, 4), params),
               DimensionError);
}

TEST(MemoryRead, ClosedOutputGateSilencesMemoryIn32Bit) {
  std::mt19937_64 gen(5);
  auto params = MemoryParams<float>::init(8, 0.5, -40.0, 9, "m.");
  MemoryBank<float> bank{random_tensor<float>({6, 8}, gen), 0};
  Tape<float> tape(false);
  auto read = memory_read(tape, random_tensor<float>({5, 8}, gen), bank, params);
  for (float v : read.e_gated.data()) EXPECT_NEAR(v, 0.0f, 1e-7f);
}

TEST(MemoryRead, SlotOrderIsPositionless) {
  std::mt19937_64 gen(7);
  auto params = random_params(4, 11);
  auto bank = random_bank(6, 4, gen);
  auto e = random_tensor({3, 4}, gen);
  std::vector<std::size_t> perm(6);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), gen);
  MemoryBank<double> permuted{T64({6, 4}), 0};
  for (std::size_t r = 0; r < 6; ++r)
    for (std::size_t c = 0; c < 4; ++c) permuted.slots(r, c) = bank.slots(perm[r], c);

  Tape<double> tape(false);
  auto a = memory_read(tape, e, bank, params);
  auto b = memory_read(tape, e, permuted, params);
  EXPECT_LE(max_abs_diff(a.e_mem, b.e_mem), 1e-6);
  for (std::size_t t = 0; t < 3; ++t)
    for (std::size_t r = 0; r < 6; ++r)
      EXPECT_NEAR(b.attention(t, r), a.attention(t, perm[r]), 1e-12);
}

TEST(Gate, ZeroInputIsOneHalf) {
  auto params = random_params(3, 13);
  params.b_out = T64({3});
  Tape<double> tape(false);
  for (auto kind : {GateKind::input, GateKind::forget, GateKind::output}) {
    auto g = gate(tape, T64({2, 3}), kind, params);
    for (double v : g.data()) EXPECT_EQ(v, 0.5);
  }
}

TEST(Gate, LargeInputsStayInsideOpenUnitInterval) {
  std::mt19937_64 gen(15);
  auto params = MemoryParams<float>::init(6, 1.0, 0.0, 17, "m.");
  Tape<float> tape(false);
  auto x = random_tensor<float>({4, 6}, gen, 1e3);
  for (auto kind : {GateKind::input, GateKind::forget, GateKind::output}) {
    auto g = gate(tape, x, kind, params);
    for (float v : g.data()) {
      EXPECT_GT(v, 0.0f);
      EXPECT_LT(v, 1.0f);
    }
  }
}

TEST(Gate, IncreasingInputWithPositiveWeightIncreasesGate) {
  std::mt19937_64 gen(19);
  auto params = random_params(4, 21);
  params.w_in(2, 1) = 0.8;  // positive weight from coordinate 2 into gate column 1
  auto x = random_tensor({1, 4}, gen);
  Tape<double> tape(false);
  const double eps = 1e-3;
  auto lo = x.clone();
  lo(0, 2) -= eps;
  auto hi = x.clone();
  hi(0, 2) += eps;
  const double g_lo = gate(tape, lo, GateKind::input, params)(0, 1);
  const double g_mid = gate(tape, x, GateKind::input, params)(0, 1);
  const double g_hi = gate(tape, hi, GateKind::input, params)(0, 1);
  EXPECT_LT(g_lo, g_mid);
  EXPECT_LT(g_mid, g_hi);
}

// Params whose gates saturate for positive inputs and positive E_mem.
MemoryParams<double> saturating_params(std::size_t d, double in_sign, double forget_sign) {
  MemoryParams<double> p = random_params(d, 23, 0.1);
  p.w_value = T64({d, d}, 0.5);
  p.w_in = T64({d, d}, 100.0 * in_sign);
  p.w_forget = T64({d, d}, 100.0 * forget_sign);
  return p;
}

TEST(MemoryUpdate, ClosedInputOpenForgetRetainsBank) {
  std::mt19937_64 gen(25);
  std::uniform_real_distribution<double> pos(0.1, 1.0);
  T64 m({5, 4});
  for (auto& v : m.data()) v = pos(gen);
  T64 e({3, 4});
  for (auto& v : e.data()) v = pos(gen);
  MemoryBank<double> bank{m, 0};
  auto p = saturating_params(4, -1.0, +1.0);
  Tape<double> tape(false);
  auto read = memory_read(tape, e, bank, p);
  auto next = memory_update(tape, bank, e, read, p);
  EXPECT_LE(max_abs_diff(next.slots, bank.slots), 1e-6);
  EXPECT_EQ(next.version, bank.version + 1);
}

TEST(MemoryUpdate, OpenInputClosedForgetWritesBoundedContent) {
  std::mt19937_64 gen(27);
  std::uniform_real_distribution<double> pos(0.1, 1.0);
  T64 m({5, 4});
  for (auto& v : m.data()) v = pos(gen);
  T64 e({3, 4});
  for (auto& v : e.data()) v = pos(gen);
  MemoryBank<double> bank{m, 0};
  auto p = saturating_params(4, +1.0, -1.0);
  Tape<double> tape(false);
  auto read = memory_read(tape, e, bank, p);
  auto next = memory_update(tape, bank, e, read, p);
  for (std::size_t r = 0; r < 5; ++r) {
    double mass = 0;
    for (std::size_t t = 0; t < 3; ++t) mass += read.attention(t, r);
    for (std::size_t c = 0; c < 4; ++c) {
      double expect = 0;
      for (std::size_t t = 0; t < 3; ++t)
        expect += read.attention(t, r) / (mass + kWriteEps) * std::tanh(read.e_mem(t, c));
      EXPECT_NEAR(next.slots(r, c), expect, 1e-6);
      EXPECT_GT(next.slots(r, c), -1.0);
      EXPECT_LT(next.slots(r, c), 1.0);
    }
  }
}

TEST(MemoryUpdate, SingleTokenReducesToPerSlotRecurrence) {
  std::mt19937_64 gen(29);
  auto p = random_params(4, 31);
  auto bank = random_bank(6, 4, gen);
  auto e = random_tensor({1, 4}, gen);
  Tape<double> tape(false);
  auto read = memory_read(tape, e, bank, p);
  auto next = memory_update(tape, bank, e, read, p);
  auto g_in = gate(tape, e, GateKind::input, p);
  auto g_f = gate(tape, read.e_mem, GateKind::forget, p);
  for (std::size_t r = 0; r < 6; ++r)
    for (std::size_t c = 0; c < 4; ++c) {
      const double literal =
          g_in(0, c) * std::tanh(read.e_mem(0, c)) + g_f(0, c) * bank.slots(r, c);
      EXPECT_NEAR(next.slots(r, c), literal, 1e-6);
    }
}

TEST(MemoryUpdate, TopKWriteLeavesUnattendedSlotsUntouched) {
  std::mt19937_64 gen(41);
  auto p = random_params(4, 43);
  auto bank = random_bank(6, 4, gen);
  auto e = random_tensor({2, 4}, gen);
  Tape<double> tape(false);
  auto read = memory_read(tape, e, bank, p, std::size_t{1});
  auto next = memory_update(tape, bank, e, read, p);
  std::size_t changed = 0;
  for (std::size_t r = 0; r < 6; ++r) {
    const bool attended = read.attention(0, r) > 0 || read.attention(1, r) > 0;
    bool differs = false;
    for (std::size_t c = 0; c < 4; ++c) differs |= next.slots(r, c) != bank.slots(r, c);
    EXPECT_EQ(differs, attended) << "slot " << r;
    changed += differs;
  }
  EXPECT_GE(changed, 1u);
  EXPECT_LE(changed, 2u);
}

TEST(MemoryUpdate, StaleReadIsStateError) {
  std::mt19937_64 gen(33);
  auto p = random_params(4, 35);
  auto bank = random_bank(3, 4, gen);
  auto e = random_tensor({2, 4}, gen);
  Tape<double> tape(false);
  auto read = memory_read(tape, e, bank, p);
  auto next = memory_update(tape, bank, e, read, p);
  EXPECT_THROW(memory_update(tape, next, e, read, p), StateError);
}

TEST(MemoryUpdate, MeanAggregationUsesUniformWeights) {
  std::mt19937_64 gen(37);
  auto p = random_params(3, 39);
  auto bank = random_bank(4, 3, gen);
  auto e = random_tensor({5, 3}, gen);
  Tape<double> tape(false);
  auto read = memory_read(tape, e, bank, p);
  auto next = memory_update(tape, bank, e, read, p, WriteAggregation::mean);
  auto g_in = gate(tape, e, GateKind::input, p);
  auto g_f = gate(tape, read.e_mem, GateKind::forget, p);
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t c = 0; c < 3; ++c) {
      double cand = 0, keep = 0;
      for (std::size_t t = 0; t < 5; ++t) {
        cand += g_in(t, c) * std::tanh(read.e_mem(t, c)) / 5.0;
        keep += g_f(t, c) / 5.0;
      }
      EXPECT_NEAR(next.slots(r, c), cand + keep * bank.slots(r, c), 1e-12);
    }
}

TEST(MemoryInvariants, RandomUpdatesRespectBounds) {
  std::mt19937_64 gen(41);
  std::uniform_int_distribution<std::size_t> ext(1, 9);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t T = ext(gen), N = ext(gen), d = ext(gen);
    auto p = MemoryParams<float>::init(d, 1.0, -4.0, gen(), "m.");
    MemoryBank<float> bank{random_tensor<float>({N, d}, gen, 3.0), 0};
    auto e = random_tensor<float>({T, d}, gen, 2.0);
    Tape<float> tape(false);
    auto read = memory_read(tape, e, bank, p);
    for (std::size_t t = 0; t < T; ++t) {
      double s = 0;
      for (std::size_t r = 0; r < N; ++r) s += read.attention(t, r);
      ASSERT_NEAR(s, 1.0, 1e-5);
    }
    auto w = write_weights(tape, read, WriteAggregation::attention);
    for (std::size_t r = 0; r < N; ++r) {
      double mass = 0, col = 0;
      for (std::size_t t = 0; t < T; ++t) {
        mass += read.attention(t, r);
        col += w(t, r);
      }
      if (mass >= 1e-3) {
        ASSERT_GE(col, 1.0 - 1e-4);
        ASSERT_LE(col, 1.0 + 1e-6);
      }
    }
    auto next = memory_update(tape, bank, e, read, p);
    ASSERT_LE(inf_norm(next.slots.cast<double>()),
              inf_norm(bank.slots.cast<double>()) + 1.0 + 1e-6);
  }
}

TEST(MemoryGradients, EveryParameterReceivesGradient) {
  std::mt19937_64 gen(43);
  auto p = random_params(4, 45);
  auto bank = random_bank(5, 4, gen);
  auto e = random_tensor({3, 4}, gen);
  Tape<double> tape;
  auto read = memory_read(tape, e, bank, p);
  auto next = memory_update(tape, bank, e, read, p);
  auto w1 = random_tensor({3, 4}, gen);
  auto w2 = random_tensor({5, 4}, gen);
  tape.backward(ops::add(tape, ops::dot_const(tape, read.e_gated, w1),
                         ops::dot_const(tape, next.slots, w2)));
  for (auto& [name, t] : p.named("")) {
    ASSERT_TRUE(t.has_grad()) << name;
    const bool any = std::any_of(t.grad().begin(), t.grad().end(),
                                 [](double g) { return g != 0.0; });
    EXPECT_TRUE(any) << name;
  }
}

TEST(MemoryGradients, ReadAndUpdatePassGradCheck) {
  std::mt19937_64 gen(47);
  auto p = random_params(4, 49);
  auto bank = random_bank(5, 4, gen);
  auto e = random_tensor({3, 4}, gen);
  auto w1 = random_tensor({3, 4}, gen);
  auto w2 = random_tensor({5, 4}, gen);
  std::vector<NamedParam> params = p.named("");
  params.emplace_back("e", e);
  params.emplace_back("bank", bank.slots);
  GradCheckOptions opt;
  opt.h = 1e-5;
  opt.tol = 1e-5;
  auto report = grad_check(
      [&](Tape<double>& t) {
        auto read = memory_read(t, e, bank, p);
        auto next = memory_update(t, bank, e, read, p);
        return ops::add(t, ops::dot_const(t, read.e_gated, w1),
                        ops::dot_const(t, next.slots, w2));
      },
      params, opt);
  for (const auto& pc : report.params) EXPECT_TRUE(pc.passed) << pc.name << " " << pc.max_rel_err;
}

}  // namespace
}  // namespace lm2
