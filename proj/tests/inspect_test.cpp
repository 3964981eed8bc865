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
#include <filesystem>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include "gtest/gtest.h"
#include "lm2/inspect.hpp"
#include "test_support.hpp"

namespace lm2 {
namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.vocab_size = 512;
  c.d_model = 16;
  c.n_layers = 2;
  c.memory_blocks = 1;
  c.memory_slots = 12;
  c.n_heads = 2;
  c.n_kv_heads = 1;
  c.d_ff = 32;
  c.segment_len = 8;
  c.init_std = 0.3;
  c.gate_bias_init = 0.0;
  return c;
}

std::vector<Sample> probes(std::uint64_t seed, std::size_t n) {
  TaskSpec spec;
  spec.n_pairs = 3;
  spec.filler_len = 10;
  return generate_samples(seed, "probe", spec, n);
}

TEST(Heatmap, RowsAreDistributionsOverSlots) {
  Model<double> m(small_config());
  const auto prompt = probes(1, 1)[0].prompt();
  auto h = capture_heatmap(m, m.new_state(), prompt, 0);
  ASSERT_EQ(h.rows(), prompt.size());
  ASSERT_EQ(h.cols(), 12u);
  ASSERT_EQ(h.values.size(), h.rows() * h.cols());
  for (std::size_t t = 0; t < h.rows(); ++t) {
    double s = 0;
    for (std::size_t r = 0; r < h.cols(); ++r) s += h.at(t, r);
    EXPECT_NEAR(s, 1.0, 1e-5);
    EXPECT_EQ(h.row_labels[t], token_label(prompt[t]));
  }
  for (std::size_t r = 0; r < h.cols(); ++r) EXPECT_EQ(h.column_labels[r], r);
}

TEST(Heatmap, SingleSlotGivesAllOnesColumn) {
  auto c = small_config();
  c.memory_slots = 1;
  Model<float> m(c);
  auto h = capture_heatmap(m, m.new_state(), encode("k1 v2 f3 f4 <q> k1"), 0);
  ASSERT_EQ(h.cols(), 1u);
  for (double v : h.values) EXPECT_EQ(v, 1.0);
}

TEST(Heatmap, BlockWithoutMemoryIsConfigError) {
  Model<float> m(small_config());
  const auto tokens = encode("k1 v2");
  EXPECT_THROW(capture_heatmap(m, m.new_state(), tokens, 1), ConfigError);
  EXPECT_THROW(capture_heatmap(m, m.new_state(), tokens, 7), ConfigError);
  m.set_memory_enabled(false);
  EXPECT_THROW(capture_heatmap(m, m.new_state(), tokens, 0), ConfigError);
}

TEST(Heatmap, ExportIsObservationOnly) {
  Model<float> m(small_config());
  const auto prompt = probes(2, 1)[0].prompt();
  auto run = [&](bool with_export) {
    auto st = m.new_state();
    Tape<float> tape(false);
    auto first = m.ingest(tape, st, prompt);
    if (with_export) {
      const auto path = (std::filesystem::temp_directory_path() / "lm2_obs.tsv").string();
      const auto banks_before = st.banks[0].slots.data();
      const std::vector<float> copy(banks_before.begin(), banks_before.end());
      const auto pos = st.position;
      export_heatmap(m, st, prompt, 0, path);
      EXPECT_EQ(st.position, pos);
      EXPECT_TRUE(std::equal(copy.begin(), copy.end(), st.banks[0].slots.data().begin()));
    }
    auto second = m.forward_segment(tape, st, encode("<q> k3"));
    std::vector<float> out(first.data().begin(), first.data().end());
    out.insert(out.end(), second.data().begin(), second.data().end());
    return out;
  };
  EXPECT_EQ(run(false), run(true));
}

TEST(Heatmap, DecodingAdaptsTheAttention) {
  Model<float> m(small_config());
  const auto prompt = probes(3, 1)[0].prompt();
  const auto fresh = m.new_state();
  auto before = capture_heatmap(m, fresh, prompt, 0, 0);
  auto st = m.new_state();
  m.generate(st, prompt, 8);
  auto after = capture_heatmap(m, st, prompt, 0, 8);
  EXPECT_EQ(after.step, 8u);
  EXPECT_GT(heatmap_l1(before, after), 0.01);
  EXPECT_EQ(heatmap_l1(before, before), 0.0);
}

TEST(Heatmap, TextGridRoundTrips) {
  Model<double> m(small_config());
  auto h = capture_heatmap(m, m.new_state(), encode("k1 v2 f3 <q> k1"), 0);
  std::stringstream ss;
  write_heatmap(ss, h);
  std::string header;
  std::getline(std::stringstream(ss.str()), header);
  EXPECT_EQ(header.substr(0, 8), "token\t0\t");
  auto back = read_heatmap(ss);
  EXPECT_EQ(back.row_labels, h.row_labels);
  EXPECT_EQ(back.column_labels, h.column_labels);
  EXPECT_EQ(back.values, h.values);
  std::stringstream bad("token\t0\t1\nk1\t0.5\n");
  EXPECT_THROW(read_heatmap(bad), FormatError);
}

TEST(Heatmap, ShapeMismatchIsRejected) {
  HeatmapExport a, b;
  a.row_labels = {"x"};
  a.column_labels = {0};
  a.values = {1};
  EXPECT_THROW(heatmap_l1(a, b), ShapeMismatchError);
}

// Identity bank and zero query/key/value projections make every slot
// indistinguishable.
TEST(RankSlots, SymmetricModelTiesAndBreaksByIndex) {
  auto c = small_config();
  c.memory_slots = c.d_model;
  Model<double> m(c);
  auto& mem = *m.block(0).memory;
  for (auto* t : {&mem.w_query, &mem.w_key, &mem.w_value}) {
    for (auto& v : t->data()) v = 0;
  }
  auto all = score_slots(m, probes(4, 3));
  for (const auto& r : all) EXPECT_NEAR(r.relevance, all[0].relevance, 1e-6);
  auto ranking = rank_slots(m, probes(4, 3), 4);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(ranking.top[i].slot, i);
    EXPECT_EQ(ranking.bottom[i].slot, i);
  }
}

TEST(RankSlots, ScoresFollowASlotPermutation) {
  Model<double> m(small_config());
  std::mt19937_64 gen(5);
  auto start = m.new_state();
  start.banks[0].slots = testing::random_tensor({12, 16}, gen);
  std::vector<std::size_t> perm(12);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), gen);
  auto permuted = start;
  permuted.banks[0].slots = Tensor<double>({12, 16});
  for (std::size_t r = 0; r < 12; ++r)
    for (std::size_t c = 0; c < 16; ++c) permuted.banks[0].slots(perm[r], c) = start.banks[0].slots(r, c);

  const auto set = probes(6, 4);
  auto a = score_slots(m, set, 0, 5, &start);
  auto b = score_slots(m, set, 0, 5, &permuted);
  for (std::size_t r = 0; r < 12; ++r) {
    EXPECT_NEAR(a[r].relevance, b[perm[r]].relevance, 1e-6);
    EXPECT_EQ(a[r].top_tokens, b[perm[r]].top_tokens);
  }
}

TEST(RankSlots, ProbeOrderDoesNotMatter) {
  Model<float> m(small_config());
  auto set = probes(7, 6);
  auto a = score_slots(m, set);
  std::reverse(set.begin(), set.end());
  auto b = score_slots(m, set);
  for (std::size_t r = 0; r < a.size(); ++r) {
    EXPECT_EQ(a[r].relevance, b[r].relevance);
    EXPECT_EQ(a[r].top_tokens, b[r].top_tokens);
    EXPECT_EQ(a[r].negative_fraction, b[r].negative_fraction);
  }
}

TEST(RankSlots, ReportsAreWellFormed) {
  Model<float> m(small_config());
  const auto set = probes(8, 5);
  std::set<std::string> seen;
  for (const auto& s : set)
    for (int t : s.prompt()) seen.insert(token_label(t));
  auto ranking = rank_slots(m, set, 3);
  ASSERT_EQ(ranking.top.size(), 3u);
  ASSERT_EQ(ranking.bottom.size(), 3u);
  for (std::size_t i = 0; i + 1 < 3; ++i) {
    EXPECT_GE(ranking.top[i].relevance, ranking.top[i + 1].relevance);
    EXPECT_LE(ranking.bottom[i].relevance, ranking.bottom[i + 1].relevance);
  }
  for (const auto* list : {&ranking.top, &ranking.bottom}) {
    for (const auto& r : *list) {
      EXPECT_GE(r.relevance, 0.0);
      EXPECT_GE(r.negative_fraction, 0.0);
      EXPECT_LE(r.negative_fraction, 1.0);
      EXPECT_FALSE(r.top_tokens.empty());
      for (const auto& t : r.top_tokens) EXPECT_TRUE(seen.count(t)) << t;
    }
  }
  std::stringstream ss;
  write_slot_reports(ss, ranking);
  std::size_t lines = 0;
  for (std::string line; std::getline(ss, line); ++lines) {
    auto j = nlohmann::json::parse(line);
    EXPECT_TRUE(j.contains("relevance"));
    EXPECT_TRUE(j.contains("group"));
  }
  EXPECT_EQ(lines, 6u);
}

TEST(RankSlots, RejectsBadArguments) {
  Model<float> m(small_config());
  EXPECT_THROW(rank_slots(m, {}, 3), UsageError);
  EXPECT_THROW(rank_slots(m, probes(9, 1), 13), ConfigError);
  EXPECT_THROW(rank_slots(m, probes(9, 1), 0), ConfigError);
  EXPECT_THROW(rank_slots(m, probes(9, 1), 3, 1), ConfigError);
}

TEST(MemoryDelta, IdenticalStatesGiveZeros) {
  Model<float> m(small_config());
  auto st = m.new_state();
  m.generate(st, probes(10, 1)[0].prompt(), 2);
  auto rep = memory_delta(st, st);
  for (const auto& bank : rep.per_slot_l1)
    for (double x : bank) EXPECT_EQ(x, 0.0);
  EXPECT_TRUE(rep.top_changed.empty());
  EXPECT_EQ(rep.total(), 0.0);
}

TEST(MemoryDelta, IsSymmetric) {
  Model<float> m(small_config());
  auto a = m.new_state();
  auto b = m.new_state();
  m.generate(b, probes(11, 1)[0].prompt(), 3);
  auto ab = memory_delta(a, b, 4), ba = memory_delta(b, a, 4);
  EXPECT_EQ(ab.per_slot_l1, ba.per_slot_l1);
  ASSERT_EQ(ab.top_changed.size(), 4u);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(ab.top_changed[i].slot, ba.top_changed[i].slot);
    EXPECT_EQ(ab.top_changed[i].l1, ba.top_changed[i].l1);
  }
  EXPECT_GT(ab.total(), 0.0);
  EXPECT_NO_THROW(to_json(ab).dump());
}

TEST(MemoryDelta, ShapeMismatchIsRejected) {
  Model<float> m(small_config());
  auto c = small_config();
  c.memory_slots = 5;
  Model<float> other(c);
  EXPECT_THROW(memory_delta(m.new_state(), other.new_state()), ShapeMismatchError);
  SequenceState<float> empty;
  EXPECT_THROW(memory_delta(m.new_state(), empty), ShapeMismatchError);
}

// One token, top-1 read, input gate saturated open: only the slot that
// token attended to may change.
TEST(MemoryDelta, ForcedWriteChangesExactlyTheAttendedSlots) {
  const std::size_t d = 6, N = 6;
  auto p = MemoryParams<double>::init(d, 0.5, 0.0, 12, "mem.");
  for (auto& v : p.w_in.data()) v = 0;
  for (std::size_t i = 0; i < d; ++i) p.w_in(i, i) = 50.0;
  SequenceState<double> before;
  before.banks.push_back(init_bank<double>(N, d));
  Tensor<double> e({1, d}, 1.0);
  Tape<double> tape(false);
  auto read = memory_read(tape, e, before.banks[0], p, std::size_t{1});
  SequenceState<double> after = before;
  after.banks[0] = memory_update(tape, before.banks[0], e, read, p);
  std::set<std::size_t> attended;
  for (std::size_t r = 0; r < N; ++r)
    if (read.attention(0, r) > 0) attended.insert(r);
  ASSERT_EQ(attended.size(), 1u);
  auto rep = memory_delta(before, after, N);
  std::set<std::size_t> changed;
  for (const auto& s : rep.top_changed) changed.insert(s.slot);
  EXPECT_EQ(changed, attended);
}

}  // namespace
}  // namespace lm2
