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

// Read-only memory analysis: token-to-slot attention heatmaps, slot
// relevance ranking and bank deltas. Nothing here mutates a model or a
// caller's sequence state; probes run on copies.

#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "lm2/config.hpp"
#include "lm2/error.hpp"
#include "lm2/model.hpp"
#include "lm2/tasks.hpp"

namespace lm2 {

// Vocabulary word for ids the standard vocabulary knows, "#<id>" otherwise.
inline std::string token_label(int id) {
  const auto& v = Vocab::standard();
  if (id >= 0 && std::size_t(id) < v.size()) return v.word(id);
  return "#" + std::to_string(id);
}

// Order-independent sum: the same multiset of terms always gives the same
// bits, whatever order the probes arrived in.
inline double stable_sum(std::vector<double> terms) {
  std::sort(terms.begin(), terms.end());
  double s = 0;
  for (double x : terms) s += x;
  return s;
}

struct HeatmapExport {
  std::size_t block = 0;
  std::size_t step = 0;  // decode steps taken before the capture
  std::vector<std::string> row_labels;
  std::vector<std::size_t> column_labels;
  std::vector<double> values;  // rows × columns, row-major
  std::string normalization = "softmax-over-slots";

  std::size_t rows() const { return row_labels.size(); }
  std::size_t cols() const { return column_labels.size(); }
  double at(std::size_t t, std::size_t r) const { return values.at(t * cols() + r); }
};

namespace inspect_detail {

template <RealType Real>
void require_memory_block(const Model<Real>& model, std::size_t block) {
  const auto& c = model.config();
  if (block >= c.n_layers) {
    throw ConfigError("block " + std::to_string(block) + " does not exist (n_layers " +
                      std::to_string(c.n_layers) + ")");
  }
  if (!model.memory_enabled() || block >= c.memory_blocks || !model.block(block).memory) {
    throw ConfigError("block " + std::to_string(block) + " has no memory module");
  }
}

// Feeds `tokens` segment by segment through a copy of `state`, handing each
// read of `block` to `sink`.
template <RealType Real, class Sink>
void probe_reads(const Model<Real>& model, const SequenceState<Real>& state,
                 const std::vector<int>& tokens, std::size_t block, Sink&& sink) {
  if (tokens.empty()) throw UsageError("inspect: probe token sequence is empty");
  SequenceState<Real> scratch = state;
  Tape<Real> tape(false);
  const std::size_t S = model.config().segment_len;
  for (std::size_t i = 0; i < tokens.size(); i += S) {
    const std::vector<int> seg(tokens.begin() + long(i),
                               tokens.begin() + long(std::min(tokens.size(), i + S)));
    ReadObserver<Real> obs = [&](std::size_t b, const MemoryReadResult<Real>& r) {
      if (b == block) sink(seg, r);
    };
    model.forward_hidden(tape, scratch, seg, &obs);
  }
}

}  // namespace inspect_detail

// Captures the read attention A of `block` while `tokens` are fed from
// `state`. The state itself is left untouched.
template <RealType Real>
HeatmapExport capture_heatmap(const Model<Real>& model, const SequenceState<Real>& state,
                              const std::vector<int>& tokens, std::size_t block,
                              std::size_t step = 0) {
  inspect_detail::require_memory_block(model, block);
  HeatmapExport h;
  h.block = block;
  h.step = step;
  const std::size_t N = model.config().memory_slots;
  for (std::size_t r = 0; r < N; ++r) h.column_labels.push_back(r);
  inspect_detail::probe_reads(
      model, state, tokens, block,
      [&](const std::vector<int>& seg, const MemoryReadResult<Real>& read) {
        for (std::size_t t = 0; t < seg.size(); ++t) {
          h.row_labels.push_back(token_label(seg[t]));
          for (std::size_t r = 0; r < N; ++r) h.values.push_back(double(read.attention(t, r)));
        }
      });
  return h;
}

// Grid text: a header of column labels, then per token its label, a tab and
// the N attention values.
inline void write_heatmap(std::ostream& out, const HeatmapExport& h) {
  out << "token";
  for (std::size_t c : h.column_labels) out << '\t' << c;
  out << '\n';
  for (std::size_t t = 0; t < h.rows(); ++t) {
    out << h.row_labels[t];
    for (std::size_t r = 0; r < h.cols(); ++r) out << '\t' << config_detail::format_double(h.at(t, r));
    out << '\n';
  }
}

inline void write_heatmap(const std::string& path, const HeatmapExport& h) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot write heatmap '" + path + "'");
  write_heatmap(f, h);
  if (!f) throw IoError("short write to '" + path + "'");
}

inline HeatmapExport read_heatmap(std::istream& in) try {
  HeatmapExport h;
  std::string line;
  if (!std::getline(in, line)) throw FormatError("heatmap: missing header line");
  {
    std::istringstream ss(line);
    std::string cell;
    std::getline(ss, cell, '\t');
    while (std::getline(ss, cell, '\t')) {
      h.column_labels.push_back(std::size_t(config_detail::parse_u64("heatmap column", cell)));
    }
  }
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string cell;
    std::getline(ss, cell, '\t');
    h.row_labels.push_back(cell);
    std::size_t n = 0;
    for (; std::getline(ss, cell, '\t'); ++n) {
      h.values.push_back(config_detail::parse_double("heatmap value", cell));
    }
    if (n != h.cols()) {
      throw FormatError("heatmap row '" + h.row_labels.back() + "' has " + std::to_string(n) +
                        " values, expected " + std::to_string(h.cols()));
    }
  }
  return h;
} catch (const ConfigError& e) {
  throw FormatError(e.what());
}

template <RealType Real>
HeatmapExport export_heatmap(const Model<Real>& model, const SequenceState<Real>& state,
                             const std::vector<int>& tokens, std::size_t block,
                             const std::string& path, std::size_t step = 0) {
  auto h = capture_heatmap(model, state, tokens, block, step);
  write_heatmap(path, h);
  return h;
}

// Summed absolute difference of two equally shaped heatmaps.
inline double heatmap_l1(const HeatmapExport& a, const HeatmapExport& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeMismatchError("heatmaps " + std::to_string(a.rows()) + "x" +
                             std::to_string(a.cols()) + " and " + std::to_string(b.rows()) +
                             "x" + std::to_string(b.cols()));
  }
  double s = 0;
  for (std::size_t i = 0; i < a.values.size(); ++i) s += std::abs(a.values[i] - b.values[i]);
  return s;
}

struct SlotReport {
  std::size_t slot = 0;
  double relevance = 0;                 // mean over probe tokens of A[t,r]·‖V[r]‖
  std::vector<std::string> top_tokens;  // most attention mass first
  double negative_fraction = 0;         // share of negative read contributions
};

struct SlotRanking {
  std::size_t block = 0;
  std::vector<SlotReport> top;     // highest relevance first
  std::vector<SlotReport> bottom;  // lowest relevance first
};

// Relevance statistics for every slot of `block`, in slot order. Each probe
// prompt is fed from a copy of `start` (a fresh state when null).
template <RealType Real>
std::vector<SlotReport> score_slots(const Model<Real>& model, const std::vector<Sample>& probes,
                                    std::size_t block = 0, std::size_t top_tokens = 5,
                                    const SequenceState<Real>* start = nullptr) {
  inspect_detail::require_memory_block(model, block);
  if (probes.empty()) throw UsageError("rank_slots: probe set is empty");
  const std::size_t N = model.config().memory_slots;
  const SequenceState<Real> fresh = start ? *start : model.new_state();

  std::vector<std::vector<double>> contrib(N);
  std::vector<std::vector<std::pair<int, double>>> mass(N);
  std::vector<std::size_t> negative(N, 0), counted(N, 0);
  std::size_t n_tokens = 0;
  for (const auto& probe : probes) {
    inspect_detail::probe_reads(
        model, fresh, probe.prompt(), block,
        [&](const std::vector<int>& seg, const MemoryReadResult<Real>& read) {
          const std::size_t d = read.values.shape()[1];
          std::vector<double> norm(N, 0);
          std::vector<std::size_t> neg(N, 0);
          for (std::size_t r = 0; r < N; ++r) {
            double sq = 0;
            for (std::size_t c = 0; c < d; ++c) {
              const double v = double(read.values(r, c));
              sq += v * v;
              neg[r] += v < 0;
            }
            norm[r] = std::sqrt(sq);
          }
          n_tokens += seg.size();
          for (std::size_t t = 0; t < seg.size(); ++t) {
            for (std::size_t r = 0; r < N; ++r) {
              const double a = double(read.attention(t, r));
              contrib[r].push_back(a * norm[r]);
              if (a <= 0) continue;
              mass[r].emplace_back(seg[t], a);
              negative[r] += neg[r];
              counted[r] += d;
            }
          }
        });
  }

  std::vector<SlotReport> out(N);
  for (std::size_t r = 0; r < N; ++r) {
    auto& rep = out[r];
    rep.slot = r;
    rep.relevance = stable_sum(std::move(contrib[r])) / double(n_tokens);
    rep.negative_fraction = counted[r] ? double(negative[r]) / double(counted[r]) : 0.0;

    // Per-token attention mass; sorting first makes the sums order-free.
    auto& m = mass[r];
    std::sort(m.begin(), m.end());
    std::vector<std::pair<double, int>> per_token;
    for (std::size_t i = 0; i < m.size();) {
      std::size_t j = i;
      double s = 0;
      for (; j < m.size() && m[j].first == m[i].first; ++j) s += m[j].second;
      per_token.emplace_back(s, m[i].first);
      i = j;
    }
    std::stable_sort(per_token.begin(), per_token.end(),
                     [](const auto& x, const auto& y) { return x.first > y.first; });
    for (std::size_t i = 0; i < per_token.size() && i < top_tokens; ++i) {
      rep.top_tokens.push_back(token_label(per_token[i].second));
    }
  }
  return out;
}

// Top and bottom `top_m` slots by relevance; ties go to the lower slot index.
template <RealType Real>
SlotRanking rank_slots(const Model<Real>& model, const std::vector<Sample>& probes,
                       std::size_t top_m, std::size_t block = 0,
                       const SequenceState<Real>* start = nullptr) {
  const std::size_t N = model.config().memory_slots;
  if (top_m == 0 || top_m > N) {
    throw ConfigError("top_m: " + std::to_string(top_m) + " outside [1, " + std::to_string(N) +
                      "]");
  }
  auto all = score_slots(model, probes, block, 5, start);
  SlotRanking out;
  out.block = block;
  auto by_score = [](bool high_first) {
    return [high_first](const SlotReport& a, const SlotReport& b) {
      if (a.relevance != b.relevance) {
        return high_first ? a.relevance > b.relevance : a.relevance < b.relevance;
      }
      return a.slot < b.slot;
    };
  };
  auto sorted = all;
  std::sort(sorted.begin(), sorted.end(), by_score(true));
  out.top.assign(sorted.begin(), sorted.begin() + long(top_m));
  std::sort(sorted.begin(), sorted.end(), by_score(false));
  out.bottom.assign(sorted.begin(), sorted.begin() + long(top_m));
  return out;
}

inline nlohmann::json to_json(const SlotReport& r) {
  return {{"slot", r.slot},
          {"relevance", r.relevance},
          {"top_tokens", r.top_tokens},
          {"negative_fraction", r.negative_fraction}};
}

// One record per line, tagged with its group and rank within the group.
inline void write_slot_reports(std::ostream& out, const SlotRanking& ranking) {
  auto emit = [&](const char* group, const std::vector<SlotReport>& list) {
    for (std::size_t i = 0; i < list.size(); ++i) {
      auto j = to_json(list[i]);
      j["group"] = group;
      j["rank"] = i;
      j["block"] = ranking.block;
      out << j.dump() << '\n';
    }
  };
  emit("top", ranking.top);
  emit("bottom", ranking.bottom);
}

struct SlotDelta {
  std::size_t bank = 0;
  std::size_t slot = 0;
  double l1 = 0;
};

struct MemoryDeltaReport {
  std::vector<std::vector<double>> per_slot_l1;  // [bank][slot]
  std::vector<SlotDelta> top_changed;            // largest first, zero deltas omitted
  double total() const {
    double s = 0;
    for (const auto& b : per_slot_l1)
      for (double x : b) s += x;
    return s;
  }
};

// Per-slot L1 distance between the banks of two sequence states of the
// same configuration.
template <RealType Real>
MemoryDeltaReport memory_delta(const SequenceState<Real>& before, const SequenceState<Real>& after,
                               std::size_t top_m = 8) {
  if (before.banks.size() != after.banks.size()) {
    throw ShapeMismatchError("memory_delta: " + std::to_string(before.banks.size()) + " vs " +
                             std::to_string(after.banks.size()) + " banks");
  }
  MemoryDeltaReport rep;
  std::vector<SlotDelta> all;
  for (std::size_t b = 0; b < before.banks.size(); ++b) {
    const auto& x = before.banks[b].slots;
    const auto& y = after.banks[b].slots;
    if (x.shape() != y.shape()) {
      throw ShapeMismatchError("memory_delta: bank " + std::to_string(b) + " " +
                               shape_string(x.shape()) + " vs " + shape_string(y.shape()));
    }
    const std::size_t N = x.shape()[0], d = x.shape()[1];
    auto& row = rep.per_slot_l1.emplace_back(N, 0.0);
    for (std::size_t r = 0; r < N; ++r) {
      double s = 0;
      for (std::size_t c = 0; c < d; ++c) s += std::abs(double(x(r, c)) - double(y(r, c)));
      row[r] = s;
      if (s > 0) all.push_back({b, r, s});
    }
  }
  std::stable_sort(all.begin(), all.end(),
                   [](const SlotDelta& a, const SlotDelta& b) { return a.l1 > b.l1; });
  if (all.size() > top_m) all.resize(top_m);
  rep.top_changed = std::move(all);
  return rep;
}

inline nlohmann::json to_json(const MemoryDeltaReport& r) {
  nlohmann::json top = nlohmann::json::array();
  for (const auto& d : r.top_changed) top.push_back({{"bank", d.bank}, {"slot", d.slot}, {"l1", d.l1}});
  return {{"per_slot_l1", r.per_slot_l1}, {"top_changed", top}, {"total_l1", r.total()}};
}

}  // namespace lm2
