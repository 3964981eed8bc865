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

// Run configuration and its flat `key = value` text form.
//
// Every field has a default; parsing rejects unknown keys and malformed
// values with the key named in the error. to_text() writes every field in a
// fixed order, so an echoed config parses back to an identical object.

#pragma once

#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "lm2/decoder.hpp"
#include "lm2/error.hpp"
#include "lm2/memory.hpp"

namespace lm2 {

enum class BankMode { shared_threaded, per_block };
enum class LossMode { task, lm };
enum class TaskKind { recall, two_fact, yes_no, counting, negation };

struct ModelConfig {
  std::size_t vocab_size = 512;
  std::size_t d_model = 64;
  std::size_t n_layers = 4;
  std::size_t memory_blocks = 4;  // memory lives in blocks [0, memory_blocks)
  std::size_t memory_slots = 64;
  std::size_t n_heads = 4;
  std::size_t n_kv_heads = 1;
  std::size_t d_ff = 256;
  double rope_base = 10000.0;
  std::size_t top_k = 0;  // 0 disables top-k memory reads
  std::size_t segment_len = 64;
  BankMode bank_mode = BankMode::shared_threaded;
  WriteAggregation write_aggregation = WriteAggregation::attention;
  double gate_bias_init = -4.0;
  bool memory_enabled = true;
  bool tie_embeddings = false;
  double init_std = 0.02;
  double norm_eps = 1e-5;
  int precision = 32;
  std::uint64_t seed = 1;

  BlockShape block_shape() const {
    BlockShape s;
    s.d = d_model;
    s.n_heads = n_heads;
    s.n_kv_heads = n_kv_heads;
    s.d_ff = d_ff;
    s.rope_base = rope_base;
    s.norm_eps = norm_eps;
    if (top_k > 0) s.top_k = top_k;
    s.aggregation = write_aggregation;
    return s;
  }

  std::size_t num_banks() const {
    return bank_mode == BankMode::shared_threaded ? 1 : memory_blocks;
  }

  void validate() const {
    if (vocab_size < 2) throw ConfigError("vocab_size: must be at least 2");
    if (n_layers == 0) throw ConfigError("n_layers: must be positive");
    if (d_model == 0) throw ConfigError("d_model: must be positive");
    if (n_heads == 0) throw ConfigError("n_heads: must be positive");
    if (n_kv_heads == 0) throw ConfigError("n_kv_heads: must be positive");
    if (d_ff == 0) throw ConfigError("d_ff: must be positive");
    if (memory_blocks < 1 || memory_blocks > n_layers) {
      throw ConfigError("memory_blocks: must lie in [1, n_layers=" +
                        std::to_string(n_layers) + "]");
    }
    if (memory_slots == 0) throw ConfigError("memory_slots: must be positive");
    if (segment_len == 0) throw ConfigError("segment_len: must be positive");
    if (top_k > memory_slots) throw ConfigError("top_k: exceeds memory_slots");
    if (precision != 32 && precision != 64) throw ConfigError("precision: must be 32 or 64");
    if (!(norm_eps > 0)) throw ConfigError("norm_eps: must be positive");
    if (!(init_std > 0)) throw ConfigError("init_std: must be positive");
    block_shape().validate();
  }
};

struct TaskSpec {
  TaskKind kind = TaskKind::recall;
  std::size_t n_pairs = 4;
  std::size_t filler_len = 128;
  std::size_t recall_keys = 32;    // size of the key alphabet drawn from
  std::size_t recall_values = 32;  // size of the value alphabet drawn from
  std::size_t corpus_size = 0;     // 0 streams fresh samples every step
  std::size_t eval_size = 200;
  LossMode loss_mode = LossMode::task;
};

struct TrainConfig {
  std::size_t steps = 200;
  std::size_t batch_size = 8;
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double adam_eps = 1e-8;
  double weight_decay = 0.1;
  std::size_t warmup_steps = 100;
  double min_lr_ratio = 0.1;
  double grad_clip = 1.0;
  std::size_t eval_every = 0;        // 0: evaluate only at the end
  std::size_t checkpoint_every = 0;  // 0: checkpoint only at the end
  double target_accuracy = 0.0;      // stop early once exact match reaches it (0: off)
  // Recall curriculum (0: off). Training filler lengths are drawn from
  // [0, cap]; cap stays 0 for curriculum_hold steps then ramps linearly to
  // filler_len by step curriculum_steps. The key alphabet ramps the same way
  // from curriculum_keys (0: no key ramp) to recall_keys.
  std::size_t curriculum_steps = 0;
  std::size_t curriculum_hold = 0;
  std::size_t curriculum_keys = 0;
};

struct RunConfig {
  ModelConfig model;
  TaskSpec task;
  TrainConfig train;
  std::vector<std::size_t> sweep_k = {1, 4};
  bool sweep_vanilla = true;
  std::string prompt;
  std::size_t max_new = 1;
  double temperature = 0.0;
  std::size_t inspect_block = 0;
  std::size_t top_m = 8;
  std::size_t probe_size = 16;
  std::size_t decode_steps = 8;

  void validate() const {
    model.validate();
    if (task.n_pairs == 0) throw ConfigError("n_pairs: must be positive");
    if (task.eval_size == 0) throw ConfigError("eval_size: must be positive");
    if (train.batch_size == 0) throw ConfigError("batch_size: must be positive");
    if (train.lr < 0) throw ConfigError("lr: must be non-negative");
    if (!(train.beta1 >= 0 && train.beta1 < 1)) throw ConfigError("beta1: must lie in [0,1)");
    if (!(train.beta2 >= 0 && train.beta2 < 1)) throw ConfigError("beta2: must lie in [0,1)");
    if (!(train.grad_clip > 0)) throw ConfigError("grad_clip: must be positive");
    if (temperature < 0) throw ConfigError("temperature: must be non-negative");
    if (train.curriculum_steps > 0 && train.curriculum_hold >= train.curriculum_steps) {
      throw ConfigError("curriculum_hold: must be below curriculum_steps");
    }
    if (train.curriculum_keys > 0 && train.curriculum_keys < task.n_pairs) {
      throw ConfigError("curriculum_keys: need at least n_pairs=" + std::to_string(task.n_pairs));
    }
    for (std::size_t k : sweep_k) {
      if (k < 1 || k > model.n_layers) {
        throw ConfigError("sweep_k: value " + std::to_string(k) + " outside [1, n_layers]");
      }
    }
  }
};

namespace config_detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

[[noreturn]] inline void bad(const std::string& key, const std::string& value,
                             const std::string& reason) {
  throw ConfigError(key + ": invalid value '" + value + "' (" + reason + ")");
}

inline std::size_t parse_size(const std::string& key, const std::string& v) {
  std::size_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size() || v.empty()) {
    bad(key, v, "expected a non-negative integer");
  }
  return out;
}

inline std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size() || v.empty()) {
    bad(key, v, "expected an unsigned 64-bit integer");
  }
  return out;
}

inline double parse_double(const std::string& key, const std::string& v) {
  double out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size() || v.empty() || !std::isfinite(out)) {
    bad(key, v, "expected a finite real number");
  }
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  bad(key, v, "expected true or false");
}

inline std::string format_double(double v) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, p);
}

template <class Enum>
struct EnumNames {
  std::vector<std::pair<Enum, std::string>> names;

  Enum parse(const std::string& key, const std::string& v) const {
    for (const auto& [e, n] : names)
      if (n == v) return e;
    std::string options;
    for (const auto& [e, n] : names) options += (options.empty() ? "" : "|") + n;
    bad(key, v, "expected one of " + options);
  }
  std::string format(Enum v) const {
    for (const auto& [e, n] : names)
      if (e == v) return n;
    return "?";
  }
};

inline const EnumNames<BankMode> kBankModes{
    {{BankMode::shared_threaded, "shared_threaded"}, {BankMode::per_block, "per_block"}}};
inline const EnumNames<WriteAggregation> kAggregations{
    {{WriteAggregation::attention, "attention"}, {WriteAggregation::mean, "mean"}}};
inline const EnumNames<LossMode> kLossModes{{{LossMode::task, "task"}, {LossMode::lm, "lm"}}};
inline const EnumNames<TaskKind> kTaskKinds{{{TaskKind::recall, "recall"},
                                             {TaskKind::two_fact, "two_fact"},
                                             {TaskKind::yes_no, "yes_no"},
                                             {TaskKind::counting, "counting"},
                                             {TaskKind::negation, "negation"}}};

struct Field {
  std::string key;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

// Field table in echo order.
inline const std::vector<Field>& fields() {
  static const std::vector<Field> table = [] {
    std::vector<Field> f;
    auto size_field = [&f](std::string key, auto member) {
      f.push_back({key,
                   [member, key](RunConfig& c, const std::string& v) {
                     member(c) = parse_size(key, v);
                   },
                   [member](const RunConfig& c) {
                     return std::to_string(member(const_cast<RunConfig&>(c)));
                   }});
    };
    auto real_field = [&f](std::string key, auto member) {
      f.push_back({key,
                   [member, key](RunConfig& c, const std::string& v) {
                     member(c) = parse_double(key, v);
                   },
                   [member](const RunConfig& c) {
                     return format_double(member(const_cast<RunConfig&>(c)));
                   }});
    };
    auto bool_field = [&f](std::string key, auto member) {
      f.push_back({key,
                   [member, key](RunConfig& c, const std::string& v) {
                     member(c) = parse_bool(key, v);
                   },
                   [member](const RunConfig& c) {
                     return member(const_cast<RunConfig&>(c)) ? std::string("true")
                                                              : std::string("false");
                   }});
    };
    auto enum_field = [&f](std::string key, auto member, const auto& names) {
      f.push_back({key,
                   [member, key, &names](RunConfig& c, const std::string& v) {
                     member(c) = names.parse(key, v);
                   },
                   [member, &names](const RunConfig& c) {
                     return names.format(member(const_cast<RunConfig&>(c)));
                   }});
    };
#define LM2_REF(expr) [](RunConfig& c) -> auto& { return c.expr; }
    size_field("vocab_size", LM2_REF(model.vocab_size));
    size_field("d_model", LM2_REF(model.d_model));
    size_field("n_layers", LM2_REF(model.n_layers));
    size_field("memory_blocks", LM2_REF(model.memory_blocks));
    size_field("memory_slots", LM2_REF(model.memory_slots));
    size_field("n_heads", LM2_REF(model.n_heads));
    size_field("n_kv_heads", LM2_REF(model.n_kv_heads));
    size_field("d_ff", LM2_REF(model.d_ff));
    real_field("rope_base", LM2_REF(model.rope_base));
    size_field("top_k", LM2_REF(model.top_k));
    size_field("segment_len", LM2_REF(model.segment_len));
    enum_field("bank_mode", LM2_REF(model.bank_mode), kBankModes);
    enum_field("write_aggregation", LM2_REF(model.write_aggregation), kAggregations);
    real_field("gate_bias_init", LM2_REF(model.gate_bias_init));
    bool_field("memory_enabled", LM2_REF(model.memory_enabled));
    bool_field("tie_embeddings", LM2_REF(model.tie_embeddings));
    real_field("init_std", LM2_REF(model.init_std));
    real_field("norm_eps", LM2_REF(model.norm_eps));
    f.push_back({"precision",
                 [](RunConfig& c, const std::string& v) {
                   const auto p = parse_size("precision", v);
                   if (p != 32 && p != 64) bad("precision", v, "expected 32 or 64");
                   c.model.precision = int(p);
                 },
                 [](const RunConfig& c) { return std::to_string(c.model.precision); }});
    f.push_back({"seed",
                 [](RunConfig& c, const std::string& v) { c.model.seed = parse_u64("seed", v); },
                 [](const RunConfig& c) { return std::to_string(c.model.seed); }});

    enum_field("task", LM2_REF(task.kind), kTaskKinds);
    size_field("n_pairs", LM2_REF(task.n_pairs));
    size_field("filler_len", LM2_REF(task.filler_len));
    size_field("recall_keys", LM2_REF(task.recall_keys));
    size_field("recall_values", LM2_REF(task.recall_values));
    size_field("corpus_size", LM2_REF(task.corpus_size));
    size_field("eval_size", LM2_REF(task.eval_size));
    enum_field("loss_mode", LM2_REF(task.loss_mode), kLossModes);

    size_field("steps", LM2_REF(train.steps));
    size_field("batch_size", LM2_REF(train.batch_size));
    real_field("lr", LM2_REF(train.lr));
    real_field("beta1", LM2_REF(train.beta1));
    real_field("beta2", LM2_REF(train.beta2));
    real_field("adam_eps", LM2_REF(train.adam_eps));
    real_field("weight_decay", LM2_REF(train.weight_decay));
    size_field("warmup_steps", LM2_REF(train.warmup_steps));
    real_field("min_lr_ratio", LM2_REF(train.min_lr_ratio));
    real_field("grad_clip", LM2_REF(train.grad_clip));
    size_field("eval_every", LM2_REF(train.eval_every));
    size_field("checkpoint_every", LM2_REF(train.checkpoint_every));
    real_field("target_accuracy", LM2_REF(train.target_accuracy));
    size_field("curriculum_steps", LM2_REF(train.curriculum_steps));
    size_field("curriculum_hold", LM2_REF(train.curriculum_hold));
    size_field("curriculum_keys", LM2_REF(train.curriculum_keys));

    f.push_back({"sweep_k",
                 [](RunConfig& c, const std::string& v) {
                   c.sweep_k.clear();
                   std::stringstream ss(v);
                   std::string item;
                   while (std::getline(ss, item, ',')) {
                     c.sweep_k.push_back(parse_size("sweep_k", trim(item)));
                   }
                   if (c.sweep_k.empty()) bad("sweep_k", v, "expected a comma-separated list");
                 },
                 [](const RunConfig& c) {
                   std::string out;
                   for (std::size_t k : c.sweep_k) out += (out.empty() ? "" : ",") + std::to_string(k);
                   return out;
                 }});
    bool_field("sweep_vanilla", LM2_REF(sweep_vanilla));
    f.push_back({"prompt", [](RunConfig& c, const std::string& v) { c.prompt = v; },
                 [](const RunConfig& c) { return c.prompt; }});
    size_field("max_new", LM2_REF(max_new));
    real_field("temperature", LM2_REF(temperature));
    size_field("inspect_block", LM2_REF(inspect_block));
    size_field("top_m", LM2_REF(top_m));
    size_field("probe_size", LM2_REF(probe_size));
    size_field("decode_steps", LM2_REF(decode_steps));
#undef LM2_REF
    return f;
  }();
  return table;
}

}  // namespace config_detail

// Applies `key = value` assignments on top of `base`. Blank lines and lines
// starting with '#' are ignored. Keys may appear at most once.
inline RunConfig parse_run_config(std::string_view text, RunConfig base = {}) {
  using namespace config_detail;
  std::map<std::string, const Field*> index;
  for (const auto& f : fields()) index[f.key] = &f;
  std::map<std::string, int> seen;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(lineno) + ": expected 'key = value'");
    }
    const std::string key = trim(std::string_view(t).substr(0, eq));
    const std::string value = trim(std::string_view(t).substr(eq + 1));
    auto it = index.find(key);
    if (it == index.end()) throw ConfigError(key + ": unknown config key");
    if (seen[key]++) throw ConfigError(key + ": duplicate config key");
    it->second->set(base, value);
  }
  base.validate();
  return base;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot read config file '" + path + "'");
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_run_config(ss.str());
}

// Every field with its current value, one per line, in table order.
inline std::string to_text(const RunConfig& c) {
  std::string out;
  for (const auto& f : config_detail::fields()) out += f.key + " = " + f.get(c) + "\n";
  return out;
}

// Text of the model-shaping fields only; its hash tags checkpoints.
inline std::string model_text(const ModelConfig& m) {
  RunConfig c;
  c.model = m;
  std::string out;
  for (const auto& f : config_detail::fields()) {
    if (f.key == "task") break;
    out += f.key + " = " + f.get(c) + "\n";
  }
  return out;
}

}  // namespace lm2
