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

// Training loop, evaluation and the memory-depth sweep.
//
// Each sample is run as one sequence (context ⧺ question ⧺ answer) through a
// fresh SequenceState, segment by segment, with gradients flowing back
// through the bank across segments. In task mode only the rows predicting
// answer tokens are projected through the LM head.

#pragma once

#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "lm2/checkpoint.hpp"
#include "lm2/config.hpp"
#include "lm2/metrics.hpp"
#include "lm2/model.hpp"
#include "lm2/optim.hpp"
#include "lm2/rng.hpp"
#include "lm2/tasks.hpp"

namespace lm2 {

// Positions (into the shifted input sequence) whose next-token predictions
// are scored.
inline std::vector<std::size_t> scored_positions(const Sample& s, LossMode mode) {
  const std::size_t n = s.context.size() + s.question.size() + s.answer.size();
  if (s.answer.empty()) throw DimensionError("sample has no answer tokens");
  if (n < 2) throw DimensionError("sample too short to score");
  std::vector<std::size_t> rows;
  const std::size_t first = mode == LossMode::task ? n - 1 - s.answer.size() : 0;
  for (std::size_t p = first; p + 1 < n; ++p) rows.push_back(p);
  return rows;
}

// Summed cross-entropy over `rows` of a sequence, times `weight`. Position i
// of `inputs` is scored against targets[i]; unscored targets are ignored.
// Appends per-row argmax predictions when `predictions` is given.
template <RealType Real>
Tensor<Real> sequence_loss(Tape<Real>& tape, const Model<Real>& model,
                           const std::vector<int>& inputs, const std::vector<int>& targets,
                           const std::vector<std::size_t>& rows, Real weight,
                           std::vector<int>* predictions = nullptr) {
  if (targets.size() != inputs.size()) {
    throw DimensionError("sequence_loss: " + std::to_string(targets.size()) + " targets for " +
                         std::to_string(inputs.size()) + " inputs");
  }
  if (rows.empty() || rows.back() >= inputs.size()) {
    throw DimensionError("sequence_loss: scored rows out of range");
  }
  const std::size_t n = rows.back() + 1;  // later positions never affect the loss
  const std::size_t S = model.config().segment_len;
  auto st = model.new_state();
  Tensor<Real> total;
  std::size_t next_row = 0;
  for (std::size_t start = 0; start < n; start += S) {
    const std::size_t len = std::min(S, n - start);
    auto hidden = model.forward_hidden(
        tape, st,
        std::vector<int>(inputs.begin() + long(start), inputs.begin() + long(start + len)));
    std::vector<std::size_t> local;
    std::vector<int> wanted;
    while (next_row < rows.size() && rows[next_row] < start + len) {
      local.push_back(rows[next_row] - start);
      wanted.push_back(targets[rows[next_row]]);
      ++next_row;
    }
    if (local.empty()) continue;
    auto logits = model.head_logits(tape, ops::gather_rows(tape, hidden, local));
    if (predictions) {
      const std::size_t V = logits.shape()[1];
      for (std::size_t r = 0; r < local.size(); ++r) {
        predictions->push_back(Model<Real>::argmax(
            Tensor<Real>({V}, std::vector<Real>(logits.data().begin() + long(r * V),
                                                logits.data().begin() + long((r + 1) * V)))));
      }
    }
    auto ce = ops::cross_entropy(tape, logits, wanted, weight);
    total = total.defined() ? ops::add(tape, total, ce) : ce;
  }
  return total;
}

// Next-token loss of one sample (context ⧺ question ⧺ answer).
template <RealType Real>
Tensor<Real> sample_loss(Tape<Real>& tape, const Model<Real>& model, const Sample& s,
                         LossMode mode, Real weight, std::vector<int>* predictions = nullptr) {
  const auto seq = s.sequence();
  const std::vector<int> inputs(seq.begin(), seq.end() - 1);
  const std::vector<int> targets(seq.begin() + 1, seq.end());
  return sequence_loss(tape, model, inputs, targets, scored_positions(s, mode), weight,
                       predictions);
}

struct StepMetrics {
  double loss = 0;
  double ppl = 0;
  double grad_norm = 0;
  std::size_t tokens = 0;
};

template <RealType Real>
StepMetrics train_step(const Model<Real>& model, const std::vector<Sample>& batch,
                       OptimState<Real>& optim, LossMode mode) {
  if (batch.empty()) throw UsageError("train_step: empty batch");
  const auto params = model.parameters();
  for (const auto& [name, p] : params) Tensor<Real>(p).zero_grad();
  std::size_t scored = 0, tokens = 0;
  for (const auto& s : batch) {
    scored += scored_positions(s, mode).size();
    tokens += s.context.size() + s.question.size() + s.answer.size() - 1;
  }
  const Real weight = Real(1) / Real(scored);
  double loss = 0;
  for (const auto& s : batch) {
    Tape<Real> tape;
    auto l = sample_loss(tape, model, s, mode, weight);
    loss += double(l.item());
    tape.backward(l);
  }
  if (!std::isfinite(loss)) throw NumericError("training loss is not finite");
  StepMetrics m;
  m.loss = loss;
  m.ppl = std::exp(loss);
  m.grad_norm = clip_grad_norm(params, optim.config.grad_clip);
  m.tokens = tokens;
  adamw_step(optim, params);
  return m;
}

using Predictor = std::function<std::vector<int>(const Sample&)>;

// Greedy decoding of as many tokens as the reference answer has.
template <RealType Real>
Predictor greedy_predictor(const Model<Real>& model) {
  return [&model](const Sample& s) {
    auto st = model.new_state();
    return model.generate(st, s.prompt(), s.answer.size());
  };
}

inline double exact_match(const Predictor& predict, const std::vector<Sample>& samples) {
  if (samples.empty()) throw UsageError("exact_match: empty eval set");
  std::size_t hits = 0;
  for (const auto& s : samples) hits += predict(s) == s.answer;
  return double(hits) / double(samples.size());
}

struct EvalReport {
  double loss = 0;  // mean cross-entropy over scored tokens
  double ppl = 0;
  double exact_match = 0;
  std::size_t samples = 0;
};

template <RealType Real>
EvalReport evaluate_ppl(const Model<Real>& model, const std::vector<Sample>& samples,
                        LossMode mode) {
  if (samples.empty()) throw UsageError("evaluate: empty eval set");
  double total = 0;
  std::size_t count = 0;
  for (const auto& s : samples) {
    Tape<Real> tape(false);
    total += double(sample_loss(tape, model, s, mode, Real(1)).item());
    count += scored_positions(s, mode).size();
  }
  EvalReport r;
  r.loss = total / double(count);
  r.ppl = std::exp(r.loss);
  r.samples = samples.size();
  return r;
}

template <RealType Real>
EvalReport evaluate(const Model<Real>& model, const std::vector<Sample>& samples, LossMode mode) {
  auto r = evaluate_ppl(model, samples, mode);
  r.exact_match = exact_match(greedy_predictor(model), samples);
  return r;
}

// Model, optimizer, data stream and metric history of one training run.
template <RealType Real>
class Trainer {
 public:
  explicit Trainer(const RunConfig& cfg) : Trainer(cfg, Model<Real>(cfg.model)) {}

  Trainer(const RunConfig& cfg, Model<Real> model)
      : cfg_(cfg),
        model_(std::move(model)),
        optim_(OptimState<Real>::create(cfg.train, model_.parameters())),
        data_rng_(cfg.model.seed, "train-data") {
    cfg_.validate();
    if (cfg_.model.vocab_size < Vocab::standard().size()) {
      throw ConfigError("vocab_size: tasks need at least " +
                        std::to_string(Vocab::standard().size()) + " tokens");
    }
    if (cfg_.task.corpus_size > 0) {
      corpus_ = generate_samples(cfg_.model.seed, "corpus", cfg_.task, cfg_.task.corpus_size);
    }
    eval_ = generate_samples(cfg_.model.seed, "eval", cfg_.task, cfg_.task.eval_size);
  }

  const RunConfig& config() const { return cfg_; }
  const Model<Real>& model() const { return model_; }
  Model<Real>& model() { return model_; }
  const OptimState<Real>& optim() const { return optim_; }
  const std::vector<MetricRecord>& history() const { return history_; }
  const std::vector<Sample>& eval_set() const { return eval_; }
  std::size_t step_count() const { return optim_.step; }
  bool done() const { return optim_.step >= cfg_.train.steps; }

  // Fraction of the curriculum ramp completed at the current step.
  double curriculum_progress() const {
    const auto& tc = cfg_.train;
    if (tc.curriculum_steps == 0) return 1.0;
    const std::size_t s = optim_.step + 1;
    if (s <= tc.curriculum_hold) return 0.0;
    if (s >= tc.curriculum_steps) return 1.0;
    return double(s - tc.curriculum_hold) / double(tc.curriculum_steps - tc.curriculum_hold);
  }

  // Task used for the next training batch.
  TaskSpec curriculum_task() const {
    TaskSpec spec = cfg_.task;
    if (cfg_.train.curriculum_steps == 0) return spec;
    const double f = curriculum_progress();
    spec.filler_len = std::size_t(std::ceil(double(spec.filler_len) * f));
    const std::size_t k0 = cfg_.train.curriculum_keys;
    if (k0 > 0 && k0 < spec.recall_keys) {
      spec.recall_keys = k0 + std::size_t(std::lround(double(spec.recall_keys - k0) * f));
    }
    return spec;
  }

  std::vector<Sample> next_batch() {
    std::vector<Sample> batch;
    const TaskSpec base = curriculum_task();
    TaskSpec spec = base;
    for (std::size_t i = 0; i < cfg_.train.batch_size; ++i) {
      if (!corpus_.empty()) {
        batch.push_back(corpus_[data_rng_.below(corpus_.size())]);
        continue;
      }
      if (cfg_.train.curriculum_steps > 0) spec.filler_len = data_rng_.below(base.filler_len + 1);
      batch.push_back(generate_sample(data_rng_, spec));
    }
    return batch;
  }

  MetricRecord step() {
    const auto m = train_step(model_, next_batch(), optim_, cfg_.task.loss_mode);
    MetricRecord r;
    r.step = optim_.step;
    r.tokens = (history_.empty() ? 0 : history_.back().tokens) + m.tokens;
    r.loss = m.loss;
    r.ppl = m.ppl;
    r.grad_norm = m.grad_norm;
    history_.push_back(r);
    return r;
  }

  // Evaluates on the first `limit` held-out samples (all when 0).
  EvalReport evaluate_held_out(std::size_t limit = 0) const {
    if (limit == 0 || limit > eval_.size()) return evaluate(model_, eval_, cfg_.task.loss_mode);
    std::vector<Sample> subset(eval_.begin(), eval_.begin() + long(limit));
    return evaluate(model_, subset, cfg_.task.loss_mode);
  }

  CheckpointData<Real> checkpoint() const {
    CheckpointData<Real> d;
    d.config_text = to_text(cfg_);
    d.step = optim_.step;
    d.rng_state = data_rng_.state();
    d.history = history_;
    d.params = model_.parameters();
    for (std::size_t i = 0; i < optim_.names.size(); ++i) {
      d.first_moments.emplace_back(optim_.names[i], optim_.m[i]);
      d.second_moments.emplace_back(optim_.names[i], optim_.v[i]);
    }
    return d;
  }

  void save(const std::string& path) const { write_checkpoint(path, checkpoint()); }

  // Rebuilds a trainer from checkpoint contents. `cfg` defaults to the
  // configuration stored in the checkpoint.
  static Trainer restore(const CheckpointData<Real>& d,
                         std::optional<RunConfig> cfg = std::nullopt) {
    Trainer t(cfg ? *cfg : parse_run_config(d.config_text));
    t.load(d);
    return t;
  }

  static Trainer resume(const std::string& path) { return restore(read_checkpoint<Real>(path)); }

  void load(const CheckpointData<Real>& d) {
    copy_named(d.params, model_.parameters(), "checkpoint parameters");
    NamedTensors<Real> m, v;
    for (std::size_t i = 0; i < optim_.names.size(); ++i) {
      m.emplace_back(optim_.names[i], optim_.m[i]);
      v.emplace_back(optim_.names[i], optim_.v[i]);
    }
    copy_named(d.first_moments, m, "checkpoint first moments");
    copy_named(d.second_moments, v, "checkpoint second moments");
    optim_.step = d.step;
    data_rng_.set_state(d.rng_state);
    history_ = d.history;
  }

 private:
  RunConfig cfg_;
  Model<Real> model_;
  OptimState<Real> optim_;
  Rng data_rng_;
  std::vector<Sample> corpus_;
  std::vector<Sample> eval_;
  std::vector<MetricRecord> history_;
};

struct TrainHooks {
  std::function<void(const MetricRecord&)> on_step;
  std::function<void(std::size_t step, const EvalReport&)> on_eval;
  std::function<void(std::size_t step)> on_checkpoint;
};

// Steps until the configured budget is spent or the target exact-match is
// reached. Returns the final held-out evaluation.
template <RealType Real>
EvalReport run_training(Trainer<Real>& t, const TrainHooks& hooks = {}) {
  const auto& tc = t.config().train;
  std::optional<EvalReport> last;
  while (!t.done()) {
    const auto rec = t.step();
    if (hooks.on_step) hooks.on_step(rec);
    const std::size_t s = t.step_count();
    last.reset();
    if (tc.eval_every > 0 && s % tc.eval_every == 0 && !t.done()) {
      last = t.evaluate_held_out();
      if (hooks.on_eval) hooks.on_eval(s, *last);
    }
    if (tc.checkpoint_every > 0 && s % tc.checkpoint_every == 0 && hooks.on_checkpoint) {
      hooks.on_checkpoint(s);
    }
    if (last && tc.target_accuracy > 0 && last->exact_match >= tc.target_accuracy) break;
  }
  if (!last) {
    last = t.evaluate_held_out();
    if (hooks.on_eval) hooks.on_eval(t.step_count(), *last);
  }
  return *last;
}

struct VariantResult {
  std::string name;  // "k<k>" or "vanilla"
  std::size_t memory_blocks = 0;
  bool memory_enabled = true;
  std::vector<MetricRecord> series;
  EvalReport final_eval;
};

// Per-variant configuration of the memory-depth sweep: one LM2 variant per
// configured k, then the memory-off variant.
inline std::vector<std::pair<std::string, RunConfig>> sweep_variants(const RunConfig& cfg) {
  std::vector<std::pair<std::string, RunConfig>> out;
  std::size_t max_k = 1;
  for (std::size_t k : cfg.sweep_k) {
    RunConfig c = cfg;
    c.model.memory_blocks = k;
    c.model.memory_enabled = true;
    out.emplace_back("k" + std::to_string(k), c);
    max_k = std::max(max_k, k);
  }
  if (cfg.sweep_vanilla) {
    RunConfig c = cfg;
    c.model.memory_blocks = max_k;
    c.model.memory_enabled = false;
    out.emplace_back("vanilla", c);
  }
  return out;
}

// Trains every sweep variant for `budget` steps under the same seed and data
// order. `on_variant` sees each finished trainer (for writing artifacts).
template <RealType Real>
std::vector<VariantResult> run_experiment(
    RunConfig cfg, std::size_t budget,
    const std::function<void(const std::string&, const Trainer<Real>&)>& on_variant = {}) {
  cfg.train.steps = budget;
  cfg.train.target_accuracy = 0;  // every variant spends the full budget
  std::vector<VariantResult> out;
  for (const auto& [name, c] : sweep_variants(cfg)) {
    Trainer<Real> t(c);
    VariantResult r;
    r.name = name;
    r.memory_blocks = c.model.memory_blocks;
    r.memory_enabled = c.model.memory_enabled;
    r.final_eval = run_training(t);
    r.series = t.history();
    if (on_variant) on_variant(name, t);
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace lm2
