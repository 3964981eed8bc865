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

// Command-line front end: train, sweep, eval, generate and inspect over a
// flat config file. Every invocation writes into its own timestamped run
// directory under the output root and reports failures as a single JSON line
// on stderr.

#pragma once

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "lm2/checkpoint.hpp"
#include "lm2/config.hpp"
#include "lm2/error.hpp"
#include "lm2/inspect.hpp"
#include "lm2/metrics.hpp"
#include "lm2/model.hpp"
#include "lm2/tasks.hpp"
#include "lm2/training.hpp"

namespace lm2::cli {

inline constexpr const char* kOutputRootEnv = "LM2_OUTPUT_ROOT";

struct Options {
  std::string command;
  std::string config_path;
  std::string out_root;
  std::string resume;
  std::string checkpoint;
  std::string prompt;
  std::string inspect_what;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::optional<int> precision;
};

namespace detail {

namespace fs = std::filesystem;
using json = nlohmann::json;

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write '" + path.string() + "'");
  f << text;
  if (!f) throw IoError("short write to '" + path.string() + "'");
}

class AppendFile {
 public:
  explicit AppendFile(const fs::path& path) : f_(path, std::ios::binary | std::ios::trunc) {
    if (!f_) throw IoError("cannot write '" + path.string() + "'");
  }
  void line(const std::string& s) {
    f_ << s << '\n';
    f_.flush();
    if (!f_) throw IoError("write failed");
  }

 private:
  std::ofstream f_;
};

inline std::string timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y%m%d-%H%M%S");
  return os.str();
}

inline fs::path output_root(const Options& o) {
  if (!o.out_root.empty()) return o.out_root;
  if (const char* env = std::getenv(kOutputRootEnv); env && *env) return env;
  return "runs";
}

// <root>/<UTC timestamp>-<command>, with a numeric suffix if taken.
inline fs::path make_run_dir(const Options& o, const std::string& name) {
  const fs::path root = output_root(o);
  fs::create_directories(root);
  const std::string base = timestamp() + "-" + name;
  fs::path dir = root / base;
  for (int n = 2; fs::exists(dir); ++n) dir = root / (base + "-" + std::to_string(n));
  fs::create_directories(dir);
  return dir;
}

inline std::string join_sets(const std::vector<std::string>& sets) {
  std::string text;
  for (const auto& s : sets) text += s + "\n";
  return text;
}

inline std::optional<std::string> checkpoint_path(const Options& o) {
  if (!o.checkpoint.empty()) return o.checkpoint;
  if (!o.resume.empty()) return o.resume;
  return std::nullopt;
}

inline std::string checkpoint_config_text(const std::string& path) {
  // The config sits right after the fixed header; parsing the whole file
  // also verifies it, so use the precision-matched reader.
  if (checkpoint_precision_bytes(path) == 8) return read_checkpoint<double>(path).config_text;
  return read_checkpoint<float>(path).config_text;
}

// Config file (or the checkpoint's stored config), then --set lines, then
// --seed and --precision.
inline RunConfig effective_config(const Options& o) {
  RunConfig base;
  if (!o.config_path.empty()) {
    base = load_run_config(o.config_path);
  } else if (auto ck = checkpoint_path(o)) {
    base = parse_run_config(checkpoint_config_text(*ck));
  }
  RunConfig cfg = parse_run_config(join_sets(o.sets), base);
  if (o.seed) cfg.model.seed = *o.seed;
  if (o.precision) cfg.model.precision = *o.precision;
  if (auto ck = checkpoint_path(o)) {
    const int stored = int(8 * checkpoint_precision_bytes(*ck));
    if (o.precision && *o.precision != stored) {
      throw ConfigError("precision: --precision " + std::to_string(*o.precision) +
                        " but checkpoint holds " + std::to_string(stored) + "-bit tensors");
    }
    cfg.model.precision = stored;
  }
  cfg.validate();
  return cfg;
}

inline void require_task_vocab(const RunConfig& cfg) {
  if (cfg.model.vocab_size < Vocab::standard().size()) {
    throw ConfigError("vocab_size: tasks need at least " +
                      std::to_string(Vocab::standard().size()) + " tokens");
  }
}

inline json eval_json(const EvalReport& r) {
  return {{"loss", r.loss}, {"ppl", r.ppl}, {"exact_match", r.exact_match}, {"samples", r.samples}};
}

template <RealType Real>
Model<Real> load_model(const RunConfig& cfg, const Options& o) {
  Model<Real> m(cfg.model);
  if (auto ck = checkpoint_path(o)) {
    const auto d = read_checkpoint<Real>(*ck);
    copy_named(d.params, m.parameters(), "checkpoint parameters");
  }
  return m;
}

inline std::string checkpoint_name(std::size_t step) {
  std::ostringstream os;
  os << "step-" << std::setw(6) << std::setfill('0') << step << ".ckpt";
  return os.str();
}

template <RealType Real>
int cmd_train(const Options& o, const RunConfig& cfg, std::ostream& out) {
  require_task_vocab(cfg);
  Trainer<Real> t = o.resume.empty()
                        ? Trainer<Real>(cfg)
                        : Trainer<Real>::restore(read_checkpoint<Real>(o.resume), cfg);
  const auto dir = make_run_dir(o, "train");
  out << "run_dir=" << dir.string() << "\n";
  write_text(dir / "config.txt", to_text(t.config()));
  fs::create_directories(dir / "checkpoints");
  AppendFile metrics(dir / "metrics.jsonl");
  for (const auto& r : t.history()) metrics.line(to_json(r).dump());
  AppendFile evals(dir / "eval.jsonl");

  TrainHooks hooks;
  hooks.on_step = [&](const MetricRecord& r) { metrics.line(to_json(r).dump()); };
  hooks.on_eval = [&](std::size_t step, const EvalReport& r) {
    auto j = eval_json(r);
    j["step"] = step;
    evals.line(j.dump());
  };
  hooks.on_checkpoint = [&](std::size_t step) {
    t.save((dir / "checkpoints" / checkpoint_name(step)).string());
  };
  const auto t0 = std::chrono::steady_clock::now();
  const auto final_eval = run_training(t, hooks);
  const double seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  t.save((dir / "checkpoints" / "final.ckpt").string());

  auto summary = eval_json(final_eval);
  summary["steps"] = t.step_count();
  summary["wall_seconds"] = seconds;
  write_text(dir / "result.json", summary.dump(2) + "\n");
  out << "train steps=" << t.step_count() << " exact_match=" << final_eval.exact_match
      << " ppl=" << final_eval.ppl << " seconds=" << seconds << "\n";
  return 0;
}

template <RealType Real>
int cmd_sweep(const Options& o, const RunConfig& cfg, std::ostream& out) {
  require_task_vocab(cfg);
  const auto dir = make_run_dir(o, "sweep");
  out << "run_dir=" << dir.string() << "\n";
  write_text(dir / "config.txt", to_text(cfg));
  auto results = run_experiment<Real>(cfg, cfg.train.steps,
                                      [&](const std::string& name, const Trainer<Real>& t) {
                                        const auto sub = dir / name;
                                        fs::create_directories(sub);
                                        write_text(sub / "config.txt", to_text(t.config()));
                                        write_text(sub / "metrics.jsonl", to_jsonl(t.history()));
                                        t.save((sub / "final.ckpt").string());
                                        out << "variant " << name << " done\n";
                                      });

  // Loss curves side by side, one row per step.
  std::ostringstream curves;
  curves << "step";
  for (const auto& r : results) curves << '\t' << r.name;
  curves << '\n';
  for (std::size_t i = 0; i < cfg.train.steps; ++i) {
    curves << i + 1;
    for (const auto& r : results) {
      curves << '\t';
      if (i < r.series.size()) curves << config_detail::format_double(r.series[i].loss);
    }
    curves << '\n';
  }
  write_text(dir / "sweep_curves.tsv", curves.str());

  std::ostringstream table;
  table << "variant\tmemory_blocks\tmemory_enabled\tfinal_train_loss\teval_loss\teval_ppl\t"
           "exact_match\n";
  for (const auto& r : results) {
    table << r.name << '\t' << r.memory_blocks << '\t' << (r.memory_enabled ? "true" : "false")
          << '\t' << config_detail::format_double(r.series.empty() ? 0.0 : r.series.back().loss)
          << '\t' << config_detail::format_double(r.final_eval.loss) << '\t'
          << config_detail::format_double(r.final_eval.ppl) << '\t'
          << config_detail::format_double(r.final_eval.exact_match) << '\n';
  }
  write_text(dir / "sweep_table.tsv", table.str());
  out << table.str();
  return 0;
}

template <RealType Real>
int cmd_eval(const Options& o, const RunConfig& cfg, std::ostream& out) {
  require_task_vocab(cfg);
  const auto model = load_model<Real>(cfg, o);
  const auto samples =
      generate_samples(cfg.model.seed, "eval", cfg.task, cfg.task.eval_size);
  const auto report = evaluate(model, samples, cfg.task.loss_mode);
  const auto dir = make_run_dir(o, "eval");
  out << "run_dir=" << dir.string() << "\n";
  write_text(dir / "config.txt", to_text(cfg));
  write_text(dir / "eval.json", eval_json(report).dump(2) + "\n");
  out << "eval samples=" << report.samples << " exact_match=" << report.exact_match
      << " ppl=" << report.ppl << "\n";
  return 0;
}

inline std::vector<int> prompt_tokens(const Options& o, const RunConfig& cfg) {
  const std::string text = o.prompt.empty() ? cfg.prompt : o.prompt;
  if (!text.empty()) return encode(text);
  // Default probe: the first held-out sample of the configured task.
  return generate_samples(cfg.model.seed, "probe", cfg.task, 1).front().prompt();
}

template <RealType Real>
int cmd_generate(const Options& o, const RunConfig& cfg, std::ostream& out) {
  const std::string text = o.prompt.empty() ? cfg.prompt : o.prompt;
  if (text.empty()) throw UsageError("prompt: empty; set 'prompt' in the config or pass --prompt");
  const auto model = load_model<Real>(cfg, o);
  const auto tokens = encode(text);
  for (int t : tokens) {
    if (std::size_t(t) >= cfg.model.vocab_size) {
      throw TokenError("token '" + token_label(t) + "' outside vocab_size " +
                       std::to_string(cfg.model.vocab_size));
    }
  }
  Rng rng(cfg.model.seed, "generate");
  auto st = model.new_state();
  const auto ids = model.generate(st, tokens, cfg.max_new, DecodeOptions{cfg.temperature}, &rng);
  std::vector<std::string> words;
  for (int id : ids) words.push_back(token_label(id));
  const auto dir = make_run_dir(o, "generate");
  out << "run_dir=" << dir.string() << "\n";
  write_text(dir / "config.txt", to_text(cfg));
  json j = {{"prompt", text}, {"output_ids", ids}, {"output", words}};
  write_text(dir / "generation.json", j.dump(2) + "\n");
  std::string joined;
  for (const auto& w : words) joined += (joined.empty() ? "" : " ") + w;
  out << "output=" << joined << "\n";
  return 0;
}

template <RealType Real>
int cmd_inspect(const Options& o, const RunConfig& cfg, std::ostream& out) {
  const auto model = load_model<Real>(cfg, o);
  const std::size_t block = cfg.inspect_block;
  if (o.inspect_what == "heatmap") {
    const auto prompt = prompt_tokens(o, cfg);
    auto before = capture_heatmap(model, model.new_state(), prompt, block, 0);
    auto st = model.new_state();
    model.generate(st, prompt, cfg.decode_steps);
    auto after = capture_heatmap(model, st, prompt, block, cfg.decode_steps);
    const auto dir = make_run_dir(o, "inspect-heatmap");
    out << "run_dir=" << dir.string() << "\n";
    write_text(dir / "config.txt", to_text(cfg));
    write_heatmap((dir / "heatmap_before.tsv").string(), before);
    write_heatmap((dir / "heatmap_after.tsv").string(), after);
    const double l1 = heatmap_l1(before, after);
    json j = {{"block", block},
              {"decode_steps", cfg.decode_steps},
              {"rows", before.rows()},
              {"cols", before.cols()},
              {"normalization", before.normalization},
              {"l1", l1}};
    write_text(dir / "heatmap.json", j.dump(2) + "\n");
    out << "heatmap l1=" << l1 << "\n";
  } else if (o.inspect_what == "slots") {
    require_task_vocab(cfg);
    const auto probes = generate_samples(cfg.model.seed, "probe", cfg.task, cfg.probe_size);
    const auto ranking = rank_slots(model, probes, cfg.top_m, block);
    const auto dir = make_run_dir(o, "inspect-slots");
    out << "run_dir=" << dir.string() << "\n";
    write_text(dir / "config.txt", to_text(cfg));
    std::ostringstream ss;
    write_slot_reports(ss, ranking);
    write_text(dir / "slots.jsonl", ss.str());
    out << ss.str();
  } else {
    const auto prompt = prompt_tokens(o, cfg);
    Tape<Real> tape(false);
    auto st = model.new_state();
    auto logits = model.ingest(tape, st, prompt);
    const auto before = st;
    for (std::size_t i = 0; i < cfg.decode_steps; ++i) {
      logits = model.forward_segment(tape, st, {Model<Real>::argmax(logits)});
    }
    const auto rep = memory_delta(before, st, cfg.top_m);
    const auto dir = make_run_dir(o, "inspect-delta");
    out << "run_dir=" << dir.string() << "\n";
    write_text(dir / "config.txt", to_text(cfg));
    write_text(dir / "delta.json", to_json(rep).dump(2) + "\n");
    out << "delta total_l1=" << rep.total() << "\n";
  }
  return 0;
}

template <RealType Real>
int run_command(const Options& o, const RunConfig& cfg, std::ostream& out) {
  if (o.command == "train") return cmd_train<Real>(o, cfg, out);
  if (o.command == "sweep") return cmd_sweep<Real>(o, cfg, out);
  if (o.command == "eval") return cmd_eval<Real>(o, cfg, out);
  if (o.command == "generate") return cmd_generate<Real>(o, cfg, out);
  if (o.command == "inspect") return cmd_inspect<Real>(o, cfg, out);
  throw UsageError("unknown subcommand '" + o.command + "'");
}

inline std::string error_line(const std::string& kind, const std::string& message) {
  return json{{"status", "error"}, {"kind", kind}, {"message", message}}.dump();
}

}  // namespace detail

// Parses argv and runs the selected subcommand. Returns the process exit
// status: 0 on success, 1 for runtime failures, 2 for command-line misuse.
inline int dispatch(int argc, const char* const* argv, std::ostream& out = std::cout,
                    std::ostream& err = std::cerr) {
  Options o;
  CLI::App app{"LM2 memory-augmented decoder: training, evaluation and memory inspection"};
  app.require_subcommand(1);
  app.fallthrough();
  app.add_option("--config", o.config_path, "Run config file (key = value lines)");
  app.add_option("--out", o.out_root, std::string("Output root; defaults to $") + kOutputRootEnv +
                                          " or ./runs");
  app.add_option("--seed", o.seed, "Override the config seed");
  app.add_option("--resume", o.resume, "Continue training from a checkpoint");
  app.add_option("--precision", o.precision, "Tensor precision in bits")
      ->check(CLI::IsMember({32, 64}));
  app.add_option("--set", o.sets, "Extra 'key=value' config assignment (repeatable)");

  auto* train = app.add_subcommand("train", "Train one model");
  auto* sweep = app.add_subcommand("sweep", "Memory-depth sweep: k values plus memory-off");
  auto* eval = app.add_subcommand("eval", "Perplexity and exact match on a seeded eval set");
  auto* gen = app.add_subcommand("generate", "Decode a continuation of a prompt");
  auto* inspect = app.add_subcommand("inspect", "Memory analysis: heatmap, slots or delta");
  for (auto* sub : {eval, gen, inspect}) {
    sub->add_option("--checkpoint", o.checkpoint, "Checkpoint with trained parameters");
  }
  for (auto* sub : {gen, inspect}) sub->add_option("--prompt", o.prompt, "Prompt text");
  inspect->add_option("what", o.inspect_what, "heatmap | slots | delta")
      ->required()
      ->check(CLI::IsMember({"heatmap", "slots", "delta"}));
  (void)train;
  (void)sweep;

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << detail::error_line("usage", e.what()) << "\n";
    return 2;
  }
  o.command = app.get_subcommands().front()->get_name();
  if (!o.resume.empty() && o.command != "train") {
    err << detail::error_line("usage", "--resume applies to train only") << "\n";
    return 2;
  }

  try {
    const RunConfig cfg = detail::effective_config(o);
    return cfg.model.precision == 64 ? detail::run_command<double>(o, cfg, out)
                                     : detail::run_command<float>(o, cfg, out);
  } catch (const Error& e) {
    err << detail::error_line(e.kind(), e.what()) << "\n";
  } catch (const std::filesystem::filesystem_error& e) {
    err << detail::error_line("io", e.what()) << "\n";
  } catch (const std::exception& e) {
    err << detail::error_line("internal", e.what()) << "\n";
  }
  return 1;
}

}  // namespace lm2::cli
