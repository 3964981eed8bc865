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

// Synthetic long-context tasks over a closed word-level vocabulary.
//
// Stories are short templated sentences with filler words scattered between
// them. Every sample carries its question and answer, and solve() recovers
// the answer by parsing the decoded story, independently of the generator.

#pragma once

#include <algorithm>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <variant>
#include <vector>

#include "json.hpp"
#include "lm2/config.hpp"
#include "lm2/error.hpp"
#include "lm2/rng.hpp"

namespace lm2 {

class Vocab {
 public:
  static constexpr int kPad = 0, kBos = 1, kEos = 2, kQuery = 3;
  static constexpr int kReserved = 16;

  // The fixed 512-word vocabulary shared by every task.
  static const Vocab& standard() {
    static const Vocab v = build();
    return v;
  }

  std::size_t size() const { return words_.size(); }

  int id(std::string_view word) const {
    auto it = index_.find(std::string(word));
    if (it == index_.end()) throw TokenError("unknown token '" + std::string(word) + "'");
    return it->second;
  }

  const std::string& word(int id) const {
    if (id < 0 || std::size_t(id) >= words_.size()) {
      throw TokenError("token id " + std::to_string(id) + " outside vocabulary of " +
                       std::to_string(words_.size()));
    }
    return words_[std::size_t(id)];
  }

  bool contains(std::string_view word) const { return index_.count(std::string(word)) > 0; }

  const std::vector<int>& names() const { return names_; }
  const std::vector<int>& locations() const { return locations_; }
  const std::vector<int>& objects() const { return objects_; }
  const std::vector<int>& keys() const { return keys_; }
  const std::vector<int>& values() const { return values_; }
  const std::vector<int>& fillers() const { return fillers_; }
  const std::vector<int>& digits() const { return digits_; }

 private:
  int add(const std::string& w) {
    const int id = int(words_.size());
    if (!index_.emplace(w, id).second) throw ConfigError("duplicate vocabulary word '" + w + "'");
    words_.push_back(w);
    return id;
  }

  static Vocab build() {
    Vocab v;
    for (const char* w : {"<pad>", "<bos>", "<eos>", "<q>"}) v.add(w);
    for (int i = 4; i < kReserved; ++i) v.add("<r" + std::to_string(i) + ">");
    for (const char* w : {".", "?", "went", "to", "took", "where", "is", "in", "yes", "no",
                          "did", "not", "go", "how", "many", "objects", "take"}) {
      v.add(w);
    }
    for (int i = 0; i <= 9; ++i) v.digits_.push_back(v.add(std::to_string(i)));
    for (const char* w : {"mary", "john", "sandra", "daniel", "bill", "fred", "julie", "jeff",
                          "emily", "lily", "greg", "brian", "anna", "omar", "yann", "wei"}) {
      v.names_.push_back(v.add(w));
    }
    for (const char* w : {"kitchen", "garden", "office", "bedroom", "bathroom", "hallway",
                          "cinema", "park", "school", "library", "garage", "cellar", "attic",
                          "beach", "forest", "station"}) {
      v.locations_.push_back(v.add(w));
    }
    for (const char* w : {"apple", "football", "milk", "book", "pen", "cup", "ball", "hat",
                          "key", "box", "lamp", "coin", "shoe", "phone", "bag", "card"}) {
      v.objects_.push_back(v.add(w));
    }
    for (int i = 0; i < 64; ++i) v.keys_.push_back(v.add("k" + std::to_string(i)));
    for (int i = 0; i < 64; ++i) v.values_.push_back(v.add("v" + std::to_string(i)));
    for (int i = 0; v.words_.size() < 512; ++i) v.fillers_.push_back(v.add("f" + std::to_string(i)));
    return v;
  }

  std::vector<std::string> words_;
  std::unordered_map<std::string, int> index_;
  std::vector<int> names_, locations_, objects_, keys_, values_, fillers_, digits_;
};

// Whitespace-separated words to ids. Unknown words raise TokenError naming
// the word.
inline std::vector<int> encode(std::string_view text, const Vocab& vocab = Vocab::standard()) {
  std::vector<int> ids;
  std::istringstream in{std::string(text)};
  std::string w;
  while (in >> w) ids.push_back(vocab.id(w));
  return ids;
}

inline std::string decode(const std::vector<int>& ids, const Vocab& vocab = Vocab::standard()) {
  std::string out;
  for (int id : ids) {
    if (!out.empty()) out += ' ';
    out += vocab.word(id);
  }
  return out;
}

inline std::string task_name(TaskKind k) { return config_detail::kTaskKinds.format(k); }

struct Sample {
  std::vector<int> context, question, answer;
  TaskKind kind = TaskKind::recall;
  std::vector<std::size_t> needle_positions;  // indices into context

  std::size_t context_len() const { return context.size(); }

  // context ⧺ question: what the model sees before answering.
  std::vector<int> prompt() const {
    std::vector<int> p = context;
    p.insert(p.end(), question.begin(), question.end());
    return p;
  }

  // context ⧺ question ⧺ answer.
  std::vector<int> sequence() const {
    auto s = prompt();
    s.insert(s.end(), answer.begin(), answer.end());
    return s;
  }

  bool operator==(const Sample&) const = default;
};

namespace task_detail {

inline int pick(Rng& rng, const std::vector<int>& from) { return from[rng.below(from.size())]; }

// k distinct entries of `from`, in random order.
inline std::vector<int> pick_distinct(Rng& rng, const std::vector<int>& from, std::size_t k) {
  if (k > from.size()) {
    throw ConfigError("cannot draw " + std::to_string(k) + " distinct tokens from a pool of " +
                      std::to_string(from.size()));
  }
  std::vector<int> pool = from;
  for (std::size_t i = 0; i < k; ++i) std::swap(pool[i], pool[i + rng.below(pool.size() - i)]);
  pool.resize(k);
  return pool;
}

// Joins sentences with `filler_len` filler words spread over the gaps before,
// between and after them. Records the start of each sentence.
inline std::vector<int> weave(Rng& rng, const std::vector<std::vector<int>>& sentences,
                              std::size_t filler_len, std::vector<std::size_t>* starts) {
  const Vocab& v = Vocab::standard();
  std::vector<std::size_t> gap(sentences.size() + 1, 0);
  for (std::size_t i = 0; i < filler_len; ++i) ++gap[rng.below(gap.size())];
  std::vector<int> out;
  for (std::size_t s = 0; s <= sentences.size(); ++s) {
    for (std::size_t i = 0; i < gap[s]; ++i) out.push_back(pick(rng, v.fillers()));
    if (s == sentences.size()) break;
    if (starts) starts->push_back(out.size());
    out.insert(out.end(), sentences[s].begin(), sentences[s].end());
  }
  return out;
}

inline std::vector<int> words(std::initializer_list<std::variant<const char*, int>> parts) {
  const Vocab& v = Vocab::standard();
  std::vector<int> out;
  for (const auto& p : parts) {
    if (std::holds_alternative<int>(p)) {
      out.push_back(std::get<int>(p));
    } else {
      out.push_back(v.id(std::get<const char*>(p)));
    }
  }
  return out;
}

}  // namespace task_detail

struct RecallOptions {
  std::size_t key_alphabet = 32;    // keys are drawn from the first this many
  std::size_t value_alphabet = 32;
  std::optional<std::size_t> query_pair;  // which pair (in story order) to ask about
};

// Key/value assignments "k v" scattered through filler; the question names a
// key and the answer is its value.
inline Sample gen_recall(Rng& rng, std::size_t n_pairs, std::size_t filler_len,
                         const RecallOptions& opt = {}) {
  using namespace task_detail;
  const Vocab& v = Vocab::standard();
  if (n_pairs < 1) throw ConfigError("n_pairs: must be at least 1");
  if (opt.key_alphabet < n_pairs || opt.key_alphabet > v.keys().size()) {
    throw ConfigError("recall_keys: need between n_pairs=" + std::to_string(n_pairs) + " and " +
                      std::to_string(v.keys().size()) + " distinct keys to avoid collisions");
  }
  if (opt.value_alphabet < 1 || opt.value_alphabet > v.values().size()) {
    throw ConfigError("recall_values: must lie in [1, " + std::to_string(v.values().size()) + "]");
  }
  const std::vector<int> key_pool(v.keys().begin(), v.keys().begin() + long(opt.key_alphabet));
  const std::vector<int> value_pool(v.values().begin(),
                                    v.values().begin() + long(opt.value_alphabet));
  const auto keys = pick_distinct(rng, key_pool, n_pairs);
  std::vector<std::vector<int>> pairs;
  for (int k : keys) pairs.push_back({k, pick(rng, value_pool)});
  const std::size_t q = opt.query_pair ? *opt.query_pair : rng.below(n_pairs);
  if (q >= n_pairs) throw ConfigError("query_pair out of range");

  Sample s;
  s.kind = TaskKind::recall;
  std::vector<std::size_t> starts;
  s.context = weave(rng, pairs, filler_len, &starts);
  s.question = {Vocab::kQuery, pairs[q][0]};
  s.answer = {pairs[q][1]};
  s.needle_positions = {starts[q], starts[q] + 1};
  return s;
}

namespace task_detail {

// "where is <obj> ?": one person goes somewhere then takes the object;
// the others move around as distractors.
inline Sample two_fact(Rng& rng, std::size_t filler_len) {
  const Vocab& v = Vocab::standard();
  const auto people = pick_distinct(rng, v.names(), 3);
  const auto places = pick_distinct(rng, v.locations(), 3);
  const auto things = pick_distinct(rng, v.objects(), 2);
  // Sentence list: went(p_i, l_i) for all i, took(p0, o0), took(p1, o1).
  std::vector<std::vector<int>> went, took;
  for (std::size_t i = 0; i < 3; ++i) went.push_back(words({people[i], "went", "to", places[i], "."}));
  for (std::size_t i = 0; i < 2; ++i) took.push_back(words({people[i], "took", things[i], "."}));
  // Interleave so each took follows its owner's went.
  std::vector<std::vector<int>> order = {went[0], went[1], went[2]};
  const std::size_t pos0 = 1 + rng.below(3);
  order.insert(order.begin() + long(pos0), took[0]);
  std::size_t pos1 = 0;
  for (std::size_t i = 0; i < order.size(); ++i)
    if (order[i] == went[1]) pos1 = i + 1;
  pos1 += rng.below(order.size() - pos1 + 1);
  order.insert(order.begin() + long(pos1), took[1]);

  const std::size_t target = rng.below(2);
  Sample s;
  s.kind = TaskKind::two_fact;
  std::vector<std::size_t> starts;
  s.context = weave(rng, order, filler_len, &starts);
  for (std::size_t i = 0; i < order.size(); ++i) {
    if (order[i] == went[target] || order[i] == took[target]) s.needle_positions.push_back(starts[i]);
  }
  s.question = words({Vocab::kQuery, "where", "is", things[target], "?"});
  s.answer = {places[target]};
  return s;
}

// "is <person> in <place> ?" where the person may have moved since.
inline Sample yes_no(Rng& rng, std::size_t filler_len) {
  const Vocab& v = Vocab::standard();
  const auto people = pick_distinct(rng, v.names(), 2);
  const auto places = pick_distinct(rng, v.locations(), 3);
  std::vector<std::vector<int>> sents = {words({people[0], "went", "to", places[0], "."}),
                                         words({people[1], "went", "to", places[1], "."}),
                                         words({people[0], "went", "to", places[2], "."})};
  std::swap(sents[0], sents[rng.below(2)]);  // the distractor may come first
  const bool yes = rng.coin();
  // Yes: ask about the latest place. No: ask about the earlier one or the other person's.
  const int asked = yes ? places[2] : (rng.coin() ? places[0] : places[1]);
  Sample s;
  s.kind = TaskKind::yes_no;
  std::vector<std::size_t> starts;
  s.context = weave(rng, sents, filler_len, &starts);
  for (std::size_t i = 0; i < sents.size(); ++i)
    if (sents[i][0] == people[0]) s.needle_positions.push_back(starts[i]);
  s.question = words({Vocab::kQuery, "is", people[0], "in", asked, "?"});
  s.answer = {v.id(yes ? "yes" : "no")};
  return s;
}

// "how many objects did <person> take ?" with another person's takes mixed in.
inline Sample counting(Rng& rng, std::size_t filler_len) {
  const Vocab& v = Vocab::standard();
  const auto people = pick_distinct(rng, v.names(), 2);
  const std::size_t count = rng.below(7);  // 0..6
  const std::size_t distract = rng.below(4);
  const auto things = pick_distinct(rng, v.objects(), count + distract);
  std::vector<std::pair<bool, std::vector<int>>> sents;
  for (std::size_t i = 0; i < count; ++i) sents.push_back({true, words({people[0], "took", things[i], "."})});
  for (std::size_t i = 0; i < distract; ++i) {
    sents.push_back({false, words({people[1], "took", things[count + i], "."})});
  }
  for (std::size_t i = sents.size(); i > 1; --i) std::swap(sents[i - 1], sents[rng.below(i)]);
  std::vector<std::vector<int>> plain;
  for (auto& [own, w] : sents) plain.push_back(w);
  Sample s;
  s.kind = TaskKind::counting;
  std::vector<std::size_t> starts;
  s.context = weave(rng, plain, filler_len, &starts);
  for (std::size_t i = 0; i < sents.size(); ++i)
    if (sents[i].first) s.needle_positions.push_back(starts[i]);
  s.question = words({Vocab::kQuery, "how", "many", "objects", "did", people[0], "take", "?"});
  s.answer = {v.digits()[count]};
  return s;
}

}  // namespace task_detail

// Negation story and its control: identical except that the target fact is
// negated in the first, so the yes/no answers differ.
inline std::pair<Sample, Sample> gen_negation_pair(Rng& rng, std::size_t filler_len) {
  using namespace task_detail;
  const Vocab& v = Vocab::standard();
  const auto people = pick_distinct(rng, v.names(), 2);
  const auto places = pick_distinct(rng, v.locations(), 2);
  const auto affirm = words({people[0], "went", "to", places[0], "."});
  const auto negate = words({people[0], "did", "not", "go", "to", places[0], "."});
  const auto other = words({people[1], "went", "to", places[1], "."});
  const bool other_first = rng.coin();
  // Both variants replay the same filler draw.
  const std::uint64_t weave_seed = rng.next_u64();
  auto build = [&](bool negated) {
    const auto& target = negated ? negate : affirm;
    std::vector<std::vector<int>> sents =
        other_first ? std::vector<std::vector<int>>{other, target}
                    : std::vector<std::vector<int>>{target, other};
    Rng local(weave_seed);
    Sample s;
    s.kind = TaskKind::negation;
    std::vector<std::size_t> starts;
    s.context = weave(local, sents, filler_len, &starts);
    s.needle_positions = {starts[other_first ? 1 : 0]};
    s.question = words({Vocab::kQuery, "is", people[0], "in", places[0], "?"});
    s.answer = {v.id(negated ? "no" : "yes")};
    return s;
  };
  return {build(true), build(false)};
}

inline Sample gen_qa(Rng& rng, TaskKind kind, std::size_t filler_len) {
  switch (kind) {
    case TaskKind::two_fact:
      return task_detail::two_fact(rng, filler_len);
    case TaskKind::yes_no:
      return task_detail::yes_no(rng, filler_len);
    case TaskKind::counting:
      return task_detail::counting(rng, filler_len);
    case TaskKind::negation: {
      const bool negated = rng.coin();
      auto [neg, ctrl] = gen_negation_pair(rng, filler_len);
      return negated ? neg : ctrl;
    }
    case TaskKind::recall:
      break;
  }
  throw ConfigError("gen_qa: kind must be two_fact, yes_no, counting or negation");
}

// One sample of the configured task.
inline Sample generate_sample(Rng& rng, const TaskSpec& spec) {
  if (spec.kind == TaskKind::recall) {
    RecallOptions opt;
    opt.key_alphabet = spec.recall_keys;
    opt.value_alphabet = spec.recall_values;
    return gen_recall(rng, spec.n_pairs, spec.filler_len, opt);
  }
  return gen_qa(rng, spec.kind, spec.filler_len);
}

inline std::vector<Sample> generate_samples(std::uint64_t seed, std::string_view stream,
                                            const TaskSpec& spec, std::size_t count) {
  Rng rng(seed, stream);
  std::vector<Sample> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(generate_sample(rng, spec));
  return out;
}

// Rule-based solver: parses the decoded story and question and returns the
// answer tokens, or nothing if the question is not understood.
inline std::optional<std::vector<int>> solve(const Sample& s) {
  const Vocab& v = Vocab::standard();
  auto is_filler = [&](int id) { return id >= v.fillers().front(); };
  std::vector<int> story;
  for (int id : s.context)
    if (!is_filler(id)) story.push_back(id);
  const auto& q = s.question;
  if (q.empty() || q[0] != Vocab::kQuery) return std::nullopt;

  if (q.size() == 2) {  // recall: <q> key
    for (std::size_t i = 0; i + 1 < story.size(); ++i)
      if (story[i] == q[1]) return std::vector<int>{story[i + 1]};
    return std::nullopt;
  }

  // Split the story into sentences and track world state.
  std::map<int, int> location;              // person -> place (-1 = known not there)
  std::map<int, std::vector<int>> carried;  // person -> objects taken
  std::map<int, int> holder;                // object -> person
  std::map<int, int> excluded;              // person -> place ruled out
  std::vector<std::string> w;
  auto flush = [&] {
    if (w.size() == 4 && w[1] == "went" && w[2] == "to") {
      location[v.id(w[0])] = v.id(w[3]);
      excluded.erase(v.id(w[0]));
    } else if (w.size() == 3 && w[1] == "took") {
      carried[v.id(w[0])].push_back(v.id(w[2]));
      holder[v.id(w[2])] = v.id(w[0]);
    } else if (w.size() == 6 && w[1] == "did" && w[2] == "not" && w[3] == "go" && w[4] == "to") {
      excluded[v.id(w[0])] = v.id(w[5]);
      if (location.count(v.id(w[0])) && location[v.id(w[0])] == v.id(w[5])) {
        location.erase(v.id(w[0]));
      }
    }
    w.clear();
  };
  for (int id : story) {
    if (v.word(id) == ".") {
      flush();
    } else {
      w.push_back(v.word(id));
    }
  }

  std::vector<std::string> qw;
  for (std::size_t i = 1; i < q.size(); ++i) qw.push_back(v.word(q[i]));
  if (qw.size() == 4 && qw[0] == "where" && qw[1] == "is" && qw[3] == "?") {
    auto h = holder.find(v.id(qw[2]));
    if (h == holder.end() || !location.count(h->second)) return std::nullopt;
    return std::vector<int>{location[h->second]};
  }
  if (qw.size() == 5 && qw[0] == "is" && qw[2] == "in" && qw[4] == "?") {
    const int person = v.id(qw[1]), place = v.id(qw[3]);
    const bool there = location.count(person) && location[person] == place;
    return std::vector<int>{v.id(there ? "yes" : "no")};
  }
  if (qw.size() == 7 && qw[0] == "how" && qw[1] == "many" && qw[3] == "did" && qw[5] == "take") {
    const std::size_t n = carried[v.id(qw[4])].size();
    if (n > 9) return std::nullopt;
    return std::vector<int>{v.digits()[n]};
  }
  return std::nullopt;
}

inline nlohmann::json to_json(const Sample& s) {
  return {{"kind", task_name(s.kind)},
          {"context", decode(s.context)},
          {"question", decode(s.question)},
          {"answer", decode(s.answer)},
          {"needle_positions", s.needle_positions},
          {"context_len", s.context_len()}};
}

inline Sample sample_from_json(const nlohmann::json& j) {
  try {
    Sample s;
    s.kind = config_detail::kTaskKinds.parse("kind", j.at("kind").get<std::string>());
    s.context = encode(j.at("context").get<std::string>());
    s.question = encode(j.at("question").get<std::string>());
    s.answer = encode(j.at("answer").get<std::string>());
    s.needle_positions = j.at("needle_positions").get<std::vector<std::size_t>>();
    if (j.contains("context_len") && j["context_len"].get<std::size_t>() != s.context.size()) {
      throw FormatError("sample context_len disagrees with its context");
    }
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed sample record: ") + e.what());
  } catch (const ConfigError& e) {
    throw FormatError(std::string("malformed sample record: ") + e.what());
  }
}

// One JSON object per line.
inline void write_jsonl(std::ostream& out, const std::vector<Sample>& samples) {
  for (const auto& s : samples) out << to_json(s).dump() << '\n';
}

inline std::vector<Sample> read_jsonl(std::istream& in) {
  std::vector<Sample> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(std::string("malformed sample line: ") + e.what());
    }
    out.push_back(sample_from_json(j));
  }
  return out;
}

}  // namespace lm2
