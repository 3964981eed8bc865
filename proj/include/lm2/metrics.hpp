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

// Per-step training metrics and their line-delimited JSON form.

#pragma once

#include <cstddef>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"
#include "lm2/error.hpp"

namespace lm2 {

struct MetricRecord {
  std::size_t step = 0;    // optimizer steps completed
  std::size_t tokens = 0;  // input tokens consumed so far
  double loss = 0;
  double ppl = 0;
  double grad_norm = 0;    // before clipping

  bool operator==(const MetricRecord&) const = default;
};

inline nlohmann::json to_json(const MetricRecord& r) {
  return {{"step", r.step},
          {"tokens", r.tokens},
          {"loss", r.loss},
          {"ppl", r.ppl},
          {"grad_norm", r.grad_norm}};
}

inline MetricRecord metric_from_json(const nlohmann::json& j) {
  try {
    return {j.at("step").get<std::size_t>(), j.at("tokens").get<std::size_t>(),
            j.at("loss").get<double>(), j.at("ppl").get<double>(),
            j.at("grad_norm").get<double>()};
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed metric record: ") + e.what());
  }
}

inline std::string to_jsonl(const std::vector<MetricRecord>& records) {
  std::string out;
  for (const auto& r : records) out += to_json(r).dump() + "\n";
  return out;
}

inline std::vector<MetricRecord> metrics_from_jsonl(std::istream& in) {
  std::vector<MetricRecord> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      out.push_back(metric_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::parse_error& e) {
      throw FormatError(std::string("malformed metric line: ") + e.what());
    }
  }
  return out;
}

}  // namespace lm2
