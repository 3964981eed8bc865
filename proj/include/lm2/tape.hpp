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

#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "lm2/error.hpp"
#include "lm2/tensor.hpp"

namespace lm2 {

// Linear record of executed operations for reverse-mode differentiation.
//
// Operations append entries in execution order, so the record is already a
// topological order and backward() is a single reverse sweep. A tape is
// single-writer; it is never shared between concurrently running forwards.
template <RealType Real>
class Tape {
 public:
  using BackwardFn = std::function<void()>;

  explicit Tape(bool recording = true) : recording_(recording) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const noexcept { return recording_; }
  std::size_t size() const noexcept { return entries_.size(); }
  bool consumed() const noexcept { return consumed_; }

  // When set, every recorded output is scanned for NaN/Inf and the first
  // offending operation is reported by name.
  void set_check_finite(bool on) noexcept { check_finite_ = on; }

  // Registers `out` as the result of `op`. The backward closure is retained
  // only if recording is on and at least one input is tracked; `out` then
  // becomes tracked itself.
  Tensor<Real> record(const char* op, std::vector<Tensor<Real>> inputs,
                      Tensor<Real> out, BackwardFn backward) {
    if (check_finite_ && !out.all_finite()) {
      throw NumericError(std::string("non-finite value produced by '") + op +
                         "' (output shape " + shape_string(out.shape()) + ")");
    }
    if (!recording_) return out;
    bool tracked = false;
    for (const auto& t : inputs) tracked = tracked || t.requires_grad();
    if (!tracked) return out;
    if (consumed_) {
      throw StateError("tape was already differentiated; call reset() first");
    }
    out.set_requires_grad(true);
    entries_.push_back(Entry{op, std::move(inputs), out, std::move(backward)});
    return out;
  }

  // Reverse sweep from a scalar loss. Fills grad() of every tracked tensor
  // reachable from `loss`; parameter grads accumulate across calls on
  // different tapes until the caller zeroes them.
  void backward(Tensor<Real> loss) {
    if (loss.size() != 1) {
      throw DimensionError("backward() needs a scalar loss, got shape " +
                           shape_string(loss.shape()));
    }
    if (!loss.requires_grad()) {
      throw StateError("backward() on an untracked loss");
    }
    if (consumed_) {
      throw StateError("backward() already ran on this tape; call reset() first");
    }
    consumed_ = true;
    loss.grad()[0] += Real(1);
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
      if (!it->output.has_grad()) continue;
      it->backward();
      if (!check_finite_) continue;
      for (const auto& in : it->inputs) {
        if (!in.has_grad()) continue;
        for (Real g : in.grad()) {
          if (!std::isfinite(g)) {
            throw NumericError(std::string("backward of '") + it->op +
                               "' produced a non-finite gradient");
          }
        }
      }
    }
  }

  void reset() {
    entries_.clear();
    consumed_ = false;
  }

  // Operation names in execution order (diagnostics and tests).
  std::vector<std::string> op_names() const {
    std::vector<std::string> names;
    names.reserve(entries_.size());
    for (const auto& e : entries_) names.emplace_back(e.op);
    return names;
  }

 private:
  struct Entry {
    const char* op;
    std::vector<Tensor<Real>> inputs;
    Tensor<Real> output;
    BackwardFn backward;
  };

  std::vector<Entry> entries_;
  bool recording_ = true;
  bool consumed_ = false;
  bool check_finite_ = true;
};

}  // namespace lm2
