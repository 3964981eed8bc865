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

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "lm2/rng.hpp"
#include "lm2/tape.hpp"
#include "lm2/tensor.hpp"

namespace lm2 {

struct GradCheckOptions {
  double h = 1e-6;
  double tol = 1e-5;
  // Step is h · max(1, |θ|) so large parameters get proportionally larger steps.
  bool scale_step = true;
  // Denominator floor of the relative error, so coordinates whose true
  // gradient is numerically zero are judged by absolute error.
  double abs_floor = 1e-6;
  std::size_t max_coords = 64;
  std::uint64_t seed = 0x5eed;
};

struct ParamCheck {
  std::string name;
  std::size_t coords_checked = 0;
  double max_rel_err = 0.0;
  double max_abs_err = 0.0;
  bool passed = true;
};

struct GradCheckReport {
  std::vector<ParamCheck> params;
  double tol = 0.0;
  bool passed() const {
    return std::all_of(params.begin(), params.end(),
                       [](const ParamCheck& p) { return p.passed; });
  }
  double worst_rel_err() const {
    double w = 0.0;
    for (const auto& p : params) w = std::max(w, p.max_rel_err);
    return w;
  }
};

using LossFn = std::function<Tensor<double>(Tape<double>&)>;
using NamedParam = std::pair<std::string, Tensor<double>>;

// Compares reverse-mode gradients of `loss` against central differences on a
// seeded subsample of at most `max_coords` coordinates per parameter.
// Failures are reported, never thrown.
inline GradCheckReport grad_check(const LossFn& loss, std::vector<NamedParam> params,
                                  const GradCheckOptions& opt = {}) {
  for (auto& [name, p] : params) {
    p.set_requires_grad(true);
    p.zero_grad();
  }
  {
    Tape<double> tape;
    tape.backward(loss(tape));
  }
  auto eval = [&loss]() {
    Tape<double> tape(false);
    return loss(tape).item();
  };

  Rng rng(opt.seed);
  GradCheckReport report;
  report.tol = opt.tol;
  for (auto& [name, p] : params) {
    ParamCheck pc;
    pc.name = name;
    std::vector<std::size_t> coords(p.size());
    for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
    if (coords.size() > opt.max_coords) {
      std::shuffle(coords.begin(), coords.end(), rng.engine());
      coords.resize(opt.max_coords);
    }
    const std::vector<double> analytic(p.grad().begin(), p.grad().end());
    for (std::size_t c : coords) {
      double& theta = p.data()[c];
      const double saved = theta;
      const double step = opt.scale_step ? opt.h * std::max(1.0, std::abs(saved)) : opt.h;
      theta = saved + step;
      const double up = eval();
      theta = saved - step;
      const double down = eval();
      theta = saved;
      const double numeric = (up - down) / (2.0 * step);
      const double a = analytic[c];
      const double abs_err = std::abs(a - numeric);
      const double denom = std::max({std::abs(a), std::abs(numeric), opt.abs_floor});
      pc.max_abs_err = std::max(pc.max_abs_err, abs_err);
      pc.max_rel_err = std::max(pc.max_rel_err, abs_err / denom);
      ++pc.coords_checked;
    }
    pc.passed = pc.max_rel_err <= opt.tol;
    report.params.push_back(pc);
  }
  return report;
}

}  // namespace lm2
