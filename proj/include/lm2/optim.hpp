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

// AdamW with linear warmup, cosine decay and global-norm clipping.

#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "lm2/config.hpp"
#include "lm2/error.hpp"
#include "lm2/tensor.hpp"

namespace lm2 {

template <RealType Real>
using NamedTensors = std::vector<std::pair<std::string, Tensor<Real>>>;

// Learning rate for the update that takes the optimizer from `step` to
// step + 1.
inline double scheduled_lr(const TrainConfig& c, std::size_t step) {
  if (c.warmup_steps > 0 && step < c.warmup_steps) {
    return c.lr * double(step + 1) / double(c.warmup_steps);
  }
  const std::size_t decay_steps = c.steps > c.warmup_steps ? c.steps - c.warmup_steps : 0;
  if (decay_steps == 0) return c.lr;
  const double progress = std::min(1.0, double(step - c.warmup_steps) / double(decay_steps));
  const double floor = c.lr * c.min_lr_ratio;
  return floor + (c.lr - floor) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

template <RealType Real>
double global_grad_norm(const NamedTensors<Real>& params) {
  double sq = 0;
  for (const auto& [name, p] : params) {
    if (!p.has_grad()) continue;
    for (Real g : p.grad()) sq += double(g) * double(g);
  }
  return std::sqrt(sq);
}

// Rescales gradients so their global norm is at most `max_norm`. Returns
// the norm before clipping.
template <RealType Real>
double clip_grad_norm(const NamedTensors<Real>& params, double max_norm) {
  const double norm = global_grad_norm(params);
  if (!std::isfinite(norm)) throw NumericError("gradient norm is not finite");
  if (norm > max_norm) {
    const Real s = Real(max_norm / norm);
    for (const auto& [name, p] : params) {
      if (!p.has_grad()) continue;
      for (Real& g : Tensor<Real>(p).grad()) g *= s;
    }
  }
  return norm;
}

template <RealType Real>
struct OptimState {
  TrainConfig config;
  std::vector<std::string> names;
  std::vector<Tensor<Real>> m, v;  // first and second moments, shaped like the parameters
  std::size_t step = 0;

  static OptimState create(const TrainConfig& cfg, const NamedTensors<Real>& params) {
    OptimState s;
    s.config = cfg;
    for (const auto& [name, p] : params) {
      s.names.push_back(name);
      s.m.emplace_back(p.shape());
      s.v.emplace_back(p.shape());
    }
    return s;
  }
};

// Weight decay applies to matrices only; gains and biases are exempt.
inline bool decays(const Shape& shape) { return shape.size() == 2; }

// One decoupled-weight-decay Adam update using the gradients currently held
// by the parameters. Parameters without a gradient are treated as having a
// zero gradient.
template <RealType Real>
void adamw_step(OptimState<Real>& st, const NamedTensors<Real>& params) {
  if (params.size() != st.names.size()) {
    throw StateError("optimizer tracks " + std::to_string(st.names.size()) +
                     " tensors but got " + std::to_string(params.size()));
  }
  const auto& c = st.config;
  const double lr = scheduled_lr(c, st.step);
  ++st.step;
  const double bc1 = 1.0 - std::pow(c.beta1, double(st.step));
  const double bc2 = 1.0 - std::pow(c.beta2, double(st.step));
  const Real b1 = Real(c.beta1), b2 = Real(c.beta2);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& [name, p0] = params[i];
    if (name != st.names[i] || p0.shape() != st.m[i].shape()) {
      throw ShapeMismatchError("optimizer state for '" + st.names[i] + "' does not match '" +
                               name + "' " + shape_string(p0.shape()));
    }
    Tensor<Real> p = p0;
    auto w = p.data();
    auto m = st.m[i].data();
    auto v = st.v[i].data();
    const bool has_grad = p.has_grad();
    const std::span<const Real> grad = has_grad ? std::as_const(p).grad() : std::span<const Real>{};
    const Real decay = decays(p.shape()) ? Real(1.0 - lr * c.weight_decay) : Real(1);
    const Real step_size = Real(lr / bc1);
    const Real inv_bc2 = Real(1.0 / bc2);
    const Real eps = Real(c.adam_eps);
    for (std::size_t j = 0; j < w.size(); ++j) {
      const Real g = has_grad ? grad[j] : Real(0);
      m[j] = b1 * m[j] + (Real(1) - b1) * g;
      v[j] = b2 * v[j] + (Real(1) - b2) * g * g;
      w[j] = w[j] * decay - step_size * m[j] / (std::sqrt(v[j] * inv_bc2) + eps);
    }
  }
}

}  // namespace lm2
