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
#include <atomic>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <cstring>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "lm2/error.hpp"

namespace lm2 {

template <class T>
concept RealType = std::same_as<T, float> || std::same_as<T, double>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

namespace detail {
inline std::uint64_t next_node_id() {
  static std::atomic<std::uint64_t> counter{1};
  return counter.fetch_add(1, std::memory_order_relaxed);
}
}  // namespace detail

// Dense row-major tensor handle.
//
// Copies share storage (a handle, like a framework tensor); use clone() for a
// deep copy. Operations never mutate their inputs' values, so sharing is safe
// as long as callers only write through data() on tensors they own.
template <RealType Real>
class Tensor {
 public:
  using value_type = Real;

  Tensor() = default;

  explicit Tensor(Shape shape, Real fill = Real(0))
      : s_(std::make_shared<Storage>()) {
    validate_shape(shape);
    s_->data.assign(shape_size(shape), fill);
    s_->shape = std::move(shape);
  }

  Tensor(Shape shape, std::vector<Real> data)
      : s_(std::make_shared<Storage>()) {
    validate_shape(shape);
    if (shape_size(shape) != data.size()) {
      throw DimensionError("tensor data length " + std::to_string(data.size()) +
                           " does not match shape " + shape_string(shape));
    }
    s_->shape = std::move(shape);
    s_->data = std::move(data);
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

  // Row-wise literal, mostly for tests: {{1,2},{3,4}}.
  static Tensor from_rows(std::initializer_list<std::initializer_list<Real>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.begin()->size() : 0;
    std::vector<Real> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) throw DimensionError("ragged row literal");
      data.insert(data.end(), row.begin(), row.end());
    }
    return Tensor({r, c}, std::move(data));
  }

  static Tensor identity(std::size_t n) {
    Tensor t({n, n});
    for (std::size_t i = 0; i < n; ++i) t.data()[i * n + i] = Real(1);
    return t;
  }

  bool defined() const noexcept { return static_cast<bool>(s_); }
  std::uint64_t id() const noexcept { return s_ ? s_->id : 0; }
  const Shape& shape() const { return s_->shape; }
  std::size_t rank() const { return s_->shape.size(); }
  std::size_t size() const { return s_->data.size(); }
  std::size_t rows() const { return s_->shape.empty() ? 1 : s_->shape[0]; }
  std::size_t cols() const {
    return s_->shape.empty() ? 1 : size() / s_->shape[0];
  }

  std::span<Real> data() { return s_->data; }
  std::span<const Real> data() const { return s_->data; }
  const std::vector<Real>& values() const { return s_->data; }
  Real& operator()(std::size_t r, std::size_t c) { return s_->data[r * cols() + c]; }
  Real operator()(std::size_t r, std::size_t c) const {
    return s_->data[r * cols() + c];
  }
  Real item() const {
    if (size() != 1) {
      throw DimensionError("item() on tensor of shape " + shape_string(shape()));
    }
    return s_->data[0];
  }

  bool requires_grad() const noexcept { return s_ && s_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    s_->requires_grad = on;
    return *this;
  }

  bool has_grad() const noexcept { return s_ && !s_->grad.empty(); }
  std::span<Real> grad() {
    ensure_grad();
    return s_->grad;
  }
  std::span<const Real> grad() const { return s_->grad; }
  void ensure_grad() {
    if (s_->grad.empty()) s_->grad.assign(s_->data.size(), Real(0));
  }
  void zero_grad() {
    if (!s_->grad.empty()) std::fill(s_->grad.begin(), s_->grad.end(), Real(0));
  }
  void drop_grad() { s_->grad.clear(); s_->grad.shrink_to_fit(); }

  Tensor clone() const {
    Tensor t(s_->shape, s_->data);
    t.s_->requires_grad = s_->requires_grad;
    return t;
  }

  // Value copy into a tensor of another precision (grads are not carried).
  template <RealType Other>
  Tensor<Other> cast() const {
    std::vector<Other> out(s_->data.begin(), s_->data.end());
    return Tensor<Other>(s_->shape, std::move(out));
  }

  bool all_finite() const {
    return std::all_of(s_->data.begin(), s_->data.end(),
                       [](Real v) { return std::isfinite(v); });
  }

 private:
  struct Storage {
    Shape shape;
    std::vector<Real> data;
    std::vector<Real> grad;
    bool requires_grad = false;
    std::uint64_t id = detail::next_node_id();
  };

  static void validate_shape(const Shape& shape) {
    for (std::size_t e : shape) {
      if (e == 0) {
        throw DimensionError("tensor extents must be positive, got " +
                             shape_string(shape));
      }
    }
  }

  std::shared_ptr<Storage> s_;
};

// Bitwise equality of values and shape.
template <RealType Real>
bool bitwise_equal(const Tensor<Real>& a, const Tensor<Real>& b) {
  return a.shape() == b.shape() &&
         std::equal(a.data().begin(), a.data().end(), b.data().begin(),
                    [](Real x, Real y) {
                      return std::memcmp(&x, &y, sizeof(Real)) == 0;
                    });
}

template <RealType Real>
double max_abs_diff(const Tensor<Real>& a, const Tensor<Real>& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("max_abs_diff: " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    m = std::max(m, std::abs(double(a.data()[i]) - double(b.data()[i])));
  }
  return m;
}

}  // namespace lm2
