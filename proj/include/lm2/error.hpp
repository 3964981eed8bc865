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

#include <cstddef>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace lm2 {

using Shape = std::vector<std::size_t>;

// Base of every error raised by the library. The `kind()` tag is the
// machine-readable class used by the CLI's one-line error output.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& what)
      : std::runtime_error(what), kind_(std::move(kind)) {}
  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

#define LM2_DEFINE_ERROR(Name, tag)                                  \
  class Name : public Error {                                        \
   public:                                                           \
    explicit Name(const std::string& what) : Error(tag, what) {}     \
  }

LM2_DEFINE_ERROR(DimensionError, "dimension");
LM2_DEFINE_ERROR(ConfigError, "config");
LM2_DEFINE_ERROR(StateError, "state");
LM2_DEFINE_ERROR(NumericError, "numeric");
LM2_DEFINE_ERROR(TokenError, "token");
LM2_DEFINE_ERROR(IoError, "io");
LM2_DEFINE_ERROR(FormatError, "format");
LM2_DEFINE_ERROR(VersionError, "version");
LM2_DEFINE_ERROR(TruncatedError, "truncated");
LM2_DEFINE_ERROR(ShapeMismatchError, "shape_mismatch");
LM2_DEFINE_ERROR(UsageError, "usage");

#undef LM2_DEFINE_ERROR

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

}  // namespace lm2
