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

// Single-file checkpoints. All integers and floats are little-endian.
//
//   magic "LM2CKPT\0" | u32 version | u32 element bytes | u64 config digest
//   str config | u64 step | str rng state | str metric history (JSON)
//   u32 n, n × tensor (parameters) | u32 n, n × tensor (first moments),
//   n × tensor (second moments) | u64 checksum of everything before it
//
// where str is u64 length + bytes, and tensor is u32 name length + name,
// u32 rank, rank × u64 extent, then the elements.

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "json.hpp"
#include "lm2/error.hpp"
#include "lm2/metrics.hpp"
#include "lm2/optim.hpp"
#include "lm2/rng.hpp"
#include "lm2/tensor.hpp"

namespace lm2 {

inline constexpr std::string_view kCheckpointMagic{"LM2CKPT\0", 8};
inline constexpr std::uint32_t kCheckpointVersion = 1;

template <RealType Real>
struct CheckpointData {
  std::string config_text;
  std::size_t step = 0;
  std::string rng_state;
  std::vector<MetricRecord> history;
  NamedTensors<Real> params;
  NamedTensors<Real> first_moments;
  NamedTensors<Real> second_moments;
};

namespace ckpt_detail {

class Writer {
 public:
  void u32(std::uint32_t v) { put_le(v, 4); }
  void u64(std::uint64_t v) { put_le(v, 8); }
  void bytes(std::string_view b) { buf_.append(b); }
  void str(std::string_view s) {
    u64(s.size());
    bytes(s);
  }
  template <RealType Real>
  void tensor(const std::string& name, const Tensor<Real>& t) {
    u32(std::uint32_t(name.size()));
    bytes(name);
    u32(std::uint32_t(t.rank()));
    for (std::size_t e : t.shape()) u64(e);
    for (Real x : t.data()) {
      if constexpr (sizeof(Real) == 4) {
        u32(std::bit_cast<std::uint32_t>(x));
      } else {
        u64(std::bit_cast<std::uint64_t>(x));
      }
    }
  }
  const std::string& buffer() const { return buf_; }

 private:
  void put_le(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) buf_.push_back(char((v >> (8 * i)) & 0xff));
  }
  std::string buf_;
};

class Reader {
 public:
  explicit Reader(std::string_view data) : data_(data) {}

  std::uint32_t u32(const char* what) { return std::uint32_t(get_le(4, what)); }
  std::uint64_t u64(const char* what) { return get_le(8, what); }
  std::string_view bytes(std::size_t n, const char* what) {
    need(n, what);
    auto out = data_.substr(pos_, n);
    pos_ += n;
    return out;
  }
  std::string str(const char* what) {
    const auto n = u64(what);
    return std::string(bytes(n, what));
  }
  template <RealType Real>
  std::pair<std::string, Tensor<Real>> tensor() {
    std::string name(bytes(u32("tensor name length"), "tensor name"));
    const auto rank = u32("tensor rank");
    if (rank == 0 || rank > 4) throw FormatError("tensor '" + name + "' has invalid rank");
    Shape shape;
    std::uint64_t count = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
      shape.push_back(std::size_t(u64("tensor extent")));
      if (shape.back() == 0) throw FormatError("tensor '" + name + "' has a zero extent");
      need(shape.back(), "tensor data");
      count *= shape.back();
      need(count * sizeof(Real), "tensor data");  // also bounds `count`
    }
    Tensor<Real> t(shape);
    for (Real& x : t.data()) {
      if constexpr (sizeof(Real) == 4) {
        x = std::bit_cast<float>(u32("tensor data"));
      } else {
        x = std::bit_cast<double>(u64("tensor data"));
      }
    }
    return {std::move(name), std::move(t)};
  }
  std::size_t position() const { return pos_; }
  std::size_t remaining() const { return data_.size() - pos_; }

 private:
  void need(std::uint64_t n, const char* what) const {
    if (n > remaining()) {
      throw TruncatedError(std::string("checkpoint ends while reading ") + what);
    }
  }
  std::uint64_t get_le(int n, const char* what) {
    need(std::uint64_t(n), what);
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= std::uint64_t(std::uint8_t(data_[pos_ + i])) << (8 * i);
    pos_ += std::size_t(n);
    return v;
  }
  std::string_view data_;
  std::size_t pos_ = 0;
};

inline std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint '" + path + "'");
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

// Parses magic and version; returns the element width in bytes.
inline std::uint32_t read_header(Reader& r) {
  if (r.remaining() < kCheckpointMagic.size()) {
    throw TruncatedError("checkpoint ends inside the magic bytes");
  }
  if (r.bytes(kCheckpointMagic.size(), "magic") != kCheckpointMagic) {
    throw FormatError("not an LM2 checkpoint (bad magic bytes)");
  }
  const auto version = r.u32("version");
  if (version != kCheckpointVersion) {
    throw VersionError("checkpoint version " + std::to_string(version) + ", expected " +
                       std::to_string(kCheckpointVersion));
  }
  const auto width = r.u32("element width");
  if (width != 4 && width != 8) {
    throw FormatError("checkpoint element width " + std::to_string(width) + " is not 4 or 8");
  }
  return width;
}

}  // namespace ckpt_detail

template <RealType Real>
std::string serialize_checkpoint(const CheckpointData<Real>& d) {
  if (d.first_moments.size() != d.second_moments.size()) {
    throw StateError("moment lists differ in length");
  }
  ckpt_detail::Writer w;
  w.bytes(kCheckpointMagic);
  w.u32(kCheckpointVersion);
  w.u32(sizeof(Real));
  w.u64(fnv1a64(d.config_text));
  w.str(d.config_text);
  w.u64(d.step);
  w.str(d.rng_state);
  nlohmann::json hist = nlohmann::json::array();
  for (const auto& r : d.history) hist.push_back(to_json(r));
  w.str(hist.dump());
  w.u32(std::uint32_t(d.params.size()));
  for (const auto& [n, t] : d.params) w.tensor(n, t);
  w.u32(std::uint32_t(d.first_moments.size()));
  for (const auto& [n, t] : d.first_moments) w.tensor(n, t);
  for (const auto& [n, t] : d.second_moments) w.tensor(n, t);
  const std::uint64_t sum = fnv1a64(w.buffer());
  w.u64(sum);
  return w.buffer();
}

template <RealType Real>
CheckpointData<Real> parse_checkpoint(std::string_view bytes) {
  ckpt_detail::Reader r(bytes);
  const auto width = ckpt_detail::read_header(r);
  if (width != sizeof(Real)) {
    throw FormatError("checkpoint holds " + std::to_string(8 * width) + "-bit tensors, expected " +
                      std::to_string(8 * sizeof(Real)) + "-bit");
  }
  CheckpointData<Real> d;
  const auto digest = r.u64("config digest");
  d.config_text = r.str("config");
  if (fnv1a64(d.config_text) != digest) throw FormatError("checkpoint config digest mismatch");
  d.step = std::size_t(r.u64("step"));
  d.rng_state = r.str("rng state");
  try {
    for (const auto& j : nlohmann::json::parse(r.str("metric history"))) {
      d.history.push_back(metric_from_json(j));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint metric history: ") + e.what());
  }
  const auto n_params = r.u32("parameter count");
  for (std::uint32_t i = 0; i < n_params; ++i) d.params.push_back(r.tensor<Real>());
  const auto n_moments = r.u32("moment count");
  for (std::uint32_t i = 0; i < n_moments; ++i) d.first_moments.push_back(r.tensor<Real>());
  for (std::uint32_t i = 0; i < n_moments; ++i) d.second_moments.push_back(r.tensor<Real>());
  const std::size_t body = r.position();
  const auto sum = r.u64("checksum");
  if (r.remaining() != 0) throw FormatError("trailing bytes after checkpoint checksum");
  if (fnv1a64(bytes.substr(0, body)) != sum) throw FormatError("checkpoint checksum mismatch");
  return d;
}

// Element width (4 or 8) recorded in a checkpoint file.
inline std::uint32_t checkpoint_precision_bytes(const std::string& path) {
  const auto bytes = ckpt_detail::read_file(path);
  ckpt_detail::Reader r(bytes);
  return ckpt_detail::read_header(r);
}

template <RealType Real>
void write_checkpoint(const std::string& path, const CheckpointData<Real>& d) {
  const auto bytes = serialize_checkpoint(d);
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write checkpoint '" + tmp + "'");
    f.write(bytes.data(), std::streamsize(bytes.size()));
    if (!f) throw IoError("short write to '" + tmp + "'");
  }
  std::filesystem::rename(tmp, path);
}

template <RealType Real>
CheckpointData<Real> read_checkpoint(const std::string& path) {
  return parse_checkpoint<Real>(ckpt_detail::read_file(path));
}

// Copies checkpoint tensors into `dst`, which must have the same names,
// order and shapes.
template <RealType Real>
void copy_named(const NamedTensors<Real>& src, const NamedTensors<Real>& dst, const char* what) {
  for (std::size_t i = 0; i < dst.size(); ++i) {
    const auto& [name, target] = dst[i];
    if (i >= src.size()) throw FormatError(std::string(what) + " missing tensor '" + name + "'");
    const auto& [src_name, value] = src[i];
    if (src_name != name) {
      throw FormatError(std::string(what) + " has tensor '" + src_name + "' where '" + name +
                        "' was expected");
    }
    if (value.shape() != target.shape()) {
      throw ShapeMismatchError("tensor '" + name + "': checkpoint " +
                               shape_string(value.shape()) + " vs model " +
                               shape_string(target.shape()));
    }
  }
  if (src.size() != dst.size()) {
    throw FormatError(std::string(what) + " holds " + std::to_string(src.size()) +
                      " tensors, expected " + std::to_string(dst.size()));
  }
  for (std::size_t i = 0; i < dst.size(); ++i) {
    Tensor<Real> target = dst[i].second;
    std::copy(src[i].second.data().begin(), src[i].second.data().end(), target.data().begin());
  }
}

}  // namespace lm2
