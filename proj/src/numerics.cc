/*
 * Copyright 2026 The groupflow Authors.
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     https://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#include "groupflow/numerics.h"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>

#include "groupflow/error.h"

namespace groupflow {
namespace {

constexpr char kMagic[4] = {'L', 'M', 'T', 'N'};
constexpr std::uint32_t kMaxRank = 8;

template <typename T>
void WriteLe(std::ostream& out, T value) {
  static_assert(std::is_integral_v<T>);
  unsigned char bytes[sizeof(T)];
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    bytes[i] = static_cast<unsigned char>((static_cast<std::uint64_t>(value) >> (8 * i)) & 0xff);
  }
  out.write(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <typename T>
T ReadLe(std::istream& in, const std::string& path) {
  unsigned char bytes[sizeof(T)];
  if (!in.read(reinterpret_cast<char*>(bytes), sizeof(T))) {
    throw Error(ErrorCode::kIo, path + ": truncated tensor file");
  }
  std::uint64_t value = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    value |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
  }
  return static_cast<T>(value);
}

}  // namespace

double MaxRelativeError(const Tensor& analytic, const Tensor& numeric) {
  if (analytic.size() != numeric.size()) {
    throw Error(ErrorCode::kShapeMismatch, "gradient size mismatch");
  }
  double worst = 0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const double diff = std::abs(static_cast<double>(analytic[i]) - numeric[i]);
    worst = std::max(worst, diff / (std::abs(static_cast<double>(numeric[i])) + 1e-12));
  }
  return worst;
}

double FiniteDiffCompare(const std::function<double(const Tensor&)>& f,
                         const Tensor& x, const Tensor& analytic, double eps) {
  Tensor numeric(x.shape());
  Tensor probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const Real original = probe[i];
    probe[i] = original + static_cast<Real>(eps);
    const double plus = f(probe);
    probe[i] = original - static_cast<Real>(eps);
    const double minus = f(probe);
    probe[i] = original;
    numeric[i] = static_cast<Real>((plus - minus) / (2 * eps));
  }
  return MaxRelativeError(analytic, numeric);
}

double FiniteDiffCheck(const TapeFunction& f, const Tensor& x, double eps) {
  Tape tape;
  const Var leaf = tape.Leaf(x);
  const Var out = f(tape, leaf);
  const Tensor analytic = tape.Backward(out).Of(leaf);
  auto evaluate = [&f](const Tensor& point) {
    Tape probe_tape;
    const Var probe_leaf = probe_tape.Leaf(point);
    return static_cast<double>(probe_tape.value(f(probe_tape, probe_leaf))[0]);
  };
  return FiniteDiffCompare(evaluate, x, analytic, eps);
}

void SaveTensors(const std::string& path, const NamedTensors& tensors) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + path);
  out.write(kMagic, sizeof(kMagic));
  WriteLe<std::uint32_t>(out, kTensorFileVersion);
  WriteLe<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, tensor] : tensors) {
    WriteLe<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    WriteLe<std::uint32_t>(out, static_cast<std::uint32_t>(tensor.rank()));
    for (const std::size_t dim : tensor.shape()) WriteLe<std::uint64_t>(out, dim);
    for (const Real v : tensor.values()) {
      WriteLe<std::uint64_t>(out, std::bit_cast<std::uint64_t>(static_cast<double>(v)));
    }
  }
  if (!out) throw Error(ErrorCode::kIo, "write failed for " + path);
}

NamedTensors LoadTensors(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIo, "cannot open " + path);
  char magic[4];
  if (!in.read(magic, sizeof(magic)) || std::memcmp(magic, kMagic, 4) != 0) {
    throw Error(ErrorCode::kIo, path + ": not a tensor file");
  }
  const auto version = ReadLe<std::uint32_t>(in, path);
  if (version != kTensorFileVersion) {
    throw Error(ErrorCode::kIo, path + ": unsupported version " + std::to_string(version));
  }
  const auto count = ReadLe<std::uint32_t>(in, path);
  NamedTensors tensors;
  for (std::uint32_t t = 0; t < count; ++t) {
    const auto name_len = ReadLe<std::uint32_t>(in, path);
    std::string name(name_len, '\0');
    if (!in.read(name.data(), name_len)) {
      throw Error(ErrorCode::kIo, path + ": truncated tensor name");
    }
    const auto rank = ReadLe<std::uint32_t>(in, path);
    if (rank > kMaxRank) throw Error(ErrorCode::kIo, path + ": bad rank");
    Shape shape(rank);
    std::size_t total = 1;
    for (auto& dim : shape) {
      dim = static_cast<std::size_t>(ReadLe<std::uint64_t>(in, path));
      total *= dim;
    }
    std::vector<Real> values(total);
    for (auto& v : values) {
      v = static_cast<Real>(std::bit_cast<double>(ReadLe<std::uint64_t>(in, path)));
    }
    tensors.emplace_back(std::move(name), Tensor(std::move(shape), std::move(values)));
  }
  return tensors;
}

}  // namespace groupflow
