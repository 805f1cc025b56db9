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

#ifndef GROUPFLOW_NUMERICS_H_
#define GROUPFLOW_NUMERICS_H_

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "groupflow/tape.h"
#include "groupflow/tensor.h"

namespace groupflow {

// Builds a scalar from `x` on `tape`.
using TapeFunction = std::function<Var(Tape& tape, Var x)>;

// max_i |analytic_i - central_i| / (|central_i| + 1e-12), where central_i is
// the central difference with step `eps` on component i of `x`.
double FiniteDiffCheck(const TapeFunction& f, const Tensor& x, double eps);

// Same comparison against a caller-provided analytic gradient and a plain
// value function; used where the perturbed input is not a tape leaf.
double FiniteDiffCompare(const std::function<double(const Tensor&)>& f,
                         const Tensor& x, const Tensor& analytic, double eps);

double MaxRelativeError(const Tensor& analytic, const Tensor& numeric);

// Tensor checkpoint file, little-endian:
//   "LMTN" | version u32 | count u32 |
//   per tensor: name_len u32 | name bytes | rank u32 | dims u64... | f64...
using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

inline constexpr unsigned kTensorFileVersion = 1;

void SaveTensors(const std::string& path, const NamedTensors& tensors);
NamedTensors LoadTensors(const std::string& path);

}  // namespace groupflow

#endif  // GROUPFLOW_NUMERICS_H_
