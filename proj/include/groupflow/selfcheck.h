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

// Finite-difference audit of every parameter gradient and every hidden-state
// gradient of a small random encoder.

#ifndef GROUPFLOW_SELFCHECK_H_
#define GROUPFLOW_SELFCHECK_H_

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace groupflow {

struct SelfCheckConfig {
  std::size_t d_model = 16;
  std::size_t layers = 2;
  std::size_t heads = 2;
  std::size_t d_ff = 32;
  std::size_t max_len = 12;
  std::size_t n_tokens = 8;
  double init_scale = 0.5;  // weights ~ N(0, init_scale)
  double eps = 1e-5;
  std::uint64_t seed = 7;
};

struct SelfCheckEntry {
  std::string name;
  double max_rel_error = 0;
};

struct SelfCheckResult {
  std::vector<SelfCheckEntry> entries;
  double max_rel_error = 0;
  std::size_t checked = 0;  // scalar derivatives compared
};

SelfCheckResult RunSelfCheck(const SelfCheckConfig& config = {});

}  // namespace groupflow

#endif  // GROUPFLOW_SELFCHECK_H_
