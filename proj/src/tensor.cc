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

#include "groupflow/tensor.h"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <utility>

#include "groupflow/error.h"

namespace groupflow {
namespace {

std::size_t ShapeProduct(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

}  // namespace

std::string ShapeToString(const Shape& shape) {
  std::string out = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i > 0) out += ",";
    out += std::to_string(shape[i]);
  }
  return out + ")";
}

Tensor::Tensor(Shape shape)
    : shape_(std::move(shape)), values_(ShapeProduct(shape_), Real{0}) {}

Tensor::Tensor(Shape shape, std::vector<Real> values)
    : shape_(std::move(shape)), values_(std::move(values)) {
  if (values_.size() != ShapeProduct(shape_)) {
    throw Error(ErrorCode::kShapeMismatch,
                "value count " + std::to_string(values_.size()) +
                    " does not match shape " + ShapeToString(shape_));
  }
}

void Tensor::Fill(Real value) { std::fill(values_.begin(), values_.end(), value); }

bool Tensor::AllFinite() const {
  return std::all_of(values_.begin(), values_.end(),
                     [](Real v) { return std::isfinite(v); });
}

}  // namespace groupflow
