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

#ifndef GROUPFLOW_TENSOR_H_
#define GROUPFLOW_TENSOR_H_

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace groupflow {

#ifdef GROUPFLOW_SINGLE_PRECISION
using Real = float;
#else
using Real = double;
#endif

using Shape = std::vector<std::size_t>;

std::string ShapeToString(const Shape& shape);

// Dense row-major tensor. Kernels on the tape work on rank-2 tensors; a
// scalar is a 1x1 tensor.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape);  // zero-filled
  Tensor(Shape shape, std::vector<Real> values);

  static Tensor Zeros(std::size_t rows, std::size_t cols) {
    return Tensor({rows, cols});
  }
  static Tensor Matrix(std::size_t rows, std::size_t cols,
                       std::vector<Real> values) {
    return Tensor({rows, cols}, std::move(values));
  }
  static Tensor Scalar(Real value) { return Tensor({1, 1}, {value}); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return values_.size(); }
  std::size_t rows() const { return shape_.empty() ? 0 : shape_[0]; }
  std::size_t cols() const {
    return shape_.size() < 2 ? 1 : shape_[1];
  }

  Real& operator[](std::size_t i) { return values_[i]; }
  Real operator[](std::size_t i) const { return values_[i]; }
  Real& at(std::size_t r, std::size_t c) { return values_[r * cols() + c]; }
  Real at(std::size_t r, std::size_t c) const {
    return values_[r * cols() + c];
  }

  std::span<Real> values() { return values_; }
  std::span<const Real> values() const { return values_; }
  Real* data() { return values_.data(); }
  const Real* data() const { return values_.data(); }

  void Fill(Real value);
  bool AllFinite() const;

  bool operator==(const Tensor& other) const = default;

 private:
  Shape shape_;
  std::vector<Real> values_;
};

}  // namespace groupflow

#endif  // GROUPFLOW_TENSOR_H_
