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

// Reverse-mode differentiation over a recorded operation graph.
//
// A Tape records every kernel application in execution order, which is also
// a topological order of the graph. Backward() walks the tape in reverse and
// returns the adjoint of *every* node reachable from the output, including
// intermediate activations; attribution needs gradients at hidden layers,
// not only at parameters.
//
// A tape is single-writer. Evaluate models concurrently with one tape per
// thread over shared read-only parameters.

#ifndef GROUPFLOW_TAPE_H_
#define GROUPFLOW_TAPE_H_

#include <cstddef>
#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "groupflow/tensor.h"

namespace groupflow {

enum class Kernel : int {
  kLeaf = 0,
  kMatmul,
  kAdd,  // same shape, or a 1 x cols row broadcast over the rows of input 0
  kHadamard,
  kTanh,
  kRelu,
  kSoftmax,    // attrs.axis: 1 = per row, 0 = per column
  kLayerNorm,  // inputs (x, gain, bias); attrs.eps
  kEmbeddingLookup,  // inputs (table); attrs.indices select rows
  kSum,              // attrs.axis: -1 = all, 0 = down rows, 1 = across cols
  kMean,
  kConcat,  // attrs.axis
  kSlice,   // attrs.axis, attrs.begin, attrs.end
  kScalarMul,  // attrs.scalar
  kCrossEntropyFromLogits,  // attrs.indices = target class per row; mean
  kTranspose,
  kSqrtClamped,  // sqrt(max(0, x))
  kNormalize,    // x / sum(x)
  kReciprocal,
  kKernelCount,
};

std::string_view KernelName(Kernel kernel);

struct KernelAttrs {
  int axis = 1;
  Real scalar = 1;
  Real eps = 1e-5;
  std::size_t begin = 0;
  std::size_t end = 0;
  std::vector<std::size_t> indices;
};

// Handle to a node on a specific tape.
struct Var {
  std::uint64_t tape_id = 0;
  std::size_t index = 0;
};

class Tape;

// Adjoints produced by one Backward() call, indexed by node.
class Gradients {
 public:
  // Zero tensor of the node's shape when the node received no gradient.
  Tensor Of(Var var) const;
  bool Has(Var var) const;

 private:
  friend class Tape;
  std::uint64_t tape_id_ = 0;
  std::vector<Tensor> grads_;
  std::vector<Shape> shapes_;
};

class Tape {
 public:
  Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) noexcept = default;
  Tape& operator=(Tape&&) noexcept = default;

  // Non-finite outputs throw kNonFiniteValue when enabled. Enabled by default
  // in debug builds.
  void set_debug_checks(bool enabled) { debug_checks_ = enabled; }

  // A differentiable input (parameter or input embedding).
  Var Leaf(Tensor value);
  // A non-differentiable input; receives no adjoint.
  Var Constant(Tensor value);

  // Generic entry point. Throws kShapeMismatch for non-conforming inputs and
  // kUnsupportedKernel for kernels this tape cannot record.
  Var Record(Kernel kernel, std::span<const Var> inputs,
             const KernelAttrs& attrs = {});

  Var Matmul(Var a, Var b);
  Var Add(Var a, Var b);
  Var Hadamard(Var a, Var b);
  Var Tanh(Var x);
  Var Relu(Var x);
  Var Softmax(Var x, int axis);
  Var LayerNorm(Var x, Var gain, Var bias, Real eps);
  Var EmbeddingLookup(Var table, std::vector<std::size_t> rows);
  Var Sum(Var x, int axis);
  Var Mean(Var x, int axis);
  Var Concat(std::span<const Var> parts, int axis);
  Var Slice(Var x, int axis, std::size_t begin, std::size_t end);
  Var ScalarMul(Var x, Real scalar);
  Var CrossEntropyFromLogits(Var logits, std::vector<std::size_t> targets);
  Var Transpose(Var x);
  Var SqrtClamped(Var x);
  Var Normalize(Var x);
  Var Reciprocal(Var x);

  const Tensor& value(Var var) const;
  Kernel kernel(Var var) const;
  bool requires_grad(Var var) const;
  std::size_t size() const { return nodes_.size(); }
  bool Owns(Var var) const {
    return var.tape_id == id_ && var.index < nodes_.size();
  }

  // Adjoints of `output` (must be 1x1 and on this tape) w.r.t. every
  // differentiable node. Throws kNotInTrace / kNonScalarOutput.
  Gradients Backward(Var output) const;
  // Vector-Jacobian product: adjoints of <seed, output> for any output shape.
  Gradients BackwardFrom(Var output, const Tensor& seed) const;

  // Records the vector-Jacobian product <seed, output> as new nodes and
  // returns the adjoint node of each target, so the gradients can be
  // differentiated again. Only paths between the targets and `output` are
  // recorded. Throws kUnsupportedKernel when such a path crosses
  // EmbeddingLookup, CrossEntropyFromLogits or SqrtClamped.
  std::vector<Var> GradientGraph(Var output, const Tensor& seed,
                                 std::span<const Var> targets);

 private:
  struct Node {
    Kernel kernel = Kernel::kLeaf;
    std::vector<std::size_t> inputs;
    KernelAttrs attrs;
    Tensor value;
    bool requires_grad = false;
  };

  Var Push(Node node);
  void CheckOwned(Var var) const;
  void Adjoint(const Node& node, const Tensor& grad,
               std::vector<Tensor>& grads) const;

  std::uint64_t id_;
  bool debug_checks_;
  std::vector<Node> nodes_;
};

}  // namespace groupflow

#endif  // GROUPFLOW_TAPE_H_
