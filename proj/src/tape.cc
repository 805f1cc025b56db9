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

#include "groupflow/tape.h"

#include <algorithm>
#include <atomic>
#include <optional>
#include <cmath>
#include <string>
#include <utility>

#include "groupflow/error.h"

namespace groupflow {
namespace {

// Floor under the square root in the adjoint of SqrtClamped; the derivative
// is unbounded at zero.
constexpr Real kSqrtGradFloor = 1e-12;

std::atomic<std::uint64_t> next_tape_id{1};

[[noreturn]] void ThrowShape(Kernel kernel, const std::string& expected,
                             const Shape& got) {
  throw Error(ErrorCode::kShapeMismatch,
              std::string(KernelName(kernel)) + ": expected " + expected +
                  ", got " + ShapeToString(got));
}

void RequireRank2(Kernel kernel, const Tensor& t) {
  if (t.rank() != 2) ThrowShape(kernel, "rank-2 tensor", t.shape());
}

void RequireArity(Kernel kernel, std::size_t got, std::size_t want) {
  if (got != want) {
    throw Error(ErrorCode::kShapeMismatch,
                std::string(KernelName(kernel)) + ": expected " +
                    std::to_string(want) + " inputs, got " +
                    std::to_string(got));
  }
}

void AccumulateInto(Tensor& dst, const Tensor& src) {
  if (dst.size() == 0) {
    dst = src;
    return;
  }
  Real* d = dst.data();
  const Real* s = src.data();
  for (std::size_t i = 0; i < src.size(); ++i) d[i] += s[i];
}

Tensor& GradSlot(std::vector<Tensor>& grads, std::size_t index,
                 const Shape& shape) {
  Tensor& slot = grads[index];
  if (slot.size() == 0) slot = Tensor(shape);
  return slot;
}

// out (m x n) = a (m x k) * b (k x n)
void MatmulInto(const Tensor& a, const Tensor& b, Tensor& out) {
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  const Real* pa = a.data();
  const Real* pb = b.data();
  Real* po = out.data();
  for (std::size_t i = 0; i < m; ++i) {
    Real* row = po + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const Real av = pa[i * k + p];
      if (av == 0) continue;
      const Real* brow = pb + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += av * brow[j];
    }
  }
}

}  // namespace

std::string_view KernelName(Kernel kernel) {
  switch (kernel) {
    case Kernel::kLeaf: return "leaf";
    case Kernel::kMatmul: return "matmul";
    case Kernel::kAdd: return "add";
    case Kernel::kHadamard: return "hadamard";
    case Kernel::kTanh: return "tanh";
    case Kernel::kRelu: return "relu";
    case Kernel::kSoftmax: return "softmax";
    case Kernel::kLayerNorm: return "layer_norm";
    case Kernel::kEmbeddingLookup: return "embedding_lookup";
    case Kernel::kSum: return "sum";
    case Kernel::kMean: return "mean";
    case Kernel::kConcat: return "concat";
    case Kernel::kSlice: return "slice";
    case Kernel::kScalarMul: return "scalar_mul";
    case Kernel::kCrossEntropyFromLogits: return "cross_entropy_from_logits";
    case Kernel::kTranspose: return "transpose";
    case Kernel::kSqrtClamped: return "sqrt_clamped";
    case Kernel::kNormalize: return "normalize";
    case Kernel::kReciprocal: return "reciprocal";
    case Kernel::kKernelCount: break;
  }
  return "unknown";
}

Tensor Gradients::Of(Var var) const {
  if (var.tape_id != tape_id_ || var.index >= shapes_.size()) {
    throw Error(ErrorCode::kNotInTrace, "variable is not on this tape");
  }
  if (grads_[var.index].size() == 0) return Tensor(shapes_[var.index]);
  return grads_[var.index];
}

bool Gradients::Has(Var var) const {
  return var.tape_id == tape_id_ && var.index < grads_.size() &&
         grads_[var.index].size() != 0;
}

Tape::Tape()
    : id_(next_tape_id.fetch_add(1)),
#ifdef NDEBUG
      debug_checks_(false)
#else
      debug_checks_(true)
#endif
{
}

Var Tape::Push(Node node) {
  if (debug_checks_ && !node.value.AllFinite()) {
    throw Error(ErrorCode::kNonFiniteValue,
                std::string(KernelName(node.kernel)) +
                    " produced a non-finite value");
  }
  nodes_.push_back(std::move(node));
  return Var{id_, nodes_.size() - 1};
}

void Tape::CheckOwned(Var var) const {
  if (!Owns(var)) {
    throw Error(ErrorCode::kNotInTrace, "variable is not on this tape");
  }
}

Var Tape::Leaf(Tensor value) {
  Node node;
  node.value = std::move(value);
  node.requires_grad = true;
  return Push(std::move(node));
}

Var Tape::Constant(Tensor value) {
  Node node;
  node.value = std::move(value);
  node.requires_grad = false;
  return Push(std::move(node));
}

const Tensor& Tape::value(Var var) const {
  CheckOwned(var);
  return nodes_[var.index].value;
}

Kernel Tape::kernel(Var var) const {
  CheckOwned(var);
  return nodes_[var.index].kernel;
}

bool Tape::requires_grad(Var var) const {
  CheckOwned(var);
  return nodes_[var.index].requires_grad;
}

Var Tape::Record(Kernel kernel, std::span<const Var> inputs,
                 const KernelAttrs& attrs) {
  if (kernel == Kernel::kLeaf || kernel >= Kernel::kKernelCount ||
      static_cast<int>(kernel) < 0) {
    throw Error(ErrorCode::kUnsupportedKernel,
                "kernel id " + std::to_string(static_cast<int>(kernel)));
  }
  Node node;
  node.kernel = kernel;
  node.attrs = attrs;
  for (const Var v : inputs) {
    CheckOwned(v);
    node.inputs.push_back(v.index);
    node.requires_grad = node.requires_grad || nodes_[v.index].requires_grad;
  }
  auto in = [&](std::size_t i) -> const Tensor& {
    return nodes_[node.inputs[i]].value;
  };
  for (std::size_t i = 0; i < node.inputs.size(); ++i) {
    RequireRank2(kernel, in(i));
  }

  switch (kernel) {
    case Kernel::kMatmul: {
      RequireArity(kernel, inputs.size(), 2);
      const Tensor& a = in(0);
      const Tensor& b = in(1);
      if (a.cols() != b.rows()) {
        ThrowShape(kernel, "(m," + std::to_string(a.cols()) + ") x (" +
                               std::to_string(a.cols()) + ",n)",
                   b.shape());
      }
      node.value = Tensor::Zeros(a.rows(), b.cols());
      MatmulInto(a, b, node.value);
      break;
    }
    case Kernel::kAdd: {
      RequireArity(kernel, inputs.size(), 2);
      const Tensor& a = in(0);
      const Tensor& b = in(1);
      node.value = a;
      if (a.shape() == b.shape()) {
        for (std::size_t i = 0; i < a.size(); ++i) node.value[i] += b[i];
      } else if (b.rows() == 1 && b.cols() == a.cols()) {
        for (std::size_t r = 0; r < a.rows(); ++r) {
          for (std::size_t c = 0; c < a.cols(); ++c) {
            node.value.at(r, c) += b[c];
          }
        }
      } else {
        ThrowShape(kernel, ShapeToString(a.shape()) + " or (1," +
                               std::to_string(a.cols()) + ")",
                   b.shape());
      }
      break;
    }
    case Kernel::kHadamard: {
      RequireArity(kernel, inputs.size(), 2);
      const Tensor& a = in(0);
      const Tensor& b = in(1);
      if (a.shape() != b.shape()) {
        ThrowShape(kernel, ShapeToString(a.shape()), b.shape());
      }
      node.value = a;
      for (std::size_t i = 0; i < a.size(); ++i) node.value[i] *= b[i];
      break;
    }
    case Kernel::kTanh:
    case Kernel::kRelu:
    case Kernel::kSqrtClamped: {
      RequireArity(kernel, inputs.size(), 1);
      node.value = in(0);
      for (Real& v : node.value.values()) {
        if (kernel == Kernel::kTanh) {
          v = std::tanh(v);
        } else if (kernel == Kernel::kRelu) {
          v = v > 0 ? v : 0;
        } else {
          v = v > 0 ? std::sqrt(v) : 0;
        }
      }
      break;
    }
    case Kernel::kSoftmax: {
      RequireArity(kernel, inputs.size(), 1);
      if (attrs.axis != 0 && attrs.axis != 1) {
        throw Error(ErrorCode::kShapeMismatch, "softmax axis must be 0 or 1");
      }
      const Tensor& x = in(0);
      node.value = x;
      const std::size_t rows = x.rows(), cols = x.cols();
      const bool by_row = attrs.axis == 1;
      const std::size_t outer = by_row ? rows : cols;
      const std::size_t inner = by_row ? cols : rows;
      for (std::size_t o = 0; o < outer; ++o) {
        auto idx = [&](std::size_t i) {
          return by_row ? o * cols + i : i * cols + o;
        };
        Real max_v = x[idx(0)];
        for (std::size_t i = 1; i < inner; ++i) max_v = std::max(max_v, x[idx(i)]);
        Real total = 0;
        for (std::size_t i = 0; i < inner; ++i) {
          const Real e = std::exp(x[idx(i)] - max_v);
          node.value[idx(i)] = e;
          total += e;
        }
        for (std::size_t i = 0; i < inner; ++i) node.value[idx(i)] /= total;
      }
      break;
    }
    case Kernel::kLayerNorm: {
      RequireArity(kernel, inputs.size(), 3);
      const Tensor& x = in(0);
      const Tensor& gain = in(1);
      const Tensor& bias = in(2);
      const Shape row_shape = {1, x.cols()};
      if (gain.shape() != row_shape) ThrowShape(kernel, ShapeToString(row_shape), gain.shape());
      if (bias.shape() != row_shape) ThrowShape(kernel, ShapeToString(row_shape), bias.shape());
      node.value = Tensor(x.shape());
      const std::size_t d = x.cols();
      for (std::size_t r = 0; r < x.rows(); ++r) {
        Real mean = 0;
        for (std::size_t c = 0; c < d; ++c) mean += x.at(r, c);
        mean /= static_cast<Real>(d);
        Real var = 0;
        for (std::size_t c = 0; c < d; ++c) {
          const Real diff = x.at(r, c) - mean;
          var += diff * diff;
        }
        var /= static_cast<Real>(d);
        const Real inv = 1 / std::sqrt(var + attrs.eps);
        for (std::size_t c = 0; c < d; ++c) {
          node.value.at(r, c) = (x.at(r, c) - mean) * inv * gain[c] + bias[c];
        }
      }
      break;
    }
    case Kernel::kEmbeddingLookup: {
      RequireArity(kernel, inputs.size(), 1);
      const Tensor& table = in(0);
      node.value = Tensor::Zeros(attrs.indices.size(), table.cols());
      for (std::size_t i = 0; i < attrs.indices.size(); ++i) {
        const std::size_t row = attrs.indices[i];
        if (row >= table.rows()) {
          throw Error(ErrorCode::kShapeMismatch,
                      "embedding_lookup: row " + std::to_string(row) +
                          " out of range " + ShapeToString(table.shape()));
        }
        std::copy_n(table.data() + row * table.cols(), table.cols(),
                    node.value.data() + i * table.cols());
      }
      break;
    }
    case Kernel::kSum:
    case Kernel::kMean: {
      RequireArity(kernel, inputs.size(), 1);
      const Tensor& x = in(0);
      const std::size_t rows = x.rows(), cols = x.cols();
      if (attrs.axis == -1) {
        Real total = 0;
        for (const Real v : x.values()) total += v;
        if (kernel == Kernel::kMean) total /= static_cast<Real>(x.size());
        node.value = Tensor::Scalar(total);
      } else if (attrs.axis == 0) {
        node.value = Tensor::Zeros(1, cols);
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t c = 0; c < cols; ++c) node.value[c] += x.at(r, c);
        }
        if (kernel == Kernel::kMean) {
          for (Real& v : node.value.values()) v /= static_cast<Real>(rows);
        }
      } else if (attrs.axis == 1) {
        node.value = Tensor::Zeros(rows, 1);
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t c = 0; c < cols; ++c) node.value[r] += x.at(r, c);
        }
        if (kernel == Kernel::kMean) {
          for (Real& v : node.value.values()) v /= static_cast<Real>(cols);
        }
      } else {
        throw Error(ErrorCode::kShapeMismatch, "reduction axis must be -1, 0 or 1");
      }
      break;
    }
    case Kernel::kConcat: {
      if (inputs.empty()) RequireArity(kernel, 0, 1);
      const bool by_cols = attrs.axis == 1;
      if (attrs.axis != 0 && attrs.axis != 1) {
        throw Error(ErrorCode::kShapeMismatch, "concat axis must be 0 or 1");
      }
      std::size_t rows = in(0).rows(), cols = in(0).cols();
      for (std::size_t i = 1; i < inputs.size(); ++i) {
        const Tensor& t = in(i);
        if (by_cols) {
          if (t.rows() != rows) ThrowShape(kernel, std::to_string(rows) + " rows", t.shape());
          cols += t.cols();
        } else {
          if (t.cols() != cols) ThrowShape(kernel, std::to_string(cols) + " cols", t.shape());
          rows += t.rows();
        }
      }
      node.value = Tensor::Zeros(rows, cols);
      std::size_t offset = 0;
      for (std::size_t i = 0; i < inputs.size(); ++i) {
        const Tensor& t = in(i);
        for (std::size_t r = 0; r < t.rows(); ++r) {
          for (std::size_t c = 0; c < t.cols(); ++c) {
            if (by_cols) {
              node.value.at(r, offset + c) = t.at(r, c);
            } else {
              node.value.at(offset + r, c) = t.at(r, c);
            }
          }
        }
        offset += by_cols ? t.cols() : t.rows();
      }
      break;
    }
    case Kernel::kSlice: {
      RequireArity(kernel, inputs.size(), 1);
      const Tensor& x = in(0);
      const std::size_t extent = attrs.axis == 0 ? x.rows() : x.cols();
      if ((attrs.axis != 0 && attrs.axis != 1) || attrs.begin >= attrs.end ||
          attrs.end > extent) {
        ThrowShape(kernel,
                   "slice [" + std::to_string(attrs.begin) + "," +
                       std::to_string(attrs.end) + ") within axis " +
                       std::to_string(attrs.axis),
                   x.shape());
      }
      const std::size_t len = attrs.end - attrs.begin;
      if (attrs.axis == 0) {
        node.value = Tensor::Zeros(len, x.cols());
        std::copy_n(x.data() + attrs.begin * x.cols(), len * x.cols(),
                    node.value.data());
      } else {
        node.value = Tensor::Zeros(x.rows(), len);
        for (std::size_t r = 0; r < x.rows(); ++r) {
          for (std::size_t c = 0; c < len; ++c) {
            node.value.at(r, c) = x.at(r, attrs.begin + c);
          }
        }
      }
      break;
    }
    case Kernel::kScalarMul: {
      RequireArity(kernel, inputs.size(), 1);
      node.value = in(0);
      for (Real& v : node.value.values()) v *= attrs.scalar;
      break;
    }
    case Kernel::kCrossEntropyFromLogits: {
      RequireArity(kernel, inputs.size(), 1);
      const Tensor& logits = in(0);
      if (attrs.indices.size() != logits.rows()) {
        ThrowShape(kernel, std::to_string(attrs.indices.size()) + " rows",
                   logits.shape());
      }
      Real total = 0;
      for (std::size_t r = 0; r < logits.rows(); ++r) {
        const std::size_t target = attrs.indices[r];
        if (target >= logits.cols()) {
          throw Error(ErrorCode::kShapeMismatch,
                      "cross_entropy_from_logits: target out of range");
        }
        Real max_v = logits.at(r, 0);
        for (std::size_t c = 1; c < logits.cols(); ++c) max_v = std::max(max_v, logits.at(r, c));
        Real sum = 0;
        for (std::size_t c = 0; c < logits.cols(); ++c) sum += std::exp(logits.at(r, c) - max_v);
        total += std::log(sum) + max_v - logits.at(r, target);
      }
      node.value = Tensor::Scalar(total / static_cast<Real>(logits.rows()));
      break;
    }
    case Kernel::kTranspose: {
      RequireArity(kernel, inputs.size(), 1);
      const Tensor& x = in(0);
      node.value = Tensor::Zeros(x.cols(), x.rows());
      for (std::size_t r = 0; r < x.rows(); ++r) {
        for (std::size_t c = 0; c < x.cols(); ++c) node.value.at(c, r) = x.at(r, c);
      }
      break;
    }
    case Kernel::kNormalize: {
      RequireArity(kernel, inputs.size(), 1);
      node.value = in(0);
      Real total = 0;
      for (const Real v : node.value.values()) total += v;
      for (Real& v : node.value.values()) v /= total;
      break;
    }
    case Kernel::kReciprocal: {
      RequireArity(kernel, inputs.size(), 1);
      node.value = in(0);
      for (Real& v : node.value.values()) v = 1 / v;
      break;
    }
    case Kernel::kLeaf:
    case Kernel::kKernelCount:
      break;
  }
  return Push(std::move(node));
}

Gradients Tape::Backward(Var output) const {
  CheckOwned(output);
  const Node& out = nodes_[output.index];
  if (out.value.size() != 1) {
    throw Error(ErrorCode::kNonScalarOutput,
                "output has shape " + ShapeToString(out.value.shape()));
  }
  return BackwardFrom(output, Tensor(out.value.shape(), {1}));
}

Gradients Tape::BackwardFrom(Var output, const Tensor& seed) const {
  CheckOwned(output);
  const Node& out = nodes_[output.index];
  if (seed.shape() != out.value.shape()) {
    throw Error(ErrorCode::kShapeMismatch,
                "seed shape " + ShapeToString(seed.shape()) +
                    " does not match output " + ShapeToString(out.value.shape()));
  }
  Gradients result;
  result.tape_id_ = id_;
  result.grads_.resize(nodes_.size());
  result.shapes_.reserve(nodes_.size());
  for (const Node& node : nodes_) result.shapes_.push_back(node.value.shape());
  if (!out.requires_grad) return result;

  result.grads_[output.index] = seed;
  for (std::size_t i = output.index + 1; i-- > 0;) {
    const Node& node = nodes_[i];
    if (node.kernel == Kernel::kLeaf || !node.requires_grad) continue;
    if (result.grads_[i].size() == 0) continue;
    Adjoint(node, result.grads_[i], result.grads_);
  }
  return result;
}

void Tape::Adjoint(const Node& node, const Tensor& grad,
                   std::vector<Tensor>& grads) const {
  auto in = [&](std::size_t i) -> const Tensor& {
    return nodes_[node.inputs[i]].value;
  };
  auto wants = [&](std::size_t i) {
    return nodes_[node.inputs[i]].requires_grad;
  };
  auto slot = [&](std::size_t i) -> Tensor& {
    return GradSlot(grads, node.inputs[i], in(i).shape());
  };
  const Tensor& y = node.value;

  switch (node.kernel) {
    case Kernel::kMatmul: {
      const Tensor& a = in(0);
      const Tensor& b = in(1);
      const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
      if (wants(0)) {
        Tensor& da = slot(0);
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t p = 0; p < k; ++p) {
            Real acc = 0;
            for (std::size_t j = 0; j < n; ++j) acc += grad[i * n + j] * b[p * n + j];
            da[i * k + p] += acc;
          }
        }
      }
      if (wants(1)) {
        Tensor& db = slot(1);
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t p = 0; p < k; ++p) {
            const Real av = a[i * k + p];
            if (av == 0) continue;
            for (std::size_t j = 0; j < n; ++j) db[p * n + j] += av * grad[i * n + j];
          }
        }
      }
      break;
    }
    case Kernel::kAdd: {
      if (wants(0)) AccumulateInto(slot(0), grad);
      if (wants(1)) {
        const Tensor& b = in(1);
        Tensor& db = slot(1);
        if (b.shape() == grad.shape()) {
          AccumulateInto(db, grad);
        } else {
          for (std::size_t r = 0; r < grad.rows(); ++r) {
            for (std::size_t c = 0; c < grad.cols(); ++c) db[c] += grad.at(r, c);
          }
        }
      }
      break;
    }
    case Kernel::kHadamard: {
      for (std::size_t k = 0; k < 2; ++k) {
        if (!wants(k)) continue;
        const Tensor& other = in(1 - k);
        Tensor& d = slot(k);
        for (std::size_t i = 0; i < grad.size(); ++i) d[i] += grad[i] * other[i];
      }
      break;
    }
    case Kernel::kTanh: {
      Tensor& d = slot(0);
      for (std::size_t i = 0; i < grad.size(); ++i) d[i] += grad[i] * (1 - y[i] * y[i]);
      break;
    }
    case Kernel::kRelu: {
      const Tensor& x = in(0);
      Tensor& d = slot(0);
      for (std::size_t i = 0; i < grad.size(); ++i) {
        if (x[i] > 0) d[i] += grad[i];
      }
      break;
    }
    case Kernel::kSqrtClamped: {
      const Tensor& x = in(0);
      Tensor& d = slot(0);
      for (std::size_t i = 0; i < grad.size(); ++i) {
        if (x[i] > 0) d[i] += grad[i] * 0.5 / std::sqrt(std::max(x[i], kSqrtGradFloor));
      }
      break;
    }
    case Kernel::kSoftmax: {
      Tensor& d = slot(0);
      const std::size_t rows = y.rows(), cols = y.cols();
      const bool by_row = node.attrs.axis == 1;
      const std::size_t outer = by_row ? rows : cols;
      const std::size_t inner = by_row ? cols : rows;
      for (std::size_t o = 0; o < outer; ++o) {
        auto idx = [&](std::size_t i) {
          return by_row ? o * cols + i : i * cols + o;
        };
        Real dot = 0;
        for (std::size_t i = 0; i < inner; ++i) dot += grad[idx(i)] * y[idx(i)];
        for (std::size_t i = 0; i < inner; ++i) {
          d[idx(i)] += y[idx(i)] * (grad[idx(i)] - dot);
        }
      }
      break;
    }
    case Kernel::kLayerNorm: {
      const Tensor& x = in(0);
      const Tensor& gain = in(1);
      const std::size_t d = x.cols();
      const Real inv_d = 1 / static_cast<Real>(d);
      std::vector<Real> xhat(d), dxhat(d);
      for (std::size_t r = 0; r < x.rows(); ++r) {
        Real mean = 0;
        for (std::size_t c = 0; c < d; ++c) mean += x.at(r, c);
        mean *= inv_d;
        Real var = 0;
        for (std::size_t c = 0; c < d; ++c) {
          const Real diff = x.at(r, c) - mean;
          var += diff * diff;
        }
        var *= inv_d;
        const Real inv = 1 / std::sqrt(var + node.attrs.eps);
        Real mean_dxhat = 0, mean_dxhat_xhat = 0;
        for (std::size_t c = 0; c < d; ++c) {
          xhat[c] = (x.at(r, c) - mean) * inv;
          dxhat[c] = grad.at(r, c) * gain[c];
          mean_dxhat += dxhat[c];
          mean_dxhat_xhat += dxhat[c] * xhat[c];
        }
        mean_dxhat *= inv_d;
        mean_dxhat_xhat *= inv_d;
        if (wants(0)) {
          Tensor& dx = slot(0);
          for (std::size_t c = 0; c < d; ++c) {
            dx.at(r, c) += inv * (dxhat[c] - mean_dxhat - xhat[c] * mean_dxhat_xhat);
          }
        }
        if (wants(1)) {
          Tensor& dg = slot(1);
          for (std::size_t c = 0; c < d; ++c) dg[c] += grad.at(r, c) * xhat[c];
        }
        if (wants(2)) {
          Tensor& db = slot(2);
          for (std::size_t c = 0; c < d; ++c) db[c] += grad.at(r, c);
        }
      }
      break;
    }
    case Kernel::kEmbeddingLookup: {
      Tensor& d = slot(0);
      const std::size_t cols = grad.cols();
      for (std::size_t i = 0; i < node.attrs.indices.size(); ++i) {
        const std::size_t row = node.attrs.indices[i];
        for (std::size_t c = 0; c < cols; ++c) d.at(row, c) += grad.at(i, c);
      }
      break;
    }
    case Kernel::kSum:
    case Kernel::kMean: {
      const Tensor& x = in(0);
      Tensor& d = slot(0);
      const std::size_t rows = x.rows(), cols = x.cols();
      Real scale = 1;
      if (node.kernel == Kernel::kMean) {
        scale = node.attrs.axis == -1 ? 1 / static_cast<Real>(x.size())
                : node.attrs.axis == 0 ? 1 / static_cast<Real>(rows)
                                       : 1 / static_cast<Real>(cols);
      }
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) {
          const Real g = node.attrs.axis == -1 ? grad[0]
                         : node.attrs.axis == 0 ? grad[c]
                                                : grad[r];
          d.at(r, c) += g * scale;
        }
      }
      break;
    }
    case Kernel::kConcat: {
      const bool by_cols = node.attrs.axis == 1;
      std::size_t offset = 0;
      for (std::size_t i = 0; i < node.inputs.size(); ++i) {
        const Tensor& t = in(i);
        if (wants(i)) {
          Tensor& d = slot(i);
          for (std::size_t r = 0; r < t.rows(); ++r) {
            for (std::size_t c = 0; c < t.cols(); ++c) {
              d.at(r, c) += by_cols ? grad.at(r, offset + c) : grad.at(offset + r, c);
            }
          }
        }
        offset += by_cols ? t.cols() : t.rows();
      }
      break;
    }
    case Kernel::kSlice: {
      const Tensor& x = in(0);
      Tensor& d = slot(0);
      for (std::size_t r = 0; r < grad.rows(); ++r) {
        for (std::size_t c = 0; c < grad.cols(); ++c) {
          if (node.attrs.axis == 0) {
            d.at(node.attrs.begin + r, c) += grad.at(r, c);
          } else {
            d.at(r, node.attrs.begin + c) += grad.at(r, c);
          }
        }
      }
      (void)x;
      break;
    }
    case Kernel::kScalarMul: {
      Tensor& d = slot(0);
      for (std::size_t i = 0; i < grad.size(); ++i) d[i] += grad[i] * node.attrs.scalar;
      break;
    }
    case Kernel::kCrossEntropyFromLogits: {
      const Tensor& logits = in(0);
      Tensor& d = slot(0);
      const Real scale = grad[0] / static_cast<Real>(logits.rows());
      for (std::size_t r = 0; r < logits.rows(); ++r) {
        Real max_v = logits.at(r, 0);
        for (std::size_t c = 1; c < logits.cols(); ++c) max_v = std::max(max_v, logits.at(r, c));
        Real sum = 0;
        for (std::size_t c = 0; c < logits.cols(); ++c) sum += std::exp(logits.at(r, c) - max_v);
        for (std::size_t c = 0; c < logits.cols(); ++c) {
          const Real p = std::exp(logits.at(r, c) - max_v) / sum;
          const Real onehot = c == node.attrs.indices[r] ? 1 : 0;
          d.at(r, c) += scale * (p - onehot);
        }
      }
      break;
    }
    case Kernel::kTranspose: {
      Tensor& d = slot(0);
      for (std::size_t r = 0; r < grad.rows(); ++r) {
        for (std::size_t c = 0; c < grad.cols(); ++c) d.at(c, r) += grad.at(r, c);
      }
      break;
    }
    case Kernel::kNormalize: {
      const Tensor& x = in(0);
      Real total = 0;
      for (const Real v : x.values()) total += v;
      Real dot = 0;
      for (std::size_t i = 0; i < grad.size(); ++i) dot += grad[i] * y[i];
      Tensor& d = slot(0);
      for (std::size_t i = 0; i < grad.size(); ++i) d[i] += (grad[i] - dot) / total;
      break;
    }
    case Kernel::kReciprocal: {
      Tensor& d = slot(0);
      for (std::size_t i = 0; i < grad.size(); ++i) d[i] -= grad[i] * y[i] * y[i];
      break;
    }
    case Kernel::kLeaf:
    case Kernel::kKernelCount:
      break;
  }
}

namespace {

Tensor Filled(std::size_t rows, std::size_t cols, Real value) {
  return Tensor({rows, cols}, std::vector<Real>(rows * cols, value));
}

}  // namespace

std::vector<Var> Tape::GradientGraph(Var output, const Tensor& seed,
                                     std::span<const Var> targets) {
  CheckOwned(output);
  for (const Var t : targets) CheckOwned(t);
  if (seed.shape() != nodes_[output.index].value.shape()) {
    throw Error(ErrorCode::kShapeMismatch,
                "seed shape " + ShapeToString(seed.shape()) + " does not match output " +
                    ShapeToString(nodes_[output.index].value.shape()));
  }
  const std::size_t end = output.index + 1;
  std::size_t lowest = end;
  for (const Var t : targets) lowest = std::min(lowest, t.index);

  // Nodes downstream of some target; only their adjoints are needed.
  std::vector<char> live(end, 0);
  for (const Var t : targets) {
    if (t.index < end) live[t.index] = 1;
  }
  for (std::size_t i = lowest; i < end; ++i) {
    for (const std::size_t in : nodes_[i].inputs) {
      if (live[in]) live[i] = 1;
    }
  }

  std::vector<std::optional<Var>> adj(end);
  const Var self{id_, 0};
  auto var = [&](std::size_t index) { return Var{self.tape_id, index}; };
  auto accumulate = [&](std::size_t index, Var g) {
    if (index < lowest || !live[index]) return;
    adj[index] = adj[index] ? Add(*adj[index], g) : g;
  };
  auto shape = [&](std::size_t index) {
    const Tensor& v = nodes_[index].value;
    return std::pair<std::size_t, std::size_t>(v.rows(), v.cols());
  };
  // Row vector r (1 x c) repeated over `rows` rows, column vector over cols.
  auto rows_of = [&](Var row, std::size_t rows) {
    return Matmul(Constant(Filled(rows, 1, 1)), row);
  };
  auto cols_of = [&](Var col, std::size_t cols) {
    return Matmul(col, Constant(Filled(1, cols, 1)));
  };
  auto negate = [&](Var x) { return ScalarMul(x, -1); };

  if (live[output.index]) adj[output.index] = Constant(seed);
  for (std::size_t i = end; i-- > lowest;) {
    if (!adj[i] || nodes_[i].kernel == Kernel::kLeaf) continue;
    const Kernel kernel = nodes_[i].kernel;
    const std::vector<std::size_t> inputs = nodes_[i].inputs;
    const KernelAttrs attrs = nodes_[i].attrs;
    const Var g = *adj[i];
    const Var y = var(i);
    auto x = [&](std::size_t k) { return var(inputs[k]); };
    auto needs = [&](std::size_t k) {
      return inputs[k] >= lowest && live[inputs[k]] != 0;
    };

    switch (kernel) {
      case Kernel::kMatmul:
        if (needs(0)) accumulate(inputs[0], Matmul(g, Transpose(x(1))));
        if (needs(1)) accumulate(inputs[1], Matmul(Transpose(x(0)), g));
        break;
      case Kernel::kAdd:
        if (needs(0)) accumulate(inputs[0], g);
        if (needs(1)) {
          accumulate(inputs[1], shape(inputs[1]) == shape(i) ? g : Sum(g, 0));
        }
        break;
      case Kernel::kHadamard:
        if (needs(0)) accumulate(inputs[0], Hadamard(g, x(1)));
        if (needs(1)) accumulate(inputs[1], Hadamard(g, x(0)));
        break;
      case Kernel::kTanh:
        accumulate(inputs[0], Add(g, negate(Hadamard(g, Hadamard(y, y)))));
        break;
      case Kernel::kRelu: {
        Tensor step = nodes_[inputs[0]].value;
        for (Real& v : step.values()) v = v > 0 ? 1 : 0;
        accumulate(inputs[0], Hadamard(g, Constant(std::move(step))));
        break;
      }
      case Kernel::kSoftmax: {
        const auto [rows, cols] = shape(i);
        const Var gy = Hadamard(g, y);
        const Var dot = attrs.axis == 1 ? cols_of(Sum(gy, 1), cols) : rows_of(Sum(gy, 0), rows);
        accumulate(inputs[0], Hadamard(y, Add(g, negate(dot))));
        break;
      }
      case Kernel::kLayerNorm: {
        const auto [rows, cols] = shape(i);
        const Var xc = Add(x(0), negate(cols_of(Mean(x(0), 1), cols)));
        const Var var_eps =
            Add(Mean(Hadamard(xc, xc), 1), Constant(Filled(rows, 1, attrs.eps)));
        const Var inv = cols_of(Reciprocal(SqrtClamped(var_eps)), cols);
        const Var xhat = Hadamard(xc, inv);
        if (needs(0)) {
          const Var dxhat = Hadamard(g, rows_of(x(1), rows));
          const Var m1 = cols_of(Mean(dxhat, 1), cols);
          const Var m2 = cols_of(Mean(Hadamard(dxhat, xhat), 1), cols);
          accumulate(inputs[0],
                     Hadamard(inv, Add(Add(dxhat, negate(m1)), negate(Hadamard(xhat, m2)))));
        }
        if (needs(1)) accumulate(inputs[1], Sum(Hadamard(g, xhat), 0));
        if (needs(2)) accumulate(inputs[2], Sum(g, 0));
        break;
      }
      case Kernel::kSum:
      case Kernel::kMean: {
        const auto [rows, cols] = shape(inputs[0]);
        Real scale = 1;
        if (kernel == Kernel::kMean) {
          scale = attrs.axis == -1  ? 1 / static_cast<Real>(rows * cols)
                  : attrs.axis == 0 ? 1 / static_cast<Real>(rows)
                                    : 1 / static_cast<Real>(cols);
        }
        Var spread = attrs.axis == -1 ? cols_of(rows_of(g, rows), cols)
                     : attrs.axis == 0 ? rows_of(g, rows)
                                       : cols_of(g, cols);
        if (scale != 1) spread = ScalarMul(spread, scale);
        accumulate(inputs[0], spread);
        break;
      }
      case Kernel::kConcat: {
        std::size_t offset = 0;
        for (std::size_t k = 0; k < inputs.size(); ++k) {
          const auto [r, c] = shape(inputs[k]);
          const std::size_t width = attrs.axis == 1 ? c : r;
          if (needs(k)) accumulate(inputs[k], Slice(g, attrs.axis, offset, offset + width));
          offset += width;
        }
        break;
      }
      case Kernel::kSlice: {
        const auto [rows, cols] = shape(inputs[0]);
        const bool by_cols = attrs.axis == 1;
        const std::size_t total = by_cols ? cols : rows;
        std::vector<Var> parts;
        auto zeros = [&](std::size_t n) {
          return Constant(by_cols ? Tensor::Zeros(rows, n) : Tensor::Zeros(n, cols));
        };
        if (attrs.begin > 0) parts.push_back(zeros(attrs.begin));
        parts.push_back(g);
        if (attrs.end < total) parts.push_back(zeros(total - attrs.end));
        accumulate(inputs[0], parts.size() == 1 ? g : Concat(parts, attrs.axis));
        break;
      }
      case Kernel::kScalarMul:
        accumulate(inputs[0], ScalarMul(g, attrs.scalar));
        break;
      case Kernel::kTranspose:
        accumulate(inputs[0], Transpose(g));
        break;
      case Kernel::kNormalize: {
        const auto [rows, cols] = shape(i);
        const Var dot = cols_of(rows_of(Sum(Hadamard(g, y), -1), rows), cols);
        const Var inv = cols_of(rows_of(Reciprocal(Sum(x(0), -1)), rows), cols);
        accumulate(inputs[0], Hadamard(Add(g, negate(dot)), inv));
        break;
      }
      case Kernel::kReciprocal:
        accumulate(inputs[0], negate(Hadamard(g, Hadamard(y, y))));
        break;
      case Kernel::kEmbeddingLookup:
      case Kernel::kCrossEntropyFromLogits:
      case Kernel::kSqrtClamped:
      case Kernel::kLeaf:
      case Kernel::kKernelCount:
        throw Error(ErrorCode::kUnsupportedKernel,
                    std::string(KernelName(kernel)) + " inside a recorded gradient");
    }
  }

  std::vector<Var> result;
  for (const Var t : targets) {
    if (t.index < end && adj[t.index]) {
      result.push_back(*adj[t.index]);
    } else {
      result.push_back(Constant(Tensor(nodes_[t.index].value.shape())));
    }
  }
  return result;
}

Var Tape::Matmul(Var a, Var b) {
  const Var in[] = {a, b};
  return Record(Kernel::kMatmul, in);
}

Var Tape::Add(Var a, Var b) {
  const Var in[] = {a, b};
  return Record(Kernel::kAdd, in);
}

Var Tape::Hadamard(Var a, Var b) {
  const Var in[] = {a, b};
  return Record(Kernel::kHadamard, in);
}

Var Tape::Tanh(Var x) { return Record(Kernel::kTanh, {&x, 1}); }
Var Tape::Relu(Var x) { return Record(Kernel::kRelu, {&x, 1}); }
Var Tape::SqrtClamped(Var x) { return Record(Kernel::kSqrtClamped, {&x, 1}); }
Var Tape::Transpose(Var x) { return Record(Kernel::kTranspose, {&x, 1}); }
Var Tape::Normalize(Var x) { return Record(Kernel::kNormalize, {&x, 1}); }
Var Tape::Reciprocal(Var x) { return Record(Kernel::kReciprocal, {&x, 1}); }

Var Tape::Softmax(Var x, int axis) {
  KernelAttrs attrs;
  attrs.axis = axis;
  return Record(Kernel::kSoftmax, {&x, 1}, attrs);
}

Var Tape::LayerNorm(Var x, Var gain, Var bias, Real eps) {
  KernelAttrs attrs;
  attrs.eps = eps;
  const Var in[] = {x, gain, bias};
  return Record(Kernel::kLayerNorm, in, attrs);
}

Var Tape::EmbeddingLookup(Var table, std::vector<std::size_t> rows) {
  KernelAttrs attrs;
  attrs.indices = std::move(rows);
  return Record(Kernel::kEmbeddingLookup, {&table, 1}, attrs);
}

Var Tape::Sum(Var x, int axis) {
  KernelAttrs attrs;
  attrs.axis = axis;
  return Record(Kernel::kSum, {&x, 1}, attrs);
}

Var Tape::Mean(Var x, int axis) {
  KernelAttrs attrs;
  attrs.axis = axis;
  return Record(Kernel::kMean, {&x, 1}, attrs);
}

Var Tape::Concat(std::span<const Var> parts, int axis) {
  KernelAttrs attrs;
  attrs.axis = axis;
  return Record(Kernel::kConcat, parts, attrs);
}

Var Tape::Slice(Var x, int axis, std::size_t begin, std::size_t end) {
  KernelAttrs attrs;
  attrs.axis = axis;
  attrs.begin = begin;
  attrs.end = end;
  return Record(Kernel::kSlice, {&x, 1}, attrs);
}

Var Tape::ScalarMul(Var x, Real scalar) {
  KernelAttrs attrs;
  attrs.scalar = scalar;
  return Record(Kernel::kScalarMul, {&x, 1}, attrs);
}

Var Tape::CrossEntropyFromLogits(Var logits, std::vector<std::size_t> targets) {
  KernelAttrs attrs;
  attrs.indices = std::move(targets);
  return Record(Kernel::kCrossEntropyFromLogits, {&logits, 1}, attrs);
}

}  // namespace groupflow
