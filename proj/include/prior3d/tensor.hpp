// Copyright 2026 The prior3d Authors. All Rights Reserved.
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

// Dense row-major tensors with reverse-mode automatic differentiation.
//
// Every op returns a new Tensor whose node remembers its inputs and a
// backward closure. Graphs are built per forward pass and released when the
// last Tensor referencing them goes away. A graph belongs to one thread.

#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace prior3d {

using Shape = std::vector<int>;

template <typename T>
using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Thrown for shape/argument contract violations of tensor ops.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

std::string shape_string(const Shape& shape);
std::int64_t shape_numel(const Shape& shape);

template <typename T>
struct Node {
  Shape shape;
  Vec<T> value;
  Vec<T> grad;  // allocated lazily, same size as value
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads this node's grad and accumulates into the inputs' grads.
  std::function<void(Node&)> backward_fn;
  const char* op = "leaf";

  Vec<T>& ensure_grad() {
    if (grad.size() != value.size()) grad = Vec<T>::Zero(value.size());
    return grad;
  }
};

template <typename T>
class Tensor {
 public:
  using Scalar = T;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  static Tensor constant(Shape shape, Vec<T> values);
  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, T value);
  // A leaf that accumulates gradients (a trainable parameter).
  static Tensor parameter(Shape shape, Vec<T> values);
  static Tensor scalar(T value) { return constant({1}, Vec<T>::Constant(1, value)); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int dim(int axis) const;
  int rank() const { return static_cast<int>(node_->shape.size()); }
  Eigen::Index size() const { return node_->value.size(); }

  const Vec<T>& value() const { return node_->value; }
  Vec<T>& mutable_value() { return node_->value; }
  const Vec<T>& grad() const { return node_->grad; }
  bool has_grad() const { return node_->grad.size() == node_->value.size(); }
  void zero_grad() { node_->grad.setZero(node_->value.size()); }
  bool requires_grad() const { return node_->requires_grad; }
  const char* op() const { return node_->op; }

  T item() const;
  T operator[](Eigen::Index i) const { return node_->value[i]; }
  // Element (r, c) of a rank-2 tensor.
  T at(int r, int c) const { return node_->value[static_cast<Eigen::Index>(r) * dim(1) + c]; }

  // Rank-2 view of the values.
  Eigen::Map<const RowMatrix<T>> matrix() const;

  // Same values, no history.
  Tensor detach() const { return constant(shape(), value()); }

  const std::shared_ptr<Node<T>>& node() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

// While alive on a thread, ops on that thread record no history (inference).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
  static bool active();
};

// Builds a result node. The backward closure is only kept when at least one
// input requires a gradient.
template <typename T>
Tensor<T> make_op(const char* name, Shape shape, Vec<T> value,
                  std::vector<Tensor<T>> inputs, std::function<void(Node<T>&)> backward);

// Reverse topological record of a graph rooted at one tensor.
template <typename T>
class Tape {
 public:
  static Tape record(const Tensor<T>& root);
  // Nodes in forward (topological) order; backward walks it in reverse.
  const std::vector<Node<T>*>& order() const { return order_; }
  std::size_t size() const { return order_.size(); }

 private:
  std::vector<Node<T>*> order_;
};

// Populates gradients of every grad-tracking leaf reachable from `loss`.
// Leaf gradients accumulate across calls; callers reset between steps.
template <typename T>
void backward(const Tensor<T>& loss);

// ---- linear algebra ---------------------------------------------------------
template <typename T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> transpose(const Tensor<T>& a);

// ---- elementwise ------------------------------------------------------------
template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> scale(const Tensor<T>& a, T s);
template <typename T> Tensor<T> add_scalar(const Tensor<T>& a, T s);
// a[m x n] + bias[n] broadcast over rows.
template <typename T> Tensor<T> add_bias(const Tensor<T>& a, const Tensor<T>& bias);
// a[m x n] * gain[n] broadcast over rows.
template <typename T> Tensor<T> mul_bias(const Tensor<T>& a, const Tensor<T>& gain);
// a[m x n] * w[m] broadcast over columns; works for any rank, w indexes axis 0.
template <typename T> Tensor<T> mul_rows(const Tensor<T>& a, const Tensor<T>& w);
template <typename T> Tensor<T> relu(const Tensor<T>& a);
template <typename T> Tensor<T> sigmoid(const Tensor<T>& a);
template <typename T> Tensor<T> softplus(const Tensor<T>& a);
template <typename T> Tensor<T> tanh(const Tensor<T>& a);
template <typename T> Tensor<T> abs(const Tensor<T>& a);

// ---- reductions and normalization ---------------------------------------
template <typename T> Tensor<T> sum(const Tensor<T>& a);
template <typename T> Tensor<T> mean(const Tensor<T>& a);
// Numerically stable softmax along `axis` (negative counts from the back).
template <typename T> Tensor<T> softmax(const Tensor<T>& x, int axis);
// Row softmax over entries whose mask is non-zero; fully masked rows are 0.
template <typename T>
Tensor<T> masked_softmax(const Tensor<T>& x, std::span<const std::uint8_t> mask);
// Normalizes the last axis to zero mean / unit variance (no affine).
template <typename T> Tensor<T> layer_norm(const Tensor<T>& x, T eps = T(1e-5));
// Mean over H and W of an [H x W x C] map -> [C].
template <typename T> Tensor<T> global_avg_pool(const Tensor<T>& x);
// Non-overlapping k x k average pooling of [H x W x C]; H, W divisible by k.
template <typename T> Tensor<T> avg_pool2d(const Tensor<T>& x, int k);

// ---- shape ------------------------------------------------------------------
template <typename T> Tensor<T> reshape(const Tensor<T>& a, Shape shape);
template <typename T> Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis);
template <typename T> Tensor<T> slice(const Tensor<T>& a, int axis, int start, int length);
// Rows idx of a rank >= 1 tensor (axis 0 gather).
template <typename T> Tensor<T> gather_rows(const Tensor<T>& a, std::span<const int> idx);
// Rows where `take_a` is set come from a, the others from b.
template <typename T>
Tensor<T> select_rows(std::span<const std::uint8_t> take_a, const Tensor<T>& a, const Tensor<T>& b);

// ---- image ops --------------------------------------------------------------
template <typename T>
struct Sampled {
  Tensor<T> values;                 // [N x C]
  std::vector<std::uint8_t> valid;  // N flags
};

// Bilinear lookup of map[H x W x C] at continuous pixel coordinates uv[N x 2]
// (u along W, v along H, integer values at pixel centers). Neighbors outside
// the map contribute zero; a sample with no in-bounds neighbor is invalid and
// returns zeros. Differentiable w.r.t. both the map and uv.
template <typename T>
Sampled<T> bilinear_sample(const Tensor<T>& map, const Tensor<T>& uv);

// Single-point convenience form.
template <typename T>
Sampled<T> bilinear_sample(const Tensor<T>& map, T u, T v);

// 2D convolution of x[H x W x Cin] with weight[k*k*Cin x Cout] and bias[Cout],
// zero padding `pad`. Output [Ho x Wo x Cout].
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                 int kernel, int stride, int pad);

// x[H x W x C] scaled per pixel by w[H x W].
template <typename T> Tensor<T> mul_pixels(const Tensor<T>& x, const Tensor<T>& w);

// out[n, f] = sum_s w[n, s] * x[n, s, f] for w[N x S], x[N x S x F].
template <typename T> Tensor<T> weighted_sum(const Tensor<T>& w, const Tensor<T>& x);

// ---- encodings and losses ---------------------------------------------------
// Per column j of x[N x K], frequencies scale * 2^i for i < num_freqs; output
// [N x K*2*num_freqs] of (sin, cos) pairs.
template <typename T>
Tensor<T> sinusoidal_encode(const Tensor<T>& x, int num_freqs, T scale);

// Summed sigmoid focal loss of logits[N x C] against {0,1} targets[N x C].
template <typename T>
Tensor<T> sigmoid_focal_loss(const Tensor<T>& logits, const RowMatrix<T>& targets, T alpha,
                             T gamma);

}  // namespace prior3d
