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

#include "prior3d/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>
#include <utility>

namespace prior3d {

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << " x ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (int d : shape) n *= d;
  return n;
}

namespace {

void check_shape(const Shape& shape) {
  for (int d : shape) {
    if (d <= 0) throw ShapeError("non-positive dimension in shape " + shape_string(shape));
  }
}

template <typename T>
void require_rank(const Tensor<T>& t, int rank, const char* op) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_string(t.shape()));
  }
}

template <typename T>
void require_same(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
}

template <typename T>
bool tracks(const Node<T>& self, std::size_t i) {
  return i < self.inputs.size() && self.inputs[i]->requires_grad;
}

template <typename T>
Eigen::Map<RowMatrix<T>> as_matrix(Vec<T>& v, Eigen::Index rows, Eigen::Index cols) {
  return Eigen::Map<RowMatrix<T>>(v.data(), rows, cols);
}

template <typename T>
Eigen::Map<const RowMatrix<T>> as_matrix(const Vec<T>& v, Eigen::Index rows, Eigen::Index cols) {
  return Eigen::Map<const RowMatrix<T>>(v.data(), rows, cols);
}

// Splits a shape around `axis` into outer * len * inner.
struct AxisSplit {
  Eigen::Index outer = 1, len = 1, inner = 1;
};

AxisSplit split_axis(const Shape& shape, int axis) {
  AxisSplit s;
  for (int i = 0; i < axis; ++i) s.outer *= shape[i];
  s.len = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

int normalize_axis(int axis, int rank, const char* op) {
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) throw ShapeError(std::string(op) + ": axis out of range");
  return axis;
}

template <typename T>
T stable_softplus(T x) {
  return std::max(x, T(0)) + std::log1p(std::exp(-std::abs(x)));
}

template <typename T>
T stable_sigmoid(T x) {
  if (x >= 0) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

}  // namespace

// ---- Tensor -------------------------------------------------------------------

template <typename T>
Tensor<T> Tensor<T>::constant(Shape shape, Vec<T> values) {
  check_shape(shape);
  if (shape_numel(shape) != values.size()) {
    throw ShapeError("value count " + std::to_string(values.size()) + " does not match shape " +
                     shape_string(shape));
  }
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  return Tensor(std::move(node));
}

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape) {
  check_shape(shape);
  const auto n = shape_numel(shape);
  return constant(std::move(shape), Vec<T>::Zero(n));
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value) {
  check_shape(shape);
  const auto n = shape_numel(shape);
  return constant(std::move(shape), Vec<T>::Constant(n, value));
}

template <typename T>
Tensor<T> Tensor<T>::parameter(Shape shape, Vec<T> values) {
  Tensor t = constant(std::move(shape), std::move(values));
  t.node_->requires_grad = true;
  t.node_->op = "parameter";
  return t;
}

template <typename T>
int Tensor<T>::dim(int axis) const {
  const int r = rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw ShapeError("dim: axis out of range for " + shape_string(shape()));
  return node_->shape[axis];
}

template <typename T>
T Tensor<T>::item() const {
  if (size() != 1) throw ShapeError("item() on non-scalar tensor " + shape_string(shape()));
  return node_->value[0];
}

template <typename T>
Eigen::Map<const RowMatrix<T>> Tensor<T>::matrix() const {
  const Vec<T>& v = node_->value;
  if (rank() == 1) return as_matrix<T>(v, 1, v.size());
  const Eigen::Index rows = node_->shape[0];
  return as_matrix<T>(v, rows, v.size() / rows);
}

namespace {
thread_local int no_grad_depth = 0;
}  // namespace

NoGradGuard::NoGradGuard() { ++no_grad_depth; }
NoGradGuard::~NoGradGuard() { --no_grad_depth; }
bool NoGradGuard::active() { return no_grad_depth > 0; }

template <typename T>
Tensor<T> make_op(const char* name, Shape shape, Vec<T> value, std::vector<Tensor<T>> inputs,
                  std::function<void(Node<T>&)> backward) {
  Tensor<T> out = Tensor<T>::constant(std::move(shape), std::move(value));
  auto& node = *out.node();
  node.op = name;
  const bool tracked = !NoGradGuard::active() &&
      std::any_of(inputs.begin(), inputs.end(), [](const Tensor<T>& t) { return t.requires_grad(); });
  if (tracked) {
    node.requires_grad = true;
    node.inputs.reserve(inputs.size());
    for (auto& in : inputs) node.inputs.push_back(in.node());
    node.backward_fn = std::move(backward);
  }
  return out;
}

template <typename T>
Tape<T> Tape<T>::record(const Tensor<T>& root) {
  Tape tape;
  if (!root.requires_grad()) return tape;
  std::unordered_set<const Node<T>*> seen;
  // Iterative post-order DFS; each frame is (node, next input index).
  std::vector<std::pair<Node<T>*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node<T>* child = node->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      tape.order_.push_back(node);
      stack.pop_back();
    }
  }
  return tape;
}

template <typename T>
void backward(const Tensor<T>& loss) {
  if (!loss.defined() || loss.size() != 1) {
    throw ShapeError("backward: loss must be a scalar, got " +
                     (loss.defined() ? shape_string(loss.shape()) : std::string("undefined")));
  }
  if (!loss.requires_grad()) {
    throw std::invalid_argument("backward: loss is not reachable from any tracked parameter");
  }
  const Tape<T> tape = Tape<T>::record(loss);
  for (Node<T>* node : tape.order()) {
    if (!node->inputs.empty()) node->grad.setZero(node->value.size());
  }
  loss.node()->ensure_grad()[0] += T(1);
  const auto& order = tape.order();
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backward_fn) (*it)->backward_fn(**it);
  }
}

// ---- linear algebra -----------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw ShapeError("matmul: inner dimensions disagree, " + shape_string(a.shape()) + " x " +
                     shape_string(b.shape()));
  }
  Vec<T> out(static_cast<Eigen::Index>(m) * n);
  as_matrix<T>(out, m, n).noalias() = a.matrix() * b.matrix();
  return make_op<T>("matmul", {m, n}, std::move(out), {a, b}, [m, k, n](Node<T>& self) {
    auto g = as_matrix<T>(std::as_const(self.grad), m, n);
    if (tracks(self, 0)) {
      auto& A = *self.inputs[0];
      const auto B = as_matrix<T>(std::as_const(self.inputs[1]->value), k, n);
      as_matrix<T>(A.ensure_grad(), m, k).noalias() += g * B.transpose();
    }
    if (tracks(self, 1)) {
      auto& B = *self.inputs[1];
      const auto A = as_matrix<T>(std::as_const(self.inputs[0]->value), m, k);
      as_matrix<T>(B.ensure_grad(), k, n).noalias() += A.transpose() * g;
    }
  });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  require_rank(a, 2, "transpose");
  const int m = a.dim(0), n = a.dim(1);
  Vec<T> out(a.size());
  as_matrix<T>(out, n, m) = a.matrix().transpose();
  return make_op<T>("transpose", {n, m}, std::move(out), {a}, [m, n](Node<T>& self) {
    as_matrix<T>(self.inputs[0]->ensure_grad(), m, n) +=
        as_matrix<T>(std::as_const(self.grad), n, m).transpose();
  });
}

// ---- elementwise ----------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same(a, b, "add");
  return make_op<T>("add", a.shape(), a.value() + b.value(), {a, b}, [](Node<T>& self) {
    if (tracks(self, 0)) self.inputs[0]->ensure_grad() += self.grad;
    if (tracks(self, 1)) self.inputs[1]->ensure_grad() += self.grad;
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  require_same(a, b, "sub");
  return make_op<T>("sub", a.shape(), a.value() - b.value(), {a, b}, [](Node<T>& self) {
    if (tracks(self, 0)) self.inputs[0]->ensure_grad() += self.grad;
    if (tracks(self, 1)) self.inputs[1]->ensure_grad() -= self.grad;
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same(a, b, "mul");
  return make_op<T>("mul", a.shape(), a.value().cwiseProduct(b.value()), {a, b}, [](Node<T>& self) {
    if (tracks(self, 0)) self.inputs[0]->ensure_grad() += self.grad.cwiseProduct(self.inputs[1]->value);
    if (tracks(self, 1)) self.inputs[1]->ensure_grad() += self.grad.cwiseProduct(self.inputs[0]->value);
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  return make_op<T>("scale", a.shape(), a.value() * s, {a},
                    [s](Node<T>& self) { self.inputs[0]->ensure_grad() += self.grad * s; });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T s) {
  return make_op<T>("add_scalar", a.shape(), (a.value().array() + s).matrix(), {a},
                    [](Node<T>& self) { self.inputs[0]->ensure_grad() += self.grad; });
}

template <typename T>
Tensor<T> add_bias(const Tensor<T>& a, const Tensor<T>& bias) {
  const int n = a.shape().back();
  if (bias.size() != n) {
    throw ShapeError("add_bias: bias " + shape_string(bias.shape()) + " does not match " +
                     shape_string(a.shape()));
  }
  const Eigen::Index m = a.size() / n;
  Vec<T> out = a.value();
  as_matrix<T>(out, m, n).rowwise() += bias.value().transpose();
  return make_op<T>("add_bias", a.shape(), std::move(out), {a, bias}, [m, n](Node<T>& self) {
    if (tracks(self, 0)) self.inputs[0]->ensure_grad() += self.grad;
    if (tracks(self, 1)) {
      self.inputs[1]->ensure_grad() += as_matrix<T>(std::as_const(self.grad), m, n).colwise().sum().transpose();
    }
  });
}

template <typename T>
Tensor<T> mul_bias(const Tensor<T>& a, const Tensor<T>& gain) {
  const int n = a.shape().back();
  if (gain.size() != n) {
    throw ShapeError("mul_bias: gain " + shape_string(gain.shape()) + " does not match " +
                     shape_string(a.shape()));
  }
  const Eigen::Index m = a.size() / n;
  Vec<T> out = a.value();
  as_matrix<T>(out, m, n).array().rowwise() *= gain.value().transpose().array();
  return make_op<T>("mul_bias", a.shape(), std::move(out), {a, gain}, [m, n](Node<T>& self) {
    const auto g = as_matrix<T>(std::as_const(self.grad), m, n);
    if (tracks(self, 0)) {
      as_matrix<T>(self.inputs[0]->ensure_grad(), m, n).array() +=
          g.array().rowwise() * self.inputs[1]->value.transpose().array();
    }
    if (tracks(self, 1)) {
      const auto x = as_matrix<T>(std::as_const(self.inputs[0]->value), m, n);
      self.inputs[1]->ensure_grad() += g.cwiseProduct(x).colwise().sum().transpose();
    }
  });
}

template <typename T>
Tensor<T> mul_rows(const Tensor<T>& a, const Tensor<T>& w) {
  const int m = a.dim(0);
  if (w.size() != m) {
    throw ShapeError("mul_rows: weights " + shape_string(w.shape()) + " do not match " +
                     shape_string(a.shape()));
  }
  const Eigen::Index n = a.size() / m;
  Vec<T> out = a.value();
  as_matrix<T>(out, m, n).array().colwise() *= w.value().array();
  return make_op<T>("mul_rows", a.shape(), std::move(out), {a, w}, [m, n](Node<T>& self) {
    const auto g = as_matrix<T>(std::as_const(self.grad), m, n);
    if (tracks(self, 0)) {
      as_matrix<T>(self.inputs[0]->ensure_grad(), m, n).array() +=
          g.array().colwise() * self.inputs[1]->value.array();
    }
    if (tracks(self, 1)) {
      const auto x = as_matrix<T>(std::as_const(self.inputs[0]->value), m, n);
      self.inputs[1]->ensure_grad() += g.cwiseProduct(x).rowwise().sum();
    }
  });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  return make_op<T>("relu", a.shape(), a.value().cwiseMax(T(0)), {a}, [](Node<T>& self) {
    self.inputs[0]->ensure_grad() +=
        (self.inputs[0]->value.array() > T(0)).select(self.grad.array(), T(0)).matrix();
  });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  Vec<T> out = a.value().unaryExpr([](T x) { return stable_sigmoid(x); });
  return make_op<T>("sigmoid", a.shape(), std::move(out), {a}, [](Node<T>& self) {
    const auto& y = self.value.array();
    self.inputs[0]->ensure_grad() += (self.grad.array() * y * (T(1) - y)).matrix();
  });
}

template <typename T>
Tensor<T> softplus(const Tensor<T>& a) {
  Vec<T> out = a.value().unaryExpr([](T x) { return stable_softplus(x); });
  return make_op<T>("softplus", a.shape(), std::move(out), {a}, [](Node<T>& self) {
    const Vec<T> s = self.inputs[0]->value.unaryExpr([](T x) { return stable_sigmoid(x); });
    self.inputs[0]->ensure_grad() += self.grad.cwiseProduct(s);
  });
}

template <typename T>
Tensor<T> tanh(const Tensor<T>& a) {
  Vec<T> out = a.value().array().tanh().matrix();
  return make_op<T>("tanh", a.shape(), std::move(out), {a}, [](Node<T>& self) {
    const auto& y = self.value.array();
    self.inputs[0]->ensure_grad() += (self.grad.array() * (T(1) - y * y)).matrix();
  });
}

template <typename T>
Tensor<T> abs(const Tensor<T>& a) {
  return make_op<T>("abs", a.shape(), a.value().cwiseAbs(), {a}, [](Node<T>& self) {
    const auto& x = self.inputs[0]->value.array();
    const auto sign = (x > T(0)).template cast<T>() - (x < T(0)).template cast<T>();
    self.inputs[0]->ensure_grad() += (self.grad.array() * sign).matrix();
  });
}

// ---- reductions -----------------------------------------------------------------

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  return make_op<T>("sum", {1}, Vec<T>::Constant(1, a.value().sum()), {a}, [](Node<T>& self) {
    self.inputs[0]->ensure_grad().array() += self.grad[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  const T n = static_cast<T>(a.size());
  return make_op<T>("mean", {1}, Vec<T>::Constant(1, a.value().sum() / n), {a}, [n](Node<T>& self) {
    self.inputs[0]->ensure_grad().array() += self.grad[0] / n;
  });
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis) {
  axis = normalize_axis(axis, x.rank(), "softmax");
  const AxisSplit s = split_axis(x.shape(), axis);
  Vec<T> out(x.size());
  const Vec<T>& in = x.value();
  for (Eigen::Index o = 0; o < s.outer; ++o) {
    for (Eigen::Index i = 0; i < s.inner; ++i) {
      const Eigen::Index base = o * s.len * s.inner + i;
      T mx = -std::numeric_limits<T>::infinity();
      for (Eigen::Index l = 0; l < s.len; ++l) mx = std::max(mx, in[base + l * s.inner]);
      T total = 0;
      for (Eigen::Index l = 0; l < s.len; ++l) {
        const T e = std::exp(in[base + l * s.inner] - mx);
        out[base + l * s.inner] = e;
        total += e;
      }
      for (Eigen::Index l = 0; l < s.len; ++l) out[base + l * s.inner] /= total;
    }
  }
  return make_op<T>("softmax", x.shape(), std::move(out), {x}, [s](Node<T>& self) {
    Vec<T>& gx = self.inputs[0]->ensure_grad();
    for (Eigen::Index o = 0; o < s.outer; ++o) {
      for (Eigen::Index i = 0; i < s.inner; ++i) {
        const Eigen::Index base = o * s.len * s.inner + i;
        T dot = 0;
        for (Eigen::Index l = 0; l < s.len; ++l) {
          dot += self.grad[base + l * s.inner] * self.value[base + l * s.inner];
        }
        for (Eigen::Index l = 0; l < s.len; ++l) {
          const Eigen::Index k = base + l * s.inner;
          gx[k] += self.value[k] * (self.grad[k] - dot);
        }
      }
    }
  });
}

template <typename T>
Tensor<T> masked_softmax(const Tensor<T>& x, std::span<const std::uint8_t> mask) {
  require_rank(x, 2, "masked_softmax");
  if (static_cast<Eigen::Index>(mask.size()) != x.size()) {
    throw ShapeError("masked_softmax: mask size does not match " + shape_string(x.shape()));
  }
  const int rows = x.dim(0), cols = x.dim(1);
  Vec<T> out = Vec<T>::Zero(x.size());
  const Vec<T>& in = x.value();
  for (int r = 0; r < rows; ++r) {
    const Eigen::Index base = static_cast<Eigen::Index>(r) * cols;
    T mx = -std::numeric_limits<T>::infinity();
    for (int c = 0; c < cols; ++c) {
      if (mask[base + c]) mx = std::max(mx, in[base + c]);
    }
    if (!std::isfinite(mx)) continue;
    T total = 0;
    for (int c = 0; c < cols; ++c) {
      if (!mask[base + c]) continue;
      out[base + c] = std::exp(in[base + c] - mx);
      total += out[base + c];
    }
    for (int c = 0; c < cols; ++c) out[base + c] /= total;
  }
  return make_op<T>("masked_softmax", x.shape(), std::move(out), {x}, [rows, cols](Node<T>& self) {
    Vec<T>& gx = self.inputs[0]->ensure_grad();
    for (int r = 0; r < rows; ++r) {
      const Eigen::Index base = static_cast<Eigen::Index>(r) * cols;
      T dot = 0;
      for (int c = 0; c < cols; ++c) dot += self.grad[base + c] * self.value[base + c];
      for (int c = 0; c < cols; ++c) {
        gx[base + c] += self.value[base + c] * (self.grad[base + c] - dot);
      }
    }
  });
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, T eps) {
  const Eigen::Index n = x.shape().back();
  const Eigen::Index rows = x.size() / n;
  Vec<T> out(x.size());
  Vec<T> inv_std(rows);
  const auto in = as_matrix<T>(x.value(), rows, n);
  auto y = as_matrix<T>(out, rows, n);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const T mu = in.row(r).mean();
    const T var = (in.row(r).array() - mu).square().mean();
    inv_std[r] = T(1) / std::sqrt(var + eps);
    y.row(r) = (in.row(r).array() - mu) * inv_std[r];
  }
  return make_op<T>("layer_norm", x.shape(), std::move(out), {x},
                    [rows, n, inv_std = std::move(inv_std)](Node<T>& self) {
                      const auto g = as_matrix<T>(std::as_const(self.grad), rows, n);
                      const auto yv = as_matrix<T>(std::as_const(self.value), rows, n);
                      auto gx = as_matrix<T>(self.inputs[0]->ensure_grad(), rows, n);
                      for (Eigen::Index r = 0; r < rows; ++r) {
                        const T gm = g.row(r).mean();
                        const T gym = g.row(r).cwiseProduct(yv.row(r)).mean();
                        gx.row(r).array() +=
                            inv_std[r] * (g.row(r).array() - gm - yv.row(r).array() * gym);
                      }
                    });
}

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  require_rank(x, 3, "global_avg_pool");
  const Eigen::Index pixels = static_cast<Eigen::Index>(x.dim(0)) * x.dim(1);
  const int c = x.dim(2);
  Vec<T> out = as_matrix<T>(x.value(), pixels, c).colwise().mean().transpose();
  return make_op<T>("global_avg_pool", {c}, std::move(out), {x}, [pixels, c](Node<T>& self) {
    as_matrix<T>(self.inputs[0]->ensure_grad(), pixels, c).rowwise() +=
        (self.grad / static_cast<T>(pixels)).transpose();
  });
}

template <typename T>
Tensor<T> avg_pool2d(const Tensor<T>& x, int k) {
  require_rank(x, 3, "avg_pool2d");
  const int h = x.dim(0), w = x.dim(1), c = x.dim(2);
  if (k <= 0 || h % k || w % k) {
    throw ShapeError("avg_pool2d: " + shape_string(x.shape()) + " not divisible by " + std::to_string(k));
  }
  const int ho = h / k, wo = w / k;
  const T norm = T(1) / static_cast<T>(k * k);
  Vec<T> out = Vec<T>::Zero(static_cast<Eigen::Index>(ho) * wo * c);
  const Vec<T>& in = x.value();
  for (int y = 0; y < h; ++y) {
    for (int xx = 0; xx < w; ++xx) {
      const Eigen::Index src = (static_cast<Eigen::Index>(y) * w + xx) * c;
      const Eigen::Index dst = (static_cast<Eigen::Index>(y / k) * wo + xx / k) * c;
      out.segment(dst, c) += in.segment(src, c) * norm;
    }
  }
  return make_op<T>("avg_pool2d", {ho, wo, c}, std::move(out), {x}, [=](Node<T>& self) {
    Vec<T>& gx = self.inputs[0]->ensure_grad();
    for (int y = 0; y < h; ++y) {
      for (int xx = 0; xx < w; ++xx) {
        const Eigen::Index src = (static_cast<Eigen::Index>(y) * w + xx) * c;
        const Eigen::Index dst = (static_cast<Eigen::Index>(y / k) * wo + xx / k) * c;
        gx.segment(src, c) += self.grad.segment(dst, c) * norm;
      }
    }
  });
}

// ---- shape ----------------------------------------------------------------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  check_shape(shape);
  if (shape_numel(shape) != a.size()) {
    throw ShapeError("reshape: cannot view " + shape_string(a.shape()) + " as " + shape_string(shape));
  }
  return make_op<T>("reshape", std::move(shape), a.value(), {a},
                    [](Node<T>& self) { self.inputs[0]->ensure_grad() += self.grad; });
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const int rank = parts.front().rank();
  axis = normalize_axis(axis, rank, "concat");
  Shape shape = parts.front().shape();
  int total = 0;
  for (const auto& p : parts) {
    if (p.rank() != rank) throw ShapeError("concat: rank mismatch");
    for (int i = 0; i < rank; ++i) {
      if (i != axis && p.shape()[i] != shape[i]) {
        throw ShapeError("concat: non-concat dimension mismatch " + shape_string(p.shape()) + " vs " +
                         shape_string(shape));
      }
    }
    total += p.shape()[axis];
  }
  shape[axis] = total;
  const AxisSplit s = split_axis(shape, axis);
  Vec<T> out(shape_numel(shape));
  std::vector<Eigen::Index> widths;
  widths.reserve(parts.size());
  Eigen::Index offset = 0;
  for (const auto& p : parts) {
    const Eigen::Index w = static_cast<Eigen::Index>(p.shape()[axis]) * s.inner;
    for (Eigen::Index o = 0; o < s.outer; ++o) {
      out.segment(o * s.len * s.inner + offset, w) = p.value().segment(o * w, w);
    }
    widths.push_back(w);
    offset += w;
  }
  return make_op<T>("concat", std::move(shape), std::move(out), parts,
                    [s, widths = std::move(widths)](Node<T>& self) {
                      Eigen::Index offset = 0;
                      for (std::size_t i = 0; i < widths.size(); ++i) {
                        const Eigen::Index w = widths[i];
                        if (self.inputs[i]->requires_grad) {
                          Vec<T>& g = self.inputs[i]->ensure_grad();
                          for (Eigen::Index o = 0; o < s.outer; ++o) {
                            g.segment(o * w, w) += self.grad.segment(o * s.len * s.inner + offset, w);
                          }
                        }
                        offset += w;
                      }
                    });
}

template <typename T>
Tensor<T> slice(const Tensor<T>& a, int axis, int start, int length) {
  axis = normalize_axis(axis, a.rank(), "slice");
  if (start < 0 || length <= 0 || start + length > a.shape()[axis]) {
    throw ShapeError("slice: range [" + std::to_string(start) + ", " + std::to_string(start + length) +
                     ") outside " + shape_string(a.shape()));
  }
  const AxisSplit s = split_axis(a.shape(), axis);
  Shape shape = a.shape();
  shape[axis] = length;
  const Eigen::Index w = static_cast<Eigen::Index>(length) * s.inner;
  const Eigen::Index off = static_cast<Eigen::Index>(start) * s.inner;
  Vec<T> out(s.outer * w);
  for (Eigen::Index o = 0; o < s.outer; ++o) {
    out.segment(o * w, w) = a.value().segment(o * s.len * s.inner + off, w);
  }
  return make_op<T>("slice", std::move(shape), std::move(out), {a}, [s, w, off](Node<T>& self) {
    Vec<T>& g = self.inputs[0]->ensure_grad();
    for (Eigen::Index o = 0; o < s.outer; ++o) {
      g.segment(o * s.len * s.inner + off, w) += self.grad.segment(o * w, w);
    }
  });
}

template <typename T>
Tensor<T> gather_rows(const Tensor<T>& a, std::span<const int> idx) {
  if (idx.empty()) throw ShapeError("gather_rows: empty index list");
  const int rows = a.dim(0);
  const Eigen::Index width = a.size() / rows;
  Shape shape = a.shape();
  shape[0] = static_cast<int>(idx.size());
  Vec<T> out(static_cast<Eigen::Index>(idx.size()) * width);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= rows) throw ShapeError("gather_rows: index out of range");
    out.segment(static_cast<Eigen::Index>(i) * width, width) = a.value().segment(idx[i] * width, width);
  }
  std::vector<int> rows_taken(idx.begin(), idx.end());
  return make_op<T>("gather_rows", std::move(shape), std::move(out), {a},
                    [width, rows_taken = std::move(rows_taken)](Node<T>& self) {
                      Vec<T>& g = self.inputs[0]->ensure_grad();
                      for (std::size_t i = 0; i < rows_taken.size(); ++i) {
                        g.segment(rows_taken[i] * width, width) +=
                            self.grad.segment(static_cast<Eigen::Index>(i) * width, width);
                      }
                    });
}

template <typename T>
Tensor<T> select_rows(std::span<const std::uint8_t> take_a, const Tensor<T>& a, const Tensor<T>& b) {
  require_same(a, b, "select_rows");
  const int rows = a.dim(0);
  if (static_cast<int>(take_a.size()) != rows) throw ShapeError("select_rows: mask length mismatch");
  const Eigen::Index width = a.size() / rows;
  Vec<T> out(a.size());
  for (int r = 0; r < rows; ++r) {
    out.segment(r * width, width) = (take_a[r] ? a : b).value().segment(r * width, width);
  }
  std::vector<std::uint8_t> mask(take_a.begin(), take_a.end());
  return make_op<T>("select_rows", a.shape(), std::move(out), {a, b},
                    [width, mask = std::move(mask)](Node<T>& self) {
                      for (std::size_t r = 0; r < mask.size(); ++r) {
                        const std::size_t which = mask[r] ? 0 : 1;
                        if (!tracks(self, which)) continue;
                        self.inputs[which]->ensure_grad().segment(r * width, width) +=
                            self.grad.segment(r * width, width);
                      }
                    });
}

// ---- image ops ------------------------------------------------------------------

template <typename T>
Sampled<T> bilinear_sample(const Tensor<T>& map, const Tensor<T>& uv) {
  require_rank(map, 3, "bilinear_sample");
  if (uv.rank() != 2 || uv.dim(1) != 2) {
    throw ShapeError("bilinear_sample: uv must be [N x 2], got " + shape_string(uv.shape()));
  }
  const int h = map.dim(0), w = map.dim(1), c = map.dim(2);
  const int n = uv.dim(0);
  Sampled<T> result;
  result.valid.assign(n, 0);
  Vec<T> out = Vec<T>::Zero(static_cast<Eigen::Index>(n) * c);
  const Vec<T>& m = map.value();
  const Vec<T>& coords = uv.value();

  auto in_bounds = [h, w](int x, int y) { return x >= 0 && x < w && y >= 0 && y < h; };
  for (int i = 0; i < n; ++i) {
    const T u = coords[2 * i], v = coords[2 * i + 1];
    if (!std::isfinite(u) || !std::isfinite(v)) continue;
    if (!(u > T(-1) && u < T(w) && v > T(-1) && v < T(h))) continue;
    const int x0 = static_cast<int>(std::floor(u)), y0 = static_cast<int>(std::floor(v));
    const T fx = u - x0, fy = v - y0;
    const int xs[4] = {x0, x0 + 1, x0, x0 + 1};
    const int ys[4] = {y0, y0, y0 + 1, y0 + 1};
    const T ws[4] = {(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy};
    bool any = false;
    for (int k = 0; k < 4; ++k) {
      if (!in_bounds(xs[k], ys[k])) continue;
      any = true;
      out.segment(static_cast<Eigen::Index>(i) * c, c) +=
          ws[k] * m.segment((static_cast<Eigen::Index>(ys[k]) * w + xs[k]) * c, c);
    }
    result.valid[i] = any;
  }
  std::vector<std::uint8_t> valid = result.valid;
  result.values = make_op<T>(
      "bilinear_sample", {n, c}, std::move(out), {map, uv},
      [h, w, c, n, valid = std::move(valid), in_bounds](Node<T>& self) {
        const Vec<T>& m = self.inputs[0]->value;
        const Vec<T>& coords = self.inputs[1]->value;
        Vec<T>* gmap = tracks(self, 0) ? &self.inputs[0]->ensure_grad() : nullptr;
        Vec<T>* guv = tracks(self, 1) ? &self.inputs[1]->ensure_grad() : nullptr;
        for (int i = 0; i < n; ++i) {
          if (!valid[i]) continue;
          const T u = coords[2 * i], v = coords[2 * i + 1];
          const int x0 = static_cast<int>(std::floor(u)), y0 = static_cast<int>(std::floor(v));
          const T fx = u - x0, fy = v - y0;
          const auto g = self.grad.segment(static_cast<Eigen::Index>(i) * c, c);
          const int xs[4] = {x0, x0 + 1, x0, x0 + 1};
          const int ys[4] = {y0, y0, y0 + 1, y0 + 1};
          const T ws[4] = {(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy};
          // d(weight)/du and d(weight)/dv for the four neighbors.
          const T dwu[4] = {-(1 - fy), (1 - fy), -fy, fy};
          const T dwv[4] = {-(1 - fx), -fx, (1 - fx), fx};
          T du = 0, dv = 0;
          for (int k = 0; k < 4; ++k) {
            if (!in_bounds(xs[k], ys[k])) continue;
            const Eigen::Index off = (static_cast<Eigen::Index>(ys[k]) * w + xs[k]) * c;
            if (gmap) gmap->segment(off, c) += ws[k] * g;
            if (guv) {
              const T dot = g.dot(m.segment(off, c));
              du += dwu[k] * dot;
              dv += dwv[k] * dot;
            }
          }
          if (guv) {
            (*guv)[2 * i] += du;
            (*guv)[2 * i + 1] += dv;
          }
        }
      });
  return result;
}

template <typename T>
Sampled<T> bilinear_sample(const Tensor<T>& map, T u, T v) {
  Vec<T> uv(2);
  uv << u, v;
  return bilinear_sample(map, Tensor<T>::constant({1, 2}, std::move(uv)));
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, int kernel,
                 int stride, int pad) {
  require_rank(x, 3, "conv2d");
  require_rank(weight, 2, "conv2d");
  const int h = x.dim(0), w = x.dim(1), cin = x.dim(2);
  const int patch = kernel * kernel * cin;
  if (weight.dim(0) != patch) {
    throw ShapeError("conv2d: weight " + shape_string(weight.shape()) + " does not fit input " +
                     shape_string(x.shape()) + " with kernel " + std::to_string(kernel));
  }
  const int cout = weight.dim(1);
  if (bias.size() != cout) throw ShapeError("conv2d: bias size mismatch");
  const int ho = (h + 2 * pad - kernel) / stride + 1;
  const int wo = (w + 2 * pad - kernel) / stride + 1;
  if (ho <= 0 || wo <= 0) throw ShapeError("conv2d: input too small for kernel");

  auto cols = std::make_shared<RowMatrix<T>>(RowMatrix<T>::Zero(static_cast<Eigen::Index>(ho) * wo, patch));
  const Vec<T>& in = x.value();
  for (int oy = 0; oy < ho; ++oy) {
    for (int ox = 0; ox < wo; ++ox) {
      const Eigen::Index row = static_cast<Eigen::Index>(oy) * wo + ox;
      for (int ky = 0; ky < kernel; ++ky) {
        const int iy = oy * stride - pad + ky;
        if (iy < 0 || iy >= h) continue;
        for (int kx = 0; kx < kernel; ++kx) {
          const int ix = ox * stride - pad + kx;
          if (ix < 0 || ix >= w) continue;
          cols->row(row).segment((ky * kernel + kx) * cin, cin) =
              in.segment((static_cast<Eigen::Index>(iy) * w + ix) * cin, cin).transpose();
        }
      }
    }
  }
  Vec<T> out(static_cast<Eigen::Index>(ho) * wo * cout);
  auto om = as_matrix<T>(out, static_cast<Eigen::Index>(ho) * wo, cout);
  om.noalias() = *cols * weight.matrix();
  om.rowwise() += bias.value().transpose();
  return make_op<T>(
      "conv2d", {ho, wo, cout}, std::move(out), {x, weight, bias},
      [=](Node<T>& self) {
        const auto g = as_matrix<T>(std::as_const(self.grad), static_cast<Eigen::Index>(ho) * wo, cout);
        if (tracks(self, 1)) {
          as_matrix<T>(self.inputs[1]->ensure_grad(), patch, cout).noalias() += cols->transpose() * g;
        }
        if (tracks(self, 2)) self.inputs[2]->ensure_grad() += g.colwise().sum().transpose();
        if (tracks(self, 0)) {
          const auto wm = as_matrix<T>(std::as_const(self.inputs[1]->value), patch, cout);
          const RowMatrix<T> dcols = g * wm.transpose();
          Vec<T>& gx = self.inputs[0]->ensure_grad();
          for (int oy = 0; oy < ho; ++oy) {
            for (int ox = 0; ox < wo; ++ox) {
              const Eigen::Index row = static_cast<Eigen::Index>(oy) * wo + ox;
              for (int ky = 0; ky < kernel; ++ky) {
                const int iy = oy * stride - pad + ky;
                if (iy < 0 || iy >= h) continue;
                for (int kx = 0; kx < kernel; ++kx) {
                  const int ix = ox * stride - pad + kx;
                  if (ix < 0 || ix >= w) continue;
                  gx.segment((static_cast<Eigen::Index>(iy) * w + ix) * cin, cin) +=
                      dcols.row(row).segment((ky * kernel + kx) * cin, cin).transpose();
                }
              }
            }
          }
        }
      });
}

template <typename T>
Tensor<T> mul_pixels(const Tensor<T>& x, const Tensor<T>& w) {
  require_rank(x, 3, "mul_pixels");
  const Eigen::Index pixels = static_cast<Eigen::Index>(x.dim(0)) * x.dim(1);
  if (w.size() != pixels) {
    throw ShapeError("mul_pixels: weight " + shape_string(w.shape()) + " does not match " +
                     shape_string(x.shape()));
  }
  const int c = x.dim(2);
  Vec<T> out = x.value();
  as_matrix<T>(out, pixels, c).array().colwise() *= w.value().array();
  return make_op<T>("mul_pixels", x.shape(), std::move(out), {x, w}, [pixels, c](Node<T>& self) {
    const auto g = as_matrix<T>(std::as_const(self.grad), pixels, c);
    if (tracks(self, 0)) {
      as_matrix<T>(self.inputs[0]->ensure_grad(), pixels, c).array() +=
          g.array().colwise() * self.inputs[1]->value.array();
    }
    if (tracks(self, 1)) {
      const auto xv = as_matrix<T>(std::as_const(self.inputs[0]->value), pixels, c);
      self.inputs[1]->ensure_grad() += g.cwiseProduct(xv).rowwise().sum();
    }
  });
}

template <typename T>
Tensor<T> weighted_sum(const Tensor<T>& w, const Tensor<T>& x) {
  require_rank(w, 2, "weighted_sum");
  require_rank(x, 3, "weighted_sum");
  const int n = w.dim(0), s = w.dim(1), f = x.dim(2);
  if (x.dim(0) != n || x.dim(1) != s) {
    throw ShapeError("weighted_sum: " + shape_string(w.shape()) + " vs " + shape_string(x.shape()));
  }
  Vec<T> out(static_cast<Eigen::Index>(n) * f);
  for (int i = 0; i < n; ++i) {
    const auto xi = as_matrix<T>(x.value(), static_cast<Eigen::Index>(n) * s, f).middleRows(i * s, s);
    out.segment(static_cast<Eigen::Index>(i) * f, f).noalias() =
        xi.transpose() * w.value().segment(static_cast<Eigen::Index>(i) * s, s);
  }
  return make_op<T>("weighted_sum", {n, f}, std::move(out), {w, x}, [n, s, f](Node<T>& self) {
    const auto xm = as_matrix<T>(std::as_const(self.inputs[1]->value), static_cast<Eigen::Index>(n) * s, f);
    const Vec<T>& wv = self.inputs[0]->value;
    for (int i = 0; i < n; ++i) {
      const auto g = self.grad.segment(static_cast<Eigen::Index>(i) * f, f);
      if (tracks(self, 0)) {
        self.inputs[0]->ensure_grad().segment(static_cast<Eigen::Index>(i) * s, s).noalias() +=
            xm.middleRows(i * s, s) * g;
      }
      if (tracks(self, 1)) {
        as_matrix<T>(self.inputs[1]->ensure_grad(), static_cast<Eigen::Index>(n) * s, f)
            .middleRows(i * s, s)
            .noalias() += wv.segment(static_cast<Eigen::Index>(i) * s, s) * g.transpose();
      }
    }
  });
}

// ---- encodings and losses ---------------------------------------------------------

template <typename T>
Tensor<T> sinusoidal_encode(const Tensor<T>& x, int num_freqs, T scale) {
  require_rank(x, 2, "sinusoidal_encode");
  const int n = x.dim(0), k = x.dim(1);
  const int width = k * 2 * num_freqs;
  Vec<T> out(static_cast<Eigen::Index>(n) * width);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < k; ++j) {
      for (int f = 0; f < num_freqs; ++f) {
        const T freq = scale * static_cast<T>(1 << f);
        const T a = freq * x.value()[static_cast<Eigen::Index>(i) * k + j];
        const Eigen::Index o = static_cast<Eigen::Index>(i) * width + (j * num_freqs + f) * 2;
        out[o] = std::sin(a);
        out[o + 1] = std::cos(a);
      }
    }
  }
  return make_op<T>("sinusoidal_encode", {n, width}, std::move(out), {x}, [=](Node<T>& self) {
    Vec<T>& g = self.inputs[0]->ensure_grad();
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < k; ++j) {
        T acc = 0;
        for (int f = 0; f < num_freqs; ++f) {
          const T freq = scale * static_cast<T>(1 << f);
          const Eigen::Index o = static_cast<Eigen::Index>(i) * width + (j * num_freqs + f) * 2;
          // d sin = freq cos, d cos = -freq sin
          acc += freq * (self.grad[o] * self.value[o + 1] - self.grad[o + 1] * self.value[o]);
        }
        g[static_cast<Eigen::Index>(i) * k + j] += acc;
      }
    }
  });
}

template <typename T>
Tensor<T> sigmoid_focal_loss(const Tensor<T>& logits, const RowMatrix<T>& targets, T alpha, T gamma) {
  require_rank(logits, 2, "sigmoid_focal_loss");
  if (targets.rows() != logits.dim(0) || targets.cols() != logits.dim(1)) {
    throw ShapeError("sigmoid_focal_loss: targets do not match " + shape_string(logits.shape()));
  }
  const Eigen::Index total = logits.size();
  Vec<T> t = Eigen::Map<const Vec<T>>(targets.data(), total);
  T loss = 0;
  for (Eigen::Index i = 0; i < total; ++i) {
    const T z = logits.value()[i];
    const T p = stable_sigmoid(z);
    if (t[i] > T(0.5)) {
      loss += -alpha * std::pow(T(1) - p, gamma) * -stable_softplus(-z);
    } else {
      loss += -(T(1) - alpha) * std::pow(p, gamma) * -stable_softplus(z);
    }
  }
  return make_op<T>("sigmoid_focal_loss", {1}, Vec<T>::Constant(1, loss), {logits},
                    [t = std::move(t), alpha, gamma](Node<T>& self) {
                      Vec<T>& g = self.inputs[0]->ensure_grad();
                      const T up = self.grad[0];
                      for (Eigen::Index i = 0; i < t.size(); ++i) {
                        const T z = self.inputs[0]->value[i];
                        const T p = stable_sigmoid(z);
                        T d;
                        if (t[i] > T(0.5)) {
                          const T log_p = -stable_softplus(-z);
                          d = alpha * std::pow(T(1) - p, gamma) * (gamma * p * log_p - (T(1) - p));
                        } else {
                          const T log_q = -stable_softplus(z);
                          d = (T(1) - alpha) * std::pow(p, gamma) * (p - gamma * (T(1) - p) * log_q);
                        }
                        g[i] += up * d;
                      }
                    });
}

// ---- instantiations ---------------------------------------------------------------

#define PRIOR3D_INSTANTIATE(T)                                                                  \
  template class Tensor<T>;                                                                     \
  template class Tape<T>;                                                                       \
  template Tensor<T> make_op<T>(const char*, Shape, Vec<T>, std::vector<Tensor<T>>,             \
                                std::function<void(Node<T>&)>);                                 \
  template void backward<T>(const Tensor<T>&);                                                  \
  template Tensor<T> matmul<T>(const Tensor<T>&, const Tensor<T>&);                             \
  template Tensor<T> transpose<T>(const Tensor<T>&);                                            \
  template Tensor<T> add<T>(const Tensor<T>&, const Tensor<T>&);                                \
  template Tensor<T> sub<T>(const Tensor<T>&, const Tensor<T>&);                                \
  template Tensor<T> mul<T>(const Tensor<T>&, const Tensor<T>&);                                \
  template Tensor<T> scale<T>(const Tensor<T>&, T);                                             \
  template Tensor<T> add_scalar<T>(const Tensor<T>&, T);                                        \
  template Tensor<T> add_bias<T>(const Tensor<T>&, const Tensor<T>&);                           \
  template Tensor<T> mul_bias<T>(const Tensor<T>&, const Tensor<T>&);                           \
  template Tensor<T> mul_rows<T>(const Tensor<T>&, const Tensor<T>&);                           \
  template Tensor<T> relu<T>(const Tensor<T>&);                                                 \
  template Tensor<T> sigmoid<T>(const Tensor<T>&);                                              \
  template Tensor<T> softplus<T>(const Tensor<T>&);                                             \
  template Tensor<T> tanh<T>(const Tensor<T>&);                                                 \
  template Tensor<T> abs<T>(const Tensor<T>&);                                                  \
  template Tensor<T> sum<T>(const Tensor<T>&);                                                  \
  template Tensor<T> mean<T>(const Tensor<T>&);                                                 \
  template Tensor<T> softmax<T>(const Tensor<T>&, int);                                         \
  template Tensor<T> masked_softmax<T>(const Tensor<T>&, std::span<const std::uint8_t>);        \
  template Tensor<T> layer_norm<T>(const Tensor<T>&, T);                                        \
  template Tensor<T> global_avg_pool<T>(const Tensor<T>&);                                      \
  template Tensor<T> avg_pool2d<T>(const Tensor<T>&, int);                                      \
  template Tensor<T> reshape<T>(const Tensor<T>&, Shape);                                       \
  template Tensor<T> concat<T>(const std::vector<Tensor<T>>&, int);                             \
  template Tensor<T> slice<T>(const Tensor<T>&, int, int, int);                                 \
  template Tensor<T> gather_rows<T>(const Tensor<T>&, std::span<const int>);                    \
  template Tensor<T> select_rows<T>(std::span<const std::uint8_t>, const Tensor<T>&,            \
                                    const Tensor<T>&);                                          \
  template Sampled<T> bilinear_sample<T>(const Tensor<T>&, const Tensor<T>&);                   \
  template Sampled<T> bilinear_sample<T>(const Tensor<T>&, T, T);                               \
  template Tensor<T> conv2d<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, int, int,  \
                               int);                                                            \
  template Tensor<T> mul_pixels<T>(const Tensor<T>&, const Tensor<T>&);                         \
  template Tensor<T> weighted_sum<T>(const Tensor<T>&, const Tensor<T>&);                       \
  template Tensor<T> sinusoidal_encode<T>(const Tensor<T>&, int, T);                            \
  template Tensor<T> sigmoid_focal_loss<T>(const Tensor<T>&, const RowMatrix<T>&, T, T);

PRIOR3D_INSTANTIATE(float)
PRIOR3D_INSTANTIATE(double)

#undef PRIOR3D_INSTANTIATE

}  // namespace prior3d
