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

#include <doctest.h>

#include <cmath>
#include <random>

#include "op_gradchecks.hpp"
#include "prior3d/tensor.hpp"

using namespace prior3d;
using namespace prior3d::testing;

namespace {

constexpr double kOpTol = 1e-4;

TensorD c2(int r, int c, std::initializer_list<double> v) {
  Vec<double> x(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double e : v) x[i++] = e;
  return TensorD::constant({r, c}, x);
}

}  // namespace

TEST_CASE("matmul values and shape errors") {
  const auto id = c2(2, 2, {1, 0, 0, 1});
  const auto m = c2(2, 2, {1, 2, 3, 4});
  CHECK(matmul(id, m).value() == m.value());
  CHECK(matmul(c2(1, 2, {1, 2}), c2(2, 1, {3, 4})).item() == 11.0);
  CHECK_THROWS_AS(matmul(c2(1, 2, {1, 2}), c2(1, 2, {3, 4})), ShapeError);
}

TEST_CASE("backward basics") {
  auto x = TensorD::parameter({3}, Vec<double>::Ones(3));
  backward(sum(x));
  CHECK(x.grad() == Vec<double>::Ones(3));

  auto y = TensorD::parameter({2}, (Vec<double>(2) << 1, 2).finished());
  backward(sum(mul(y, y)));
  CHECK(y.grad()[0] == doctest::Approx(2));
  CHECK(y.grad()[1] == doctest::Approx(4));

  // Accumulates until reset.
  backward(sum(mul(y, y)));
  CHECK(y.grad()[1] == doctest::Approx(8));
  y.zero_grad();
  CHECK(y.grad()[1] == 0);

  CHECK_THROWS_AS(backward(mul(y, y)), ShapeError);
}

TEST_CASE("shared subexpressions are visited once") {
  auto x = TensorD::parameter({2}, (Vec<double>(2) << 3, -1).finished());
  const auto s = add(x, x);
  const auto loss = sum(mul(s, s));  // 4 x^2
  const auto tape = Tape<double>::record(loss);
  CHECK(tape.order().back() == loss.node().get());
  backward(loss);
  CHECK(x.grad()[0] == doctest::Approx(24));
  CHECK(x.grad()[1] == doctest::Approx(-8));
}

TEST_CASE("no-grad guard records no history") {
  auto x = TensorD::parameter({2}, Vec<double>::Ones(2));
  {
    NoGradGuard guard;
    const auto y = mul(x, x);
    CHECK_FALSE(y.requires_grad());
    CHECK(y.node()->inputs.empty());
  }
  CHECK(mul(x, x).requires_grad());
}

TEST_CASE("softmax stability and normalization") {
  const auto u = softmax(c2(1, 3, {0, 0, 0}), 1);
  for (int i = 0; i < 3; ++i) CHECK(u[i] == doctest::Approx(1.0 / 3));
  const auto big = softmax(c2(1, 2, {1000, 0}), 1);
  CHECK(std::isfinite(big[0]));
  CHECK(big[0] == doctest::Approx(1.0));
  CHECK(big[1] == doctest::Approx(0.0));

  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const auto x = random_param(rng, {4, 5, 3}, -30, 30);
    for (int axis = 0; axis < 3; ++axis) {
      const auto s = softmax(x, axis);
      const int len = x.dim(axis);
      const int inner = axis == 2 ? 1 : (axis == 1 ? 3 : 15);
      const int outer = static_cast<int>(x.size()) / (len * inner);
      for (int o = 0; o < outer; ++o) {
        for (int in = 0; in < inner; ++in) {
          double total = 0;
          for (int k = 0; k < len; ++k) total += s[(static_cast<Eigen::Index>(o) * len + k) * inner + in];
          CHECK(std::abs(total - 1.0) < 1e-9);
        }
      }
    }
  }
}

TEST_CASE("masked softmax") {
  const auto x = c2(2, 3, {1, 2, 3, 4, 5, 6});
  const std::vector<std::uint8_t> mask = {1, 0, 1, 0, 0, 0};
  const auto s = masked_softmax(x, std::span<const std::uint8_t>(mask));
  CHECK(s[1] == 0);
  CHECK(s[0] + s[2] == doctest::Approx(1));
  CHECK(s[0] == doctest::Approx(1 / (1 + std::exp(2.0))));
  for (int k = 3; k < 6; ++k) CHECK(s[k] == 0);
}

TEST_CASE("primitive values") {
  CHECK(relu(c2(1, 2, {-1, 2})).value() == c2(1, 2, {0, 2}).value());
  const auto ln = layer_norm(c2(1, 4, {3, 3, 3, 3}));
  for (int i = 0; i < 4; ++i) CHECK(ln[i] == 0);

  Vec<double> constant = Vec<double>::Constant(4 * 3 * 2, 1.5);
  const auto pooled = global_avg_pool(TensorD::constant({4, 3, 2}, constant));
  CHECK(pooled.shape() == Shape{2});
  CHECK(pooled[0] == doctest::Approx(1.5));
  CHECK(pooled[1] == doctest::Approx(1.5));

  CHECK_THROWS_AS(concat<double>({c2(1, 2, {1, 2}), c2(1, 3, {1, 2, 3})}, 0), ShapeError);
  const auto cat = concat<double>({c2(1, 2, {1, 2}), c2(1, 3, {3, 4, 5})}, 1);
  CHECK(cat.shape() == Shape{1, 5});
  CHECK(cat[4] == 5);
}

TEST_CASE("layer norm output is standardized") {
  std::mt19937_64 rng(5);
  const auto x = random_param(rng, {6, 16}, -5, 5);
  const auto y = layer_norm(x);
  for (int r = 0; r < 6; ++r) {
    double m = 0, v = 0;
    for (int c = 0; c < 16; ++c) m += y.at(r, c);
    m /= 16;
    for (int c = 0; c < 16; ++c) v += (y.at(r, c) - m) * (y.at(r, c) - m);
    v /= 16;
    CHECK(std::abs(m) < 1e-12);
    CHECK(v == doctest::Approx(1.0).epsilon(1e-4));
  }
}

TEST_CASE("bilinear sample values") {
  const auto map = TensorD::constant({2, 2, 1}, (Vec<double>(4) << 1, 2, 3, 4).finished());
  auto at = [&](double u, double v) { return bilinear_sample(map, u, v); };
  CHECK(at(0, 0).values.item() == 1.0);
  CHECK(at(0, 0).valid[0]);
  CHECK(at(0.5, 0.5).values.item() == doctest::Approx(2.5));
  const auto far = at(-10, -10);
  CHECK(far.values.item() == 0.0);
  CHECK_FALSE(far.valid[0]);
  // Exact at every grid point.
  std::mt19937_64 rng(9);
  const auto big = random_param(rng, {5, 7, 3});
  for (int y = 0; y < 5; ++y) {
    for (int x = 0; x < 7; ++x) {
      const auto s = bilinear_sample(big, double(x), double(y));
      for (int c = 0; c < 3; ++c) CHECK(s.values[c] == big.value()[(y * 7 + x) * 3 + c]);
    }
  }
}

TEST_CASE("conv2d matches a direct convolution") {
  std::mt19937_64 rng(11);
  for (auto [k, stride, pad] : {std::tuple{3, 1, 1}, std::tuple{3, 2, 1}, std::tuple{1, 1, 0}, std::tuple{3, 2, 0}}) {
    const int h = 7, w = 6, cin = 2, cout = 3;
    const auto x = random_param(rng, {h, w, cin});
    const auto wt = random_param(rng, {k * k * cin, cout});
    const auto b = random_param(rng, {cout});
    const auto y = conv2d(x, wt, b, k, stride, pad);
    const int ho = (h + 2 * pad - k) / stride + 1, wo = (w + 2 * pad - k) / stride + 1;
    REQUIRE(y.shape() == Shape{ho, wo, cout});
    for (int oy = 0; oy < ho; ++oy) {
      for (int ox = 0; ox < wo; ++ox) {
        for (int co = 0; co < cout; ++co) {
          double acc = b[co];
          for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
              const int iy = oy * stride + ky - pad, ix = ox * stride + kx - pad;
              if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
              for (int ci = 0; ci < cin; ++ci) {
                acc += x.value()[(iy * w + ix) * cin + ci] * wt.value()[((ky * k + kx) * cin + ci) * cout + co];
              }
            }
          }
          CHECK(y.value()[(oy * wo + ox) * cout + co] == doctest::Approx(acc).epsilon(1e-12));
        }
      }
    }
  }
}

TEST_CASE("forward and backward are bit-reproducible") {
  auto run = []() {
    std::mt19937_64 rng(21);
    auto x = random_param(rng, {4, 6});
    auto w = random_param(rng, {6, 3});
    const auto loss = sum(softmax(matmul(layer_norm(x), w), 1));
    backward(loss);
    return std::pair{loss.item(), Vec<double>(w.grad())};
  };
  const auto a = run(), b = run();
  CHECK(a.first == b.first);
  CHECK(a.second == b.second);
}

TEST_CASE("gradient checks of single ops") {
  for (const auto& op : op_grad_checks()) {
    INFO(op.name << ": " << op.result.worst);
    CHECK(op.result.checked > 0);
    CHECK(op.result.max_rel_err < kOpTol);
  }
}

TEST_CASE("focal loss matches its definition") {
  RowMatrix<double> targets(1, 2);
  targets << 1, 0;
  const auto logits = c2(1, 2, {0.3, -1.2});
  const double p0 = 1 / (1 + std::exp(-0.3)), p1 = 1 / (1 + std::exp(1.2));
  const double expect = -0.25 * std::pow(1 - p0, 2) * std::log(p0) - 0.75 * std::pow(p1, 2) * std::log(1 - p1);
  CHECK(sigmoid_focal_loss(logits, targets, 0.25, 2.0).item() == doctest::Approx(expect).epsilon(1e-12));
}
