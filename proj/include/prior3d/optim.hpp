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

#pragma once

#include <cstdint>
#include <vector>

#include "prior3d/tensor.hpp"

namespace prior3d {

inline constexpr double kBaseLearningRate = 2e-4;
inline constexpr double kWeightDecay = 1e-5;

// base_lr * 0.5 * (1 + cos(pi * step / total_steps)), floored at 0.
// Throws std::invalid_argument when total_steps == 0.
double cosine_lr(std::int64_t step, std::int64_t total_steps, double base_lr = kBaseLearningRate);

struct AdamWConfig {
  double base_lr = kBaseLearningRate;
  double weight_decay = kWeightDecay;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::int64_t total_steps = 1;
};

enum class StepStatus { kApplied, kNonFiniteGradient };

// AdamW with decoupled weight decay and bias correction; the learning rate of
// each update follows cosine_lr at the current step.
template <typename T>
class AdamW {
 public:
  AdamW(std::vector<Tensor<T>> params, AdamWConfig config);

  // Applies one update from the parameters' accumulated gradients. A
  // non-finite gradient anywhere aborts the whole step, leaving parameters,
  // moments and the step counter untouched.
  StepStatus step();
  void zero_grad();

  std::int64_t step_count() const { return step_; }
  double current_lr() const;
  const AdamWConfig& config() const { return config_; }
  const Vec<T>& first_moment(std::size_t i) const { return m_[i]; }
  const Vec<T>& second_moment(std::size_t i) const { return v_[i]; }

 private:
  std::vector<Tensor<T>> params_;
  AdamWConfig config_;
  std::vector<Vec<T>> m_, v_;
  std::int64_t step_ = 0;
};

}  // namespace prior3d
