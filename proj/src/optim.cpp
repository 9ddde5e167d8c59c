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

#include "prior3d/optim.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace prior3d {

double cosine_lr(std::int64_t step, std::int64_t total_steps, double base_lr) {
  if (total_steps <= 0) throw std::invalid_argument("cosine_lr: total_steps must be positive");
  const double t = static_cast<double>(std::clamp<std::int64_t>(step, 0, total_steps));
  const double lr = base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * t / static_cast<double>(total_steps)));
  return std::max(lr, 0.0);
}

template <typename T>
AdamW<T>::AdamW(std::vector<Tensor<T>> params, AdamWConfig config)
    : params_(std::move(params)), config_(config) {
  if (config_.total_steps <= 0) throw std::invalid_argument("AdamW: total_steps must be positive");
  for (const auto& p : params_) {
    m_.push_back(Vec<T>::Zero(p.size()));
    v_.push_back(Vec<T>::Zero(p.size()));
  }
}

template <typename T>
double AdamW<T>::current_lr() const {
  return cosine_lr(step_, config_.total_steps, config_.base_lr);
}

template <typename T>
StepStatus AdamW<T>::step() {
  for (const auto& p : params_) {
    if (p.has_grad() && !p.grad().allFinite()) return StepStatus::kNonFiniteGradient;
  }
  const double lr = current_lr();
  ++step_;
  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(step_));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(step_));
  const T b1 = static_cast<T>(config_.beta1), b2 = static_cast<T>(config_.beta2);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor<T>& p = params_[i];
    const Vec<T> g = p.has_grad() ? p.grad() : Vec<T>::Zero(p.size());
    m_[i] = b1 * m_[i] + (T(1) - b1) * g;
    v_[i] = b2 * v_[i] + (T(1) - b2) * g.cwiseAbs2();
    const auto m_hat = m_[i].array() / static_cast<T>(bc1);
    const auto v_hat = v_[i].array() / static_cast<T>(bc2);
    Vec<T>& theta = p.mutable_value();
    theta.array() -= static_cast<T>(lr) *
                     (m_hat / (v_hat.sqrt() + static_cast<T>(config_.eps)) +
                      static_cast<T>(config_.weight_decay) * theta.array());
  }
  return StepStatus::kApplied;
}

template <typename T>
void AdamW<T>::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

template class AdamW<float>;
template class AdamW<double>;

}  // namespace prior3d
