/*
 * Copyright 2026 The midi-tune Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>
#include <string>

#include "midi/tape.hpp"

namespace midi {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

/// Decoupled-weight-decay Adam over named arrays.
template <Scalar T>
class AdamW {
 public:
  explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

  /// One update of every named parameter that has a gradient.
  void step(const std::map<std::string, Array<T>*>& params, const GradMap<T>& grads, double lr) {
    ++step_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, double(step_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, double(step_));
    for (const auto& [name, g] : grads) {
      auto pit = params.find(name);
      if (pit == params.end()) throw ContractError("AdamW: gradient for unknown parameter '" + name + "'");
      Array<T>& p = *pit->second;
      if (p.shape() != g.shape()) throw DimensionError("AdamW: gradient shape mismatch for '" + name + "'");
      auto [it, fresh] = state_.try_emplace(name);
      if (fresh) {
        it->second.m = Array<double>(p.shape());
        it->second.v = Array<double>(p.shape());
      }
      auto& m = it->second.m;
      auto& v = it->second.v;
      for (std::size_t i = 0; i < p.size(); ++i) {
        const double gi = double(g[i]);
        m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * gi;
        v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * gi * gi;
        double pi = double(p[i]);
        pi -= lr * cfg_.weight_decay * pi;
        pi -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + cfg_.eps);
        p[i] = T(pi);
      }
    }
  }

  std::size_t steps() const { return step_; }

  /// Moment scalars held (two per trained parameter scalar).
  std::size_t state_scalars() const {
    std::size_t n = 0;
    for (const auto& [_, s] : state_) n += s.m.size() + s.v.size();
    return n;
  }

  std::size_t tracked_parameters() const { return state_.size(); }

 private:
  struct Slot {
    Array<double> m, v;
  };
  AdamWConfig cfg_;
  std::size_t step_ = 0;
  std::map<std::string, Slot> state_;
};

/// Linear warmup over ceil(warmup_ratio·total) steps, then cosine decay to 0.
/// `step` is the 0-based index of the optimizer update.
inline double warmup_cosine_lr(std::size_t step, std::size_t total, double peak, double warmup_ratio) {
  const auto warmup = std::size_t(std::ceil(warmup_ratio * double(total)));
  if (step < warmup) return peak * double(step) / double(warmup);
  const double span = double(std::max<std::size_t>(1, total - warmup));
  const double progress = std::min(1.0, double(step - warmup) / span);
  return peak * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

}  // namespace midi
