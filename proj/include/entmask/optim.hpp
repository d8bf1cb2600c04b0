#pragma once

#include <cmath>
#include <cstdint>
#include <utility>
#include <vector>

#include "entmask/errors.hpp"
#include "entmask/tensor.hpp"

namespace entmask {

struct AdamSettings {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  long total_decay_steps = 0;  // > 0 enables linear decay to zero over that many steps
};

class AdamOptimizer {
 public:
  AdamOptimizer(std::vector<Tensor> params, AdamSettings settings)
      : params_(std::move(params)), settings_(settings) {
    if (settings_.learning_rate <= 0.0) {
      throw ConfigError("optimizer: learning_rate must be positive");
    }
    if (settings_.beta1 < 0.0 || settings_.beta1 >= 1.0 || settings_.beta2 < 0.0 ||
        settings_.beta2 >= 1.0) {
      throw ConfigError("optimizer: betas must lie in [0, 1)");
    }
    m_.resize(params_.size());
    v_.resize(params_.size());
    for (size_t i = 0; i < params_.size(); ++i) {
      m_[i].assign(params_[i].numel(), 0.0);
      v_[i].assign(params_[i].numel(), 0.0);
    }
  }

  void step() {
    ++t_;
    double lr = settings_.learning_rate;
    if (settings_.total_decay_steps > 0) {
      const double left =
          1.0 - static_cast<double>(t_ - 1) / static_cast<double>(settings_.total_decay_steps);
      lr *= left > 0.0 ? left : 0.0;
    }
    const double c1 = 1.0 - std::pow(settings_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(settings_.beta2, static_cast<double>(t_));
    for (size_t i = 0; i < params_.size(); ++i) {
      Tensor& p = params_[i];
      if (!p.requires_grad()) continue;
      if (!p.has_grad()) {
        throw ContractError("optimizer: trainable parameter is missing its gradient");
      }
      float* x = p.data();
      const std::vector<float>& g = p.grad();
      std::vector<double>& m = m_[i];
      std::vector<double>& v = v_[i];
      for (size_t j = 0; j < m.size(); ++j) {
        const double gj = g[j];
        m[j] = settings_.beta1 * m[j] + (1.0 - settings_.beta1) * gj;
        v[j] = settings_.beta2 * v[j] + (1.0 - settings_.beta2) * gj * gj;
        x[j] -= static_cast<float>(lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + settings_.epsilon));
      }
      p.drop_grad();
    }
  }

  void zero_grad() {
    for (Tensor& p : params_) p.drop_grad();
  }

  long step_count() const { return t_; }

 private:
  std::vector<Tensor> params_;
  AdamSettings settings_;
  std::vector<std::vector<double>> m_, v_;
  long t_ = 0;
};

}  // namespace entmask
