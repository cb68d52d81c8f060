// Copyright 2026-present the pimi authors
// Licensed under the Apache License, Version 2.0.

#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "pimi/common.hpp"
#include "pimi/tensor.hpp"

namespace pimi {

struct AdamConfig {
  double learning_rate = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Adam with bias-corrected moment estimates over a fixed parameter list.
/// Each step consumes the accumulated gradients and zeroes them afterwards.
class AdamState {
 public:
  AdamState(std::vector<Tensor> params, AdamConfig config)
      : params_(std::move(params)), config_(config) {
    for (const Tensor& p : params_) {
      if (!p.requires_grad())
        throw ContractError("adam: parameter without gradient storage");
      m_.push_back(std::vector<double>(p.size(), 0.0));
      v_.push_back(std::vector<double>(p.size(), 0.0));
    }
  }

  std::size_t step_count() const { return step_; }

  void step() {
    ++step_;
    const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(step_));
    for (std::size_t pi = 0; pi < params_.size(); ++pi) {
      auto& vals = params_[pi].vals();
      auto& grad = params_[pi].grads();
      auto& m = m_[pi];
      auto& v = v_[pi];
      for (std::size_t i = 0; i < vals.size(); ++i) {
        const double g = grad[i];
        m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * g;
        v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * g * g;
        const double mhat = m[i] / bc1;
        const double vhat = v[i] / bc2;
        vals[i] -= config_.learning_rate * mhat / (std::sqrt(vhat) + config_.epsilon);
        grad[i] = 0.0;
      }
    }
  }

 private:
  std::vector<Tensor> params_;
  AdamConfig config_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t step_ = 0;
};

}  // namespace pimi
