#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "tspf/tensor.hpp"

namespace tspf {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adam over a fixed parameter list. Frozen parameters (requires_grad off)
// are skipped entirely: no moment update, no step, values bitwise intact.
// An unfrozen parameter with no populated gradient after backward() is a
// caller bug and is reported as one.
class Adam {
 public:
  Adam(std::vector<ad::Var> params, AdamConfig cfg = {})
      : params_(std::move(params)), cfg_(cfg) {
    m_.resize(params_.size());
    v_.resize(params_.size());
    for (std::size_t p = 0; p < params_.size(); ++p) {
      m_[p].assign(params_[p].numel(), 0.0);
      v_[p].assign(params_[p].numel(), 0.0);
    }
  }

  std::size_t step_count() const { return t_; }
  const AdamConfig& config() const { return cfg_; }
  const std::vector<ad::Var>& params() const { return params_; }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  void step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t p = 0; p < params_.size(); ++p) {
      auto& var = params_[p];
      if (!var.requires_grad()) continue;
      if (!var.grad_populated())
        throw std::logic_error("Adam::step: parameter " + std::to_string(p) +
                               " requires grad but has no gradient; run backward() first");
      const auto& g = var.grad();
      auto& vals = var.mutable_value().values;
      auto& m = m_[p];
      auto& v = v_[p];
      for (std::size_t i = 0; i < vals.size(); ++i) {
        m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
        v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
        const double mhat = m[i] / bc1;
        const double vhat = v[i] / bc2;
        vals[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
      }
    }
  }

 private:
  std::vector<ad::Var> params_;
  AdamConfig cfg_;
  std::size_t t_ = 0;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
};

}  // namespace tspf
