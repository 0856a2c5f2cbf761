#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include "dartsplus/tensor.hpp"

namespace dartsplus {

namespace detail {

inline void require_finite_grads(const std::vector<Tensor>& params, const char* who) {
  for (const auto& p : params)
    for (double v : p.grad())
      if (!std::isfinite(v)) throw NonFiniteError(std::string(who) + ": non-finite gradient");
}

}  // namespace detail

struct SgdOptions {
  double lr = 0.025;
  double momentum = 0.9;
  double weight_decay = 3e-4;
};

// v <- momentum * v + (grad + wd * param);  param <- param - lr * v
class SgdMomentum {
 public:
  SgdMomentum(std::vector<Tensor> params, SgdOptions opt = {})
      : params_(std::move(params)), opt_(opt) {
    for (const auto& p : params_) velocity_.emplace_back(p.numel(), 0.0);
  }

  void step() {
    detail::require_finite_grads(params_, "sgd_step");
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto p = params_[k].data();
      auto g = params_[k].grad();
      auto& v = velocity_[k];
      for (std::size_t i = 0; i < p.size(); ++i) {
        v[i] = opt_.momentum * v[i] + (g[i] + opt_.weight_decay * p[i]);
        p[i] -= opt_.lr * v[i];
      }
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  void set_lr(double lr) { opt_.lr = lr; }
  const SgdOptions& options() const { return opt_; }
  std::vector<std::vector<double>>& velocity() { return velocity_; }
  const std::vector<Tensor>& params() const { return params_; }

 private:
  std::vector<Tensor> params_;
  SgdOptions opt_;
  std::vector<std::vector<double>> velocity_;
};

struct AdamOptions {
  double lr = 3e-4;
  double beta1 = 0.5;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-3;  // added to the gradient (L2 style)
};

class Adam {
 public:
  Adam(std::vector<Tensor> params, AdamOptions opt = {}) : params_(std::move(params)), opt_(opt) {
    for (const auto& p : params_) {
      first_.emplace_back(p.numel(), 0.0);
      second_.emplace_back(p.numel(), 0.0);
    }
  }

  void step() {
    detail::require_finite_grads(params_, "adam_step");
    ++steps_;
    const double t = static_cast<double>(steps_);
    const double c1 = 1.0 - std::pow(opt_.beta1, t);
    const double c2 = 1.0 - std::pow(opt_.beta2, t);
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto p = params_[k].data();
      auto g = params_[k].grad();
      auto& m = first_[k];
      auto& v = second_[k];
      for (std::size_t i = 0; i < p.size(); ++i) {
        const double gi = g[i] + opt_.weight_decay * p[i];
        m[i] = opt_.beta1 * m[i] + (1.0 - opt_.beta1) * gi;
        v[i] = opt_.beta2 * v[i] + (1.0 - opt_.beta2) * gi * gi;
        const double mhat = m[i] / c1;
        const double vhat = v[i] / c2;
        p[i] -= opt_.lr * mhat / (std::sqrt(vhat) + opt_.eps);
      }
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  void set_lr(double lr) { opt_.lr = lr; }
  std::uint64_t steps() const { return steps_; }
  const AdamOptions& options() const { return opt_; }

 private:
  std::vector<Tensor> params_;
  AdamOptions opt_;
  std::vector<std::vector<double>> first_, second_;
  std::uint64_t steps_ = 0;
};

// Cosine annealing from base_lr at epoch 0 to min_lr at epoch total.
inline double cosine_lr(double base_lr, double min_lr, std::size_t epoch, std::size_t total) {
  if (total == 0) throw std::invalid_argument("cosine_lr: total epochs must be positive");
  const double frac = static_cast<double>(std::min(epoch, total)) / static_cast<double>(total);
  return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + std::cos(std::numbers::pi * frac));
}

}  // namespace dartsplus
