#pragma once

#include <cmath>
#include <vector>

#include "aphq/tensor.hpp"

namespace aphq {

/// Adam over float parameter tensors with 64-bit moment accumulators.
/// Parameters are registered once (each with its own learning rate); step()
/// takes gradients aligned with registration order. A null gradient leaves
/// that parameter untouched for the step.
class Adam {
 public:
  explicit Adam(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : beta1_(beta1), beta2_(beta2), eps_(eps) {}

  int add_param(Tensor* p, double lr) {
    check(p != nullptr, "Adam: null parameter");
    check(lr > 0, "Adam: learning rate must be positive");
    slots_.push_back({p, lr, TensorD::zeros(p->shape), TensorD::zeros(p->shape)});
    return static_cast<int>(slots_.size()) - 1;
  }

  size_t num_params() const { return slots_.size(); }

  void step(const std::vector<const TensorD*>& grads) {
    check(grads.size() == slots_.size(), "Adam: gradient count mismatch");
    ++t_;
    double bc1 = 1.0 - std::pow(beta1_, t_);
    double bc2 = 1.0 - std::pow(beta2_, t_);
    for (size_t k = 0; k < slots_.size(); ++k) {
      const TensorD* g = grads[k];
      if (!g) continue;
      Slot& s = slots_[k];
      check(g->shape == s.param->shape, "Adam: gradient shape mismatch");
      for (int64_t i = 0; i < s.param->numel(); ++i) {
        double gi = g->at(i);
        check(std::isfinite(gi), "Adam: non-finite gradient");
        s.m.at(i) = beta1_ * s.m.at(i) + (1.0 - beta1_) * gi;
        s.v.at(i) = beta2_ * s.v.at(i) + (1.0 - beta2_) * gi * gi;
        double mhat = s.m.at(i) / bc1;
        double vhat = s.v.at(i) / bc2;
        s.param->at(i) = static_cast<float>(
            static_cast<double>(s.param->at(i)) -
            s.lr * mhat / (std::sqrt(vhat) + eps_));
      }
    }
  }

 private:
  struct Slot {
    Tensor* param;
    double lr;
    TensorD m, v;
  };
  double beta1_, beta2_, eps_;
  int64_t t_ = 0;
  std::vector<Slot> slots_;
};

}  // namespace aphq
