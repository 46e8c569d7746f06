#pragma once

#include <cmath>
#include <unordered_map>
#include <vector>

#include "veloio/autodiff.hpp"

namespace veloio::ad {

// Adam with bias correction; beta = (0.9, 0.999), eps = 1e-8.
class Adam {
 public:
  explicit Adam(double lr) : lr_(lr) {}

  void step(ParamSet& params) {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (auto& p : params) {
      Slot& s = slots_[&p];
      if (s.m.empty()) {
        s.m.assign(p.value.size(), 0.0);
        s.v.assign(p.value.size(), 0.0);
      }
      for (std::size_t i = 0; i < p.value.size(); ++i) {
        const double g = p.grad[i];
        s.m[i] = beta1_ * s.m[i] + (1.0 - beta1_) * g;
        s.v[i] = beta2_ * s.v[i] + (1.0 - beta2_) * g * g;
        const double mhat = s.m[i] / bc1;
        const double vhat = s.v[i] / bc2;
        p.value[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
      }
    }
  }

  double learning_rate() const { return lr_; }

 private:
  struct Slot {
    std::vector<double> m, v;
  };
  double lr_;
  double beta1_ = 0.9;
  double beta2_ = 0.999;
  double eps_ = 1e-8;
  std::int64_t t_ = 0;
  std::unordered_map<Parameter*, Slot> slots_;
};

}  // namespace veloio::ad
