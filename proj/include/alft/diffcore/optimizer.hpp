#pragma once

#include <cmath>
#include <stdexcept>

#include "alft/diffcore/params.hpp"

namespace alft::ad {

struct OptimizerConfig {
  double learning_rate = 4e-4;
  double decay = 0.98;         // learning-rate factor applied at every epoch boundary
  double weight_decay = 0.0;   // decoupled weight decay coefficient
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  int epochs = 30;

  void validate() const {
    if (!(learning_rate > 0.0)) throw std::invalid_argument("learning_rate must be > 0");
    if (!(decay > 0.0 && decay <= 1.0)) throw std::invalid_argument("decay must be in (0, 1]");
    if (weight_decay < 0.0) throw std::invalid_argument("weight_decay must be >= 0");
    if (epochs < 0) throw std::invalid_argument("epochs must be >= 0");
  }
};

/// Adam with decoupled weight decay. step() consumes and zeroes the gradients.
class AdamW {
 public:
  explicit AdamW(OptimizerConfig cfg) : cfg_(cfg), lr_(cfg.learning_rate) { cfg_.validate(); }

  void step(ParameterStore& store) {
    for (std::size_t i = 0; i < store.count(); ++i)
      for (double gv : store[i].grad)
        if (!std::isfinite(gv)) throw NumericError("non-finite gradient in parameter " + store[i].name);
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, t_);
    const double bc2 = 1.0 - std::pow(cfg_.beta2, t_);
    for (std::size_t i = 0; i < store.count(); ++i) {
      Parameter& p = store[i];
      for (std::size_t k = 0; k < p.value.size(); ++k) {
        const double gk = p.grad[k];
        p.m[k] = cfg_.beta1 * p.m[k] + (1.0 - cfg_.beta1) * gk;
        p.v[k] = cfg_.beta2 * p.v[k] + (1.0 - cfg_.beta2) * gk * gk;
        const double mhat = p.m[k] / bc1;
        const double vhat = p.v[k] / bc2;
        p.value[k] -= lr_ * (mhat / (std::sqrt(vhat) + cfg_.epsilon) + cfg_.weight_decay * p.value[k]);
        p.grad[k] = 0.0;
      }
    }
  }

  void end_epoch() { lr_ *= cfg_.decay; }

  [[nodiscard]] double learning_rate() const { return lr_; }
  [[nodiscard]] int steps() const { return t_; }
  [[nodiscard]] const OptimizerConfig& config() const { return cfg_; }

 private:
  OptimizerConfig cfg_;
  double lr_;
  int t_ = 0;
};

}  // namespace alft::ad
