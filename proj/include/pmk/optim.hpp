#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <vector>

#include "pmk/autodiff.hpp"

namespace pmk {

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adam with bias correction. Moments are kept per parameter, in the order the
// parameters were handed to the constructor.
template <typename T>
class Adam {
 public:
  Adam(std::vector<Parameter<T>*> params, AdamConfig cfg = {}) : params_(std::move(params)), cfg_(cfg) {
    for (auto* p : params_) {
      m_.emplace_back(p->value.shape());
      v_.emplace_back(p->value.shape());
    }
  }

  void zero_grad() {
    for (auto* p : params_) p->zero_grad();
  }

  void step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    const T b1 = static_cast<T>(cfg_.beta1), b2 = static_cast<T>(cfg_.beta2);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = *params_[i];
      auto& m = m_[i];
      auto& v = v_[i];
      for (std::size_t k = 0; k < p.value.size(); ++k) {
        const T g = p.grad[k];
        m[k] = b1 * m[k] + (T{1} - b1) * g;
        v[k] = b2 * v[k] + (T{1} - b2) * g * g;
        const double mhat = static_cast<double>(m[k]) / bc1;
        const double vhat = static_cast<double>(v[k]) / bc2;
        p.value[k] -= static_cast<T>(cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps));
      }
    }
  }

  [[nodiscard]] double lr() const noexcept { return cfg_.lr; }
  void set_lr(double lr) noexcept { cfg_.lr = lr; }
  [[nodiscard]] std::size_t steps() const noexcept { return t_; }
  [[nodiscard]] const std::vector<Tensor<T>>& first_moments() const noexcept { return m_; }
  [[nodiscard]] const std::vector<Tensor<T>>& second_moments() const noexcept { return v_; }

 private:
  std::vector<Parameter<T>*> params_;
  AdamConfig cfg_;
  std::vector<Tensor<T>> m_, v_;
  std::size_t t_ = 0;
};

// Multiplies the learning rate by `decay` once the tracked metric (higher is
// better) has failed to improve for more than `patience` consecutive epochs.
class PlateauScheduler {
 public:
  PlateauScheduler(int patience = 3, double decay = 0.5, double min_delta = 0.0)
      : patience_(patience), decay_(decay), min_delta_(min_delta) {}

  // Returns the learning rate to use from now on.
  double step(double metric, double lr) {
    if (metric > best_ + min_delta_) {
      best_ = metric;
      bad_epochs_ = 0;
      return lr;
    }
    if (++bad_epochs_ > patience_) {
      bad_epochs_ = 0;
      ++num_decays_;
      return lr * decay_;
    }
    return lr;
  }

  [[nodiscard]] double best() const noexcept { return best_; }
  [[nodiscard]] int bad_epochs() const noexcept { return bad_epochs_; }
  [[nodiscard]] int num_decays() const noexcept { return num_decays_; }

 private:
  int patience_;
  double decay_;
  double min_delta_;
  double best_ = -std::numeric_limits<double>::infinity();
  int bad_epochs_ = 0;
  int num_decays_ = 0;
};

}  // namespace pmk
