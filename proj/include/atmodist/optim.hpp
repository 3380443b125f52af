#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <vector>

#include "atmodist/error.hpp"
#include "atmodist/nn/layers.hpp"

namespace atmodist {

/// Global l2 norm over all gradients; throws DivergenceError on NaN/Inf.
template <typename S>
double gradient_norm(const std::vector<nn::Param<S>*>& params) {
  double sq = 0.0;
  for (const auto* p : params)
    for (S g : p->grad) sq += static_cast<double>(g) * g;
  if (!std::isfinite(sq)) throw DivergenceError("non-finite gradient");
  return std::sqrt(sq);
}

/// Rescale a gradient vector so that its l2 norm does not exceed max_norm.
/// Returns the norm before clipping.
template <typename S>
double clip_gradient(std::span<S> grads, double max_norm) {
  double sq = 0.0;
  for (S g : grads) sq += static_cast<double>(g) * g;
  if (!std::isfinite(sq)) throw DivergenceError("non-finite gradient");
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const double scale = max_norm / norm;
    for (S& g : grads) g = static_cast<S>(g * scale);
  }
  return norm;
}

/// Same, with the norm taken jointly over every parameter's gradient.
template <typename S>
double clip_gradient(const std::vector<nn::Param<S>*>& params, double max_norm) {
  const double norm = gradient_norm(params);
  if (norm > max_norm) {
    const double scale = max_norm / norm;
    for (auto* p : params)
      for (S& g : p->grad) g = static_cast<S>(g * scale);
  }
  return norm;
}

/// SGD with heavy-ball momentum, v <- beta v + (g + wd w), w <- w - lr v.
/// Weight decay only touches parameters flagged `decay`.
template <typename S>
class SgdMomentum {
 public:
  SgdMomentum(std::vector<nn::Param<S>*> params, double lr, double momentum, double weight_decay)
      : params_(std::move(params)), lr_(lr), momentum_(momentum), wd_(weight_decay) {
    reset_state();
  }

  void step() {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = *params_[i];
      auto& v = velocity_[i];
      const double wd = p.decay ? wd_ : 0.0;
      for (std::size_t k = 0; k < p.size(); ++k) {
        const double g = p.grad[k] + wd * p.value[k];
        v[k] = static_cast<S>(momentum_ * v[k] + g);
        p.value[k] = static_cast<S>(p.value[k] - lr_ * v[k]);
      }
    }
  }

  void reset_state() {
    velocity_.clear();
    for (const auto* p : params_) velocity_.emplace_back(p->size(), S(0));
  }

  double learning_rate() const noexcept { return lr_; }
  void set_learning_rate(double lr) noexcept { lr_ = lr; }

 private:
  std::vector<nn::Param<S>*> params_;
  double lr_, momentum_, wd_;
  std::vector<aligned_vector<S>> velocity_;
};

template <typename S>
class Adam {
 public:
  Adam(std::vector<nn::Param<S>*> params, double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : params_(std::move(params)), lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {
    for (const auto* p : params_) {
      m_.emplace_back(p->size(), 0.0);
      v_.emplace_back(p->size(), 0.0);
    }
  }

  void step() {
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, t_), c2 = 1.0 - std::pow(b2_, t_);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = *params_[i];
      for (std::size_t k = 0; k < p.size(); ++k) {
        const double g = p.grad[k];
        m_[i][k] = b1_ * m_[i][k] + (1 - b1_) * g;
        v_[i][k] = b2_ * v_[i][k] + (1 - b2_) * g * g;
        p.value[k] = static_cast<S>(p.value[k] - lr_ * (m_[i][k] / c1) / (std::sqrt(v_[i][k] / c2) + eps_));
      }
    }
  }

  double learning_rate() const noexcept { return lr_; }

 private:
  std::vector<nn::Param<S>*> params_;
  double lr_, b1_, b2_, eps_;
  long t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

/// Divide the learning rate by 10 (configurable) when the monitored loss has
/// not improved by more than `threshold` for `patience` consecutive epochs.
class PlateauScheduler {
 public:
  PlateauScheduler(double lr, double min_lr, double factor = 0.1, int patience = 3, double threshold = 1e-4)
      : lr_(lr), min_lr_(min_lr), factor_(factor), patience_(patience), threshold_(threshold) {
    if (!(min_lr > 0.0 && min_lr <= lr)) throw ConfigError("require 0 < lr_min <= lr");
  }

  /// Record one epoch's loss; returns the learning rate for the next epoch.
  double step(double loss) {
    if (loss < best_ - threshold_) {
      best_ = loss;
      bad_epochs_ = 0;
    } else if (++bad_epochs_ >= patience_) {
      lr_ = std::max(min_lr_, lr_ * factor_);
      bad_epochs_ = 0;
    }
    return lr_;
  }

  void reset(double lr) {
    lr_ = lr;
    best_ = std::numeric_limits<double>::infinity();
    bad_epochs_ = 0;
  }

  double learning_rate() const noexcept { return lr_; }

 private:
  double lr_, min_lr_, factor_;
  int patience_;
  double threshold_;
  double best_ = std::numeric_limits<double>::infinity();
  int bad_epochs_ = 0;
};

}  // namespace atmodist
