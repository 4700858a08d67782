#pragma once

#include <cmath>
#include <cstddef>
#include <numbers>
#include <stdexcept>
#include <vector>

#include "icvlab/tensor.hpp"

namespace icvlab {

enum class Schedule { kConstant, kLinearDecay, kCosine };

/// Learning-rate multiplier: linear warmup over the first warmup_fraction of
/// `total` steps, then the chosen decay.
inline double lr_multiplier(std::size_t step, std::size_t total, double warmup_fraction, Schedule decay) {
  if (total == 0) return 1.0;
  const double warm = std::floor(warmup_fraction * static_cast<double>(total));
  const double s = static_cast<double>(step);
  if (warm > 0 && s < warm) return (s + 1.0) / warm;
  if (decay == Schedule::kConstant) return 1.0;
  const double span = std::max(1.0, static_cast<double>(total) - warm);
  const double frac = std::clamp((s - warm) / span, 0.0, 1.0);
  if (decay == Schedule::kLinearDecay) return 1.0 - frac;
  return 0.5 * (1.0 + std::cos(std::numbers::pi * frac));
}

/// Adam with decoupled weight decay over parameter groups.
template <typename S>
class AdamW {
 public:
  struct Group {
    std::vector<Tensor<S>*> params;
    double lr = 1e-3;
    double weight_decay = 0.0;
  };

  explicit AdamW(std::vector<Group> groups, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : groups_(std::move(groups)), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (auto& g : groups_) {
      for (auto* p : g.params) {
        m_.push_back(MatrixX<S>::Zero(p->rows(), p->cols()));
        v_.push_back(MatrixX<S>::Zero(p->rows(), p->cols()));
      }
    }
  }

  /// One update using Tensor::grad (missing grads count as zero), scaled by
  /// `grad_scale`. Gradients are cleared afterwards.
  void step(double lr_scale, double grad_scale = 1.0) {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    std::size_t i = 0;
    for (auto& g : groups_) {
      const S lr = static_cast<S>(g.lr * lr_scale);
      for (auto* p : g.params) {
        auto& m = m_[i];
        auto& v = v_[i];
        ++i;
        if (p->grad) {
          const MatrixX<S> grad = (*p->grad) * static_cast<S>(grad_scale);
          m = static_cast<S>(beta1_) * m + static_cast<S>(1 - beta1_) * grad;
          v = static_cast<S>(beta2_) * v + static_cast<S>(1 - beta2_) * grad.cwiseProduct(grad);
        } else {
          m *= static_cast<S>(beta1_);
          v *= static_cast<S>(beta2_);
        }
        if (lr == S(0)) {
          p->zero_grad();
          continue;
        }
        p->values.array() -= lr * static_cast<S>(g.weight_decay) * p->values.array();
        p->values.array() -= lr * (m.array() / static_cast<S>(bc1)) /
                             ((v.array() / static_cast<S>(bc2)).sqrt() + static_cast<S>(eps_));
        p->zero_grad();
      }
    }
  }

  std::size_t steps_taken() const { return t_; }

 private:
  std::vector<Group> groups_;
  double beta1_, beta2_, eps_;
  std::vector<MatrixX<S>> m_, v_;
  std::size_t t_ = 0;
};

}  // namespace icvlab
