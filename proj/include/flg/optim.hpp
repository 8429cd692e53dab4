#pragma once

#include <cmath>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "flg/autodiff.hpp"

namespace flg {

struct AdamWHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// AdamW with decoupled weight decay and bias-corrected moments. Parameters are
/// assigned to groups so each group can run at its own learning rate.
class AdamW {
 public:
  struct Slot {
    Tensor* param = nullptr;
    int group = 0;
    Matrix m;
    Matrix v;
  };

  explicit AdamW(AdamWHyper hyper = {}) : hyper_(hyper) {}

  void add_param(Tensor& param, int group = 0);

  /// One update using each parameter's accumulated grad. `lrs[g]` is the rate
  /// of group g. A non-finite gradient aborts the step before anything changes.
  void step(std::span<const double> lrs, double weight_decay);

  long step_count() const { return t_; }
  void set_step_count(long t) { t_ = t; }
  std::vector<Slot>& slots() { return slots_; }
  const std::vector<Slot>& slots() const { return slots_; }
  const AdamWHyper& hyper() const { return hyper_; }

 private:
  AdamWHyper hyper_;
  std::vector<Slot> slots_;
  long t_ = 0;
};

/// lr_max * (1 + cos(pi * step / total)) / 2.
template <typename Scalar>
Scalar cosine_lr(long step, long total_steps, Scalar lr_max) {
  if (total_steps <= 0) return lr_max;
  const Scalar frac = static_cast<Scalar>(step) / static_cast<Scalar>(total_steps);
  return lr_max * (Scalar(1) + std::cos(std::numbers::pi_v<Scalar> * frac)) / Scalar(2);
}

/// Linear warmup over `warmup_steps`, constant afterwards.
template <typename Scalar>
Scalar warmup_constant_lr(long step, long warmup_steps, Scalar lr) {
  if (warmup_steps <= 0 || step >= warmup_steps) return lr;
  return lr * static_cast<Scalar>(step + 1) / static_cast<Scalar>(warmup_steps);
}

/// Frobenius norm of all gradients taken together.
double global_grad_norm(std::span<Tensor* const> params);

/// Rescales every gradient by max_norm / global when global > max_norm.
/// Returns the pre-clip global norm.
double clip_grad_norm(std::span<Tensor* const> params, double max_norm);

}  // namespace flg
