#pragma once

#include <vector>

// Linear variance schedule and the deterministic inference-step grid.

namespace diffdepth {

class DiffusionSchedule {
 public:
  /// Linear beta ramp over t_train steps plus an evenly strided inference
  /// grid of infer_count steps ending at t_train. t_train must be divisible
  /// by infer_count so the stride is exact.
  static DiffusionSchedule linear(int t_train, double beta_start, double beta_end, int infer_count);

  int t_train() const { return t_; }

  /// beta at step s, s in [1, t_train].
  double beta(int s) const;

  /// Cumulative product of (1 - beta) up to s; alpha_bar(0) = 1.
  double alpha_bar(int s) const;

  /// Ascending inference steps, last entry = t_train.
  const std::vector<int>& infer_steps() const { return infer_; }

 private:
  int t_ = 0;
  std::vector<double> betas_;       // betas_[s-1]
  std::vector<double> alpha_bars_;  // alpha_bars_[s], size t_+1
  std::vector<int> infer_;
};

}  // namespace diffdepth
