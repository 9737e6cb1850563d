#include "diffdepth/schedule.hpp"

#include <stdexcept>
#include <string>

namespace diffdepth {

DiffusionSchedule DiffusionSchedule::linear(int t_train, double beta_start, double beta_end,
                                            int infer_count) {
  if (t_train < 1) throw std::invalid_argument("schedule: t_train must be >= 1");
  if (!(beta_start > 0) || !(beta_start <= beta_end) || !(beta_end < 1))
    throw std::invalid_argument("schedule: need 0 < beta_start <= beta_end < 1");
  if (infer_count < 1 || infer_count > t_train)
    throw std::invalid_argument("schedule: infer_count must be in [1, t_train]");
  if (t_train % infer_count != 0)
    throw std::invalid_argument("schedule: t_train (" + std::to_string(t_train) +
                                ") must be divisible by infer_count (" + std::to_string(infer_count) + ")");

  DiffusionSchedule s;
  s.t_ = t_train;
  s.betas_.resize(static_cast<std::size_t>(t_train));
  s.alpha_bars_.resize(static_cast<std::size_t>(t_train) + 1);
  s.alpha_bars_[0] = 1.0;
  for (int i = 1; i <= t_train; ++i) {
    const double frac = t_train > 1 ? static_cast<double>(i - 1) / (t_train - 1) : 0.0;
    const double b = beta_start + (beta_end - beta_start) * frac;
    s.betas_[static_cast<std::size_t>(i - 1)] = b;
    s.alpha_bars_[static_cast<std::size_t>(i)] = s.alpha_bars_[static_cast<std::size_t>(i - 1)] * (1.0 - b);
  }
  const int stride = t_train / infer_count;
  for (int k = 1; k <= infer_count; ++k) s.infer_.push_back(k * stride);
  return s;
}

double DiffusionSchedule::beta(int st) const {
  if (st < 1 || st > t_) throw std::out_of_range("schedule: beta step " + std::to_string(st));
  return betas_[static_cast<std::size_t>(st - 1)];
}

double DiffusionSchedule::alpha_bar(int st) const {
  if (st < 0 || st > t_) throw std::out_of_range("schedule: alpha_bar step " + std::to_string(st));
  return alpha_bars_[static_cast<std::size_t>(st)];
}

}  // namespace diffdepth
