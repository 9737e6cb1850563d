#pragma once

#include "diffdepth/tensor.hpp"

// Standard depth evaluation statistics over pixels with valid ground truth.

namespace diffdepth {

struct DepthMetrics {
  double abs_rel = 0, sq_rel = 0, rmse = 0, rmse_log = 0;
  double a1 = 0, a2 = 0, a3 = 0;  // fraction with max(p/g, g/p) < 1.25^k
  long long valid_pixels = 0;
};

/// Compares predicted and ground-truth depth [1,H,W] in scene units.
/// Pixels with gt <= 0 are ignored. With median_scale on, the prediction is
/// multiplied by median(gt)/median(pred) first (median = lower-middle-average
/// of the sorted valid values). Both maps are then clamped to [1e-6, cap]
/// before the statistics.
DepthMetrics compute_depth_metrics(const Tensor<double>& pred, const Tensor<double>& gt, double cap,
                                   bool median_scale);

}  // namespace diffdepth
