#include "diffdepth/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

namespace diffdepth {

namespace {

double median_of(std::vector<double> v) {
  const std::size_t n = v.size();
  std::sort(v.begin(), v.end());
  if (n % 2 == 1) return v[n / 2];
  return 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

DepthMetrics compute_depth_metrics(const Tensor<double>& pred, const Tensor<double>& gt, double cap,
                                   bool median_scale) {
  if (pred.shape() != gt.shape())
    throw ShapeError("metrics", "pred " + shape_str(pred.shape()) + " vs gt " + shape_str(gt.shape()));
  if (!(cap > 0)) throw std::invalid_argument("metrics: cap must be positive");

  std::vector<double> ps, gs;
  for (std::int64_t i = 0; i < pred.size(); ++i) {
    const double g = gt.data()[i];
    if (g <= 0) continue;
    ps.push_back(std::max(pred.data()[i], 1e-6));
    gs.push_back(g);
  }
  if (ps.empty()) throw std::invalid_argument("metrics: no valid ground-truth pixels");

  double scale = 1.0;
  if (median_scale) scale = median_of(gs) / median_of(ps);

  DepthMetrics m;
  m.valid_pixels = static_cast<long long>(ps.size());
  double abs_rel = 0, sq_rel = 0, sq = 0, sq_log = 0, a1 = 0, a2 = 0, a3 = 0;
  for (std::size_t i = 0; i < ps.size(); ++i) {
    const double p = std::min(std::max(ps[i] * scale, 1e-6), cap);
    const double g = std::min(gs[i], cap);
    const double diff = p - g;
    abs_rel += std::abs(diff) / g;
    sq_rel += diff * diff / g;
    sq += diff * diff;
    const double dl = std::log(p) - std::log(g);
    sq_log += dl * dl;
    const double ratio = std::max(p / g, g / p);
    a1 += ratio < 1.25 ? 1.0 : 0.0;
    a2 += ratio < 1.25 * 1.25 ? 1.0 : 0.0;
    a3 += ratio < 1.25 * 1.25 * 1.25 ? 1.0 : 0.0;
  }
  const double n = static_cast<double>(ps.size());
  m.abs_rel = abs_rel / n;
  m.sq_rel = sq_rel / n;
  m.rmse = std::sqrt(sq / n);
  m.rmse_log = std::sqrt(sq_log / n);
  m.a1 = a1 / n;
  m.a2 = a2 / n;
  m.a3 = a3 / n;
  return m;
}

}  // namespace diffdepth
