#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "diffdepth/rng.hpp"
#include "diffdepth/tensor.hpp"

// Central finite-difference verification of reverse-mode gradients.
// The loss closure must be deterministic and rebuild its graph per call
// (pin any random draws and any detached quantities before checking).

namespace diffdepth {

struct GradCheckResult {
  double max_rel_err = 0.0;
  double max_abs_err = 0.0;
  int coords_checked = 0;
};

/// Compares d(loss)/d(x) against central differences at sampled coordinates.
/// Step per coordinate: h = h_scale * max(1, |x_i|). Relative error uses
/// max(|fd|, |ad|, 1e-4) as denominator so near-zero gradients do not blow up
/// the ratio.
template <typename S, typename LossFn>
GradCheckResult grad_check(LossFn&& loss_of, const Tensor<S>& x0, int n_coords, Rng& rng,
                           double h_scale = 1e-6) {
  // Analytic gradient at x0.
  Tensor<S> x = x0.detach();
  x.set_requires_grad();
  {
    Tensor<S> loss = loss_of(x);
    loss.backward();
  }
  Tensor<S> g = x.grad();

  std::vector<std::int64_t> coords;
  const std::int64_t n = x0.size();
  if (n_coords <= 0 || n_coords >= n) {
    coords.resize(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) coords[static_cast<std::size_t>(i)] = i;
  } else {
    for (int k = 0; k < n_coords; ++k) coords.push_back(rng.uniform_int(0, n - 1));
  }

  GradCheckResult res;
  NoGradGuard ng;
  for (std::int64_t i : coords) {
    const double xi = static_cast<double>(x0.data()[i]);
    const double h = h_scale * std::max(1.0, std::abs(xi));

    Tensor<S> xp = x0.detach();
    xp.data()[i] = static_cast<S>(xi + h);
    const double fp = static_cast<double>(loss_of(xp).item());

    Tensor<S> xm = x0.detach();
    xm.data()[i] = static_cast<S>(xi - h);
    const double fm = static_cast<double>(loss_of(xm).item());

    const double fd = (fp - fm) / (2.0 * h);
    const double ad = static_cast<double>(g.data()[i]);
    const double abs_err = std::abs(fd - ad);
    const double rel = abs_err / std::max({std::abs(fd), std::abs(ad), 1e-4});
    res.max_abs_err = std::max(res.max_abs_err, abs_err);
    res.max_rel_err = std::max(res.max_rel_err, rel);
    ++res.coords_checked;
  }
  return res;
}

}  // namespace diffdepth
