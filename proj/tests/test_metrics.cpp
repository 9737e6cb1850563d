#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "diffdepth/metrics.hpp"

using namespace diffdepth;

using T = Tensor<double>;

TEST_CASE("depth metrics match externally computed values") {
  // gt has one invalid (zero) pixel; its prediction must be ignored.
  T gt = T::from_vector({1, 1, 5}, {2.0, 4.0, 0.0, 8.0, 1.0});
  T pred = T::from_vector({1, 1, 5}, {2.2, 3.8, 5.0, 9.0, 1.3});
  DepthMetrics m = compute_depth_metrics(pred, gt, 80.0, false);
  CHECK(m.valid_pixels == 4);
  CHECK(m.abs_rel == doctest::Approx(0.14375).epsilon(1e-12));
  CHECK(m.sq_rel == doctest::Approx(0.06125).epsilon(1e-12));
  CHECK(m.rmse == doctest::Approx(0.5408326913195984).epsilon(1e-12));
  CHECK(m.rmse_log == doctest::Approx(0.1536415334320942).epsilon(1e-12));
  CHECK(m.a1 == doctest::Approx(0.75));  // the 1.3 ratio fails the first gate
  CHECK(m.a2 == doctest::Approx(1.0));
  CHECK(m.a3 == doctest::Approx(1.0));
}

TEST_CASE("perfect prediction scores zero errors and full accuracy") {
  T gt = T::from_vector({1, 2, 2}, {1.0, 2.0, 3.0, 4.0});
  DepthMetrics m = compute_depth_metrics(gt, gt, 80.0, false);
  CHECK(m.abs_rel == 0.0);
  CHECK(m.sq_rel == 0.0);
  CHECK(m.rmse == 0.0);
  CHECK(m.rmse_log == 0.0);
  CHECK(m.a1 == 1.0);
}

TEST_CASE("median scaling removes a global scale error") {
  T gt = T::from_vector({1, 1, 5}, {2.0, 4.0, 0.0, 8.0, 1.0});
  T pred = T::from_vector({1, 1, 5}, {2.2, 3.8, 5.0, 9.0, 1.3});
  T pred2 = T::from_vector({1, 1, 5}, {4.4, 7.6, 10.0, 18.0, 2.6});  // doubled

  DepthMetrics scaled = compute_depth_metrics(pred2, gt, 80.0, true);
  DepthMetrics plain = compute_depth_metrics(pred, gt, 80.0, false);
  // median(gt)=3 (average of the two middles), median(pred2)=6, scale 0.5
  CHECK(scaled.abs_rel == doctest::Approx(plain.abs_rel).epsilon(1e-12));
  CHECK(scaled.rmse == doctest::Approx(plain.rmse).epsilon(1e-12));
  CHECK(scaled.a1 == doctest::Approx(plain.a1));

  // without scaling the doubled prediction is far off
  DepthMetrics unscaled = compute_depth_metrics(pred2, gt, 80.0, false);
  CHECK(unscaled.abs_rel > 0.9);

  // odd count picks the middle element: gt {1,2,4} -> 2, pred {2,4,8} -> 4
  T g3 = T::from_vector({1, 1, 3}, {1.0, 2.0, 4.0});
  T p3 = T::from_vector({1, 1, 3}, {2.0, 4.0, 8.0});
  DepthMetrics m3 = compute_depth_metrics(p3, g3, 80.0, true);
  CHECK(m3.abs_rel == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("predictions are clamped to the evaluation cap and floored") {
  T gt = T::from_vector({1, 1, 1}, {10.0});
  T wild = T::from_vector({1, 1, 1}, {200.0});
  DepthMetrics m = compute_depth_metrics(wild, gt, 80.0, false);
  CHECK(m.abs_rel == doctest::Approx(7.0).epsilon(1e-12));  // 200 clamps to 80

  T zero = T::from_vector({1, 1, 1}, {0.0});
  DepthMetrics mz = compute_depth_metrics(zero, gt, 80.0, false);
  CHECK(mz.abs_rel == doctest::Approx((10.0 - 1e-6) / 10.0).epsilon(1e-12));

  // gt beyond the cap is clamped too
  T far_gt = T::from_vector({1, 1, 1}, {100.0});
  T far_pred = T::from_vector({1, 1, 1}, {80.0});
  DepthMetrics mf = compute_depth_metrics(far_pred, far_gt, 80.0, false);
  CHECK(mf.abs_rel == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("metric computation validates its inputs") {
  T gt = T::from_vector({1, 1, 2}, {1.0, 2.0});
  CHECK_THROWS_AS(compute_depth_metrics(T::zeros({1, 1, 3}), gt, 80.0, false), ShapeError);
  CHECK_THROWS_AS(compute_depth_metrics(gt, T::zeros({1, 1, 2}), 80.0, false), std::invalid_argument);
  CHECK_THROWS_AS(compute_depth_metrics(gt, gt, 0.0, false), std::invalid_argument);
  CHECK_THROWS_AS(compute_depth_metrics(gt, gt, -5.0, false), std::invalid_argument);
}
