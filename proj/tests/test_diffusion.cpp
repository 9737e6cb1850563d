#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <vector>

#include "diffdepth/diffusion.hpp"
#include "diffdepth/grad_check.hpp"
#include "diffdepth/rng.hpp"
#include "diffdepth/schedule.hpp"

using namespace diffdepth;

using T = Tensor<double>;

TEST_CASE("schedule construction validates its inputs") {
  CHECK_NOTHROW(DiffusionSchedule::linear(1000, 1e-4, 0.02, 20));
  CHECK_THROWS_AS(DiffusionSchedule::linear(1000, 1e-4, 0.02, 7), std::invalid_argument);   // 1000 % 7 != 0
  CHECK_THROWS_AS(DiffusionSchedule::linear(100, 1e-4, 0.02, 200), std::invalid_argument);  // n > T
  CHECK_THROWS_AS(DiffusionSchedule::linear(100, 0.0, 0.02, 10), std::invalid_argument);    // beta_start <= 0
  CHECK_THROWS_AS(DiffusionSchedule::linear(100, 0.03, 0.02, 10), std::invalid_argument);   // start > end
  CHECK_THROWS_AS(DiffusionSchedule::linear(100, 1e-4, 1.0, 10), std::invalid_argument);    // beta_end >= 1
  CHECK_THROWS_AS(DiffusionSchedule::linear(0, 1e-4, 0.02, 1), std::invalid_argument);
}

TEST_CASE("linear schedule matches externally computed values") {
  // Reference betas/cumulative products computed with an external tool.
  const DiffusionSchedule s10 = DiffusionSchedule::linear(10, 1e-4, 0.02, 5);
  CHECK(s10.beta(1) == doctest::Approx(1e-4).epsilon(1e-15));
  CHECK(s10.beta(5) == doctest::Approx(8.9444444444444441e-03).epsilon(1e-14));
  CHECK(s10.beta(10) == doctest::Approx(0.02).epsilon(1e-15));
  CHECK(s10.alpha_bar(0) == 1.0);
  CHECK(s10.alpha_bar(1) == doctest::Approx(0.9999).epsilon(1e-14));
  CHECK(s10.alpha_bar(5) == doctest::Approx(0.9775683562735794).epsilon(1e-14));
  CHECK(s10.alpha_bar(10) == doctest::Approx(0.9037394161512371).epsilon(1e-14));

  const DiffusionSchedule s1k = DiffusionSchedule::linear(1000, 1e-4, 0.02, 20);
  CHECK(s1k.alpha_bar(500) == doctest::Approx(0.0785872428817782).epsilon(1e-12));
  CHECK(s1k.alpha_bar(1000) == doctest::Approx(4.0358297653756754e-05).epsilon(1e-10));
  for (int t = 1; t <= 1000; ++t) CHECK(s1k.alpha_bar(t) < s1k.alpha_bar(t - 1));

  // inference steps stride evenly and end at T
  const auto& steps = s1k.infer_steps();
  REQUIRE(steps.size() == 20);
  CHECK(steps.front() == 50);
  CHECK(steps.back() == 1000);
  for (std::size_t i = 1; i < steps.size(); ++i) CHECK(steps[i] - steps[i - 1] == 50);

  CHECK_THROWS_AS(s10.beta(0), std::out_of_range);
  CHECK_THROWS_AS(s10.beta(11), std::out_of_range);
  CHECK_THROWS_AS(s10.alpha_bar(-1), std::out_of_range);
  CHECK_THROWS_AS(s10.alpha_bar(11), std::out_of_range);
}

TEST_CASE("latent transform round-trips normalized depth") {
  CHECK(latent_limit() == doctest::Approx(9.2102403669758495).epsilon(1e-15));
  T d = T::from_vector({4}, {0.1, 0.25, 0.5, 0.9});
  T back = from_latent(to_latent(d));
  for (int i = 0; i < 4; ++i) CHECK(back.data()[i] == doctest::Approx(d.data()[i]).epsilon(1e-12));

  // out-of-range depth is pinned to the clamp boundary, not extrapolated
  T edge = T::from_vector({2}, {0.0, 1.0});
  T eb = from_latent(to_latent(edge));
  CHECK(eb.data()[0] == doctest::Approx(1e-4).epsilon(1e-10));
  CHECK(eb.data()[1] == doctest::Approx(1.0 - 1e-4).epsilon(1e-10));
}

TEST_CASE("from_latent squeezes arbitrary latents strictly inside (0,1)") {
  T wild = T::from_vector({6}, {-1e12, -50.0, -0.3, 0.4, 70.0, 1e12});
  T d = from_latent(wild);
  for (int i = 0; i < 6; ++i) {
    CHECK(d.data()[i] > 0.0);
    CHECK(d.data()[i] < 1.0);
    CHECK(d.data()[i] >= 1e-4 * (1 - 1e-12));
    CHECK(d.data()[i] <= (1.0 - 1e-4) * (1 + 1e-12));
  }
}

TEST_CASE("noising then stepping the chain with the true noise recovers the latent") {
  const DiffusionSchedule sched = DiffusionSchedule::linear(100, 1e-4, 0.02, 10);
  Rng rng(3);
  T z0 = T::randn({1, 4, 4}, rng);
  T eps = T::randn({1, 4, 4}, rng);
  T z = q_sample(z0, 100, eps, sched);

  const auto& steps = sched.infer_steps();
  std::vector<int> taus_seen;
  for (std::size_t k = steps.size(); k-- > 0;) {
    const int tau = steps[k];
    const int tau_prev = k > 0 ? steps[k - 1] : 0;
    taus_seen.push_back(tau);
    z = ddim_step(z, eps, tau, tau_prev, sched);
  }
  REQUIRE(taus_seen.size() == 10);
  CHECK(taus_seen.front() == 100);
  CHECK(taus_seen.back() == 10);
  for (std::int64_t i = 0; i < z0.size(); ++i)
    CHECK(z.data()[i] == doctest::Approx(z0.data()[i]).epsilon(1e-9));
}

TEST_CASE("q_sample and ddim_step validate their step indices") {
  const DiffusionSchedule sched = DiffusionSchedule::linear(100, 1e-4, 0.02, 10);
  T z = T::zeros({1, 2, 2});
  T e = T::zeros({1, 2, 2});
  CHECK_THROWS_AS(q_sample(z, 0, e, sched), std::out_of_range);
  CHECK_THROWS_AS(q_sample(z, 101, e, sched), std::out_of_range);
  CHECK_THROWS_AS(ddim_step(z, e, 50, 50, sched), std::out_of_range);   // prev not below tau
  CHECK_THROWS_AS(ddim_step(z, e, 101, 50, sched), std::out_of_range);  // tau above T
  CHECK_THROWS_AS(ddim_step(z, e, 50, -1, sched), std::out_of_range);
  CHECK_THROWS_AS(q_sample(z, 10, T::zeros({1, 2, 3}), sched), ShapeError);
}

TEST_CASE("clean-latent estimate matches the closed form by hand") {
  // Pick tau = 1 on a schedule with beta(1) = 0.19 so abar = 0.81:
  // z0_hat = (z - sqrt(0.19) eps) / 0.9.
  const DiffusionSchedule sched = DiffusionSchedule::linear(1, 0.19, 0.19, 1);
  T z = T::from_vector({1}, {1.0});
  T e = T::from_vector({1}, {0.5});
  T z0 = predict_z0(z, e, 1, sched);
  CHECK(z0.data()[0] == doctest::Approx((1.0 - std::sqrt(0.19) * 0.5) / 0.9).epsilon(1e-14));
}

TEST_CASE("full sampler is deterministic given the generator state") {
  const DiffusionSchedule sched = DiffusionSchedule::linear(60, 1e-4, 0.02, 6);
  std::vector<int> taus;
  auto model = [&](const T& z, int tau) {
    taus.push_back(tau);
    return scalar_mul(z, 0.1);
  };
  Rng a(99), b(99), c(100);
  T da = denoise_depth<double>(model, {1, 4, 4}, sched, a);
  // the model sees the inference taus from T down in order
  REQUIRE(taus == std::vector<int>{60, 50, 40, 30, 20, 10});
  T db = denoise_depth<double>(model, {1, 4, 4}, sched, b);
  T dc = denoise_depth<double>(model, {1, 4, 4}, sched, c);

  bool same = true, differs = false;
  for (std::int64_t i = 0; i < da.size(); ++i) {
    same = same && da.data()[i] == db.data()[i];
    differs = differs || da.data()[i] != dc.data()[i];
  }
  CHECK(same);
  CHECK(differs);
  for (std::int64_t i = 0; i < da.size(); ++i) {
    CHECK(da.data()[i] > 0.0);
    CHECK(da.data()[i] < 1.0);
  }
}

TEST_CASE("sampling never grows the autodiff graph") {
  const DiffusionSchedule sched = DiffusionSchedule::linear(20, 1e-4, 0.02, 4);
  auto model = [](const T& z, int) { return scalar_mul(z, 0.05); };
  Rng rng(5);
  const std::int64_t before = graph_nodes_created();
  T d = denoise_depth<double>(model, {1, 4, 4}, sched, rng);
  CHECK(graph_nodes_created() == before);
  CHECK(d.size() == 16);
}

TEST_CASE("denoising pipeline is differentiable through the latent transform") {
  const DiffusionSchedule sched = DiffusionSchedule::linear(100, 1e-4, 0.02, 10);
  Rng rng(17);
  T eps_hat0 = T::rand_uniform({1, 3, 3}, rng, -0.5, 0.5);
  T z_tau = T::rand_uniform({1, 3, 3}, rng, -1.0, 1.0);

  auto loss_of = [&](const T& eh) {
    T z0 = predict_z0(z_tau, eh, 40, sched);
    return mean(square(from_latent(z0)));
  };
  auto res = grad_check<double>(loss_of, eps_hat0, 9, rng);
  CHECK(res.max_rel_err < 1e-4);
}
