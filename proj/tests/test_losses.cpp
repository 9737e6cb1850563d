#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <vector>

#include "diffdepth/geometry.hpp"
#include "diffdepth/grad_check.hpp"
#include "diffdepth/losses.hpp"
#include "diffdepth/rng.hpp"

using namespace diffdepth;

using T = Tensor<double>;

TEST_CASE("ssim of an image with itself is exactly one") {
  Rng rng(2);
  T x = T::rand_uniform({3, 5, 5}, rng, 0.0, 1.0);
  T s = ssim_map(x, x);
  REQUIRE(s.shape() == Shape{1, 5, 5});
  for (std::int64_t i = 0; i < s.size(); ++i) CHECK(s.data()[i] == 1.0);
  T ph = photometric_map(x, x, LossWeights{});
  for (std::int64_t i = 0; i < ph.size(); ++i) CHECK(ph.data()[i] == 0.0);
}

TEST_CASE("ssim and photometric error of constant images match the closed form") {
  // mu_x = 0.2, mu_y = 0.4, zero variances: SSIM = (2*0.08 + 1e-4)/(0.04 + 0.16 + 1e-4),
  // photometric = 0.85 (1-SSIM)/2 + 0.15 * 0.2.
  T a = T::full({1, 4, 4}, 0.2);
  T b = T::full({1, 4, 4}, 0.4);
  const double ssim_expect = 0.1601 / 0.2001;
  T s = ssim_map(a, b);
  for (std::int64_t i = 0; i < s.size(); ++i)
    CHECK(s.data()[i] == doctest::Approx(ssim_expect).epsilon(1e-12));
  T ph = photometric_map(a, b, LossWeights{});
  const double ph_expect = 0.85 * (1.0 - ssim_expect) / 2.0 + 0.15 * 0.2;
  for (std::int64_t i = 0; i < ph.size(); ++i)
    CHECK(ph.data()[i] == doctest::Approx(ph_expect).epsilon(1e-12));
}

TEST_CASE("photometric map gradient matches finite differences") {
  Rng rng(5);
  T target = T::rand_uniform({2, 6, 6}, rng, 0.1, 0.9);
  T warped0 = T::rand_uniform({2, 6, 6}, rng, 0.1, 0.9);
  auto loss_of = [&](const T& w) { return mean(photometric_map(target, w, LossWeights{})); };
  auto res = grad_check<double>(loss_of, warped0, 20, rng);
  CHECK(res.max_rel_err < 1e-4);
}

TEST_CASE("masked mean averages only selected pixels") {
  T x = T::from_vector({1, 2, 2}, {1, 2, 3, 4});
  T m = T::from_vector({1, 2, 2}, {1, 0, 1, 0});
  x.set_requires_grad();
  T v = masked_mean(x, m);
  CHECK(v.item() == doctest::Approx(2.0));
  v.backward();
  T g = x.grad();
  CHECK(g.data()[0] == doctest::Approx(0.5));
  CHECK(g.data()[1] == 0.0);
  CHECK(g.data()[2] == doctest::Approx(0.5));
  CHECK(g.data()[3] == 0.0);

  T zero_mask = T::zeros({1, 2, 2});
  T v0 = masked_mean(x, zero_mask);
  CHECK(v0.item() == 0.0);
  CHECK_THROWS_AS(masked_mean(x, T::zeros({1, 2, 3})), ShapeError);
}

TEST_CASE("per-pixel minimum over views skips invalid pixels") {
  T map_a = T::from_vector({1, 1, 3}, {3.0, 5.0, 2.0});
  T map_b = T::from_vector({1, 1, 3}, {4.0, 1.0, 7.0});
  T mask_a = T::from_vector({1, 1, 3}, {1, 0, 0});
  T mask_b = T::from_vector({1, 1, 3}, {1, 1, 0});
  auto r = min_valid_map<double>({map_a, map_b}, {mask_a, mask_b});
  CHECK(r.map.at({0, 0, 0}) == 3.0);  // both valid: true min
  CHECK(r.map.at({0, 0, 1}) == 1.0);  // only b valid: penalty pushes a out
  CHECK(r.mask.at({0, 0, 0}) == 1.0);
  CHECK(r.mask.at({0, 0, 1}) == 1.0);
  CHECK(r.mask.at({0, 0, 2}) == 0.0);  // invalid everywhere
  // excluded pixel does not pollute a masked reduction
  T m = masked_mean(r.map, r.mask);
  CHECK(m.item() == doctest::Approx(2.0));
  CHECK_THROWS_AS((min_valid_map<double>({map_a}, {mask_a, mask_b})), std::invalid_argument);
}

TEST_CASE("adaptive mask tightens with the epoch and compares strictly") {
  T ph = T::from_vector({1, 1, 3}, {0.2, 0.04, 0.5});
  T m1 = adaptive_mask(ph, 1);  // threshold 1.5
  CHECK(m1.at({0, 0, 0}) == 1.0);
  CHECK(m1.at({0, 0, 1}) == 1.0);
  CHECK(m1.at({0, 0, 2}) == 1.0);
  T m10 = adaptive_mask(ph, 10);  // threshold 0.15
  CHECK(m10.at({0, 0, 0}) == 0.0);
  CHECK(m10.at({0, 0, 1}) == 1.0);
  T m3 = adaptive_mask(ph, 3);  // threshold 0.5 exactly: strict comparison
  CHECK(m3.at({0, 0, 2}) == 0.0);
  CHECK_THROWS_AS(adaptive_mask(ph, 0), std::invalid_argument);
}

TEST_CASE("berhu is L1 below the threshold and scaled quadratic above") {
  T e = T::from_vector({4}, {0.05, -0.08, 0.5, -0.3});
  const double c = 0.1;
  T b = berhu(e, c);
  CHECK(b.data()[0] == doctest::Approx(0.05));
  CHECK(b.data()[1] == doctest::Approx(0.08));
  CHECK(b.data()[2] == doctest::Approx((0.25 + 0.01) / 0.2));
  CHECK(b.data()[3] == doctest::Approx((0.09 + 0.01) / 0.2));
  // continuous at the switch point
  T at_c = berhu(T::from_vector({1}, {0.1}), c);
  CHECK(at_c.data()[0] == doctest::Approx(0.1).epsilon(1e-14));
  CHECK_THROWS_AS(berhu(e, 0.0), std::invalid_argument);

  CHECK(berhu_threshold(T::from_vector({3}, {0.1, -0.5, 0.3})) == doctest::Approx(0.1));
  CHECK(berhu_threshold(T::zeros({3})) == doctest::Approx(1e-8));

  Rng rng(7);
  // keep samples away from the kink at 0 and the (C1) switch at |e| = c
  T e0 = T::rand_uniform({12}, rng, 0.12, 0.45);
  auto loss_of = [&](const T& x) { return mean(berhu(x, c)); };
  auto res = grad_check<double>(loss_of, e0, 12, rng);
  CHECK(res.max_rel_err < 1e-4);
}

TEST_CASE("distillation loss follows the documented point values") {
  T d = T::full({1, 2, 2}, 0.7);
  T ones = T::full({1, 2, 2}, 1.0);
  CHECK(distill_loss(d, d, ones).item() == 0.0);

  T teacher = T::full({1, 2, 2}, 0.2);  // uniform error 0.5, c = 0.1
  CHECK(distill_loss(d, teacher, ones).item() == doctest::Approx(1.3));
  CHECK(distill_loss(d, teacher, T::zeros({1, 2, 2})).item() == 0.0);
  // ablated variant: plain L1
  CHECK(distill_loss(d, teacher, ones, 0.2, false).item() == doctest::Approx(0.5));
}

TEST_CASE("noise-level loss reproduces its algebraic expansions") {
  Rng rng(11);
  LossWeights w;
  T eps = T::randn({1, 4, 4}, rng);
  T delta = T::rand_uniform({1, 4, 4}, rng, 0.1, 0.3);
  T aug = add(eps, delta);

  // clear prediction perfect, augmented off by delta: 0.5 m + 1.0 m = 1.5 m
  const double md2 = mean(square(delta)).item();
  T l = trinity_noise(aug, eps, eps, TrinityMode::trinity, true, w);
  CHECK(l.item() == doctest::Approx(1.5 * md2).epsilon(1e-12));

  // the trinity point: all three identical
  CHECK(trinity_noise(eps, eps, eps, TrinityMode::trinity, true, w).item() == 0.0);

  // symmetric under swapping the two predictions
  T gamma = T::rand_uniform({1, 4, 4}, rng, -0.2, 0.2);
  T clear = add(eps, gamma);
  T lab = trinity_noise(aug, clear, eps, TrinityMode::trinity, true, w);
  T lba = trinity_noise(clear, aug, eps, TrinityMode::trinity, true, w);
  CHECK(lab.item() == doctest::Approx(lba.item()).epsilon(1e-12));

  // mode gating
  const double mg2 = mean(square(gamma)).item();
  const double mpair = mean(square(sub(aug, clear))).item();
  T off = trinity_noise(aug, T(), eps, TrinityMode::off, true, w);
  CHECK(off.item() == doctest::Approx(md2).epsilon(1e-12));
  T gated = trinity_noise(aug, T(), eps, TrinityMode::trinity, false, w);
  CHECK(gated.item() == doctest::Approx(md2).epsilon(1e-12));
  T dis = trinity_noise(aug, clear, eps, TrinityMode::distill, true, w);
  CHECK(dis.item() == doctest::Approx(1.0 * (md2 + mg2)).epsilon(1e-12));
  T con = trinity_noise(aug, clear, eps, TrinityMode::contrast, true, w);
  CHECK(con.item() == doctest::Approx(0.5 * mpair + md2).epsilon(1e-12));
}

TEST_CASE("feature-level loss weights pair and teacher anchors as documented") {
  Rng rng(13);
  LossWeights w;
  T f = T::rand_uniform({1, 4, 4}, rng, -1.0, 1.0);
  T delta = T::rand_uniform({1, 4, 4}, rng, 0.05, 0.2);
  const double md = mean(abs_(delta)).item();

  // student clear = teacher = F, student aug = F + delta: 1 m + 0.5 m = 1.5 m
  T l1 = trinity_feature(f, add(f, delta), f, TrinityMode::trinity, true, w);
  CHECK(l1.item() == doctest::Approx(1.5 * md).epsilon(1e-12));
  // both students = F, teacher = F + delta: 0.5 * 2m = m
  T l2 = trinity_feature(f, f, add(f, delta), TrinityMode::trinity, true, w);
  CHECK(l2.item() == doctest::Approx(md).epsilon(1e-12));
  CHECK(trinity_feature(f, f, f, TrinityMode::trinity, true, w).item() == 0.0);

  T lc = trinity_feature(f, add(f, delta), f, TrinityMode::contrast, true, w);
  CHECK(lc.item() == doctest::Approx(1.0 * md).epsilon(1e-12));
  T ld = trinity_feature(f, add(f, delta), f, TrinityMode::distill, true, w);
  CHECK(ld.item() == doctest::Approx(0.5 * md).epsilon(1e-12));
  CHECK(trinity_feature(f, add(f, delta), f, TrinityMode::off, true, w).item() == 0.0);
  CHECK(trinity_feature(f, add(f, delta), f, TrinityMode::trinity, false, w).item() == 0.0);
}

TEST_CASE("image-level loss puts the large weight on the clear-image anchors") {
  Rng rng(17);
  LossWeights w;
  T img = T::rand_uniform({3, 4, 4}, rng, 0.2, 0.8);
  T delta = T::rand_uniform({3, 4, 4}, rng, 0.02, 0.1);
  const double md = mean(abs_(delta)).item();

  // refined clear = I, refined aug = I + delta: anchors 1*(m+0) plus pair 0.5 m
  T l = trinity_image(add(img, delta), img, img, TrinityMode::trinity, true, w);
  CHECK(l.item() == doctest::Approx(1.5 * md).epsilon(1e-12));
  CHECK(trinity_image(img, img, img, TrinityMode::trinity, true, w).item() == 0.0);

  T lc = trinity_image(add(img, delta), img, img, TrinityMode::contrast, true, w);
  CHECK(lc.item() == doctest::Approx(0.5 * md).epsilon(1e-12));
  T ld = trinity_image(add(img, delta), img, img, TrinityMode::distill, true, w);
  CHECK(ld.item() == doctest::Approx(1.0 * md).epsilon(1e-12));
}

TEST_CASE("edge-aware smoothness is scale invariant and relaxes across edges") {
  // two identical rows, ramp 1..4: normalized slope 0.4, flat image weights 1
  T d = T::from_vector({1, 2, 4}, {1, 2, 3, 4, 1, 2, 3, 4});
  T img = T::full({3, 2, 4}, 0.5);
  T l = edge_aware_smoothness(d, img);
  CHECK(l.item() == doctest::Approx(0.4).epsilon(1e-12));

  // constant depth costs nothing
  CHECK(edge_aware_smoothness(T::full({1, 2, 4}, 2.0), img).item() == 0.0);

  // scaling depth changes nothing (mean normalization)
  T d7 = T::from_vector({1, 2, 4}, {7, 14, 21, 28, 7, 14, 21, 28});
  CHECK(edge_aware_smoothness(d7, img).item() == doctest::Approx(0.4).epsilon(1e-13));

  // a strong image edge aligned with the depth jump lowers the penalty
  T step = T::from_vector({1, 2, 4}, {1, 1, 5, 5, 1, 1, 5, 5});
  T flat_img = T::full({1, 2, 4}, 0.5);
  T edge_img = T::from_vector({1, 2, 4}, {0, 0, 1, 1, 0, 0, 1, 1});
  CHECK(edge_aware_smoothness(step, edge_img).item() < edge_aware_smoothness(step, flat_img).item());

  CHECK_THROWS_AS(edge_aware_smoothness(T::zeros({1, 2, 4}), img), std::invalid_argument);
  CHECK_THROWS_AS(edge_aware_smoothness(T::full({2, 2, 4}, 1.0), img), ShapeError);
  CHECK_THROWS_AS(edge_aware_smoothness(T::full({1, 1, 4}, 1.0), T::full({3, 1, 4}, 0.5)), ShapeError);

  Rng rng(19);
  T img_r = T::rand_uniform({3, 5, 6}, rng, 0.1, 0.9);
  T d0 = T::rand_uniform({1, 5, 6}, rng, 1.0, 3.0);
  auto loss_of = [&](const T& dd) { return edge_aware_smoothness(dd, img_r); };
  auto res = grad_check<double>(loss_of, d0, 16, rng);
  CHECK(res.max_rel_err < 1e-4);
}

TEST_CASE("stage losses compose with the documented weights") {
  LossWeights w;
  StageParts<double> p;
  p.nis = T::scalar(1.0);
  p.dis = T::scalar(1.0);
  p.ph = T::scalar(1.0);
  p.edge = T::scalar(1.0);
  CHECK(stage_total(p, 1, w).item() == doctest::Approx(3.001).epsilon(1e-14));
  CHECK_THROWS_AS(stage_total(p, 2, w), std::invalid_argument);  // missing feat/img
  p.feat = T::scalar(1.0);
  p.img = T::scalar(1.0);
  CHECK(stage_total(p, 2, w).item() == doctest::Approx(4.001).epsilon(1e-14));
  CHECK(stage_total(p, 2, w).item() - stage_total(p, 1, w).item() ==
        doctest::Approx(w.multilevel_theta * 2.0).epsilon(1e-14));
  CHECK_THROWS_AS(stage_total(p, 3, w), std::invalid_argument);
  StageParts<double> empty;
  CHECK_THROWS_AS(stage_total(empty, 1, w), std::invalid_argument);

  LossReport r = make_report(p, stage_total(p, 2, w));
  CHECK(r.total == doctest::Approx(4.001));
  CHECK(r.feat == 1.0);
}

TEST_CASE("no gradient reaches sampled noise, teacher outputs or masks") {
  Rng rng(23);
  T eps = T::randn({1, 4, 4}, rng);          // sampled noise: plain
  T teacher = T::rand_uniform({1, 4, 4}, rng, 0.2, 0.8);  // teacher: plain
  T mask = T::full({1, 4, 4}, 1.0);
  T student_eps = T::randn({1, 4, 4}, rng);
  T student_d = T::rand_uniform({1, 4, 4}, rng, 0.2, 0.8);
  student_eps.set_requires_grad();
  student_d.set_requires_grad();

  LossWeights w;
  T loss = add(trinity_noise(student_eps, T(), eps, TrinityMode::off, false, w),
               distill_loss(student_d, teacher, mask));
  loss.backward();
  CHECK(student_eps.has_grad());
  CHECK(student_d.has_grad());
  CHECK_FALSE(eps.has_grad());
  CHECK_FALSE(teacher.has_grad());
  CHECK_FALSE(mask.has_grad());
}

TEST_CASE("composed stage-two loss passes finite differences end to end") {
  // One full synthetic sample: photometric min over two warped auxiliaries,
  // masked distillation, noise/feature/image levels and edge regularity.
  const int W = 16, H = 16;
  CameraIntrinsics K;
  K.fx = K.fy = 1.1 * W;
  K.cx = (W - 1) / 2.0;
  K.cy = (H - 1) / 2.0;
  K.width = W;
  K.height = H;
  Rng rng(31);
  LossWeights w;

  T clear = T::rand_uniform({3, H, W}, rng, 0.1, 0.9);
  std::vector<T> aux = {T::rand_uniform({3, H, W}, rng, 0.1, 0.9),
                        T::rand_uniform({3, H, W}, rng, 0.1, 0.9)};
  std::vector<Pose> poses(2);
  poses[0].rotation = rotation_xyz(0.008, -0.006, 0.01);
  poses[0].translation = Eigen::Vector3d(0.05, -0.02, 0.03);
  poses[1].rotation = rotation_xyz(-0.01, 0.007, -0.004);
  poses[1].translation = Eigen::Vector3d(-0.04, 0.03, -0.02);

  T teacher_d = T::rand_uniform({1, H, W}, rng, 0.3, 0.7);
  T teacher_ph = T::rand_uniform({1, H, W}, rng, 0.0, 0.3);
  T mask = adaptive_mask(teacher_ph, 8);  // threshold 0.1875: mixed mask
  T eps = T::randn({1, H, W}, rng);
  T eps_clear = T::randn({1, H, W}, rng);
  T f_teacher = T::rand_uniform({1, H, W}, rng, -1.0, 1.0);
  T f_clear = T::rand_uniform({1, H, W}, rng, -1.0, 1.0);
  T refined_clear = T::rand_uniform({3, H, W}, rng, 0.1, 0.9);
  T refined_aug = T::rand_uniform({3, H, W}, rng, 0.1, 0.9);
  const double d_max = 10.0;

  // differentiable inputs: predicted normalized depth and the two student maps
  T d_norm0 = T::rand_uniform({1, H, W}, rng, 0.15, 0.45);
  T eps_aug0 = T::randn({1, H, W}, rng);

  auto build = [&](const T& d_norm, const T& eps_aug) {
    T depth = scalar_mul(d_norm, d_max);
    std::vector<T> maps, masks;
    for (int a = 0; a < 2; ++a) {
      WarpResult<double> wr = synthesize_view(aux[a], depth, poses[a], K);
      maps.push_back(photometric_map(clear, wr.image, w));
      masks.push_back(wr.mask);
    }
    auto mv = min_valid_map(maps, masks);
    StageParts<double> p;
    p.ph = masked_mean(mv.map, mv.mask);
    p.dis = distill_loss(d_norm, teacher_d, mask);
    p.nis = trinity_noise(eps_aug, eps_clear, eps, TrinityMode::trinity, true, w);
    p.edge = edge_aware_smoothness(d_norm, clear);
    p.feat = trinity_feature(f_clear, channel_mean(depth), f_teacher, TrinityMode::trinity, true, w);
    p.img = trinity_image(refined_aug, refined_clear, clear, TrinityMode::trinity, true, w);
    return stage_total(p, 2, w);
  };

  auto res_d = grad_check<double>([&](const T& d) { return build(d, eps_aug0); }, d_norm0, 20, rng);
  CHECK(res_d.max_rel_err < 1e-2);  // detached BerHu threshold shifts under FD probes
  auto res_e = grad_check<double>([&](const T& e) { return build(d_norm0, e); }, eps_aug0, 20, rng);
  CHECK(res_e.max_rel_err < 1e-4);
}
