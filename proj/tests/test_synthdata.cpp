#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "diffdepth/image_io.hpp"
#include "diffdepth/losses.hpp"
#include "diffdepth/synthdata.hpp"

using namespace diffdepth;

using T = Tensor<double>;

namespace {

GenerateOptions small_opts() {
  GenerateOptions o;
  o.train_count = 4;
  o.val_count = 2;
  o.test_count = 2;
  o.width = 32;
  o.height = 32;
  o.seed = 11;
  return o;
}

bool tensors_equal(const T& a, const T& b) {
  if (a.shape() != b.shape()) return false;
  for (std::int64_t i = 0; i < a.size(); ++i)
    if (a.data()[i] != b.data()[i]) return false;
  return true;
}

}  // namespace

TEST_CASE("generation is deterministic and validates its options") {
  Dataset a = generate_dataset(small_opts());
  Dataset b = generate_dataset(small_opts());
  REQUIRE(a.samples.size() == 8);
  REQUIRE(b.samples.size() == 8);
  for (std::size_t i = 0; i < a.samples.size(); ++i) {
    CHECK(tensors_equal(a.samples[i].clear, b.samples[i].clear));
    CHECK(tensors_equal(a.samples[i].aug, b.samples[i].aug));
    CHECK(tensors_equal(a.samples[i].depth, b.samples[i].depth));
    CHECK(a.samples[i].corruption.kind == b.samples[i].corruption.kind);
    CHECK(a.samples[i].corruption.level == b.samples[i].corruption.level);
  }

  GenerateOptions bad = small_opts();
  bad.width = 30;  // not a multiple of 4
  CHECK_THROWS_AS(generate_dataset(bad), std::invalid_argument);
  bad = small_opts();
  bad.mix.level_lo = 0;
  CHECK_THROWS_AS(generate_dataset(bad), std::invalid_argument);
  bad = small_opts();
  bad.mix.kinds = {"sandstorm"};
  CHECK_THROWS_AS(generate_dataset(bad), std::invalid_argument);
}

TEST_CASE("samples carry consistent structure and bounded depth") {
  Dataset ds = generate_dataset(small_opts());
  CHECK(ds.split("train").size() == 4);
  CHECK(ds.split("val").size() == 2);
  CHECK(ds.split("test").size() == 2);
  CHECK(ds.split("bogus").empty());

  for (const auto& s : ds.samples) {
    REQUIRE(s.clear.shape() == Shape{3, 32, 32});
    REQUIRE(s.depth.shape() == Shape{1, 32, 32});
    REQUIRE(s.aux.size() == 2);
    REQUIRE(s.poses.size() == 2);
    REQUIRE(s.aux_depth.size() == 2);
    for (const auto& p : s.poses) CHECK_NOTHROW(p.validate(1e-9));
    for (std::int64_t i = 0; i < s.depth.size(); ++i) {
      CHECK(s.depth.data()[i] > 0.5);
      CHECK(s.depth.data()[i] < ds.d_max);
    }
    // images quantized to 8 bits at creation: 255*v is integral
    for (std::int64_t i = 0; i < s.clear.size(); ++i) {
      const double scaled = s.clear.data()[i] * 255.0;
      CHECK(std::abs(scaled - std::round(scaled)) < 1e-9);
      CHECK(s.clear.data()[i] >= 0.0);
      CHECK(s.clear.data()[i] <= 1.0);
    }
    // corruption bookkeeping
    if (s.split == "train") {
      CHECK(s.corruption.level >= 2);
      CHECK(s.corruption.level <= 4);
    } else {
      CHECK(s.corruption.level == 3);
    }
  }
  // val/test cycle through the corruption catalog in order
  auto val = ds.split("val");
  CHECK(val[0]->corruption.kind == corruption_kinds()[0]);
  CHECK(val[1]->corruption.kind == corruption_kinds()[1]);
}

TEST_CASE("rendered geometry reproduces the target view through the warp") {
  // Rendered at 64x64: the consistency residual scales with pixel footprint,
  // and the oracle threshold below is calibrated for this resolution.
  GenerateOptions o;
  o.train_count = 4;
  o.val_count = 0;
  o.test_count = 0;
  o.width = 64;
  o.height = 64;
  o.seed = 11;
  Dataset ds = generate_dataset(o);
  LossWeights w;
  for (const auto& s : ds.samples) {
    for (std::size_t a = 0; a < s.aux.size(); ++a) {
      WarpResult<double> wr = synthesize_view(s.aux[a], s.depth, s.poses[a], ds.camera);
      T ph = photometric_map(s.clear, wr.image, w);
      // the warp reproduces the target wherever the surface is visible in
      // both views; occluded pixels sample unrelated content by construction
      T vis = visibility_mask(s, a, ds.camera, wr.mask);
      T err = masked_mean(ph, vis);
      CHECK(err.item() < 0.01);
      // the oracle must not be vacuous and the warp must cover most pixels
      CHECK(vis.array().mean() > 0.5);
      CHECK(wr.mask.array().mean() > 0.8);
    }
  }
}

TEST_CASE("corruptions are identity at level zero and deterministic per seed") {
  Dataset ds = generate_dataset(small_opts());
  const Sample& s = ds.samples[0];

  CorruptionSpec none;
  none.kind = "gaussian_noise";
  none.level = 0;
  CHECK(tensors_equal(apply_corruption(s.clear, none), s.clear));
  none.kind = "none";
  none.level = 3;
  CHECK(tensors_equal(apply_corruption(s.clear, none), s.clear));

  for (const auto& kind : corruption_kinds()) {
    CorruptionSpec c;
    c.kind = kind;
    c.level = 3;
    c.seed = 99;
    T once = apply_corruption(s.clear, c, &s.depth);
    T twice = apply_corruption(s.clear, c, &s.depth);
    CHECK(tensors_equal(once, twice));
    bool changed = false;
    for (std::int64_t i = 0; i < once.size() && !changed; ++i)
      changed = once.data()[i] != s.clear.data()[i];
    CHECK(changed);
    for (std::int64_t i = 0; i < once.size(); ++i) {
      CHECK(once.data()[i] >= 0.0);
      CHECK(once.data()[i] <= 1.0);
    }
  }

  CorruptionSpec bad;
  bad.kind = "sandstorm";
  bad.level = 2;
  CHECK_THROWS_AS(apply_corruption(s.clear, bad), std::invalid_argument);
  bad.kind = "blur";
  bad.level = 6;
  CHECK_THROWS_AS(apply_corruption(s.clear, bad), std::invalid_argument);
  bad.level = -1;
  CHECK_THROWS_AS(apply_corruption(s.clear, bad), std::invalid_argument);
  CorruptionSpec fog;
  fog.kind = "fog";
  fog.level = 2;
  CHECK_THROWS_AS(apply_corruption(s.clear, fog), std::invalid_argument);  // needs depth
}

TEST_CASE("gaussian noise replays the seeded draw at the first pixel") {
  T img = T::full({3, 4, 4}, 0.5);
  CorruptionSpec c;
  c.kind = "gaussian_noise";
  c.level = 3;  // sigma 0.07
  c.seed = 1234;
  T out = apply_corruption(img, c);
  Rng replay(1234);
  const double expect = std::clamp(0.5 + 0.07 * replay.normal(), 0.0, 1.0);
  CHECK(out.data()[0] == doctest::Approx(expect).epsilon(1e-15));
}

TEST_CASE("fog follows the depth-aware attenuation model") {
  // I' = I t + A (1-t), t = exp(-k depth), A = 0.82, level 3 -> k = 0.16
  T img = T::full({3, 2, 2}, 0.25);
  T depth = T::from_vector({1, 2, 2}, {1.0, 5.0, 10.0, 40.0});
  CorruptionSpec c;
  c.kind = "fog";
  c.level = 3;
  T out = apply_corruption(img, c, &depth);
  for (int i = 0; i < 4; ++i) {
    const double t = std::exp(-0.16 * depth.data()[i]);
    CHECK(out.data()[i] == doctest::Approx(0.25 * t + 0.82 * (1.0 - t)).epsilon(1e-14));
  }
  // deeper pixels drift toward the airlight; heavier fog gets closer still
  CHECK(std::abs(out.data()[3] - 0.82) < std::abs(out.data()[0] - 0.82));
  c.level = 5;
  T heavy = apply_corruption(img, c, &depth);
  CHECK(std::abs(heavy.data()[1] - 0.82) < std::abs(out.data()[1] - 0.82));
}

TEST_CASE("blur preserves constant images and smooths textured ones") {
  T flat = T::full({3, 8, 8}, 0.37);
  CorruptionSpec c;
  c.kind = "blur";
  c.level = 4;
  T out = apply_corruption(flat, c);
  for (std::int64_t i = 0; i < out.size(); ++i)
    CHECK(out.data()[i] == doctest::Approx(0.37).epsilon(1e-12));

  Rng rng(5);
  T tex = T::rand_uniform({3, 16, 16}, rng, 0.0, 1.0);
  T blurred = apply_corruption(tex, c);
  const double var_before = (tex.array() - tex.array().mean()).square().mean();
  const double var_after = (blurred.array() - blurred.array().mean()).square().mean();
  CHECK(var_after < 0.5 * var_before);
}

TEST_CASE("dataset round-trips through disk bitwise") {
  namespace fs = std::filesystem;
  const std::string dir = "synth_roundtrip_ds";
  fs::remove_all(dir);
  Dataset ds = generate_dataset(small_opts());
  save_dataset(ds, dir);
  Dataset back = load_dataset(dir);

  CHECK(back.camera.fx == ds.camera.fx);
  CHECK(back.camera.width == ds.camera.width);
  CHECK(back.d_max == ds.d_max);
  CHECK(back.aux_count == ds.aux_count);
  CHECK(back.seed == ds.seed);
  REQUIRE(back.samples.size() == ds.samples.size());
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    const Sample& a = ds.samples[i];
    const Sample& b = back.samples[i];
    CHECK(a.split == b.split);
    CHECK(a.seed == b.seed);
    CHECK(a.corruption.kind == b.corruption.kind);
    CHECK(a.corruption.level == b.corruption.level);
    CHECK(a.corruption.seed == b.corruption.seed);
    CHECK(tensors_equal(a.clear, b.clear));
    CHECK(tensors_equal(a.aug, b.aug));
    CHECK(tensors_equal(a.depth, b.depth));
    REQUIRE(b.aux.size() == a.aux.size());
    for (std::size_t k = 0; k < a.aux.size(); ++k) {
      CHECK(tensors_equal(a.aux[k], b.aux[k]));
      CHECK(tensors_equal(a.aux_depth[k], b.aux_depth[k]));
      CHECK((a.poses[k].rotation - b.poses[k].rotation).cwiseAbs().maxCoeff() == 0.0);
      CHECK((a.poses[k].translation - b.poses[k].translation).cwiseAbs().maxCoeff() == 0.0);
    }
  }
  fs::remove_all(dir);
}

TEST_CASE("loading reports which piece of a broken dataset failed") {
  namespace fs = std::filesystem;
  const std::string dir = "synth_broken_ds";
  fs::remove_all(dir);
  GenerateOptions o = small_opts();
  o.train_count = 2;
  o.val_count = 1;
  o.test_count = 1;
  Dataset ds = generate_dataset(o);
  save_dataset(ds, dir);

  fs::remove(fs::path(dir) / "depth" / "s0001.bin");
  try {
    load_dataset(dir);
    FAIL("expected a missing-file error");
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()).find("s0001") != std::string::npos);
  }

  // malformed manifest
  {
    std::ofstream os(fs::path(dir) / "manifest.json", std::ios::trunc);
    os << "{ not json";
  }
  CHECK_THROWS_AS(load_dataset(dir), std::runtime_error);
  fs::remove_all(dir);
  CHECK_THROWS_AS(load_dataset(dir), std::runtime_error);  // missing entirely
}

TEST_CASE("ppm image files round-trip 8-bit data exactly") {
  Rng rng(3);
  T img = T::rand_uniform({3, 6, 5}, rng, 0.0, 1.0);
  for (std::int64_t i = 0; i < img.size(); ++i)
    img.data()[i] = std::round(img.data()[i] * 255.0) / 255.0;
  const std::string path = "roundtrip_test.ppm";
  write_ppm(path, img);
  T back = read_ppm(path);
  REQUIRE(back.shape() == img.shape());
  for (std::int64_t i = 0; i < img.size(); ++i) CHECK(back.data()[i] == img.data()[i]);
  std::remove(path.c_str());
}
