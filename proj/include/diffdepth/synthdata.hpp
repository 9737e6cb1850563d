#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "diffdepth/geometry.hpp"
#include "diffdepth/tensor.hpp"

// Procedural multi-view depth data: ray-cast scenes (tilted ground plane,
// back wall, a handful of boxes) with smooth value-noise textures, exact
// analytic depth, and known camera motion between the target view and a few
// auxiliary views. Photometric corruptions are applied to the target RGB
// only - depth, poses, and auxiliary views always stay clean.

namespace diffdepth {

struct CorruptionSpec {
  std::string kind = "none";  // none|gaussian_noise|blur|brightness_contrast|rain_streaks|fog
  int level = 0;              // 0 = identity, 1..5 increasing severity
  std::uint64_t seed = 0;
};

/// Names of all non-identity corruption kinds, in canonical order.
const std::vector<std::string>& corruption_kinds();

/// Applies a corruption to an RGB image [3,H,W] in [0,1]. Level 0 (or kind
/// "none") returns the image unchanged. Fog attenuates by true depth and
/// therefore requires it; other kinds ignore the depth argument.
Tensor<double> apply_corruption(const Tensor<double>& image, const CorruptionSpec& c,
                                const Tensor<double>* depth = nullptr);

struct Sample {
  int index = 0;
  std::string split;  // train|val|test
  std::uint64_t seed = 0;
  CorruptionSpec corruption;
  Tensor<double> clear;                 // [3,H,W] target view
  Tensor<double> aug;                   // corrupted target view
  std::vector<Tensor<double>> aux;      // clean auxiliary views
  std::vector<Pose> poses;              // target-camera -> aux-camera transforms
  Tensor<double> depth;                 // [1,H,W] target ground truth, scene units
  std::vector<Tensor<double>> aux_depth;
};

struct Dataset {
  CameraIntrinsics camera;
  double d_max = 10.0;
  int aux_count = 2;
  std::uint64_t seed = 0;
  std::vector<Sample> samples;

  std::vector<const Sample*> split(const std::string& name) const;
};

struct CorruptionMix {
  std::vector<std::string> kinds = corruption_kinds();
  int level_lo = 2;
  int level_hi = 4;
};

struct GenerateOptions {
  int train_count = 64;
  int val_count = 16;
  int test_count = 16;
  int width = 64;
  int height = 64;
  double d_max = 10.0;
  int aux_count = 2;
  std::uint64_t seed = 7;
  CorruptionMix mix;
};

/// Deterministic in all inputs; images are quantized to 8 bits at creation
/// so the in-memory dataset is bitwise identical to a saved-and-reloaded one.
Dataset generate_dataset(const GenerateOptions& opts);

void save_dataset(const Dataset& ds, const std::string& dir);
Dataset load_dataset(const std::string& dir);

/// Marks target pixels of sample `s` whose surface point is actually visible
/// in auxiliary view `a`: the point's depth in the aux camera must agree with
/// the aux view's own rendered depth at the projected location (within
/// `rel_tol`, relative). Pixels occluded in the aux view sample unrelated
/// content under the warp and carry no consistency information. The result is
/// intersected with `warp_mask` and eroded by `erode_radius` so that neither
/// the bilinear taps nor the SSIM window of a kept pixel touch an excluded
/// one. Used by the render-warp consistency oracle; training never sees it
/// (it would leak ground-truth geometry).
Tensor<double> visibility_mask(const Sample& s, std::size_t a, const CameraIntrinsics& K,
                               const Tensor<double>& warp_mask, double rel_tol = 0.01,
                               int erode_radius = 2);

}  // namespace diffdepth
