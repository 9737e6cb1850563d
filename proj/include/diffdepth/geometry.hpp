#pragma once

#include <Eigen/Dense>

#include "diffdepth/tensor.hpp"
#include "diffdepth/tensor_ops.hpp"

// Pinhole camera model and differentiable view synthesis. The warp is built
// from tensor primitives, so gradients flow through depth into sampling
// coordinates and on into the photometric losses.

namespace diffdepth {

struct CameraIntrinsics {
  double fx = 0, fy = 0, cx = 0, cy = 0;
  int width = 0, height = 0;

  void validate() const;
};

/// Rigid transform p' = R p + t.
struct Pose {
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();

  static Pose identity() { return {}; }

  /// Checks orthonormality (||R^T R - I||_inf <= tol) and det = +1.
  void validate(double tol = 1e-9) const;

  Pose inverse() const;

  /// Composition (this after other): maps p to R*(R_o p + t_o) + t.
  Pose compose(const Pose& other) const;

  Eigen::Vector3d apply(const Eigen::Vector3d& p) const { return rotation * p + translation; }
};

/// Small-angle rotation from XYZ Euler angles (radians), R = Rz * Ry * Rx.
Eigen::Matrix3d rotation_xyz(double rx, double ry, double rz);

/// Lifts a depth map [1,H,W] (camera z-depth, scene units) to camera-space
/// points [3,H,W]. Pixel (x,y) maps to depth * ((x-cx)/fx, (y-cy)/fy, 1).
/// In strict mode nonpositive depth throws; otherwise depth is clamped to
/// 1e-4 scene units before use.
template <typename S>
Tensor<S> backproject(const Tensor<S>& depth, const CameraIntrinsics& K, bool strict = false) {
  detail::require_chw("backproject", depth);
  if (depth.dim(0) != 1 || depth.dim(1) != K.height || depth.dim(2) != K.width)
    throw ShapeError("backproject", "depth " + shape_str(depth.shape()) + " vs camera " +
                                        std::to_string(K.width) + "x" + std::to_string(K.height));
  if (strict && (depth.array() <= S(0)).any())
    throw std::runtime_error("backproject: nonpositive depth in strict mode");
  const int h = K.height, w = K.width;
  Tensor<S> gx = Tensor<S>::zeros({1, h, w});
  Tensor<S> gy = Tensor<S>::zeros({1, h, w});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      gx.data()[y * w + x] = static_cast<S>((x - K.cx) / K.fx);
      gy.data()[y * w + x] = static_cast<S>((y - K.cy) / K.fy);
    }
  Tensor<S> d = clamp_min(depth, S(1e-4));
  return concat_channels<S>({mul(d, gx), mul(d, gy), d});
}

template <typename S>
struct ProjectResult {
  Tensor<S> coords;      ///< [2,H,W] pixel coordinates in the target camera
  Tensor<S> front_mask;  ///< [1,H,W] graph-free; 1 where the point lands in front
};

/// Applies a rigid transform to camera points [3,H,W] and projects through K.
/// Points behind the camera are flagged in the mask; their Z is clamped to
/// 1e-4 before the division so coordinates stay finite.
template <typename S>
ProjectResult<S> project(const Tensor<S>& points, const Pose& pose, const CameraIntrinsics& K) {
  detail::require_chw("project", points);
  if (points.dim(0) != 3) throw ShapeError("project", "expected [3,H,W], got " + shape_str(points.shape()));
  const auto& R = pose.rotation;
  const auto& t = pose.translation;
  Tensor<S> X = slice_channels(points, 0, 1);
  Tensor<S> Y = slice_channels(points, 1, 1);
  Tensor<S> Z = slice_channels(points, 2, 1);
  auto row = [&](int r) {
    return scalar_add(
        add(add(scalar_mul(X, static_cast<S>(R(r, 0))), scalar_mul(Y, static_cast<S>(R(r, 1)))),
            scalar_mul(Z, static_cast<S>(R(r, 2)))),
        static_cast<S>(t(r)));
  };
  Tensor<S> Xa = row(0);
  Tensor<S> Ya = row(1);
  Tensor<S> Za = row(2);
  Tensor<S> front = gt_mask(Za, S(0));
  Tensor<S> Zs = clamp_min(Za, S(1e-4));
  Tensor<S> u = scalar_add(scalar_mul(div(Xa, Zs), static_cast<S>(K.fx)), static_cast<S>(K.cx));
  Tensor<S> v = scalar_add(scalar_mul(div(Ya, Zs), static_cast<S>(K.fy)), static_cast<S>(K.cy));
  return {concat_channels<S>({u, v}), front};
}

template <typename S>
struct WarpResult {
  Tensor<S> image;  ///< [C,H,W] source resampled into the target view
  Tensor<S> mask;   ///< [1,H,W] graph-free validity (in front and in bounds)
};

/// Resamples `source` (the other view's image) into the camera that produced
/// `depth`. `pose` maps points from the depth camera into the source camera.
/// Differentiable in depth and in the source image.
template <typename S>
WarpResult<S> synthesize_view(const Tensor<S>& source, const Tensor<S>& depth, const Pose& pose,
                              const CameraIntrinsics& K, bool strict = false) {
  detail::require_chw("synthesize_view", source);
  Tensor<S> points = backproject(depth, K, strict);
  ProjectResult<S> proj = project(points, pose, K);
  SampleResult<S> sampled = bilinear_sample(source, proj.coords);
  Tensor<S> mask = Tensor<S>::zeros(sampled.mask.shape());
  mask.array() = sampled.mask.array() * proj.front_mask.array();
  return {sampled.value, mask};
}

}  // namespace diffdepth
