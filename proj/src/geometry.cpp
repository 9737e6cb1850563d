#include "diffdepth/geometry.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace diffdepth {

void CameraIntrinsics::validate() const {
  if (!(fx > 0) || !(fy > 0)) throw std::invalid_argument("camera: focal lengths must be positive");
  if (width < 2 || height < 2) throw std::invalid_argument("camera: image must be at least 2x2");
  if (!std::isfinite(cx) || !std::isfinite(cy)) throw std::invalid_argument("camera: non-finite principal point");
}

void Pose::validate(double tol) const {
  const Eigen::Matrix3d err = rotation.transpose() * rotation - Eigen::Matrix3d::Identity();
  const double dev = err.cwiseAbs().maxCoeff();
  if (dev > tol)
    throw std::invalid_argument("pose: rotation is not orthonormal (deviation " + std::to_string(dev) + ")");
  if (std::abs(rotation.determinant() - 1.0) > 1e-6)
    throw std::invalid_argument("pose: rotation determinant is not +1");
  if (!translation.allFinite()) throw std::invalid_argument("pose: non-finite translation");
}

Pose Pose::inverse() const {
  Pose inv;
  inv.rotation = rotation.transpose();
  inv.translation = -(rotation.transpose() * translation);
  return inv;
}

Pose Pose::compose(const Pose& other) const {
  Pose out;
  out.rotation = rotation * other.rotation;
  out.translation = rotation * other.translation + translation;
  return out;
}

Eigen::Matrix3d rotation_xyz(double rx, double ry, double rz) {
  Eigen::Matrix3d Rx, Ry, Rz;
  Rx << 1, 0, 0, 0, std::cos(rx), -std::sin(rx), 0, std::sin(rx), std::cos(rx);
  Ry << std::cos(ry), 0, std::sin(ry), 0, 1, 0, -std::sin(ry), 0, std::cos(ry);
  Rz << std::cos(rz), -std::sin(rz), 0, std::sin(rz), std::cos(rz), 0, 0, 0, 1;
  return Rz * Ry * Rx;
}

}  // namespace diffdepth
