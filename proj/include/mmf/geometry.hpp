#pragma once

#include <Eigen/Dense>
#include <string>
#include <vector>

#include "mmf/errors.hpp"
#include "mmf/grid.hpp"

namespace mmf {

/// Pinhole camera model. Loaded from a one-line text file `fx fy cx cy width height`.
struct CameraIntrinsics {
  double fx = 0, fy = 0, cx = 0, cy = 0;
  int width = 0, height = 0;
};

CameraIntrinsics load_intrinsics(const std::string& path);
void save_intrinsics(const std::string& path, const CameraIntrinsics& K);

/// Rigid-body transform in SE(3), stored as rotation matrix + translation.
/// Quaternions only appear at the trajectory I/O boundary.
class Pose {
 public:
  Pose() : R_(Eigen::Matrix3d::Identity()), t_(Eigen::Vector3d::Zero()) {}
  Pose(const Eigen::Matrix3d& R, const Eigen::Vector3d& t) : R_(R), t_(t) {}

  static Pose from_quaternion(double qx, double qy, double qz, double qw,
                              const Eigen::Vector3d& t);

  const Eigen::Matrix3d& rotation() const { return R_; }
  const Eigen::Vector3d& translation() const { return t_; }

  /// Scalar-last (x, y, z, w) quaternion with w >= 0 for deterministic output.
  Eigen::Vector4d quaternion_xyzw() const;

  Eigen::Vector3d apply(const Eigen::Vector3d& p) const { return R_ * p + t_; }
  /// Rotates a direction vector (no translation); normals live here.
  Eigen::Vector3d rotate(const Eigen::Vector3d& d) const { return R_ * d; }

  /// this ∘ other: (a.compose(b)).apply(p) == a.apply(b.apply(p)).
  Pose compose(const Pose& other) const {
    return Pose(R_ * other.R_, R_ * other.t_ + t_);
  }
  Pose inverse() const {
    Eigen::Matrix3d Rt = R_.transpose();
    return Pose(Rt, -(Rt * t_));
  }

  /// Projects the rotation block back onto SO(3); used to stop numeric drift
  /// along long composition chains.
  Pose orthonormalized() const;

  Eigen::Matrix4d matrix() const;

  /// Rotation angle (radians) — geodesic distance of R_ from identity.
  double rotation_angle() const;

 private:
  Eigen::Matrix3d R_;
  Eigen::Vector3d t_;
};

/// se(3) tangent vector, ordered [translational v; rotational w].
using Twist = Eigen::Matrix<double, 6, 1>;

/// Exact exponential map se(3) -> SE(3).
Pose se3_exp(const Twist& xi);
/// Logarithm map SE(3) -> se(3); inverse of se3_exp.
Twist se3_log(const Pose& T);

/// Skew-symmetric cross-product matrix of w.
Eigen::Matrix3d skew(const Eigen::Vector3d& w);

/// Pinhole projection to pixel coordinates. Throws NonPositiveDepth if p.z() <= 0.
Eigen::Vector2d project(const CameraIntrinsics& K, const Eigen::Vector3d& p);

/// Ray through pixel (u, v) scaled to depth z (meters). Throws InvalidDepth
/// if z is not a positive finite number.
Eigen::Vector3d backproject(const CameraIntrinsics& K, double u, double v, double z);

/// Depth measurement image in meters; 0 / NaN / negative entries are invalid.
struct DepthImage {
  Grid<float> values;
  double timestamp = 0;
};

bool depth_valid(float z);

/// Maps pixel (u, v) with depth z through the rigid transform T into another
/// view with the same intrinsics: project(K, T * backproject(K, u, v, z)).
Eigen::Vector2d warp(const CameraIntrinsics& K, double u, double v, double z,
                     const Pose& T);

/// One line of a TUM-format trajectory.
struct TimedPose {
  double timestamp = 0;
  Pose pose;
};

/// TUM trajectory I/O: `timestamp tx ty tz qx qy qz qw`, '#' comments skipped.
std::vector<TimedPose> load_tum_trajectory(const std::string& path);
void save_tum_trajectory(const std::string& path, const std::vector<TimedPose>& traj);

/// Formats one TUM line (no trailing newline); shared by trajectory and grasp export.
std::string format_tum_line(double timestamp, const Pose& pose);

}  // namespace mmf
