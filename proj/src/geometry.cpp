#include "mmf/geometry.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace mmf {

CameraIntrinsics load_intrinsics(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw MalformedFile("cannot open intrinsics file: " + path);
  CameraIntrinsics K;
  if (!(in >> K.fx >> K.fy >> K.cx >> K.cy >> K.width >> K.height))
    throw MalformedFile("intrinsics file must contain 'fx fy cx cy width height': " + path);
  if (K.fx <= 0 || K.fy <= 0 || K.width <= 0 || K.height <= 0)
    throw MalformedFile("intrinsics values out of range: " + path);
  return K;
}

void save_intrinsics(const std::string& path, const CameraIntrinsics& K) {
  std::ofstream out(path);
  if (!out) throw MalformedFile("cannot write intrinsics file: " + path);
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%.9f %.9f %.9f %.9f %d %d\n", K.fx, K.fy, K.cx,
                K.cy, K.width, K.height);
  out << buf;
}

Pose Pose::from_quaternion(double qx, double qy, double qz, double qw,
                           const Eigen::Vector3d& t) {
  Eigen::Quaterniond q(qw, qx, qy, qz);
  q.normalize();
  return Pose(q.toRotationMatrix(), t);
}

Eigen::Vector4d Pose::quaternion_xyzw() const {
  Eigen::Quaterniond q(R_);
  q.normalize();
  if (q.w() < 0) q.coeffs() = -q.coeffs();
  return Eigen::Vector4d(q.x(), q.y(), q.z(), q.w());
}

Pose Pose::orthonormalized() const {
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(R_, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Eigen::Matrix3d R = svd.matrixU() * svd.matrixV().transpose();
  if (R.determinant() < 0) {
    Eigen::Matrix3d flip = Eigen::Matrix3d::Identity();
    flip(2, 2) = -1;
    R = svd.matrixU() * flip * svd.matrixV().transpose();
  }
  return Pose(R, t_);
}

Eigen::Matrix4d Pose::matrix() const {
  Eigen::Matrix4d M = Eigen::Matrix4d::Identity();
  M.topLeftCorner<3, 3>() = R_;
  M.topRightCorner<3, 1>() = t_;
  return M;
}

double Pose::rotation_angle() const {
  // atan2 of the quaternion halves is well conditioned near 0 and pi,
  // unlike acos of the trace.
  Eigen::Quaterniond q(R_);
  return 2.0 * std::atan2(q.vec().norm(), std::abs(q.w()));
}

Eigen::Matrix3d skew(const Eigen::Vector3d& w) {
  Eigen::Matrix3d S;
  S << 0, -w.z(), w.y(), w.z(), 0, -w.x(), -w.y(), w.x(), 0;
  return S;
}

Pose se3_exp(const Twist& xi) {
  const Eigen::Vector3d v = xi.head<3>();
  const Eigen::Vector3d w = xi.tail<3>();
  const double theta = w.norm();
  const Eigen::Matrix3d W = skew(w);
  Eigen::Matrix3d R, V;
  if (theta < 1e-9) {
    // Second-order Taylor expansion; adequate far below the branch threshold.
    R = Eigen::Matrix3d::Identity() + W + 0.5 * W * W;
    V = Eigen::Matrix3d::Identity() + 0.5 * W + (1.0 / 6.0) * W * W;
  } else {
    const double t2 = theta * theta;
    const double a = std::sin(theta) / theta;
    const double b = (1.0 - std::cos(theta)) / t2;
    const double c = (theta - std::sin(theta)) / (t2 * theta);
    R = Eigen::Matrix3d::Identity() + a * W + b * W * W;
    V = Eigen::Matrix3d::Identity() + b * W + c * W * W;
  }
  return Pose(R, V * v);
}

Twist se3_log(const Pose& T) {
  const Eigen::Matrix3d& R = T.rotation();
  double c = std::clamp((R.trace() - 1.0) * 0.5, -1.0, 1.0);
  const double theta = std::acos(c);
  Eigen::Vector3d w;
  if (theta < 1e-9) {
    w = 0.5 * Eigen::Vector3d(R(2, 1) - R(1, 2), R(0, 2) - R(2, 0), R(1, 0) - R(0, 1));
  } else if (theta > M_PI - 1e-6) {
    // Near pi the antisymmetric part vanishes; recover the axis from the
    // dominant diagonal of (R + I) / 2 = axis * axis^T at exactly pi.
    Eigen::Matrix3d A = 0.5 * (R + Eigen::Matrix3d::Identity());
    int k = 0;
    A.diagonal().maxCoeff(&k);
    Eigen::Vector3d axis = A.col(k) / std::sqrt(std::max(A(k, k), 1e-16));
    axis.normalize();
    // Fix the sign using the antisymmetric remainder (may be tiny but its
    // sign survives); fall back to a canonical choice at exactly pi.
    Eigen::Vector3d s(R(2, 1) - R(1, 2), R(0, 2) - R(2, 0), R(1, 0) - R(0, 1));
    if (s.dot(axis) < 0) axis = -axis;
    w = theta * axis;
  } else {
    w = theta / (2.0 * std::sin(theta)) *
        Eigen::Vector3d(R(2, 1) - R(1, 2), R(0, 2) - R(2, 0), R(1, 0) - R(0, 1));
  }
  const double t2 = theta * theta;
  const Eigen::Matrix3d W = skew(w);
  Eigen::Matrix3d Vinv;
  if (theta < 1e-9) {
    Vinv = Eigen::Matrix3d::Identity() - 0.5 * W + (1.0 / 12.0) * W * W;
  } else {
    const double half = 0.5 * theta;
    const double cot = 1.0 / std::tan(half);
    Vinv = Eigen::Matrix3d::Identity() - 0.5 * W +
           (1.0 / t2) * (1.0 - half * cot) * W * W;
  }
  Twist xi;
  xi.head<3>() = Vinv * T.translation();
  xi.tail<3>() = w;
  return xi;
}

Eigen::Vector2d project(const CameraIntrinsics& K, const Eigen::Vector3d& p) {
  if (!(p.z() > 0)) throw NonPositiveDepth();
  return Eigen::Vector2d(K.fx * p.x() / p.z() + K.cx, K.fy * p.y() / p.z() + K.cy);
}

Eigen::Vector3d backproject(const CameraIntrinsics& K, double u, double v, double z) {
  if (!(z > 0) || !std::isfinite(z)) throw InvalidDepth();
  return Eigen::Vector3d((u - K.cx) / K.fx * z, (v - K.cy) / K.fy * z, z);
}

bool depth_valid(float z) { return std::isfinite(z) && z > 0.0f; }

Eigen::Vector2d warp(const CameraIntrinsics& K, double u, double v, double z,
                     const Pose& T) {
  return project(K, T.apply(backproject(K, u, v, z)));
}

std::string format_tum_line(double timestamp, const Pose& pose) {
  const Eigen::Vector3d& t = pose.translation();
  Eigen::Vector4d q = pose.quaternion_xyzw();
  char buf[320];
  std::snprintf(buf, sizeof(buf), "%.6f %.12f %.12f %.12f %.12f %.12f %.12f %.12f",
                timestamp, t.x(), t.y(), t.z(), q(0), q(1), q(2), q(3));
  return std::string(buf);
}

std::vector<TimedPose> load_tum_trajectory(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw MalformedFile("cannot open trajectory file: " + path);
  std::vector<TimedPose> traj;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ss(line);
    double ts, tx, ty, tz, qx, qy, qz, qw;
    if (!(ss >> ts >> tx >> ty >> tz >> qx >> qy >> qz >> qw))
      throw MalformedFile("bad trajectory line in " + path + ": " + line);
    traj.push_back({ts, Pose::from_quaternion(qx, qy, qz, qw, {tx, ty, tz})});
  }
  return traj;
}

void save_tum_trajectory(const std::string& path, const std::vector<TimedPose>& traj) {
  std::ofstream out(path);
  if (!out) throw MalformedFile("cannot write trajectory file: " + path);
  for (const TimedPose& tp : traj) out << format_tum_line(tp.timestamp, tp.pose) << "\n";
}

}  // namespace mmf
