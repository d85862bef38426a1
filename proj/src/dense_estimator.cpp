#include "mmf/dense_estimator.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "mmf/errors.hpp"

namespace mmf {
namespace {

// Huber cost and its IRLS weight; delta == 0 turns robustness off.
double robust_cost(double r, double delta) {
  if (delta <= 0) return r * r;
  double a = std::abs(r);
  return a <= delta ? r * r : delta * (2 * a - delta);
}

double robust_weight(double r, double delta) {
  if (delta <= 0) return 1.0;
  double a = std::abs(r);
  return a <= delta ? 1.0 : delta / a;
}

double mean_cost_at(const std::vector<IcpCorrespondence>& corrs, const Pose& step,
                    double delta) {
  double sum = 0;
  for (const IcpCorrespondence& c : corrs)
    sum += robust_cost(c.normal.dot(step.apply(c.point_camera) - c.target), delta);
  return sum / static_cast<double>(corrs.size());
}

}  // namespace

double icp_residual(const Pose& X, const Eigen::Vector3d& p_model,
                    const Eigen::Vector3d& q, const Eigen::Vector3d& n) {
  return n.dot(X.apply(p_model) - q);
}

Twist icp_residual_jacobian(const Pose& X, const Eigen::Vector3d& p_model,
                            const Eigen::Vector3d& n) {
  Twist J;
  J.head<3>() = n;
  J.tail<3>() = X.apply(p_model).cross(n);
  return J;
}

FramePair downsample_frame(const FramePair& frame) {
  FramePair out;
  const int w = frame.width() / 2;
  const int h = frame.height() / 2;
  out.intensity = Grid<float>(w, h, 0.0f);
  out.depth.values = Grid<float>(w, h, 0.0f);
  out.depth.timestamp = frame.depth.timestamp;
  out.timestamp = frame.timestamp;
  out.index = frame.index;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      out.intensity.at(x, y) = frame.intensity.at(2 * x, 2 * y);
      out.depth.values.at(x, y) = frame.depth.values.at(2 * x, 2 * y);
    }
  out.intrinsics = frame.intrinsics;
  out.intrinsics.fx /= 2;
  out.intrinsics.fy /= 2;
  out.intrinsics.cx /= 2;
  out.intrinsics.cy /= 2;
  out.intrinsics.width = w;
  out.intrinsics.height = h;
  return out;
}

std::vector<IcpCorrespondence> projective_associate(
    const PointCloud& cloud, const Pose& X, const FramePair& frame,
    const Grid<Eigen::Vector3f>& normals, const IcpParams& params, int stride) {
  if (!normals.same_size(frame.depth.values))
    throw DimensionMismatch("normal grid does not match the frame");
  if (stride < 1) stride = 1;
  const CameraIntrinsics& K = frame.intrinsics;
  const double cos_max = std::cos(params.max_normal_angle_deg * M_PI / 180.0);
  std::vector<IcpCorrespondence> corrs;
  corrs.reserve(cloud.size() / static_cast<size_t>(stride) + 1);
  for (size_t i = 0; i < cloud.size(); i += static_cast<size_t>(stride)) {
    const CloudPoint& pt = cloud.points[i];
    Eigen::Vector3d p_cam = X.apply(pt.position);
    if (p_cam.z() <= 0) continue;
    double u = K.fx * p_cam.x() / p_cam.z() + K.cx;
    double v = K.fy * p_cam.y() / p_cam.z() + K.cy;
    int xi = static_cast<int>(std::lround(u));
    int yi = static_cast<int>(std::lround(v));
    if (!frame.depth.values.in_bounds(xi, yi)) continue;
    float d = frame.depth.values.at(xi, yi);
    if (!depth_valid(d)) continue;
    Eigen::Vector3d q = backproject(K, xi, yi, d);
    if ((p_cam - q).norm() > params.max_correspondence_dist) continue;
    // keep surfaces that still face the camera under the current estimate
    Eigen::Vector3d n_model = X.rotate(pt.normal);
    if (-n_model.dot(q.normalized()) < cos_max) continue;
    Eigen::Vector3f nf = normals.at(xi, yi);
    if (!nf.allFinite()) continue;
    Eigen::Vector3d n_target = nf.cast<double>();
    // cull cross-surface matches (e.g. one face of a box against an
    // adjacent face); these dominate near edges at coarse resolutions
    if (n_model.dot(n_target) < cos_max) continue;
    IcpCorrespondence c;
    c.point_camera = p_cam;
    c.target = q;
    c.normal = n_target;
    c.pixel_x = xi;
    c.pixel_y = yi;
    c.residual = c.normal.dot(p_cam - q);
    corrs.push_back(c);
  }
  return corrs;
}

Pose compose_final(const Pose& initial, const Pose& icp_increment) {
  return initial.compose(icp_increment);
}

IcpResult icp_refine(const PointCloud& cloud, const Pose& initial,
                     const FramePair& frame, const IcpParams& params) {
  if (cloud.empty()) throw EmptyInput("icp needs a non-empty cloud");

  int levels = std::max(1, params.pyramid_levels);
  if (static_cast<int>(cloud.size()) < params.small_cloud_points) levels = 1;
  const int base_stride = std::max(
      1, static_cast<int>((cloud.size() + params.max_points - 1) / params.max_points));

  // pyramid[0] is the input frame; coarser levels own their storage
  std::vector<FramePair> coarse;
  coarse.reserve(levels);  // pyramid keeps pointers into this
  std::vector<const FramePair*> pyramid(levels);
  pyramid[0] = &frame;
  for (int l = 1; l < levels; ++l) {
    coarse.push_back(downsample_frame(*pyramid[l - 1]));
    pyramid[l] = &coarse.back();
  }

  IcpResult result;
  Pose X = initial;
  bool associated_anywhere = false;
  for (int level = levels - 1; level >= 0; --level) {
    const FramePair& fl = *pyramid[level];
    Grid<Eigen::Vector3f> normals = compute_normals(fl);
    const int stride = base_stride * (1 << level);
    bool level_converged = false;
    for (int iter = 0; iter < params.max_iterations; ++iter) {
      auto corrs = projective_associate(cloud, X, fl, normals, params, stride);
      if (corrs.empty()) break;
      associated_anywhere = true;

      Eigen::Matrix<double, 6, 6> H = Eigen::Matrix<double, 6, 6>::Zero();
      Twist g = Twist::Zero();
      double cost_before = 0;
      for (const IcpCorrespondence& c : corrs) {
        Twist J;
        J.head<3>() = c.normal;
        J.tail<3>() = c.point_camera.cross(c.normal);
        double w = robust_weight(c.residual, params.huber_delta);
        H += w * J * J.transpose();
        g += (w * c.residual) * J;
        cost_before += robust_cost(c.residual, params.huber_delta);
      }
      cost_before /= static_cast<double>(corrs.size());

      // pseudo-inverse tolerates rank deficiency (e.g. a single plane in view)
      Eigen::JacobiSVD<Eigen::Matrix<double, 6, 6>> svd(
          H, Eigen::ComputeFullU | Eigen::ComputeFullV);
      const auto& sv = svd.singularValues();
      double tol = sv(0) * 1e-10;
      Eigen::Matrix<double, 6, 1> inv_sv;
      for (int i = 0; i < 6; ++i) inv_sv(i) = sv(i) > tol ? 1.0 / sv(i) : 0.0;
      Twist delta = -(svd.matrixV() * inv_sv.asDiagonal() * svd.matrixU().transpose() * g);
      if (!delta.allFinite()) break;

      // backtracking line search; the cost at fixed associations cannot go up
      double alpha = 1.0;
      double step_norm = 0;
      double cost_after = cost_before;
      for (int halving = 0; halving <= 10; ++halving) {
        Pose step = se3_exp(alpha * delta);
        double cost = mean_cost_at(corrs, step, params.huber_delta);
        if (cost <= cost_before + 1e-15) {
          X = step.compose(X);
          step_norm = alpha * delta.norm();
          cost_after = cost;
          break;
        }
        alpha /= 2;  // all halvings exhausted -> zero step, cost unchanged
      }

      ++result.iterations;
      result.iteration_stats.push_back({level, cost_before, cost_after, step_norm});
      if (step_norm < params.convergence_eps) {
        level_converged = true;
        break;
      }
    }
    if (level == 0) result.converged = level_converged;
  }

  // final pass on the finest level for diagnostics and the residual image
  Grid<Eigen::Vector3f> normals = compute_normals(frame);
  auto corrs = projective_associate(cloud, X, frame, normals, params, base_stride);
  if (corrs.empty() && !associated_anywhere)
    throw NoAssociations("icp never associated any point");
  result.correspondences = static_cast<int>(corrs.size());
  const float nan = std::numeric_limits<float>::quiet_NaN();
  result.per_pixel_residual = Grid<float>(frame.width(), frame.height(), nan);
  double sq_sum = 0;
  for (const IcpCorrespondence& c : corrs) {
    sq_sum += c.residual * c.residual;
    float a = static_cast<float>(std::abs(c.residual));
    float& cell = result.per_pixel_residual.at(c.pixel_x, c.pixel_y);
    if (std::isnan(cell) || a < cell) cell = a;
  }
  result.final_rms = corrs.empty() ? 0.0 : std::sqrt(sq_sum / corrs.size());
  result.transform = initial.inverse().compose(X);
  return result;
}

}  // namespace mmf
