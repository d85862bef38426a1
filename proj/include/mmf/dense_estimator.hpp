#pragma once

#include <vector>

#include "mmf/frame.hpp"
#include "mmf/geometry.hpp"
#include "mmf/world_model.hpp"

namespace mmf {

struct IcpParams {
  int max_iterations = 20;       // Gauss-Newton iterations per pyramid level
  double convergence_eps = 1e-6;  // accepted-step twist norm that ends a level
  double max_correspondence_dist = 0.10;  // meters, 3D gate on associations
  double max_normal_angle_deg = 60.0;     // model normal vs viewing ray gate
  double huber_delta = 0.03;     // meters; 0 disables robust weighting
  int pyramid_levels = 3;        // depth pyramid levels (clamped to >= 1)
  int small_cloud_points = 10000;  // clouds below this run single-level
  int max_points = 120000;       // larger clouds are strided down to this
};

/// One Gauss-Newton iteration, for inspection: the robust mean cost before
/// and after the accepted step, both evaluated on that iteration's (fixed)
/// associations. The line search guarantees cost_after <= cost_before.
struct IcpIterationStat {
  int level = 0;
  double cost_before = 0;
  double cost_after = 0;
  double step_norm = 0;
};

struct IcpResult {
  /// Refinement increment in the model frame: the final model -> camera
  /// transform is compose_final(T_init, transform) = T_init * transform.
  Pose transform;
  int iterations = 0;       // Gauss-Newton iterations over all levels
  bool converged = false;   // step norm fell below convergence_eps at the finest level
  int correspondences = 0;  // associations at the final finest-level pass
  double final_rms = 0;     // point-to-plane RMS over those associations
  std::vector<IcpIterationStat> iteration_stats;
  /// |point-to-plane residual| per frame pixel at the final finest-level pass,
  /// minimum over the points projecting there; NaN where nothing associated.
  Grid<float> per_pixel_residual;
};

/// One projective association of a model point with a frame pixel.
struct IcpCorrespondence {
  Eigen::Vector3d point_camera;  // model point mapped by the current estimate
  Eigen::Vector3d target;        // back-projected frame surface point
  Eigen::Vector3d normal;        // frame surface normal at that pixel
  int pixel_x = 0, pixel_y = 0;
  double residual = 0;  // normal . (point_camera - target)
};

/// Point-to-plane residual r(xi) = n . (exp(xi) * X * p - q) and its exact
/// derivative at xi = 0 (rows ordered [v; w]); the building blocks of the
/// Gauss-Newton normal equations, exposed for direct verification.
double icp_residual(const Pose& X, const Eigen::Vector3d& p_model,
                    const Eigen::Vector3d& q, const Eigen::Vector3d& n);
Twist icp_residual_jacobian(const Pose& X, const Eigen::Vector3d& p_model,
                            const Eigen::Vector3d& n);

/// Projective data association at the given estimate: each cloud point is
/// projected into the frame, matched to the nearest pixel's back-projected
/// surface point, and gated by 3D distance and normal-vs-ray angle.
/// `normals` must be compute_normals(frame) (or the equivalent for a pyramid
/// level). `stride` subsamples the cloud deterministically.
std::vector<IcpCorrespondence> projective_associate(
    const PointCloud& cloud, const Pose& X, const FramePair& frame,
    const Grid<Eigen::Vector3f>& normals, const IcpParams& params, int stride = 1);

/// Halves a frame: every second pixel (top-left of each 2x2 block), with
/// fx, fy, cx, cy scaled by exactly one half so projection commutes with the
/// subsampling.
FramePair downsample_frame(const FramePair& frame);

/// Dense point-to-plane ICP of a model cloud against one depth frame.
/// `initial` maps model -> camera and seeds the estimate; the returned
/// increment satisfies X_final = initial * result.transform. Gauss-Newton with
/// a step-halving line search (the robust cost never increases at fixed
/// associations), coarse-to-fine over a depth pyramid, normal equations solved
/// by SVD pseudo-inverse so rank-deficient geometry degrades gracefully.
/// Throws NoAssociations if no pyramid level ever associates a point,
/// EmptyInput for an empty cloud.
IcpResult icp_refine(const PointCloud& cloud, const Pose& initial,
                     const FramePair& frame, const IcpParams& params = {});

/// Final model -> camera pose from the initialization and the ICP increment.
Pose compose_final(const Pose& initial, const Pose& icp_increment);

}  // namespace mmf
