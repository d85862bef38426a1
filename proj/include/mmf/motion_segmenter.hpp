#pragma once

#include <set>
#include <vector>

#include <Eigen/Core>

#include "mmf/frame_frontend.hpp"
#include "mmf/geometry.hpp"
#include "mmf/world_model.hpp"

namespace mmf {

/// Knobs for the dense segmentation CRF. All pixel quantities are in units of
/// the grid the segmenter actually runs on; callers working at reduced
/// resolution scale them accordingly.
struct CrfParams {
  double spatial_sigma = 20.0;         // px, pairwise kernel
  double flow_sigma = 3.0;             // px, pairwise kernel
  double pairwise_weight = 10.0;
  int mean_field_iterations = 5;
  double outlier_unary = 50.0;         // px^2/s; also caps the residual cost
  int min_segment_px = 300;
  double static_flow_threshold = 1.0;  // px/frame, keypoint-vs-dense blend
  double keypoint_radius_px = 80.0;    // beyond this, dense evidence only
};

/// Per-pixel unary potentials, one cost grid per label. The last label is
/// always the free "outlier / new motion" label.
struct UnaryField {
  std::vector<Grid<float>> costs;

  int num_labels() const { return static_cast<int>(costs.size()); }
  int width() const { return costs.empty() ? 0 : costs.front().width(); }
  int height() const { return costs.empty() ? 0 : costs.front().height(); }
};

/// One frame-to-frame keypoint track, both endpoints back-projected into
/// their respective camera frames.
struct KeypointTrack {
  Eigen::Vector3d prev_point;
  Eigen::Vector3d curr_point;
};

/// Reprojection drift of one track under every tracked motion, anchored at
/// the track's current-frame image position.
struct DriftCost {
  Eigen::Vector2d pixel;
  std::vector<double> costs;  // px^2/s, parallel to the model order
};

/// Drift cost per track and model: (1/dt) * |pi(p_prev) - pi(D_m p_curr)|^2
/// where D_m maps the current camera frame to the previous one as if the
/// point rode along with model m. A point that moved exactly per model m
/// scores zero for m. Throws DegenerateConfiguration if dt <= 0.
std::vector<DriftCost> keypoint_drift_unary(const std::vector<KeypointTrack>& tracks,
                                            const std::vector<Pose>& prev_from_curr,
                                            const CameraIntrinsics& intrinsics,
                                            double dt);

/// Spreads sparse drift costs over the image and fuses them with dense ICP
/// residual evidence. Per pixel and tracked model m:
///   w        = min(1, |d|^2 / static_flow_threshold^2)
///   cost_kp  = drift cost of the nearest track within keypoint_radius_px
///   cost_icp = min(outlier_unary, (residual_m / 0.01)^2), missing -> outlier_unary
///   unary_m  = w * cost_kp + (1 - w) * cost_icp   (cost_icp alone beyond radius)
/// The extra outlier label costs outlier_unary everywhere. `dense_residuals`
/// holds one residual image per model (meters, NaN where unassociated); null
/// entries mean the model had no dense refinement this frame.
UnaryField densify_unary(const std::vector<DriftCost>& keypoint_costs,
                         const FlowField& flow,
                         const std::vector<const Grid<float>*>& dense_residuals,
                         const CrfParams& params);

struct CrfResult {
  Grid<int32_t> labels;               // label indices; last index = outlier
  std::vector<Grid<float>> marginals; // one grid per label, normalized per pixel
};

/// Mean-field inference on the dense CRF with Potts pairwise over the 4D
/// feature [pixel, flow]. Simultaneous (Jacobi) updates for a fixed number of
/// iterations; kernel truncated at radius 3 * spatial_sigma. Pixels with
/// invalid flow take no part in the coupling and keep their unary softmax.
CrfResult mean_field_infer(const UnaryField& unary, const FlowField& flow,
                           const CrfParams& params);

/// What the segmentation asks the scene to do this frame.
struct SegmentActions {
  std::vector<std::vector<Eigen::Vector2i>> spawns;  // outlier blobs, scan order
  std::vector<int> lost;                             // ids to park, ascending
};

/// Applies the segment bookkeeping rules to a label image whose entries are
/// already object ids (SegmentationMap::kNoLabel = skip, kOutlierLabel =
/// unexplained motion). Outlier blobs (4-connected) of at least
/// min_segment_px become spawn requests; tracked objects whose segment is
/// smaller than min_segment_px or whose sparse estimation failed are marked
/// lost. The environment (id 0) is never lost.
constexpr int32_t kOutlierLabel = -2;
SegmentActions resolve_segments(const Grid<int32_t>& labels, const SceneSet& scene,
                                const std::set<int>& estimation_failed,
                                const CrfParams& params);

}  // namespace mmf
