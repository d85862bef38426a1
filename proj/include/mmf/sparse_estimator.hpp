#pragma once

#include <cstdint>
#include <vector>

#include "mmf/geometry.hpp"
#include "mmf/world_model.hpp"

namespace mmf {

/// One mutual nearest-neighbour descriptor correspondence.
struct KeypointMatch {
  int model_entry = 0;  // index into the searched history entries
  int model_index = 0;  // keypoint index within that entry
  int frame_index = 0;  // keypoint index within the frame set
  float descriptor_distance = 0;  // plain L2, in [0, 2] for unit descriptors
  Eigen::Vector3d model_point = Eigen::Vector3d::Zero();  // model frame
  Eigen::Vector3d frame_point = Eigen::Vector3d::Zero();  // camera frame
};

struct MatchParams {
  float max_descriptor_distance = 2.0f;  // matches above this are dropped
};

/// Mutual nearest-neighbour matching between the union of the given model
/// keypoint entries and a frame keypoint set. Distances are squared-L2 in
/// descriptor space internally; ties resolve to the lowest index, so the
/// result is deterministic. Output is ordered by frame index.
std::vector<KeypointMatch> match_keypoints(
    const std::vector<const KeypointSet*>& model_entries, const KeypointSet& frame,
    const MatchParams& params = {});

/// Least-squares rigid transform T minimizing sum |model_i - T * frame_i|^2
/// (frame points live in the camera frame, so T maps camera -> model).
/// Throws DegenerateConfiguration for fewer than 3 points or a collinear
/// configuration, DimensionMismatch for unequal list sizes.
Pose umeyama_solve(const std::vector<Eigen::Vector3d>& model_points,
                   const std::vector<Eigen::Vector3d>& frame_points);

struct RansacParams {
  int iterations = 256;
  int sample_size = 3;
  double inlier_threshold = 0.01;   // meters
  int min_inliers = 5;              // hard floor ...
  double min_inlier_fraction = 0.10;  // ... and at least this share of matches
};

struct RansacResult {
  Pose transform;            // camera -> model
  std::vector<int> inliers;  // indices into the match list, ascending
  double mean_inlier_error = 0;  // meters, after the full-inlier refit
};

/// Seeded RANSAC over keypoint matches: minimal samples solved with
/// umeyama_solve, hypotheses ranked by (most inliers, then lowest mean inlier
/// error), final refit on the winning inlier set with membership recomputed
/// under the refit transform. Identical inputs and seed give identical output.
/// Throws InsufficientInliers when no hypothesis reaches
/// max(min_inliers, ceil(min_inlier_fraction * matches)).
RansacResult ransac_estimate(const std::vector<KeypointMatch>& matches,
                             const RansacParams& params, uint64_t seed);

}  // namespace mmf
