#pragma once

#include <map>
#include <vector>

#include "mmf/sparse_estimator.hpp"
#include "mmf/world_model.hpp"

namespace mmf {

struct RedetectionParams {
  double error_threshold = 0.01;  // accept when RANSAC mean inlier error < this
  int min_matches = 8;            // and the inlier count reaches this
  int budget_per_frame = 32;      // (segment, history entry) trials per frame
  RansacParams ransac;
  MatchParams matching;
};

/// One accepted redetection: the lost model `lost_id` explains the currently
/// tracked segment `segment_id`, with the recovered model -> camera pose.
struct Redetection {
  int lost_id = -1;
  int segment_id = -1;
  Pose pose;
  double error = 0;
};

/// Redetection with a persistent budget cursor. Every frame tries at most
/// budget_per_frame (segment, history entry) RANSAC trials, visiting lost
/// models round-robin and each model's history entries in rotation, resuming
/// where the previous frame stopped so the per-frame cost stays bounded no
/// matter how large the lost set grows. Each segment resolves to at most one
/// lost model and vice versa; the lowest error wins.
class Redetector {
 public:
  explicit Redetector(const RedetectionParams& params = {}) : params_(params) {}

  /// segment_keypoints: current-camera-frame keypoints per candidate segment,
  /// keyed by the segment's tracked object id (the environment, id 0, is
  /// skipped). The caller applies the returned actions via replace_duplicate.
  std::vector<Redetection> run(const std::map<int, KeypointSet>& segment_keypoints,
                               const std::map<int, ObjectModel>& lost, uint64_t seed);

  const RedetectionParams& params() const { return params_; }

 private:
  RedetectionParams params_;
  std::map<int, size_t> entry_cursor_;  // lost id -> next history entry
  int resume_after_ = -1;               // round-robin position over lost ids
};

/// Applies one redetection: removes the tracked duplicate `new_id`, moves
/// `original_id` from lost to tracked with the given pose (grasp frame and
/// history ride along), and remaps segmentation labels new_id -> original_id
/// when a map is supplied. Throws UnknownObjectId unless new_id is tracked
/// and original_id is lost; the environment can never be replaced.
void replace_duplicate(SceneSet& scene, int new_id, int original_id, const Pose& pose,
                       SegmentationMap* seg = nullptr);

/// PCA-oriented bounding box of a model cloud. The returned pose maps box
/// coordinates into the cloud's frame; axes are ordered by descending extent,
/// signs canonicalized against the frame axes, right-handed. Extents are
/// half-widths covering every point. Throws DegenerateCloud for fewer than
/// 10 points or a cloud of rank < 2 (collinear).
GraspFrame fit_grasp_frame(const PointCloud& cloud);

}  // namespace mmf
