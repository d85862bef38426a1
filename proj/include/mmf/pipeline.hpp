#pragma once

#include <map>
#include <set>
#include <string>
#include <vector>

#include "mmf/config.hpp"
#include "mmf/evaluation.hpp"
#include "mmf/frame_frontend.hpp"
#include "mmf/model_manager.hpp"
#include "mmf/world_model.hpp"

namespace mmf {

/// What one pipeline step did, for callers driving frames manually.
struct FrameReport {
  int index = 0;
  double timestamp = 0;
  bool dropped = false;            // estimation collapsed; nothing was updated
  std::map<int, Pose> poses;       // model -> camera per object updated this frame
  std::set<int> estimation_failed; // sparse+dense both failed (non-environment)
  std::vector<int> spawned;
  std::vector<int> lost;
  std::vector<Redetection> redetections;
};

/// Serial per-frame driver of the four-phase loop: estimation (RANSAC init +
/// ICP refinement per object), CRF segmentation at reduced resolution,
/// modelling (registration, spawn/lost bookkeeping, grasp attachment) and
/// redetection over the lost set. Deterministic for a fixed config, providers
/// and frame stream.
class PipelineRunner {
 public:
  PipelineRunner(const PipelineConfig& config, KeypointProvider& keypoints,
                 FlowProvider& flow);

  /// Builds the scene from the first frame (environment model + keypoints).
  void initialize(const FramePair& first);
  bool initialized() const { return initialized_; }

  /// Runs one frame through all four phases. Throws MmfError if the runner
  /// was never initialized.
  FrameReport process_frame(const FramePair& frame);

  const SceneSet& scene() const { return scene_; }
  /// Object-id label image of the most recent frame (kNoLabel outside).
  const SegmentationMap& segmentation() const { return seg_; }
  /// Event log lines, "timestamp PHASE detail".
  const std::vector<std::string>& events() const { return events_; }
  /// Camera pose in the environment model frame, one sample per frame.
  const Trajectory& camera_trajectory() const { return camera_trajectory_; }
  /// Per-object model-frame -> environment-frame trajectories (ids >= 1).
  const std::map<int, Trajectory>& object_trajectories() const {
    return object_trajectories_;
  }

 private:
  void event(double timestamp, const char* phase, const std::string& detail);
  uint64_t stage_seed(int frame_index, int object_id, uint64_t salt) const;
  void carve_environment(const std::vector<Eigen::Vector2i>& blob, const FramePair& frame,
                         const Pose& env_pose);

  PipelineConfig config_;
  KeypointProvider& keypoint_provider_;
  FlowProvider& flow_provider_;

  bool initialized_ = false;
  SceneSet scene_;
  Redetector redetector_;
  FramePair prev_frame_;
  KeypointSet prev_keypoints_;
  std::map<int, Pose> prev_poses_;  // tracked poses as of the previous frame
  std::map<int, int> registered_frames_;
  SegmentationMap seg_;
  std::vector<std::string> events_;
  Trajectory camera_trajectory_;
  std::map<int, Trajectory> object_trajectories_;
};

/// End-to-end artifact-writing run: consumes the configured input, drives a
/// PipelineRunner over every frame and writes trajectories (TUM), models
/// (PLY + keypoint history), per-frame segmentation images, the event log and
/// — for simulator sources — a metrics CSV against ground truth into
/// config.output_dir. Throws on unreadable input or invalid config.
void run_pipeline(const PipelineConfig& config);

}  // namespace mmf
