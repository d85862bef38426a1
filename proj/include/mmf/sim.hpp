#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "mmf/frame_frontend.hpp"
#include "mmf/geometry.hpp"

namespace mmf {

/// Piecewise constant-twist trajectory. Within a segment starting at pose P_k
/// (time t_k): pose(t) = se3_exp((t - t_k) * twist) * P_k — the twist lives in
/// the world frame and is integrated by left multiplication.
struct TrajectorySegment {
  double start_time = 0;
  Twist twist = Twist::Zero();
};

struct BodyTrajectory {
  Pose start;  // pose at t = 0
  std::vector<TrajectorySegment> segments;  // sorted by start_time
  Pose pose_at(double t) const;
};

/// One renderable primitive placed in its body's frame.
/// "cuboid": size = full edge lengths. "plane": a size.x() by size.y() quad in
/// the part's local xy plane (z = 0).
struct ScenePart {
  std::string shape = "cuboid";
  Eigen::Vector3d size = Eigen::Vector3d::Ones();
  Pose offset;
};

struct SceneBody {
  std::string name;
  std::vector<ScenePart> parts;
  BodyTrajectory trajectory;
  uint64_t texture_seed = 0;
  double keypoint_spacing = 0.05;  // anchor pitch on each face, meters
  double mean_intensity = 0.5;
};

struct NoiseModel {
  double depth_sigma = 0;       // additive Gaussian on depth, meters
  double descriptor_sigma = 0;  // per-component, renormalized afterwards
  double outlier_rate = 0;      // fraction of keypoints with random descriptors
};

struct SceneScript {
  std::string name = "custom";
  CameraIntrinsics intrinsics;
  double frame_rate = 10.0;
  double duration = 5.0;
  uint64_t seed = 1;
  NoiseModel noise;
  BodyTrajectory camera;  // camera -> world
  std::vector<SceneBody> bodies;

  int frame_count() const;
  double timestamp(int index) const;
};

SceneScript load_scene_script(const std::string& path);
void save_scene_script(const std::string& path, const SceneScript& script);

/// Builtin scenario scripts: rotation, manipulation, conveyor_up,
/// conveyor_down, redetect. Throws MmfError for unknown names.
SceneScript builtin_scenario(const std::string& name);
std::vector<std::string> builtin_scenario_names();

/// Ground-truth bundle for one rendered frame. Depth is quantized to 0.1 mm
/// and intensity to 1/255 exactly as the dataset export stores them, so a run
/// from exported files reproduces a direct simulator run bit by bit.
struct RenderedFrame {
  FramePair frame;
  Grid<int32_t> body_labels;  // body index per pixel, -1 = no surface
  Grid<double> gt_depth;      // exact pre-noise depth, 0 where no surface
  FlowField gt_flow;          // displacement from frame index-1 (invalid at index 0)
  Pose camera_pose;           // camera -> world
  std::vector<Pose> body_poses;  // body -> world, indexed like script.bodies
};

/// Deterministic scene renderer: render(i) is a pure function of the script
/// and the frame index (an internal two-frame buffer cache only saves work).
class SceneRenderer {
 public:
  explicit SceneRenderer(SceneScript script);
  ~SceneRenderer();

  const SceneScript& script() const { return script_; }
  int frame_count() const { return script_.frame_count(); }
  double timestamp(int index) const { return script_.timestamp(index); }

  RenderedFrame render(int index) const;

  /// Synthetic keypoint heatmap: stable per-body surface anchors projected
  /// into the frame, visibility-tested against the true depth buffer. With
  /// zero noise the same anchor carries the same descriptor in every frame.
  KeypointHeatmap keypoint_heatmap(int index) const;

 private:
  struct Impl;
  SceneScript script_;
  std::unique_ptr<Impl> impl_;
};

/// Frontend adapters over a shared renderer (frames matched by index).
class SyntheticKeypointProvider : public KeypointProvider {
 public:
  explicit SyntheticKeypointProvider(const SceneRenderer& renderer)
      : renderer_(renderer) {}
  KeypointHeatmap compute(const FramePair& frame) override {
    return renderer_.keypoint_heatmap(frame.index);
  }

 private:
  const SceneRenderer& renderer_;
};

class GroundTruthFlowProvider : public FlowProvider {
 public:
  explicit GroundTruthFlowProvider(const SceneRenderer& renderer)
      : renderer_(renderer) {}
  FlowField compute(const FramePair& previous, const FramePair& current) override;

 private:
  const SceneRenderer& renderer_;
};

}  // namespace mmf
