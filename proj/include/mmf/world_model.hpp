#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "mmf/frame.hpp"
#include "mmf/geometry.hpp"
#include "mmf/grid.hpp"

namespace mmf {

constexpr int kDescriptorDim = 256;
using Descriptor = Eigen::Matrix<float, kDescriptorDim, 1>;

/// Sparse feature: 3D position in the owning object's model frame plus the
/// unit descriptor, detector response and provenance of the observation.
struct Keypoint {
  Eigen::Vector3d position = Eigen::Vector3d::Zero();
  Descriptor descriptor = Descriptor::Zero();
  float response = 0;
  Eigen::Vector2i source_pixel = Eigen::Vector2i(-1, -1);
  double timestamp = 0;
};

/// Keypoints observed together in one frame. frame_id is the owning object id
/// for history entries, or -1 for raw camera-frame sets.
struct KeypointSet {
  std::vector<Keypoint> keypoints;
  int frame_id = -1;
  double timestamp = 0;
};

struct CloudPoint {
  Eigen::Vector3d position = Eigen::Vector3d::Zero();
  Eigen::Vector3d normal = Eigen::Vector3d::Zero();
  float intensity = 0;
};

struct PointCloud {
  std::vector<CloudPoint> points;
  size_t size() const { return points.size(); }
  bool empty() const { return points.empty(); }
};

/// Oriented bounding box used as a grasp frame: pose maps box coordinates into
/// the object's model frame; extents are half-widths along the box axes.
struct GraspFrame {
  Pose pose;
  Eigen::Vector3d extents = Eigen::Vector3d::Zero();
  double timestamp = 0;
};

/// Everything tracked about one rigid body: dense surface model, sparse
/// keypoint history, pose trajectory and optional attached grasp frame.
/// Keypoint/cloud geometry is stored in the model frame (camera frame at the
/// time the object was created); pose maps model -> current camera frame.
struct ObjectModel {
  int id = -1;
  Pose pose;
  PointCloud cloud;
  std::vector<KeypointSet> keypoint_history;
  std::vector<TimedPose> pose_history;
  std::optional<GraspFrame> grasp;

  /// Cloud capacity; oldest-written points are evicted beyond it.
  size_t max_points = 2'000'000;

  // --- internal registration state --------------------------------------
  /// Voxel key (5 mm grid) -> index into cloud.points for de-duplication.
  std::unordered_map<uint64_t, size_t> voxel_index;
  /// Monotonic per-point write stamps driving oldest-first eviction.
  std::vector<uint64_t> write_stamp;
  uint64_t write_counter = 0;

  /// Appends a keypoint set; timestamps across history must strictly increase.
  void append_keypoint_history(KeypointSet set);
  void append_pose_history(double timestamp, const Pose& p);
};

/// Dense per-pixel label image. Labels are object ids; kNoLabel marks pixels
/// outside every model (invalid depth or explicitly unassigned).
struct SegmentationMap {
  static constexpr int32_t kNoLabel = -1;
  Grid<int32_t> labels;

  SegmentationMap() = default;
  SegmentationMap(int w, int h) : labels(w, h, kNoLabel) {}
  int width() const { return labels.width(); }
  int height() const { return labels.height(); }
};

/// The full tracked/lost model split. Object 0 is the environment and is
/// created by initialize_scene; it can never be lost or removed.
struct SceneSet {
  std::map<int, ObjectModel> tracked;
  std::map<int, ObjectModel> lost;
  int next_id = 1;

  bool has_tracked(int id) const { return tracked.count(id) != 0; }
};

/// 5 mm voxel quantization key for cloud de-duplication.
uint64_t voxel_key(const Eigen::Vector3d& p);

/// Per-pixel surface normals from central differences on the back-projected
/// depth image, oriented toward the camera. Falls back to one-sided
/// differences and finally the view ray so every valid-depth pixel gets a
/// unit normal; invalid-depth pixels get NaN.
Grid<Eigen::Vector3f> compute_normals(const FramePair& frame);

/// Builds the initial scene: one environment object (id 0, identity pose)
/// whose cloud back-projects every valid-depth pixel of the first frame.
SceneSet initialize_scene(const FramePair& first_frame);

/// Creates a new tracked object from the given seed pixels (all must carry
/// valid depth; invalid seeds are skipped). Pose is identity: the model frame
/// is the camera frame at spawn time. Returns the new id.
int spawn_object(SceneSet& scene, const FramePair& frame,
                 const std::vector<Eigen::Vector2i>& seed_pixels, double timestamp);

/// Integrates one frame into an object model: pixels labelled obj.id are
/// back-projected through `pose` into the model frame and merged into the
/// cloud under 5 mm voxel de-duplication (most recent measurement wins, with
/// oldest-voxel eviction beyond obj.max_points). Frame keypoints inside the
/// segment are appended as a new history entry, and (timestamp, pose) extends
/// the pose history.
void register_frame_data(ObjectModel& obj, const FramePair& frame,
                         const Grid<Eigen::Vector3f>& normals,
                         const SegmentationMap& seg, const KeypointSet& frame_keypoints,
                         const Pose& pose, double timestamp);

/// Drops every cloud point matching the predicate, keeping the voxel index
/// and write stamps consistent. Returns the number of points removed.
size_t remove_cloud_points(ObjectModel& obj,
                           const std::function<bool(const CloudPoint&)>& predicate);

/// ASCII PLY export/import, one vertex per line: x y z nx ny nz intensity.
void save_ply(const std::string& path, const PointCloud& cloud);
PointCloud load_ply(const std::string& path);

/// Keypoint history binary stream: per entry, timestamp (f64), count (u32),
/// then count x (3 x f32 position, 256 x f32 descriptor).
void save_keypoint_history(const std::string& path,
                           const std::vector<KeypointSet>& history);
std::vector<KeypointSet> load_keypoint_history(const std::string& path);

/// 8-bit indexed segmentation image; 255 encodes kNoLabel. Ids must be < 255.
void save_segmentation_pgm(const std::string& path, const SegmentationMap& seg);
SegmentationMap load_segmentation_pgm(const std::string& path);

}  // namespace mmf
