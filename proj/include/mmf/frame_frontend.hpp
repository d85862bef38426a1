#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "mmf/frame.hpp"
#include "mmf/world_model.hpp"

namespace mmf {

/// Dense keypoint response map plus per-pixel descriptors. Descriptors are
/// logically a full W x H x 256 grid (and are serialized as such); in memory
/// only pixels with non-zero response store one — everywhere else the
/// descriptor is the zero vector.
class KeypointHeatmap {
 public:
  KeypointHeatmap() = default;
  KeypointHeatmap(int width, int height) : response_(width, height, 0.0f) {}

  int width() const { return response_.width(); }
  int height() const { return response_.height(); }

  float response(int x, int y) const { return response_.at(x, y); }
  const Grid<float>& response_grid() const { return response_; }

  /// Sets a pixel's response and descriptor. A zero response erases the
  /// stored descriptor (keeps memory proportional to the active pixel count).
  void set(int x, int y, float response, const Descriptor& desc);

  /// Descriptor at a pixel; zero vector where none is stored.
  Descriptor descriptor(int x, int y) const;
  bool has_descriptor(int x, int y) const;

 private:
  Grid<float> response_;
  std::unordered_map<uint64_t, Descriptor> descriptors_;
  uint64_t key(int x, int y) const {
    return (static_cast<uint64_t>(y) << 32) | static_cast<uint32_t>(x);
  }
};

/// Keypoint file: ASCII header line `MMKP1 W H`, then the row-major float32
/// response grid, then the row-major float32 descriptor grid (256 floats per
/// pixel). Write-then-read is bit-exact.
void save_keypoint_file(const std::string& path, const KeypointHeatmap& heatmap);
KeypointHeatmap load_keypoint_file(const std::string& path);

struct KeypointExtractionParams {
  float response_threshold = 0.015f;  // responses at or below are discarded
};

/// Selects keypoints from a heatmap: 3x3 strict non-maximum suppression,
/// response > threshold, valid depth at the pixel. Surviving pixels are
/// back-projected to camera-frame 3D positions. Throws DimensionMismatch if
/// the heatmap and frame sizes differ.
KeypointSet extract_keypoints(const KeypointHeatmap& heatmap, const FramePair& frame,
                              const KeypointExtractionParams& params = {});

/// Source of keypoint heatmaps for a frame stream.
class KeypointProvider {
 public:
  virtual ~KeypointProvider() = default;
  virtual KeypointHeatmap compute(const FramePair& frame) = 0;
};

/// Reads precomputed heatmaps `<dir>/<timestamp>.mmkp` (timestamps formatted
/// %.6f, matching the dataset image naming).
class FileKeypointProvider : public KeypointProvider {
 public:
  explicit FileKeypointProvider(std::string dir) : dir_(std::move(dir)) {}
  KeypointHeatmap compute(const FramePair& frame) override;

 private:
  std::string dir_;
};

/// Dense pixel displacement between two frames. flow.at(x, y) = d means the
/// current-frame pixel (x, y) shows the surface point seen at (x, y) - d in
/// the previous frame. Invalid pixels have valid.at(x, y) == 0.
struct FlowField {
  Grid<Eigen::Vector2f> flow;
  Grid<uint8_t> valid;

  FlowField() = default;
  FlowField(int w, int h)
      : flow(w, h, Eigen::Vector2f::Zero()), valid(w, h, uint8_t{0}) {}
  int width() const { return flow.width(); }
  int height() const { return flow.height(); }
};

class FlowProvider {
 public:
  virtual ~FlowProvider() = default;
  virtual FlowField compute(const FramePair& previous, const FramePair& current) = 0;
};

struct BlockMatchingFlowParams {
  int levels = 3;      // image pyramid depth
  int block = 8;       // SAD window size (pixels, square)
  int search = 8;      // +- search radius at the coarsest level
  int refine = 2;      // +- refinement radius at finer levels
  int stride = 4;      // block anchor spacing
};

/// Coarse-to-fine block matching: per-level integer SAD search, parabolic
/// sub-pixel refinement at the finest level, 3x3 median over the block grid,
/// bilinear interpolation down to pixels.
class BlockMatchingFlowProvider : public FlowProvider {
 public:
  explicit BlockMatchingFlowProvider(const BlockMatchingFlowParams& params = {})
      : params_(params) {}
  FlowField compute(const FramePair& previous, const FramePair& current) override;

 private:
  BlockMatchingFlowParams params_;
};

// --- dataset directory layout ------------------------------------------------
// <root>/intrinsics.txt               fx fy cx cy width height
// <root>/rgb/<t>.pgm                  8-bit intensity
// <root>/depth/<t>.pgm                16-bit depth, 0.1 mm units
// <root>/associations.txt             t_rgb rgb/<t>.pgm t_depth depth/<t>.pgm
// <root>/keypoints/<t>.mmkp           optional precomputed heatmaps

struct DatasetEntry {
  double rgb_timestamp = 0;
  double depth_timestamp = 0;
  std::string rgb_path;    // relative to the dataset root
  std::string depth_path;  // relative to the dataset root
};

struct DatasetIndex {
  std::string root;
  CameraIntrinsics intrinsics;
  std::vector<DatasetEntry> entries;
  bool has_keypoint_dir = false;
};

DatasetIndex load_dataset_index(const std::string& root);
FramePair load_dataset_frame(const DatasetIndex& index, size_t i);

/// Writes frames into the dataset layout above. Keypoint heatmaps are written
/// only when provided (the dense descriptor grid makes them large).
class DatasetWriter {
 public:
  DatasetWriter(std::string root, const CameraIntrinsics& intrinsics);
  void add_frame(const FramePair& frame, const KeypointHeatmap* heatmap = nullptr);
  void finish();

 private:
  std::string root_;
  CameraIntrinsics intrinsics_;
  std::vector<std::string> association_lines_;
  bool finished_ = false;
};

/// Timestamp -> file stem formatting shared by dataset I/O ("%.6f").
std::string format_timestamp(double t);

}  // namespace mmf
