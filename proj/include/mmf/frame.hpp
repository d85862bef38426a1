#pragma once

#include "mmf/geometry.hpp"
#include "mmf/grid.hpp"

namespace mmf {

/// One time-aligned intensity + depth measurement pair with its intrinsics.
/// Intensity is stored normalized to [0, 1]; depth in meters (<= 0 invalid).
struct FramePair {
  Grid<float> intensity;
  DepthImage depth;
  CameraIntrinsics intrinsics;
  double timestamp = 0;
  int index = -1;  // sequence position, -1 when unknown

  int width() const { return intensity.width(); }
  int height() const { return intensity.height(); }

  bool depth_valid_at(int x, int y) const {
    return depth.values.in_bounds(x, y) && mmf::depth_valid(depth.values.at(x, y));
  }
};

}  // namespace mmf
