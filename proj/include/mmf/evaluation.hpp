#pragma once

#include <vector>

#include "mmf/geometry.hpp"
#include "mmf/world_model.hpp"

namespace mmf {

/// Time-ordered pose samples; timestamps must be strictly increasing.
using Trajectory = std::vector<TimedPose>;

/// Absolute trajectory error: estimate and truth are associated by nearest
/// timestamp (within `window` seconds, one-to-one), the estimate is rigidly
/// aligned to the truth (full SE(3), no scale; centroid shift alone when the
/// positions are degenerate), and the RMSE of the translational residuals is
/// returned. Throws NoOverlappingTimestamps with fewer than two associations.
double ate_rmse(const Trajectory& estimated, const Trajectory& truth,
                double window = 0.02);

struct RpeResult {
  double translational = 0;    // m/s
  double rotational_deg = 0;   // deg/s
};

/// Relative pose error over delta-separated sample pairs, each error
/// normalized by its actual time span, RMSE over pairs. Association as in
/// ate_rmse; pairs are formed inside the associated sequence. Throws
/// NoOverlappingTimestamps when no associations or no delta-pairs exist.
RpeResult rpe_rmse(const Trajectory& estimated, const Trajectory& truth,
                   double delta = 1.0, double window = 0.02);

struct ReconstructionError {
  double mean = 0;   // meters
  double stddev = 0; // population standard deviation
  std::vector<double> distances;  // per estimated point, input order
};

/// Directed cloud distance: for every estimated point, the Euclidean distance
/// to its nearest reference point (kd-tree accelerated, exact). Throws
/// EmptyInput when either cloud is empty.
ReconstructionError reconstruction_error(const PointCloud& estimated,
                                         const PointCloud& reference);

}  // namespace mmf
