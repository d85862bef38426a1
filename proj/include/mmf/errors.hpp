#pragma once

#include <stdexcept>
#include <string>

namespace mmf {

/// Base class for all errors raised by the library.
struct MmfError : std::runtime_error {
  explicit MmfError(const std::string& what) : std::runtime_error(what) {}
};

/// Projection of a point with z <= 0.
struct NonPositiveDepth : MmfError {
  explicit NonPositiveDepth(const std::string& what = "non-positive depth")
      : MmfError(what) {}
};

/// Back-projection from a pixel whose depth measurement is missing/invalid.
struct InvalidDepth : MmfError {
  explicit InvalidDepth(const std::string& what = "invalid depth") : MmfError(what) {}
};

/// Two grids/images that must share dimensions do not.
struct DimensionMismatch : MmfError {
  explicit DimensionMismatch(const std::string& what = "dimension mismatch")
      : MmfError(what) {}
};

/// Closed-form alignment asked for with < 3 correspondences or a rank-deficient
/// (collinear) configuration.
struct DegenerateConfiguration : MmfError {
  explicit DegenerateConfiguration(const std::string& what = "degenerate configuration")
      : MmfError(what) {}
};

/// No RANSAC hypothesis reached the inlier quorum; signals tracking-lost upstream.
struct InsufficientInliers : MmfError {
  explicit InsufficientInliers(const std::string& what = "insufficient inliers")
      : MmfError(what) {}
};

/// Projective data association produced zero valid pairs.
struct NoAssociations : MmfError {
  explicit NoAssociations(const std::string& what = "no associations") : MmfError(what) {}
};

/// Operation referenced an object id that is not present in the scene set.
struct UnknownObjectId : MmfError {
  explicit UnknownObjectId(const std::string& what = "unknown object id")
      : MmfError(what) {}
};

/// Cloud unusable for box fitting (too few points or rank < 2).
struct DegenerateCloud : MmfError {
  explicit DegenerateCloud(const std::string& what = "degenerate cloud")
      : MmfError(what) {}
};

/// A file ended before the declared payload was read.
struct TruncatedFile : MmfError {
  explicit TruncatedFile(const std::string& what = "truncated file") : MmfError(what) {}
};

/// A file header or record failed to parse.
struct MalformedFile : MmfError {
  explicit MalformedFile(const std::string& what = "malformed file") : MmfError(what) {}
};

/// Trajectory association found no timestamp pairs within the window.
struct NoOverlappingTimestamps : MmfError {
  explicit NoOverlappingTimestamps(const std::string& what = "no overlapping timestamps")
      : MmfError(what) {}
};

/// Input collection empty where at least one element is required.
struct EmptyInput : MmfError {
  explicit EmptyInput(const std::string& what = "empty input") : MmfError(what) {}
};

}  // namespace mmf
