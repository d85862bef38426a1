#include "mmf/model_manager.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>

#include "mmf/errors.hpp"

namespace mmf {

namespace {

uint64_t mix_seed(uint64_t seed, uint64_t a, uint64_t b, uint64_t c) {
  uint64_t z = seed + 0x9e3779b97f4a7c15ull * (a + 1) + 0xbf58476d1ce4e5b9ull * (b + 1) +
               0x94d049bb133111ebull * (c + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

}  // namespace

std::vector<Redetection> Redetector::run(
    const std::map<int, KeypointSet>& segment_keypoints,
    const std::map<int, ObjectModel>& lost, uint64_t seed) {
  // drop cursors of models that are no longer lost
  for (auto it = entry_cursor_.begin(); it != entry_cursor_.end();)
    it = lost.count(it->first) ? std::next(it) : entry_cursor_.erase(it);

  if (lost.empty() || segment_keypoints.empty()) return {};

  std::vector<int> order;
  order.reserve(lost.size());
  for (const auto& [id, model] : lost)
    if (!model.keypoint_history.empty()) order.push_back(id);
  if (order.empty()) return {};
  // resume the round-robin after the model served last frame
  std::rotate(order.begin(),
              std::upper_bound(order.begin(), order.end(), resume_after_), order.end());

  RansacParams rp = params_.ransac;
  rp.min_inliers = std::max(rp.min_inliers, params_.min_matches);

  std::vector<Redetection> candidates;
  int trials = 0;
  // cycle the round-robin until the budget is spent or every (model, entry)
  // pair has been visited once this frame
  std::map<int, size_t> served;
  size_t pending = order.size();
  for (size_t turn = 0; pending > 0 && trials < params_.budget_per_frame; ++turn) {
    const int lost_id = order[turn % order.size()];
    const ObjectModel& model = lost.at(lost_id);
    if (served[lost_id] == model.keypoint_history.size()) continue;
    const size_t entry = entry_cursor_[lost_id] % model.keypoint_history.size();
    const KeypointSet& history = model.keypoint_history[entry];

    bool exhausted = false;
    for (const auto& [seg_id, frame_kps] : segment_keypoints) {
      if (seg_id == 0 || frame_kps.keypoints.empty()) continue;
      if (trials >= params_.budget_per_frame) {
        exhausted = true;
        break;
      }
      ++trials;
      auto matches = match_keypoints({&history}, frame_kps, params_.matching);
      if (static_cast<int>(matches.size()) < params_.min_matches) continue;
      try {
        RansacResult res =
            ransac_estimate(matches, rp, mix_seed(seed, lost_id, entry, seg_id));
        if (res.mean_inlier_error < params_.error_threshold &&
            static_cast<int>(res.inliers.size()) >= params_.min_matches) {
          Redetection r;
          r.lost_id = lost_id;
          r.segment_id = seg_id;
          r.pose = res.transform.inverse();  // camera -> model, inverted
          r.error = res.mean_inlier_error;
          candidates.push_back(r);
        }
      } catch (const InsufficientInliers&) {
      } catch (const DegenerateConfiguration&) {
      }
    }
    if (exhausted) break;  // cursor not advanced: retry this entry next frame
    entry_cursor_[lost_id] = (entry + 1) % model.keypoint_history.size();
    resume_after_ = lost_id;
    if (++served[lost_id] == model.keypoint_history.size()) --pending;
  }

  // lowest error wins; one segment per model, one model per segment
  std::stable_sort(candidates.begin(), candidates.end(),
                   [](const Redetection& a, const Redetection& b) { return a.error < b.error; });
  std::vector<Redetection> accepted;
  for (const Redetection& c : candidates) {
    bool taken = false;
    for (const Redetection& a : accepted)
      if (a.lost_id == c.lost_id || a.segment_id == c.segment_id) taken = true;
    if (!taken) accepted.push_back(c);
  }
  return accepted;
}

void replace_duplicate(SceneSet& scene, int new_id, int original_id, const Pose& pose,
                       SegmentationMap* seg) {
  if (new_id == 0) throw MmfError("the environment cannot be a duplicate");
  auto dup = scene.tracked.find(new_id);
  if (dup == scene.tracked.end())
    throw UnknownObjectId("duplicate id " + std::to_string(new_id) + " is not tracked");
  auto orig = scene.lost.find(original_id);
  if (orig == scene.lost.end())
    throw UnknownObjectId("original id " + std::to_string(original_id) + " is not lost");

  ObjectModel model = std::move(orig->second);
  scene.lost.erase(orig);
  scene.tracked.erase(dup);
  model.pose = pose;
  scene.tracked.emplace(original_id, std::move(model));

  if (seg)
    for (int32_t& label : seg->labels.data())
      if (label == new_id) label = original_id;
}

GraspFrame fit_grasp_frame(const PointCloud& cloud) {
  if (cloud.size() < 10) throw DegenerateCloud("box fit needs at least 10 points");

  Eigen::Vector3d centroid = Eigen::Vector3d::Zero();
  for (const CloudPoint& p : cloud.points) centroid += p.position;
  centroid /= static_cast<double>(cloud.size());

  Eigen::Matrix3d cov = Eigen::Matrix3d::Zero();
  for (const CloudPoint& p : cloud.points) {
    Eigen::Vector3d d = p.position - centroid;
    cov += d * d.transpose();
  }
  cov /= static_cast<double>(cloud.size());

  Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> es(cov);
  const Eigen::Vector3d& ev = es.eigenvalues();  // ascending
  if (ev[2] <= 0 || ev[1] <= 1e-10 * ev[2])
    throw DegenerateCloud("cloud is collinear");

  std::array<Eigen::Vector3d, 3> axes = {es.eigenvectors().col(2),
                                         es.eigenvectors().col(1),
                                         es.eigenvectors().col(0)};

  // half-widths along each axis; order axes by descending extent
  std::array<double, 3> half, mid;
  auto measure = [&](int k) {
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (const CloudPoint& p : cloud.points) {
      double t = axes[k].dot(p.position);
      lo = std::min(lo, t);
      hi = std::max(hi, t);
    }
    half[k] = (hi - lo) / 2;
    mid[k] = (hi + lo) / 2;
  };
  for (int k = 0; k < 3; ++k) measure(k);
  std::array<int, 3> by_extent = {0, 1, 2};
  std::stable_sort(by_extent.begin(), by_extent.end(),
                   [&](int a, int b) { return half[a] > half[b]; });
  std::array<Eigen::Vector3d, 3> ordered = {axes[by_extent[0]], axes[by_extent[1]],
                                            axes[by_extent[2]]};

  // deterministic signs: positive against the first frame axis it is not
  // orthogonal to; right-handedness fixes the third
  for (int k = 0; k < 2; ++k)
    for (int w = 0; w < 3; ++w) {
      if (std::abs(ordered[k][w]) < 1e-12) continue;
      if (ordered[k][w] < 0) ordered[k] = -ordered[k];
      break;
    }
  ordered[2] = ordered[0].cross(ordered[1]);

  axes = ordered;
  for (int k = 0; k < 3; ++k) measure(k);

  GraspFrame grasp;
  Eigen::Matrix3d R;
  R.col(0) = axes[0];
  R.col(1) = axes[1];
  R.col(2) = axes[2];
  Eigen::Vector3d center = mid[0] * axes[0] + mid[1] * axes[1] + mid[2] * axes[2];
  grasp.pose = Pose(R, center);
  for (int k = 0; k < 3; ++k) grasp.extents[k] = std::max(half[k], 1e-9);
  return grasp;
}

}  // namespace mmf
