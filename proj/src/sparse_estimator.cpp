#include "mmf/sparse_estimator.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "mmf/errors.hpp"

namespace mmf {
namespace {

uint64_t splitmix64(uint64_t& state) {
  state += 0x9E3779B97F4A7C15ull;
  uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

}  // namespace

std::vector<KeypointMatch> match_keypoints(
    const std::vector<const KeypointSet*>& model_entries, const KeypointSet& frame,
    const MatchParams& params) {
  int total_model = 0;
  for (const KeypointSet* set : model_entries) {
    if (!set) throw EmptyInput("null model keypoint entry");
    total_model += static_cast<int>(set->keypoints.size());
  }
  const int n_frame = static_cast<int>(frame.keypoints.size());
  if (total_model == 0 || n_frame == 0) return {};

  // Stack descriptors column-wise and use |a-b|^2 = |a|^2 + |b|^2 - 2 a.b so
  // the inner products come from one GEMM.
  Eigen::MatrixXf model_desc(kDescriptorDim, total_model);
  std::vector<std::pair<int, int>> origin(total_model);  // (entry, index)
  int col = 0;
  for (size_t e = 0; e < model_entries.size(); ++e) {
    const auto& kps = model_entries[e]->keypoints;
    for (size_t i = 0; i < kps.size(); ++i, ++col) {
      model_desc.col(col) = kps[i].descriptor;
      origin[col] = {static_cast<int>(e), static_cast<int>(i)};
    }
  }
  Eigen::MatrixXf frame_desc(kDescriptorDim, n_frame);
  for (int j = 0; j < n_frame; ++j) frame_desc.col(j) = frame.keypoints[j].descriptor;

  Eigen::VectorXf model_norm = model_desc.colwise().squaredNorm();
  Eigen::VectorXf frame_norm = frame_desc.colwise().squaredNorm();
  Eigen::MatrixXf dots = model_desc.transpose() * frame_desc;  // M x F

  std::vector<int> best_for_frame(n_frame, -1);
  std::vector<float> best_dist_frame(n_frame, std::numeric_limits<float>::max());
  std::vector<int> best_for_model(total_model, -1);
  std::vector<float> best_dist_model(total_model, std::numeric_limits<float>::max());
  for (int j = 0; j < n_frame; ++j) {
    for (int i = 0; i < total_model; ++i) {
      float d2 = model_norm[i] + frame_norm[j] - 2.0f * dots(i, j);
      if (d2 < best_dist_frame[j]) {
        best_dist_frame[j] = d2;
        best_for_frame[j] = i;
      }
      if (d2 < best_dist_model[i]) {
        best_dist_model[i] = d2;
        best_for_model[i] = j;
      }
    }
  }

  std::vector<KeypointMatch> matches;
  const float max_d2 =
      params.max_descriptor_distance * params.max_descriptor_distance;
  for (int j = 0; j < n_frame; ++j) {
    int i = best_for_frame[j];
    if (i < 0 || best_for_model[i] != j) continue;
    float d2 = std::max(0.0f, best_dist_frame[j]);
    if (d2 > max_d2) continue;
    KeypointMatch m;
    m.model_entry = origin[i].first;
    m.model_index = origin[i].second;
    m.frame_index = j;
    m.descriptor_distance = std::sqrt(d2);
    m.model_point = model_entries[m.model_entry]->keypoints[m.model_index].position;
    m.frame_point = frame.keypoints[j].position;
    matches.push_back(m);
  }
  return matches;
}

Pose umeyama_solve(const std::vector<Eigen::Vector3d>& model_points,
                   const std::vector<Eigen::Vector3d>& frame_points) {
  if (model_points.size() != frame_points.size())
    throw DimensionMismatch("umeyama point lists differ in size");
  const int n = static_cast<int>(model_points.size());
  if (n < 3) throw DegenerateConfiguration("umeyama needs at least 3 points");

  Eigen::Vector3d model_mean = Eigen::Vector3d::Zero();
  Eigen::Vector3d frame_mean = Eigen::Vector3d::Zero();
  for (int i = 0; i < n; ++i) {
    model_mean += model_points[i];
    frame_mean += frame_points[i];
  }
  model_mean /= n;
  frame_mean /= n;

  Eigen::Matrix3d H = Eigen::Matrix3d::Zero();
  for (int i = 0; i < n; ++i)
    H += (frame_points[i] - frame_mean) * (model_points[i] - model_mean).transpose();

  Eigen::JacobiSVD<Eigen::Matrix3d> svd(H, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Eigen::Vector3d sv = svd.singularValues();
  // Collinear (or coincident) points leave the rotation about the point axis
  // unconstrained: two vanishing singular values.
  if (sv(0) <= 0 || sv(1) <= sv(0) * 1e-12)
    throw DegenerateConfiguration("umeyama input points are collinear");

  Eigen::Matrix3d U = svd.matrixU();
  Eigen::Matrix3d V = svd.matrixV();
  Eigen::Vector3d s = Eigen::Vector3d::Ones();
  if ((V * U.transpose()).determinant() < 0) s(2) = -1;
  Eigen::Matrix3d R = V * s.asDiagonal() * U.transpose();
  return Pose(R, model_mean - R * frame_mean);
}

RansacResult ransac_estimate(const std::vector<KeypointMatch>& matches,
                             const RansacParams& params, uint64_t seed) {
  if (params.sample_size < 3) throw MmfError("ransac sample_size must be >= 3");
  const int n = static_cast<int>(matches.size());
  const int min_required =
      std::max(params.min_inliers,
               static_cast<int>(std::ceil(params.min_inlier_fraction * n)));
  if (n < std::max(min_required, params.sample_size))
    throw InsufficientInliers("too few matches for ransac");

  auto inlier_pass = [&](const Pose& T, std::vector<int>* indices, double* mean_error) {
    int count = 0;
    double error_sum = 0;
    for (int i = 0; i < n; ++i) {
      double e = (matches[i].model_point - T.apply(matches[i].frame_point)).norm();
      if (e < params.inlier_threshold) {
        ++count;
        error_sum += e;
        if (indices) indices->push_back(i);
      }
    }
    if (mean_error) *mean_error = count > 0 ? error_sum / count : 0.0;
    return count;
  };

  uint64_t state = seed ^ 0xC2B2AE3D27D4EB4Full;
  Pose best_pose;
  int best_count = -1;
  double best_error = std::numeric_limits<double>::max();
  std::vector<Eigen::Vector3d> sample_model(params.sample_size);
  std::vector<Eigen::Vector3d> sample_frame(params.sample_size);
  std::vector<int> sample(params.sample_size);
  for (int it = 0; it < params.iterations; ++it) {
    for (int k = 0; k < params.sample_size; ++k) {
      int idx;
      bool fresh;
      do {
        idx = static_cast<int>(splitmix64(state) % static_cast<uint64_t>(n));
        fresh = true;
        for (int p = 0; p < k; ++p) fresh = fresh && sample[p] != idx;
      } while (!fresh);
      sample[k] = idx;
      sample_model[k] = matches[idx].model_point;
      sample_frame[k] = matches[idx].frame_point;
    }
    Pose T;
    try {
      T = umeyama_solve(sample_model, sample_frame);
    } catch (const DegenerateConfiguration&) {
      continue;
    }
    double mean_error = 0;
    int count = inlier_pass(T, nullptr, &mean_error);
    if (count > best_count || (count == best_count && mean_error < best_error)) {
      best_count = count;
      best_error = mean_error;
      best_pose = T;
    }
  }
  if (best_count < min_required)
    throw InsufficientInliers("ransac consensus below the inlier floor");

  RansacResult result;
  std::vector<int> consensus;
  inlier_pass(best_pose, &consensus, nullptr);
  std::vector<Eigen::Vector3d> fit_model, fit_frame;
  fit_model.reserve(consensus.size());
  fit_frame.reserve(consensus.size());
  for (int i : consensus) {
    fit_model.push_back(matches[i].model_point);
    fit_frame.push_back(matches[i].frame_point);
  }
  Pose refined = best_pose;
  try {
    refined = umeyama_solve(fit_model, fit_frame);
  } catch (const DegenerateConfiguration&) {
  }
  result.transform = refined;
  inlier_pass(refined, &result.inliers, &result.mean_inlier_error);
  if (static_cast<int>(result.inliers.size()) < min_required)
    throw InsufficientInliers("ransac refit lost the consensus set");
  return result;
}

}  // namespace mmf
