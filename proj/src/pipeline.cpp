#include "mmf/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <memory>
#include <optional>

#include "mmf/dense_estimator.hpp"
#include "mmf/errors.hpp"
#include "mmf/motion_segmenter.hpp"
#include "mmf/sim.hpp"
#include "mmf/sparse_estimator.hpp"

namespace mmf {

namespace fs = std::filesystem;

namespace {

uint64_t mix64(uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

/// Subsampled flow: quarter-grid vectors are full-res vectors at the anchor
/// pixel divided by the scale, so they stay in units of the coarse grid.
FlowField downsample_flow(const FlowField& flow, int s) {
  FlowField out(flow.width() / s, flow.height() / s);
  for (int y = 0; y < out.height(); ++y)
    for (int x = 0; x < out.width(); ++x) {
      out.flow.at(x, y) = flow.flow.at(x * s, y * s) / static_cast<float>(s);
      out.valid.at(x, y) = flow.valid.at(x * s, y * s);
    }
  return out;
}

Grid<float> downsample_residual(const Grid<float>& r, int s) {
  Grid<float> out(r.width() / s, r.height() / s, 0.0f);
  for (int y = 0; y < out.height(); ++y)
    for (int x = 0; x < out.width(); ++x) out.at(x, y) = r.at(x * s, y * s);
  return out;
}

/// Bilinear upsampling of the label marginals followed by per-pixel argmax,
/// so segment boundaries land between coarse cells instead of on them.
Grid<int32_t> upscale_argmax(const std::vector<Grid<float>>& marginals, int w, int h,
                             int s) {
  const int wq = marginals.front().width(), hq = marginals.front().height();
  Grid<int32_t> out(w, h, 0);
  for (int y = 0; y < h; ++y) {
    double cy = std::clamp((y + 0.5) / s - 0.5, 0.0, hq - 1.0);
    int iy = static_cast<int>(cy);
    int iy1 = std::min(iy + 1, hq - 1);
    double fy = cy - iy;
    for (int x = 0; x < w; ++x) {
      double cx = std::clamp((x + 0.5) / s - 0.5, 0.0, wq - 1.0);
      int ix = static_cast<int>(cx);
      int ix1 = std::min(ix + 1, wq - 1);
      double fx = cx - ix;
      double best = -1;
      int best_k = 0;
      for (size_t k = 0; k < marginals.size(); ++k) {
        const Grid<float>& m = marginals[k];
        double v = (1 - fy) * ((1 - fx) * m.at(ix, iy) + fx * m.at(ix1, iy)) +
                   fy * ((1 - fx) * m.at(ix, iy1) + fx * m.at(ix1, iy1));
        if (v > best) {
          best = v;
          best_k = static_cast<int>(k);
        }
      }
      out.at(x, y) = best_k;
    }
  }
  return out;
}

Eigen::Vector3d cloud_centroid(const PointCloud& cloud) {
  Eigen::Vector3d c = Eigen::Vector3d::Zero();
  for (const CloudPoint& p : cloud.points) c += p.position;
  return cloud.empty() ? c : Eigen::Vector3d(c / static_cast<double>(cloud.size()));
}

std::string format_fixed(const char* fmt, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), fmt, v);
  return buf;
}

}  // namespace

PipelineRunner::PipelineRunner(const PipelineConfig& config, KeypointProvider& keypoints,
                               FlowProvider& flow)
    : config_(config),
      keypoint_provider_(keypoints),
      flow_provider_(flow),
      redetector_(config.redetect) {}

void PipelineRunner::event(double timestamp, const char* phase,
                           const std::string& detail) {
  std::string line = format_fixed("%.6f", timestamp) + " " + phase;
  if (!detail.empty()) line += " " + detail;
  events_.push_back(std::move(line));
}

uint64_t PipelineRunner::stage_seed(int frame_index, int object_id, uint64_t salt) const {
  uint64_t h = mix64(config_.seed ^ 0xC0FFEE5EEDull);
  h = mix64(h ^ static_cast<uint64_t>(frame_index + 1));
  h = mix64(h ^ static_cast<uint64_t>(object_id + 2));
  return mix64(h ^ salt);
}

// A freshly spawned object leaves a stale copy of itself inside the
// environment cloud (its static-phase surface was merged there every frame).
// Left in place that copy keeps claiming the vacated pixels and biases the
// environment ICP, so drop every environment point that projects into the
// (dilated) blob at a depth close to the observed surface.
void PipelineRunner::carve_environment(const std::vector<Eigen::Vector2i>& blob,
                                       const FramePair& frame, const Pose& env_pose) {
  constexpr int kDilate = 8;
  constexpr double kDepthBand = 0.15;
  const int w = frame.width(), h = frame.height();
  Grid<uint8_t> mask(w, h, 0);
  for (const Eigen::Vector2i& p : blob) mask.at(p.x(), p.y()) = 1;
  Grid<uint8_t> tmp(w, h, 0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      uint8_t v = 0;
      for (int dx = -kDilate; dx <= kDilate && !v; ++dx)
        if (mask.in_bounds(x + dx, y) && mask.at(x + dx, y)) v = 1;
      tmp.at(x, y) = v;
    }
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      uint8_t v = 0;
      for (int dy = -kDilate; dy <= kDilate && !v; ++dy)
        if (tmp.in_bounds(x, y + dy) && tmp.at(x, y + dy)) v = 1;
      mask.at(x, y) = v;
    }

  remove_cloud_points(scene_.tracked.at(0), [&](const CloudPoint& cp) {
    Eigen::Vector3d cam = env_pose.apply(cp.position);
    if (cam.z() <= 0) return false;
    Eigen::Vector2d px = project(frame.intrinsics, cam);
    int xi = static_cast<int>(std::lround(px.x()));
    int yi = static_cast<int>(std::lround(px.y()));
    if (!mask.in_bounds(xi, yi) || !mask.at(xi, yi)) return false;
    double d = frame.depth.values.at(xi, yi);
    return depth_valid(d) && std::abs(cam.z() - d) < kDepthBand;
  });
}

void PipelineRunner::initialize(const FramePair& first) {
  if (initialized_) throw MmfError("pipeline already initialized");
  scene_ = initialize_scene(first);

  KeypointHeatmap heat = keypoint_provider_.compute(first);
  KeypointSet kps = extract_keypoints(heat, first, config_.keypoints);
  ObjectModel& env = scene_.tracked.at(0);
  if (!kps.keypoints.empty()) {
    KeypointSet entry = kps;
    entry.timestamp = first.timestamp;
    env.append_keypoint_history(std::move(entry));
  }

  seg_ = SegmentationMap(first.width(), first.height());
  for (int y = 0; y < first.height(); ++y)
    for (int x = 0; x < first.width(); ++x)
      if (first.depth_valid_at(x, y)) seg_.labels.at(x, y) = 0;

  camera_trajectory_.push_back({first.timestamp, Pose()});
  prev_frame_ = first;
  prev_keypoints_ = std::move(kps);
  prev_poses_.clear();
  prev_poses_[0] = Pose();
  registered_frames_[0] = 1;
  initialized_ = true;
  event(first.timestamp, "INIT",
        "points=" + std::to_string(env.cloud.size()) +
            " keypoints=" + std::to_string(prev_keypoints_.keypoints.size()));
}

FrameReport PipelineRunner::process_frame(const FramePair& frame) {
  if (!initialized_) throw MmfError("pipeline not initialized");
  FrameReport report;
  report.index = frame.index;
  report.timestamp = frame.timestamp;
  const double ts = frame.timestamp;
  const double dt = ts - prev_frame_.timestamp;
  const int w = frame.width(), h = frame.height();
  const bool use_sparse = config_.mode != "dense";
  const bool use_dense = config_.mode != "sparse";
  const bool do_seg = config_.segmentation && dt > 0;

  KeypointHeatmap heat = keypoint_provider_.compute(frame);
  KeypointSet frame_kps = extract_keypoints(heat, frame, config_.keypoints);
  Grid<Eigen::Vector3f> normals = compute_normals(frame);
  FlowField flow;
  if (do_seg) flow = flow_provider_.compute(prev_frame_, frame);

  // ---- phase 1: estimation --------------------------------------------------
  std::map<int, Pose> new_poses;
  std::map<int, Grid<float>> residuals;
  std::set<int>& failed = report.estimation_failed;
  int sparse_ok = 0;
  bool env_collapse = false;

  for (auto& [id, obj] : scene_.tracked) {
    std::optional<Pose> init;
    if (use_sparse && !obj.keypoint_history.empty()) {
      std::vector<const KeypointSet*> entries;
      const size_t n = obj.keypoint_history.size();
      const size_t take = std::min<size_t>(config_.match_history, n);
      for (size_t k = n - take; k < n; ++k) entries.push_back(&obj.keypoint_history[k]);
      auto matches = match_keypoints(entries, frame_kps, config_.matching);
      try {
        RansacResult rr =
            ransac_estimate(matches, config_.ransac, stage_seed(frame.index, id, 0x5A));
        init = rr.transform.inverse();
        ++sparse_ok;
      } catch (const InsufficientInliers&) {
      } catch (const DegenerateConfiguration&) {
      }
    }

    if (!use_dense) {
      if (init)
        new_poses[id] = *init;
      else if (id == 0)
        new_poses[0] = obj.pose;  // constant-motion fallback, no dense stage to lean on
      else
        failed.insert(id);
      continue;
    }

    if (use_sparse && !init && id != 0) {
      failed.insert(id);  // sparse init lost the object; dense alone won't recover it
      continue;
    }
    Pose seed_pose = init ? *init : obj.pose;
    try {
      IcpResult icp = icp_refine(obj.cloud, seed_pose, frame, config_.icp);
      new_poses[id] = compose_final(seed_pose, icp.transform);
      residuals.emplace(id, std::move(icp.per_pixel_residual));
    } catch (const NoAssociations&) {
      if (init)
        new_poses[id] = *init;
      else if (id == 0)
        env_collapse = true;
      else
        failed.insert(id);
    } catch (const EmptyInput&) {
      if (init)
        new_poses[id] = *init;
      else if (id == 0)
        env_collapse = true;
      else
        failed.insert(id);
    }
  }

  if (env_collapse) {
    event(ts, "DROP", "environment estimation failed");
    prev_frame_ = frame;
    prev_keypoints_ = std::move(frame_kps);
    report.dropped = true;
    return report;
  }
  event(ts, "ESTIMATION",
        "tracked=" + std::to_string(scene_.tracked.size()) +
            " sparse=" + std::to_string(sparse_ok) +
            " failed=" + std::to_string(failed.size()));

  // ---- phase 2: segmentation --------------------------------------------------
  std::vector<int> tracked_ids;
  for (const auto& [id, obj] : scene_.tracked) tracked_ids.push_back(id);

  seg_ = SegmentationMap(w, h);
  Grid<int32_t>& ids = seg_.labels;
  int outlier_px = 0;

  if (do_seg) {
    std::vector<KeypointTrack> tracks;
    auto track_matches = match_keypoints({&prev_keypoints_}, frame_kps, config_.matching);
    tracks.reserve(track_matches.size());
    for (const KeypointMatch& m : track_matches)
      tracks.push_back({m.model_point, m.frame_point});

    std::vector<Pose> deltas;
    for (int id : tracked_ids) {
      Pose w_prev =
          prev_poses_.count(id) ? prev_poses_.at(id) : scene_.tracked.at(id).pose;
      Pose w_curr = new_poses.count(id) ? new_poses.at(id) : scene_.tracked.at(id).pose;
      deltas.push_back(w_prev.compose(w_curr.inverse()));
    }
    std::vector<DriftCost> drifts =
        keypoint_drift_unary(tracks, deltas, frame.intrinsics, dt);

    const int s = config_.crf_scale;
    FlowField flow_q = downsample_flow(flow, s);
    for (DriftCost& d : drifts) d.pixel /= s;
    CrfParams crf_q = config_.crf;
    crf_q.spatial_sigma /= s;
    crf_q.flow_sigma /= s;
    crf_q.static_flow_threshold /= s;
    crf_q.keypoint_radius_px /= s;

    std::vector<Grid<float>> res_q(tracked_ids.size());
    std::vector<const Grid<float>*> res_ptr(tracked_ids.size(), nullptr);
    for (size_t k = 0; k < tracked_ids.size(); ++k) {
      auto it = residuals.find(tracked_ids[k]);
      if (it != residuals.end() && it->second.width() == w) {
        res_q[k] = downsample_residual(it->second, s);
        res_ptr[k] = &res_q[k];
      }
    }

    UnaryField unary = densify_unary(drifts, flow_q, res_ptr, crf_q);
    CrfResult crf = mean_field_infer(unary, flow_q, crf_q);
    Grid<int32_t> up = upscale_argmax(crf.marginals, w, h, s);

    const int outlier_index = static_cast<int>(tracked_ids.size());
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        if (!frame.depth_valid_at(x, y)) continue;  // stays kNoLabel
        int k = up.at(x, y);
        if (k == outlier_index) {
          ids.at(x, y) = kOutlierLabel;
          ++outlier_px;
        } else {
          ids.at(x, y) = tracked_ids[k];
        }
      }
    event(ts, "SEGMENTATION",
          "labels=" + std::to_string(tracked_ids.size()) +
              " outlier_px=" + std::to_string(outlier_px));
  } else {
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        if (frame.depth_valid_at(x, y)) ids.at(x, y) = 0;
    event(ts, "SEGMENTATION", "skipped");
  }

  // ---- phase 3: modelling -----------------------------------------------------
  SegmentActions actions;
  if (do_seg) actions = resolve_segments(ids, scene_, failed, config_.crf);

  std::vector<std::string> details;
  for (int id : actions.lost) {
    auto node = scene_.tracked.extract(id);
    scene_.lost.insert(std::move(node));
    new_poses.erase(id);
    report.lost.push_back(id);
    details.push_back("LOST id=" + std::to_string(id));
  }

  for (const auto& blob : actions.spawns) {
    if (static_cast<int>(scene_.tracked.size()) >= config_.max_objects) break;
    // spawn only on moving evidence: a vacated or occluded patch is
    // unexplained too, but it is static and must not become an object
    double flow_sum = 0;
    int flow_n = 0;
    std::vector<Eigen::Vector2i> moving;
    moving.reserve(blob.size());
    for (const Eigen::Vector2i& p : blob)
      if (flow.valid.at(p.x(), p.y())) {
        double mag = flow.flow.at(p.x(), p.y()).norm();
        flow_sum += mag;
        ++flow_n;
        if (mag >= config_.crf.static_flow_threshold) moving.push_back(p);
      }
    if (flow_n == 0 || flow_sum / flow_n < config_.crf.static_flow_threshold) continue;
    // static pixels riding along in the blob (a freshly vacated band, mostly)
    // would poison the newborn model, so only the moving core seeds it
    if (static_cast<int>(moving.size()) < config_.crf.min_segment_px) continue;

    int id = spawn_object(scene_, frame, moving, ts);
    for (const Eigen::Vector2i& p : moving) ids.at(p.x(), p.y()) = id;
    carve_environment(blob, frame, new_poses.at(0));
    ObjectModel& obj = scene_.tracked.at(id);
    KeypointSet entry;
    entry.timestamp = ts;
    for (const Keypoint& kp : frame_kps.keypoints) {
      const Eigen::Vector2i& px = kp.source_pixel;
      if (!ids.in_bounds(px.x(), px.y()) || ids.at(px.x(), px.y()) != id) continue;
      Keypoint moved = kp;  // identity pose: model frame == camera frame
      moved.timestamp = ts;
      entry.keypoints.push_back(std::move(moved));
    }
    if (!entry.keypoints.empty()) obj.append_keypoint_history(std::move(entry));
    new_poses[id] = Pose();
    registered_frames_[id] = 1;
    report.spawned.push_back(id);
    details.push_back("SPAWN id=" + std::to_string(id) +
                      " px=" + std::to_string(blob.size()));
  }

  for (size_t i = 0; i < ids.size(); ++i)
    if (ids[i] == kOutlierLabel) ids[i] = SegmentationMap::kNoLabel;

  // Registration gate: a pixel only extends the model whose frame-to-frame
  // motion explains its observed flow best. The CRF can momentarily hand a
  // static pixel to a moving object (point-to-plane residuals are blind to a
  // surface sliding along itself); without this check those pixels would be
  // merged into the wrong cloud and the error would compound every frame.
  const SegmentationMap* reg_seg = &seg_;
  SegmentationMap gated;
  if (do_seg) {
    std::map<int, Pose> reg_deltas;
    for (const auto& [id, obj] : scene_.tracked) {
      if (!new_poses.count(id)) continue;
      if (std::find(report.spawned.begin(), report.spawned.end(), id) != report.spawned.end())
        continue;
      Pose w_prev = prev_poses_.count(id) ? prev_poses_.at(id) : obj.pose;
      reg_deltas.emplace(id, w_prev.compose(new_poses.at(id).inverse()));
    }
    gated = seg_;
    const double slack = 0.5 * config_.crf.static_flow_threshold;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        int32_t label = gated.labels.at(x, y);
        if (label == SegmentationMap::kNoLabel) continue;
        auto lit = reg_deltas.find(label);
        if (lit == reg_deltas.end()) continue;  // newborn models keep their seed
        if (!flow.valid.at(x, y) || !frame.depth_valid_at(x, y)) {
          gated.labels.at(x, y) = SegmentationMap::kNoLabel;
          continue;
        }
        Eigen::Vector3d p_cam = backproject(frame.intrinsics, x, y, frame.depth.values.at(x, y));
        const Eigen::Vector2f& f = flow.flow.at(x, y);
        Eigen::Vector2d observed_prev(x - f.x(), y - f.y());
        auto reproj = [&](const Pose& delta) {
          Eigen::Vector3d prev_cam = delta.apply(p_cam);
          if (prev_cam.z() <= 0) return std::numeric_limits<double>::infinity();
          return (project(frame.intrinsics, prev_cam) - observed_prev).norm();
        };
        double own = reproj(lit->second);
        double best = own;
        for (const auto& [id, delta] : reg_deltas)
          if (id != label) best = std::min(best, reproj(delta));
        if (own > best + slack) gated.labels.at(x, y) = SegmentationMap::kNoLabel;
      }
    reg_seg = &gated;
  }

  int registered = 0;
  for (auto& [id, obj] : scene_.tracked) {
    auto it = new_poses.find(id);
    if (it == new_poses.end()) continue;
    bool just_spawned =
        std::find(report.spawned.begin(), report.spawned.end(), id) != report.spawned.end();
    if (!just_spawned) {  // the spawn itself already consumed this frame's pixels
      register_frame_data(obj, frame, normals, *reg_seg, frame_kps, it->second, ts);
      ++registered_frames_[id];
    }
    obj.pose = it->second;
    ++registered;
    if (id != 0 && !obj.grasp && registered_frames_[id] >= config_.grasp_attach_frames) {
      try {
        GraspFrame g = fit_grasp_frame(obj.cloud);
        g.timestamp = ts;
        obj.grasp = g;
        details.push_back("GRASP id=" + std::to_string(id));
      } catch (const DegenerateCloud&) {
      }
    }
  }
  event(ts, "MODELLING",
        "registered=" + std::to_string(registered) +
            " spawned=" + std::to_string(report.spawned.size()) +
            " lost=" + std::to_string(report.lost.size()));
  for (std::string& d : details) events_.push_back(format_fixed("%.6f", ts) + " " + d);

  // ---- phase 4: redetection -----------------------------------------------------
  std::vector<std::string> redetect_details;
  if (!scene_.lost.empty()) {
    std::map<int, KeypointSet> segment_keypoints;
    for (const Keypoint& kp : frame_kps.keypoints) {
      const Eigen::Vector2i& px = kp.source_pixel;
      if (!ids.in_bounds(px.x(), px.y())) continue;
      int id = ids.at(px.x(), px.y());
      if (id <= 0 || !scene_.has_tracked(id)) continue;
      KeypointSet& set = segment_keypoints[id];
      set.frame_id = id;
      set.timestamp = ts;
      set.keypoints.push_back(kp);
    }
    auto redetections =
        redetector_.run(segment_keypoints, scene_.lost, stage_seed(frame.index, -1, 0x7D));
    for (const Redetection& r : redetections) {
      if (!scene_.has_tracked(r.segment_id) || !scene_.lost.count(r.lost_id)) continue;
      replace_duplicate(scene_, r.segment_id, r.lost_id, r.pose, &seg_);
      scene_.tracked.at(r.lost_id).append_pose_history(ts, r.pose);
      new_poses.erase(r.segment_id);
      new_poses[r.lost_id] = r.pose;
      registered_frames_.erase(r.segment_id);
      report.redetections.push_back(r);
      redetect_details.push_back("REDETECT original=" + std::to_string(r.lost_id) +
                                 " duplicate=" + std::to_string(r.segment_id) +
                                 " error=" + format_fixed("%.6f", r.error));
    }
  }
  event(ts, "REDETECTION",
        "lost=" + std::to_string(scene_.lost.size()) +
            " matched=" + std::to_string(report.redetections.size()));
  for (std::string& d : redetect_details)
    events_.push_back(format_fixed("%.6f", ts) + " " + d);

  // ---- bookkeeping ------------------------------------------------------------
  const Pose env_inverse = new_poses.at(0).inverse();
  camera_trajectory_.push_back({ts, env_inverse});
  for (const auto& [id, pose] : new_poses) {
    report.poses[id] = pose;
    if (id != 0) object_trajectories_[id].push_back({ts, env_inverse.compose(pose)});
  }
  prev_poses_.clear();
  for (const auto& [id, obj] : scene_.tracked) prev_poses_[id] = obj.pose;
  prev_frame_ = frame;
  prev_keypoints_ = std::move(frame_kps);
  return report;
}

// ---- end-to-end run -----------------------------------------------------------

void run_pipeline(const PipelineConfig& config) {
  validate_config(config);
  const fs::path out(config.output_dir);
  fs::create_directories(out / "models");
  if (config.segmentation) fs::create_directories(out / "seg");

  // input source + providers
  std::unique_ptr<SceneRenderer> renderer;
  DatasetIndex dataset;
  std::unique_ptr<KeypointProvider> keypoints;
  std::unique_ptr<FlowProvider> flow;
  int total = 0;
  if (!config.dataset_dir.empty()) {
    dataset = load_dataset_index(config.dataset_dir);
    if (!dataset.has_keypoint_dir)
      throw MmfError("dataset has no keypoints directory: " + config.dataset_dir);
    keypoints = std::make_unique<FileKeypointProvider>(
        (fs::path(dataset.root) / "keypoints").string());
    flow = std::make_unique<BlockMatchingFlowProvider>(config.flow);
    total = static_cast<int>(dataset.entries.size());
  } else {
    SceneScript script = config.sim_scenario.empty()
                             ? load_scene_script(config.sim_script)
                             : builtin_scenario(config.sim_scenario);
    renderer = std::make_unique<SceneRenderer>(std::move(script));
    keypoints = std::make_unique<SyntheticKeypointProvider>(*renderer);
    if (config.flow_source == "gt")
      flow = std::make_unique<GroundTruthFlowProvider>(*renderer);
    else
      flow = std::make_unique<BlockMatchingFlowProvider>(config.flow);
    total = renderer->frame_count();
  }
  if (config.max_frames >= 0) total = std::min(total, config.max_frames);
  if (total == 0) throw MmfError("input contains no frames");

  PipelineRunner runner(config, *keypoints, *flow);

  // ground-truth bookkeeping (simulator sources only)
  std::vector<double> gt_times;
  std::vector<Pose> gt_camera;
  std::vector<std::vector<Pose>> gt_bodies;
  std::map<int, int> body_of;     // object id -> script body index
  std::map<int, Pose> gt_anchor;  // object id -> model frame -> body frame

  for (int i = 0; i < total; ++i) {
    FramePair frame;
    RenderedFrame rendered;
    if (renderer) {
      rendered = renderer->render(i);
      frame = rendered.frame;
      gt_times.push_back(frame.timestamp);
      gt_camera.push_back(rendered.camera_pose);
      gt_bodies.push_back(rendered.body_poses);
    } else {
      frame = load_dataset_frame(dataset, i);
    }

    if (i == 0) {
      runner.initialize(frame);
    } else {
      FrameReport report = runner.process_frame(frame);
      if (renderer) {
        for (int id : report.spawned) {
          // majority body label over the new segment anchors the object to
          // one simulated body for the metrics
          std::map<int, int> votes;
          const Grid<int32_t>& labels = runner.segmentation().labels;
          for (int y = 0; y < labels.height(); ++y)
            for (int x = 0; x < labels.width(); ++x)
              if (labels.at(x, y) == id && rendered.body_labels.at(x, y) >= 0)
                ++votes[rendered.body_labels.at(x, y)];
          int best_body = -1, best_n = 0;
          for (const auto& [body, n] : votes)
            if (n > best_n) {
              best_n = n;
              best_body = body;
            }
          if (best_body >= 0) {
            body_of[id] = best_body;
            gt_anchor[id] =
                rendered.body_poses[best_body].inverse().compose(rendered.camera_pose);
          }
        }
      }
    }
    if (config.segmentation) {
      fs::path seg_path = out / "seg" / (format_timestamp(frame.timestamp) + ".pgm");
      save_segmentation_pgm(seg_path.string(), runner.segmentation());
    }
  }

  // trajectories
  save_tum_trajectory((out / "trajectory_cam.txt").string(), runner.camera_trajectory());
  for (const auto& [id, traj] : runner.object_trajectories())
    save_tum_trajectory((out / ("trajectory_obj_" + std::to_string(id) + ".txt")).string(),
                        traj);

  // models
  auto dump_model = [&](const ObjectModel& obj) {
    fs::path base = out / "models" / ("object_" + std::to_string(obj.id));
    save_ply(base.string() + ".ply", obj.cloud);
    if (!obj.keypoint_history.empty())
      save_keypoint_history(base.string() + ".kph", obj.keypoint_history);
  };
  for (const auto& [id, obj] : runner.scene().tracked) dump_model(obj);
  for (const auto& [id, obj] : runner.scene().lost) dump_model(obj);

  // event log
  {
    std::ofstream ev(out / "events.log", std::ios::binary);
    if (!ev) throw MmfError("cannot write " + (out / "events.log").string());
    for (const std::string& line : runner.events()) ev << line << '\n';
  }

  // metrics against ground truth
  if (renderer) {
    std::ofstream metrics(out / "metrics.csv", std::ios::binary);
    if (!metrics) throw MmfError("cannot write " + (out / "metrics.csv").string());
    metrics << "metric,value\n";

    Trajectory gt_cam_traj;
    for (size_t i = 0; i < gt_times.size(); ++i)
      gt_cam_traj.push_back({gt_times[i], gt_camera[i]});
    try {
      metrics << "ate_cam," << format_fixed("%.9f", ate_rmse(runner.camera_trajectory(), gt_cam_traj))
              << "\n";
    } catch (const NoOverlappingTimestamps&) {
    }

    auto frame_of = [&](double t) {
      auto it = std::lower_bound(gt_times.begin(), gt_times.end(), t - 1e-9);
      return static_cast<size_t>(it - gt_times.begin());
    };
    for (const auto& [id, traj] : runner.object_trajectories()) {
      if (!gt_anchor.count(id) || traj.size() < 2) continue;
      const ObjectModel* obj = nullptr;
      if (runner.scene().tracked.count(id)) obj = &runner.scene().tracked.at(id);
      else if (runner.scene().lost.count(id)) obj = &runner.scene().lost.at(id);
      if (!obj || obj->cloud.empty()) continue;  // replaced duplicates have no model
      const Eigen::Vector3d centre = cloud_centroid(obj->cloud);

      Trajectory est_c, gt_c;
      for (const TimedPose& s : traj) {
        size_t fi = frame_of(s.timestamp);
        if (fi >= gt_times.size()) continue;
        Pose gt_obj = gt_bodies[fi][body_of.at(id)].compose(gt_anchor.at(id));
        est_c.push_back(
            {s.timestamp, Pose(Eigen::Matrix3d::Identity(), s.pose.apply(centre))});
        gt_c.push_back(
            {s.timestamp, Pose(Eigen::Matrix3d::Identity(), gt_obj.apply(centre))});
      }
      try {
        metrics << "ate_obj_" << id << ","
                << format_fixed("%.9f", ate_rmse(est_c, gt_c)) << "\n";
      } catch (const NoOverlappingTimestamps&) {
      }
    }
  }
}

}  // namespace mmf
