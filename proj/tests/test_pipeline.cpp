#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <Eigen/Geometry>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "mmf/config.hpp"
#include "mmf/frame_frontend.hpp"
#include "mmf/pipeline.hpp"
#include "mmf/sim.hpp"

using namespace mmf;
namespace fs = std::filesystem;

namespace {

Pose make_pose(double x, double y, double z, double roll = 0, double pitch = 0,
               double yaw = 0) {
  Eigen::Matrix3d R =
      (Eigen::AngleAxisd(yaw, Eigen::Vector3d::UnitZ()) *
       Eigen::AngleAxisd(pitch, Eigen::Vector3d::UnitY()) *
       Eigen::AngleAxisd(roll, Eigen::Vector3d::UnitX()))
          .toRotationMatrix();
  return Pose(R, Eigen::Vector3d(x, y, z));
}

ScenePart part(const std::string& shape, double sx, double sy, double sz, const Pose& offset) {
  ScenePart p;
  p.shape = shape;
  p.size = Eigen::Vector3d(sx, sy, sz);
  p.offset = offset;
  return p;
}

TrajectorySegment twist(double t, double vx, double vy, double vz, double wx = 0, double wy = 0,
                        double wz = 0) {
  TrajectorySegment s;
  s.start_time = t;
  s.twist << vx, vy, vz, wx, wy, wz;
  return s;
}

// Quarter-size VGA camera; pixel-unit parameters shrink with the focal length.
void scale_for_small_camera(PipelineConfig& config) {
  config.crf.spatial_sigma = 5;
  config.crf.flow_sigma = 0.75;
  config.crf.static_flow_threshold = 0.25;
  config.crf.keypoint_radius_px = 10;
  config.crf.min_segment_px = 20;
  config.crf_scale = 2;
  config.flow_source = "gt";
}

SceneBody bench_env() {
  SceneBody env;
  env.name = "bench";
  env.texture_seed = 21;
  env.keypoint_spacing = 0.08;
  env.parts.push_back(part("plane", 2.4, 1.4, 0, make_pose(0, 0.1, 1.0, M_PI / 2)));
  env.parts.push_back(part("plane", 2.6, 1.4, 0, make_pose(0, -0.3, 1.9)));
  env.parts.push_back(part("cuboid", 0.18, 0.20, 0.15, make_pose(-0.55, 0.0, 1.35, 0, 0.6, 0)));
  env.parts.push_back(part("cuboid", 0.22, 0.14, 0.18, make_pose(0.50, 0.03, 1.25, 0, -0.4, 0)));
  return env;
}

SceneScript small_scene(double duration) {
  SceneScript s;
  s.name = "pipeline-test";
  s.intrinsics.fx = 131.25;
  s.intrinsics.fy = 131.25;
  s.intrinsics.cx = 79.875;
  s.intrinsics.cy = 59.875;
  s.intrinsics.width = 160;
  s.intrinsics.height = 120;
  s.frame_rate = 10;
  s.duration = duration;
  s.seed = 9;
  s.camera.start = make_pose(0, -0.5, 0, -25.0 * M_PI / 180.0);
  s.bodies.push_back(bench_env());
  return s;
}

SceneBody sliding_item(double x0, double onset, double vx) {
  SceneBody item;
  item.name = "item";
  item.texture_seed = 31;
  item.keypoint_spacing = 0.035;
  item.mean_intensity = 0.68;
  item.parts.push_back(part("cuboid", 0.16, 0.24, 0.12, make_pose(0, 0, 0, 0, 0.25, 0)));
  item.trajectory.start = make_pose(x0, -0.02, 1.25);
  item.trajectory.segments = {twist(onset, vx, 0, 0)};
  return item;
}

// Environment pose error against ground truth (est env model frame == camera
// frame of frame 0).
double env_error_mm(const Pose& est_env, const RenderedFrame& rf, const Pose& cam0) {
  Pose gt_env = rf.camera_pose.inverse().compose(cam0);
  return (est_env.translation() - gt_env.translation()).norm() * 1e3;
}

struct EventLine {
  std::string stamp;
  std::string token;
};

std::vector<EventLine> parse_events(const std::vector<std::string>& events) {
  std::vector<EventLine> out;
  for (const std::string& line : events) {
    std::istringstream in(line);
    EventLine e;
    in >> e.stamp >> e.token;
    out.push_back(e);
  }
  return out;
}

std::map<std::string, std::string> slurp_tree(const fs::path& root,
                                              const std::set<std::string>& skip = {}) {
  std::map<std::string, std::string> out;
  for (const auto& entry : fs::recursive_directory_iterator(root)) {
    if (!entry.is_regular_file()) continue;
    std::string rel = fs::relative(entry.path(), root).generic_string();
    if (skip.count(rel)) continue;
    std::ifstream in(entry.path(), std::ios::binary);
    out[rel] = std::string(std::istreambuf_iterator<char>(in), {});
  }
  return out;
}

fs::path fresh_dir(const std::string& name) {
  fs::path dir = fs::temp_directory_path() / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

}  // namespace

TEST_CASE("static scene stays a single tracked model") {
  SceneScript script = small_scene(2.0);
  script.camera.segments = {twist(0.0, 0, 0, 0, 0, 0.035, 0)};
  script.noise.depth_sigma = 0.001;

  SceneRenderer renderer(script);
  SyntheticKeypointProvider kp(renderer);
  GroundTruthFlowProvider flow(renderer);
  PipelineConfig config;
  config.sim_scenario = "test";
  scale_for_small_camera(config);
  PipelineRunner runner(config, kp, flow);

  Pose cam0;
  for (int i = 0; i < renderer.frame_count(); ++i) {
    RenderedFrame rf = renderer.render(i);
    if (i == 0) {
      cam0 = rf.camera_pose;
      runner.initialize(rf.frame);
      continue;
    }
    FrameReport rep = runner.process_frame(rf.frame);
    CHECK_FALSE(rep.dropped);
    CHECK(rep.spawned.empty());
    CHECK(rep.lost.empty());
    CHECK(env_error_mm(rep.poses.at(0), rf, cam0) < 2.0);
  }
  CHECK(runner.scene().tracked.size() == 1);
  CHECK(runner.scene().lost.empty());

  // Phase ordering: INIT once, then per frame ESTIMATION -> SEGMENTATION ->
  // MODELLING (REDETECTION only with lost objects, of which there are none).
  auto events = parse_events(runner.events());
  REQUIRE_FALSE(events.empty());
  CHECK(events.front().token == "INIT");
  const std::set<std::string> phases = {"INIT",      "DROP",      "ESTIMATION",
                                        "SEGMENTATION", "MODELLING", "REDETECTION"};
  std::string stamp;
  std::vector<std::string> group;
  auto check_group = [&]() {
    if (group.empty()) return;
    REQUIRE(group.size() == 3);
    CHECK(group[0] == "ESTIMATION");
    CHECK(group[1] == "SEGMENTATION");
    CHECK(group[2] == "MODELLING");
  };
  for (size_t k = 1; k < events.size(); ++k) {
    if (!phases.count(events[k].token)) continue;
    if (events[k].stamp != stamp) {
      check_group();
      group.clear();
      stamp = events[k].stamp;
    }
    group.push_back(events[k].token);
  }
  check_group();
}

TEST_CASE("moving object is discovered, tracked and grasped") {
  SceneScript script = small_scene(3.0);
  script.bodies.push_back(sliding_item(-0.35, 1.0, 0.25));

  SceneRenderer renderer(script);
  SyntheticKeypointProvider kp(renderer);
  GroundTruthFlowProvider flow(renderer);
  PipelineConfig config;
  config.sim_scenario = "test";
  scale_for_small_camera(config);
  PipelineRunner runner(config, kp, flow);

  Pose cam0, anchor;
  int item_id = -1, spawn_frame = -1, gt_body = -1;
  double final_iou = -1;
  for (int i = 0; i < renderer.frame_count(); ++i) {
    RenderedFrame rf = renderer.render(i);
    if (i == 0) {
      cam0 = rf.camera_pose;
      runner.initialize(rf.frame);
      continue;
    }
    FrameReport rep = runner.process_frame(rf.frame);
    CHECK_FALSE(rep.dropped);
    CHECK(env_error_mm(rep.poses.at(0), rf, cam0) < 5.0);

    if (!rep.spawned.empty()) {
      REQUIRE(item_id == -1);  // exactly one discovery
      item_id = rep.spawned.front();
      spawn_frame = i;
      const auto& seg = runner.segmentation();
      std::map<int, int> votes;
      for (int p = 0; p < seg.width() * seg.height(); ++p)
        if (seg.labels[p] == item_id && rf.body_labels[p] >= 0) votes[rf.body_labels[p]]++;
      for (auto& [body, n] : votes)
        if (gt_body < 0 || n > votes[gt_body]) gt_body = body;
      anchor = rf.body_poses[gt_body].inverse().compose(rf.camera_pose);
    } else if (item_id >= 0 && i > spawn_frame) {
      REQUIRE(rep.poses.count(item_id) == 1);
      Pose gt_item = rf.camera_pose.inverse().compose(rf.body_poses[gt_body]).compose(anchor);
      Pose est = rep.poses.at(item_id);
      CHECK((est.translation() - gt_item.translation()).norm() < 0.015);
      CHECK(est.compose(gt_item.inverse()).rotation_angle() * 180.0 / M_PI < 2.0);
    }
    if (i + 1 == renderer.frame_count() && item_id >= 0) {
      const auto& seg = runner.segmentation();
      int inter = 0, uni = 0;
      for (int p = 0; p < seg.width() * seg.height(); ++p) {
        bool est = seg.labels[p] == item_id;
        bool gt = rf.body_labels[p] == gt_body;
        inter += est && gt;
        uni += est || gt;
      }
      final_iou = uni > 0 ? double(inter) / uni : 0.0;
    }
  }
  REQUIRE(item_id >= 0);
  CHECK(gt_body == 1);
  CHECK(spawn_frame >= 11);
  CHECK(spawn_frame <= 14);
  CHECK(runner.scene().tracked.size() == 2);
  CHECK(final_iou >= 0.8);

  bool grasped = false;
  for (const std::string& line : runner.events())
    if (line.find("GRASP id=" + std::to_string(item_id)) != std::string::npos) grasped = true;
  CHECK(grasped);
  CHECK(runner.scene().tracked.at(item_id).grasp.has_value());
}

TEST_CASE("environment estimation failure drops the frame and recovers") {
  SceneScript script = small_scene(1.0);
  SceneRenderer renderer(script);
  SyntheticKeypointProvider kp(renderer);
  GroundTruthFlowProvider flow(renderer);
  PipelineConfig config;
  config.sim_scenario = "test";
  scale_for_small_camera(config);
  config.segmentation = false;
  PipelineRunner runner(config, kp, flow);

  Pose cam0;
  for (int i = 0; i < 5; ++i) {
    RenderedFrame rf = renderer.render(i);
    if (i == 0) {
      cam0 = rf.camera_pose;
      runner.initialize(rf.frame);
      continue;
    }
    CHECK_FALSE(runner.process_frame(rf.frame).dropped);
  }

  // A frame with no usable depth defeats both estimation stages.
  RenderedFrame rf5 = renderer.render(5);
  FramePair broken = rf5.frame;
  broken.depth.values.fill(0.0);
  FrameReport rep = runner.process_frame(broken);
  CHECK(rep.dropped);
  CHECK(rep.poses.empty());

  bool drop_logged = false;
  for (const std::string& line : runner.events())
    if (line.find("DROP") != std::string::npos) drop_logged = true;
  CHECK(drop_logged);

  // The next valid frame resumes tracking against the stored model.
  RenderedFrame rf6 = renderer.render(6);
  FrameReport rec = runner.process_frame(rf6.frame);
  CHECK_FALSE(rec.dropped);
  CHECK(env_error_mm(rec.poses.at(0), rf6, cam0) < 2.0);
  CHECK(runner.scene().tracked.size() == 1);
}

TEST_CASE("object leaving the view goes lost while tracking continues") {
  SceneScript script = small_scene(2.8);
  script.bodies.push_back(sliding_item(0.45, 0.8, 0.35));

  SceneRenderer renderer(script);
  SyntheticKeypointProvider kp(renderer);
  GroundTruthFlowProvider flow(renderer);
  PipelineConfig config;
  config.sim_scenario = "test";
  scale_for_small_camera(config);
  PipelineRunner runner(config, kp, flow);

  Pose cam0;
  int item_id = -1;
  bool lost_seen = false;
  for (int i = 0; i < renderer.frame_count(); ++i) {
    RenderedFrame rf = renderer.render(i);
    if (i == 0) {
      cam0 = rf.camera_pose;
      runner.initialize(rf.frame);
      continue;
    }
    FrameReport rep = runner.process_frame(rf.frame);
    CHECK_FALSE(rep.dropped);
    if (!rep.spawned.empty() && item_id < 0) item_id = rep.spawned.front();
    for (int id : rep.lost)
      if (id == item_id) lost_seen = true;
    CHECK(env_error_mm(rep.poses.at(0), rf, cam0) < 5.0);
  }
  REQUIRE(item_id >= 0);
  CHECK(lost_seen);
  CHECK(runner.scene().tracked.size() == 1);
  CHECK(runner.scene().lost.count(item_id) == 1);

  bool lost_logged = false;
  for (const std::string& line : runner.events())
    if (line.find("LOST id=" + std::to_string(item_id)) != std::string::npos) lost_logged = true;
  CHECK(lost_logged);
}

TEST_CASE("pipeline artifacts are byte-for-byte deterministic") {
  SceneScript script = small_scene(3.0);
  script.bodies.push_back(sliding_item(-0.35, 1.0, 0.25));
  fs::path dir = fresh_dir("mmf_pipe_det");
  fs::path script_path = dir / "scene.json";
  save_scene_script(script_path.string(), script);

  PipelineConfig config;
  config.sim_script = script_path.string();
  scale_for_small_camera(config);
  config.seed = 5;
  config.max_frames = 18;

  config.output_dir = (dir / "a").string();
  run_pipeline(config);
  config.output_dir = (dir / "b").string();
  run_pipeline(config);

  auto a = slurp_tree(dir / "a");
  auto b = slurp_tree(dir / "b");
  REQUIRE_FALSE(a.empty());
  CHECK(a.count("trajectory_cam.txt") == 1);
  CHECK(a.count("trajectory_obj_1.txt") == 1);
  CHECK(a.count("events.log") == 1);
  CHECK(a.count("metrics.csv") == 1);
  CHECK(a.count("models/object_0.ply") == 1);
  CHECK(a.count("models/object_1.ply") == 1);
  REQUIRE(a.size() == b.size());
  for (const auto& [rel, bytes] : a) {
    REQUIRE(b.count(rel) == 1);
    CHECK_MESSAGE(bytes == b.at(rel), rel);
  }
  fs::remove_all(dir);
}

TEST_CASE("dataset export reproduces the simulator run byte for byte") {
  SceneScript s;
  s.name = "roundtrip";
  s.intrinsics.fx = 78.75;
  s.intrinsics.fy = 78.75;
  s.intrinsics.cx = 47.875;
  s.intrinsics.cy = 35.875;
  s.intrinsics.width = 96;
  s.intrinsics.height = 72;
  s.frame_rate = 10;
  s.duration = 0.7;
  s.seed = 4;
  s.camera.start = make_pose(0, -0.5, 0, -25.0 * M_PI / 180.0);
  s.camera.segments = {twist(0.0, 0, 0, 0, 0, 0.03, 0)};
  SceneBody env = bench_env();
  env.keypoint_spacing = 0.1;
  s.bodies.push_back(env);

  fs::path dir = fresh_dir("mmf_pipe_rt");
  fs::path script_path = dir / "scene.json";
  save_scene_script(script_path.string(), s);

  // Export the rendered frames (with keypoint heatmaps) as an on-disk dataset.
  SceneRenderer renderer(s);
  fs::path data_dir = dir / "data";
  DatasetWriter writer(data_dir.string(), s.intrinsics);
  for (int i = 0; i < renderer.frame_count(); ++i) {
    RenderedFrame rf = renderer.render(i);
    KeypointHeatmap heat = renderer.keypoint_heatmap(i);
    writer.add_frame(rf.frame, &heat);
  }
  writer.finish();

  PipelineConfig config;
  config.sim_script = script_path.string();
  config.crf.spatial_sigma = 3;
  config.crf.flow_sigma = 0.45;
  config.crf.static_flow_threshold = 0.15;
  config.crf.keypoint_radius_px = 6;
  config.crf.min_segment_px = 7;
  config.crf_scale = 2;
  config.flow_source = "block";  // the only flow a replayed dataset can offer
  config.seed = 11;
  config.output_dir = (dir / "sim_out").string();
  run_pipeline(config);

  PipelineConfig replay;
  replay.dataset_dir = data_dir.string();
  replay.crf = config.crf;
  replay.crf_scale = config.crf_scale;
  replay.flow_source = "block";
  replay.seed = 11;
  replay.output_dir = (dir / "data_out").string();
  run_pipeline(replay);

  // Ground-truth metrics exist only for the simulated source.
  auto a = slurp_tree(dir / "sim_out", {"metrics.csv"});
  auto b = slurp_tree(dir / "data_out");
  REQUIRE_FALSE(a.empty());
  REQUIRE(a.size() == b.size());
  for (const auto& [rel, bytes] : a) {
    REQUIRE(b.count(rel) == 1);
    CHECK_MESSAGE(bytes == b.at(rel), rel);
  }
  fs::remove_all(dir);
}

TEST_CASE("config layering and validation") {
  PipelineConfig config;
  CHECK_THROWS_AS(apply_config_override(config, "no.such.key", "1"), MmfError);
  CHECK_THROWS_AS(apply_config_override(config, "icp.max_iterations", "not-a-number"), MmfError);

  fs::path dir = fresh_dir("mmf_pipe_cfg");
  fs::path cfg_path = dir / "run.json";
  {
    std::ofstream out(cfg_path);
    out << "{\"mode\": \"sparse\", \"icp.max_iterations\": 7, \"seed\": 3}\n";
  }
  PipelineConfig loaded = load_config_file(cfg_path.string());
  CHECK(loaded.mode == "sparse");
  CHECK(loaded.icp.max_iterations == 7);
  CHECK(loaded.seed == 3);
  apply_config_override(loaded, "seed", "12");  // later layers win
  CHECK(loaded.seed == 12);

  loaded.sim_scenario = "conveyor_up";
  validate_config(loaded);
  loaded.mode = "wrong";
  CHECK_THROWS_AS(validate_config(loaded), MmfError);
  loaded.mode = "sparse+dense";
  loaded.flow_source = "gt";
  loaded.sim_scenario.clear();
  loaded.dataset_dir = "somewhere";
  CHECK_THROWS_AS(validate_config(loaded), MmfError);  // replay cannot use gt flow
  loaded.flow_source = "block";
  loaded.dataset_dir.clear();
  CHECK_THROWS_AS(validate_config(loaded), MmfError);  // no source at all
  fs::remove_all(dir);
}
