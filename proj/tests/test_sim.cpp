#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "mmf/errors.hpp"
#include "mmf/frame_frontend.hpp"
#include "mmf/sim.hpp"
#include "test_support.hpp"

using namespace mmf;

namespace {

CameraIntrinsics small_intrinsics() {
  CameraIntrinsics K;
  K.fx = 130;
  K.fy = 130;
  K.cx = 79.5;
  K.cy = 59.5;
  K.width = 160;
  K.height = 120;
  return K;
}

Pose pose_rpy(double x, double y, double z, double roll = 0, double pitch = 0,
              double yaw = 0) {
  Eigen::Matrix3d R = (Eigen::AngleAxisd(yaw, Eigen::Vector3d::UnitZ()) *
                       Eigen::AngleAxisd(pitch, Eigen::Vector3d::UnitY()) *
                       Eigen::AngleAxisd(roll, Eigen::Vector3d::UnitX()))
                          .toRotationMatrix();
  return Pose(R, Eigen::Vector3d(x, y, z));
}

ScenePart part(const std::string& shape, double sx, double sy, double sz,
               const Pose& offset) {
  ScenePart p;
  p.shape = shape;
  p.size = Eigen::Vector3d(sx, sy, sz);
  p.offset = offset;
  return p;
}

TrajectorySegment segment(double t, double vx, double vy, double vz, double wx,
                          double wy, double wz) {
  TrajectorySegment s;
  s.start_time = t;
  s.twist << vx, vy, vz, wx, wy, wz;
  return s;
}

SceneScript plane_script(const Pose& plane_pose, double depth_sigma = 0) {
  SceneScript s;
  s.name = "plane_test";
  s.intrinsics = small_intrinsics();
  s.frame_rate = 10;
  s.duration = 0.5;
  s.seed = 9;
  s.noise.depth_sigma = depth_sigma;
  SceneBody b;
  b.name = "wall";
  b.texture_seed = 3;
  b.keypoint_spacing = 0.06;
  b.parts.push_back(part("plane", 2, 2, 0, plane_pose));
  s.bodies.push_back(b);
  return s;
}

// Backdrop plane plus a cuboid sliding sideways; camera drifts and yaws.
SceneScript moving_script() {
  SceneScript s;
  s.name = "moving_test";
  s.intrinsics = small_intrinsics();
  s.frame_rate = 10;
  s.duration = 1.0;
  s.seed = 12;
  SceneBody wall;
  wall.name = "wall";
  wall.texture_seed = 5;
  wall.keypoint_spacing = 0.1;
  wall.parts.push_back(part("plane", 3, 3, 0, pose_rpy(0, 0, 2.0)));
  s.bodies.push_back(wall);
  SceneBody box;
  box.name = "box";
  box.texture_seed = 6;
  box.keypoint_spacing = 0.04;
  box.parts.push_back(part("cuboid", 0.3, 0.3, 0.3, Pose()));
  box.trajectory.start = pose_rpy(-0.2, 0, 1.2);
  box.trajectory.segments = {segment(0.1, 0.25, 0, 0, 0, 0, 0)};
  s.bodies.push_back(box);
  s.camera.segments = {segment(0.15, 0.02, 0, 0.01, 0, 0.15, 0)};
  return s;
}

std::string fresh_dir(const std::string& name) {
  std::string dir = "/tmp/mmf_sim_" + name;
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace

TEST_CASE("sim: piecewise twist trajectory composes segments in order") {
  BodyTrajectory traj;
  traj.start = pose_rpy(1, 0, 0);
  traj.segments = {segment(1.0, 1, 0, 0, 0, 0, 0),   // +x at 1 m/s
                   segment(2.0, 0, 0, 0, 0, 0, 0),   // pause
                   segment(3.0, 0, 2, 0, 0, 0, 0)};  // +y at 2 m/s

  CHECK(test::pose_close(traj.pose_at(0.0), traj.start, 1e-12));
  CHECK(test::pose_close(traj.pose_at(0.7), traj.start, 1e-12));
  CHECK(traj.pose_at(1.5).translation().isApprox(Eigen::Vector3d(1.5, 0, 0), 1e-12));
  CHECK(traj.pose_at(2.5).translation().isApprox(Eigen::Vector3d(2, 0, 0), 1e-12));
  CHECK(traj.pose_at(3.5).translation().isApprox(Eigen::Vector3d(2, 1, 0), 1e-12));
}

TEST_CASE("sim: rotation-in-place segment keeps the body centre fixed") {
  SceneScript s = builtin_scenario("redetect");
  const BodyTrajectory& item = s.bodies.at(1).trajectory;
  Eigen::Vector3d center = item.pose_at(5.6).translation();
  for (double t : {5.9, 6.5, 7.3, 7.6}) {
    Pose p = item.pose_at(t);
    CHECK((p.translation() - center).norm() < 1e-9);
  }
  double angle = item.pose_at(7.6).rotation_angle() - item.pose_at(5.6).rotation_angle();
  CHECK(std::abs(std::abs(angle) - 0.35 * 2.0) < 1e-9);
}

TEST_CASE("sim: frame counts and timestamps") {
  SceneScript s = builtin_scenario("conveyor_up");
  CHECK(s.frame_count() == 101);
  CHECK(s.timestamp(0) == 0.0);
  CHECK(s.timestamp(10) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(builtin_scenario("rotation").frame_count() == 86);
  CHECK(builtin_scenario("manipulation").frame_count() == 81);
  CHECK(builtin_scenario("redetect").frame_count() == 121);
}

TEST_CASE("sim: frontoparallel plane renders exact constant depth") {
  SceneRenderer r(plane_script(pose_rpy(0, 0, 2.0)));
  RenderedFrame f = r.render(0);
  const CameraIntrinsics& K = f.frame.intrinsics;
  int covered = 0;
  for (int y = 0; y < K.height; ++y)
    for (int x = 0; x < K.width; ++x) {
      if (f.body_labels.at(x, y) != 0) continue;
      ++covered;
      CHECK(f.gt_depth.at(x, y) == doctest::Approx(2.0).epsilon(1e-12));
      CHECK(f.frame.depth.values.at(x, y) == doctest::Approx(2.0).epsilon(1e-9));
    }
  CHECK(covered > 5000);
  // plane is 2x2 at 2 m; the image corners see past it
  CHECK(f.body_labels.at(0, 0) == -1);
  CHECK(f.body_labels.at(K.width - 1, K.height - 1) == -1);
}

TEST_CASE("sim: backprojected surface points lie on the authored plane") {
  Pose plane_pose = pose_rpy(0.1, -0.05, 1.8, 0.2, -0.5, 0.15);
  SceneRenderer r(plane_script(plane_pose));
  RenderedFrame f = r.render(0);
  const CameraIntrinsics& K = f.frame.intrinsics;
  Eigen::Vector3d n = plane_pose.rotate(Eigen::Vector3d::UnitZ());
  int checked = 0;
  for (int y = 0; y < K.height; y += 3)
    for (int x = 0; x < K.width; x += 3) {
      if (f.body_labels.at(x, y) != 0) continue;
      Eigen::Vector3d p = backproject(K, x, y, f.gt_depth.at(x, y));
      CHECK(std::abs(n.dot(p - plane_pose.translation())) < 1e-9);
      ++checked;
    }
  CHECK(checked > 500);
}

TEST_CASE("sim: rendering is deterministic and cache independent") {
  SceneScript s = builtin_scenario("conveyor_up");
  SceneRenderer a(s);
  SceneRenderer b(s);
  RenderedFrame fa = a.render(3);
  // exercise b's buffer cache with other frames first
  b.render(1);
  b.render(2);
  RenderedFrame fb = b.render(3);
  CHECK(fa.frame.intensity == fb.frame.intensity);
  CHECK(fa.frame.depth.values == fb.frame.depth.values);
  CHECK(fa.body_labels == fb.body_labels);
  CHECK(fa.gt_flow.flow == fb.gt_flow.flow);
  CHECK(fa.gt_flow.valid == fb.gt_flow.valid);

  KeypointHeatmap ha = a.keypoint_heatmap(3);
  KeypointHeatmap hb = b.keypoint_heatmap(3);
  CHECK(ha.response_grid() == hb.response_grid());
  int with_desc = 0;
  for (int y = 0; y < ha.height(); ++y)
    for (int x = 0; x < ha.width(); ++x)
      if (ha.has_descriptor(x, y)) {
        ++with_desc;
        CHECK(ha.descriptor(x, y) == hb.descriptor(x, y));
      }
  CHECK(with_desc > 200);
}

TEST_CASE("sim: ground-truth flow matches warping by ground-truth poses") {
  SceneRenderer r(moving_script());
  RenderedFrame prev = r.render(4);
  RenderedFrame cur = r.render(5);
  const CameraIntrinsics& K = cur.frame.intrinsics;

  std::vector<Pose> prev_from_cur;
  for (size_t b = 0; b < prev.body_poses.size(); ++b) {
    prev_from_cur.push_back(prev.camera_pose.inverse()
                                .compose(prev.body_poses[b])
                                .compose(cur.body_poses[b].inverse())
                                .compose(cur.camera_pose));
  }

  int valid = 0;
  double max_err = 0;
  for (int y = 0; y < K.height; ++y)
    for (int x = 0; x < K.width; ++x) {
      if (!cur.gt_flow.valid.at(x, y)) continue;
      int body = cur.body_labels.at(x, y);
      REQUIRE(body >= 0);
      Eigen::Vector3d p = backproject(K, x, y, cur.gt_depth.at(x, y));
      Eigen::Vector2d reproj = project(K, prev_from_cur[body].apply(p));
      Eigen::Vector2d expect(x - reproj.x(), y - reproj.y());
      Eigen::Vector2f d = cur.gt_flow.flow.at(x, y);
      max_err = std::max(max_err, (expect - d.cast<double>()).norm());
      ++valid;
    }
  CHECK(valid > 10000);
  CHECK(max_err < 1e-6);
}

TEST_CASE("sim: flow is invalid on frame 0 and behind a moving occluder") {
  SceneRenderer r(moving_script());
  RenderedFrame f0 = r.render(0);
  for (int y = 0; y < f0.gt_flow.valid.height(); y += 7)
    for (int x = 0; x < f0.gt_flow.valid.width(); x += 7)
      CHECK(f0.gt_flow.valid.at(x, y) == 0);

  // While the box slides, freshly revealed wall pixels have no previous
  // observation and must be flagged invalid despite carrying a label.
  RenderedFrame f5 = r.render(5);
  int disoccluded = 0;
  for (int y = 0; y < f5.body_labels.height(); ++y)
    for (int x = 0; x < f5.body_labels.width(); ++x)
      if (f5.body_labels.at(x, y) >= 0 && !f5.gt_flow.valid.at(x, y)) ++disoccluded;
  CHECK(disoccluded > 20);
}

TEST_CASE("sim: conveyor item moves at the scripted belt speed") {
  SceneScript s = builtin_scenario("conveyor_up");
  const BodyTrajectory& item = s.bodies.at(1).trajectory;
  CHECK(test::pose_close(item.pose_at(0.0), item.pose_at(0.9), 1e-12));
  Eigen::Vector3d step = item.pose_at(3.0).translation() - item.pose_at(2.0).translation();
  CHECK(step.isApprox(Eigen::Vector3d(0.068, 0, 0), 1e-12));
  Eigen::Vector3d down = builtin_scenario("conveyor_down")
                             .bodies.at(1)
                             .trajectory.pose_at(3.0)
                             .translation() -
                         builtin_scenario("conveyor_down")
                             .bodies.at(1)
                             .trajectory.pose_at(2.0)
                             .translation();
  CHECK(down.isApprox(Eigen::Vector3d(-0.068, 0, 0), 1e-12));
}

TEST_CASE("sim: builtin scenarios render with full scene coverage") {
  for (const std::string& name : builtin_scenario_names()) {
    CAPTURE(name);
    SceneRenderer r(builtin_scenario(name));
    RenderedFrame f = r.render(0);
    const CameraIntrinsics& K = f.frame.intrinsics;
    int labeled = 0;
    for (int y = 0; y < K.height; ++y)
      for (int x = 0; x < K.width; ++x)
        if (f.body_labels.at(x, y) >= 0) {
          ++labeled;
          CHECK(f.frame.depth.values.at(x, y) > 0.0f);
        }
    CHECK(labeled > static_cast<int>(0.85 * K.width * K.height));
  }
}

TEST_CASE("sim: conveyor item stays fully inside the image while tracked") {
  SceneRenderer r(builtin_scenario("conveyor_up"));
  for (int index : {15, 30, 60, 100}) {
    RenderedFrame f = r.render(index);
    int minx = 1 << 30, maxx = -1, miny = 1 << 30, maxy = -1, area = 0;
    for (int y = 0; y < f.body_labels.height(); ++y)
      for (int x = 0; x < f.body_labels.width(); ++x)
        if (f.body_labels.at(x, y) == 1) {
          minx = std::min(minx, x);
          maxx = std::max(maxx, x);
          miny = std::min(miny, y);
          maxy = std::max(maxy, y);
          ++area;
        }
    CAPTURE(index);
    CHECK(area > 1500);
    CHECK(minx > 5);
    CHECK(maxx < 634);
    CHECK(miny > 5);
    CHECK(maxy < 474);
  }
}

TEST_CASE("sim: redetect item leaves the view and returns") {
  SceneRenderer r(builtin_scenario("redetect"));
  auto item_area = [&](int index) {
    RenderedFrame f = r.render(index);
    int area = 0;
    for (int y = 0; y < f.body_labels.height(); ++y)
      for (int x = 0; x < f.body_labels.width(); ++x)
        if (f.body_labels.at(x, y) == 1) ++area;
    return area;
  };
  CHECK(item_area(30) > 2000);   // first pass
  CHECK(item_area(60) == 0);     // fully out of view (during the turn)
  CHECK(item_area(75) == 0);     // still away: gap is comfortably > 20 frames
  CHECK(item_area(100) > 2000);  // back in view, rotated
}

TEST_CASE("sim: anchors repeat identically across frames without noise") {
  SceneRenderer r(builtin_scenario("redetect"));  // zero-noise scenario
  RenderedFrame fa = r.render(10);
  RenderedFrame fb = r.render(12);
  KeypointSet ka = extract_keypoints(r.keypoint_heatmap(10), fa.frame);
  KeypointSet kb = extract_keypoints(r.keypoint_heatmap(12), fb.frame);
  REQUIRE(ka.keypoints.size() > 100);
  REQUIRE(kb.keypoints.size() > 100);

  int matched = 0;
  for (size_t i = 0; i < ka.keypoints.size(); i += 17) {
    const Keypoint& kp = ka.keypoints[i];
    float best = std::numeric_limits<float>::max();
    size_t best_j = 0;
    for (size_t j = 0; j < kb.keypoints.size(); ++j) {
      float d = (kb.keypoints[j].descriptor - kp.descriptor).squaredNorm();
      if (d < best) {
        best = d;
        best_j = j;
      }
    }
    if (best == 0.0f) {
      ++matched;
      // matching anchors back-project to the same static world point
      Eigen::Vector3d wa = fa.camera_pose.apply(kp.position);
      Eigen::Vector3d wb = fb.camera_pose.apply(kb.keypoints[best_j].position);
      int label = fa.body_labels.at(kp.source_pixel.x(), kp.source_pixel.y());
      if (label == 0) CHECK((wa - wb).norm() < 5e-3);
    }
  }
  CHECK(matched > 3);
}

TEST_CASE("sim: descriptor noise perturbs but does not destroy identity") {
  SceneRenderer r(builtin_scenario("conveyor_up"));  // descriptor sigma 0.03
  RenderedFrame fa = r.render(2);
  KeypointSet ka = extract_keypoints(r.keypoint_heatmap(2), fa.frame);
  RenderedFrame fb = r.render(3);
  KeypointSet kb = extract_keypoints(r.keypoint_heatmap(3), fb.frame);
  REQUIRE(ka.keypoints.size() > 100);
  int close = 0, total = 0;
  for (size_t i = 0; i < ka.keypoints.size(); i += 11) {
    float best = std::numeric_limits<float>::max();
    for (size_t j = 0; j < kb.keypoints.size(); ++j)
      best = std::min(best, (kb.keypoints[j].descriptor - ka.keypoints[i].descriptor)
                                .squaredNorm());
    ++total;
    // two independently noised copies: |d|^2 ~ 2*256*sigma^2 ~ 0.46, random ~ 2
    if (best > 0.0f && best < 1.0f) ++close;
  }
  CHECK(close > total * 7 / 10);
}

TEST_CASE("sim: depth noise statistics match the scripted sigma") {
  SceneRenderer r(plane_script(pose_rpy(0, 0, 2.0), 0.002));
  RenderedFrame f = r.render(0);
  double sum = 0, sum2 = 0;
  int n = 0;
  for (int y = 0; y < f.body_labels.height(); ++y)
    for (int x = 0; x < f.body_labels.width(); ++x) {
      if (f.body_labels.at(x, y) != 0) continue;
      if (!(f.frame.depth.values.at(x, y) > 0)) continue;
      double d = f.frame.depth.values.at(x, y) - f.gt_depth.at(x, y);
      sum += d;
      sum2 += d * d;
      ++n;
    }
  REQUIRE(n > 5000);
  double mean = sum / n;
  double stddev = std::sqrt(sum2 / n - mean * mean);
  CHECK(std::abs(mean) < 2e-4);
  CHECK(stddev > 0.0016);
  CHECK(stddev < 0.0024);
}

TEST_CASE("sim: scene script JSON round trip") {
  SceneScript s = builtin_scenario("conveyor_up");
  std::string dir = fresh_dir("script");
  save_scene_script(dir + "/scene.json", s);
  SceneScript t = load_scene_script(dir + "/scene.json");

  CHECK(t.name == s.name);
  CHECK(t.frame_rate == s.frame_rate);
  CHECK(t.duration == s.duration);
  CHECK(t.seed == s.seed);
  CHECK(t.noise.depth_sigma == s.noise.depth_sigma);
  CHECK(t.noise.descriptor_sigma == s.noise.descriptor_sigma);
  CHECK(t.noise.outlier_rate == s.noise.outlier_rate);
  CHECK(t.intrinsics.fx == s.intrinsics.fx);
  CHECK(t.intrinsics.width == s.intrinsics.width);
  REQUIRE(t.bodies.size() == s.bodies.size());
  CHECK(test::pose_close(t.camera.pose_at(3.3), s.camera.pose_at(3.3), 1e-9));
  for (size_t b = 0; b < s.bodies.size(); ++b) {
    CHECK(t.bodies[b].name == s.bodies[b].name);
    CHECK(t.bodies[b].texture_seed == s.bodies[b].texture_seed);
    CHECK(t.bodies[b].keypoint_spacing == s.bodies[b].keypoint_spacing);
    REQUIRE(t.bodies[b].parts.size() == s.bodies[b].parts.size());
    for (size_t p = 0; p < s.bodies[b].parts.size(); ++p) {
      CHECK(t.bodies[b].parts[p].shape == s.bodies[b].parts[p].shape);
      CHECK(t.bodies[b].parts[p].size.isApprox(s.bodies[b].parts[p].size, 1e-12));
      CHECK(test::pose_close(t.bodies[b].parts[p].offset, s.bodies[b].parts[p].offset,
                             1e-9));
    }
    CHECK(test::pose_close(t.bodies[b].trajectory.pose_at(7.7),
                           s.bodies[b].trajectory.pose_at(7.7), 1e-9));
  }
}

TEST_CASE("sim: error paths") {
  CHECK_THROWS_AS(builtin_scenario("nope"), MmfError);
  CHECK_THROWS_AS(load_scene_script("/tmp/does_not_exist_mmf.json"), MalformedFile);

  std::string dir = fresh_dir("bad_script");
  {
    std::ofstream out(dir + "/bad.json");
    out << "{ not json";
  }
  CHECK_THROWS_AS(load_scene_script(dir + "/bad.json"), MalformedFile);
  {
    std::ofstream out(dir + "/nobody.json");
    out << R"({"intrinsics":{"fx":100,"fy":100,"cx":50,"cy":50,"width":100,"height":100},)"
        << R"("bodies":[]})";
  }
  CHECK_THROWS_AS(load_scene_script(dir + "/nobody.json"), MalformedFile);

  SceneScript s = plane_script(pose_rpy(0, 0, 2.0));
  s.bodies[0].parts[0].shape = "sphere";
  CHECK_THROWS_AS(SceneRenderer{s}, MalformedFile);

  SceneRenderer ok(plane_script(pose_rpy(0, 0, 2.0)));
  CHECK_THROWS_AS(ok.render(-1), MmfError);
  CHECK_THROWS_AS(ok.render(ok.frame_count()), MmfError);
}

TEST_CASE("sim: exported heatmap files reproduce the direct provider bit for bit") {
  SceneRenderer r(builtin_scenario("conveyor_up"));
  RenderedFrame f = r.render(5);
  KeypointHeatmap direct = r.keypoint_heatmap(5);

  std::string dir = fresh_dir("kpfiles");
  save_keypoint_file(dir + "/" + format_timestamp(f.frame.timestamp) + ".mmkp", direct);
  FileKeypointProvider provider(dir);
  KeypointHeatmap loaded = provider.compute(f.frame);

  CHECK(loaded.response_grid() == direct.response_grid());
  for (int y = 0; y < direct.height(); ++y)
    for (int x = 0; x < direct.width(); ++x) {
      if (!direct.has_descriptor(x, y)) continue;
      CHECK(loaded.descriptor(x, y) == direct.descriptor(x, y));
    }

  SyntheticKeypointProvider synth(r);
  KeypointHeatmap again = synth.compute(f.frame);
  CHECK(again.response_grid() == direct.response_grid());
}

TEST_CASE("sim: ground truth flow provider needs consecutive frames") {
  SceneRenderer r(moving_script());
  GroundTruthFlowProvider flow(r);
  RenderedFrame f3 = r.render(3);
  RenderedFrame f4 = r.render(4);
  FlowField field = flow.compute(f3.frame, f4.frame);
  CHECK(field.width() == f4.frame.width());
  CHECK_THROWS_AS(flow.compute(f4.frame, f3.frame), MmfError);
}
