#include "mmf/world_model.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include "mmf/errors.hpp"
#include "mmf/pgm.hpp"

namespace mmf {

namespace {
constexpr double kVoxelSize = 0.005;  // 5 mm de-duplication grid

Eigen::Vector3f invalid_normal() {
  const float nan = std::numeric_limits<float>::quiet_NaN();
  return Eigen::Vector3f(nan, nan, nan);
}
}  // namespace

uint64_t voxel_key(const Eigen::Vector3d& p) {
  // 21 signed bits per axis at 5 mm: +-5.2 km range, ample for indoor scenes.
  const auto q = [](double v) {
    return static_cast<int64_t>(std::floor(v / kVoxelSize));
  };
  const uint64_t mask = (1ull << 21) - 1;
  uint64_t kx = static_cast<uint64_t>(q(p.x())) & mask;
  uint64_t ky = static_cast<uint64_t>(q(p.y())) & mask;
  uint64_t kz = static_cast<uint64_t>(q(p.z())) & mask;
  return (kx << 42) | (ky << 21) | kz;
}

void ObjectModel::append_keypoint_history(KeypointSet set) {
  if (!keypoint_history.empty() &&
      set.timestamp <= keypoint_history.back().timestamp)
    throw MmfError("keypoint history timestamps must strictly increase");
  set.frame_id = id;
  keypoint_history.push_back(std::move(set));
}

void ObjectModel::append_pose_history(double timestamp, const Pose& p) {
  if (!pose_history.empty() && timestamp <= pose_history.back().timestamp)
    throw MmfError("pose history timestamps must strictly increase");
  pose_history.push_back({timestamp, p});
}

Grid<Eigen::Vector3f> compute_normals(const FramePair& frame) {
  const int w = frame.width(), h = frame.height();
  Grid<Eigen::Vector3f> normals(w, h, invalid_normal());
  const CameraIntrinsics& K = frame.intrinsics;

  // Neighbor classification: 1 usable, 0 missing, -1 across a depth edge.
  auto classify = [&](int x, int y, double d_center, Eigen::Vector3d& out) {
    if (!frame.depth_valid_at(x, y)) return 0;
    double d = frame.depth.values.at(x, y);
    if (std::abs(d - d_center) > 0.04 * d_center) return -1;
    out = backproject(K, x, y, d);
    return 1;
  };

  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if (!frame.depth_valid_at(x, y)) continue;
      double dc = frame.depth.values.at(x, y);
      Eigen::Vector3d p = backproject(K, x, y, dc);

      // Horizontal/vertical tangents: central, else one-sided differences.
      Eigen::Vector3d r, l, dn, up, du, dv;
      int cr = classify(x + 1, y, dc, r), cl = classify(x - 1, y, dc, l);
      int cd = classify(x, y + 1, dc, dn), cu = classify(x, y - 1, dc, up);
      // A tangent straddling a depth discontinuity is meaningless.
      if (cr < 0 || cl < 0 || cd < 0 || cu < 0) continue;
      bool have_du = true, have_dv = true;
      if (cr && cl) du = r - l;
      else if (cr) du = r - p;
      else if (cl) du = p - l;
      else have_du = false;
      if (cd && cu) dv = dn - up;
      else if (cd) dv = dn - p;
      else if (cu) dv = p - up;
      else have_dv = false;

      Eigen::Vector3d n = Eigen::Vector3d::Zero();
      if (have_du && have_dv) n = du.cross(dv);
      if (n.squaredNorm() < 1e-20) n = -p;  // view-ray fallback
      n.normalize();
      if (n.dot(p) > 0) n = -n;  // orient toward the camera
      normals.at(x, y) = n.cast<float>();
    }
  }
  return normals;
}

namespace {

/// Appends one measurement to a cloud honoring voxel de-duplication.
void merge_point(ObjectModel& obj, const CloudPoint& cp) {
  uint64_t key = voxel_key(cp.position);
  uint64_t stamp = obj.write_counter++;
  auto it = obj.voxel_index.find(key);
  if (it != obj.voxel_index.end()) {
    obj.cloud.points[it->second] = cp;  // most recent measurement wins
    obj.write_stamp[it->second] = stamp;
    return;
  }
  obj.voxel_index.emplace(key, obj.cloud.points.size());
  obj.cloud.points.push_back(cp);
  obj.write_stamp.push_back(stamp);
}

/// Drops the oldest-written points until the cloud fits its capacity.
void enforce_capacity(ObjectModel& obj) {
  if (obj.cloud.points.size() <= obj.max_points) return;
  const size_t excess = obj.cloud.points.size() - obj.max_points;
  std::vector<size_t> order(obj.cloud.points.size());
  std::iota(order.begin(), order.end(), size_t{0});
  std::nth_element(order.begin(), order.begin() + excess, order.end(),
                   [&](size_t a, size_t b) {
                     return obj.write_stamp[a] != obj.write_stamp[b]
                                ? obj.write_stamp[a] < obj.write_stamp[b]
                                : a < b;
                   });
  std::vector<char> drop(obj.cloud.points.size(), 0);
  for (size_t i = 0; i < excess; ++i) drop[order[i]] = 1;

  std::vector<CloudPoint> kept;
  std::vector<uint64_t> kept_stamp;
  kept.reserve(obj.max_points);
  kept_stamp.reserve(obj.max_points);
  obj.voxel_index.clear();
  for (size_t i = 0; i < obj.cloud.points.size(); ++i) {
    if (drop[i]) continue;
    obj.voxel_index.emplace(voxel_key(obj.cloud.points[i].position), kept.size());
    kept.push_back(obj.cloud.points[i]);
    kept_stamp.push_back(obj.write_stamp[i]);
  }
  obj.cloud.points = std::move(kept);
  obj.write_stamp = std::move(kept_stamp);
}

/// Raw append of every listed pixel (no de-duplication); used when a model is
/// born so the cloud mirrors the originating pixels exactly. The voxel index
/// still tracks the last point per voxel for later registration.
void append_pixels_raw(ObjectModel& obj, const FramePair& frame,
                       const Grid<Eigen::Vector3f>& normals,
                       const std::vector<Eigen::Vector2i>& pixels) {
  const CameraIntrinsics& K = frame.intrinsics;
  for (const Eigen::Vector2i& px : pixels) {
    if (!frame.depth_valid_at(px.x(), px.y())) continue;
    CloudPoint cp;
    cp.position = backproject(K, px.x(), px.y(), frame.depth.values.at(px.x(), px.y()));
    cp.normal = normals.at(px.x(), px.y()).cast<double>();
    cp.intensity = frame.intensity.at(px.x(), px.y());
    obj.voxel_index[voxel_key(cp.position)] = obj.cloud.points.size();
    obj.cloud.points.push_back(cp);
    obj.write_stamp.push_back(obj.write_counter++);
  }
}

}  // namespace

SceneSet initialize_scene(const FramePair& first_frame) {
  SceneSet scene;
  ObjectModel env;
  env.id = 0;
  env.pose = Pose();

  Grid<Eigen::Vector3f> normals = compute_normals(first_frame);
  std::vector<Eigen::Vector2i> pixels;
  pixels.reserve(static_cast<size_t>(first_frame.width()) * first_frame.height());
  for (int y = 0; y < first_frame.height(); ++y)
    for (int x = 0; x < first_frame.width(); ++x)
      if (first_frame.depth_valid_at(x, y)) pixels.emplace_back(x, y);
  append_pixels_raw(env, first_frame, normals, pixels);

  env.append_pose_history(first_frame.timestamp, env.pose);
  scene.tracked.emplace(0, std::move(env));
  scene.next_id = 1;
  return scene;
}

int spawn_object(SceneSet& scene, const FramePair& frame,
                 const std::vector<Eigen::Vector2i>& seed_pixels, double timestamp) {
  if (seed_pixels.empty()) throw EmptyInput("spawn_object: empty seed set");
  ObjectModel obj;
  obj.id = scene.next_id++;
  obj.pose = Pose();
  Grid<Eigen::Vector3f> normals = compute_normals(frame);
  append_pixels_raw(obj, frame, normals, seed_pixels);
  if (obj.cloud.empty()) {
    scene.next_id--;  // roll back the id: nothing was created
    throw InvalidDepth("spawn_object: no seed pixel carries valid depth");
  }
  obj.append_pose_history(timestamp, obj.pose);
  int id = obj.id;
  scene.tracked.emplace(id, std::move(obj));
  return id;
}

void register_frame_data(ObjectModel& obj, const FramePair& frame,
                         const Grid<Eigen::Vector3f>& normals,
                         const SegmentationMap& seg, const KeypointSet& frame_keypoints,
                         const Pose& pose, double timestamp) {
  if (!seg.labels.same_size(frame.intensity))
    throw DimensionMismatch("register_frame_data: segmentation size != frame size");
  const CameraIntrinsics& K = frame.intrinsics;
  const Pose cam_to_model = pose.inverse();

  for (int y = 0; y < frame.height(); ++y) {
    for (int x = 0; x < frame.width(); ++x) {
      if (seg.labels.at(x, y) != obj.id) continue;
      if (!frame.depth_valid_at(x, y)) continue;
      Eigen::Vector3d p_cam = backproject(K, x, y, frame.depth.values.at(x, y));
      CloudPoint cp;
      cp.position = cam_to_model.apply(p_cam);
      cp.normal = cam_to_model.rotate(normals.at(x, y).cast<double>());
      cp.intensity = frame.intensity.at(x, y);
      merge_point(obj, cp);
    }
  }
  enforce_capacity(obj);

  KeypointSet entry;
  entry.timestamp = timestamp;
  for (const Keypoint& kp : frame_keypoints.keypoints) {
    const Eigen::Vector2i& px = kp.source_pixel;
    if (!seg.labels.in_bounds(px.x(), px.y())) continue;
    if (seg.labels.at(px.x(), px.y()) != obj.id) continue;
    Keypoint moved = kp;
    moved.position = cam_to_model.apply(kp.position);
    moved.timestamp = timestamp;
    entry.keypoints.push_back(std::move(moved));
  }
  if (!entry.keypoints.empty()) obj.append_keypoint_history(std::move(entry));

  obj.append_pose_history(timestamp, pose);
}

size_t remove_cloud_points(ObjectModel& obj,
                           const std::function<bool(const CloudPoint&)>& predicate) {
  std::vector<CloudPoint> kept;
  std::vector<uint64_t> kept_stamp;
  kept.reserve(obj.cloud.points.size());
  kept_stamp.reserve(obj.cloud.points.size());
  obj.voxel_index.clear();
  size_t removed = 0;
  for (size_t i = 0; i < obj.cloud.points.size(); ++i) {
    if (predicate(obj.cloud.points[i])) {
      ++removed;
      continue;
    }
    obj.voxel_index.emplace(voxel_key(obj.cloud.points[i].position), kept.size());
    kept.push_back(obj.cloud.points[i]);
    kept_stamp.push_back(obj.write_stamp[i]);
  }
  obj.cloud.points = std::move(kept);
  obj.write_stamp = std::move(kept_stamp);
  return removed;
}

void save_ply(const std::string& path, const PointCloud& cloud) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw MalformedFile("cannot write PLY file: " + path);
  out << "ply\nformat ascii 1.0\nelement vertex " << cloud.points.size()
      << "\nproperty float x\nproperty float y\nproperty float z\n"
         "property float nx\nproperty float ny\nproperty float nz\n"
         "property float intensity\nend_header\n";
  char buf[256];
  for (const CloudPoint& p : cloud.points) {
    std::snprintf(buf, sizeof(buf), "%.6f %.6f %.6f %.6f %.6f %.6f %.6f\n",
                  p.position.x(), p.position.y(), p.position.z(), p.normal.x(),
                  p.normal.y(), p.normal.z(), static_cast<double>(p.intensity));
    out << buf;
  }
}

PointCloud load_ply(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MalformedFile("cannot open PLY file: " + path);
  std::string line;
  if (!std::getline(in, line) || line != "ply")
    throw MalformedFile("not a PLY file: " + path);
  size_t count = 0;
  bool header_done = false;
  while (std::getline(in, line)) {
    if (line.rfind("element vertex ", 0) == 0)
      count = std::stoull(line.substr(15));
    else if (line == "end_header") {
      header_done = true;
      break;
    }
  }
  if (!header_done) throw MalformedFile("PLY header missing end_header: " + path);
  PointCloud cloud;
  cloud.points.reserve(count);
  for (size_t i = 0; i < count; ++i) {
    if (!std::getline(in, line))
      throw TruncatedFile("PLY vertex list ended early: " + path);
    std::istringstream ss(line);
    CloudPoint p;
    double intensity;
    if (!(ss >> p.position.x() >> p.position.y() >> p.position.z() >> p.normal.x() >>
          p.normal.y() >> p.normal.z() >> intensity))
      throw MalformedFile("bad PLY vertex line: " + line);
    p.intensity = static_cast<float>(intensity);
    cloud.points.push_back(p);
  }
  return cloud;
}

void save_keypoint_history(const std::string& path,
                           const std::vector<KeypointSet>& history) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw MalformedFile("cannot write keypoint history: " + path);
  for (const KeypointSet& set : history) {
    double ts = set.timestamp;
    uint32_t n = static_cast<uint32_t>(set.keypoints.size());
    out.write(reinterpret_cast<const char*>(&ts), sizeof(ts));
    out.write(reinterpret_cast<const char*>(&n), sizeof(n));
    for (const Keypoint& kp : set.keypoints) {
      float pos[3] = {static_cast<float>(kp.position.x()),
                      static_cast<float>(kp.position.y()),
                      static_cast<float>(kp.position.z())};
      out.write(reinterpret_cast<const char*>(pos), sizeof(pos));
      out.write(reinterpret_cast<const char*>(kp.descriptor.data()),
                kDescriptorDim * sizeof(float));
    }
  }
}

std::vector<KeypointSet> load_keypoint_history(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MalformedFile("cannot open keypoint history: " + path);
  std::vector<KeypointSet> history;
  while (true) {
    double ts;
    in.read(reinterpret_cast<char*>(&ts), sizeof(ts));
    if (in.gcount() == 0 && in.eof()) break;
    if (in.gcount() != sizeof(ts)) throw TruncatedFile("keypoint history: " + path);
    uint32_t n = 0;
    in.read(reinterpret_cast<char*>(&n), sizeof(n));
    if (in.gcount() != sizeof(n)) throw TruncatedFile("keypoint history: " + path);
    KeypointSet set;
    set.timestamp = ts;
    set.keypoints.resize(n);
    for (uint32_t i = 0; i < n; ++i) {
      float pos[3];
      in.read(reinterpret_cast<char*>(pos), sizeof(pos));
      if (in.gcount() != sizeof(pos)) throw TruncatedFile("keypoint history: " + path);
      Keypoint& kp = set.keypoints[i];
      kp.position = Eigen::Vector3d(pos[0], pos[1], pos[2]);
      kp.timestamp = ts;
      in.read(reinterpret_cast<char*>(kp.descriptor.data()),
              kDescriptorDim * sizeof(float));
      if (in.gcount() != static_cast<std::streamsize>(kDescriptorDim * sizeof(float)))
        throw TruncatedFile("keypoint history: " + path);
    }
    history.push_back(std::move(set));
  }
  return history;
}

void save_segmentation_pgm(const std::string& path, const SegmentationMap& seg) {
  Grid<uint8_t> img(seg.width(), seg.height(), 255);
  for (int y = 0; y < seg.height(); ++y) {
    for (int x = 0; x < seg.width(); ++x) {
      int32_t label = seg.labels.at(x, y);
      if (label == SegmentationMap::kNoLabel) continue;
      if (label < 0 || label > 254)
        throw MmfError("segmentation label out of 8-bit palette range");
      img.at(x, y) = static_cast<uint8_t>(label);
    }
  }
  save_pgm8(path, img);
}

SegmentationMap load_segmentation_pgm(const std::string& path) {
  Grid<uint8_t> img = load_pgm8(path);
  SegmentationMap seg(img.width(), img.height());
  for (int y = 0; y < img.height(); ++y)
    for (int x = 0; x < img.width(); ++x)
      seg.labels.at(x, y) =
          img.at(x, y) == 255 ? SegmentationMap::kNoLabel : img.at(x, y);
  return seg;
}

}  // namespace mmf
