#include "mmf/sim.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <map>

#include <json.hpp>

#include "mmf/errors.hpp"

namespace mmf {
namespace {

constexpr double kNearPlane = 0.05;
constexpr double kMaxDepth = 6.5;        // beyond the 16-bit range -> invalid
constexpr double kAnchorDepthTol = 0.012;  // anchor-vs-surface visibility slack

// --- deterministic hash RNG --------------------------------------------------
// Everything stochastic in the simulator is a pure function of (seed, frame,
// entity) so renders are reproducible in any evaluation order.

uint64_t splitmix64(uint64_t& state) {
  state += 0x9E3779B97F4A7C15ull;
  uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

uint64_t hash_combine(uint64_t seed, uint64_t value) {
  uint64_t state = seed ^ (value + 0x9E3779B97F4A7C15ull);
  return splitmix64(state);
}

uint64_t hash3(uint64_t seed, uint64_t a, uint64_t b, uint64_t c) {
  return hash_combine(hash_combine(hash_combine(seed, a), b), c);
}

double to_unit(uint64_t h) { return static_cast<double>(h >> 11) * 0x1.0p-53; }

struct HashRng {
  uint64_t state;
  explicit HashRng(uint64_t seed) : state(seed) {}
  uint64_t next() { return splitmix64(state); }
  double uniform01() { return to_unit(next()); }
  double gauss() {
    double u1 = 1.0 - uniform01();
    double u2 = uniform01();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }
};

// --- procedural body texture -------------------------------------------------

double lattice_value(uint64_t seed, int64_t ix, int64_t iy, int64_t iz) {
  return to_unit(hash3(seed, static_cast<uint64_t>(ix), static_cast<uint64_t>(iy),
                       static_cast<uint64_t>(iz)));
}

double value_noise(uint64_t seed, const Eigen::Vector3d& p, double scale) {
  Eigen::Vector3d q = p / scale;
  Eigen::Vector3d fl(std::floor(q.x()), std::floor(q.y()), std::floor(q.z()));
  int64_t ix = static_cast<int64_t>(fl.x());
  int64_t iy = static_cast<int64_t>(fl.y());
  int64_t iz = static_cast<int64_t>(fl.z());
  Eigen::Vector3d f = q - fl;
  // smoothstep weights keep the gradient continuous across cells
  Eigen::Vector3d s(f.x() * f.x() * (3 - 2 * f.x()), f.y() * f.y() * (3 - 2 * f.y()),
                    f.z() * f.z() * (3 - 2 * f.z()));
  double v = 0;
  for (int dz = 0; dz < 2; ++dz)
    for (int dy = 0; dy < 2; ++dy)
      for (int dx = 0; dx < 2; ++dx) {
        double w = (dx ? s.x() : 1 - s.x()) * (dy ? s.y() : 1 - s.y()) *
                   (dz ? s.z() : 1 - s.z());
        v += w * lattice_value(seed, ix + dx, iy + dy, iz + dz);
      }
  return v;
}

double body_texture(const SceneBody& body, const Eigen::Vector3d& p) {
  double v = 0.50 * value_noise(body.texture_seed ^ 0x51ED2701u, p, 0.045) +
             0.30 * value_noise(body.texture_seed ^ 0xA2C37D94u, p, 0.021) +
             0.20 * value_noise(body.texture_seed ^ 0x0B8E1F63u, p, 0.010);
  return std::clamp(body.mean_intensity + (v - 0.5) * 0.9, 0.02, 0.98);
}

// --- geometry assembly --------------------------------------------------------

struct Triangle {
  Eigen::Vector3d a, b, c;  // body frame
  int body = 0;
};

struct Anchor {
  Eigen::Vector3d position;  // body frame
  Descriptor descriptor;     // unit base descriptor (pre-noise)
  float response = 0;
  int body = 0;
};

void push_quad(std::vector<Triangle>& out, int body, const Eigen::Vector3d& center,
               const Eigen::Vector3d& eu, const Eigen::Vector3d& ev) {
  Eigen::Vector3d p00 = center - eu - ev;
  Eigen::Vector3d p10 = center + eu - ev;
  Eigen::Vector3d p11 = center + eu + ev;
  Eigen::Vector3d p01 = center - eu + ev;
  out.push_back({p00, p10, p11, body});
  out.push_back({p00, p11, p01, body});
}

struct Face {
  Eigen::Vector3d center;  // part-local
  Eigen::Vector3d axis_u, axis_v;  // unit in-face axes (part-local)
  double extent_u = 0, extent_v = 0;  // full extents
};

std::vector<Face> part_faces(const ScenePart& part) {
  std::vector<Face> faces;
  const Eigen::Vector3d h = part.size / 2.0;
  if (part.shape == "plane") {
    faces.push_back({Eigen::Vector3d::Zero(), Eigen::Vector3d::UnitX(),
                     Eigen::Vector3d::UnitY(), part.size.x(), part.size.y()});
  } else if (part.shape == "cuboid") {
    faces.push_back({{h.x(), 0, 0}, Eigen::Vector3d::UnitY(), Eigen::Vector3d::UnitZ(),
                     part.size.y(), part.size.z()});
    faces.push_back({{-h.x(), 0, 0}, Eigen::Vector3d::UnitY(), Eigen::Vector3d::UnitZ(),
                     part.size.y(), part.size.z()});
    faces.push_back({{0, h.y(), 0}, Eigen::Vector3d::UnitX(), Eigen::Vector3d::UnitZ(),
                     part.size.x(), part.size.z()});
    faces.push_back({{0, -h.y(), 0}, Eigen::Vector3d::UnitX(), Eigen::Vector3d::UnitZ(),
                     part.size.x(), part.size.z()});
    faces.push_back({{0, 0, h.z()}, Eigen::Vector3d::UnitX(), Eigen::Vector3d::UnitY(),
                     part.size.x(), part.size.y()});
    faces.push_back({{0, 0, -h.z()}, Eigen::Vector3d::UnitX(), Eigen::Vector3d::UnitY(),
                     part.size.x(), part.size.y()});
  } else {
    throw MalformedFile("unknown part shape: " + part.shape);
  }
  return faces;
}

void build_part_triangles(std::vector<Triangle>& out, int body, const ScenePart& part) {
  for (const Face& f : part_faces(part)) {
    Eigen::Vector3d center = part.offset.apply(f.center);
    Eigen::Vector3d eu = part.offset.rotate(f.axis_u) * (f.extent_u / 2);
    Eigen::Vector3d ev = part.offset.rotate(f.axis_v) * (f.extent_v / 2);
    push_quad(out, body, center, eu, ev);
  }
}

Descriptor make_base_descriptor(uint64_t seed) {
  HashRng rng(seed);
  Eigen::Matrix<double, kDescriptorDim, 1> d;
  for (int i = 0; i < kDescriptorDim; ++i) d[i] = rng.gauss();
  d.normalize();
  return d.cast<float>();
}

void build_part_anchors(std::vector<Anchor>& out, const SceneBody& body, int body_index,
                        int part_index, const ScenePart& part) {
  const std::vector<Face> faces = part_faces(part);
  const double s = body.keypoint_spacing;
  for (size_t fi = 0; fi < faces.size(); ++fi) {
    const Face& f = faces[fi];
    int nu = std::max(1, static_cast<int>(std::floor(f.extent_u / s)));
    int nv = std::max(1, static_cast<int>(std::floor(f.extent_v / s)));
    for (int j = 0; j < nv; ++j)
      for (int i = 0; i < nu; ++i) {
        uint64_t seed =
            hash3(body.texture_seed ^ 0x7C83A11Bull,
                  static_cast<uint64_t>(part_index) * 64 + fi,
                  static_cast<uint64_t>(i), static_cast<uint64_t>(j));
        double u = (i - (nu - 1) * 0.5) * s + (to_unit(hash_combine(seed, 1)) - 0.5) * 0.6 * s;
        double v = (j - (nv - 1) * 0.5) * s + (to_unit(hash_combine(seed, 2)) - 0.5) * 0.6 * s;
        u = std::clamp(u, -f.extent_u / 2 + 0.004, f.extent_u / 2 - 0.004);
        v = std::clamp(v, -f.extent_v / 2 + 0.004, f.extent_v / 2 - 0.004);
        Anchor a;
        a.position = part.offset.apply(f.center + f.axis_u * u + f.axis_v * v);
        a.descriptor = make_base_descriptor(hash_combine(seed, 3));
        a.response = static_cast<float>(0.3 + 0.7 * to_unit(hash_combine(seed, 4)));
        a.body = body_index;
        out.push_back(a);
      }
  }
}

// --- rasterization ------------------------------------------------------------

struct FrameBuffers {
  Grid<double> depth;               // true camera-space depth, 0 = empty
  Grid<int32_t> label;              // body index, -1 = empty
  Grid<Eigen::Vector3d> body_point; // body-frame surface point
  Pose camera_pose;
  std::vector<Pose> body_poses;
};

// Clips a camera-frame triangle against z >= kNearPlane (at most 4 vertices out).
int clip_near(const Eigen::Vector3d in[3], Eigen::Vector3d out[4]) {
  int n = 0;
  for (int i = 0; i < 3; ++i) {
    const Eigen::Vector3d& a = in[i];
    const Eigen::Vector3d& b = in[(i + 1) % 3];
    bool ina = a.z() >= kNearPlane;
    bool inb = b.z() >= kNearPlane;
    if (ina) out[n++] = a;
    if (ina != inb) {
      double t = (kNearPlane - a.z()) / (b.z() - a.z());
      out[n++] = a + t * (b - a);
    }
  }
  return n;
}

void rasterize_triangle(const CameraIntrinsics& K, const Eigen::Vector3d& A,
                        const Eigen::Vector3d& B, const Eigen::Vector3d& C, int body,
                        const Pose& camera_from_body, FrameBuffers& buf) {
  const Pose body_from_camera = camera_from_body.inverse();
  Eigen::Vector2d p0(K.fx * A.x() / A.z() + K.cx, K.fy * A.y() / A.z() + K.cy);
  Eigen::Vector2d p1(K.fx * B.x() / B.z() + K.cx, K.fy * B.y() / B.z() + K.cy);
  Eigen::Vector2d p2(K.fx * C.x() / C.z() + K.cx, K.fy * C.y() / C.z() + K.cy);
  double area = (p1 - p0).x() * (p2 - p0).y() - (p1 - p0).y() * (p2 - p0).x();
  if (area == 0) return;
  if (area < 0) std::swap(p1, p2);  // plane carries the 3D info; winding is free

  // Surface plane in the camera frame: n . p = d.
  Eigen::Vector3d n = (B - A).cross(C - A);
  double d = n.dot(A);

  int x0 = std::max(0, static_cast<int>(std::floor(std::min({p0.x(), p1.x(), p2.x()}))));
  int x1 = std::min(K.width - 1,
                    static_cast<int>(std::ceil(std::max({p0.x(), p1.x(), p2.x()}))));
  int y0 = std::max(0, static_cast<int>(std::floor(std::min({p0.y(), p1.y(), p2.y()}))));
  int y1 = std::min(K.height - 1,
                    static_cast<int>(std::ceil(std::max({p0.y(), p1.y(), p2.y()}))));
  if (x0 > x1 || y0 > y1) return;

  // Edge functions, stepped incrementally across each row.
  Eigen::Vector2d e01 = p1 - p0, e12 = p2 - p1, e20 = p0 - p2;
  for (int y = y0; y <= y1; ++y) {
    double py = y;
    double w0 = e12.x() * (py - p1.y()) - e12.y() * (x0 - p1.x());
    double w1 = e20.x() * (py - p2.y()) - e20.y() * (x0 - p2.x());
    double w2 = e01.x() * (py - p0.y()) - e01.y() * (x0 - p0.x());
    double ry = (py - K.cy) / K.fy;
    double denom = n.x() * (x0 - K.cx) / K.fx + n.y() * ry + n.z();
    double ddenom = n.x() / K.fx;
    for (int x = x0; x <= x1; ++x, w0 -= e12.y(), w1 -= e20.y(), w2 -= e01.y(),
             denom += ddenom) {
      if (w0 < 0 || w1 < 0 || w2 < 0) continue;
      if (denom == 0) continue;
      double z = d / denom;
      if (z < kNearPlane || z > kMaxDepth) continue;
      double& zbuf = buf.depth.at(x, y);
      if (zbuf != 0 && z >= zbuf) continue;
      zbuf = z;
      buf.label.at(x, y) = body;
      Eigen::Vector3d p_cam(z * (x - K.cx) / K.fx, z * ry, z);
      buf.body_point.at(x, y) = body_from_camera.apply(p_cam);
    }
  }
}

// --- JSON (de)serialization -----------------------------------------------------

using nlohmann::json;

Eigen::Matrix3d rpy_matrix(double roll, double pitch, double yaw) {
  return (Eigen::AngleAxisd(yaw, Eigen::Vector3d::UnitZ()) *
          Eigen::AngleAxisd(pitch, Eigen::Vector3d::UnitY()) *
          Eigen::AngleAxisd(roll, Eigen::Vector3d::UnitX()))
      .toRotationMatrix();
}

Eigen::Vector3d matrix_rpy(const Eigen::Matrix3d& R) {
  double pitch = std::asin(std::clamp(-R(2, 0), -1.0, 1.0));
  double roll, yaw;
  if (std::abs(R(2, 0)) < 1.0 - 1e-12) {
    roll = std::atan2(R(2, 1), R(2, 2));
    yaw = std::atan2(R(1, 0), R(0, 0));
  } else {  // gimbal lock: fold everything into roll
    roll = std::atan2(-R(1, 2), R(1, 1));
    yaw = 0;
  }
  return {roll, pitch, yaw};
}

json pose_to_json(const Pose& p) {
  Eigen::Vector3d rpy = matrix_rpy(p.rotation());
  return json{{"position", {p.translation().x(), p.translation().y(), p.translation().z()}},
              {"rpy", {rpy.x(), rpy.y(), rpy.z()}}};
}

Pose pose_from_json(const json& j) {
  auto pos = j.at("position");
  auto rpy = j.value("rpy", json::array({0.0, 0.0, 0.0}));
  return Pose(rpy_matrix(rpy.at(0), rpy.at(1), rpy.at(2)),
              Eigen::Vector3d(pos.at(0), pos.at(1), pos.at(2)));
}

json trajectory_to_json(const BodyTrajectory& t) {
  json segs = json::array();
  for (const TrajectorySegment& s : t.segments) {
    segs.push_back({{"start_time", s.start_time},
                    {"twist", {s.twist[0], s.twist[1], s.twist[2], s.twist[3], s.twist[4],
                               s.twist[5]}}});
  }
  return json{{"start", pose_to_json(t.start)}, {"segments", segs}};
}

BodyTrajectory trajectory_from_json(const json& j) {
  BodyTrajectory t;
  if (j.contains("start")) t.start = pose_from_json(j.at("start"));
  for (const json& s : j.value("segments", json::array())) {
    TrajectorySegment seg;
    seg.start_time = s.at("start_time");
    auto tw = s.at("twist");
    for (int i = 0; i < 6; ++i) seg.twist[i] = tw.at(i);
    t.segments.push_back(seg);
  }
  std::stable_sort(t.segments.begin(), t.segments.end(),
                   [](const TrajectorySegment& a, const TrajectorySegment& b) {
                     return a.start_time < b.start_time;
                   });
  return t;
}

}  // namespace

// --- trajectories ---------------------------------------------------------------

Pose BodyTrajectory::pose_at(double t) const {
  Pose pose = start;
  for (size_t i = 0; i < segments.size(); ++i) {
    double t0 = segments[i].start_time;
    if (t <= t0) break;
    double t1 = (i + 1 < segments.size()) ? segments[i + 1].start_time : t;
    double dt = std::min(t, t1) - t0;
    if (dt > 0) pose = se3_exp(dt * segments[i].twist).compose(pose);
  }
  return pose;
}

int SceneScript::frame_count() const {
  return static_cast<int>(std::lround(duration * frame_rate)) + 1;
}

double SceneScript::timestamp(int index) const { return index / frame_rate; }

// --- script I/O -------------------------------------------------------------------

SceneScript load_scene_script(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw MalformedFile("cannot open scene script: " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw MalformedFile("scene script parse error: " + std::string(e.what()));
  }
  try {
    SceneScript s;
    s.name = j.value("name", std::string("custom"));
    const json& k = j.at("intrinsics");
    s.intrinsics.fx = k.at("fx");
    s.intrinsics.fy = k.at("fy");
    s.intrinsics.cx = k.at("cx");
    s.intrinsics.cy = k.at("cy");
    s.intrinsics.width = k.at("width");
    s.intrinsics.height = k.at("height");
    s.frame_rate = j.value("frame_rate", 10.0);
    s.duration = j.value("duration", 5.0);
    s.seed = j.value("seed", uint64_t{1});
    if (j.contains("noise")) {
      const json& n = j.at("noise");
      s.noise.depth_sigma = n.value("depth_sigma", 0.0);
      s.noise.descriptor_sigma = n.value("descriptor_sigma", 0.0);
      s.noise.outlier_rate = n.value("outlier_rate", 0.0);
    }
    if (j.contains("camera")) s.camera = trajectory_from_json(j.at("camera"));
    for (const json& jb : j.value("bodies", json::array())) {
      SceneBody b;
      b.name = jb.value("name", std::string());
      b.texture_seed = jb.value("texture_seed", uint64_t{0});
      b.keypoint_spacing = jb.value("keypoint_spacing", 0.05);
      b.mean_intensity = jb.value("mean_intensity", 0.5);
      if (jb.contains("trajectory")) b.trajectory = trajectory_from_json(jb.at("trajectory"));
      for (const json& jp : jb.value("parts", json::array())) {
        ScenePart p;
        p.shape = jp.value("shape", std::string("cuboid"));
        auto sz = jp.at("size");
        p.size = Eigen::Vector3d(sz.at(0), sz.at(1), sz.at(2));
        if (jp.contains("offset")) p.offset = pose_from_json(jp.at("offset"));
        b.parts.push_back(std::move(p));
      }
      if (b.parts.empty()) throw MalformedFile("scene body without parts: " + b.name);
      s.bodies.push_back(std::move(b));
    }
    if (s.bodies.empty()) throw MalformedFile("scene script has no bodies");
    if (s.frame_rate <= 0 || s.duration < 0)
      throw MalformedFile("scene script has invalid timing");
    return s;
  } catch (const json::exception& e) {
    throw MalformedFile("scene script field error: " + std::string(e.what()));
  }
}

void save_scene_script(const std::string& path, const SceneScript& s) {
  json j;
  j["name"] = s.name;
  j["intrinsics"] = {{"fx", s.intrinsics.fx}, {"fy", s.intrinsics.fy},
                     {"cx", s.intrinsics.cx}, {"cy", s.intrinsics.cy},
                     {"width", s.intrinsics.width}, {"height", s.intrinsics.height}};
  j["frame_rate"] = s.frame_rate;
  j["duration"] = s.duration;
  j["seed"] = s.seed;
  j["noise"] = {{"depth_sigma", s.noise.depth_sigma},
                {"descriptor_sigma", s.noise.descriptor_sigma},
                {"outlier_rate", s.noise.outlier_rate}};
  j["camera"] = trajectory_to_json(s.camera);
  json bodies = json::array();
  for (const SceneBody& b : s.bodies) {
    json jb;
    jb["name"] = b.name;
    jb["texture_seed"] = b.texture_seed;
    jb["keypoint_spacing"] = b.keypoint_spacing;
    jb["mean_intensity"] = b.mean_intensity;
    jb["trajectory"] = trajectory_to_json(b.trajectory);
    json parts = json::array();
    for (const ScenePart& p : b.parts) {
      parts.push_back({{"shape", p.shape},
                       {"size", {p.size.x(), p.size.y(), p.size.z()}},
                       {"offset", pose_to_json(p.offset)}});
    }
    jb["parts"] = parts;
    bodies.push_back(jb);
  }
  j["bodies"] = bodies;
  std::ofstream out(path);
  if (!out) throw MmfError("cannot write scene script: " + path);
  out << j.dump(2) << "\n";
}

// --- builtin scenarios -------------------------------------------------------------

namespace {

Pose make_pose(double x, double y, double z, double roll = 0, double pitch = 0,
               double yaw = 0) {
  return Pose(rpy_matrix(roll, pitch, yaw), Eigen::Vector3d(x, y, z));
}

ScenePart make_part(const std::string& shape, double sx, double sy, double sz,
                    const Pose& offset) {
  ScenePart p;
  p.shape = shape;
  p.size = Eigen::Vector3d(sx, sy, sz);
  p.offset = offset;
  return p;
}

TrajectorySegment seg(double t, double vx, double vy, double vz, double wx, double wy,
                      double wz) {
  TrajectorySegment s;
  s.start_time = t;
  s.twist << vx, vy, vz, wx, wy, wz;
  return s;
}

// World-frame twist that spins about `axis_omega` through `center` (a rotation
// in place for a body sitting at `center`).
TrajectorySegment spin_about(double t, const Eigen::Vector3d& axis_omega,
                             const Eigen::Vector3d& center) {
  Eigen::Vector3d v = -axis_omega.cross(center);
  return seg(t, v.x(), v.y(), v.z(), axis_omega.x(), axis_omega.y(), axis_omega.z());
}

CameraIntrinsics vga_intrinsics() {
  CameraIntrinsics K;
  K.fx = 525.0;
  K.fy = 525.0;
  K.cx = 319.5;
  K.cy = 239.5;
  K.width = 640;
  K.height = 480;
  return K;
}

// Furnished room, camera at the origin. y points down; floor at y = +1.
SceneBody make_room(double spacing) {
  SceneBody room;
  room.name = "environment";
  room.texture_seed = 11;
  room.keypoint_spacing = spacing;
  room.mean_intensity = 0.55;
  const double kRoll = M_PI / 2;
  room.parts.push_back(make_part("plane", 6, 6, 0, make_pose(0, 1.0, 0, kRoll)));    // floor
  room.parts.push_back(make_part("plane", 6, 6, 0, make_pose(0, -1.5, 0, -kRoll)));  // ceiling
  room.parts.push_back(make_part("plane", 6, 2.5, 0, make_pose(0, -0.25, 2.5)));
  room.parts.push_back(make_part("plane", 6, 2.5, 0, make_pose(0, -0.25, -2.5)));
  room.parts.push_back(make_part("plane", 6, 2.5, 0, make_pose(-2.5, -0.25, 0, 0, M_PI / 2)));
  room.parts.push_back(make_part("plane", 6, 2.5, 0, make_pose(2.5, -0.25, 0, 0, -M_PI / 2)));
  room.parts.push_back(make_part("cuboid", 1.0, 0.8, 0.6, make_pose(1.2, 0.6, 1.6, 0, 0, 0.4)));
  room.parts.push_back(make_part("cuboid", 0.6, 0.6, 0.6, make_pose(-1.3, 0.7, -1.4, 0, 0, -0.7)));
  room.parts.push_back(make_part("cuboid", 0.5, 1.2, 0.4, make_pose(-1.6, 0.4, 1.8, 0, 0, 1.1)));
  room.parts.push_back(make_part("cuboid", 0.7, 0.7, 0.7, make_pose(1.5, 0.65, -1.8, 0, 0, 2.0)));
  return room;
}

SceneScript rotation_scenario() {
  SceneScript s;
  s.name = "rotation";
  s.intrinsics = vga_intrinsics();
  s.frame_rate = 10;
  s.duration = 8.5;
  s.seed = 1;
  s.noise.depth_sigma = 0.001;
  s.noise.descriptor_sigma = 0.02;
  s.noise.outlier_rate = 0.02;
  const double w = 50.0 * M_PI / 180.0;  // 5 deg per frame at 10 Hz
  s.camera.segments = {seg(0.5, 0, 0, 0, 0, w, 0), seg(4.1, 0, 0, 0, 0, 0, 0),
                       seg(4.6, 0, 0, 0, 0, -w, 0), seg(8.2, 0, 0, 0, 0, 0, 0)};
  s.bodies.push_back(make_room(0.15));
  return s;
}

SceneScript manipulation_scenario() {
  SceneScript s;
  s.name = "manipulation";
  s.intrinsics = vga_intrinsics();
  s.frame_rate = 10;
  s.duration = 8.0;
  s.seed = 2;
  s.noise.depth_sigma = 0.004;
  s.noise.descriptor_sigma = 0.06;
  s.noise.outlier_rate = 0.06;
  SceneBody env = make_room(0.18);
  env.parts.push_back(make_part("cuboid", 1.4, 0.06, 0.7, make_pose(0, 0.55, 1.3)));
  env.parts.push_back(make_part("cuboid", 0.25, 0.18, 0.15, make_pose(-0.35, 0.43, 1.25, 0, 0, 0.5)));
  env.parts.push_back(make_part("cuboid", 0.12, 0.22, 0.12, make_pose(0.10, 0.41, 1.40, 0, 0, -0.3)));
  env.parts.push_back(make_part("cuboid", 0.30, 0.10, 0.20, make_pose(0.45, 0.47, 1.20, 0, 0, 1.2)));
  s.bodies.push_back(env);
  s.camera.segments = {seg(0.4, 0, 0, 0, 0, 0.7, 0),
                       seg(1.4, 0, 0, 0, 0, -0.7, 0),
                       seg(3.0, 0.15, 0, 0.10, 0, 0.30, 0),
                       seg(4.2, -0.12, 0.04, -0.08, 0, -0.65, 0),
                       seg(5.6, -0.03, -0.04, -0.02, 0.25, 0, 0),
                       seg(6.4, 0, 0, 0, 0, 0.5, 0),
                       seg(7.4, 0, 0, 0, 0, 0, 0)};
  return s;
}

// Work bench viewed from a static, downward-pitched camera.
SceneBody make_bench(double spacing) {
  SceneBody env;
  env.name = "environment";
  env.texture_seed = 21;
  env.keypoint_spacing = spacing;
  env.mean_intensity = 0.5;
  env.parts.push_back(make_part("plane", 2.4, 1.4, 0, make_pose(0, 0.1, 1.0, M_PI / 2)));  // table
  env.parts.push_back(make_part("plane", 2.6, 1.4, 0, make_pose(0, -0.3, 1.9)));           // backdrop
  // boxes turned about the vertical so their side faces pin the belt axis
  env.parts.push_back(make_part("cuboid", 0.18, 0.20, 0.15, make_pose(-0.55, 0.0, 1.35, 0, 0.6, 0)));
  env.parts.push_back(make_part("cuboid", 0.22, 0.14, 0.18, make_pose(0.50, 0.03, 1.25, 0, -0.4, 0)));
  return env;
}

// 0.5 m above the bench origin, pitched 25 deg down toward the table.
Pose bench_camera_pose() { return make_pose(0, -0.5, 0, -25.0 * M_PI / 180.0); }

SceneScript conveyor_scenario(bool up) {
  SceneScript s;
  s.name = up ? "conveyor_up" : "conveyor_down";
  s.intrinsics = vga_intrinsics();
  s.frame_rate = 10;
  s.duration = 10.0;
  s.seed = up ? 3 : 4;
  s.noise.depth_sigma = 0.001;
  s.noise.descriptor_sigma = 0.03;
  s.noise.outlier_rate = 0.02;
  s.camera.start = bench_camera_pose();
  s.bodies.push_back(make_bench(0.08));

  SceneBody item;
  item.name = "item";
  item.texture_seed = up ? 31 : 41;
  item.keypoint_spacing = 0.035;
  item.mean_intensity = 0.68;
  const double belt = 0.068;  // m/s
  if (up) {
    item.parts.push_back(make_part("cuboid", 0.16, 0.24, 0.12, make_pose(0, 0, 0, 0, 0.25, 0)));
    item.trajectory.start = make_pose(-0.35, 0.1 - 0.12, 1.25);
    item.trajectory.segments = {seg(1.0, belt, 0, 0, 0, 0, 0)};
  } else {
    item.parts.push_back(make_part("cuboid", 0.24, 0.12, 0.16, make_pose(0, 0, 0, 0, -0.3, 0)));
    item.trajectory.start = make_pose(0.35, 0.1 - 0.06, 1.25);
    item.trajectory.segments = {seg(1.0, -belt, 0, 0, 0, 0, 0)};
  }
  s.bodies.push_back(item);
  return s;
}

SceneScript redetect_scenario() {
  SceneScript s;
  s.name = "redetect";
  s.intrinsics = vga_intrinsics();
  s.frame_rate = 10;
  s.duration = 12.0;
  s.seed = 5;
  s.camera.start = bench_camera_pose();
  s.bodies.push_back(make_bench(0.08));

  SceneBody item;
  item.name = "item";
  item.texture_seed = 51;
  item.keypoint_spacing = 0.03;
  item.mean_intensity = 0.7;
  item.parts.push_back(make_part("cuboid", 0.18, 0.14, 0.12, make_pose(0, 0, 0, 0, 0.25, 0)));
  item.trajectory.start = make_pose(-0.85, 0.03, 1.25);
  const double v = 0.35;
  // Crosses to the right, turns 40 deg while fully out of view, comes back rotated.
  const Eigen::Vector3d turn_center(-0.85 + v * 5.3, 0.03, 1.25);
  item.trajectory.segments = {seg(0.3, v, 0, 0, 0, 0, 0),
                              spin_about(5.6, Eigen::Vector3d(0, 0.35, 0), turn_center),
                              seg(7.6, -v, 0, 0, 0, 0, 0)};
  s.bodies.push_back(item);
  return s;
}

}  // namespace

std::vector<std::string> builtin_scenario_names() {
  return {"rotation", "manipulation", "conveyor_up", "conveyor_down", "redetect"};
}

SceneScript builtin_scenario(const std::string& name) {
  if (name == "rotation") return rotation_scenario();
  if (name == "manipulation") return manipulation_scenario();
  if (name == "conveyor_up") return conveyor_scenario(true);
  if (name == "conveyor_down") return conveyor_scenario(false);
  if (name == "redetect") return redetect_scenario();
  throw MmfError("unknown scenario: " + name);
}

// --- renderer ------------------------------------------------------------------

struct SceneRenderer::Impl {
  std::vector<Triangle> triangles;
  std::vector<Anchor> anchors;
  mutable std::map<int, std::shared_ptr<const FrameBuffers>> cache;

  std::shared_ptr<const FrameBuffers> buffers(const SceneScript& script, int index) const;
};

SceneRenderer::SceneRenderer(SceneScript script)
    : script_(std::move(script)), impl_(new Impl) {
  for (size_t b = 0; b < script_.bodies.size(); ++b) {
    const SceneBody& body = script_.bodies[b];
    for (size_t p = 0; p < body.parts.size(); ++p) {
      build_part_triangles(impl_->triangles, static_cast<int>(b), body.parts[p]);
      build_part_anchors(impl_->anchors, body, static_cast<int>(b), static_cast<int>(p),
                         body.parts[p]);
    }
  }
}

SceneRenderer::~SceneRenderer() = default;

std::shared_ptr<const FrameBuffers> SceneRenderer::Impl::buffers(const SceneScript& script,
                                                                 int index) const {
  auto it = cache.find(index);
  if (it != cache.end()) return it->second;

  const CameraIntrinsics& K = script.intrinsics;
  auto buf = std::make_shared<FrameBuffers>();
  buf->depth = Grid<double>(K.width, K.height, 0.0);
  buf->label = Grid<int32_t>(K.width, K.height, -1);
  buf->body_point = Grid<Eigen::Vector3d>(K.width, K.height, Eigen::Vector3d::Zero());
  double t = script.timestamp(index);
  buf->camera_pose = script.camera.pose_at(t);
  Pose world_from_camera_inv = buf->camera_pose.inverse();
  std::vector<Pose> camera_from_body(script.bodies.size());
  for (size_t b = 0; b < script.bodies.size(); ++b) {
    buf->body_poses.push_back(script.bodies[b].trajectory.pose_at(t));
    camera_from_body[b] = world_from_camera_inv.compose(buf->body_poses[b]);
  }
  for (const Triangle& tri : triangles) {
    const Pose& T = camera_from_body[tri.body];
    Eigen::Vector3d verts[3] = {T.apply(tri.a), T.apply(tri.b), T.apply(tri.c)};
    Eigen::Vector3d clipped[4];
    int n = clip_near(verts, clipped);
    for (int i = 2; i < n; ++i) {
      rasterize_triangle(K, clipped[0], clipped[i - 1], clipped[i], tri.body, T, *buf);
    }
  }

  cache.emplace(index, buf);
  while (cache.size() > 3) cache.erase(cache.begin());
  return buf;
}

RenderedFrame SceneRenderer::render(int index) const {
  if (index < 0 || index >= frame_count()) throw MmfError("frame index out of range");
  const CameraIntrinsics& K = script_.intrinsics;
  auto buf = impl_->buffers(script_, index);

  RenderedFrame out;
  out.camera_pose = buf->camera_pose;
  out.body_poses = buf->body_poses;
  out.body_labels = buf->label;
  out.gt_depth = buf->depth;
  out.frame.intrinsics = K;
  out.frame.timestamp = script_.timestamp(index);
  out.frame.index = index;
  out.frame.intensity = Grid<float>(K.width, K.height, 0.0f);
  out.frame.depth.values = Grid<float>(K.width, K.height, 0.0f);
  out.frame.depth.timestamp = out.frame.timestamp;

  const double sigma = script_.noise.depth_sigma;
  for (int y = 0; y < K.height; ++y) {
    for (int x = 0; x < K.width; ++x) {
      int body = buf->label.at(x, y);
      if (body < 0) continue;
      double z = buf->depth.at(x, y);
      if (sigma > 0) {
        HashRng rng(hash3(script_.seed ^ 0xD1F5C0DEull, index,
                          static_cast<uint64_t>(y) * K.width + x, 0));
        z += sigma * rng.gauss();
      }
      long q = std::lround(z * 1e4);  // 0.1 mm units, matching dataset storage
      if (q >= 1 && q <= 65535) {
        out.frame.depth.values.at(x, y) = static_cast<float>(q * 1e-4);
      }
      double v = body_texture(script_.bodies[body], buf->body_point.at(x, y));
      out.frame.intensity.at(x, y) =
          static_cast<float>(std::lround(v * 255.0) / 255.0);
    }
  }

  // Ground-truth flow against the previous frame.
  out.gt_flow = FlowField(K.width, K.height);
  if (index > 0) {
    auto prev = impl_->buffers(script_, index - 1);
    std::vector<Pose> prev_cam_from_body(script_.bodies.size());
    Pose prev_inv = prev->camera_pose.inverse();
    for (size_t b = 0; b < script_.bodies.size(); ++b)
      prev_cam_from_body[b] = prev_inv.compose(prev->body_poses[b]);
    for (int y = 0; y < K.height; ++y) {
      for (int x = 0; x < K.width; ++x) {
        int body = buf->label.at(x, y);
        if (body < 0) continue;
        Eigen::Vector3d p_prev = prev_cam_from_body[body].apply(buf->body_point.at(x, y));
        if (p_prev.z() < kNearPlane) continue;
        double u = K.fx * p_prev.x() / p_prev.z() + K.cx;
        double v = K.fy * p_prev.y() / p_prev.z() + K.cy;
        int xi = static_cast<int>(std::lround(u));
        int yi = static_cast<int>(std::lround(v));
        if (!prev->label.in_bounds(xi, yi)) continue;
        if (prev->label.at(xi, yi) != body) continue;              // occluded before
        if (std::abs(prev->depth.at(xi, yi) - p_prev.z()) > 0.02) continue;
        out.gt_flow.flow.at(x, y) = Eigen::Vector2f(x - u, y - v);
        out.gt_flow.valid.at(x, y) = 1;
      }
    }
  }
  return out;
}

KeypointHeatmap SceneRenderer::keypoint_heatmap(int index) const {
  if (index < 0 || index >= frame_count()) throw MmfError("frame index out of range");
  const CameraIntrinsics& K = script_.intrinsics;
  auto buf = impl_->buffers(script_, index);
  Pose cam_inv = buf->camera_pose.inverse();
  std::vector<Pose> camera_from_body(script_.bodies.size());
  for (size_t b = 0; b < script_.bodies.size(); ++b)
    camera_from_body[b] = cam_inv.compose(buf->body_poses[b]);

  KeypointHeatmap heatmap(K.width, K.height);
  const NoiseModel& noise = script_.noise;
  for (size_t a = 0; a < impl_->anchors.size(); ++a) {
    const Anchor& anchor = impl_->anchors[a];
    Eigen::Vector3d p = camera_from_body[anchor.body].apply(anchor.position);
    if (p.z() < kNearPlane) continue;
    double u = K.fx * p.x() / p.z() + K.cx;
    double v = K.fy * p.y() / p.z() + K.cy;
    int x = static_cast<int>(std::lround(u));
    int y = static_cast<int>(std::lround(v));
    if (!buf->label.in_bounds(x, y)) continue;
    if (buf->label.at(x, y) != anchor.body) continue;
    if (std::abs(buf->depth.at(x, y) - p.z()) > kAnchorDepthTol) continue;
    if (anchor.response <= heatmap.response(x, y)) continue;  // first-in-order wins ties

    Descriptor desc = anchor.descriptor;
    if (noise.descriptor_sigma > 0 || noise.outlier_rate > 0) {
      HashRng rng(hash3(script_.seed ^ 0xFEA7BEA7ull, index, a, 1));
      if (rng.uniform01() < noise.outlier_rate) {
        desc = make_base_descriptor(rng.next());
      } else if (noise.descriptor_sigma > 0) {
        Eigen::Matrix<double, kDescriptorDim, 1> d = desc.cast<double>();
        for (int i = 0; i < kDescriptorDim; ++i) d[i] += noise.descriptor_sigma * rng.gauss();
        d.normalize();
        desc = d.cast<float>();
      }
    }
    heatmap.set(x, y, anchor.response, desc);
  }
  return heatmap;
}

FlowField GroundTruthFlowProvider::compute(const FramePair& previous,
                                           const FramePair& current) {
  if (current.index != previous.index + 1)
    throw MmfError("ground-truth flow requires consecutive frames");
  return renderer_.render(current.index).gt_flow;
}

}  // namespace mmf
