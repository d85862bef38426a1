#include "mmf/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "mmf/errors.hpp"
#include "mmf/sparse_estimator.hpp"

namespace mmf {

namespace {

struct Assoc {
  double timestamp;  // estimate-side time
  Pose est;
  Pose truth;
};

// One-to-one nearest-timestamp association, closest pairs first.
std::vector<Assoc> associate(const Trajectory& estimated, const Trajectory& truth,
                             double window) {
  for (const Trajectory* t : {&estimated, &truth})
    for (size_t i = 1; i < t->size(); ++i)
      if ((*t)[i].timestamp <= (*t)[i - 1].timestamp)
        throw MmfError("trajectory timestamps must strictly increase");

  struct Cand {
    double dt;
    size_t i, j;
  };
  std::vector<Cand> cands;
  for (size_t i = 0; i < estimated.size(); ++i) {
    const double t = estimated[i].timestamp;
    auto it = std::lower_bound(truth.begin(), truth.end(), t,
                               [](const TimedPose& s, double v) { return s.timestamp < v; });
    for (auto j : {it, it == truth.begin() ? it : std::prev(it)}) {
      if (j == truth.end()) continue;
      double dt = std::abs(j->timestamp - t);
      if (dt <= window) cands.push_back({dt, i, static_cast<size_t>(j - truth.begin())});
    }
  }
  std::sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
    return std::tie(a.dt, a.i, a.j) < std::tie(b.dt, b.i, b.j);
  });
  std::vector<uint8_t> used_i(estimated.size(), 0), used_j(truth.size(), 0);
  std::vector<Assoc> out;
  for (const Cand& c : cands) {
    if (used_i[c.i] || used_j[c.j]) continue;
    used_i[c.i] = used_j[c.j] = 1;
    out.push_back({estimated[c.i].timestamp, estimated[c.i].pose, truth[c.j].pose});
  }
  std::sort(out.begin(), out.end(),
            [](const Assoc& a, const Assoc& b) { return a.timestamp < b.timestamp; });
  return out;
}

}  // namespace

double ate_rmse(const Trajectory& estimated, const Trajectory& truth, double window) {
  std::vector<Assoc> pairs = associate(estimated, truth, window);
  if (pairs.size() < 2)
    throw NoOverlappingTimestamps("ATE needs at least two associated samples");

  std::vector<Eigen::Vector3d> est, ref;
  for (const Assoc& a : pairs) {
    est.push_back(a.est.translation());
    ref.push_back(a.truth.translation());
  }
  Pose align;
  try {
    align = umeyama_solve(ref, est);
  } catch (const DegenerateConfiguration&) {
    // stationary or collinear tracks: centroid shift, no rotation
    Eigen::Vector3d ce = Eigen::Vector3d::Zero(), cr = Eigen::Vector3d::Zero();
    for (size_t i = 0; i < est.size(); ++i) {
      ce += est[i];
      cr += ref[i];
    }
    align = Pose(Eigen::Matrix3d::Identity(), (cr - ce) / double(est.size()));
  }
  double sum2 = 0;
  for (size_t i = 0; i < est.size(); ++i)
    sum2 += (ref[i] - align.apply(est[i])).squaredNorm();
  return std::sqrt(sum2 / double(est.size()));
}

RpeResult rpe_rmse(const Trajectory& estimated, const Trajectory& truth, double delta,
                   double window) {
  std::vector<Assoc> pairs = associate(estimated, truth, window);
  if (pairs.empty()) throw NoOverlappingTimestamps("RPE found no associated samples");

  double sum_t2 = 0, sum_r2 = 0;
  int count = 0;
  for (size_t a = 0; a < pairs.size(); ++a) {
    const double target = pairs[a].timestamp + delta;
    auto it = std::lower_bound(pairs.begin(), pairs.end(), target,
                               [](const Assoc& s, double v) { return s.timestamp < v; });
    size_t b = pairs.size();
    double best = window;
    for (auto j : {it, it == pairs.begin() ? it : std::prev(it)}) {
      if (j == pairs.end()) continue;
      double dt = std::abs(j->timestamp - target);
      if (dt <= best) {
        best = dt;
        b = static_cast<size_t>(j - pairs.begin());
      }
    }
    if (b >= pairs.size() || b == a) continue;
    const double span = pairs[b].timestamp - pairs[a].timestamp;
    if (span <= 0) continue;
    Pose rel_truth = pairs[a].truth.inverse().compose(pairs[b].truth);
    Pose rel_est = pairs[a].est.inverse().compose(pairs[b].est);
    Pose err = rel_truth.inverse().compose(rel_est);
    sum_t2 += err.translation().squaredNorm() / (span * span);
    double deg = err.rotation_angle() * 180.0 / M_PI;
    sum_r2 += (deg / span) * (deg / span);
    ++count;
  }
  if (count == 0)
    throw NoOverlappingTimestamps("RPE found no delta-separated sample pairs");
  return {std::sqrt(sum_t2 / count), std::sqrt(sum_r2 / count)};
}

namespace {

// exact nearest neighbour over a median-split kd-tree
class KdTree {
 public:
  explicit KdTree(const std::vector<Eigen::Vector3d>& pts) : pts_(pts) {
    idx_.resize(pts.size());
    std::iota(idx_.begin(), idx_.end(), 0);
    nodes_.reserve(pts.size());
    root_ = build(0, pts.size(), 0);
  }

  double nearest2(const Eigen::Vector3d& q) const {
    double best = std::numeric_limits<double>::infinity();
    search(root_, q, 0, best);
    return best;
  }

 private:
  struct Node {
    size_t point;
    int left = -1, right = -1;
  };

  int build(size_t lo, size_t hi, int depth) {
    if (lo >= hi) return -1;
    size_t mid = (lo + hi) / 2;
    int axis = depth % 3;
    std::nth_element(idx_.begin() + lo, idx_.begin() + mid, idx_.begin() + hi,
                     [&](size_t a, size_t b) { return pts_[a][axis] < pts_[b][axis]; });
    int id = static_cast<int>(nodes_.size());
    nodes_.push_back({idx_[mid]});
    int l = build(lo, mid, depth + 1);
    int r = build(mid + 1, hi, depth + 1);
    nodes_[id].left = l;
    nodes_[id].right = r;
    return id;
  }

  void search(int node, const Eigen::Vector3d& q, int depth, double& best) const {
    if (node < 0) return;
    const Eigen::Vector3d& p = pts_[nodes_[node].point];
    best = std::min(best, (q - p).squaredNorm());
    int axis = depth % 3;
    double d = q[axis] - p[axis];
    int near = d < 0 ? nodes_[node].left : nodes_[node].right;
    int far = d < 0 ? nodes_[node].right : nodes_[node].left;
    search(near, q, depth + 1, best);
    if (d * d < best) search(far, q, depth + 1, best);
  }

  const std::vector<Eigen::Vector3d>& pts_;
  std::vector<size_t> idx_;
  std::vector<Node> nodes_;
  int root_ = -1;
};

}  // namespace

ReconstructionError reconstruction_error(const PointCloud& estimated,
                                         const PointCloud& reference) {
  if (estimated.empty() || reference.empty())
    throw EmptyInput("reconstruction error needs two non-empty clouds");

  std::vector<Eigen::Vector3d> ref;
  ref.reserve(reference.size());
  for (const CloudPoint& p : reference.points) ref.push_back(p.position);
  KdTree tree(ref);

  ReconstructionError out;
  out.distances.reserve(estimated.size());
  for (const CloudPoint& p : estimated.points)
    out.distances.push_back(std::sqrt(tree.nearest2(p.position)));

  double sum = 0;
  for (double d : out.distances) sum += d;
  out.mean = sum / double(out.distances.size());
  double var = 0;
  for (double d : out.distances) var += (d - out.mean) * (d - out.mean);
  out.stddev = std::sqrt(var / double(out.distances.size()));
  return out;
}

}  // namespace mmf
