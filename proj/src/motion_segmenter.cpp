#include "mmf/motion_segmenter.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <limits>

#include "mmf/errors.hpp"

namespace mmf {

namespace {

constexpr double kHuge = 1e18;
constexpr double kResidualScale = 0.01;  // m, dense residual normalization

// 1D squared-distance transform (lower envelope of parabolas) carrying the
// site id of the argmin. Entries with f >= kHuge are absent.
void dt1d(int n, const double* f, const int* site, double* d, int* ds,
          int* v, double* z) {
  int k = -1;
  for (int q = 0; q < n; ++q) {
    if (f[q] >= kHuge) continue;
    double s = 0;
    while (k >= 0) {
      int p = v[k];
      s = ((f[q] + double(q) * q) - (f[p] + double(p) * p)) / (2.0 * (q - p));
      if (s <= z[k]) {
        --k;
      } else {
        break;
      }
    }
    if (k < 0) {
      k = 0;
      v[0] = q;
      z[0] = -kHuge;
      z[1] = kHuge;
    } else {
      ++k;
      v[k] = q;
      z[k] = s;
      z[k + 1] = kHuge;
    }
  }
  if (k < 0) {
    for (int q = 0; q < n; ++q) {
      d[q] = kHuge;
      ds[q] = -1;
    }
    return;
  }
  int j = 0;
  for (int q = 0; q < n; ++q) {
    while (z[j + 1] < q) ++j;
    int p = v[j];
    d[q] = double(q - p) * (q - p) + f[p];
    ds[q] = site[p];
  }
}

// Exact 2D nearest-site transform: per pixel, squared distance to the nearest
// site pixel and that site's id (-1 where no site exists at all).
void nearest_site(int w, int h, const std::vector<std::pair<Eigen::Vector2i, int>>& sites,
                  Grid<double>& dist2, Grid<int>& idx) {
  dist2 = Grid<double>(w, h, kHuge);
  idx = Grid<int>(w, h, -1);
  for (const auto& [px, id] : sites) {
    if (px.x() < 0 || px.x() >= w || px.y() < 0 || px.y() >= h) continue;
    if (idx.at(px.x(), px.y()) < 0) {
      dist2.at(px.x(), px.y()) = 0;
      idx.at(px.x(), px.y()) = id;
    }
  }
  int n = std::max(w, h);
  std::vector<double> f(n), d(n), z(n + 1);
  std::vector<int> s(n), ds(n), v(n);
  // columns
  for (int x = 0; x < w; ++x) {
    for (int y = 0; y < h; ++y) {
      f[y] = dist2.at(x, y);
      s[y] = idx.at(x, y);
    }
    dt1d(h, f.data(), s.data(), d.data(), ds.data(), v.data(), z.data());
    for (int y = 0; y < h; ++y) {
      dist2.at(x, y) = d[y];
      idx.at(x, y) = ds[y];
    }
  }
  // rows
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      f[x] = dist2.at(x, y);
      s[x] = idx.at(x, y);
    }
    dt1d(w, f.data(), s.data(), d.data(), ds.data(), v.data(), z.data());
    for (int x = 0; x < w; ++x) {
      dist2.at(x, y) = d[x];
      idx.at(x, y) = ds[x];
    }
  }
}

}  // namespace

std::vector<DriftCost> keypoint_drift_unary(const std::vector<KeypointTrack>& tracks,
                                            const std::vector<Pose>& prev_from_curr,
                                            const CameraIntrinsics& intrinsics,
                                            double dt) {
  if (dt <= 0) throw DegenerateConfiguration("keypoint drift needs dt > 0");
  std::vector<DriftCost> out;
  out.reserve(tracks.size());
  for (const KeypointTrack& tr : tracks) {
    if (tr.prev_point.z() <= 0 || tr.curr_point.z() <= 0) continue;
    DriftCost dc;
    dc.pixel = project(intrinsics, tr.curr_point);
    Eigen::Vector2d prev_px = project(intrinsics, tr.prev_point);
    dc.costs.resize(prev_from_curr.size());
    for (size_t m = 0; m < prev_from_curr.size(); ++m) {
      Eigen::Vector3d predicted = prev_from_curr[m].apply(tr.curr_point);
      if (predicted.z() <= 0) {
        dc.costs[m] = kHuge;
        continue;
      }
      dc.costs[m] = (prev_px - project(intrinsics, predicted)).squaredNorm() / dt;
    }
    out.push_back(std::move(dc));
  }
  return out;
}

UnaryField densify_unary(const std::vector<DriftCost>& keypoint_costs,
                         const FlowField& flow,
                         const std::vector<const Grid<float>*>& dense_residuals,
                         const CrfParams& params) {
  const int w = flow.flow.width(), h = flow.flow.height();
  if (w == 0 || h == 0) throw EmptyInput("flow field is empty");
  const size_t models = dense_residuals.size();
  for (const Grid<float>* g : dense_residuals)
    if (g && !g->same_size(flow.flow))
      throw DimensionMismatch("residual grid does not match the flow field");
  for (const DriftCost& dc : keypoint_costs)
    if (dc.costs.size() != models)
      throw DimensionMismatch("drift cost count does not match the model count");

  std::vector<std::pair<Eigen::Vector2i, int>> sites;
  sites.reserve(keypoint_costs.size());
  for (size_t i = 0; i < keypoint_costs.size(); ++i) {
    Eigen::Vector2i px(static_cast<int>(std::lround(keypoint_costs[i].pixel.x())),
                       static_cast<int>(std::lround(keypoint_costs[i].pixel.y())));
    sites.emplace_back(px, static_cast<int>(i));
  }
  Grid<double> dist2;
  Grid<int> nearest;
  nearest_site(w, h, sites, dist2, nearest);

  UnaryField unary;
  unary.costs.assign(models + 1, Grid<float>(w, h, 0.0f));
  const double cap2 = params.keypoint_radius_px * params.keypoint_radius_px;
  const double thr2 = params.static_flow_threshold * params.static_flow_threshold;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double d2 = 0;
      if (flow.valid.at(x, y)) d2 = flow.flow.at(x, y).cast<double>().squaredNorm();
      const double wkp = std::min(1.0, d2 / thr2);
      const int site = (dist2.at(x, y) <= cap2) ? nearest.at(x, y) : -1;
      for (size_t m = 0; m < models; ++m) {
        double icp_cost = params.outlier_unary;
        if (dense_residuals[m]) {
          float r = dense_residuals[m]->at(x, y);
          if (std::isfinite(r)) {
            double c = (r / kResidualScale) * (r / kResidualScale);
            icp_cost = std::min(params.outlier_unary, c);
          }
        }
        double u = icp_cost;
        if (site >= 0) {
          double kp_cost = std::min(keypoint_costs[site].costs[m], kHuge);
          u = wkp * kp_cost + (1.0 - wkp) * icp_cost;
        }
        unary.costs[m].at(x, y) = static_cast<float>(u);
      }
      unary.costs[models].at(x, y) = static_cast<float>(params.outlier_unary);
    }
  }
  return unary;
}

namespace {

// exp(-u) lookup with linear interpolation, u in [0, kUMax); 0 beyond.
struct ExpTable {
  static constexpr int kSize = 4096;
  static constexpr double kUMax = 18.0;
  std::vector<float> values;

  ExpTable() : values(kSize + 1) {
    for (int i = 0; i <= kSize; ++i)
      values[i] = static_cast<float>(std::exp(-kUMax * i / kSize));
  }
  float operator()(double u) const {
    if (u >= kUMax) return 0.0f;
    double t = u * (kSize / kUMax);
    int i = static_cast<int>(t);
    double frac = t - i;
    return static_cast<float>(values[i] * (1.0 - frac) + values[i + 1] * frac);
  }
};

}  // namespace

CrfResult mean_field_infer(const UnaryField& unary, const FlowField& flow,
                           const CrfParams& params) {
  const int w = unary.width(), h = unary.height(), labels = unary.num_labels();
  if (labels == 0 || w == 0 || h == 0) throw EmptyInput("unary field is empty");
  for (const Grid<float>& g : unary.costs)
    if (!g.same_size(w, h)) throw DimensionMismatch("unary grids differ in size");
  if (!flow.flow.same_size(w, h))
    throw DimensionMismatch("flow field does not match the unary field");

  const size_t n = static_cast<size_t>(w) * h;
  // Pixels without a flow measurement carry no smoothness evidence: they are
  // excluded from the pairwise coupling entirely and keep the softmax of
  // their unary. Treating them as zero flow instead would glue unobserved
  // regions to whatever static segment touches them.
  std::vector<float> fx(n, 0.0f), fy(n, 0.0f);
  std::vector<uint8_t> fok(n, 0);
  for (size_t i = 0; i < n; ++i) {
    if (flow.valid[i]) {
      fx[i] = flow.flow[i].x();
      fy[i] = flow.flow[i].y();
      fok[i] = 1;
    }
  }

  // truncated spatial kernel as an offset list (circular support, 3 sigma)
  struct Off {
    int dx, dy;
    float gs;
  };
  const double radius = 3.0 * params.spatial_sigma;
  const int ri = static_cast<int>(std::floor(radius));
  const double inv2ss = 1.0 / (2.0 * params.spatial_sigma * params.spatial_sigma);
  std::vector<Off> offs;
  offs.reserve(static_cast<size_t>(2 * ri + 1) * (2 * ri + 1));
  for (int dy = -ri; dy <= ri; ++dy)
    for (int dx = -ri; dx <= ri; ++dx) {
      if (dx == 0 && dy == 0) continue;
      double r2 = double(dx) * dx + double(dy) * dy;
      if (r2 > radius * radius) continue;
      offs.push_back({dx, dy, static_cast<float>(std::exp(-r2 * inv2ss))});
    }
  const ExpTable flow_exp;
  const double inv2sf = 1.0 / (2.0 * params.flow_sigma * params.flow_sigma);

  // Q initialized to the per-pixel softmax of the negated unary
  std::vector<std::vector<float>> q(labels, std::vector<float>(n));
  std::vector<std::vector<float>> qnext(labels, std::vector<float>(n));
  std::vector<double> expo(labels);
  for (size_t i = 0; i < n; ++i) {
    double best = kHuge;
    for (int l = 0; l < labels; ++l) {
      expo[l] = unary.costs[l][i];
      best = std::min(best, expo[l]);
    }
    double sum = 0;
    for (int l = 0; l < labels; ++l) {
      expo[l] = std::exp(best - expo[l]);
      sum += expo[l];
    }
    for (int l = 0; l < labels; ++l) q[l][i] = static_cast<float>(expo[l] / sum);
  }

  std::vector<double> msg(labels);
  for (int iter = 0; iter < params.mean_field_iterations; ++iter) {
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const size_t i = static_cast<size_t>(y) * w + x;
        std::fill(msg.begin(), msg.end(), 0.0);
        const float fxi = fx[i], fyi = fy[i];
        if (fok[i]) {
          for (const Off& o : offs) {
            const int xj = x + o.dx, yj = y + o.dy;
            if (xj < 0 || xj >= w || yj < 0 || yj >= h) continue;
            const size_t j = static_cast<size_t>(yj) * w + xj;
            if (!fok[j]) continue;
            const double ddx = fxi - fx[j], ddy = fyi - fy[j];
            const float g = o.gs * flow_exp((ddx * ddx + ddy * ddy) * inv2sf);
            if (g == 0.0f) continue;
            for (int l = 0; l < labels; ++l) msg[l] += g * q[l][j];
          }
        }
        double best = -kHuge;
        for (int l = 0; l < labels; ++l) {
          expo[l] = -double(unary.costs[l][i]) + params.pairwise_weight * msg[l];
          best = std::max(best, expo[l]);
        }
        double sum = 0;
        for (int l = 0; l < labels; ++l) {
          expo[l] = std::exp(expo[l] - best);
          sum += expo[l];
        }
        for (int l = 0; l < labels; ++l)
          qnext[l][i] = static_cast<float>(expo[l] / sum);
      }
    }
    q.swap(qnext);
  }

  CrfResult res;
  res.labels = Grid<int32_t>(w, h, 0);
  res.marginals.assign(labels, Grid<float>(w, h, 0.0f));
  for (size_t i = 0; i < n; ++i) {
    int best = 0;
    float bq = q[0][i];
    for (int l = 0; l < labels; ++l) {
      res.marginals[l][i] = q[l][i];
      if (q[l][i] > bq) {
        bq = q[l][i];
        best = l;
      }
    }
    res.labels[i] = best;
  }
  return res;
}

SegmentActions resolve_segments(const Grid<int32_t>& labels, const SceneSet& scene,
                                const std::set<int>& estimation_failed,
                                const CrfParams& params) {
  const int w = labels.width(), h = labels.height();
  SegmentActions actions;

  std::map<int32_t, int> px_count;
  for (int32_t v : labels.data())
    if (v != SegmentationMap::kNoLabel && v != kOutlierLabel) ++px_count[v];

  for (const auto& [id, obj] : scene.tracked) {
    if (id == 0) continue;  // the environment is permanent
    (void)obj;
    auto it = px_count.find(id);
    int count = it == px_count.end() ? 0 : it->second;
    if (count < params.min_segment_px || estimation_failed.count(id))
      actions.lost.push_back(id);
  }

  // 4-connected outlier blobs in scan order
  Grid<uint8_t> seen(w, h, 0);
  std::deque<Eigen::Vector2i> queue;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if (labels.at(x, y) != kOutlierLabel || seen.at(x, y)) continue;
      std::vector<Eigen::Vector2i> blob;
      seen.at(x, y) = 1;
      queue.push_back({x, y});
      while (!queue.empty()) {
        Eigen::Vector2i p = queue.front();
        queue.pop_front();
        blob.push_back(p);
        const int nx[4] = {p.x() + 1, p.x() - 1, p.x(), p.x()};
        const int ny[4] = {p.y(), p.y(), p.y() + 1, p.y() - 1};
        for (int k = 0; k < 4; ++k) {
          if (!labels.in_bounds(nx[k], ny[k]) || seen.at(nx[k], ny[k])) continue;
          if (labels.at(nx[k], ny[k]) != kOutlierLabel) continue;
          seen.at(nx[k], ny[k]) = 1;
          queue.push_back({nx[k], ny[k]});
        }
      }
      if (static_cast<int>(blob.size()) >= params.min_segment_px)
        actions.spawns.push_back(std::move(blob));
    }
  }
  return actions;
}

}  // namespace mmf
