#include "mmf/frame_frontend.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "mmf/errors.hpp"
#include "mmf/pgm.hpp"

namespace fs = std::filesystem;

namespace mmf {

// --- PGM codec ---------------------------------------------------------------

namespace {
struct PgmHeader {
  int width = 0, height = 0, maxval = 0;
};

PgmHeader read_pgm_header(std::ifstream& in, const std::string& path) {
  std::string magic;
  in >> magic;
  if (magic != "P5") throw MalformedFile("not a binary PGM (P5): " + path);
  PgmHeader h;
  // Netpbm allows '#' comments between header tokens.
  auto next_int = [&](int& out) {
    while (true) {
      in >> std::ws;
      if (in.peek() == '#') {
        std::string comment;
        std::getline(in, comment);
        continue;
      }
      if (!(in >> out)) throw MalformedFile("bad PGM header: " + path);
      return;
    }
  };
  next_int(h.width);
  next_int(h.height);
  next_int(h.maxval);
  in.get();  // single whitespace byte before the raster
  if (h.width <= 0 || h.height <= 0) throw MalformedFile("bad PGM size: " + path);
  return h;
}
}  // namespace

void save_pgm8(const std::string& path, const Grid<uint8_t>& img) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw MalformedFile("cannot write PGM: " + path);
  out << "P5\n" << img.width() << " " << img.height() << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.data().data()),
            static_cast<std::streamsize>(img.size()));
}

Grid<uint8_t> load_pgm8(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MalformedFile("cannot open PGM: " + path);
  PgmHeader h = read_pgm_header(in, path);
  if (h.maxval != 255) throw MalformedFile("expected 8-bit PGM: " + path);
  Grid<uint8_t> img(h.width, h.height);
  in.read(reinterpret_cast<char*>(img.data().data()),
          static_cast<std::streamsize>(img.size()));
  if (in.gcount() != static_cast<std::streamsize>(img.size()))
    throw TruncatedFile("PGM raster ended early: " + path);
  return img;
}

void save_pgm16(const std::string& path, const Grid<uint16_t>& img) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw MalformedFile("cannot write PGM: " + path);
  out << "P5\n" << img.width() << " " << img.height() << "\n65535\n";
  std::vector<uint8_t> raster(img.size() * 2);
  for (size_t i = 0; i < img.size(); ++i) {
    raster[2 * i] = static_cast<uint8_t>(img[i] >> 8);  // big-endian per Netpbm
    raster[2 * i + 1] = static_cast<uint8_t>(img[i] & 0xff);
  }
  out.write(reinterpret_cast<const char*>(raster.data()),
            static_cast<std::streamsize>(raster.size()));
}

Grid<uint16_t> load_pgm16(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MalformedFile("cannot open PGM: " + path);
  PgmHeader h = read_pgm_header(in, path);
  if (h.maxval != 65535) throw MalformedFile("expected 16-bit PGM: " + path);
  Grid<uint16_t> img(h.width, h.height);
  std::vector<uint8_t> raster(img.size() * 2);
  in.read(reinterpret_cast<char*>(raster.data()),
          static_cast<std::streamsize>(raster.size()));
  if (in.gcount() != static_cast<std::streamsize>(raster.size()))
    throw TruncatedFile("PGM raster ended early: " + path);
  for (size_t i = 0; i < img.size(); ++i)
    img[i] = static_cast<uint16_t>((raster[2 * i] << 8) | raster[2 * i + 1]);
  return img;
}

// --- keypoint heatmap ----------------------------------------------------------

void KeypointHeatmap::set(int x, int y, float response, const Descriptor& desc) {
  response_.at(x, y) = response;
  if (response == 0.0f)
    descriptors_.erase(key(x, y));
  else
    descriptors_[key(x, y)] = desc;
}

Descriptor KeypointHeatmap::descriptor(int x, int y) const {
  auto it = descriptors_.find(key(x, y));
  return it == descriptors_.end() ? Descriptor::Zero() : it->second;
}

bool KeypointHeatmap::has_descriptor(int x, int y) const {
  return descriptors_.count(key(x, y)) != 0;
}

void save_keypoint_file(const std::string& path, const KeypointHeatmap& heatmap) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw MalformedFile("cannot write keypoint file: " + path);
  out << "MMKP1 " << heatmap.width() << " " << heatmap.height() << "\n";
  const Grid<float>& resp = heatmap.response_grid();
  out.write(reinterpret_cast<const char*>(resp.data().data()),
            static_cast<std::streamsize>(resp.size() * sizeof(float)));
  // Descriptor grid: 256 float32 per pixel, zeros where nothing is stored.
  const Descriptor zero = Descriptor::Zero();
  for (int y = 0; y < heatmap.height(); ++y) {
    for (int x = 0; x < heatmap.width(); ++x) {
      if (heatmap.has_descriptor(x, y)) {
        Descriptor d = heatmap.descriptor(x, y);
        out.write(reinterpret_cast<const char*>(d.data()),
                  kDescriptorDim * sizeof(float));
      } else {
        out.write(reinterpret_cast<const char*>(zero.data()),
                  kDescriptorDim * sizeof(float));
      }
    }
  }
}

KeypointHeatmap load_keypoint_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MalformedFile("cannot open keypoint file: " + path);
  std::string magic;
  int w = 0, h = 0;
  in >> magic >> w >> h;
  if (magic != "MMKP1" || w <= 0 || h <= 0)
    throw MalformedFile("bad keypoint file header: " + path);
  in.get();  // newline before the payload
  KeypointHeatmap heatmap(w, h);
  Grid<float> resp(w, h);
  in.read(reinterpret_cast<char*>(resp.data().data()),
          static_cast<std::streamsize>(resp.size() * sizeof(float)));
  if (in.gcount() != static_cast<std::streamsize>(resp.size() * sizeof(float)))
    throw TruncatedFile("keypoint file response grid ended early: " + path);
  Descriptor d;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      in.read(reinterpret_cast<char*>(d.data()), kDescriptorDim * sizeof(float));
      if (in.gcount() != static_cast<std::streamsize>(kDescriptorDim * sizeof(float)))
        throw TruncatedFile("keypoint file descriptor grid ended early: " + path);
      float r = resp.at(x, y);
      if (r != 0.0f) heatmap.set(x, y, r, d);
    }
  }
  return heatmap;
}

KeypointSet extract_keypoints(const KeypointHeatmap& heatmap, const FramePair& frame,
                              const KeypointExtractionParams& params) {
  if (heatmap.width() != frame.width() || heatmap.height() != frame.height())
    throw DimensionMismatch("extract_keypoints: heatmap size != frame size");
  const Grid<float>& r = heatmap.response_grid();
  KeypointSet set;
  set.frame_id = -1;
  set.timestamp = frame.timestamp;
  for (int y = 0; y < r.height(); ++y) {
    for (int x = 0; x < r.width(); ++x) {
      float v = r.at(x, y);
      if (!(v > params.response_threshold)) continue;
      // 3x3 strict non-maximum suppression; out-of-image neighbours count as 0.
      bool is_max = true;
      for (int dy = -1; dy <= 1 && is_max; ++dy)
        for (int dx = -1; dx <= 1 && is_max; ++dx) {
          if (dx == 0 && dy == 0) continue;
          if (r.in_bounds(x + dx, y + dy) && !(v > r.at(x + dx, y + dy)))
            is_max = false;
        }
      if (!is_max) continue;
      if (!frame.depth_valid_at(x, y)) continue;
      Keypoint kp;
      kp.position =
          backproject(frame.intrinsics, x, y, frame.depth.values.at(x, y));
      kp.descriptor = heatmap.descriptor(x, y);
      kp.response = v;
      kp.source_pixel = Eigen::Vector2i(x, y);
      kp.timestamp = frame.timestamp;
      set.keypoints.push_back(std::move(kp));
    }
  }
  return set;
}

KeypointHeatmap FileKeypointProvider::compute(const FramePair& frame) {
  fs::path file = fs::path(dir_) / (format_timestamp(frame.timestamp) + ".mmkp");
  return load_keypoint_file(file.string());
}

// --- block matching flow -------------------------------------------------------

namespace {

Grid<float> downsample2(const Grid<float>& img) {
  int w = std::max(1, img.width() / 2), h = std::max(1, img.height() / 2);
  Grid<float> out(w, h);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      int x0 = 2 * x, y0 = 2 * y;
      int x1 = std::min(x0 + 1, img.width() - 1), y1 = std::min(y0 + 1, img.height() - 1);
      out.at(x, y) =
          0.25f * (img.at(x0, y0) + img.at(x1, y0) + img.at(x0, y1) + img.at(x1, y1));
    }
  return out;
}

/// Mean absolute intensity difference of a block centered at (cx, cy) in
/// `cur` against the block at (cx - dx, cy - dy) in `prev`. Returns the
/// overlap pixel count through `count`.
float block_sad(const Grid<float>& prev, const Grid<float>& cur, int cx, int cy,
                int dx, int dy, int radius, int& count) {
  float sum = 0;
  count = 0;
  for (int oy = -radius; oy < radius; ++oy) {
    int yc = cy + oy, yp = cy + oy - dy;
    if (yc < 0 || yc >= cur.height() || yp < 0 || yp >= prev.height()) continue;
    for (int ox = -radius; ox < radius; ++ox) {
      int xc = cx + ox, xp = cx + ox - dx;
      if (xc < 0 || xc >= cur.width() || xp < 0 || xp >= prev.width()) continue;
      sum += std::abs(cur.at(xc, yc) - prev.at(xp, yp));
      ++count;
    }
  }
  return count > 0 ? sum / static_cast<float>(count) : std::numeric_limits<float>::max();
}

struct BlockGrid {
  int bw = 0, bh = 0, stride = 1;
  std::vector<Eigen::Vector2f> v;
  std::vector<uint8_t> ok;
  Eigen::Vector2f& at(int bx, int by) { return v[static_cast<size_t>(by) * bw + bx]; }
  const Eigen::Vector2f& at(int bx, int by) const {
    return v[static_cast<size_t>(by) * bw + bx];
  }
};

/// Offsets sorted by radius then scan order: the first minimum found wins, so
/// ties resolve toward the smallest displacement deterministically.
std::vector<Eigen::Vector2i> search_offsets(int radius) {
  std::vector<Eigen::Vector2i> offs;
  offs.reserve(static_cast<size_t>(2 * radius + 1) * (2 * radius + 1));
  for (int dy = -radius; dy <= radius; ++dy)
    for (int dx = -radius; dx <= radius; ++dx) offs.emplace_back(dx, dy);
  std::stable_sort(offs.begin(), offs.end(),
                   [](const Eigen::Vector2i& a, const Eigen::Vector2i& b) {
                     return a.squaredNorm() < b.squaredNorm();
                   });
  return offs;
}

/// One parabolic 1D sub-pixel step from three samples around the minimum.
float parabolic_offset(float left, float mid, float right) {
  float denom = left - 2.0f * mid + right;
  if (!(denom > 1e-12f)) return 0.0f;
  float d = 0.5f * (left - right) / denom;
  return std::clamp(d, -0.5f, 0.5f);
}

BlockGrid match_level(const Grid<float>& prev, const Grid<float>& cur,
                      const BlockGrid* prior, const BlockMatchingFlowParams& p,
                      bool finest) {
  BlockGrid g;
  g.stride = p.stride;
  g.bw = (cur.width() + p.stride - 1) / p.stride;
  g.bh = (cur.height() + p.stride - 1) / p.stride;
  g.v.assign(static_cast<size_t>(g.bw) * g.bh, Eigen::Vector2f::Zero());
  g.ok.assign(g.v.size(), 0);
  const int radius = p.block / 2;
  const int search = prior ? p.refine : p.search;
  std::vector<Eigen::Vector2i> offs = search_offsets(search);
  const int min_overlap = (p.block * p.block) / 4;

  for (int by = 0; by < g.bh; ++by) {
    for (int bx = 0; bx < g.bw; ++bx) {
      int cx = bx * p.stride + p.stride / 2;
      int cy = by * p.stride + p.stride / 2;
      Eigen::Vector2i base(0, 0);
      if (prior) {
        // Prior block grid covers the half-size level: scale indices and flow.
        int pbx = std::clamp(bx / 2, 0, prior->bw - 1);
        int pby = std::clamp(by / 2, 0, prior->bh - 1);
        Eigen::Vector2f pv = prior->at(pbx, pby) * 2.0f;
        base = Eigen::Vector2i(static_cast<int>(std::lround(pv.x())),
                               static_cast<int>(std::lround(pv.y())));
      }
      float best = std::numeric_limits<float>::max();
      Eigen::Vector2i best_d = base;
      int count = 0;
      for (const Eigen::Vector2i& o : offs) {
        int dx = base.x() + o.x(), dy = base.y() + o.y();
        int c = 0;
        float sad = block_sad(prev, cur, cx, cy, dx, dy, radius, c);
        if (c < min_overlap) continue;
        if (sad < best) {
          best = sad;
          best_d = Eigen::Vector2i(dx, dy);
          count = c;
        }
      }
      if (count == 0) {
        g.ok[static_cast<size_t>(by) * g.bw + bx] = 0;
        continue;
      }
      Eigen::Vector2f d = best_d.cast<float>();
      if (finest && best > 0.0f) {  // a perfect match needs no refinement
        // Parabolic sub-pixel refinement, each axis independently.
        int c;
        float lx = block_sad(prev, cur, cx, cy, best_d.x() - 1, best_d.y(), radius, c);
        float rx = block_sad(prev, cur, cx, cy, best_d.x() + 1, best_d.y(), radius, c);
        float uy = block_sad(prev, cur, cx, cy, best_d.x(), best_d.y() - 1, radius, c);
        float dy2 = block_sad(prev, cur, cx, cy, best_d.x(), best_d.y() + 1, radius, c);
        d.x() += parabolic_offset(lx, best, rx);
        d.y() += parabolic_offset(uy, best, dy2);
      }
      g.at(bx, by) = d;
      g.ok[static_cast<size_t>(by) * g.bw + bx] = 1;
    }
  }
  return g;
}

/// 3x3 component-wise median over the block grid; keeps motion boundaries
/// from smearing across neighbouring blocks.
void median_filter(BlockGrid& g) {
  std::vector<Eigen::Vector2f> out = g.v;
  std::vector<float> vals;
  for (int by = 0; by < g.bh; ++by) {
    for (int bx = 0; bx < g.bw; ++bx) {
      if (!g.ok[static_cast<size_t>(by) * g.bw + bx]) continue;
      for (int c = 0; c < 2; ++c) {
        vals.clear();
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            int nx = bx + dx, ny = by + dy;
            if (nx < 0 || nx >= g.bw || ny < 0 || ny >= g.bh) continue;
            if (!g.ok[static_cast<size_t>(ny) * g.bw + nx]) continue;
            vals.push_back(g.at(nx, ny)(c));
          }
        std::nth_element(vals.begin(), vals.begin() + vals.size() / 2, vals.end());
        out[static_cast<size_t>(by) * g.bw + bx](c) = vals[vals.size() / 2];
      }
    }
  }
  g.v = std::move(out);
}

}  // namespace

FlowField BlockMatchingFlowProvider::compute(const FramePair& previous,
                                             const FramePair& current) {
  if (!previous.intensity.same_size(current.intensity))
    throw DimensionMismatch("compute_flow: frame sizes differ");
  const int w = current.width(), h = current.height();

  std::vector<Grid<float>> prev_pyr{previous.intensity}, cur_pyr{current.intensity};
  for (int l = 1; l < params_.levels; ++l) {
    prev_pyr.push_back(downsample2(prev_pyr.back()));
    cur_pyr.push_back(downsample2(cur_pyr.back()));
  }

  BlockGrid grid;
  const BlockGrid* prior = nullptr;
  for (int l = params_.levels - 1; l >= 0; --l) {
    grid = match_level(prev_pyr[l], cur_pyr[l], prior, params_, l == 0);
    prior = &grid;
  }
  median_filter(grid);

  // Bilinear interpolation of block vectors down to pixels.
  FlowField field(w, h);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      float gx = (static_cast<float>(x) - params_.stride / 2.0f) / params_.stride;
      float gy = (static_cast<float>(y) - params_.stride / 2.0f) / params_.stride;
      int bx0 = std::clamp(static_cast<int>(std::floor(gx)), 0, grid.bw - 1);
      int by0 = std::clamp(static_cast<int>(std::floor(gy)), 0, grid.bh - 1);
      int bx1 = std::min(bx0 + 1, grid.bw - 1);
      int by1 = std::min(by0 + 1, grid.bh - 1);
      float fx = std::clamp(gx - bx0, 0.0f, 1.0f);
      float fy = std::clamp(gy - by0, 0.0f, 1.0f);
      bool ok = grid.ok[static_cast<size_t>(by0) * grid.bw + bx0] &&
                grid.ok[static_cast<size_t>(by0) * grid.bw + bx1] &&
                grid.ok[static_cast<size_t>(by1) * grid.bw + bx0] &&
                grid.ok[static_cast<size_t>(by1) * grid.bw + bx1];
      if (!ok) continue;
      Eigen::Vector2f d = (1 - fx) * (1 - fy) * grid.at(bx0, by0) +
                          fx * (1 - fy) * grid.at(bx1, by0) +
                          (1 - fx) * fy * grid.at(bx0, by1) +
                          fx * fy * grid.at(bx1, by1);
      field.flow.at(x, y) = d;
      field.valid.at(x, y) = 1;
    }
  }
  return field;
}

// --- dataset I/O ---------------------------------------------------------------

std::string format_timestamp(double t) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6f", t);
  return std::string(buf);
}

DatasetIndex load_dataset_index(const std::string& root) {
  DatasetIndex index;
  index.root = root;
  fs::path intr = fs::path(root) / "intrinsics.txt";
  if (!fs::exists(intr))
    throw MalformedFile("dataset is missing intrinsics.txt: " + root);
  index.intrinsics = load_intrinsics(intr.string());

  fs::path assoc = fs::path(root) / "associations.txt";
  std::ifstream in(assoc);
  if (!in) throw MalformedFile("dataset is missing associations.txt: " + root);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ss(line);
    DatasetEntry e;
    if (!(ss >> e.rgb_timestamp >> e.rgb_path >> e.depth_timestamp >> e.depth_path))
      throw MalformedFile("bad associations line: " + line);
    index.entries.push_back(std::move(e));
  }
  index.has_keypoint_dir = fs::is_directory(fs::path(root) / "keypoints");
  return index;
}

FramePair load_dataset_frame(const DatasetIndex& index, size_t i) {
  if (i >= index.entries.size()) throw MmfError("dataset frame index out of range");
  const DatasetEntry& e = index.entries[i];
  Grid<uint8_t> rgb = load_pgm8((fs::path(index.root) / e.rgb_path).string());
  Grid<uint16_t> depth = load_pgm16((fs::path(index.root) / e.depth_path).string());
  if (rgb.width() != depth.width() || rgb.height() != depth.height())
    throw DimensionMismatch("dataset rgb/depth image sizes differ");
  FramePair frame;
  frame.intensity = Grid<float>(rgb.width(), rgb.height());
  for (size_t k = 0; k < rgb.size(); ++k)
    frame.intensity[k] = static_cast<float>(rgb[k]) / 255.0f;
  frame.depth.values = Grid<float>(depth.width(), depth.height());
  for (size_t k = 0; k < depth.size(); ++k)
    frame.depth.values[k] = static_cast<float>(depth[k]) * 1e-4f;  // 0.1 mm units
  frame.depth.timestamp = e.depth_timestamp;
  frame.intrinsics = index.intrinsics;
  frame.timestamp = e.rgb_timestamp;
  frame.index = static_cast<int>(i);
  return frame;
}

DatasetWriter::DatasetWriter(std::string root, const CameraIntrinsics& intrinsics)
    : root_(std::move(root)), intrinsics_(intrinsics) {
  fs::create_directories(fs::path(root_) / "rgb");
  fs::create_directories(fs::path(root_) / "depth");
}

void DatasetWriter::add_frame(const FramePair& frame, const KeypointHeatmap* heatmap) {
  std::string stem = format_timestamp(frame.timestamp);
  Grid<uint8_t> rgb(frame.width(), frame.height());
  for (size_t k = 0; k < rgb.size(); ++k) {
    float v = std::clamp(frame.intensity[k], 0.0f, 1.0f);
    rgb[k] = static_cast<uint8_t>(std::lround(v * 255.0f));
  }
  Grid<uint16_t> depth(frame.width(), frame.height());
  for (size_t k = 0; k < depth.size(); ++k) {
    float z = frame.depth.values[k];
    float units = mmf::depth_valid(z) ? z * 1e4f : 0.0f;  // 0.1 mm units, 0 = invalid
    depth[k] = static_cast<uint16_t>(std::clamp(std::lround(units), 0l, 65535l));
  }
  save_pgm8((fs::path(root_) / "rgb" / (stem + ".pgm")).string(), rgb);
  save_pgm16((fs::path(root_) / "depth" / (stem + ".pgm")).string(), depth);
  if (heatmap) {
    fs::create_directories(fs::path(root_) / "keypoints");
    save_keypoint_file((fs::path(root_) / "keypoints" / (stem + ".mmkp")).string(),
                       *heatmap);
  }
  char line[512];
  std::snprintf(line, sizeof(line), "%s rgb/%s.pgm %s depth/%s.pgm", stem.c_str(),
                stem.c_str(), stem.c_str(), stem.c_str());
  association_lines_.emplace_back(line);
}

void DatasetWriter::finish() {
  if (finished_) return;
  save_intrinsics((fs::path(root_) / "intrinsics.txt").string(), intrinsics_);
  std::ofstream out(fs::path(root_) / "associations.txt");
  for (const std::string& line : association_lines_) out << line << "\n";
  finished_ = true;
}

}  // namespace mmf
