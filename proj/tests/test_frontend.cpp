#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <random>

#include "mmf/errors.hpp"
#include "mmf/frame_frontend.hpp"
#include "mmf/pgm.hpp"

using namespace mmf;
namespace fs = std::filesystem;

namespace {

CameraIntrinsics small_intrinsics(int w, int h) {
  CameraIntrinsics K;
  K.fx = 60.0;
  K.fy = 60.0;
  K.cx = w / 2.0;
  K.cy = h / 2.0;
  K.width = w;
  K.height = h;
  return K;
}

FramePair textured_frame(int w, int h, double z, double timestamp, unsigned seed) {
  FramePair f;
  f.intrinsics = small_intrinsics(w, h);
  f.intensity = Grid<float>(w, h);
  f.depth.values = Grid<float>(w, h, static_cast<float>(z));
  f.timestamp = timestamp;
  f.depth.timestamp = timestamp;
  std::mt19937 rng(seed);
  std::uniform_real_distribution<float> u(0.f, 1.f);
  for (size_t i = 0; i < f.intensity.size(); ++i) f.intensity[i] = u(rng);
  return f;
}

Descriptor unit_descriptor(unsigned seed) {
  std::mt19937 rng(seed);
  std::normal_distribution<float> n(0.f, 1.f);
  Descriptor d;
  for (int i = 0; i < kDescriptorDim; ++i) d(i) = n(rng);
  d.normalize();
  return d;
}

fs::path temp_dir(const std::string& sub) {
  fs::path p = fs::temp_directory_path() / "mmf_frontend_test" / sub;
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST_CASE("a single isolated peak survives extraction") {
  FramePair f = textured_frame(32, 24, 1.0, 0.0, 1);
  KeypointHeatmap hm(32, 24);
  hm.set(10, 12, 0.9f, unit_descriptor(5));
  KeypointSet kps = extract_keypoints(hm, f);
  REQUIRE(kps.keypoints.size() == 1);
  const Keypoint& kp = kps.keypoints[0];
  CHECK(kp.source_pixel == Eigen::Vector2i(10, 12));
  CHECK(kp.response == doctest::Approx(0.9f));
  CHECK((kp.position - backproject(f.intrinsics, 10, 12, 1.0)).norm() < 1e-12);
  CHECK(kp.descriptor.norm() == doctest::Approx(1.0f).epsilon(1e-5));
}

TEST_CASE("adjacent responses 0.5 and 0.6: only the stronger survives NMS") {
  FramePair f = textured_frame(32, 24, 1.0, 0.0, 1);
  KeypointHeatmap hm(32, 24);
  hm.set(10, 12, 0.5f, unit_descriptor(1));
  hm.set(11, 12, 0.6f, unit_descriptor(2));
  KeypointSet kps = extract_keypoints(hm, f);
  REQUIRE(kps.keypoints.size() == 1);
  CHECK(kps.keypoints[0].source_pixel == Eigen::Vector2i(11, 12));
}

TEST_CASE("a uniform response grid yields no keypoints") {
  FramePair f = textured_frame(16, 16, 1.0, 0.0, 1);
  KeypointHeatmap hm(16, 16);
  Descriptor d = unit_descriptor(3);
  for (int y = 0; y < 16; ++y)
    for (int x = 0; x < 16; ++x) hm.set(x, y, 0.01f, d);
  CHECK(extract_keypoints(hm, f).keypoints.empty());
}

TEST_CASE("responses at or below the threshold are discarded") {
  FramePair f = textured_frame(16, 16, 1.0, 0.0, 1);
  KeypointHeatmap hm(16, 16);
  hm.set(4, 4, 0.015f, unit_descriptor(1));   // at threshold: out
  hm.set(10, 10, 0.016f, unit_descriptor(2)); // above: in
  KeypointSet kps = extract_keypoints(hm, f);
  REQUIRE(kps.keypoints.size() == 1);
  CHECK(kps.keypoints[0].source_pixel == Eigen::Vector2i(10, 10));
}

TEST_CASE("keypoint count is non-increasing in the response threshold") {
  FramePair f = textured_frame(48, 48, 1.0, 0.0, 2);
  KeypointHeatmap hm(48, 48);
  std::mt19937 rng(17);
  std::uniform_real_distribution<float> u(0.f, 1.f);
  std::uniform_int_distribution<int> px(0, 47);
  for (int i = 0; i < 200; ++i) hm.set(px(rng), px(rng), u(rng), unit_descriptor(i));
  size_t prev = std::numeric_limits<size_t>::max();
  for (float tau : {0.0f, 0.1f, 0.3f, 0.5f, 0.7f, 0.9f}) {
    KeypointExtractionParams params;
    params.response_threshold = tau;
    size_t count = extract_keypoints(hm, f, params).keypoints.size();
    CHECK(count <= prev);
    prev = count;
  }
}

TEST_CASE("no two extracted keypoints sit within Chebyshev distance 1") {
  FramePair f = textured_frame(64, 64, 1.0, 0.0, 3);
  KeypointHeatmap hm(64, 64);
  std::mt19937 rng(23);
  std::uniform_real_distribution<float> u(0.f, 1.f);
  std::uniform_int_distribution<int> px(0, 63);
  for (int i = 0; i < 400; ++i) hm.set(px(rng), px(rng), 0.1f + 0.9f * u(rng),
                                       unit_descriptor(i));
  KeypointSet kps = extract_keypoints(hm, f);
  for (size_t i = 0; i < kps.keypoints.size(); ++i)
    for (size_t j = i + 1; j < kps.keypoints.size(); ++j) {
      Eigen::Vector2i d = kps.keypoints[i].source_pixel - kps.keypoints[j].source_pixel;
      CHECK(std::max(std::abs(d.x()), std::abs(d.y())) >= 2);
    }
}

TEST_CASE("keypoints on invalid depth are dropped") {
  FramePair f = textured_frame(32, 24, 1.0, 0.0, 1);
  f.depth.values.at(10, 12) = 0.0f;
  KeypointHeatmap hm(32, 24);
  hm.set(10, 12, 0.9f, unit_descriptor(1));
  hm.set(20, 12, 0.9f, unit_descriptor(2));
  KeypointSet kps = extract_keypoints(hm, f);
  REQUIRE(kps.keypoints.size() == 1);
  CHECK(kps.keypoints[0].source_pixel == Eigen::Vector2i(20, 12));
}

TEST_CASE("extraction rejects heatmap/frame size mismatch") {
  FramePair f = textured_frame(32, 24, 1.0, 0.0, 1);
  KeypointHeatmap hm(16, 16);
  CHECK_THROWS_AS(extract_keypoints(hm, f), DimensionMismatch);
}

TEST_CASE("keypoint file write-read-write is bit-exact") {
  KeypointHeatmap hm(20, 15);
  std::mt19937 rng(29);
  std::uniform_real_distribution<float> u(0.f, 1.f);
  for (int i = 0; i < 30; ++i)
    hm.set(static_cast<int>(u(rng) * 19), static_cast<int>(u(rng) * 14),
           0.1f + 0.9f * u(rng), unit_descriptor(i));
  fs::path a = temp_dir("mmkp") / "a.mmkp";
  fs::path b = temp_dir("mmkp") / "b.mmkp";
  save_keypoint_file(a.string(), hm);
  KeypointHeatmap back = load_keypoint_file(a.string());
  save_keypoint_file(b.string(), back);

  std::ifstream fa(a, std::ios::binary), fb(b, std::ios::binary);
  std::string sa((std::istreambuf_iterator<char>(fa)), {});
  std::string sb((std::istreambuf_iterator<char>(fb)), {});
  CHECK(sa == sb);
  CHECK(!sa.empty());
}

TEST_CASE("keypoint file loader rejects bad headers and truncation") {
  fs::path bad = temp_dir("mmkp") / "bad.mmkp";
  {
    std::ofstream out(bad, std::ios::binary);
    out << "WRONG 4 4\n";
  }
  CHECK_THROWS_AS(load_keypoint_file(bad.string()), MalformedFile);

  fs::path truncated = temp_dir("mmkp") / "truncated.mmkp";
  {
    std::ofstream out(truncated, std::ios::binary);
    out << "MMKP1 8 8\n";
    float zeros[16] = {};
    out.write(reinterpret_cast<const char*>(zeros), sizeof(zeros));
  }
  CHECK_THROWS_AS(load_keypoint_file(truncated.string()), TruncatedFile);
}

TEST_CASE("file keypoint provider resolves frames by timestamp") {
  fs::path dir = temp_dir("provider");
  KeypointHeatmap hm(16, 12);
  hm.set(5, 5, 0.5f, unit_descriptor(1));
  save_keypoint_file((dir / (format_timestamp(1.5) + ".mmkp")).string(), hm);

  FramePair f = textured_frame(16, 12, 1.0, 1.5, 1);
  FileKeypointProvider provider(dir.string());
  KeypointHeatmap loaded = provider.compute(f);
  CHECK(loaded.response(5, 5) == doctest::Approx(0.5f));

  FramePair missing = textured_frame(16, 12, 1.0, 9.9, 1);
  CHECK_THROWS_AS(provider.compute(missing), MalformedFile);
}

TEST_CASE("identical frames produce zero flow everywhere valid") {
  FramePair f = textured_frame(64, 48, 1.0, 0.0, 31);
  FramePair g = f;
  g.timestamp = 0.1;
  BlockMatchingFlowProvider provider;
  FlowField flow = provider.compute(f, g);
  REQUIRE(flow.width() == 64);
  REQUIRE(flow.height() == 48);
  for (int y = 0; y < flow.height(); ++y)
    for (int x = 0; x < flow.width(); ++x) {
      CHECK(flow.valid.at(x, y) == 1);
      CHECK(flow.flow.at(x, y).norm() < 1e-4f);
    }
}

TEST_CASE("a global 3 px shift is recovered within half a pixel") {
  const int w = 96, h = 64;
  FramePair prev = textured_frame(w, h, 1.0, 0.0, 37);
  FramePair cur = prev;
  cur.timestamp = 0.1;
  // Shift content 3 px to the right: cur(x) = prev(x - 3).
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      cur.intensity.at(x, y) = prev.intensity.at(std::max(0, x - 3), y);

  BlockMatchingFlowProvider provider;
  FlowField flow = provider.compute(prev, cur);
  std::vector<float> dx, dy;
  for (int y = 8; y < h - 8; ++y)
    for (int x = 8; x < w - 8; ++x)
      if (flow.valid.at(x, y)) {
        dx.push_back(flow.flow.at(x, y).x());
        dy.push_back(flow.flow.at(x, y).y());
      }
  REQUIRE(!dx.empty());
  std::nth_element(dx.begin(), dx.begin() + dx.size() / 2, dx.end());
  std::nth_element(dy.begin(), dy.begin() + dy.size() / 2, dy.end());
  CHECK(std::abs(dx[dx.size() / 2] - 3.0f) <= 0.5f);
  CHECK(std::abs(dy[dy.size() / 2]) <= 0.5f);
}

TEST_CASE("flow provider rejects mismatched frame sizes") {
  FramePair a = textured_frame(32, 24, 1.0, 0.0, 1);
  FramePair b = textured_frame(16, 12, 1.0, 0.1, 1);
  BlockMatchingFlowProvider provider;
  CHECK_THROWS_AS(provider.compute(a, b), DimensionMismatch);
}

TEST_CASE("8-bit PGM round trip and big-endian 16-bit encoding") {
  Grid<uint8_t> img8(7, 5);
  for (size_t i = 0; i < img8.size(); ++i) img8[i] = static_cast<uint8_t>(i * 7);
  fs::path p8 = temp_dir("pgm") / "a.pgm";
  save_pgm8(p8.string(), img8);
  CHECK(load_pgm8(p8.string()) == img8);

  Grid<uint16_t> img16(3, 2);
  img16[0] = 0x1234;
  img16[1] = 0;
  img16[2] = 65535;
  img16[3] = 1;
  img16[4] = 256;
  img16[5] = 0x00ff;
  fs::path p16 = temp_dir("pgm") / "b.pgm";
  save_pgm16(p16.string(), img16);
  CHECK(load_pgm16(p16.string()) == img16);

  // Verify the raster is big-endian: first sample 0x1234 -> bytes 0x12 0x34.
  // The raster is the last 12 bytes of the file (6 samples x 2 bytes).
  std::ifstream in(p16, std::ios::binary);
  std::string bytes((std::istreambuf_iterator<char>(in)), {});
  REQUIRE(bytes.size() > 12);
  CHECK(static_cast<uint8_t>(bytes[bytes.size() - 12]) == 0x12);
  CHECK(static_cast<uint8_t>(bytes[bytes.size() - 11]) == 0x34);
}

TEST_CASE("dataset writer/loader round trip preserves frames") {
  fs::path root = temp_dir("dataset_rt");
  fs::remove_all(root);
  CameraIntrinsics K = small_intrinsics(24, 18);
  DatasetWriter writer(root.string(), K);

  std::vector<FramePair> frames;
  for (int i = 0; i < 3; ++i) {
    FramePair f = textured_frame(24, 18, 1.0 + 0.1 * i, 0.1 * i, 41 + i);
    // Quantize intensity/depth the way the files store them so the round trip
    // is exact: 1/255 intensity steps, 0.1 mm depth steps.
    for (size_t k = 0; k < f.intensity.size(); ++k) {
      f.intensity[k] = std::round(f.intensity[k] * 255.0f) / 255.0f;
      f.depth.values[k] = std::round(f.depth.values[k] * 1e4f) * 1e-4f;
    }
    f.depth.values.at(3, 3) = 0.0f;  // hole survives the trip
    writer.add_frame(f);
    frames.push_back(f);
  }
  writer.finish();

  DatasetIndex index = load_dataset_index(root.string());
  REQUIRE(index.entries.size() == 3);
  CHECK(!index.has_keypoint_dir);
  for (size_t i = 0; i < 3; ++i) {
    FramePair back = load_dataset_frame(index, i);
    CHECK(back.timestamp == doctest::Approx(frames[i].timestamp));
    REQUIRE(back.intensity.same_size(frames[i].intensity));
    for (size_t k = 0; k < back.intensity.size(); ++k) {
      CHECK(back.intensity[k] == doctest::Approx(frames[i].intensity[k]).epsilon(1e-6));
      CHECK(back.depth.values[k] ==
            doctest::Approx(frames[i].depth.values[k]).epsilon(1e-6));
    }
    CHECK(!back.depth_valid_at(3, 3));
  }
}

TEST_CASE("dataset loader demands intrinsics and associations") {
  fs::path root = temp_dir("dataset_missing");
  fs::remove_all(root);
  fs::create_directories(root);
  CHECK_THROWS_AS(load_dataset_index(root.string()), MalformedFile);

  save_intrinsics((root / "intrinsics.txt").string(), small_intrinsics(8, 8));
  CHECK_THROWS_AS(load_dataset_index(root.string()), MalformedFile);
}
