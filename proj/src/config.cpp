#include "mmf/config.hpp"

#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include <json.hpp>

#include "mmf/errors.hpp"

namespace mmf {

namespace {

using json = nlohmann::json;

/// One settable field: writes a string value into the config, reads the
/// current value back for describe_config.
struct Field {
  std::function<void(PipelineConfig&, const std::string&)> set;
  std::function<std::string(const PipelineConfig&)> get;
};

template <typename T>
T parse_value(const std::string& text) {
  std::istringstream in(text);
  T v;
  in >> v;
  if (in.fail() || !(in >> std::ws).eof())
    throw MmfError("cannot parse config value '" + text + "'");
  return v;
}

template <>
bool parse_value<bool>(const std::string& text) {
  if (text == "true" || text == "1") return true;
  if (text == "false" || text == "0") return false;
  throw MmfError("cannot parse config value '" + text + "' as bool");
}

template <>
std::string parse_value<std::string>(const std::string& text) {
  return text;
}

template <typename T>
std::string print_value(const T& v) {
  std::ostringstream out;
  out << v;
  return out.str();
}

std::string print_value(bool v) { return v ? "true" : "false"; }
std::string print_value(float v) { return print_value(static_cast<double>(v)); }

template <typename T>
Field field(T PipelineConfig::* member) {
  return {[member](PipelineConfig& c, const std::string& v) { c.*member = parse_value<T>(v); },
          [member](const PipelineConfig& c) { return print_value(c.*member); }};
}

template <typename Sub, typename T>
Field field(Sub PipelineConfig::* block, T Sub::* member) {
  return {[block, member](PipelineConfig& c, const std::string& v) {
            (c.*block).*member = parse_value<T>(v);
          },
          [block, member](const PipelineConfig& c) { return print_value((c.*block).*member); }};
}

const std::map<std::string, Field>& field_table() {
  static const std::map<std::string, Field> table = {
      {"output_dir", field(&PipelineConfig::output_dir)},
      {"seed", field(&PipelineConfig::seed)},
      {"max_frames", field(&PipelineConfig::max_frames)},
      {"mode", field(&PipelineConfig::mode)},
      {"segmentation", field(&PipelineConfig::segmentation)},
      {"flow_source", field(&PipelineConfig::flow_source)},
      {"crf_scale", field(&PipelineConfig::crf_scale)},
      {"match_history", field(&PipelineConfig::match_history)},
      {"grasp_attach_frames", field(&PipelineConfig::grasp_attach_frames)},
      {"max_objects", field(&PipelineConfig::max_objects)},

      {"keypoints.response_threshold",
       field(&PipelineConfig::keypoints, &KeypointExtractionParams::response_threshold)},
      {"matching.max_descriptor_distance",
       field(&PipelineConfig::matching, &MatchParams::max_descriptor_distance)},

      {"ransac.iterations", field(&PipelineConfig::ransac, &RansacParams::iterations)},
      {"ransac.sample_size", field(&PipelineConfig::ransac, &RansacParams::sample_size)},
      {"ransac.inlier_threshold",
       field(&PipelineConfig::ransac, &RansacParams::inlier_threshold)},
      {"ransac.min_inliers", field(&PipelineConfig::ransac, &RansacParams::min_inliers)},
      {"ransac.min_inlier_fraction",
       field(&PipelineConfig::ransac, &RansacParams::min_inlier_fraction)},

      {"icp.max_iterations", field(&PipelineConfig::icp, &IcpParams::max_iterations)},
      {"icp.convergence_eps", field(&PipelineConfig::icp, &IcpParams::convergence_eps)},
      {"icp.max_correspondence_dist",
       field(&PipelineConfig::icp, &IcpParams::max_correspondence_dist)},
      {"icp.max_normal_angle_deg",
       field(&PipelineConfig::icp, &IcpParams::max_normal_angle_deg)},
      {"icp.huber_delta", field(&PipelineConfig::icp, &IcpParams::huber_delta)},
      {"icp.pyramid_levels", field(&PipelineConfig::icp, &IcpParams::pyramid_levels)},
      {"icp.small_cloud_points", field(&PipelineConfig::icp, &IcpParams::small_cloud_points)},
      {"icp.max_points", field(&PipelineConfig::icp, &IcpParams::max_points)},

      {"crf.spatial_sigma", field(&PipelineConfig::crf, &CrfParams::spatial_sigma)},
      {"crf.flow_sigma", field(&PipelineConfig::crf, &CrfParams::flow_sigma)},
      {"crf.pairwise_weight", field(&PipelineConfig::crf, &CrfParams::pairwise_weight)},
      {"crf.mean_field_iterations",
       field(&PipelineConfig::crf, &CrfParams::mean_field_iterations)},
      {"crf.outlier_unary", field(&PipelineConfig::crf, &CrfParams::outlier_unary)},
      {"crf.min_segment_px", field(&PipelineConfig::crf, &CrfParams::min_segment_px)},
      {"crf.static_flow_threshold",
       field(&PipelineConfig::crf, &CrfParams::static_flow_threshold)},
      {"crf.keypoint_radius_px", field(&PipelineConfig::crf, &CrfParams::keypoint_radius_px)},

      {"redetect.error_threshold",
       field(&PipelineConfig::redetect, &RedetectionParams::error_threshold)},
      {"redetect.min_matches", field(&PipelineConfig::redetect, &RedetectionParams::min_matches)},
      {"redetect.budget_per_frame",
       field(&PipelineConfig::redetect, &RedetectionParams::budget_per_frame)},

      {"flow.levels", field(&PipelineConfig::flow, &BlockMatchingFlowParams::levels)},
      {"flow.block", field(&PipelineConfig::flow, &BlockMatchingFlowParams::block)},
      {"flow.search", field(&PipelineConfig::flow, &BlockMatchingFlowParams::search)},
      {"flow.refine", field(&PipelineConfig::flow, &BlockMatchingFlowParams::refine)},
      {"flow.stride", field(&PipelineConfig::flow, &BlockMatchingFlowParams::stride)},
  };
  return table;
}

}  // namespace

void apply_config_override(PipelineConfig& config, const std::string& key,
                           const std::string& value) {
  auto it = field_table().find(key);
  if (it == field_table().end()) throw MmfError("unknown config key '" + key + "'");
  it->second.set(config, value);
}

PipelineConfig load_config_file(const std::string& path, const PipelineConfig& base) {
  std::ifstream in(path);
  if (!in) throw MmfError("cannot open config file " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw MalformedFile(path + ": " + e.what());
  }
  if (!j.is_object()) throw MalformedFile(path + ": config must be a JSON object");

  PipelineConfig config = base;
  for (const auto& [key, value] : j.items()) {
    std::string text = value.is_string() ? value.get<std::string>() : value.dump();
    apply_config_override(config, key, text);
  }
  return config;
}

void validate_config(const PipelineConfig& config) {
  int sources = !config.dataset_dir.empty() + !config.sim_scenario.empty() +
                !config.sim_script.empty();
  if (sources != 1)
    throw MmfError("exactly one input source required (dataset dir, sim scenario or script)");
  if (config.mode != "sparse+dense" && config.mode != "sparse" && config.mode != "dense")
    throw MmfError("unknown mode '" + config.mode + "'");
  if (config.flow_source != "block" && config.flow_source != "gt")
    throw MmfError("unknown flow source '" + config.flow_source + "'");
  if (config.flow_source == "gt" && !config.dataset_dir.empty())
    throw MmfError("ground-truth flow is only available for simulator sources");
  if (config.output_dir.empty()) throw MmfError("output_dir must not be empty");
  if (config.crf_scale < 1) throw MmfError("crf_scale must be at least 1");
  if (config.match_history < 1) throw MmfError("match_history must be at least 1");
  if (config.max_objects < 1) throw MmfError("max_objects must be at least 1");
  if (config.grasp_attach_frames < 1) throw MmfError("grasp_attach_frames must be at least 1");
}

std::string describe_config(const PipelineConfig& config) {
  std::ostringstream out;
  for (const auto& [key, f] : field_table()) out << key << "=" << f.get(config) << "\n";
  return out.str();
}

}  // namespace mmf
