#pragma once

#include <cstdint>
#include <string>

#include "mmf/dense_estimator.hpp"
#include "mmf/frame_frontend.hpp"
#include "mmf/model_manager.hpp"
#include "mmf/motion_segmenter.hpp"
#include "mmf/sparse_estimator.hpp"

namespace mmf {

/// Everything a pipeline run depends on. Defaults here are the authoritative
/// defaults of every stage; a config file and command-line overrides layer on
/// top (defaults < file < overrides).
struct PipelineConfig {
  // input: exactly one of these, checked by validate_config
  std::string dataset_dir;    // dataset directory (see frame_frontend.hpp)
  std::string sim_scenario;   // builtin scenario name
  std::string sim_script;     // scene script JSON path

  std::string output_dir = "out";
  uint64_t seed = 1;
  int max_frames = -1;  // cap on processed frames, -1 = whole input

  // estimation mode: "sparse+dense" | "sparse" | "dense"
  std::string mode = "sparse+dense";
  bool segmentation = true;
  // "block" = block-matching flow; "gt" = simulator ground truth (sim only)
  std::string flow_source = "block";

  // stage parameters
  KeypointExtractionParams keypoints;
  MatchParams matching;
  RansacParams ransac;
  IcpParams icp;
  CrfParams crf;
  RedetectionParams redetect;
  BlockMatchingFlowParams flow;

  int crf_scale = 4;           // segmentation runs at 1/crf_scale resolution
  int match_history = 2;       // newest keypoint-history entries used per object
  int grasp_attach_frames = 5; // registered frames before a grasp frame is fit
  int max_objects = 8;         // tracked objects incl. the environment
};

/// Applies one dotted-key override, e.g. ("icp.max_iterations", "30") or
/// ("mode", "sparse"). Values are parsed by the target field's type. Throws
/// MmfError for unknown keys or unparseable values.
void apply_config_override(PipelineConfig& config, const std::string& key,
                           const std::string& value);

/// Loads a JSON config file: a flat object of dotted keys onto the defaults
/// in `base`. Throws MalformedFile / MmfError.
PipelineConfig load_config_file(const std::string& path,
                                const PipelineConfig& base = {});

/// Structural sanity: exactly one input source, known mode and flow source
/// (gt requires a sim source), positive scales/budgets. Throws MmfError.
void validate_config(const PipelineConfig& config);

/// The full override key set, one "key=value" per line with current values —
/// what `mmf run --help-config` prints.
std::string describe_config(const PipelineConfig& config);

}  // namespace mmf
