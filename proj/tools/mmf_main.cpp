#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mmf/config.hpp"
#include "mmf/errors.hpp"
#include "mmf/evaluation.hpp"
#include "mmf/geometry.hpp"
#include "mmf/pipeline.hpp"
#include "mmf/sim.hpp"
#include "mmf/world_model.hpp"

namespace {

std::string fixed9(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.9f", v);
  return buf;
}

int cmd_run(const mmf::PipelineConfig& config) {
  mmf::run_pipeline(config);
  std::cout << "run complete: " << config.output_dir << "\n";
  return 0;
}

int cmd_eval_ate(const std::string& est, const std::string& truth) {
  double v = mmf::ate_rmse(mmf::load_tum_trajectory(est), mmf::load_tum_trajectory(truth));
  std::cout << "metric,value\n" << "ate," << fixed9(v) << "\n";
  return 0;
}

int cmd_eval_rpe(const std::string& est, const std::string& truth, double delta) {
  mmf::RpeResult r =
      mmf::rpe_rmse(mmf::load_tum_trajectory(est), mmf::load_tum_trajectory(truth), delta);
  std::cout << "metric,value\n"
            << "rpe_translational," << fixed9(r.translational) << "\n"
            << "rpe_rotational_deg," << fixed9(r.rotational_deg) << "\n";
  return 0;
}

int cmd_eval_recon(const std::string& est, const std::string& truth) {
  mmf::ReconstructionError e =
      mmf::reconstruction_error(mmf::load_ply(est), mmf::load_ply(truth));
  std::cout << "metric,value,stddev\n"
            << "reconstruction," << fixed9(e.mean) << "," << fixed9(e.stddev) << "\n";
  return 0;
}

int cmd_sim_export(const std::string& scenario, const std::string& script_path,
                   const std::string& out_dir, int max_frames, bool keypoints) {
  mmf::SceneScript script = script_path.empty() ? mmf::builtin_scenario(scenario)
                                                : mmf::load_scene_script(script_path);
  mmf::SceneRenderer renderer(std::move(script));
  int total = renderer.frame_count();
  if (max_frames >= 0) total = std::min(total, max_frames);

  mmf::DatasetWriter writer(out_dir, renderer.script().intrinsics);
  for (int i = 0; i < total; ++i) {
    mmf::RenderedFrame rendered = renderer.render(i);
    if (keypoints) {
      mmf::KeypointHeatmap heat = renderer.keypoint_heatmap(i);
      writer.add_frame(rendered.frame, &heat);
    } else {
      writer.add_frame(rendered.frame);
    }
  }
  writer.finish();
  std::cout << "exported " << total << " frames to " << out_dir << "\n";
  return 0;
}

int cmd_inspect(const std::string& path) {
  mmf::PointCloud cloud = mmf::load_ply(path);
  if (cloud.empty()) {
    std::cout << path << ": empty cloud\n";
    return 0;
  }
  Eigen::Vector3d lo = cloud.points.front().position, hi = lo,
                  centroid = Eigen::Vector3d::Zero();
  double intensity = 0;
  for (const mmf::CloudPoint& p : cloud.points) {
    lo = lo.cwiseMin(p.position);
    hi = hi.cwiseMax(p.position);
    centroid += p.position;
    intensity += p.intensity;
  }
  centroid /= static_cast<double>(cloud.size());
  intensity /= static_cast<double>(cloud.size());
  std::cout << path << ": " << cloud.size() << " points\n"
            << "  bounds min " << fixed9(lo.x()) << " " << fixed9(lo.y()) << " "
            << fixed9(lo.z()) << "\n"
            << "  bounds max " << fixed9(hi.x()) << " " << fixed9(hi.y()) << " "
            << fixed9(hi.z()) << "\n"
            << "  centroid   " << fixed9(centroid.x()) << " " << fixed9(centroid.y())
            << " " << fixed9(centroid.z()) << "\n"
            << "  mean intensity " << fixed9(intensity) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"multi-motion RGB-D tracking"};
  app.require_subcommand(1);

  // ---- run -------------------------------------------------------------------
  auto* run = app.add_subcommand("run", "track every rigid motion in a sequence");
  std::string run_sim, run_script, run_dataset, run_out = "out", run_config;
  std::vector<std::string> run_sets;
  uint64_t run_seed = 1;
  bool seed_given = false;
  int run_frames = -1;
  bool help_config = false;
  run->add_option("--sim", run_sim, "builtin scenario name");
  run->add_option("--script", run_script, "scene script JSON");
  run->add_option("--dataset", run_dataset, "dataset directory");
  run->add_option("--out", run_out, "output directory");
  run->add_option("--config", run_config, "JSON config file of dotted keys");
  run->add_option("--seed", run_seed, "RNG seed")->each([&](const std::string&) {
    seed_given = true;
  });
  run->add_option("--frames", run_frames, "process at most this many frames");
  run->add_option("--set", run_sets, "override, key=value (repeatable)");
  run->add_flag("--help-config", help_config, "list all config keys and exit");

  // ---- eval ------------------------------------------------------------------
  auto* eval = app.add_subcommand("eval", "trajectory and reconstruction metrics");
  eval->require_subcommand(1);
  std::string est_path, truth_path;
  double rpe_delta = 1.0;
  auto* ate = eval->add_subcommand("ate", "absolute trajectory error (TUM files)");
  ate->add_option("estimate", est_path)->required();
  ate->add_option("truth", truth_path)->required();
  auto* rpe = eval->add_subcommand("rpe", "relative pose error (TUM files)");
  rpe->add_option("estimate", est_path)->required();
  rpe->add_option("truth", truth_path)->required();
  rpe->add_option("--delta", rpe_delta, "pair separation in seconds");
  auto* recon = eval->add_subcommand("recon", "cloud-to-cloud distance (PLY files)");
  recon->add_option("estimate", est_path)->required();
  recon->add_option("truth", truth_path)->required();

  // ---- sim -------------------------------------------------------------------
  auto* sim = app.add_subcommand("sim", "synthetic scene tools");
  sim->require_subcommand(1);
  auto* exp = sim->add_subcommand("export", "render a scenario into a dataset");
  std::string exp_sim, exp_script, exp_out;
  int exp_frames = -1;
  bool exp_keypoints = false;
  exp->add_option("--sim", exp_sim, "builtin scenario name");
  exp->add_option("--script", exp_script, "scene script JSON");
  exp->add_option("--out", exp_out, "dataset directory")->required();
  exp->add_option("--frames", exp_frames, "export at most this many frames");
  exp->add_flag("--keypoints", exp_keypoints,
                "also write dense keypoint heatmaps (large files)");
  auto* list = sim->add_subcommand("list", "list builtin scenarios");

  // ---- inspect ----------------------------------------------------------------
  auto* inspect = app.add_subcommand("inspect", "summarize a PLY model");
  std::string inspect_path;
  inspect->add_option("model", inspect_path, "PLY file")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (run->parsed()) {
      mmf::PipelineConfig config;
      config.sim_scenario = run_sim;
      config.sim_script = run_script;
      config.dataset_dir = run_dataset;
      // simulator runs default to exact flow; file/--set values still win
      if (run_dataset.empty()) config.flow_source = "gt";
      if (!run_config.empty()) config = mmf::load_config_file(run_config, config);
      config.output_dir = run_out;
      if (seed_given) config.seed = run_seed;
      if (run_frames >= 0) config.max_frames = run_frames;
      for (const std::string& kv : run_sets) {
        auto pos = kv.find('=');
        if (pos == std::string::npos)
          throw mmf::MmfError("--set expects key=value, got '" + kv + "'");
        mmf::apply_config_override(config, kv.substr(0, pos), kv.substr(pos + 1));
      }
      if (help_config) {
        std::cout << mmf::describe_config(config);
        return 0;
      }
      return cmd_run(config);
    }
    if (ate->parsed()) return cmd_eval_ate(est_path, truth_path);
    if (rpe->parsed()) return cmd_eval_rpe(est_path, truth_path, rpe_delta);
    if (recon->parsed()) return cmd_eval_recon(est_path, truth_path);
    if (exp->parsed()) {
      if (exp_sim.empty() == exp_script.empty())
        throw mmf::MmfError("sim export needs exactly one of --sim / --script");
      return cmd_sim_export(exp_sim, exp_script, exp_out, exp_frames, exp_keypoints);
    }
    if (list->parsed()) {
      for (const std::string& name : mmf::builtin_scenario_names())
        std::cout << name << "\n";
      return 0;
    }
    if (inspect->parsed()) return cmd_inspect(inspect_path);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
