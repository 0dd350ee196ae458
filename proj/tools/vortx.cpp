// vortx command-line tool.

#include "vortx/pipeline.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>

using namespace vortx;
namespace fs = std::filesystem;

namespace {

nlohmann::json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path);
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(path + ": " + e.what(), e.byte);
  }
}

int cmd_synth(const std::string& spec, const std::string& out, std::uint64_t seed) {
  const auto specs = specs_from_request(read_json(spec), seed);
  const auto dirs = write_dataset(specs, out);
  for (const auto& d : dirs) std::cout << d << '\n';
  return 0;
}

int cmd_make_gt(const std::string& scene_dir, const std::string& out, double truncation) {
  const Scene s = load_scene(scene_dir);
  const GroundTruth gt = scene_ground_truth(s, truncation);
  fs::create_directories(out);
  save_ground_truth((fs::path(out) / "gt_tsdf.bin").string(), gt);
  const TriMesh mesh = ground_truth_mesh(gt);
  write_mesh((fs::path(out) / "gt_mesh.ply").string(), mesh, {"ground truth of " + s.name});
  std::cout << "voxels " << gt.tsdf.grid.size() << " vertices " << mesh.vertices.size() << " triangles "
            << mesh.triangles.size() << '\n';
  return 0;
}

int cmd_keyframes(const std::string& scene_dir, double rmax, double tmax) {
  const Scene s = load_scene(scene_dir);
  const auto kf = select_keyframes(s.poses, rmax, tmax);
  for (std::size_t i = 0; i < kf.size(); ++i) std::cout << (i ? " " : "") << kf[i];
  std::cout << '\n';
  return 0;
}

int cmd_train(const std::string& data, const std::string& config, const std::string& out,
              const std::optional<std::uint64_t>& seed) {
  PipelineConfig cfg = config.empty() ? PipelineConfig{} : load_config(config);
  if (seed) cfg.seed = *seed;
  std::vector<Scene> scenes;
  for (const auto& d : list_scenes(data)) scenes.push_back(load_scene(d));
  std::vector<TrainingScene> train, val;
  split_scenes(scenes, cfg, train, val);
  ModelBundle<float> model(cfg, cfg.seed);
  const auto t0 = std::chrono::steady_clock::now();
  const TrainResult r = train_model(model, train, val, {&std::cerr, 10}, out + ".diverged");
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  save_model(out, model,
             {{"phase1_steps", r.phase1.steps},
              {"phase2_steps", r.phase2.steps},
              {"phase1_val_loss", r.phase1.val_loss},
              {"phase2_val_loss", r.phase2.val_loss},
              {"train_scenes", train.size()}});
  std::cerr << "trained in " << secs << " s; validation loss " << r.phase1.val_loss << " -> " << r.phase2.val_loss
            << '\n';
  return 0;
}

int cmd_reconstruct(const std::string& scene_dir, const std::string& ckpt, const std::string& out,
                    const std::optional<std::uint64_t>& seed) {
  auto model = load_model<float>(ckpt);
  if (seed) {
    PipelineConfig cfg = model->config();
    cfg.seed = *seed;
    auto reseeded = std::make_unique<ModelBundle<float>>(cfg, 0);
    reseeded->copy_values_from(*model);
    model = std::move(reseeded);
  }
  const Scene s = load_scene(scene_dir);
  ReconstructOptions opt;
  opt.log = &std::cerr;
  const Reconstruction rec = reconstruct(*model, s, opt);
  write_mesh(out, rec.mesh, {"config " + to_json(model->config()).dump()});
  std::cerr << "vertices " << rec.mesh.vertices.size() << " triangles " << rec.mesh.triangles.size() << '\n';
  return 0;
}

int cmd_eval(const std::string& pred, const std::string& gt, const std::string& scene_dir, double tau, bool no_trim,
             std::uint64_t seed) {
  const TriMesh p = read_mesh(pred), g = read_mesh(gt);
  Scene s;
  if (!no_trim) {
    if (scene_dir.empty()) throw Error("eval: --scene is required unless --no-trim is given");
    s = load_scene(scene_dir);
  }
  const MetricReport r = evaluate_mesh(p, g, s, tau, !no_trim, seed);
  std::cout << to_json(r).dump(2) << '\n';
  return 0;
}

int cmd_gradcheck(const std::string& op) {
  bool found = false, ok = true;
  for (const auto& c : gradcheck_cases()) {
    if (!op.empty() && c.name != op) continue;
    found = true;
    const GradcheckResult r = c.run();
    std::printf("%-18s %s  max rel err %.3e (tol %.0e, %zu entries)\n", r.name.c_str(), r.passed ? "ok  " : "FAIL",
                r.max_error, r.tolerance, r.checked);
    ok = ok && r.passed;
  }
  if (!found) throw Error("gradcheck: unknown op '" + op + "'");
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"vortx: multi-view volumetric reconstruction"};
  app.require_subcommand(1);

  std::string spec, out, scene, data, config, ckpt, pred, gt, op;
  std::uint64_t seed = 0;
  std::optional<std::uint64_t> seed_opt;
  double rmax = 15, tmax = 0.2, tau = 0.05, truncation = kDefaultTruncation;
  bool no_trim = false;

  auto* synth = app.add_subcommand("synth", "generate a synthetic dataset");
  synth->add_option("--spec", spec, "scene spec JSON")->required();
  synth->add_option("--out", out, "output directory")->required();
  synth->add_option("--seed", seed, "random seed");

  auto* make_gt = app.add_subcommand("make-gt", "fuse ground-truth volumes and mesh");
  make_gt->add_option("--scene", scene)->required();
  make_gt->add_option("--out", out)->required();
  make_gt->add_option("--truncation", truncation);

  auto* keyframes = app.add_subcommand("keyframes", "print selected keyframe indices");
  keyframes->add_option("--scene", scene)->required();
  keyframes->add_option("--rmax", rmax, "rotation threshold (degrees)");
  keyframes->add_option("--tmax", tmax, "translation threshold (meters)");

  auto* train = app.add_subcommand("train", "two-phase training");
  train->add_option("--data", data, "directory of scenes")->required();
  train->add_option("--config", config, "pipeline config JSON");
  train->add_option("--out", out, "checkpoint path")->required();
  train->add_option("--seed", seed_opt, "overrides the config seed");

  auto* recon = app.add_subcommand("reconstruct", "reconstruct a mesh from a scene");
  recon->add_option("--scene", scene)->required();
  recon->add_option("--ckpt", ckpt)->required();
  recon->add_option("--out", out, "output PLY")->required();
  recon->add_option("--seed", seed_opt, "overrides the checkpoint's view-sampling seed");

  auto* eval = app.add_subcommand("eval", "trim and score a mesh; JSON to stdout");
  eval->add_option("--pred", pred)->required();
  eval->add_option("--gt", gt)->required();
  eval->add_option("--scene", scene);
  eval->add_option("--tau", tau);
  eval->add_flag("--no-trim", no_trim);
  eval->add_option("--seed", seed, "surface sampling seed");

  auto* grad = app.add_subcommand("gradcheck", "finite-difference gradient checks");
  grad->add_option("--op", op, "single op to check");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (*synth) return cmd_synth(spec, out, seed);
    if (*make_gt) return cmd_make_gt(scene, out, truncation);
    if (*keyframes) return cmd_keyframes(scene, rmax, tmax);
    if (*train) return cmd_train(data, config, out, seed_opt);
    if (*recon) return cmd_reconstruct(scene, ckpt, out, seed_opt);
    if (*eval) return cmd_eval(pred, gt, scene, tau, no_trim, seed);
    if (*grad) return cmd_gradcheck(op);
  } catch (const std::exception& e) {
    std::string msg = e.what();
    for (auto& ch : msg)
      if (ch == '\n') ch = ' ';
    std::cerr << "vortx: error: " << msg << '\n';
    return 1;
  }
  return 1;
}
