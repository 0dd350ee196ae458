#pragma once

// Everything, plus the glue used by the command-line tool and the acceptance runner.

#include "vortx/eval3d.hpp"
#include "vortx/gradcheck.hpp"
#include "vortx/pipeline/config.hpp"
#include "vortx/pipeline/dataset.hpp"
#include "vortx/pipeline/model.hpp"
#include "vortx/pipeline/reconstruct.hpp"
#include "vortx/pipeline/synth.hpp"
#include "vortx/pipeline/train.hpp"

#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

namespace vortx {

/// Scene specs named by a synth request. Accepted forms:
///   a single scene spec (has "room" or "objects")  -> one scene
///   {"scenes": [spec, ...]}                        -> explicit list
///   {"random": n, "image": {...}}                  -> n random rooms
inline std::vector<SceneSpec> specs_from_request(const nlohmann::json& j, std::uint64_t seed) {
  if (!j.is_object()) throw Error("synth spec: expected a JSON object");
  std::vector<SceneSpec> out;
  if (j.contains("random")) {
    const int n = j["random"].get<int>();
    if (n < 1) throw Error("synth spec: \"random\" must be at least 1");
    ImageSpec image;
    if (j.contains("image")) image = scene_from_json({{"image", j["image"]}}).image;
    for (int i = 0; i < n; ++i) {
      std::mt19937_64 rng(mix_seed(seed, std::uint64_t(i)));
      out.push_back(random_room(rng, image));
    }
  } else if (j.contains("scenes")) {
    for (const auto& s : j["scenes"]) out.push_back(scene_from_json(s));
    if (out.empty()) throw Error("synth spec: empty scene list");
  } else {
    out.push_back(scene_from_json(j));
  }
  return out;
}

inline std::string scene_dir_name(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "scene_%03zu", i);
  return buf;
}

/// Renders specs under `out`. One spec writes `out` itself; several write out/scene_NNN.
inline std::vector<std::string> write_dataset(const std::vector<SceneSpec>& specs, const std::string& out) {
  namespace fs = std::filesystem;
  std::vector<std::string> dirs;
  for (std::size_t i = 0; i < specs.size(); ++i) {
    const std::string dir = specs.size() == 1 ? out : (fs::path(out) / scene_dir_name(i)).string();
    const Scene s = render_scene(specs[i], fs::path(dir).filename().string());
    write_scene(dir, s);
    std::ofstream(fs::path(dir) / "spec.json") << to_json(specs[i]).dump(2) << '\n';
    dirs.push_back(dir);
  }
  return dirs;
}

inline TriMesh ground_truth_mesh(const GroundTruth& gt) { return marching_cubes(gt.tsdf.grid, 0.0); }

inline std::vector<Camera> scene_cameras(const Scene& s) {
  std::vector<Camera> cams;
  for (const auto& p : s.poses) cams.push_back({s.k, p});
  return cams;
}

/// Trimmed (unless `trim` is false) metrics of pred against gt.
inline MetricReport evaluate_mesh(const TriMesh& pred, const TriMesh& gt, const Scene& scene, double tau, bool trim,
                                  std::uint64_t seed = 0) {
  if (!trim) return metrics(pred, gt, tau, seed);
  const auto cams = scene_cameras(scene);
  return metrics(trim_mesh(pred, gt, cams), gt, tau, seed);
}

/// Ground-truth volume as an archive: coords [n, 3], tsdf [n], weight [n].
inline void save_ground_truth(const std::string& path, const GroundTruth& gt) {
  nn::Archive a;
  const auto& g = gt.tsdf.grid;
  nn::NamedArray coords{"coords", {int(g.size()), 3}, {}}, tsdf{"tsdf", {int(g.size())}, {}},
      weight{"weight", {int(g.size())}, {}};
  for (std::size_t i = 0; i < g.size(); ++i) {
    const Coord c = g.coord(i);
    coords.data.insert(coords.data.end(), {float(c.x), float(c.y), float(c.z)});
    tsdf.data.push_back(g.value(i).tsdf());
    weight.data.push_back(g.value(i).weight);
  }
  a.meta = nlohmann::json{{"format", "vortx-gt"}, {"voxel", voxel_size(Level::fine)}, {"truncation", gt.tsdf.truncation}}
               .dump();
  a.arrays = {coords, tsdf, weight};
  nn::save_archive(path, a);
}

}  // namespace vortx
