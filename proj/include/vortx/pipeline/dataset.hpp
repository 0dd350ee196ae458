#pragma once

// Scene directories:
//   intrinsics.txt  poses/%06d.txt  depth/%06d.png  shading/%06d.png (optional)  bounds.txt

#include "vortx/common.hpp"
#include "vortx/fuse_tsdf.hpp"
#include "vortx/geom.hpp"
#include "vortx/image.hpp"
#include "vortx/pipeline/synth.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

namespace vortx {

struct Scene {
  std::string name;
  Intrinsics k;
  std::vector<Pose> poses;
  std::vector<DepthMap> depth;
  std::vector<Image> shading;  // empty when the scene has none
  Aabb bounds;

  std::size_t frames() const { return poses.size(); }
  bool has_shading() const { return shading.size() == poses.size() && !poses.empty(); }
};

inline std::string frame_name(std::size_t i, const char* ext) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%06zu.%s", i, ext);
  return buf;
}

inline void write_scene(const std::string& dir, const Scene& s) {
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(dir) / "poses");
  fs::create_directories(fs::path(dir) / "depth");
  if (s.has_shading()) fs::create_directories(fs::path(dir) / "shading");
  write_intrinsics((fs::path(dir) / "intrinsics.txt").string(), s.k);
  write_bounds((fs::path(dir) / "bounds.txt").string(), s.bounds);
  for (std::size_t i = 0; i < s.frames(); ++i) {
    write_pose((fs::path(dir) / "poses" / frame_name(i, "txt")).string(), s.poses[i]);
    write_depth_png((fs::path(dir) / "depth" / frame_name(i, "png")).string(), s.depth[i]);
    if (s.has_shading()) write_image_png((fs::path(dir) / "shading" / frame_name(i, "png")).string(), s.shading[i]);
  }
}

/// Frame indices must run contiguously from 0 and every pose needs a depth map.
inline Scene load_scene(const std::string& dir) {
  namespace fs = std::filesystem;
  const fs::path root(dir);
  if (!fs::is_directory(root)) throw Error("scene: not a directory: " + dir);
  Scene s;
  s.name = root.filename().string();
  if (s.name.empty()) s.name = root.parent_path().filename().string();
  std::size_t n = 0;
  while (fs::exists(root / "poses" / frame_name(n, "txt"))) ++n;
  if (n == 0) throw Error("scene " + dir + ": no poses/000000.txt");
  std::size_t extra = 0;
  for (const auto& e : fs::directory_iterator(root / "poses"))
    if (e.path().extension() == ".txt") ++extra;
  if (extra != n) throw Error("scene " + dir + ": pose indices are not contiguous from 0");
  const bool shading = fs::is_directory(root / "shading");
  for (std::size_t i = 0; i < n; ++i) {
    s.poses.push_back(read_pose((root / "poses" / frame_name(i, "txt")).string()));
    const auto dp = root / "depth" / frame_name(i, "png");
    if (!fs::exists(dp)) throw Error("scene " + dir + ": missing " + dp.string());
    s.depth.push_back(read_depth_png(dp.string()));
    if (shading) s.shading.push_back(read_image_png((root / "shading" / frame_name(i, "png")).string()));
  }
  s.k = read_intrinsics((root / "intrinsics.txt").string(), s.depth[0].width, s.depth[0].height);
  s.bounds = read_bounds((root / "bounds.txt").string());
  return s;
}

/// Sorted subdirectories that look like scenes.
inline std::vector<std::string> list_scenes(const std::string& dir) {
  namespace fs = std::filesystem;
  std::vector<std::string> out;
  if (!fs::is_directory(dir)) throw Error("dataset: not a directory: " + dir);
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_directory() && fs::exists(e.path() / "intrinsics.txt")) out.push_back(e.path().string());
  std::sort(out.begin(), out.end());
  return out;
}

inline Scene render_scene(const SceneSpec& spec, const std::string& name = "scene") {
  Scene s;
  s.name = name;
  s.k = scene_intrinsics(spec);
  s.poses = scene_trajectory(spec);
  s.bounds = scene_bounds(spec);
  for (const auto& p : s.poses) {
    auto v = render_view(spec, s.k, p);
    s.depth.push_back(std::move(v.depth));
    s.shading.push_back(std::move(v.shading));
  }
  return s;
}

inline GroundTruth scene_ground_truth(const Scene& s, double truncation = kDefaultTruncation,
                                      double max_depth = kMaxSensorDepth) {
  std::vector<DepthFrame> frames;
  for (std::size_t i = 0; i < s.frames(); ++i) frames.push_back({&s.depth[i], s.poses[i]});
  return make_gt(frames, s.k, s.bounds, truncation, max_depth);
}

}  // namespace vortx
