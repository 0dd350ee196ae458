#pragma once

// Coarse-to-fine inference over a whole scene.

#include "vortx/pipeline/dataset.hpp"
#include "vortx/pipeline/forward.hpp"
#include "vortx/pipeline/train.hpp"
#include "vortx/surface.hpp"

#include <cmath>
#include <ostream>
#include <random>
#include <vector>

namespace vortx {

struct LevelStats {
  std::size_t active = 0;
  std::size_t samples = 0;
  std::size_t kept = 0;  // voxels passing the threshold (fine: voxels with a prediction)
};

struct Reconstruction {
  TriMesh mesh;
  SparseVoxelGrid<float> tsdf{Level::fine};
  std::vector<std::size_t> keyframes;
  std::array<LevelStats, 3> stats{};
};

struct ReconstructOptions {
  Aggregation mode = Aggregation::occupancy_weighted;
  std::size_t chunk = 4096;  // voxels fused per batch
  std::ostream* log = nullptr;
};

/// Every coarse voxel whose center lies inside `b`.
inline std::vector<Coord> coarse_voxels_in(const Aabb& b) {
  const double s = voxel_size(Level::coarse);
  int lo[3], hi[3];
  for (int a = 0; a < 3; ++a) {
    lo[a] = int(std::ceil(b.min[a] / s - 0.5 - 1e-9));
    hi[a] = int(std::floor(b.max[a] / s - 0.5 + 1e-9));
  }
  std::vector<Coord> out;
  for (int x = lo[0]; x <= hi[0]; ++x)
    for (int y = lo[1]; y <= hi[1]; ++y)
      for (int z = lo[2]; z <= hi[2]; ++z) out.push_back({x, y, z});
  return out;
}

template <class T>
Reconstruction reconstruct(const ModelBundle<T>& model, const Scene& scene, const ReconstructOptions& opt = {}) {
  if (!scene.has_shading()) throw Error("reconstruct: scene " + scene.name + " has no shading images");
  nn::NoGrad guard;
  const auto& cfg = model.config();
  Reconstruction rec;
  rec.keyframes = select_keyframes(scene.poses, cfg.rmax_deg, cfg.tmax_test);

  std::vector<FeaturePyramid<T>> pyramids;
  pyramids.reserve(rec.keyframes.size());
  for (auto id : rec.keyframes) pyramids.push_back(model.features().extract(scene.shading[id], false));
  std::vector<ViewInput<T>> views;
  for (std::size_t j = 0; j < rec.keyframes.size(); ++j)
    views.push_back({&scene.k, scene.poses[rec.keyframes[j]], &pyramids[j], nullptr});

  const TilePlan plan = tile_volume(scene.bounds, cfg.tile_size);
  std::vector<Coord> active = coarse_voxels_in(scene.bounds);
  LevelResult<T> prev;
  bool have_prev = false;

  for (Level l : kLevels) {
    const auto li = std::size_t(l);
    rec.stats[li].active = active.size();
    if (active.empty()) break;

    // Per-tile view subsets; keyframe positions index into `views`.
    std::vector<std::vector<std::int32_t>> tile_views(plan.tiles.size());
    for (std::size_t t = 0; t < plan.tiles.size(); ++t) {
      const Coord& key = plan.tiles[t].index;
      std::uint64_t h = mix_seed(cfg.seed, std::uint64_t(l) + 1);
      for (int a : {key.x, key.y, key.z}) h = mix_seed(h, std::uint64_t(std::uint32_t(a)));
      std::mt19937_64 rng(h);
      const auto picked = sample_views(scene.k, std::span<const Pose>(scene.poses), rec.keyframes, plan.tiles[t].box,
                                       std::size_t(cfg.n_test), rng);
      for (auto f : picked) {
        const auto it = std::lower_bound(rec.keyframes.begin(), rec.keyframes.end(), f);
        tile_views[t].push_back(std::int32_t(it - rec.keyframes.begin()));
      }
    }
    bool any_views = false;
    for (const auto& tv : tile_views) any_views = any_views || !tv.empty();
    if (!any_views) {
      active.clear();
      break;
    }
    std::vector<std::int32_t> owner(active.size());
    for (std::size_t v = 0; v < active.size(); ++v) {
      const auto o = plan.owner(voxel_center(l, active[v]));
      owner[v] = std::int32_t(o < 0 ? 0 : o);
    }

    // Fusion in chunks; rows are independent so chunking does not change values.
    LevelResult<T> r;
    r.level = l;
    r.coords = std::move(active);
    std::vector<T> fused;
    int channels = cfg.channels_at(l);
    for (std::size_t b = 0; b < r.coords.size(); b += opt.chunk) {
      const std::size_t e = std::min(r.coords.size(), b + opt.chunk);
      const std::span<const Coord> part(r.coords.data() + b, e - b);
      auto lists = [&](std::size_t v) -> const std::vector<std::int32_t>& { return tile_views[std::size_t(owner[b + v])]; };
      const auto samples = backproject<T>(l, part, std::span<const ViewInput<T>>(views), lists);
      rec.stats[li].samples += samples.info.size();
      const auto out = fuse_voxels(model.fusion(l), samples.samples, opt.mode);
      fused.insert(fused.end(), out.fused.value().begin(), out.fused.value().end());
    }
    r.fusion.fused = nn::Tensor<T>::constant({int(r.coords.size()), channels}, std::move(fused));
    const NeighborTable nb = build_neighbors(r.coords);
    nn::Tensor<T> parent_features;
    if (model.cnn(l).config().parent_channels > 0) {
      if (!have_prev) throw Error("reconstruct: parent features requested without a parent level");
      parent_features = gather_parent_features(prev, r.coords);
    }
    r.net = model.cnn(l)(r.fusion.fused, nb, parent_features);

    const auto& pred = r.net.prediction.value();
    if (l == Level::fine) {
      for (std::size_t v = 0; v < r.coords.size(); ++v) rec.tsdf.set(r.coords[v], float(pred[v]));
      rec.tsdf.sort();
      rec.stats[li].kept = rec.tsdf.size();
    } else {
      SparseVoxelGrid<float> prob(l);
      for (std::size_t v = 0; v < r.coords.size(); ++v)
        prob.set(r.coords[v], float(1.0 / (1.0 + std::exp(-double(pred[v])))));
      const ActiveSet next = expand_active(prob, cfg.threshold);
      rec.stats[li].kept = next.size() / 8;
      active.clear();
      for (std::size_t i = 0; i < next.size(); ++i) active.push_back(next.coord(i));
    }
    if (opt.log)
      *opt.log << level_name(l) << ": active " << rec.stats[li].active << " samples " << rec.stats[li].samples
               << " kept " << rec.stats[li].kept << '\n';
    prev = std::move(r);
    have_prev = true;
  }
  rec.mesh = marching_cubes(rec.tsdf, 0.0);
  return rec;
}

}  // namespace vortx
