#pragma once

// One hierarchy level of the forward pass: backproject active voxels into
// their views, fuse, run the level's sparse CNN.

#include "vortx/feature_provider.hpp"
#include "vortx/geom.hpp"
#include "vortx/grid.hpp"
#include "vortx/pipeline/model.hpp"
#include "vortx/projective.hpp"
#include "vortx/sparse_cnn.hpp"
#include "vortx/view_fusion.hpp"

#include <span>
#include <vector>

namespace vortx {

/// A camera as seen by the forward pass. `pose` lives in the same frame as
/// the voxel lattice (the crop frame during training).
template <class T>
struct ViewInput {
  const Intrinsics* k = nullptr;
  Pose pose;
  const FeaturePyramid<T>* features = nullptr;
  const DepthMap* depth = nullptr;  // only needed for projective targets
};

/// Per-sample provenance, parallel to the rows of ViewSamples.
struct SampleInfo {
  std::int32_t view = 0;
  std::int32_t voxel = 0;
};

template <class T>
struct LevelSamples {
  ViewSamples<T> samples;
  std::vector<SampleInfo> info;
};

inline Vec3 voxel_center(Level l, const Coord& c) {
  const double s = voxel_size(l);
  return {(c.x + 0.5) * s, (c.y + 0.5) * s, (c.z + 0.5) * s};
}

/// `view_lists(v)` yields the view indices to try for voxel v. Views where the
/// voxel is behind the camera or projects outside the image are skipped.
template <class T, class ViewLists>
LevelSamples<T> backproject(Level level, std::span<const Coord> coords, std::span<const ViewInput<T>> views,
                            const ViewLists& view_lists) {
  struct Tap {
    std::int32_t view;
    FeatureTaps taps;
    Vec3 dir;
    double depth;
  };
  std::vector<std::vector<Tap>> per_voxel(coords.size());
  parallel_for(std::int64_t(coords.size()), [&](std::int64_t v) {
    const Vec3 p = voxel_center(level, coords[std::size_t(v)]);
    for (std::int32_t j : view_lists(std::size_t(v))) {
      const auto& view = views[std::size_t(j)];
      const Vec3 pc = view.pose.to_camera(p);
      if (!(pc.z() > 0)) continue;
      const double u = view.k->fx * pc.x() / pc.z() + view.k->cx;
      const double w = view.k->fy * pc.y() / pc.z() + view.k->cy;
      Tap t;
      if (!feature_taps(view.features->at(level), view.features->image_width, view.features->image_height, u, w,
                        t.taps))
        continue;
      const Vec3 d = p - view.pose.center();
      t.view = j;
      t.dir = d / d.norm();
      t.depth = pc.z();
      per_voxel[std::size_t(v)].push_back(t);
    }
  }, 64);

  // Rows of the concatenated per-view feature maps.
  std::vector<std::int64_t> base(views.size() + 1, 0);
  std::vector<nn::Tensor<T>> maps;
  for (std::size_t j = 0; j < views.size(); ++j) {
    const auto& m = views[j].features->at(level).data;
    base[j + 1] = base[j] + m.dim(0);
    maps.push_back(m);
  }

  LevelSamples<T> out;
  std::vector<std::int64_t> offsets{0};
  std::vector<std::int32_t> rows;
  std::vector<T> weights;
  for (std::size_t v = 0; v < coords.size(); ++v) {
    for (const auto& t : per_voxel[v]) {
      for (int i = 0; i < t.taps.count; ++i) {
        rows.push_back(std::int32_t(base[std::size_t(t.view)] + t.taps.cell[std::size_t(i)]));
        weights.push_back(T(t.taps.weight[std::size_t(i)]));
      }
      offsets.push_back(std::int64_t(rows.size()));
      out.samples.dirs.push_back(t.dir);
      out.samples.depths.push_back(t.depth);
      out.info.push_back({t.view, std::int32_t(v)});
    }
    out.samples.offsets.push_back(std::int64_t(out.info.size()));
  }
  const int c = views.empty() ? 1 : views[0].features->at(level).channels();
  if (out.info.empty()) {
    out.samples.features = nn::Tensor<T>::zeros({0, c});
  } else {
    out.samples.features = nn::weighted_gather(nn::concat(maps, 0), std::move(offsets), std::move(rows), std::move(weights));
  }
  return out;
}

/// Ground-truth projective occupancy per sample, with a validity mask.
template <class T>
void projective_targets(Level level, std::span<const Coord> coords, std::span<const ViewInput<T>> views,
                        const std::vector<SampleInfo>& info, double truncation, double max_depth,
                        std::vector<T>& target, std::vector<std::uint8_t>& mask) {
  target.assign(info.size(), T(0));
  mask.assign(info.size(), 0);
  parallel_for(std::int64_t(info.size()), [&](std::int64_t i) {
    const auto& s = info[std::size_t(i)];
    const auto& view = views[std::size_t(s.view)];
    if (!view.depth) return;
    const auto ps = projective_sdf(*view.depth, *view.k, view.pose, voxel_center(level, coords[std::size_t(s.voxel)]),
                                   max_depth);
    const Label label = projective_occupancy(ps, truncation);
    if (label) {
      mask[std::size_t(i)] = 1;
      target[std::size_t(i)] = *label ? T(1) : T(0);
    }
  }, 256);
}

template <class T>
struct LevelResult {
  Level level = Level::coarse;
  std::vector<Coord> coords;
  LevelSamples<T> samples;
  FusionOutput<T> fusion;
  LevelOutput<T> net;
};

/// Rows of `child_coords` gathered from the parent level's hidden features.
template <class T>
nn::Tensor<T> gather_parent_features(const LevelResult<T>& parent, const std::vector<Coord>& child_coords) {
  SparseVoxelGrid<std::int32_t> index(parent.level);
  for (std::size_t i = 0; i < parent.coords.size(); ++i) index.set(parent.coords[i], std::int32_t(i));
  std::vector<std::int64_t> off{0};
  std::vector<std::int32_t> rows;
  for (const auto& c : child_coords) {
    if (const auto* r = index.find(c.parent())) rows.push_back(*r);
    off.push_back(std::int64_t(rows.size()));
  }
  std::vector<T> w(rows.size(), T(1));
  return nn::weighted_gather(parent.net.hidden, std::move(off), std::move(rows), std::move(w));
}

/// Backprojection, fusion, and the level network over `coords` (sorted).
template <class T, class ViewLists>
LevelResult<T> run_level(const ModelBundle<T>& model, Level level, std::vector<Coord> coords,
                         std::span<const ViewInput<T>> views, const ViewLists& view_lists, Aggregation mode,
                         const LevelResult<T>* parent = nullptr) {
  LevelResult<T> r;
  r.level = level;
  r.coords = std::move(coords);
  r.samples = backproject<T>(level, r.coords, views, view_lists);
  r.fusion = fuse_voxels(model.fusion(level), r.samples.samples, mode);
  const NeighborTable nb = build_neighbors(r.coords);
  nn::Tensor<T> parent_features;
  if (model.cnn(level).config().parent_channels > 0) {
    if (!parent) throw Error("run_level: parent features requested without a parent level");
    parent_features = gather_parent_features(*parent, r.coords);
  }
  r.net = model.cnn(level)(r.fusion.fused, nb, parent_features);
  return r;
}

}  // namespace vortx
