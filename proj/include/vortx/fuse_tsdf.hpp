#pragma once

// Depth-map TSDF fusion, ground-truth targets and training subcrops.

#include "vortx/common.hpp"
#include "vortx/geom.hpp"
#include "vortx/grid.hpp"
#include "vortx/image.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <span>
#include <vector>

namespace vortx {

inline constexpr double kDefaultTruncation = 0.12;
inline constexpr double kMaxSensorDepth = 3.0;

/// Accumulates the clamped projective SDF as an integer fixed-point sum so
/// that integration order never changes the result.
struct TsdfVoxel {
  static constexpr double kScale = double(1 << 24);

  std::int64_t sum = 0;
  std::uint32_t weight = 0;
  bool observed = false;
  bool empty_column = false;  // lies in a column with no observation at all

  /// Normalized TSDF in [-1, 1]. Unobserved voxels read as +1.
  float tsdf() const {
    if (weight == 0) return 1.f;
    return float(double(sum) / kScale / double(weight));
  }
  bool supervised() const { return observed || empty_column; }
};

inline void dump_value(std::ostream& os, const TsdfVoxel& v) {
  os << ' ' << v.tsdf() << ' ' << v.weight << ' ' << int(v.observed);
}

struct TsdfVolume {
  SparseVoxelGrid<TsdfVoxel> grid{Level::fine};
  double truncation = kDefaultTruncation;
  /// Fine-voxel index box [lo, hi) that integration visits.
  Coord lo, hi;

  TsdfVolume() = default;
  TsdfVolume(const Aabb& bounds, double t, Level level = Level::fine)
      : grid(level), truncation(t) {
    const double s = voxel_size(level);
    lo = {int(std::floor(bounds.min.x() / s + 1e-9)), int(std::floor(bounds.min.y() / s + 1e-9)),
          int(std::floor(bounds.min.z() / s + 1e-9))};
    hi = {int(std::ceil(bounds.max.x() / s - 1e-9)), int(std::ceil(bounds.max.y() / s - 1e-9)),
          int(std::ceil(bounds.max.z() / s - 1e-9))};
  }

  Aabb bounds() const {
    const double s = grid.voxel();
    return {Vec3(lo.x, lo.y, lo.z) * s, Vec3(hi.x, hi.y, hi.z) * s};
  }
};

/// Fuses one depth map. Every voxel whose projective SDF s = d - d_v exceeds
/// -t is marked observed and receives clamp(s/t, -1, 1) with unit weight.
inline void integrate_depth(TsdfVolume& vol, const DepthMap& depth, const Intrinsics& k,
                            const Pose& pose, double max_depth = kMaxSensorDepth) {
  const double t = vol.truncation;
  const Mat3 rt = pose.R.transpose();
  auto& g = vol.grid;
  for (int z = vol.lo.z; z < vol.hi.z; ++z)
    for (int y = vol.lo.y; y < vol.hi.y; ++y)
      for (int x = vol.lo.x; x < vol.hi.x; ++x) {
        const Coord c{x, y, z};
        const Vec3 pc = rt * (g.center(c) - pose.t);
        if (pc.z() <= 0) continue;
        const int u = int(std::lround(k.fx * pc.x() / pc.z() + k.cx));
        const int v = int(std::lround(k.fy * pc.y() / pc.z() + k.cy));
        if (!depth.in_bounds(u, v)) continue;
        const double d = depth.at(u, v);
        if (!(d > 0) || d > max_depth) continue;
        const double s = d - pc.z();
        if (s <= -t) continue;
        auto& vox = g.get_or_insert(c);
        vox.sum += std::llround(std::clamp(s / t, -1.0, 1.0) * TsdfVoxel::kScale);
        vox.weight += 1;
        vox.observed = true;
      }
}

/// Columns (fixed x, y along the gravity axis z) without any observation are
/// filled with supervised empty space at tsdf = +1.
inline void mask_unobserved_columns(TsdfVolume& vol) {
  auto& g = vol.grid;
  const int nx = vol.hi.x - vol.lo.x, ny = vol.hi.y - vol.lo.y;
  if (nx <= 0 || ny <= 0) return;
  std::vector<std::uint8_t> seen(std::size_t(nx) * ny, 0);
  for (std::size_t i = 0; i < g.size(); ++i)
    if (g.value(i).observed) {
      const auto& c = g.coord(i);
      if (c.x >= vol.lo.x && c.x < vol.hi.x && c.y >= vol.lo.y && c.y < vol.hi.y)
        seen[std::size_t(c.y - vol.lo.y) * nx + (c.x - vol.lo.x)] = 1;
    }
  for (int y = vol.lo.y; y < vol.hi.y; ++y)
    for (int x = vol.lo.x; x < vol.hi.x; ++x) {
      if (seen[std::size_t(y - vol.lo.y) * nx + (x - vol.lo.x)]) continue;
      for (int z = vol.lo.z; z < vol.hi.z; ++z) {
        auto& vox = g.get_or_insert({x, y, z});
        vox.empty_column = true;
        vox.sum = 0;
        vox.weight = 0;
      }
    }
}

/// Per-level occupancy target with its supervision mask.
struct OccupancyTarget {
  SparseVoxelGrid<bool> occupied;
  SparseVoxelGrid<bool> supervised;
};

struct GroundTruth {
  TsdfVolume tsdf;
  OccupancyTarget fine, medium, coarse;

  const OccupancyTarget& at(Level l) const {
    return l == Level::coarse ? coarse : l == Level::medium ? medium : fine;
  }
};

struct DepthFrame {
  const DepthMap* depth;
  Pose pose;
};

/// Fine occupancy is |tsdf| < 1 on supervised voxels; coarser levels follow by dilation.
inline OccupancyTarget fine_occupancy(const SparseVoxelGrid<TsdfVoxel>& g) {
  OccupancyTarget out{SparseVoxelGrid<bool>(g.level(), g.origin()),
                      SparseVoxelGrid<bool>(g.level(), g.origin())};
  out.occupied.reserve(g.size());
  out.supervised.reserve(g.size());
  for (std::size_t i = 0; i < g.size(); ++i) {
    const auto& v = g.value(i);
    out.occupied.set(g.coord(i), v.observed && std::abs(v.tsdf()) < 1.f);
    out.supervised.set(g.coord(i), v.supervised());
  }
  return out;
}

inline OccupancyTarget downsample_target(const OccupancyTarget& t) {
  return {downsample_occupancy(t.occupied), downsample_occupancy(t.supervised)};
}

inline GroundTruth make_gt(std::span<const DepthFrame> frames, const Intrinsics& k, const Aabb& bounds,
                           double truncation = kDefaultTruncation, double max_depth = kMaxSensorDepth) {
  GroundTruth gt;
  gt.tsdf = TsdfVolume(bounds, truncation);
  for (const auto& f : frames) integrate_depth(gt.tsdf, *f.depth, k, f.pose, max_depth);
  if (!frames.empty()) mask_unobserved_columns(gt.tsdf);
  gt.tsdf.grid.sort();
  gt.fine = fine_occupancy(gt.tsdf.grid);
  gt.medium = downsample_target(gt.fine);
  gt.coarse = downsample_target(gt.medium);
  return gt;
}

// -- training subcrops -----------------------------------------------------

/// Maps a world point into crop coordinates: p' = linear * (p - crop_min) + offset.
/// `linear` is a signed permutation (90-degree z rotations, optional x mirror).
struct CropTransform {
  Mat3 linear = Mat3::Identity();
  Vec3 offset = Vec3::Zero();
  Vec3 crop_min = Vec3::Zero();

  Vec3 apply(const Vec3& p) const { return linear * (p - crop_min) + offset; }
  Vec3 apply_dir(const Vec3& d) const { return linear * d; }
  /// Camera pose in crop coordinates; mirrored crops yield det(R) = -1.
  Pose apply(const Pose& pose) const { return {linear * pose.R, apply(pose.t)}; }
};

struct CropSize {
  int x = 96, y = 96, z = 48;
};

struct Augmentation {
  bool mirror = false;
  int quarter_turns = 0;  // about +z
};

/// A subcrop with targets re-indexed to crop-local fine coordinates [0, size).
struct TrainingCrop {
  CropSize size;
  CropTransform transform;
  Augmentation augmentation;
  SparseVoxelGrid<float> tsdf{Level::fine};  // supervised voxels only
  OccupancyTarget fine, medium, coarse;

  const OccupancyTarget& at(Level l) const {
    return l == Level::coarse ? coarse : l == Level::medium ? medium : fine;
  }
  Aabb box() const {
    const double s = voxel_size(Level::fine);
    return {Vec3::Zero(), Vec3(size.x, size.y, size.z) * s};
  }
};

namespace detail {
inline Coord augment_index(Coord c, const CropSize& sz, const Augmentation& a) {
  if (a.mirror) c.x = sz.x - 1 - c.x;
  for (int r = 0; r < a.quarter_turns; ++r) c = {sz.x - 1 - c.y, c.x, c.z};
  return c;
}
}  // namespace detail

inline TrainingCrop extract_crop(const GroundTruth& gt, Coord origin, CropSize size, Augmentation aug) {
  const double s = voxel_size(Level::fine);
  TrainingCrop crop;
  crop.size = size;
  crop.augmentation = aug;

  Mat3 m = Mat3::Identity();
  Vec3 off = Vec3::Zero();
  const double wx = size.x * s, wy = size.y * s;
  if (aug.mirror) {
    m(0, 0) = -1;
    off.x() = wx;
  }
  for (int r = 0; r < aug.quarter_turns; ++r) {
    // (x, y) -> (W - y, x)
    Mat3 rot;
    rot << 0, -1, 0, 1, 0, 0, 0, 0, 1;
    m = rot * m;
    off = rot * off + Vec3(wy, 0, 0);
  }
  crop.transform.linear = m;
  crop.transform.offset = off;
  crop.transform.crop_min = Vec3(origin.x, origin.y, origin.z) * s;

  SparseVoxelGrid<bool> occ(Level::fine), sup(Level::fine);
  const auto& g = gt.tsdf.grid;
  for (int z = 0; z < size.z; ++z)
    for (int y = 0; y < size.y; ++y)
      for (int x = 0; x < size.x; ++x) {
        const Coord local = detail::augment_index({x, y, z}, size, aug);
        const TsdfVoxel* v = g.find(Coord{origin.x + x, origin.y + y, origin.z + z});
        const bool supervised = v && v->supervised();
        occ.set(local, supervised && v->observed && std::abs(v->tsdf()) < 1.f);
        sup.set(local, supervised);
        if (supervised) crop.tsdf.set(local, v->tsdf());
      }
  occ.sort();
  sup.sort();
  crop.tsdf.sort();
  crop.fine = {std::move(occ), std::move(sup)};
  crop.medium = downsample_target(crop.fine);
  crop.coarse = downsample_target(crop.medium);
  return crop;
}


/// Crop origin is drawn uniformly among placements on the coarse lattice
/// (multiples of 4 fine voxels), so all three levels stay nested inside the crop.
template <class Rng>
TrainingCrop random_subcrop(const GroundTruth& gt, CropSize size, Rng& rng, bool augment = true) {
  if (size.x % 4 || size.y % 4 || size.z % 4) throw Error("random_subcrop: crop dims must be multiples of 4");
  if (augment && size.x != size.y) throw Error("random_subcrop: rotation augmentation needs a square footprint");
  const auto& vol = gt.tsdf;
  const int lo[3] = {vol.lo.x, vol.lo.y, vol.lo.z};
  const int hi[3] = {vol.hi.x, vol.hi.y, vol.hi.z};
  const int dims[3] = {size.x, size.y, size.z};
  int origin[3];
  for (int a = 0; a < 3; ++a) {
    const int first = int(std::floor(lo[a] / 4.0)) * 4;
    const int last = hi[a] - dims[a];
    if (last < first) {
      origin[a] = first;  // scene smaller than crop: the remainder stays unobserved
    } else {
      const int steps = (last - first) / 4;
      origin[a] = first + 4 * std::uniform_int_distribution<int>(0, steps)(rng);
    }
  }

  Augmentation aug;
  if (augment) {
    aug.mirror = std::uniform_int_distribution<int>(0, 1)(rng) == 1;
    aug.quarter_turns = std::uniform_int_distribution<int>(0, 3)(rng);
  }
  return extract_crop(gt, Coord{origin[0], origin[1], origin[2]}, size, aug);
}

}  // namespace vortx
