#pragma once

// Projective SDF, projective occupancy and visibility targets.

#include "vortx/fuse_tsdf.hpp"
#include "vortx/geom.hpp"
#include "vortx/image.hpp"

#include <cmath>
#include <optional>

namespace vortx {

struct ProjectiveSample {
  double sdf = 0;           // S = d - d_v (meters), meaningful only when valid
  double surface_depth = 0; // d
  double voxel_depth = 0;   // d_v
  bool valid = false;
};

/// Samples the depth map at the nearest pixel to the voxel's projection.
inline ProjectiveSample projective_sdf(const DepthMap& depth, const Intrinsics& k, const Pose& pose,
                                       const Vec3& voxel_center, double max_depth = kMaxSensorDepth) {
  ProjectiveSample s;
  const auto px = project(k, pose, voxel_center);
  s.voxel_depth = px.depth;
  if (!(px.depth > 0)) return s;
  const double ur = std::round(px.u), vr = std::round(px.v);
  if (!(ur >= 0 && vr >= 0 && ur < depth.width && vr < depth.height)) return s;
  const double d = depth.at(int(ur), int(vr));
  if (!(d > 0) || d > max_depth) return s;
  s.surface_depth = d;
  s.sdf = d - px.depth;
  s.valid = true;
  return s;
}

/// Tri-state label: nullopt means "not supervised".
using Label = std::optional<bool>;

inline Label projective_occupancy(const ProjectiveSample& s, double t) {
  if (!s.valid) return std::nullopt;
  return std::abs(s.sdf) < t;
}

/// Not occluded beyond the truncation band: observed empty space plus the band.
inline Label visibility(const ProjectiveSample& s, double t) {
  if (!s.valid) return std::nullopt;
  return s.sdf > -t;
}

}  // namespace vortx
