#pragma once

// Pinhole camera math, frustum tests and view selection.

#include "vortx/common.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

namespace vortx {

struct Intrinsics {
  double fx = 1, fy = 1;
  double cx = 0, cy = 0;
  int width = 1, height = 1;

  bool valid() const {
    return fx > 0 && fy > 0 && width > 0 && height > 0 && cx >= 0 && cx < width && cy >= 0 &&
           cy < height;
  }

  Mat3 matrix() const {
    Mat3 k;
    k << fx, 0, cx, 0, fy, cy, 0, 0, 1;
    return k;
  }
};

/// World-from-camera rigid transform. Camera looks down +z, x right, y down.
struct Pose {
  Mat3 R = Mat3::Identity();
  Vec3 t = Vec3::Zero();

  Vec3 center() const { return t; }
  Vec3 to_camera(const Vec3& p) const { return R.transpose() * (p - t); }
  Vec3 to_world(const Vec3& pc) const { return R * pc + t; }

  /// Orthonormal with det(R) = +1. Augmented (mirrored) poses are orthonormal
  /// with det = -1 and fail this check, but every other function here accepts them.
  bool is_valid(double tol = 1e-6) const {
    return (R.transpose() * R - Mat3::Identity()).cwiseAbs().maxCoeff() < tol &&
           std::abs(R.determinant() - 1.0) < tol;
  }

  Mat4 matrix() const {
    Mat4 m = Mat4::Identity();
    m.topLeftCorner<3, 3>() = R;
    m.topRightCorner<3, 1>() = t;
    return m;
  }

  static Pose from_matrix(const Mat4& m) {
    Pose p;
    p.R = m.topLeftCorner<3, 3>();
    p.t = m.topRightCorner<3, 1>();
    return p;
  }

  /// Camera at `eye` looking at `target`, with world +z as the up hint.
  static Pose look_at(const Vec3& eye, const Vec3& target, const Vec3& up = Vec3::UnitZ()) {
    const Vec3 z = (target - eye).normalized();
    Vec3 x = z.cross(up);
    if (x.norm() < 1e-9) x = z.cross(Vec3::UnitY());
    x.normalize();
    const Vec3 y = z.cross(x);
    Pose p;
    p.R.col(0) = x;
    p.R.col(1) = y;
    p.R.col(2) = z;
    p.t = eye;
    return p;
  }
};

struct Aabb {
  Vec3 min = Vec3::Zero();
  Vec3 max = Vec3::Zero();

  bool empty() const { return !((max.array() > min.array()).all()); }
  Vec3 extent() const { return max - min; }
  Vec3 center() const { return 0.5 * (min + max); }
  bool contains(const Vec3& p) const {
    return (p.array() >= min.array()).all() && (p.array() <= max.array()).all();
  }
  std::array<Vec3, 8> corners() const {
    std::array<Vec3, 8> c;
    for (int i = 0; i < 8; ++i)
      c[i] = Vec3(i & 1 ? max.x() : min.x(), i & 2 ? max.y() : min.y(), i & 4 ? max.z() : min.z());
    return c;
  }
};

struct PixelProjection {
  double u = 0, v = 0;
  double depth = 0;  // camera-frame z, may be <= 0
};

inline PixelProjection project(const Intrinsics& k, const Pose& pose, const Vec3& p) {
  const Vec3 pc = pose.to_camera(p);
  PixelProjection out;
  out.depth = pc.z();
  out.u = k.fx * pc.x() / pc.z() + k.cx;
  out.v = k.fy * pc.y() / pc.z() + k.cy;
  return out;
}

/// World point at camera-frame depth `depth` along the ray through pixel (u, v).
inline Vec3 backproject(const Intrinsics& k, const Pose& pose, double u, double v, double depth) {
  const Vec3 pc((u - k.cx) / k.fx * depth, (v - k.cy) / k.fy * depth, depth);
  return pose.to_world(pc);
}

struct ViewRay {
  Vec3 dir;      // unit, world frame, camera -> voxel
  double depth;  // camera-frame z of the voxel
};

inline ViewRay camera_to_voxel(const Pose& pose, const Vec3& voxel_center) {
  const Vec3 d = voxel_center - pose.center();
  const double n = d.norm();
  if (!(n > 1e-12)) throw GeometryError("camera_to_voxel: voxel coincides with camera center");
  return {d / n, pose.to_camera(voxel_center).z()};
}

struct DepthRange {
  double near = 0.1;
  double far = 3.0;
};

namespace detail {

inline std::array<Vec3, 8> frustum_corners(const Intrinsics& k, const Pose& pose, DepthRange r) {
  std::array<Vec3, 8> c;
  const double us[2] = {0.0, double(k.width)};
  const double vs[2] = {0.0, double(k.height)};
  for (int i = 0; i < 8; ++i)
    c[i] = backproject(k, pose, us[i & 1], vs[(i >> 1) & 1], i & 4 ? r.far : r.near);
  return c;
}

inline bool separated_on(const Vec3& axis, std::span<const Vec3> a, std::span<const Vec3> b,
                         double eps) {
  const double len = axis.norm();
  if (len < 1e-12) return false;
  const Vec3 n = axis / len;
  double amin = INFINITY, amax = -INFINITY, bmin = INFINITY, bmax = -INFINITY;
  for (const auto& p : a) {
    const double s = n.dot(p);
    amin = std::min(amin, s);
    amax = std::max(amax, s);
  }
  for (const auto& p : b) {
    const double s = n.dot(p);
    bmin = std::min(bmin, s);
    bmax = std::max(bmax, s);
  }
  return amax < bmin - eps || bmax < amin - eps;
}

}  // namespace detail

/// Separating-axis test between the truncated view pyramid and an axis-aligned box.
/// Exact for convex polyhedra up to `eps`; touching counts as intersecting.
inline bool frustum_intersects(const Intrinsics& k, const Pose& pose, DepthRange range,
                               const Aabb& box, double eps = 1e-6) {
  const auto fc = detail::frustum_corners(k, pose, range);
  const auto bc = box.corners();

  // Frustum edge directions: 4 lateral edges, plus the camera x and y axes.
  std::array<Vec3, 6> fedges = {fc[4] - fc[0], fc[5] - fc[1], fc[6] - fc[2], fc[7] - fc[3],
                                fc[1] - fc[0], fc[2] - fc[0]};
  const Vec3 fz = pose.R.col(2);
  // Face normals of the frustum: near/far share the optical axis, sides from lateral edges.
  std::array<Vec3, 5> fnormals = {fz, fedges[0].cross(fc[1] - fc[0]), fedges[1].cross(fc[3] - fc[1]),
                                  fedges[3].cross(fc[2] - fc[3]), fedges[2].cross(fc[0] - fc[2])};

  for (int a = 0; a < 3; ++a)
    if (detail::separated_on(Vec3::Unit(a), fc, bc, eps)) return false;
  for (const auto& n : fnormals)
    if (detail::separated_on(n, fc, bc, eps)) return false;
  for (int a = 0; a < 3; ++a)
    for (const auto& e : fedges)
      if (detail::separated_on(Vec3::Unit(a).cross(e), fc, bc, eps)) return false;
  return true;
}

/// Geodesic angle between two rotations, in degrees.
inline double rotation_angle_deg(const Mat3& a, const Mat3& b) {
  const double c = std::clamp(((a.transpose() * b).trace() - 1.0) / 2.0, -1.0, 1.0);
  return std::acos(c) * 180.0 / M_PI;
}

/// Keeps frame 0 and every frame whose rotation or translation relative to
/// the last kept frame exceeds the thresholds. Comparisons carry a 1e-9
/// slack so that exact multiples of the threshold do not flip on rounding.
inline std::vector<std::size_t> select_keyframes(std::span<const Pose> poses, double rmax_deg,
                                                 double tmax) {
  std::vector<std::size_t> keep;
  if (poses.empty()) return keep;
  keep.push_back(0);
  for (std::size_t i = 1; i < poses.size(); ++i) {
    const Pose& last = poses[keep.back()];
    const double angle = rotation_angle_deg(last.R, poses[i].R);
    const double dist = (poses[i].t - last.t).norm();
    if (angle > rmax_deg + 1e-9 || dist > tmax + 1e-9) keep.push_back(i);
  }
  return keep;
}

/// Uniform sample (without replacement) of up to `n` keyframes whose frustum
/// meets `tile`. The result is sorted ascending.
template <class Rng>
std::vector<std::size_t> sample_views(const Intrinsics& k, std::span<const Pose> poses,
                                      std::span<const std::size_t> keyframes, const Aabb& tile,
                                      std::size_t n, Rng& rng, DepthRange range = {}) {
  std::vector<std::size_t> candidates;
  for (std::size_t idx : keyframes)
    if (frustum_intersects(k, poses[idx], range, tile)) candidates.push_back(idx);
  if (candidates.size() > n) {
    for (std::size_t i = 0; i < n; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, candidates.size() - 1);
      std::swap(candidates[i], candidates[pick(rng)]);
    }
    candidates.resize(n);
    std::sort(candidates.begin(), candidates.end());
  }
  return candidates;
}

// -- on-disk formats -------------------------------------------------------

namespace detail {
inline std::vector<double> read_floats(const std::string& path, std::size_t count) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path);
  std::vector<double> v;
  double x;
  while (in >> x) v.push_back(x);
  if (v.size() != count)
    throw Error(path + ": expected " + std::to_string(count) + " numbers, got " +
                std::to_string(v.size()));
  return v;
}
}  // namespace detail

inline Pose read_pose(const std::string& path) {
  const auto v = detail::read_floats(path, 16);
  Mat4 m;
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c) m(r, c) = v[r * 4 + c];
  return Pose::from_matrix(m);
}

inline void write_pose(const std::string& path, const Pose& pose) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path);
  out.precision(17);
  const Mat4 m = pose.matrix();
  for (int r = 0; r < 4; ++r)
    out << m(r, 0) << ' ' << m(r, 1) << ' ' << m(r, 2) << ' ' << m(r, 3) << '\n';
}

/// Image size is not part of the file; it comes from the depth maps.
inline Intrinsics read_intrinsics(const std::string& path, int width, int height) {
  const auto v = detail::read_floats(path, 9);
  Intrinsics k{v[0], v[4], v[2], v[5], width, height};
  if (!k.valid()) throw Error(path + ": invalid intrinsics for " + std::to_string(width) + "x" +
                              std::to_string(height) + " image");
  return k;
}

inline void write_intrinsics(const std::string& path, const Intrinsics& k) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path);
  out.precision(17);
  out << k.fx << " 0 " << k.cx << "\n0 " << k.fy << ' ' << k.cy << "\n0 0 1\n";
}

inline Aabb read_bounds(const std::string& path) {
  const auto v = detail::read_floats(path, 6);
  return {Vec3(v[0], v[1], v[2]), Vec3(v[3], v[4], v[5])};
}

inline void write_bounds(const std::string& path, const Aabb& b) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path);
  out.precision(17);
  out << b.min.x() << ' ' << b.min.y() << ' ' << b.min.z() << ' ' << b.max.x() << ' '
      << b.max.y() << ' ' << b.max.z() << '\n';
}

}  // namespace vortx
