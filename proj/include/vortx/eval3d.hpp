#pragma once

// Mesh evaluation: ray-cast depth rendering, render-mask-refuse trimming,
// and point-sampled accuracy / completeness / precision / recall / F-score.

#include "vortx/common.hpp"
#include "vortx/fuse_tsdf.hpp"
#include "vortx/geom.hpp"
#include "vortx/image.hpp"
#include "vortx/surface.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <vector>

namespace vortx {

// -- ray casting ----------------------------------------------------------------

/// Binary BVH over the triangles of a mesh, in double precision.
class TriangleBvh {
 public:
  explicit TriangleBvh(const TriMesh& mesh) {
    const std::size_t n = mesh.triangles.size();
    tri_.resize(n);
    for (std::size_t i = 0; i < n; ++i)
      for (int k = 0; k < 3; ++k) tri_[i][std::size_t(k)] = mesh.vertices[std::size_t(mesh.triangles[i][std::size_t(k)])].cast<double>();
    order_.resize(n);
    std::iota(order_.begin(), order_.end(), 0);
    if (n) build(0, n);
  }

  /// Smallest t > 0 with origin + t * dir on a triangle, or +inf.
  double intersect(const Vec3& origin, const Vec3& dir) const {
    double best = std::numeric_limits<double>::infinity();
    if (nodes_.empty()) return best;
    const Vec3 inv(1.0 / dir.x(), 1.0 / dir.y(), 1.0 / dir.z());
    std::vector<std::uint32_t> stack{0};
    while (!stack.empty()) {
      const auto& nd = nodes_[stack.back()];
      stack.pop_back();
      if (!hit_box(nd.box, origin, inv, best)) continue;
      if (nd.count) {
        for (std::uint32_t i = nd.first; i < nd.first + nd.count; ++i) {
          const double t = hit_triangle(tri_[order_[i]], origin, dir);
          if (t < best) best = t;
        }
      } else {
        stack.push_back(nd.left);
        stack.push_back(nd.right);
      }
    }
    return best;
  }

  /// Moller-Trumbore; +inf on a miss.
  static double hit_triangle(const std::array<Vec3, 3>& tri, const Vec3& o, const Vec3& d) {
    constexpr double eps = 1e-9;
    const Vec3 e1 = tri[1] - tri[0], e2 = tri[2] - tri[0];
    const Vec3 p = d.cross(e2);
    const double det = e1.dot(p);
    if (std::abs(det) < eps) return std::numeric_limits<double>::infinity();
    const double inv = 1.0 / det;
    const Vec3 s = o - tri[0];
    const double u = s.dot(p) * inv;
    if (u < -eps || u > 1 + eps) return std::numeric_limits<double>::infinity();
    const Vec3 q = s.cross(e1);
    const double v = d.dot(q) * inv;
    if (v < -eps || u + v > 1 + eps) return std::numeric_limits<double>::infinity();
    const double t = e2.dot(q) * inv;
    return t > eps ? t : std::numeric_limits<double>::infinity();
  }

 private:
  struct Node {
    Aabb box;
    std::uint32_t left = 0, right = 0, first = 0, count = 0;
  };

  Aabb bounds_of(std::size_t b, std::size_t e, bool centroids) const {
    Aabb box{Vec3::Constant(std::numeric_limits<double>::infinity()),
             Vec3::Constant(-std::numeric_limits<double>::infinity())};
    for (std::size_t i = b; i < e; ++i) {
      const auto& t = tri_[order_[i]];
      if (centroids) {
        const Vec3 c = (t[0] + t[1] + t[2]) / 3.0;
        box.min = box.min.cwiseMin(c);
        box.max = box.max.cwiseMax(c);
      } else {
        for (const auto& p : t) {
          box.min = box.min.cwiseMin(p);
          box.max = box.max.cwiseMax(p);
        }
      }
    }
    return box;
  }

  std::uint32_t build(std::size_t b, std::size_t e) {
    const auto id = std::uint32_t(nodes_.size());
    nodes_.push_back({bounds_of(b, e, false), 0, 0, std::uint32_t(b), 0});
    if (e - b <= 4) {
      nodes_[id].count = std::uint32_t(e - b);
      return id;
    }
    const Aabb cb = bounds_of(b, e, true);
    int axis = 0;
    cb.extent().maxCoeff(&axis);
    const std::size_t mid = (b + e) / 2;
    std::nth_element(order_.begin() + std::ptrdiff_t(b), order_.begin() + std::ptrdiff_t(mid),
                     order_.begin() + std::ptrdiff_t(e), [&](std::uint32_t x, std::uint32_t y) {
                       const double cx = tri_[x][0][axis] + tri_[x][1][axis] + tri_[x][2][axis];
                       const double cy = tri_[y][0][axis] + tri_[y][1][axis] + tri_[y][2][axis];
                       return cx < cy || (cx == cy && x < y);
                     });
    const auto l = build(b, mid);
    const auto r = build(mid, e);
    nodes_[id].left = l;
    nodes_[id].right = r;
    return id;
  }

  static bool hit_box(const Aabb& b, const Vec3& o, const Vec3& inv, double tmax) {
    double t0 = 0, t1 = tmax;
    for (int a = 0; a < 3; ++a) {
      double tn = (b.min[a] - o[a]) * inv[a];
      double tf = (b.max[a] - o[a]) * inv[a];
      if (std::isnan(tn) || std::isnan(tf)) {
        // Ray parallel to the slab and on its boundary plane.
        if (o[a] < b.min[a] || o[a] > b.max[a]) return false;
        continue;
      }
      if (tn > tf) std::swap(tn, tf);
      t0 = std::max(t0, tn);
      t1 = std::min(t1, tf * (1 + 4e-16) + 1e-12);
      if (t0 > t1) return false;
    }
    return true;
  }

  std::vector<std::array<Vec3, 3>> tri_;
  std::vector<std::uint32_t> order_;
  std::vector<Node> nodes_;
};

/// Camera-frame z of the nearest hit through each pixel center; 0 on a miss.
inline DepthMap render_depth(const TriangleBvh& bvh, const Intrinsics& k, const Pose& pose) {
  DepthMap d(k.width, k.height);
  parallel_for(std::int64_t(k.height), [&](std::int64_t y) {
    for (int x = 0; x < k.width; ++x) {
      const Vec3 dc((x - k.cx) / k.fx, (double(y) - k.cy) / k.fy, 1.0);
      const double t = bvh.intersect(pose.center(), pose.R * dc);
      // With a unit-z camera ray, the ray parameter equals camera depth.
      d.at(x, int(y)) = std::isfinite(t) ? float(t) : 0.f;
    }
  }, 1);
  return d;
}

inline DepthMap render_depth(const TriMesh& mesh, const Intrinsics& k, const Pose& pose) {
  return render_depth(TriangleBvh(mesh), k, pose);
}

struct Camera {
  Intrinsics k;
  Pose pose;
};

inline Aabb mesh_bounds(const TriMesh& m) {
  Aabb b{Vec3::Constant(std::numeric_limits<double>::infinity()),
         Vec3::Constant(-std::numeric_limits<double>::infinity())};
  for (const auto& v : m.vertices) {
    b.min = b.min.cwiseMin(v.cast<double>());
    b.max = b.max.cwiseMax(v.cast<double>());
  }
  return b;
}

/// Renders both meshes from every camera, keeps predicted depth only where the
/// ground truth has depth, re-fuses at 4 cm with t = 0.12 m and re-extracts.
inline TriMesh trim_mesh(const TriMesh& pred, const TriMesh& gt, std::span<const Camera> cameras,
                         double truncation = kDefaultTruncation, double max_depth = kMaxSensorDepth) {
  if (cameras.empty() || pred.vertices.empty()) return {};
  const TriangleBvh gt_bvh(gt), pred_bvh(pred);
  Aabb box = mesh_bounds(pred);
  box.min.array() -= truncation + voxel_size(Level::fine);
  box.max.array() += truncation + voxel_size(Level::fine);
  TsdfVolume vol(box, truncation);
  for (const auto& cam : cameras) {
    const DepthMap d = render_depth(gt_bvh, cam.k, cam.pose);
    DepthMap p = render_depth(pred_bvh, cam.k, cam.pose);
    for (std::size_t i = 0; i < p.data.size(); ++i)
      if (!(d.data[i] > 0)) p.data[i] = 0;
    integrate_depth(vol, p, cam.k, cam.pose, max_depth);
  }
  vol.grid.sort();
  return marching_cubes(vol.grid);
}

// -- nearest neighbors -------------------------------------------------------------

/// Static 3-d tree over points; exact nearest-neighbor distance queries.
class KdTree {
 public:
  explicit KdTree(std::vector<Vec3> pts) : pts_(std::move(pts)) {
    idx_.resize(pts_.size());
    std::iota(idx_.begin(), idx_.end(), 0);
    build(0, idx_.size(), 0);
  }

  std::size_t size() const { return pts_.size(); }

  /// Squared distance to the nearest point (+inf for an empty tree).
  double nearest_sq(const Vec3& q) const {
    double best = std::numeric_limits<double>::infinity();
    if (!pts_.empty()) search(q, 0, idx_.size(), 0, best);
    return best;
  }
  double nearest(const Vec3& q) const { return std::sqrt(nearest_sq(q)); }

 private:
  void build(std::size_t b, std::size_t e, int axis) {
    if (e - b <= kLeaf) return;
    const std::size_t mid = (b + e) / 2;
    std::nth_element(idx_.begin() + std::ptrdiff_t(b), idx_.begin() + std::ptrdiff_t(mid),
                     idx_.begin() + std::ptrdiff_t(e), [&](std::uint32_t x, std::uint32_t y) {
                       return pts_[x][axis] < pts_[y][axis] || (pts_[x][axis] == pts_[y][axis] && x < y);
                     });
    build(b, mid, (axis + 1) % 3);
    build(mid + 1, e, (axis + 1) % 3);
  }

  void search(const Vec3& q, std::size_t b, std::size_t e, int axis, double& best) const {
    if (e - b <= kLeaf) {
      for (std::size_t i = b; i < e; ++i) best = std::min(best, (pts_[idx_[i]] - q).squaredNorm());
      return;
    }
    const std::size_t mid = (b + e) / 2;
    const Vec3& p = pts_[idx_[mid]];
    best = std::min(best, (p - q).squaredNorm());
    const double diff = q[axis] - p[axis];
    const int next = (axis + 1) % 3;
    if (diff < 0) {
      search(q, b, mid, next, best);
      if (diff * diff < best) search(q, mid + 1, e, next, best);
    } else {
      search(q, mid + 1, e, next, best);
      if (diff * diff < best) search(q, b, mid, next, best);
    }
  }

  static constexpr std::size_t kLeaf = 8;
  std::vector<Vec3> pts_;
  std::vector<std::uint32_t> idx_;
};

// -- metrics ------------------------------------------------------------------------

/// All vertices plus area-uniform samples at `density` points per square meter
/// (1e4 = one per cm^2). The per-triangle count is stochastically rounded.
inline std::vector<Vec3> sample_surface(const TriMesh& m, double density = 1e4, std::uint64_t seed = 0) {
  std::vector<Vec3> pts;
  pts.reserve(m.vertices.size());
  for (const auto& v : m.vertices) pts.push_back(v.cast<double>());
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  for (const auto& t : m.triangles) {
    const Vec3 a = m.vertices[std::size_t(t[0])].cast<double>();
    const Vec3 b = m.vertices[std::size_t(t[1])].cast<double>();
    const Vec3 c = m.vertices[std::size_t(t[2])].cast<double>();
    const double expected = 0.5 * (b - a).cross(c - a).norm() * density;
    const auto n = std::size_t(std::floor(expected + u01(rng)));
    for (std::size_t i = 0; i < n; ++i) {
      const double r1 = std::sqrt(u01(rng)), r2 = u01(rng);
      pts.push_back((1 - r1) * a + r1 * (1 - r2) * b + r1 * r2 * c);
    }
  }
  return pts;
}

struct MetricReport {
  double acc = 0, comp = 0;
  double prec = 0, recall = 0, fscore = 0;
  double tau = 0.05;
  std::size_t n_pred_points = 0, n_gt_points = 0;
};

inline double fscore_of(double prec, double recall) {
  return prec + recall > 0 ? 2 * prec * recall / (prec + recall) : 0.0;
}

/// Mean nearest distance and fraction within tau, from `from` onto `to`.
inline std::pair<double, double> directed_stats(const std::vector<Vec3>& from, const KdTree& to, double tau) {
  if (from.empty() || to.size() == 0) return {std::numeric_limits<double>::infinity(), 0.0};
  std::vector<double> d(from.size());
  parallel_for(std::int64_t(from.size()), [&](std::int64_t i) { d[std::size_t(i)] = to.nearest(from[std::size_t(i)]); });
  double sum = 0;
  std::size_t within = 0;
  for (double x : d) {
    sum += x;
    within += x < tau;
  }
  return {sum / double(d.size()), double(within) / double(d.size())};
}

inline MetricReport metrics_from_points(const std::vector<Vec3>& pred, const std::vector<Vec3>& gt, double tau) {
  MetricReport r;
  r.tau = tau;
  r.n_pred_points = pred.size();
  r.n_gt_points = gt.size();
  const KdTree gt_tree(gt), pred_tree(pred);
  std::tie(r.acc, r.prec) = directed_stats(pred, gt_tree, tau);
  std::tie(r.comp, r.recall) = directed_stats(gt, pred_tree, tau);
  r.fscore = fscore_of(r.prec, r.recall);
  return r;
}

/// Both meshes are sampled with the same seed, so identical meshes give identical clouds.
inline MetricReport metrics(const TriMesh& pred, const TriMesh& gt, double tau = 0.05, std::uint64_t seed = 0) {
  return metrics_from_points(sample_surface(pred, 1e4, seed), sample_surface(gt, 1e4, seed), tau);
}

/// Non-finite distances (empty meshes) serialize as null.
inline nlohmann::json to_json(const MetricReport& r) {
  auto num = [](double x) { return std::isfinite(x) ? nlohmann::json(x) : nlohmann::json(nullptr); };
  return {{"acc", num(r.acc)},       {"comp", num(r.comp)},          {"prec", r.prec},
          {"recall", r.recall},      {"fscore", r.fscore},           {"tau", r.tau},
          {"n_pred_points", r.n_pred_points}, {"n_gt_points", r.n_gt_points}};
}

}  // namespace vortx
