#pragma once

// Sparse voxel hierarchy: 16 / 8 / 4 cm levels on nested lattices.

#include "vortx/common.hpp"
#include "vortx/geom.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

namespace vortx {

enum class Level : int { coarse = 0, medium = 1, fine = 2 };

inline constexpr std::array<Level, 3> kLevels = {Level::coarse, Level::medium, Level::fine};

inline constexpr double voxel_size(Level l) {
  switch (l) {
    case Level::coarse: return 0.16;
    case Level::medium: return 0.08;
    case Level::fine: return 0.04;
  }
  return 0;
}

inline const char* level_name(Level l) {
  switch (l) {
    case Level::coarse: return "coarse";
    case Level::medium: return "medium";
    case Level::fine: return "fine";
  }
  return "?";
}

inline Level parse_level(const std::string& s) {
  if (s == "coarse" || s == "0") return Level::coarse;
  if (s == "medium" || s == "1") return Level::medium;
  if (s == "fine" || s == "2") return Level::fine;
  throw Error("unknown level '" + s + "'");
}

inline Level finer(Level l) {
  if (l == Level::fine) throw Error("no level finer than fine");
  return Level(int(l) + 1);
}

inline Level coarser(Level l) {
  if (l == Level::coarse) throw Error("no level coarser than coarse");
  return Level(int(l) - 1);
}

struct Coord {
  int x = 0, y = 0, z = 0;
  friend bool operator==(const Coord&, const Coord&) = default;
  friend auto operator<=>(const Coord&, const Coord&) = default;
  Coord operator+(const Coord& o) const { return {x + o.x, y + o.y, z + o.z}; }
  Coord operator-(const Coord& o) const { return {x - o.x, y - o.y, z - o.z}; }
  Coord parent() const { return {x >> 1, y >> 1, z >> 1}; }
  Coord child(int i) const { return {2 * x + (i & 1), 2 * y + ((i >> 1) & 1), 2 * z + ((i >> 2) & 1)}; }
};

/// Three 21-bit two's-complement fields; valid for |coordinate| < 2^20.
inline std::uint64_t pack(const Coord& c) {
  constexpr std::uint64_t mask = (1u << 21) - 1;
  return (std::uint64_t(std::uint32_t(c.x)) & mask) | ((std::uint64_t(std::uint32_t(c.y)) & mask) << 21) |
         ((std::uint64_t(std::uint32_t(c.z)) & mask) << 42);
}

struct VoxelKey {
  Coord coord;
  Level level = Level::fine;
  friend bool operator==(const VoxelKey&, const VoxelKey&) = default;
};

struct PackedHash {
  std::size_t operator()(std::uint64_t k) const {
    k ^= k >> 33;
    k *= 0xff51afd7ed558ccdULL;
    k ^= k >> 33;
    return std::size_t(k);
  }
};

struct Empty {};

/// Hash-indexed sparse grid. Entries keep insertion order; `sort()` puts them
/// in canonical (x, y, z) order.
template <class P>
class SparseVoxelGrid {
 public:
  SparseVoxelGrid() = default;
  explicit SparseVoxelGrid(Level level, Vec3 origin = Vec3::Zero()) : level_(level), origin_(origin) {}

  Level level() const { return level_; }
  const Vec3& origin() const { return origin_; }
  double voxel() const { return voxel_size(level_); }
  std::size_t size() const { return coords_.size(); }
  bool empty() const { return coords_.empty(); }

  const std::vector<Coord>& coords() const { return coords_; }
  const Coord& coord(std::size_t i) const { return coords_[i]; }
  P& value(std::size_t i) { return values_[i].v; }
  const P& value(std::size_t i) const { return values_[i].v; }

  /// Slot index or -1.
  std::int64_t index_of(const Coord& c) const {
    auto it = index_.find(pack(c));
    return it == index_.end() ? -1 : std::int64_t(it->second);
  }
  bool contains(const Coord& c) const { return index_.count(pack(c)) != 0; }
  const P* find(const Coord& c) const {
    const auto i = index_of(c);
    return i < 0 ? nullptr : &values_[std::size_t(i)].v;
  }
  P* find(const Coord& c) {
    const auto i = index_of(c);
    return i < 0 ? nullptr : &values_[std::size_t(i)].v;
  }

  /// Returns the slot for `c`, inserting `init` if absent.
  P& get_or_insert(const Coord& c, const P& init = P{}) {
    auto [it, inserted] = index_.try_emplace(pack(c), std::uint32_t(coords_.size()));
    if (inserted) {
      coords_.push_back(c);
      values_.push_back({init});
    }
    return values_[it->second].v;
  }
  void set(const Coord& c, const P& v) { get_or_insert(c) = v; }

  void reserve(std::size_t n) {
    coords_.reserve(n);
    values_.reserve(n);
    index_.reserve(n);
  }

  void sort() {
    std::vector<std::size_t> order(coords_.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](auto a, auto b) { return coords_[a] < coords_[b]; });
    std::vector<Coord> c;
    std::vector<Slot> v;
    c.reserve(order.size());
    v.reserve(order.size());
    for (auto i : order) {
      c.push_back(coords_[i]);
      v.push_back(std::move(values_[i]));
    }
    coords_ = std::move(c);
    values_ = std::move(v);
    for (std::size_t i = 0; i < coords_.size(); ++i) index_[pack(coords_[i])] = std::uint32_t(i);
  }

  Vec3 center(const Coord& c) const {
    return origin_ + voxel() * Vec3(c.x + 0.5, c.y + 0.5, c.z + 0.5);
  }
  Coord coord_of(const Vec3& p) const {
    const Vec3 q = (p - origin_) / voxel();
    return {int(std::floor(q.x())), int(std::floor(q.y())), int(std::floor(q.z()))};
  }

 private:
  Level level_ = Level::fine;
  Vec3 origin_ = Vec3::Zero();
  std::vector<Coord> coords_;
  // Wrapped so that P = bool gets real bool storage.
  struct Slot {
    P v;
  };
  std::vector<Slot> values_;
  std::unordered_map<std::uint64_t, std::uint32_t, PackedHash> index_;
};

using ActiveSet = SparseVoxelGrid<Empty>;

template <class P>
ActiveSet active_set_of(const SparseVoxelGrid<P>& g) {
  ActiveSet out(g.level(), g.origin());
  out.reserve(g.size());
  for (const auto& c : g.coords()) out.get_or_insert(c);
  return out;
}

// -- tiling ----------------------------------------------------------------

struct Tile {
  Coord index;
  Aabb box;
};

struct TilePlan {
  std::vector<Tile> tiles;

  /// Tile owning point p (tiles are half-open except on the upper scene boundary).
  std::int64_t owner(const Vec3& p) const {
    for (std::size_t i = 0; i < tiles.size(); ++i) {
      const auto& b = tiles[i].box;
      bool in = true;
      for (int a = 0; a < 3 && in; ++a) in = p[a] >= b.min[a] && p[a] < b.max[a];
      if (in) return std::int64_t(i);
    }
    for (std::size_t i = 0; i < tiles.size(); ++i)
      if (tiles[i].box.contains(p)) return std::int64_t(i);
    return -1;
  }
};

inline TilePlan tile_volume(const Aabb& bounds, double tile_size) {
  if (!(tile_size > 0)) throw Error("tile_volume: tile size must be positive");
  TilePlan plan;
  if (bounds.empty()) return plan;
  int n[3];
  for (int a = 0; a < 3; ++a)
    n[a] = std::max(1, int(std::ceil(bounds.extent()[a] / tile_size - 1e-9)));
  for (int i = 0; i < n[0]; ++i)
    for (int j = 0; j < n[1]; ++j)
      for (int k = 0; k < n[2]; ++k) {
        Aabb b;
        const int idx[3] = {i, j, k};
        for (int a = 0; a < 3; ++a) {
          b.min[a] = bounds.min[a] + idx[a] * tile_size;
          b.max[a] = std::min(bounds.max[a], b.min[a] + tile_size);
        }
        plan.tiles.push_back({{i, j, k}, b});
      }
  return plan;
}

// -- level transitions -----------------------------------------------------

/// Parent grid: each parent of a present child, occupied iff any child is.
inline SparseVoxelGrid<bool> downsample_occupancy(const SparseVoxelGrid<bool>& g) {
  SparseVoxelGrid<bool> out(coarser(g.level()), g.origin());
  for (std::size_t i = 0; i < g.size(); ++i) {
    bool& v = out.get_or_insert(g.coord(i).parent(), false);
    v = v || g.value(i);
  }
  out.sort();
  return out;
}

/// All 8 children of every voxel with probability >= threshold.
template <class Real>
ActiveSet expand_active(const SparseVoxelGrid<Real>& probs, double threshold) {
  if (!(threshold > 0 && threshold < 1)) throw Error("expand_active: threshold must lie in (0,1)");
  ActiveSet out(finer(probs.level()), probs.origin());
  for (std::size_t i = 0; i < probs.size(); ++i)
    if (double(probs.value(i)) >= threshold)
      for (int c = 0; c < 8; ++c) out.get_or_insert(probs.coord(i).child(c));
  out.sort();
  return out;
}

// -- debug dump ------------------------------------------------------------

inline void dump_value(std::ostream& os, bool v) { os << ' ' << int(v); }
inline void dump_value(std::ostream& os, float v) { os << ' ' << v; }
inline void dump_value(std::ostream& os, double v) { os << ' ' << v; }
inline void dump_value(std::ostream&, const Empty&) {}
inline void dump_value(std::ostream& os, const std::vector<float>& v) {
  for (float x : v) os << ' ' << x;
}

/// One line per voxel: `ix iy iz level value...`, in canonical key order.
template <class P>
void write_grid_dump(std::ostream& os, const SparseVoxelGrid<P>& g) {
  std::vector<std::size_t> order(g.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](auto a, auto b) { return g.coord(a) < g.coord(b); });
  os.precision(9);
  for (auto i : order) {
    const auto& c = g.coord(i);
    os << c.x << ' ' << c.y << ' ' << c.z << ' ' << level_name(g.level());
    dump_value(os, g.value(i));
    os << '\n';
  }
}

struct DumpRecord {
  Coord coord;
  Level level;
  std::vector<double> values;
};

inline std::vector<DumpRecord> read_grid_dump(std::istream& is) {
  std::vector<DumpRecord> out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    DumpRecord r;
    std::string level;
    if (!(ls >> r.coord.x >> r.coord.y >> r.coord.z >> level)) throw Error("bad dump line: " + line);
    r.level = parse_level(level);
    double v;
    while (ls >> v) r.values.push_back(v);
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace vortx
