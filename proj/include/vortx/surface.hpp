#pragma once

// Marching cubes over sparse TSDF grids, and PLY mesh I/O.

#include "vortx/common.hpp"
#include "vortx/fuse_tsdf.hpp"
#include "vortx/grid.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

namespace vortx {

struct TriMesh {
  std::vector<Eigen::Vector3f> vertices;
  std::vector<std::array<std::int32_t, 3>> triangles;

  bool empty() const { return triangles.empty(); }
};

// -- case table ---------------------------------------------------------------
//
// Corner i sits at offset (i & 1, (i >> 1) & 1, (i >> 2) & 1). Edges join
// corners that differ in one bit. A case bit is set when the corner is inside
// (value <= iso). The table is derived from the cube faces: on each face the
// contour separates the inside corners (ambiguous faces cut every inside
// corner off on its own), so neighboring cubes always agree on a shared face
// and closed surfaces come out watertight.

struct McTables {
  std::array<std::array<int, 2>, 12> edge_corners{};
  std::array<std::vector<std::array<int, 3>>, 256> cases;

  int edge_between(int a, int b) const {
    for (int e = 0; e < 12; ++e)
      if ((edge_corners[std::size_t(e)][0] == a && edge_corners[std::size_t(e)][1] == b) ||
          (edge_corners[std::size_t(e)][0] == b && edge_corners[std::size_t(e)][1] == a))
        return e;
    return -1;
  }
};

inline McTables build_mc_tables() {
  McTables t;
  int n = 0;
  for (int a = 0; a < 8; ++a)
    for (int b = a + 1; b < 8; ++b)
      if (std::popcount(unsigned(a ^ b)) == 1) t.edge_corners[std::size_t(n++)] = {a, b};

  // Faces as corner cycles, counter-clockwise seen from outside the cube.
  std::vector<std::array<int, 4>> faces;
  for (int axis = 0; axis < 3; ++axis) {
    const int u = (axis + 1) % 3, v = (axis + 2) % 3;
    for (int side = 0; side < 2; ++side) {
      std::array<int, 4> cyc;
      const int uv[4][2] = {{0, 0}, {1, 0}, {1, 1}, {0, 1}};
      for (int k = 0; k < 4; ++k) cyc[std::size_t(k)] = (side << axis) | (uv[k][0] << u) | (uv[k][1] << v);
      if (side == 0) std::swap(cyc[1], cyc[3]);
      faces.push_back(cyc);
    }
  }
  auto share_face = [&](int e1, int e2) {
    const auto& [a1, b1] = t.edge_corners[std::size_t(e1)];
    const auto& [a2, b2] = t.edge_corners[std::size_t(e2)];
    // Fixed bits of an edge: the axes it does not run along.
    const int fixed = 7 & ~((a1 ^ b1) | (a2 ^ b2));
    return ((a1 ^ a2) & fixed) != fixed;
  };

  for (int mask = 0; mask < 256; ++mask) {
    auto inside = [&](int c) { return (mask >> c) & 1; };
    std::array<int, 12> next;  // directed contour: edge -> following edge
    next.fill(-1);
    for (const auto& f : faces) {
      // Walk the boundary; record where it enters and leaves the inside.
      std::vector<std::pair<int, bool>> crossings;  // (edge, entering)
      for (int k = 0; k < 4; ++k) {
        const int c0 = f[std::size_t(k)], c1 = f[std::size_t((k + 1) % 4)];
        if (inside(c0) != inside(c1)) crossings.push_back({t.edge_between(c0, c1), bool(inside(c1))});
      }
      // Each inside arc runs enter -> leave; its contour segment goes leave -> enter.
      for (std::size_t i = 0; i < crossings.size(); ++i) {
        if (!crossings[i].second) continue;
        const auto& leave = crossings[(i + 1) % crossings.size()];
        next[std::size_t(leave.first)] = crossings[i].first;
      }
    }
    std::array<bool, 12> used{};
    for (int e0 = 0; e0 < 12; ++e0) {
      if (next[std::size_t(e0)] < 0 || used[std::size_t(e0)]) continue;
      std::vector<int> loop;
      for (int e = e0; !used[std::size_t(e)]; e = next[std::size_t(e)]) {
        used[std::size_t(e)] = true;
        loop.push_back(e);
      }
      // A diagonal between two points on one face would be produced by the
      // neighbor as well; triangulate with diagonals through the interior only.
      const int n = int(loop.size());
      auto diagonal_ok = [&](int a, int b) {
        return b - a == 1 || (a == 0 && b == n - 1) || !share_face(loop[std::size_t(a)], loop[std::size_t(b)]);
      };
      std::vector<std::vector<int>> split(std::size_t(n), std::vector<int>(std::size_t(n), -1));
      for (int len = 2; len < n; ++len)
        for (int a = 0; a + len < n; ++a) {
          const int b = a + len;
          if (!diagonal_ok(a, b)) continue;
          for (int k = a + 1; k < b; ++k)
            if ((k - a == 1 || split[std::size_t(a)][std::size_t(k)] >= 0) &&
                (b - k == 1 || split[std::size_t(k)][std::size_t(b)] >= 0)) {
              split[std::size_t(a)][std::size_t(b)] = k;
              break;
            }
        }
      if (split[0][std::size_t(n - 1)] < 0) throw Error("marching cubes: no interior triangulation for case " + std::to_string(mask));
      std::vector<std::pair<int, int>> todo{{0, n - 1}};
      while (!todo.empty()) {
        const auto [a, b] = todo.back();
        todo.pop_back();
        if (b - a < 2) continue;
        const int k = split[std::size_t(a)][std::size_t(b)];
        t.cases[std::size_t(mask)].push_back({loop[std::size_t(a)], loop[std::size_t(b)], loop[std::size_t(k)]});
        todo.push_back({a, k});
        todo.push_back({k, b});
      }
    }
  }
  return t;
}

inline const McTables& mc_tables() {
  static const McTables t = build_mc_tables();
  return t;
}

/// Extracts the iso-surface of `values` (voxel centers as samples). Only cubes
/// whose eight corners are all present contribute. A corner exactly at the iso
/// value counts as inside. Triangles face the outside (values above iso).
template <class Real>
TriMesh marching_cubes(const SparseVoxelGrid<Real>& values, double iso = 0.0) {
  const auto& tab = mc_tables();
  TriMesh mesh;
  std::vector<std::size_t> order(values.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](auto a, auto b) { return values.coord(a) < values.coord(b); });

  std::unordered_map<std::uint64_t, std::int32_t, PackedHash> edge_vertex;  // (corner key, axis)
  auto edge_key = [](const Coord& c, int axis) { return (pack(c) << 2) | std::uint64_t(axis); };

  for (auto i : order) {
    const Coord base = values.coord(i);
    std::array<double, 8> s;
    bool complete = true;
    for (int k = 0; k < 8 && complete; ++k) {
      const Real* v = values.find(base + Coord{k & 1, (k >> 1) & 1, (k >> 2) & 1});
      if (!v) complete = false;
      else s[std::size_t(k)] = double(*v) - iso;
    }
    if (!complete) continue;
    int mask = 0;
    for (int k = 0; k < 8; ++k)
      if (s[std::size_t(k)] <= 0) mask |= 1 << k;
    const auto& tris = tab.cases[std::size_t(mask)];
    if (tris.empty()) continue;

    auto vertex_on = [&](int e) {
      const int a = tab.edge_corners[std::size_t(e)][0], b = tab.edge_corners[std::size_t(e)][1];
      const int axis = std::countr_zero(unsigned(a ^ b));
      const Coord ca = base + Coord{a & 1, (a >> 1) & 1, (a >> 2) & 1};
      auto [it, inserted] = edge_vertex.try_emplace(edge_key(ca, axis), std::int32_t(mesh.vertices.size()));
      if (inserted) {
        const double s0 = s[std::size_t(a)], s1 = s[std::size_t(b)];
        const double tt = s0 / (s0 - s1);
        const Coord cb = base + Coord{b & 1, (b >> 1) & 1, (b >> 2) & 1};
        const Vec3 p = values.center(ca) + tt * (values.center(cb) - values.center(ca));
        mesh.vertices.push_back(p.cast<float>());
      }
      return it->second;
    };
    for (const auto& tri : tris) mesh.triangles.push_back({vertex_on(tri[0]), vertex_on(tri[1]), vertex_on(tri[2])});
  }
  return mesh;
}

/// Fused TSDF: only voxels with at least one observation are samples.
inline TriMesh marching_cubes(const SparseVoxelGrid<TsdfVoxel>& g, double iso = 0.0) {
  SparseVoxelGrid<float> v(g.level(), g.origin());
  v.reserve(g.size());
  for (std::size_t i = 0; i < g.size(); ++i)
    if (g.value(i).weight > 0) v.set(g.coord(i), g.value(i).tsdf());
  return marching_cubes(v, iso);
}

/// Undirected edges used by a number of triangles other than two.
inline std::size_t non_manifold_edges(const TriMesh& m) {
  std::map<std::pair<std::int32_t, std::int32_t>, int> count;
  for (const auto& t : m.triangles)
    for (int k = 0; k < 3; ++k) {
      auto a = t[std::size_t(k)], b = t[std::size_t((k + 1) % 3)];
      if (a > b) std::swap(a, b);
      ++count[{a, b}];
    }
  std::size_t bad = 0;
  for (const auto& [e, c] : count)
    if (c != 2) ++bad;
  return bad;
}

// -- PLY ------------------------------------------------------------------------

inline std::string encode_ply(const TriMesh& m, const std::vector<std::string>& comments = {}, bool ascii = false) {
  std::ostringstream h;
  h << "ply\nformat " << (ascii ? "ascii" : "binary_little_endian") << " 1.0\n";
  for (const auto& c : comments) {
    std::istringstream lines(c);
    std::string line;
    while (std::getline(lines, line)) h << "comment " << line << '\n';
  }
  h << "element vertex " << m.vertices.size() << "\nproperty float x\nproperty float y\nproperty float z\n"
    << "element face " << m.triangles.size() << "\nproperty list uchar int vertex_indices\nend_header\n";
  std::string out = h.str();
  if (ascii) {
    std::ostringstream body;
    body.precision(9);
    for (const auto& v : m.vertices) body << v.x() << ' ' << v.y() << ' ' << v.z() << '\n';
    for (const auto& t : m.triangles) body << "3 " << t[0] << ' ' << t[1] << ' ' << t[2] << '\n';
    return out + body.str();
  }
  auto put32 = [&](std::uint32_t u) {
    for (int i = 0; i < 4; ++i) out.push_back(char((u >> (8 * i)) & 0xff));
  };
  for (const auto& v : m.vertices)
    for (int a = 0; a < 3; ++a) {
      std::uint32_t u;
      const float f = v[a];
      std::memcpy(&u, &f, 4);
      put32(u);
    }
  for (const auto& t : m.triangles) {
    out.push_back(char(3));
    for (auto idx : t) put32(std::uint32_t(idx));
  }
  return out;
}

namespace detail {

struct PlyProperty {
  std::string name, type, count_type;  // count_type set for list properties
};

inline int ply_type_size(const std::string& t, std::size_t at) {
  if (t == "char" || t == "uchar" || t == "int8" || t == "uint8") return 1;
  if (t == "short" || t == "ushort" || t == "int16" || t == "uint16") return 2;
  if (t == "int" || t == "uint" || t == "float" || t == "int32" || t == "uint32" || t == "float32") return 4;
  if (t == "double" || t == "float64") return 8;
  throw ParseError("unknown PLY type '" + t + "'", at);
}

inline double ply_read_scalar(const std::string& b, std::size_t& pos, const std::string& t) {
  const int n = ply_type_size(t, pos);
  if (b.size() - pos < std::size_t(n)) throw ParseError("truncated PLY body", pos);
  std::uint64_t bits = 0;
  for (int i = 0; i < n; ++i) bits |= std::uint64_t(std::uint8_t(b[pos + std::size_t(i)])) << (8 * i);
  pos += std::size_t(n);
  if (t == "float" || t == "float32") {
    float f;
    const std::uint32_t u = std::uint32_t(bits);
    std::memcpy(&f, &u, 4);
    return f;
  }
  if (t == "double" || t == "float64") {
    double d;
    std::memcpy(&d, &bits, 8);
    return d;
  }
  const bool is_signed = t == "char" || t == "int8" || t == "short" || t == "int16" || t == "int" || t == "int32";
  if (is_signed) {
    const std::uint64_t sign = std::uint64_t(1) << (8 * n - 1);
    if (bits & sign) return double(std::int64_t(bits) - std::int64_t(sign << 1));
  }
  return double(bits);
}

}  // namespace detail

inline TriMesh decode_ply(const std::string& b) {
  std::size_t pos = 0;
  auto line = [&]() {
    const std::size_t start = pos;
    const std::size_t nl = b.find('\n', pos);
    if (nl == std::string::npos) throw ParseError("unterminated PLY header", start);
    pos = nl + 1;
    std::string l = b.substr(start, nl - start);
    if (!l.empty() && l.back() == '\r') l.pop_back();
    return std::pair{l, start};
  };
  if (line().first != "ply") throw ParseError("missing 'ply' magic", 0);
  std::string format;
  struct Element {
    std::string name;
    std::size_t count = 0;
    std::vector<detail::PlyProperty> props;
  };
  std::vector<Element> elems;
  for (;;) {
    auto [l, at] = line();
    std::istringstream ls(l);
    std::string kw;
    ls >> kw;
    if (kw == "end_header") break;
    if (kw == "comment" || kw == "obj_info" || kw.empty()) continue;
    if (kw == "format") {
      ls >> format;
      if (format != "binary_little_endian" && format != "ascii")
        throw ParseError("unsupported PLY format '" + format + "'", at);
    } else if (kw == "element") {
      Element e;
      long long count = -1;
      if (!(ls >> e.name >> count) || count < 0) throw ParseError("bad element line", at);
      e.count = std::size_t(count);
      elems.push_back(e);
    } else if (kw == "property") {
      if (elems.empty()) throw ParseError("property before element", at);
      detail::PlyProperty p;
      std::string t;
      ls >> t;
      if (t == "list") {
        if (!(ls >> p.count_type >> p.type >> p.name)) throw ParseError("bad list property", at);
        detail::ply_type_size(p.count_type, at);
      } else {
        p.type = t;
        if (!(ls >> p.name)) throw ParseError("bad property line", at);
      }
      detail::ply_type_size(p.type, at);
      elems.back().props.push_back(p);
    } else {
      throw ParseError("unexpected header keyword '" + kw + "'", at);
    }
  }
  if (format.empty()) throw ParseError("PLY header lacks a format line", pos);

  TriMesh m;
  const bool ascii = format == "ascii";
  std::istringstream text;
  if (ascii) text.str(b.substr(pos));
  auto scalar = [&](const std::string& type) -> double {
    if (!ascii) return detail::ply_read_scalar(b, pos, type);
    double v;
    if (!(text >> v)) throw ParseError("bad ASCII PLY value", pos + std::size_t(std::max<std::streamoff>(0, text.tellg())));
    return v;
  };
  for (const auto& e : elems) {
    int ix = -1, iy = -1, iz = -1, list = -1;
    for (std::size_t k = 0; k < e.props.size(); ++k) {
      const auto& p = e.props[k];
      if (p.name == "x") ix = int(k);
      if (p.name == "y") iy = int(k);
      if (p.name == "z") iz = int(k);
      if (!p.count_type.empty() && (p.name == "vertex_indices" || p.name == "vertex_index")) list = int(k);
    }
    if (e.name == "vertex" && (ix < 0 || iy < 0 || iz < 0)) throw ParseError("vertex element lacks x/y/z", pos);
    for (std::size_t r = 0; r < e.count; ++r) {
      Eigen::Vector3f v = Eigen::Vector3f::Zero();
      std::vector<std::int64_t> idx;
      for (std::size_t k = 0; k < e.props.size(); ++k) {
        const auto& p = e.props[k];
        if (!p.count_type.empty()) {
          const std::size_t at = pos;
          const double cnt = scalar(p.count_type);
          if (cnt < 0 || cnt > 1e6) throw ParseError("implausible list length", at);
          for (int j = 0; j < int(cnt); ++j) {
            const double x = scalar(p.type);
            if (int(k) == list) idx.push_back(std::int64_t(x));
          }
        } else {
          const double x = scalar(p.type);
          if (int(k) == ix) v.x() = float(x);
          if (int(k) == iy) v.y() = float(x);
          if (int(k) == iz) v.z() = float(x);
        }
      }
      if (e.name == "vertex") m.vertices.push_back(v);
      if (e.name == "face") {
        for (std::size_t j = 1; j + 1 < idx.size(); ++j)
          m.triangles.push_back({std::int32_t(idx[0]), std::int32_t(idx[j]), std::int32_t(idx[j + 1])});
      }
    }
  }
  if (!ascii && pos != b.size()) throw ParseError("trailing bytes after PLY body", pos);
  for (const auto& t : m.triangles)
    for (auto i : t)
      if (i < 0 || std::size_t(i) >= m.vertices.size()) throw ParseError("triangle index out of range", pos);
  return m;
}

inline void write_mesh(const std::string& path, const TriMesh& m, const std::vector<std::string>& comments = {},
                       bool ascii = false) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path);
  const std::string bytes = encode_ply(m, comments, ascii);
  out.write(bytes.data(), std::streamsize(bytes.size()));
}

inline TriMesh read_mesh(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_ply(bytes);
}

}  // namespace vortx
