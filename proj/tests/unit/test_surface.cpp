#include "vortx/fuse_tsdf.hpp"
#include "vortx/surface.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <random>
#include <set>

using namespace vortx;

namespace {

template <class F>
SparseVoxelGrid<float> sample_box(F f, int lo, int hi) {
  SparseVoxelGrid<float> g(Level::fine);
  for (int z = lo; z < hi; ++z)
    for (int y = lo; y < hi; ++y)
      for (int x = lo; x < hi; ++x) {
        const Coord c{x, y, z};
        g.set(c, float(f(g.center(c))));
      }
  return g;
}

double signed_volume(const TriMesh& m) {
  double v = 0;
  for (const auto& t : m.triangles) {
    const Vec3 a = m.vertices[std::size_t(t[0])].cast<double>(), b = m.vertices[std::size_t(t[1])].cast<double>(),
               c = m.vertices[std::size_t(t[2])].cast<double>();
    v += a.dot(b.cross(c)) / 6.0;
  }
  return v;
}

long euler(const TriMesh& m) {
  std::set<std::pair<int, int>> edges;
  for (const auto& t : m.triangles)
    for (int k = 0; k < 3; ++k) edges.insert(std::minmax(t[std::size_t(k)], t[std::size_t((k + 1) % 3)]));
  return long(m.vertices.size()) - long(edges.size()) + long(m.triangles.size());
}

TriMesh tetra() {
  TriMesh m;
  m.vertices = {{0, 0, 0}, {1, 0, 0}, {0, 1, 0}, {0, 0, 1.5f}};
  m.triangles = {{0, 2, 1}, {0, 1, 3}, {0, 3, 2}, {1, 2, 3}};
  return m;
}

}  // namespace

TEST(MarchingCubes, SphereIsClosedOrientedGenusZero) {
  const double r = 0.3;
  const auto g = sample_box([&](const Vec3& p) { return (p - Vec3(0.02, 0.01, 0.03)).norm() - r; }, -10, 11);
  const TriMesh m = marching_cubes(g, 0.0);
  ASSERT_FALSE(m.empty());
  EXPECT_EQ(non_manifold_edges(m), 0u);
  EXPECT_EQ(euler(m), 2);
  const double vol = 4.0 / 3.0 * M_PI * r * r * r;
  EXPECT_GT(signed_volume(m), 0);
  EXPECT_NEAR(signed_volume(m), vol, 0.03 * vol);
  for (const auto& v : m.vertices) EXPECT_NEAR((v.cast<double>() - Vec3(0.02, 0.01, 0.03)).norm(), r, 0.01);
}

TEST(MarchingCubes, TorusHasGenusOne) {
  const auto g = sample_box(
      [](const Vec3& p) {
        const double q = std::hypot(p.x(), p.y()) - 0.3;
        return std::hypot(q, p.z()) - 0.1;
      },
      -12, 12);
  const TriMesh m = marching_cubes(g, 0.0);
  EXPECT_EQ(non_manifold_edges(m), 0u);
  EXPECT_EQ(euler(m), 0);
  EXPECT_GT(signed_volume(m), 0);
}

// Linear fields are reproduced exactly by the edge interpolation.
TEST(MarchingCubes, PlaneVerticesLieOnPlane) {
  const auto g = sample_box([](const Vec3& p) { return p.z() - 0.113; }, 0, 6);
  const TriMesh m = marching_cubes(g, 0.0);
  ASSERT_FALSE(m.empty());
  for (const auto& v : m.vertices) EXPECT_NEAR(v.z(), 0.113, 1e-6);
  // Outside is +z, so every face normal points up.
  for (const auto& t : m.triangles) {
    const Eigen::Vector3f n = (m.vertices[std::size_t(t[1])] - m.vertices[std::size_t(t[0])])
                                  .cross(m.vertices[std::size_t(t[2])] - m.vertices[std::size_t(t[0])]);
    EXPECT_GT(n.z(), 0);
  }
  const auto shifted = marching_cubes(g, 0.05);
  for (const auto& v : shifted.vertices) EXPECT_NEAR(v.z(), 0.163, 1e-6);
}

// Random sign fields padded with outside values give closed surfaces for every mix of cases.
TEST(MarchingCubes, RandomFieldsAreWatertight) {
  std::mt19937_64 rng(12);
  std::uniform_real_distribution<double> u(-1, 1);
  std::set<int> cases;
  for (int trial = 0; trial < 40; ++trial) {
    const auto g = sample_box(
        [&](const Vec3& p) {
          const Coord c{int(std::floor(p.x() / 0.04)), int(std::floor(p.y() / 0.04)), int(std::floor(p.z() / 0.04))};
          const bool border = c.x == 0 || c.y == 0 || c.z == 0 || c.x == 7 || c.y == 7 || c.z == 7;
          return border ? 1.0 : u(rng) + 0.1;
        },
        0, 8);
    for (int z = 0; z < 7; ++z)
      for (int y = 0; y < 7; ++y)
        for (int x = 0; x < 7; ++x) {
          int mask = 0;
          for (int k = 0; k < 8; ++k)
            if (*g.find({x + (k & 1), y + ((k >> 1) & 1), z + ((k >> 2) & 1)}) <= 0) mask |= 1 << k;
          cases.insert(mask);
        }
    const TriMesh m = marching_cubes(g, 0.0);
    EXPECT_EQ(non_manifold_edges(m), 0u) << "trial " << trial;
    EXPECT_GT(signed_volume(m), -1e-12);
  }
  EXPECT_GT(cases.size(), 200u);
}

TEST(MarchingCubes, IncompleteCubesAreSkipped) {
  SparseVoxelGrid<float> g(Level::fine);
  for (int k = 0; k < 7; ++k) g.set({k & 1, (k >> 1) & 1, (k >> 2) & 1}, k == 0 ? -1.f : 1.f);
  EXPECT_TRUE(marching_cubes(g).empty());
  g.set({1, 1, 1}, 1.f);
  const TriMesh m = marching_cubes(g);
  EXPECT_EQ(m.triangles.size(), 1u);
  EXPECT_EQ(m.vertices.size(), 3u);
}

TEST(MarchingCubes, UnobservedTsdfVoxelsAreNotSamples) {
  SparseVoxelGrid<TsdfVoxel> g(Level::fine);
  for (int k = 0; k < 8; ++k) {
    TsdfVoxel v;
    v.weight = 1;
    v.sum = std::llround((k == 0 ? -0.5 : 0.5) * TsdfVoxel::kScale);
    g.set({k & 1, (k >> 1) & 1, (k >> 2) & 1}, v);
  }
  EXPECT_EQ(marching_cubes(g).triangles.size(), 1u);
  g.find({1, 1, 1})->weight = 0;
  EXPECT_TRUE(marching_cubes(g).empty());
}

TEST(Ply, BinaryAndAsciiRoundTrip) {
  const TriMesh m = tetra();
  for (bool ascii : {false, true}) {
    const TriMesh r = decode_ply(encode_ply(m, {"made by a test", "second\nline"}, ascii));
    EXPECT_EQ(r.vertices, m.vertices);
    EXPECT_EQ(r.triangles, m.triangles);
  }
  const std::string bin = encode_ply(m);
  EXPECT_EQ(bin.size(), bin.find("end_header\n") + 11 + 4 * 12 + 4 * 13);
  const TriMesh empty = decode_ply(encode_ply(TriMesh{}));
  EXPECT_TRUE(empty.vertices.empty());
}

TEST(Ply, FileRoundTrip) {
  const auto path = (std::filesystem::temp_directory_path() / "vortx_tetra.ply").string();
  write_mesh(path, tetra());
  EXPECT_EQ(read_mesh(path).triangles, tetra().triangles);
  std::filesystem::remove(path);
  EXPECT_THROW(read_mesh(path), Error);
}

TEST(Ply, ParseErrorsCarryOffsets) {
  const std::string bin = encode_ply(tetra());
  const std::size_t body = bin.find("end_header\n") + 11;
  try {
    decode_ply(bin.substr(0, bin.size() - 2));
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_GE(e.offset(), body);
  }
  EXPECT_THROW(decode_ply("plx\n"), ParseError);
  EXPECT_THROW(decode_ply("ply\nformat binary_big_endian 1.0\nend_header\n"), ParseError);
  EXPECT_THROW(decode_ply("ply\nformat ascii 1.0\nelement vertex 1\nend_header\n"), ParseError);
  EXPECT_THROW(decode_ply(bin + "x"), ParseError);
  EXPECT_THROW(decode_ply("ply\nformat ascii 1.0\nbogus\nend_header\n"), ParseError);
  std::string bad = encode_ply(tetra(), {}, true);
  bad.replace(bad.rfind("1 2 3"), 5, "1 2 9");
  EXPECT_THROW(decode_ply(bad), ParseError);
  try {
    decode_ply("ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nproperty float z\nend_header\n0 0 zz\n");
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_GT(e.offset(), 0u);
  }
}

TEST(Ply, ExtraPropertiesAreSkipped) {
  const std::string s =
      "ply\nformat ascii 1.0\ncomment x\nelement vertex 3\nproperty float x\nproperty float y\nproperty float z\n"
      "property uchar red\nelement face 1\nproperty list uchar int vertex_indices\nend_header\n"
      "0 0 0 255\n1 0 0 0\n0 1 0 7\n3 0 1 2\n";
  const TriMesh m = decode_ply(s);
  EXPECT_EQ(m.vertices.size(), 3u);
  EXPECT_EQ(m.vertices[1].x(), 1.f);
  ASSERT_EQ(m.triangles.size(), 1u);
}
