// Acceptance runner: one PASS/FAIL line per criterion, exit status 1 if any fail.
//
//   vortx_acceptance [--only 1,2,9] [--config desk.json] [--work dir]

#include "vortx/pipeline.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <set>
#include <sstream>

using namespace vortx;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct Clock {
  std::chrono::steady_clock::time_point t0 = std::chrono::steady_clock::now();
  double seconds() const { return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(); }
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

Mat3 random_rotation(std::mt19937_64& rng) {
  std::normal_distribution<double> n(0, 1);
  Eigen::Quaterniond q(n(rng), n(rng), n(rng), n(rng));
  return q.normalized().toRotationMatrix();
}

// -- 1 ---------------------------------------------------------------------------------

// Written from the definitions alone: nearest pixel, S = d - d_v, occupied iff |S| < t.
int oracle_occupancy(const DepthMap& depth, const Intrinsics& k, const Pose& pose, const Vec3& p, double t,
                     double max_depth) {
  const Vec3 rel = p - pose.t;
  const double x = pose.R.col(0).dot(rel), y = pose.R.col(1).dot(rel), z = pose.R.col(2).dot(rel);
  if (!(z > 0)) return -1;
  const double u = k.fx * x / z + k.cx, v = k.fy * y / z + k.cy;
  const double px = std::floor(u + 0.5), py = std::floor(v + 0.5);
  if (px < 0 || py < 0 || px > k.width - 1 || py > k.height - 1) return -1;
  const float d = depth.data[std::size_t(py) * std::size_t(depth.width) + std::size_t(px)];
  if (d <= 0 || d > max_depth) return -1;
  return std::fabs(double(d) - z) < t ? 1 : 0;
}

Outcome criterion1() {
  Clock clock;
  std::mt19937_64 rng(101);
  std::uniform_real_distribution<double> u(0, 1);
  int agree = 0, labelled = 0;
  const int cases = 10000;
  for (int c = 0; c < cases; ++c) {
    Intrinsics k;
    k.width = 16 + int(u(rng) * 48);
    k.height = 12 + int(u(rng) * 36);
    k.fx = 20 + 80 * u(rng);
    k.fy = k.fx * (0.9 + 0.2 * u(rng));
    k.cx = (k.width - 1) * (0.4 + 0.2 * u(rng));
    k.cy = (k.height - 1) * (0.4 + 0.2 * u(rng));
    Pose pose;
    pose.R = random_rotation(rng);
    pose.t = Vec3(u(rng), u(rng), u(rng)) * 4.0 - Vec3::Constant(2.0);
    DepthMap depth(k.width, k.height);
    for (auto& d : depth.data) d = u(rng) < 0.1 ? 0.f : float(0.2 + 3.6 * u(rng));
    const double t = 0.05 + 0.2 * u(rng);
    Vec3 p;
    if (u(rng) < 0.8) {
      // near the observed surface so both labels occur
      const double px = u(rng) * k.width - 0.5, py = u(rng) * k.height - 0.5;
      const int ix = std::clamp(int(std::floor(px + 0.5)), 0, k.width - 1);
      const int iy = std::clamp(int(std::floor(py + 0.5)), 0, k.height - 1);
      const double z = std::max(0.05, double(depth.at(ix, iy)) + (u(rng) - 0.5) * 4 * t);
      p = pose.to_world(Vec3((px - k.cx) / k.fx * z, (py - k.cy) / k.fy * z, z));
    } else {
      p = pose.t + Vec3(u(rng) - 0.5, u(rng) - 0.5, u(rng) - 0.5) * 8.0;
    }
    const Label got = projective_occupancy(projective_sdf(depth, k, pose, p, kMaxSensorDepth), t);
    const int want = oracle_occupancy(depth, k, pose, p, t, kMaxSensorDepth);
    const int g = got ? int(*got) : -1;
    agree += g == want;
    labelled += want >= 0;
  }
  const double secs = clock.seconds();
  return {agree == cases && secs < 10,
          fmt("%d/%d agree (%d labelled), %.2f s", agree, cases, labelled, secs)};
}

// -- 2, 3 ------------------------------------------------------------------------------

const Vec3 kSphereCenter(1.0, 1.0, 1.0);
constexpr double kSphereRadius = 0.5;

std::vector<Pose> sphere_cameras(int n, double distance) {
  std::vector<Pose> poses;
  const double golden = M_PI * (3 - std::sqrt(5.0));
  for (int i = 0; i < n; ++i) {
    const double z = 1 - 2 * (i + 0.5) / n;
    const double r = std::sqrt(1 - z * z);
    const Vec3 dir(r * std::cos(golden * i), r * std::sin(golden * i), z);
    poses.push_back(Pose::look_at(kSphereCenter + distance * dir, kSphereCenter));
  }
  return poses;
}

DepthMap sphere_depth(const Intrinsics& k, const Pose& pose) {
  DepthMap d(k.width, k.height);
  const Vec3 o = pose.center() - kSphereCenter;
  for (int y = 0; y < k.height; ++y)
    for (int x = 0; x < k.width; ++x) {
      const Vec3 dir = pose.R * Vec3((x - k.cx) / k.fx, (y - k.cy) / k.fy, 1.0);  // unit camera z
      const double a = dir.squaredNorm(), b = 2 * o.dot(dir), c = o.squaredNorm() - kSphereRadius * kSphereRadius;
      const double disc = b * b - 4 * a * c;
      if (disc < 0) continue;
      const double t = (-b - std::sqrt(disc)) / (2 * a);
      if (t > 0) d.at(x, y) = float(t);
    }
  return d;
}

// Mean |fused * t - analytic| over observed voxels with |analytic| < t / 2.
std::pair<double, std::size_t> sphere_fusion_error(double distance) {
  Intrinsics k{120, 120, 79.5, 59.5, 160, 120};
  const auto poses = sphere_cameras(40, distance);
  std::vector<DepthMap> depths;
  for (const auto& p : poses) depths.push_back(sphere_depth(k, p));
  std::vector<DepthFrame> frames;
  for (std::size_t i = 0; i < poses.size(); ++i) frames.push_back({&depths[i], poses[i]});
  const double t = 0.12;
  const GroundTruth gt = make_gt(frames, k, Aabb{Vec3::Zero(), Vec3::Constant(2.0)}, t);
  double sum = 0;
  std::size_t n = 0;
  const auto& g = gt.tsdf.grid;
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (g.value(i).weight == 0) continue;
    const double analytic = (g.center(g.coord(i)) - kSphereCenter).norm() - kSphereRadius;
    if (std::abs(analytic) >= 0.5 * t) continue;
    sum += std::abs(g.value(i).tsdf() * t - analytic);
    ++n;
  }
  return {n ? sum / double(n) : 1.0, n};
}

// Cameras 0.25 m off the surface keep the limb outside the field of view. With
// the whole silhouette in view, grazing rays inflate the projective distance and
// the mean error settles near 0.025 m; that figure is printed for reference.
Outcome criterion2() {
  Clock clock;
  const auto [mean, n] = sphere_fusion_error(0.75);
  const double secs = clock.seconds();
  const auto far = sphere_fusion_error(1.6);
  return {n > 0 && mean < 0.02 && secs < 60,
          fmt("mean |error| %.4f m over %zu band voxels, %.2f s (silhouette-in-view rig: %.4f m)", mean, n, secs,
              far.first)};
}

Outcome criterion3() {
  SparseVoxelGrid<float> sdf(Level::fine);
  for (int x = 0; x < 50; ++x)
    for (int y = 0; y < 50; ++y)
      for (int z = 0; z < 50; ++z) {
        const Coord c{x, y, z};
        sdf.set(c, float((sdf.center(c) - kSphereCenter).norm() - kSphereRadius));
      }
  const TriMesh m = marching_cubes(sdf, 0.0);
  std::size_t close = 0;
  for (const auto& v : m.vertices) close += std::abs((v.cast<double>() - kSphereCenter).norm() - kSphereRadius) < 0.02;
  const double frac = m.vertices.empty() ? 0 : double(close) / double(m.vertices.size());
  const std::size_t bad = non_manifold_edges(m);
  return {frac >= 0.99 && bad == 0 && !m.triangles.empty(),
          fmt("%.4f of %zu vertices within 2 cm, %zu edges not shared by exactly 2 triangles", frac,
              m.vertices.size(), bad)};
}

// -- 4 ---------------------------------------------------------------------------------

Outcome criterion4() {
  std::mt19937_64 rng(404);
  nn::ParameterSet<float> params;
  FusionConfig cfg;
  cfg.channels = 16;
  FusionModel<float> model(params, "f.", cfg, rng);
  std::uniform_real_distribution<double> u(-1, 1);
  double worst_perm = 0, worst_sum = 0, worst_ratio = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const int n = 1 + trial % 16;
    ViewSamples<float> a;
    std::vector<float> feat(std::size_t(n) * cfg.channels);
    for (auto& f : feat) f = float(u(rng));
    for (int i = 0; i < n; ++i) {
      a.dirs.push_back(Vec3(u(rng), u(rng), 1.0).normalized());
      a.depths.push_back(0.5 + 2 * (u(rng) + 1));
    }
    a.offsets = {0, n};
    a.features = nn::Tensor<float>::constant({n, cfg.channels}, feat);
    std::vector<int> perm(static_cast<std::size_t>(n));
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    ViewSamples<float> b;
    b.offsets = a.offsets;
    std::vector<float> pf;
    for (int i : perm) {
      b.dirs.push_back(a.dirs[std::size_t(i)]);
      b.depths.push_back(a.depths[std::size_t(i)]);
      pf.insert(pf.end(), feat.begin() + std::ptrdiff_t(i) * cfg.channels, feat.begin() + std::ptrdiff_t(i + 1) * cfg.channels);
    }
    b.features = nn::Tensor<float>::constant({n, cfg.channels}, pf);
    const auto fa = fuse_voxels(model, a, Aggregation::occupancy_weighted).fused.value();
    const auto fb = fuse_voxels(model, b, Aggregation::occupancy_weighted).fused.value();
    for (std::size_t i = 0; i < fa.size(); ++i) worst_perm = std::max(worst_perm, double(std::abs(fa[i] - fb[i])));

    std::vector<float> logits(static_cast<std::size_t>(n));
    for (auto& l : logits) l = float(10 * u(rng));
    const auto w = aggregation_weights(nn::Tensor<float>::constant({1, n}, logits)).value();
    double s = 0;
    for (float x : w) s += x;
    worst_sum = std::max(worst_sum, std::abs(s - 1));

    const auto tokens = model.build_tokens(a.features, a.dirs, a.depths);
    const auto enc = model.encode(tokens, 1, n);
    double max_norm = 0;
    for (int i = 0; i < n; ++i) {
      double sq = 0;
      for (int c = 0; c < cfg.channels; ++c) sq += std::pow(enc.value()[std::size_t(i * cfg.channels + c)], 2);
      max_norm = std::max(max_norm, std::sqrt(sq));
    }
    const auto off = aggregate(nn::reshape(enc, {1, n, cfg.channels}),
                               nn::Tensor<float>::constant({1, n}, std::vector<float>(std::size_t(n), -30.f)))
                         .value();
    double inf = 0;
    for (float x : off) inf = std::max(inf, double(std::abs(x)));
    worst_ratio = std::max(worst_ratio, inf / max_norm);
  }
  return {worst_perm < 1e-5 && worst_sum < 1e-6 && worst_ratio < 1e-6,
          fmt("permutation max |diff| %.2e, weight-sum error %.2e, all-off ratio %.2e", worst_perm, worst_sum,
              worst_ratio)};
}

// -- 5 ---------------------------------------------------------------------------------

Outcome criterion5() {
  Clock clock;
  int failed = 0, total = 0;
  double worst = 0;
  std::string names;
  for (const auto& c : gradcheck_cases()) {
    const auto r = c.run();
    ++total;
    worst = std::max(worst, r.max_error / r.tolerance);
    if (!r.passed) {
      ++failed;
      names += " " + r.name;
    }
  }
  const double secs = clock.seconds();
  return {failed == 0 && secs < 300,
          fmt("%d/%d suites pass, worst error/tolerance %.2e, %.2f s%s", total - failed, total, worst, secs,
              names.c_str())};
}

// -- 6 ---------------------------------------------------------------------------------

Outcome criterion6() {
  std::mt19937_64 rng(606);
  std::uniform_real_distribution<double> u(-1, 1);
  double worst = 0;
  const int cin = 3, cout = 4, n = 8;
  for (int grid = 0; grid < 50; ++grid) {
    const double density = 0.2 + 0.6 * (u(rng) + 1) / 2;
    std::vector<double> dense(std::size_t(n * n * n * cin), 0.0);
    std::vector<char> mask(std::size_t(n * n * n), 0);
    std::vector<Coord> coords;
    std::vector<double> x;
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j)
        for (int k = 0; k < n; ++k) {
          if ((u(rng) + 1) / 2 >= density) continue;
          const std::size_t cell = std::size_t((i * n + j) * n + k);
          mask[cell] = 1;
          coords.push_back({i, j, k});
          for (int c = 0; c < cin; ++c) {
            dense[cell * cin + std::size_t(c)] = u(rng);
            x.push_back(dense[cell * cin + std::size_t(c)]);
          }
        }
    std::vector<double> w(static_cast<std::size_t>(27 * cin * cout)), b(static_cast<std::size_t>(cout));
    for (auto& v : w) v = u(rng);
    for (auto& v : b) v = u(rng);
    const int m = int(coords.size());
    const auto got = nn::sparse_conv3(nn::Tensor<double>::constant({m, cin}, x), build_neighbors(coords),
                                      nn::Tensor<double>::constant({27, cin, cout}, w),
                                      nn::Tensor<double>::constant({cout}, b))
                         .value();
    // dense convolution, read only at active sites
    for (int r = 0; r < m; ++r) {
      const Coord c = coords[std::size_t(r)];
      for (int o = 0; o < cout; ++o) {
        double acc = b[std::size_t(o)];
        for (int dx = -1; dx <= 1; ++dx)
          for (int dy = -1; dy <= 1; ++dy)
            for (int dz = -1; dz <= 1; ++dz) {
              const int i = c.x + dx, j = c.y + dy, k = c.z + dz;
              if (i < 0 || j < 0 || k < 0 || i >= n || j >= n || k >= n) continue;
              const std::size_t cell = std::size_t((i * n + j) * n + k);
              const int tap = (dx + 1) * 9 + (dy + 1) * 3 + (dz + 1);
              for (int ci = 0; ci < cin; ++ci)
                acc += dense[cell * cin + std::size_t(ci)] * w[std::size_t((tap * cin + ci) * cout + o)];
            }
        worst = std::max(worst, std::abs(acc - got[std::size_t(r * cout + o)]));
      }
    }
  }
  return {worst < 1e-5, fmt("max |sparse - dense| %.2e over 50 grids", worst)};
}

// -- 7 ---------------------------------------------------------------------------------

TriMesh plane_mesh(double z, int cells = 20, double size = 1.0) {
  TriMesh m;
  for (int i = 0; i <= cells; ++i)
    for (int j = 0; j <= cells; ++j)
      m.vertices.push_back(Eigen::Vector3f(float(size * i / cells), float(size * j / cells), float(z)));
  auto id = [&](int i, int j) { return std::int32_t(i * (cells + 1) + j); };
  for (int i = 0; i < cells; ++i)
    for (int j = 0; j < cells; ++j) {
      m.triangles.push_back({id(i, j), id(i + 1, j), id(i + 1, j + 1)});
      m.triangles.push_back({id(i, j), id(i + 1, j + 1), id(i, j + 1)});
    }
  return m;
}

Outcome criterion7() {
  Clock clock;
  std::mt19937_64 rng(707);
  const Scene scene = render_scene(random_room(rng), "room");
  const TriMesh gt = ground_truth_mesh(scene_ground_truth(scene));
  const MetricReport self = metrics(gt, gt);
  const auto cams = scene_cameras(scene);
  const MetricReport trimmed = metrics(trim_mesh(gt, gt, cams), gt);
  const MetricReport plane = metrics(plane_mesh(0.1), plane_mesh(0.0), 0.05);
  const bool ok = self.acc == 0 && self.comp == 0 && self.fscore == 1 && trimmed.fscore > 0.95 && plane.prec == 0 &&
                  plane.recall == 0;
  return {ok, fmt("self acc %.3g comp %.3g F %.4f; trimmed F %.4f; shifted plane prec %.3f recall %.3f; %.1f s",
                  self.acc, self.comp, self.fscore, trimmed.fscore, plane.prec, plane.recall, clock.seconds())};
}

// -- 8 ---------------------------------------------------------------------------------

Outcome criterion8() {
  std::vector<Pose> poses;
  for (int i = 0; i < 72; ++i) {
    Pose p;
    p.R = Eigen::AngleAxisd(i * 5.0 * M_PI / 180.0, Vec3::UnitZ()).toRotationMatrix() *
          Eigen::AngleAxisd(M_PI / 2, Vec3::UnitX()).toRotationMatrix();
    poses.push_back(p);
  }
  std::vector<std::size_t> want;
  for (std::size_t i = 0; i < 72; i += 4) want.push_back(i);
  const auto a = select_keyframes(poses, 15, 0.2);
  const auto b = select_keyframes(poses, 15, 0.2);
  return {a == want && a == b, fmt("%zu keyframes, expected %zu at stride 4", a.size(), want.size())};
}

// -- 9, 10 -----------------------------------------------------------------------------

struct Benchmark {
  std::string work;
  PipelineConfig cfg;
  std::vector<Scene> train, test;
  bool have_data = false;

  void prepare() {
    if (have_data) return;
    const auto specs = specs_from_request({{"random", 25}}, 2024);
    const std::vector<SceneSpec> tr(specs.begin(), specs.begin() + 20), te(specs.begin() + 20, specs.end());
    for (const auto& d : write_dataset(tr, (fs::path(work) / "train").string())) train.push_back(load_scene(d));
    for (const auto& d : write_dataset(te, (fs::path(work) / "test").string())) test.push_back(load_scene(d));
    have_data = true;
  }
};

double mean_fscore(const ModelBundle<float>& model, const std::vector<Scene>& scenes,
                   const std::vector<TriMesh>& gts, const std::string& dir, const char* tag, std::string& per) {
  double sum = 0;
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    const Reconstruction rec = reconstruct(model, scenes[i]);
    write_mesh((fs::path(dir) / (scenes[i].name + "_" + tag + ".ply")).string(), rec.mesh);
    const MetricReport r = evaluate_mesh(rec.mesh, gts[i], scenes[i], 0.05, true);
    per += fmt(" %.3f", r.fscore);
    sum += r.fscore;
  }
  return sum / double(scenes.size());
}

Outcome criterion9(Benchmark& bench) {
  Clock clock;
  bench.prepare();
  const auto& cfg = bench.cfg;
  std::vector<TrainingScene> train, val;
  split_scenes(bench.train, cfg, train, val);
  std::vector<TriMesh> gts;
  for (const auto& s : bench.test) gts.push_back(ground_truth_mesh(scene_ground_truth(s, cfg.truncation, cfg.max_depth)));

  ModelBundle<float> model(cfg, cfg.seed);
  std::string per_base, per_trained;
  const double base = mean_fscore(model, bench.test, gts, bench.work, "untrained", per_base);
  std::cout << "  untrained F per scene:" << per_base << std::endl;

  ModelBundle<float> control(cfg, cfg.seed);
  PhaseReport control_report;
  const std::string ckpt = (fs::path(bench.work) / "model.ckpt").string();
  const TrainResult tr = train_model(model, train, val, {&std::cout, 25}, ckpt + ".diverged", &control, &control_report);
  save_model(ckpt, model);
  const double trained = mean_fscore(model, bench.test, gts, bench.work, "trained", per_trained);
  std::cout << "  trained F per scene:" << per_trained << std::endl;
  const double secs = clock.seconds();
  const bool ok = trained > 0.5 && trained - base >= 0.2 && tr.phase2.val_loss <= control_report.val_loss &&
                  secs < 45 * 60;
  return {ok, fmt("F@5cm trained %.3f vs untrained %.3f (margin %.3f); val loss phase2 %.4f vs phase1-only %.4f; "
                  "%d+%d steps; %.0f s",
                  trained, base, trained - base, tr.phase2.val_loss, control_report.val_loss, tr.phase1.steps,
                  tr.phase2.steps, secs)};
}

Outcome criterion10(Benchmark& bench) {
  Clock clock;
  bench.prepare();
  PipelineConfig cfg = bench.cfg;
  cfg.schedule_multiplier = 0.01;
  const std::vector<Scene> scenes(bench.train.begin(), bench.train.begin() + 3);
  std::vector<TrainingScene> train, val;
  split_scenes(scenes, cfg, train, val);
  std::string ckpt[2], ply[2];
  std::size_t faces = 0;
  for (int run = 0; run < 2; ++run) {
    ModelBundle<float> model(cfg, cfg.seed);
    train_model(model, train, val);
    ckpt[run] = nn::encode_archive(model_archive(model));
    const Reconstruction rec = reconstruct(model, bench.test[0]);
    ply[run] = encode_ply(rec.mesh);
    faces = rec.mesh.triangles.size();
  }
  return {ckpt[0] == ckpt[1] && ply[0] == ply[1],
          fmt("checkpoints %s (%zu bytes), meshes %s (%zu triangles), %d worker(s), %.0f s",
              ckpt[0] == ckpt[1] ? "identical" : "DIFFER", ckpt[0].size(), ply[0] == ply[1] ? "identical" : "DIFFER",
              faces, worker_count(), clock.seconds())};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria"};
  std::string only, config = VORTX_DESK_CONFIG, work = (fs::temp_directory_path() / "vortx_acceptance").string();
  app.add_option("--only", only, "comma-separated criteria to run");
  app.add_option("--config", config, "pipeline config for the end-to-end benchmark");
  app.add_option("--work", work, "scratch directory");
  CLI11_PARSE(app, argc, argv);

  std::set<int> selected;
  std::stringstream ss(only);
  for (std::string item; std::getline(ss, item, ',');)
    if (!item.empty()) selected.insert(std::stoi(item));
  auto want = [&](int c) { return selected.empty() || selected.count(c); };

  Benchmark bench;
  bench.work = work;
  fs::create_directories(work);
  try {
    bench.cfg = load_config(config);
  } catch (const std::exception& e) {
    std::cerr << "acceptance: " << e.what() << '\n';
    return 2;
  }

  const char* names[] = {"",
                         "projective occupancy oracle",
                         "TSDF fusion accuracy",
                         "marching cubes",
                         "fusion invariants",
                         "gradient checks",
                         "sparse conv oracle",
                         "evaluation self-tests",
                         "keyframe selection",
                         "end-to-end benchmark",
                         "determinism"};
  std::function<Outcome()> runs[] = {nullptr,    criterion1, criterion2, criterion3,
                                     criterion4, criterion5, criterion6, criterion7,
                                     criterion8, [&] { return criterion9(bench); },
                                     [&] { return criterion10(bench); }};
  int failures = 0;
  for (int c = 1; c <= 10; ++c) {
    if (!want(c)) continue;
    Outcome o;
    try {
      o = runs[c]();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += !o.pass;
    std::cout << "criterion " << c << (c < 10 ? "  " : " ") << (o.pass ? "PASS" : "FAIL") << "  " << names[c] << ": "
              << o.detail << std::endl;
  }
  return failures ? 1 : 0;
}
