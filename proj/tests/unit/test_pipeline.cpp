#include "vortx/pipeline.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <random>
#include <set>
#include <sstream>

using namespace vortx;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("vortx_pipeline_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

PipelineConfig tiny_config() {
  PipelineConfig c;
  c.channels = {8, 8, 4};
  c.layers = 1;
  c.cnn_layers = 1;
  c.freq_bands = 2;
  c.n_train = 3;
  c.n_test = 3;
  c.crop = {16, 16, 16};
  c.phase1 = {1e-3, 1, 1};
  c.phase2 = {1e-4, 1, 1};
  c.schedule_multiplier = 1;
  c.warmup_steps = 2;
  c.scale_warmup = false;
  c.seed = 3;
  return c;
}

SceneSpec small_room() {
  SceneSpec s;
  s.room = Vec3(1.6, 1.6, 1.2);
  s.objects.push_back({SdfObject::Kind::sphere, Vec3(0.4, 0.4, 0.2), 0.2, Vec3::Zero()});
  s.trajectory = {8, 45, 0.2, 0.6, 0.3};
  s.image = {32, 24, 24, 24};
  return s;
}

const Scene& shared_scene() {
  static const Scene s = render_scene(small_room(), "small");
  return s;
}

bool same_params(const ModelBundle<float>& a, const ModelBundle<float>& b) {
  const auto& x = a.params().entries();
  const auto& y = b.params().entries();
  if (x.size() != y.size()) return false;
  for (std::size_t i = 0; i < x.size(); ++i)
    if (x[i].first != y[i].first || x[i].second.value() != y[i].second.value()) return false;
  return true;
}

}  // namespace

// -- configuration -----------------------------------------------------------------

TEST(Config, JsonRoundTrip) {
  PipelineConfig c = tiny_config();
  c.threshold = 0.4;
  const PipelineConfig d = config_from_json(to_json(c));
  EXPECT_EQ(to_json(d), to_json(c));
  EXPECT_EQ(to_json(config_from_json(nlohmann::json::object())), to_json(PipelineConfig{}));
}

TEST(Config, RejectsUnknownKeysAndBadValues) {
  EXPECT_THROW(config_from_json({{"chanels", {8, 8, 8}}}), Error);
  EXPECT_THROW(config_from_json({{"threshold", 1.5}}), Error);
  EXPECT_THROW(config_from_json({{"crop", {48, 48, 30}}}), Error);
  EXPECT_THROW(config_from_json({{"crop", {48, 40, 32}}}), Error);
  EXPECT_THROW(config_from_json({{"channels", {7, 8, 8}}}), Error);
  EXPECT_THROW(config_from_json({{"layers", "two"}}), Error);
  EXPECT_THROW(config_from_json(nlohmann::json::array()), Error);
}

TEST(Config, ShippedDeskConfigLoads) {
  const PipelineConfig c = load_config(VORTX_SOURCE_DIR "/configs/desk.json");
  EXPECT_EQ(c.crop[0], 48);
  EXPECT_EQ(c.seed, 7u);
}

TEST(Config, LoadErrors) {
  const fs::path dir = scratch("cfg");
  std::ofstream(dir / "bad.json") << "{\"seed\": ";
  EXPECT_THROW(load_config((dir / "bad.json").string()), ParseError);
  EXPECT_THROW(load_config((dir / "missing.json").string()), Error);
  fs::remove_all(dir);
}

TEST(Config, FingerprintTracksArchitectureOnly) {
  PipelineConfig a = tiny_config(), b = a;
  b.phase1.lr = 0.5;
  b.seed = 99;
  b.threshold = 0.3;
  EXPECT_EQ(config_fingerprint(a), config_fingerprint(b));
  b.channels[2] = 8;
  EXPECT_NE(config_fingerprint(a), config_fingerprint(b));
  EXPECT_EQ(config_fingerprint(a).size(), 16u);
}

// -- model and checkpoints ------------------------------------------------------------

TEST(Model, SameSeedSameParameters) {
  const ModelBundle<float> a(tiny_config(), 5), b(tiny_config(), 5), c(tiny_config(), 6);
  EXPECT_TRUE(same_params(a, b));
  EXPECT_FALSE(same_params(a, c));
  EXPECT_TRUE(same_params(a, *a.clone()));
}

TEST(Model, CheckpointRoundTripIsBitExact) {
  const fs::path dir = scratch("ckpt");
  const ModelBundle<float> m(tiny_config(), 11);
  const std::string path = (dir / "m.ckpt").string();
  save_model(path, m, {{"note", "x"}});
  const auto back = load_model<float>(path);
  EXPECT_TRUE(same_params(m, *back));
  EXPECT_EQ(to_json(back->config()), to_json(m.config()));

  PipelineConfig other = tiny_config();
  other.channels = {8, 8, 8};
  EXPECT_THROW(load_model<float>(path, &other), Error);
  PipelineConfig retuned = tiny_config();
  retuned.phase1.lr = 0.1;
  EXPECT_NO_THROW(load_model<float>(path, &retuned));

  // A tampered fingerprint is caught.
  nn::Archive a = nn::load_archive(path);
  auto meta = nlohmann::json::parse(a.meta);
  meta["fingerprint"] = "0000000000000000";
  a.meta = meta.dump();
  nn::save_archive(path, a);
  EXPECT_THROW(load_model<float>(path), Error);
  fs::remove_all(dir);
}

// -- synthetic scenes ---------------------------------------------------------------------

TEST(Synth, EmptyRoomDepthMatchesRayBox) {
  SceneSpec s;
  s.room = Vec3(2.5, 2.0, 1.8);
  s.trajectory = {4, 90, 0.3, 0.8, 0.4};
  s.image = {24, 18, 20, 20};
  const Intrinsics k = scene_intrinsics(s);
  const auto poses = scene_trajectory(s);
  for (const auto& p : poses) {
    const auto v = render_view(s, k, p);
    for (int y = 0; y < k.height; ++y)
      for (int x = 0; x < k.width; ++x) {
        const Vec3 dc((x - k.cx) / k.fx, (y - k.cy) / k.fy, 1.0);
        const Vec3 dir = p.R * dc;
        double t = INFINITY;
        for (int a = 0; a < 3; ++a) {
          if (dir[a] > 0) t = std::min(t, (s.room[a] - p.t[a]) / dir[a]);
          if (dir[a] < 0) t = std::min(t, -p.t[a] / dir[a]);
        }
        EXPECT_NEAR(v.depth.at(x, y), t, 1e-3);
        EXPECT_GE(v.shading.at(x, y), 0.f);
        EXPECT_LE(v.shading.at(x, y), 1.f);
      }
  }
}

TEST(Synth, PlaneTraceConvergesQuickly) {
  auto plane = [](const Vec3& p) { return 2.0 - p.z(); };
  const auto r = sphere_trace(plane, Vec3::Zero(), Vec3(0.2, 0.1, 1.0).normalized());
  EXPECT_TRUE(r.hit);
  EXPECT_LE(r.steps, 8);
  EXPECT_NEAR(r.t * Vec3(0.2, 0.1, 1.0).normalized().z(), 2.0, 1e-4);
  EXPECT_FALSE(sphere_trace(plane, Vec3::Zero(), Vec3(0, 0, -1)).hit);
}

TEST(Synth, InvalidSpecsAreRejected) {
  SceneSpec s;
  s.trajectory.radius = 2.0;  // orbit leaves a 3 m room
  EXPECT_THROW(scene_trajectory(s), Error);
  SceneSpec t;
  t.objects.push_back({SdfObject::Kind::sphere, Vec3(1.5 + 0.5, 1.5, 1.0), 0.3, Vec3::Zero()});
  EXPECT_THROW(scene_trajectory(t), Error);
  EXPECT_THROW(scene_from_json({{"objects", {{{"type", "sphere"}, {"center", {0.1, 1, 1}}, {"radius", 0.5}}}}}), Error);
  EXPECT_THROW(scene_from_json({{"objects", {{{"type", "cone"}, {"center", {1, 1, 1}}}}}}), Error);
  EXPECT_THROW(scene_from_json({{"room", {1, 2}}}), Error);
}

TEST(Synth, SpecJsonRoundTrip) {
  std::mt19937_64 rng(4);
  const SceneSpec s = random_room(rng);
  EXPECT_EQ(to_json(scene_from_json(to_json(s))), to_json(s));
  EXPECT_FALSE(s.objects.empty());
  EXPECT_NO_THROW(scene_trajectory(s));
}

TEST(Synth, BoundsSnapToCoarseLattice) {
  const Aabb b = scene_bounds(small_room());
  for (int a = 0; a < 3; ++a) {
    EXPECT_NEAR(std::remainder(b.min[a], 0.16), 0, 1e-9);
    EXPECT_NEAR(std::remainder(b.max[a], 0.16), 0, 1e-9);
    EXPECT_LT(b.min[a], 0);
    EXPECT_GT(b.max[a], small_room().room[a]);
  }
}

TEST(Synth, RequestFormats) {
  EXPECT_EQ(specs_from_request(to_json(small_room()), 0).size(), 1u);
  EXPECT_EQ(specs_from_request({{"random", 3}}, 5).size(), 3u);
  EXPECT_EQ(to_json(specs_from_request({{"random", 2}}, 5)[1]), to_json(specs_from_request({{"random", 2}}, 5)[1]));
  EXPECT_NE(to_json(specs_from_request({{"random", 1}}, 5)[0]), to_json(specs_from_request({{"random", 1}}, 6)[0]));
  EXPECT_EQ(specs_from_request({{"scenes", {to_json(small_room()), to_json(small_room())}}}, 0).size(), 2u);
  EXPECT_THROW(specs_from_request({{"random", 0}}, 0), Error);
  EXPECT_THROW(specs_from_request({{"scenes", nlohmann::json::array()}}, 0), Error);
  EXPECT_EQ(specs_from_request({{"random", 1}, {"image", {{"width", 40}}}}, 0)[0].image.width, 40);
}

TEST(Dataset, WriteLoadRoundTrip) {
  const fs::path dir = scratch("dataset");
  const auto dirs = write_dataset({small_room(), small_room()}, dir.string());
  ASSERT_EQ(dirs.size(), 2u);
  EXPECT_EQ(list_scenes(dir.string()), dirs);
  EXPECT_TRUE(fs::exists(fs::path(dirs[0]) / "spec.json"));
  const Scene& ref = shared_scene();
  const Scene s = load_scene(dirs[1]);
  EXPECT_EQ(s.name, "scene_001");
  ASSERT_EQ(s.frames(), ref.frames());
  EXPECT_TRUE(s.has_shading());
  for (std::size_t i = 0; i < s.frames(); ++i) {
    EXPECT_TRUE(s.poses[i].R.isApprox(ref.poses[i].R, 1e-9));
    for (std::size_t p = 0; p < s.depth[i].data.size(); ++p) {
      EXPECT_NEAR(s.depth[i].data[p], ref.depth[i].data[p], 5e-4 + 1e-6);
      EXPECT_NEAR(s.shading[i].data[p], ref.shading[i].data[p], 0.5 / 255 + 1e-6);
    }
  }
  EXPECT_EQ(s.k.fx, ref.k.fx);
  EXPECT_EQ(s.bounds.max, ref.bounds.max);

  fs::remove(fs::path(dirs[1]) / "poses" / frame_name(3, "txt"));
  EXPECT_THROW(load_scene(dirs[1]), Error);
  EXPECT_THROW(load_scene((dir / "nope").string()), Error);
  EXPECT_THROW(list_scenes((dir / "nope").string()), Error);
  fs::remove_all(dir);
}

TEST(GroundTruth, SaveWritesAllVoxels) {
  const fs::path dir = scratch("gt");
  const GroundTruth gt = scene_ground_truth(shared_scene());
  save_ground_truth((dir / "gt.bin").string(), gt);
  const nn::Archive a = nn::load_archive((dir / "gt.bin").string());
  ASSERT_NE(a.find("tsdf"), nullptr);
  EXPECT_EQ(a.find("tsdf")->shape[0], int(gt.tsdf.grid.size()));
  EXPECT_EQ(nlohmann::json::parse(a.meta)["format"], "vortx-gt");
  const TriMesh m = ground_truth_mesh(gt);
  EXPECT_FALSE(m.empty());
  EXPECT_EQ(metrics(m, m).fscore, 1.0);
  fs::remove_all(dir);
}

// -- training ------------------------------------------------------------------------------

TEST(Training, MixSeedSpreadsStreams) {
  std::set<std::uint64_t> seen;
  for (std::uint64_t a = 0; a < 20; ++a)
    for (std::uint64_t b = 0; b < 20; ++b) seen.insert(mix_seed(a, b));
  EXPECT_EQ(seen.size(), 400u);
}

TEST(Training, VoxelDropoutProperties) {
  std::vector<Coord> all;
  for (int i = 0; i < 4000; ++i) all.push_back({i, 0, 0});
  std::mt19937_64 rng(1);
  EXPECT_EQ(voxel_dropout(all, 1.0, rng), all);
  const auto half = voxel_dropout(all, 0.5, rng);
  EXPECT_TRUE(std::is_sorted(half.begin(), half.end()));
  EXPECT_TRUE(std::includes(all.begin(), all.end(), half.begin(), half.end()));
  EXPECT_NEAR(double(half.size()) / 4000, 0.5, 0.04);
  const std::vector<Coord> one{{1, 2, 3}};
  for (int i = 0; i < 20; ++i) EXPECT_EQ(voxel_dropout(one, 0.01, rng).size(), 1u);
  EXPECT_TRUE(voxel_dropout(std::vector<Coord>{}, 0.5, rng).empty());
  EXPECT_THROW(voxel_dropout(all, 0.0, rng), Error);
  EXPECT_THROW(voxel_dropout(all, 1.5, rng), Error);
}

TEST(Training, TeacherForcingHelpers) {
  const auto c = crop_coarse_coords({16, 8, 12});
  EXPECT_EQ(c.size(), std::size_t(4 * 2 * 3));
  EXPECT_TRUE(std::is_sorted(c.begin(), c.end()));
  SparseVoxelGrid<bool> occ(Level::coarse);
  occ.set({1, 0, 0}, true);
  occ.set({0, 0, 0}, false);
  const auto kids = children_of_occupied(occ);
  ASSERT_EQ(kids.size(), 8u);
  for (const auto& k : kids) EXPECT_EQ(k.parent(), (Coord{1, 0, 0}));
}

class TrainingFixture : public ::testing::Test {
 protected:
  void SetUp() override {
    cfg = tiny_config();
    scenes.push_back(shared_scene());
    scenes.push_back(shared_scene());
    split_scenes(scenes, cfg, train, val);
  }
  PipelineConfig cfg;
  std::vector<Scene> scenes;
  std::vector<TrainingScene> train, val;
};

TEST_F(TrainingFixture, SplitKeepsLastForValidation) {
  EXPECT_EQ(train.size(), 1u);
  EXPECT_EQ(val.size(), 1u);
  EXPECT_EQ(val[0].scene, &scenes[1]);
  std::vector<TrainingScene> a, b;
  EXPECT_THROW(split_scenes(std::span<const Scene>(scenes.data(), 1), cfg, a, b), Error);
}

TEST_F(TrainingFixture, PhaseStepCount) {
  ModelBundle<float> m(cfg, 1);
  Trainer<float> t(m, train, val);
  EXPECT_EQ(t.phase_steps({1e-3, 300, 2}), 150);
  EXPECT_EQ(t.phase_steps({1e-3, 0.1, 4}), 1);
  EXPECT_EQ(t.phase_steps({1e-3, 3, 2}), 2);
}

TEST_F(TrainingFixture, CropLossGradientsFollowPhase) {
  ModelBundle<float> m(cfg, 2);
  std::mt19937_64 rng(4);
  const TrainingCrop crop = random_subcrop(train[0].gt, {16, 16, 16}, rng, true);
  const auto ids = Trainer<float>::crop_views(train[0], crop, cfg.n_train, rng);
  ASSERT_FALSE(ids.empty());
  for (int phase : {1, 2}) {
    m.params().zero_grad();
    auto loss = crop_loss<float>(m, train[0], crop, ids, phase == 2 ? Aggregation::occupancy_weighted : Aggregation::mean,
                                 phase == 2, 1.0, rng);
    EXPECT_TRUE(std::isfinite(loss.values.total));
    double sum = 0;
    for (double t : loss.values.terms) {
      EXPECT_GE(t, 0);
      sum += t;
    }
    EXPECT_NEAR(sum, loss.values.total, 1e-4 * (1 + sum));
    nn::backward(loss.total);
    bool feature_grad = false, cnn_grad = false;
    for (const auto& [name, p] : m.params().entries()) {
      if (name.rfind("features.", 0) == 0 && !p.grad().empty()) feature_grad = true;
      if (name.rfind("cnn.coarse", 0) == 0 && !p.grad().empty()) cnn_grad = true;
    }
    EXPECT_EQ(feature_grad, phase == 2);
    EXPECT_TRUE(cnn_grad);
  }
}

TEST_F(TrainingFixture, AggregationModeChangesLoss) {
  ModelBundle<float> m(cfg, 2);
  std::mt19937_64 r1(4), r2(4);
  const TrainingCrop crop = random_subcrop(train[0].gt, {16, 16, 16}, r1, false);
  const auto ids = Trainer<float>::crop_views(train[0], crop, cfg.n_train, r1);
  random_subcrop(train[0].gt, {16, 16, 16}, r2, false);
  Trainer<float>::crop_views(train[0], crop, cfg.n_train, r2);
  nn::NoGrad guard;
  const double a = crop_loss<float>(m, train[0], crop, ids, Aggregation::mean, false, 1.0, r1).values.total;
  const double b = crop_loss<float>(m, train[0], crop, ids, Aggregation::occupancy_weighted, false, 1.0, r2).values.total;
  EXPECT_NE(a, b);
}

TEST_F(TrainingFixture, TrainingIsDeterministicAndMovesParameters) {
  ModelBundle<float> a(cfg, 1), b(cfg, 1), init(cfg, 1);
  const TrainResult ra = train_model(a, train, val);
  const TrainResult rb = train_model(b, train, val);
  EXPECT_TRUE(same_params(a, b));
  EXPECT_FALSE(same_params(a, init));
  EXPECT_EQ(ra.phase1.steps, 1);
  EXPECT_EQ(ra.phase2.steps, 1);
  EXPECT_EQ(ra.phase2.val_loss, rb.phase2.val_loss);
  EXPECT_TRUE(std::isfinite(ra.phase1.val_loss));
}

TEST_F(TrainingFixture, ControlBranchLeavesMainRunUnchanged) {
  ModelBundle<float> a(cfg, 1), b(cfg, 1), control(cfg, 0);
  PhaseReport rep;
  std::ostringstream log;
  train_model(a, train, val, {&log, 1});
  train_model(b, train, val, {}, {}, &control, &rep);
  EXPECT_TRUE(same_params(a, b));
  EXPECT_FALSE(same_params(a, control));
  EXPECT_EQ(rep.steps, 1);
  EXPECT_TRUE(std::isfinite(rep.val_loss));
  EXPECT_NE(log.str().find("phase 2 step 1/1"), std::string::npos);
}

TEST_F(TrainingFixture, DivergenceRestoresAndSavesRescue) {
  ModelBundle<float> m(cfg, 1);
  for (auto& [name, p] : m.params().entries())
    if (name.rfind("cnn.coarse.", 0) == 0)
      for (float& v : p.value()) v = std::numeric_limits<float>::quiet_NaN();
  const fs::path dir = scratch("diverge");
  const std::string rescue = (dir / "m.diverged").string();
  Trainer<float> t(m, train, val);
  EXPECT_THROW(t.run_phase(1, cfg.phase1, 3, rescue), Divergence);
  EXPECT_TRUE(fs::exists(rescue));
  fs::remove_all(dir);
}

// -- inference -----------------------------------------------------------------------------

TEST(Reconstruct, ChunkSizeDoesNotChangeResult) {
  PipelineConfig cfg = tiny_config();
  cfg.threshold = 0.3;
  const ModelBundle<float> m(cfg, 8);
  ReconstructOptions big, small;
  small.chunk = 37;
  const Reconstruction a = reconstruct(m, shared_scene(), big);
  const Reconstruction b = reconstruct(m, shared_scene(), small);
  ASSERT_EQ(a.tsdf.size(), b.tsdf.size());
  for (std::size_t i = 0; i < a.tsdf.size(); ++i) {
    EXPECT_EQ(a.tsdf.coord(i), b.tsdf.coord(i));
    EXPECT_EQ(a.tsdf.value(i), b.tsdf.value(i));
  }
  EXPECT_EQ(encode_ply(a.mesh), encode_ply(b.mesh));
  EXPECT_GT(a.stats[0].active, 0u);
  EXPECT_EQ(a.stats[0].active, coarse_voxels_in(shared_scene().bounds).size());
  EXPECT_EQ(a.keyframes, select_keyframes(shared_scene().poses, cfg.rmax_deg, cfg.tmax_test));
}

TEST(Reconstruct, NoShadingIsAnError) {
  Scene s = shared_scene();
  s.shading.clear();
  const ModelBundle<float> m(tiny_config(), 1);
  EXPECT_THROW(reconstruct(m, s), Error);
}

TEST(Reconstruct, CoarseVoxelsInsideBounds) {
  const Aabb b{Vec3(0, 0, 0), Vec3(0.32, 0.16, 0.48)};
  const auto v = coarse_voxels_in(b);
  EXPECT_EQ(v.size(), std::size_t(2 * 1 * 3));
  for (const auto& c : v) EXPECT_TRUE(b.contains(voxel_center(Level::coarse, c)));
}
