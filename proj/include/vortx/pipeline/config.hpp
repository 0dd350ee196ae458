#pragma once

// Pipeline configuration: JSON with every field optional.

#include "vortx/common.hpp"
#include "vortx/fuse_tsdf.hpp"
#include "vortx/grid.hpp"

#include <json.hpp>

#include <array>
#include <cstdio>
#include <fstream>
#include <string>

namespace vortx {

struct PhaseSchedule {
  double lr = 1e-3;
  double epochs = 300;
  int batch = 4;
};

struct PipelineConfig {
  // geometry
  double truncation = kDefaultTruncation;
  double max_depth = kMaxSensorDepth;
  double tile_size = 1.92;  // meters, a multiple of the coarse voxel
  double threshold = 0.5;   // occupancy pruning

  // model
  std::array<int, 3> channels{32, 16, 8};  // coarse, medium, fine
  int layers = 2;
  int heads = 2;
  int freq_bands = 6;
  double depth_norm = 5.0;
  int cnn_layers = 3;
  bool parent_features = false;

  // views
  int n_train = 20;
  int n_test = 60;
  double rmax_deg = 15;
  double tmax_train = 0.1;
  double tmax_test = 0.2;

  // training
  std::array<int, 3> crop{96, 96, 48};
  PhaseSchedule phase1{1e-3, 300, 4};
  PhaseSchedule phase2{1e-4, 100, 2};
  double schedule_multiplier = 1.0 / 30.0;
  int warmup_steps = 2000;
  bool scale_warmup = true;  // warm-up shrinks with the schedule multiplier
  double keep_fraction = 0.5;
  int val_scenes = 1;
  std::uint64_t seed = 0;

  int channels_at(Level l) const { return channels[std::size_t(l)]; }
  int effective_warmup() const {
    if (!scale_warmup) return warmup_steps;
    return std::max(1, int(std::lround(warmup_steps * schedule_multiplier)));
  }
  void validate() const;
};

inline nlohmann::json to_json(const PipelineConfig& c) {
  auto phase = [](const PhaseSchedule& p) {
    return nlohmann::json{{"lr", p.lr}, {"epochs", p.epochs}, {"batch", p.batch}};
  };
  return {{"truncation", c.truncation},
          {"max_depth", c.max_depth},
          {"tile_size", c.tile_size},
          {"threshold", c.threshold},
          {"channels", c.channels},
          {"layers", c.layers},
          {"heads", c.heads},
          {"freq_bands", c.freq_bands},
          {"depth_norm", c.depth_norm},
          {"cnn_layers", c.cnn_layers},
          {"parent_features", c.parent_features},
          {"n_train", c.n_train},
          {"n_test", c.n_test},
          {"rmax_deg", c.rmax_deg},
          {"tmax_train", c.tmax_train},
          {"tmax_test", c.tmax_test},
          {"crop", c.crop},
          {"phase1", phase(c.phase1)},
          {"phase2", phase(c.phase2)},
          {"schedule_multiplier", c.schedule_multiplier},
          {"warmup_steps", c.warmup_steps},
          {"scale_warmup", c.scale_warmup},
          {"keep_fraction", c.keep_fraction},
          {"val_scenes", c.val_scenes},
          {"seed", c.seed}};
}

inline void PipelineConfig::validate() const {
  auto fail = [](const std::string& what) { throw Error("config: " + what); };
  if (!(truncation > 0) || !(max_depth > 0) || !(depth_norm > 0)) fail("distances must be positive");
  if (!(tile_size > 0)) fail("tile_size must be positive");
  if (!(threshold > 0 && threshold < 1)) fail("threshold must lie in (0, 1)");
  for (int c : channels)
    if (c <= 0 || c % heads) fail("channels must be positive multiples of heads");
  if (layers < 1 || heads < 1 || freq_bands < 1 || cnn_layers < 1) fail("layer counts must be positive");
  if (n_train < 1 || n_test < 1) fail("view counts must be positive");
  if (!(rmax_deg > 0) || !(tmax_train > 0) || !(tmax_test > 0)) fail("keyframe thresholds must be positive");
  for (int d : crop)
    if (d <= 0 || d % 4) fail("crop dimensions must be positive multiples of 4");
  if (crop[0] != crop[1]) fail("crop footprint must be square");
  for (const auto* p : {&phase1, &phase2})
    if (!(p->lr > 0) || !(p->epochs > 0) || p->batch < 1) fail("phase schedules must be positive");
  if (!(schedule_multiplier > 0)) fail("schedule_multiplier must be positive");
  if (warmup_steps < 0) fail("warmup_steps must be nonnegative");
  if (!(keep_fraction > 0 && keep_fraction <= 1)) fail("keep_fraction must lie in (0, 1]");
  if (val_scenes < 1) fail("val_scenes must be at least 1");
}

/// Unknown keys are rejected so that typos do not silently fall back to defaults.
inline PipelineConfig config_from_json(const nlohmann::json& j) {
  PipelineConfig c;
  if (!j.is_object()) throw Error("config: expected a JSON object");
  const auto known = to_json(c);
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!known.contains(it.key())) throw Error("config: unknown key '" + it.key() + "'");
  try {
    auto get = [&](const char* k, auto& dst) {
      if (j.contains(k)) j.at(k).get_to(dst);
    };
    auto phase = [&](const char* k, PhaseSchedule& p) {
      if (!j.contains(k)) return;
      const auto& o = j.at(k);
      if (o.contains("lr")) o.at("lr").get_to(p.lr);
      if (o.contains("epochs")) o.at("epochs").get_to(p.epochs);
      if (o.contains("batch")) o.at("batch").get_to(p.batch);
    };
    get("truncation", c.truncation);
    get("max_depth", c.max_depth);
    get("tile_size", c.tile_size);
    get("threshold", c.threshold);
    get("channels", c.channels);
    get("layers", c.layers);
    get("heads", c.heads);
    get("freq_bands", c.freq_bands);
    get("depth_norm", c.depth_norm);
    get("cnn_layers", c.cnn_layers);
    get("parent_features", c.parent_features);
    get("n_train", c.n_train);
    get("n_test", c.n_test);
    get("rmax_deg", c.rmax_deg);
    get("tmax_train", c.tmax_train);
    get("tmax_test", c.tmax_test);
    get("crop", c.crop);
    phase("phase1", c.phase1);
    phase("phase2", c.phase2);
    get("schedule_multiplier", c.schedule_multiplier);
    get("warmup_steps", c.warmup_steps);
    get("scale_warmup", c.scale_warmup);
    get("keep_fraction", c.keep_fraction);
    get("val_scenes", c.val_scenes);
    get("seed", c.seed);
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

inline PipelineConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(path + ": " + e.what(), e.byte);
  }
  return config_from_json(j);
}

/// FNV-1a over the architecture-defining fields; checkpoints must match it.
inline std::string config_fingerprint(const PipelineConfig& c) {
  const nlohmann::json arch = {{"channels", c.channels},     {"layers", c.layers},
                               {"heads", c.heads},           {"freq_bands", c.freq_bands},
                               {"cnn_layers", c.cnn_layers}, {"parent_features", c.parent_features}};
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : arch.dump()) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace vortx
