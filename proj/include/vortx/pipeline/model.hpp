#pragma once

// The full learned model and its checkpoint.

#include "vortx/feature_provider.hpp"
#include "vortx/nn/optim.hpp"
#include "vortx/pipeline/config.hpp"
#include "vortx/sparse_cnn.hpp"
#include "vortx/view_fusion.hpp"

#include <json.hpp>

#include <array>
#include <memory>
#include <random>
#include <string>

namespace vortx {

template <class T>
class ModelBundle {
 public:
  ModelBundle(const PipelineConfig& cfg, std::uint64_t init_seed) : config_(cfg) {
    cfg.validate();
    std::mt19937_64 rng(init_seed);
    features_ = FeatureProvider<T>(params_, cfg.channels, rng);
    for (Level l : kLevels) {
      FusionConfig fc;
      fc.channels = cfg.channels_at(l);
      fc.layers = cfg.layers;
      fc.heads = cfg.heads;
      fc.freq_bands = cfg.freq_bands;
      fc.max_depth = cfg.depth_norm;
      fusion_[std::size_t(l)] = FusionModel<T>(params_, std::string("fusion.") + level_name(l) + ".", fc, rng);
    }
    for (Level l : kLevels) {
      LevelNetworkConfig lc;
      lc.channels = cfg.channels_at(l);
      lc.parent_channels = cfg.parent_features && l != Level::coarse ? cfg.channels_at(coarser(l)) : 0;
      lc.layers = cfg.cnn_layers;
      lc.head = l == Level::fine ? HeadKind::tsdf : HeadKind::occupancy;
      cnn_[std::size_t(l)] = LevelNetwork<T>(params_, std::string("cnn.") + level_name(l) + ".", lc, rng);
    }
  }

  // Parameters are shared handles; copying would alias them.
  ModelBundle(const ModelBundle&) = delete;
  ModelBundle& operator=(const ModelBundle&) = delete;

  const PipelineConfig& config() const { return config_; }
  nn::ParameterSet<T>& params() { return params_; }
  const nn::ParameterSet<T>& params() const { return params_; }
  const FeatureProvider<T>& features() const { return features_; }
  const FusionModel<T>& fusion(Level l) const { return fusion_[std::size_t(l)]; }
  const LevelNetwork<T>& cnn(Level l) const { return cnn_[std::size_t(l)]; }

  /// Independent copy with identical values.
  std::unique_ptr<ModelBundle> clone() const {
    auto out = std::make_unique<ModelBundle>(config_, 0);
    auto& dst = out->params().entries();
    const auto& src = params_.entries();
    for (std::size_t i = 0; i < src.size(); ++i) dst[i].second.value() = src[i].second.value();
    return out;
  }

  void copy_values_from(const ModelBundle& other) {
    auto& dst = params_.entries();
    const auto& src = other.params().entries();
    if (dst.size() != src.size()) throw Error("copy_values_from: parameter sets differ");
    for (std::size_t i = 0; i < src.size(); ++i) dst[i].second.value() = src[i].second.value();
  }

 private:
  PipelineConfig config_;
  nn::ParameterSet<T> params_;
  FeatureProvider<T> features_;
  std::array<FusionModel<T>, 3> fusion_;
  std::array<LevelNetwork<T>, 3> cnn_;
};

template <class T>
nn::Archive model_archive(const ModelBundle<T>& m, const nlohmann::json& extra = {}) {
  nn::Archive a;
  nlohmann::json meta = {{"format", "vortx-model"},
                         {"fingerprint", config_fingerprint(m.config())},
                         {"config", to_json(m.config())}};
  if (!extra.is_null()) meta["info"] = extra;
  a.meta = meta.dump();
  nn::append_parameters(a, m.params());
  return a;
}

template <class T>
void save_model(const std::string& path, const ModelBundle<T>& m, const nlohmann::json& extra = {}) {
  nn::save_archive(path, model_archive(m, extra));
}

/// Rebuilds the model from the embedded config. When `expected` is given its
/// architecture fingerprint must match the checkpoint's.
template <class T>
std::unique_ptr<ModelBundle<T>> load_model(const std::string& path, const PipelineConfig* expected = nullptr) {
  const nn::Archive a = nn::load_archive(path);
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(a.meta);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(path + ": bad checkpoint metadata: " + e.what(), 20 + e.byte);
  }
  if (meta.value("format", "") != "vortx-model") throw Error(path + ": not a model checkpoint");
  const PipelineConfig cfg = config_from_json(meta.at("config"));
  const std::string stored = meta.value("fingerprint", "");
  if (stored != config_fingerprint(cfg)) throw Error(path + ": fingerprint does not match the embedded config");
  if (expected && config_fingerprint(*expected) != stored)
    throw Error(path + ": checkpoint architecture " + stored + " differs from config " +
                config_fingerprint(*expected));
  auto m = std::make_unique<ModelBundle<T>>(cfg, 0);
  nn::load_parameters(a, m->params());
  return m;
}

}  // namespace vortx
