#pragma once

// Per-voxel transformer fusion of backprojected view features, with
// projective-occupancy-weighted aggregation.
//
// Every voxel owns an unordered set of N view samples. Samples are turned
// into tokens, encoded jointly by an L-layer transformer (attention only
// within a voxel), scored by a shared occupancy head, and reduced to one
// feature per voxel. Voxels are processed in buckets of equal N so that no
// padding or masking is needed.

#include "vortx/common.hpp"
#include "vortx/grid.hpp"
#include "vortx/nn/layers.hpp"
#include "vortx/nn/tensor.hpp"

#include <cmath>
#include <map>
#include <string>
#include <vector>

namespace vortx {

struct FusionConfig {
  int channels = 8;
  int layers = 2;
  int heads = 2;
  int freq_bands = 6;
  double max_depth = 5.0;  // depth normalization
};

enum class Aggregation { mean, occupancy_weighted };

/// Pairs (sin 2^k pi x, cos 2^k pi x), k < bands, for x in each component of dir.
template <class T = double>
std::vector<T> pose_encoding(const Vec3& dir, int bands) {
  std::vector<T> out;
  out.reserve(std::size_t(6 * bands));
  for (int a = 0; a < 3; ++a)
    for (int k = 0; k < bands; ++k) {
      const double arg = std::ldexp(M_PI, k) * dir[a];
      out.push_back(T(std::sin(arg)));
      out.push_back(T(std::cos(arg)));
    }
  return out;
}

template <class T>
struct TransformerLayer {
  nn::Linear<T> query, key, value, output, ff1, ff2;
  nn::LayerNorm<T> norm1, norm2;
};

template <class T>
class FusionModel {
 public:
  FusionModel() = default;

  template <class Rng>
  FusionModel(nn::ParameterSet<T>& params, const std::string& prefix, FusionConfig cfg, Rng& rng) : cfg_(cfg) {
    const int c = cfg.channels;
    if (c % cfg.heads) throw Error("fusion: channels must be divisible by heads");
    token_fc1_ = nn::Linear<T>(params, prefix + "token_fc1", c + 6 * cfg.freq_bands, c, rng);
    token_fc2_ = nn::Linear<T>(params, prefix + "token_fc2", c + 1, c, rng);
    for (int l = 0; l < cfg.layers; ++l) {
      const std::string p = prefix + "layer" + std::to_string(l) + ".";
      TransformerLayer<T> layer;
      layer.query = nn::Linear<T>(params, p + "query", c, c, rng);
      layer.key = nn::Linear<T>(params, p + "key", c, c, rng);
      layer.value = nn::Linear<T>(params, p + "value", c, c, rng);
      layer.output = nn::Linear<T>(params, p + "output", c, c, rng);
      layer.ff1 = nn::Linear<T>(params, p + "ff1", c, 2 * c, rng);
      layer.ff2 = nn::Linear<T>(params, p + "ff2", 2 * c, c, rng);
      layer.norm1 = nn::LayerNorm<T>(params, p + "norm1", c);
      layer.norm2 = nn::LayerNorm<T>(params, p + "norm2", c);
      layers_.push_back(layer);
    }
    occupancy_head_ = nn::Linear<T>(params, prefix + "occupancy", c, 1, rng);
  }

  const FusionConfig& config() const { return cfg_; }
  std::vector<TransformerLayer<T>>& layers() { return layers_; }
  const nn::Linear<T>& occupancy_head() const { return occupancy_head_; }

  /// tokens[S, C] = FC2([FC1([feature, pose_encoding(dir)]), clamp(d_v / d_max, 0, 1)])
  nn::Tensor<T> build_tokens(const nn::Tensor<T>& features, const std::vector<Vec3>& dirs,
                             const std::vector<double>& depths) const {
    const int s = features.dim(0);
    if (int(dirs.size()) != s || int(depths.size()) != s)
      throw ShapeError("build_tokens: " + std::to_string(s) + " features but " + std::to_string(dirs.size()) +
                       " directions and " + std::to_string(depths.size()) + " depths");
    const int enc = 6 * cfg_.freq_bands;
    std::vector<T> pe;
    pe.reserve(std::size_t(s) * enc);
    std::vector<T> nd(static_cast<std::size_t>(s));
    for (int i = 0; i < s; ++i) {
      const auto e = pose_encoding<T>(dirs[std::size_t(i)], cfg_.freq_bands);
      pe.insert(pe.end(), e.begin(), e.end());
      nd[std::size_t(i)] = T(std::clamp(depths[std::size_t(i)] / cfg_.max_depth, 0.0, 1.0));
    }
    auto x = nn::concat<T>({features, nn::Tensor<T>::constant({s, enc}, std::move(pe))}, 1);
    auto h = token_fc1_(x);
    auto x2 = nn::concat<T>({h, nn::Tensor<T>::constant({s, 1}, std::move(nd))}, 1);
    return token_fc2_(x2);
  }

  /// tokens[G*N, C] for G voxels with N views each -> encoded [G*N, C].
  nn::Tensor<T> encode(const nn::Tensor<T>& tokens, int groups, int n) const {
    const int c = cfg_.channels, h = cfg_.heads, d = c / h;
    const T scale = T(1) / std::sqrt(T(d));
    auto split = [&](const nn::Tensor<T>& t) {
      return nn::reshape(nn::permute(nn::reshape(t, {groups, n, h, d}), {0, 2, 1, 3}), {groups * h, n, d});
    };
    nn::Tensor<T> x = tokens;
    for (const auto& layer : layers_) {
      auto q = split(layer.query(x));
      auto k = split(layer.key(x));
      auto v = split(layer.value(x));
      auto attn = nn::softmax(nn::scale(nn::bmm(q, k, true), scale), -1);
      auto ctx = nn::bmm(attn, v);
      auto merged = nn::reshape(nn::permute(nn::reshape(ctx, {groups, h, n, d}), {0, 2, 1, 3}), {groups * n, c});
      x = layer.norm1(nn::add(x, layer.output(merged)));
      x = layer.norm2(nn::add(x, layer.ff2(nn::relu(layer.ff1(x)))));
    }
    return x;
  }

  /// One logit per row.
  nn::Tensor<T> occupancy_logits(const nn::Tensor<T>& encoded) const { return occupancy_head_(encoded); }

 private:
  FusionConfig cfg_;
  nn::Linear<T> token_fc1_, token_fc2_;
  std::vector<TransformerLayer<T>> layers_;
  nn::Linear<T> occupancy_head_;
};

/// Softmax over [X_1..X_N, 0]; returns all N+1 weights as [G, N+1].
template <class T>
nn::Tensor<T> aggregation_weights(const nn::Tensor<T>& logits_gn) {
  const int g = logits_gn.dim(0);
  return nn::softmax(nn::concat<T>({logits_gn, nn::Tensor<T>::zeros({g, 1})}, 1), -1);
}

/// encoded [G, N, C], logits [G, N] -> [G, C] = sum_i W_i F_i, with the
/// zero-padded (N+1)-th slot contributing nothing.
template <class T>
nn::Tensor<T> aggregate(const nn::Tensor<T>& encoded_gnc, const nn::Tensor<T>& logits_gn) {
  const int g = encoded_gnc.dim(0), n = encoded_gnc.dim(1), c = encoded_gnc.dim(2);
  if (n == 0) return nn::Tensor<T>::zeros({g, c});
  auto w = nn::slice(aggregation_weights(logits_gn), 1, 0, n);
  return nn::reshape(nn::bmm(nn::reshape(w, {g, 1, n}), encoded_gnc), {g, c});
}

template <class T>
nn::Tensor<T> mean_aggregate(const nn::Tensor<T>& encoded_gnc) {
  const int n = encoded_gnc.dim(1);
  if (n == 0) return nn::Tensor<T>::zeros({encoded_gnc.dim(0), encoded_gnc.dim(2)});
  return nn::scale(nn::sum_axis(encoded_gnc, 1), T(1) / T(n));
}

/// View samples of many voxels in CSR layout: voxel v owns rows
/// [offsets[v], offsets[v+1]) of `features`, `dirs` and `depths`.
template <class T>
struct ViewSamples {
  std::vector<std::int64_t> offsets{0};
  nn::Tensor<T> features;  // [S, C]
  std::vector<Vec3> dirs;
  std::vector<double> depths;

  std::size_t voxels() const { return offsets.size() - 1; }
  std::size_t samples() const { return dirs.size(); }
  int count(std::size_t v) const { return int(offsets[v + 1] - offsets[v]); }
};

template <class T>
struct FusionOutput {
  nn::Tensor<T> fused;   // [V, C]; zero for voxels without samples
  nn::Tensor<T> logits;  // [S, 1] in sample order (X, before the sigmoid)
};

/// build_tokens -> encode -> occupancy_logits -> aggregate (or mean).
template <class T>
FusionOutput<T> fuse_voxels(const FusionModel<T>& model, const ViewSamples<T>& batch, Aggregation mode) {
  const int c = model.config().channels;
  const std::size_t nv = batch.voxels();
  FusionOutput<T> out;
  if (batch.samples() == 0) {
    out.fused = nn::Tensor<T>::zeros({int(nv), c});
    out.logits = nn::Tensor<T>::zeros({0, 1});
    return out;
  }
  const auto tokens = model.build_tokens(batch.features, batch.dirs, batch.depths);

  std::map<int, std::vector<std::size_t>> buckets;  // N -> voxels
  for (std::size_t v = 0; v < nv; ++v)
    if (batch.count(v) > 0) buckets[batch.count(v)].push_back(v);

  std::vector<nn::Tensor<T>> fused_parts, logit_parts;
  std::vector<std::int64_t> fused_row(nv, -1);
  std::vector<std::int64_t> logit_row(batch.samples(), -1);
  std::int64_t fused_rows = 0, logit_rows = 0;
  for (const auto& [n, voxels] : buckets) {
    const int g = int(voxels.size());
    std::vector<std::int64_t> off(std::size_t(g) * n + 1);
    std::vector<std::int32_t> rows(std::size_t(g) * n);
    for (int i = 0; i < g; ++i)
      for (int j = 0; j < n; ++j) {
        const std::int64_t sample = batch.offsets[voxels[std::size_t(i)]] + j;
        rows[std::size_t(i) * n + j] = std::int32_t(sample);
        logit_row[std::size_t(sample)] = logit_rows + std::int64_t(i) * n + j;
      }
    for (std::size_t i = 0; i < off.size(); ++i) off[i] = std::int64_t(i);
    std::vector<T> ones(rows.size(), T(1));
    auto bucket_tokens = nn::weighted_gather(tokens, std::move(off), std::move(rows), std::move(ones));
    auto encoded = model.encode(bucket_tokens, g, n);
    auto logits = model.occupancy_logits(encoded);  // [g*n, 1]
    auto enc3 = nn::reshape(encoded, {g, n, c});
    auto fused = mode == Aggregation::occupancy_weighted ? aggregate(enc3, nn::reshape(logits, {g, n}))
                                                         : mean_aggregate(enc3);
    for (int i = 0; i < g; ++i) fused_row[voxels[std::size_t(i)]] = fused_rows + i;
    fused_rows += g;
    logit_rows += std::int64_t(g) * n;
    fused_parts.push_back(fused);
    logit_parts.push_back(logits);
  }

  // Scatter back to voxel order / sample order.
  auto all_fused = nn::concat(fused_parts, 0);
  std::vector<std::int64_t> foff{0};
  std::vector<std::int32_t> frows;
  for (std::size_t v = 0; v < nv; ++v) {
    if (fused_row[v] >= 0) frows.push_back(std::int32_t(fused_row[v]));
    foff.push_back(std::int64_t(frows.size()));
  }
  std::vector<T> fw(frows.size(), T(1));
  out.fused = nn::weighted_gather(all_fused, std::move(foff), std::move(frows), std::move(fw));

  auto all_logits = nn::concat(logit_parts, 0);
  std::vector<std::int64_t> loff(batch.samples() + 1);
  std::vector<std::int32_t> lrows(batch.samples());
  for (std::size_t s = 0; s < batch.samples(); ++s) {
    loff[s] = std::int64_t(s);
    lrows[s] = std::int32_t(logit_row[s]);
  }
  loff.back() = std::int64_t(batch.samples());
  std::vector<T> lw(lrows.size(), T(1));
  out.logits = nn::weighted_gather(all_logits, std::move(loff), std::move(lrows), std::move(lw));
  return out;
}

}  // namespace vortx
