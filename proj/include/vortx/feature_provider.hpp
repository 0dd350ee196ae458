#pragma once

// Toy stand-in for a 2D feature backbone: per level, non-overlapping patches
// at the level's stride mapped to C channels by a trainable affine map.

#include "vortx/common.hpp"
#include "vortx/grid.hpp"
#include "vortx/image.hpp"
#include "vortx/nn/layers.hpp"
#include "vortx/nn/optim.hpp"
#include "vortx/nn/tensor.hpp"

#include <array>
#include <cmath>
#include <string>
#include <vector>

namespace vortx {

inline constexpr int feature_stride(Level l) {
  switch (l) {
    case Level::coarse: return 16;
    case Level::medium: return 8;
    case Level::fine: return 4;
  }
  return 0;
}

template <class T>
struct FeatureMap {
  int width = 0, height = 0, stride = 1;
  nn::Tensor<T> data;  // [height * width, C], row-major cells

  int channels() const { return data.dim(1); }
};

template <class T>
struct FeaturePyramid {
  int image_width = 0, image_height = 0;
  std::array<FeatureMap<T>, 3> maps;

  const FeatureMap<T>& at(Level l) const { return maps[std::size_t(l)]; }
};

/// Bilinear taps into a feature map: up to 4 (cell, weight) pairs.
struct FeatureTaps {
  std::array<std::int32_t, 4> cell{};
  std::array<double, 4> weight{};
  int count = 0;
};

/// Samples at (u/stride - 0.5, v/stride - 0.5) with edge clamping. Returns
/// false when (u, v) lies outside [0, W) x [0, H).
inline bool feature_taps(int map_w, int map_h, int stride, int image_w, int image_h, double u, double v,
                         FeatureTaps& taps) {
  taps.count = 0;
  if (!(u >= 0 && v >= 0 && u < image_w && v < image_h)) return false;
  const double x = std::clamp(u / stride - 0.5, 0.0, double(map_w - 1));
  const double y = std::clamp(v / stride - 0.5, 0.0, double(map_h - 1));
  const int x0 = std::min(int(std::floor(x)), map_w - 1), y0 = std::min(int(std::floor(y)), map_h - 1);
  const int x1 = std::min(x0 + 1, map_w - 1), y1 = std::min(y0 + 1, map_h - 1);
  const double fx = x - x0, fy = y - y0;
  const int xs[4] = {x0, x1, x0, x1}, ys[4] = {y0, y0, y1, y1};
  const double ws[4] = {(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy};
  for (int i = 0; i < 4; ++i) {
    if (ws[i] == 0) continue;
    taps.cell[std::size_t(taps.count)] = std::int32_t(ys[i] * map_w + xs[i]);
    taps.weight[std::size_t(taps.count)] = ws[i];
    ++taps.count;
  }
  return true;
}

template <class T>
bool feature_taps(const FeatureMap<T>& m, int image_w, int image_h, double u, double v, FeatureTaps& taps) {
  return feature_taps(m.width, m.height, m.stride, image_w, image_h, u, v, taps);
}

/// Non-differentiable single lookup; nullopt-style via `ok`.
template <class T>
std::vector<T> sample_feature(const FeaturePyramid<T>& p, Level l, double u, double v, bool* ok = nullptr) {
  const auto& m = p.at(l);
  FeatureTaps taps;
  const bool valid = feature_taps(m, p.image_width, p.image_height, u, v, taps);
  if (ok) *ok = valid;
  const int c = m.channels();
  std::vector<T> out(std::size_t(c), T(0));
  if (!valid) return out;
  for (int t = 0; t < taps.count; ++t) {
    const T* row = &m.data.value()[std::size_t(taps.cell[std::size_t(t)]) * c];
    for (int j = 0; j < c; ++j) out[std::size_t(j)] += T(taps.weight[std::size_t(t)]) * row[j];
  }
  return out;
}

/// Patches of `stride` x `stride` pixels, edge-replicated, as [cells, stride^2].
inline std::vector<double> extract_patches(const Image& img, int stride, int& map_w, int& map_h) {
  map_w = std::max(1, (img.width + stride - 1) / stride);
  map_h = std::max(1, (img.height + stride - 1) / stride);
  const int p = stride * stride;
  std::vector<double> out(std::size_t(map_w) * map_h * p);
  for (int cy = 0; cy < map_h; ++cy)
    for (int cx = 0; cx < map_w; ++cx) {
      double* row = &out[(std::size_t(cy) * map_w + cx) * p];
      for (int dy = 0; dy < stride; ++dy)
        for (int dx = 0; dx < stride; ++dx) {
          const int x = std::clamp(cx * stride + dx, 0, std::max(img.width - 1, 0));
          const int y = std::clamp(cy * stride + dy, 0, std::max(img.height - 1, 0));
          row[dy * stride + dx] = img.width > 0 && img.height > 0 ? double(img.at(x, y)) : 0.0;
        }
    }
  return out;
}

template <class T>
class FeatureProvider {
 public:
  FeatureProvider() = default;

  template <class Rng>
  FeatureProvider(nn::ParameterSet<T>& params, const std::array<int, 3>& channels, Rng& rng) {
    for (Level l : kLevels) {
      const int s = feature_stride(l);
      embed_[std::size_t(l)] =
          nn::Linear<T>(params, std::string("features.") + level_name(l), s * s, channels[std::size_t(l)], rng);
    }
  }

  int channels(Level l) const { return embed_[std::size_t(l)].out(); }

  /// With `track_grad` false the maps are detached from the parameters.
  FeaturePyramid<T> extract(const Image& img, bool track_grad = true) const {
    FeaturePyramid<T> p;
    p.image_width = img.width;
    p.image_height = img.height;
    for (Level l : kLevels) {
      const int s = feature_stride(l);
      auto& m = p.maps[std::size_t(l)];
      m.stride = s;
      const auto patches = extract_patches(img, s, m.width, m.height);
      std::vector<T> pv(patches.begin(), patches.end());
      // Centered inputs keep the bias from dominating at init.
      for (auto& v : pv) v -= T(0.5);
      auto x = nn::Tensor<T>::constant({m.width * m.height, s * s}, std::move(pv));
      const auto& lin = embed_[std::size_t(l)];
      if (track_grad) {
        m.data = lin(x);
      } else {
        auto w = nn::Tensor<T>::constant(lin.weight.shape(), lin.weight.value());
        auto b = nn::Tensor<T>::constant(lin.bias.shape(), lin.bias.value());
        m.data = nn::add(nn::matmul(x, w), b);
      }
    }
    return p;
  }

 private:
  std::array<nn::Linear<T>, 3> embed_;
};

/// Precomputed pyramid: arrays named `coarse`, `medium`, `fine`, each [h, w, C].
template <class T>
FeaturePyramid<T> pyramid_from_archive(const nn::Archive& a, int image_width, int image_height) {
  FeaturePyramid<T> p;
  p.image_width = image_width;
  p.image_height = image_height;
  for (Level l : kLevels) {
    const auto* arr = a.find(level_name(l));
    if (!arr) throw Error(std::string("feature archive: missing array '") + level_name(l) + "'");
    if (arr->shape.size() != 3) throw ShapeError(std::string("feature archive: '") + level_name(l) + "' must be 3-D");
    auto& m = p.maps[std::size_t(l)];
    m.stride = feature_stride(l);
    m.height = arr->shape[0];
    m.width = arr->shape[1];
    const int ew = std::max(1, (image_width + m.stride - 1) / m.stride);
    const int eh = std::max(1, (image_height + m.stride - 1) / m.stride);
    if (m.width != ew || m.height != eh)
      throw ShapeError(std::string("feature archive: '") + level_name(l) + "' is " + nn::shape_str(arr->shape) +
                       ", expected " + std::to_string(eh) + "x" + std::to_string(ew));
    m.data = nn::Tensor<T>::constant({m.height * m.width, arr->shape[2]},
                                     std::vector<T>(arr->data.begin(), arr->data.end()));
  }
  return p;
}

template <class T>
nn::Archive pyramid_to_archive(const FeaturePyramid<T>& p) {
  nn::Archive a;
  for (Level l : kLevels) {
    const auto& m = p.at(l);
    nn::NamedArray arr;
    arr.name = level_name(l);
    arr.shape = {m.height, m.width, m.channels()};
    arr.data.assign(m.data.value().begin(), m.data.value().end());
    a.arrays.push_back(std::move(arr));
  }
  return a;
}

}  // namespace vortx
