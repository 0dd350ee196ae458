#pragma once

// Submanifold sparse 3x3x3 convolution and the per-level networks.

#include "vortx/common.hpp"
#include "vortx/grid.hpp"
#include "vortx/nn/layers.hpp"
#include "vortx/nn/tensor.hpp"

#include <array>
#include <memory>
#include <string>
#include <vector>

namespace vortx {

/// Offset k enumerates {-1,0,1}^3 lexicographically: k = (dx+1)*9 + (dy+1)*3 + (dz+1).
inline constexpr int kKernelTaps = 27;

inline Coord kernel_offset(int k) { return {k / 9 - 1, (k / 3) % 3 - 1, k % 3 - 1}; }
inline constexpr int opposite_tap(int k) { return kKernelTaps - 1 - k; }

/// For each row v and tap k, the row of coords[v] + offset(k), or -1.
struct NeighborTable {
  std::size_t rows = 0;
  std::vector<std::int32_t> index;  // rows * 27

  std::int32_t at(std::size_t v, int k) const { return index[v * kKernelTaps + std::size_t(k)]; }
};

inline NeighborTable build_neighbors(const std::vector<Coord>& coords) {
  std::unordered_map<std::uint64_t, std::int32_t, PackedHash> lookup;
  lookup.reserve(coords.size());
  for (std::size_t i = 0; i < coords.size(); ++i) lookup.emplace(pack(coords[i]), std::int32_t(i));
  NeighborTable t;
  t.rows = coords.size();
  t.index.assign(coords.size() * kKernelTaps, -1);
  parallel_for(std::int64_t(coords.size()), [&](std::int64_t v) {
    for (int k = 0; k < kKernelTaps; ++k) {
      auto it = lookup.find(pack(coords[std::size_t(v)] + kernel_offset(k)));
      if (it != lookup.end()) t.index[std::size_t(v) * kKernelTaps + std::size_t(k)] = it->second;
    }
  });
  return t;
}

template <class P>
NeighborTable build_neighbors(const SparseVoxelGrid<P>& g) {
  return build_neighbors(g.coords());
}

namespace nn {

/// x [V, Cin], weight [27, Cin, Cout], bias [Cout] -> [V, Cout] on the same rows.
template <class T>
Tensor<T> sparse_conv3(const Tensor<T>& x, const NeighborTable& nb, const Tensor<T>& weight, const Tensor<T>& bias) {
  if (x.rank() != 2 || weight.rank() != 3 || weight.dim(0) != kKernelTaps || weight.dim(1) != x.dim(1))
    shape_fail("sparse_conv3", x.shape(), weight.shape());
  if (bias.rank() != 1 || bias.dim(0) != weight.dim(2)) shape_fail("sparse_conv3", weight.shape(), bias.shape());
  if (std::size_t(x.dim(0)) != nb.rows)
    throw ShapeError("sparse_conv3: " + std::to_string(x.dim(0)) + " rows but neighbor table has " +
                     std::to_string(nb.rows));
  const int ci = x.dim(1), co = weight.dim(2);
  const std::int64_t nv = x.dim(0);
  const auto& xv = x.value();
  const auto& wv = weight.value();
  const auto& bv = bias.value();
  std::vector<T> out(std::size_t(nv * co));
  parallel_for(nv, [&](std::int64_t v) {
    T* o = &out[std::size_t(v * co)];
    for (int j = 0; j < co; ++j) o[j] = bv[std::size_t(j)];
    for (int k = 0; k < kKernelTaps; ++k) {
      const std::int32_t u = nb.at(std::size_t(v), k);
      if (u < 0) continue;
      const T* xu = &xv[std::size_t(u) * ci];
      const T* wk = &wv[std::size_t(k) * ci * co];
      for (int i = 0; i < ci; ++i) {
        const T a = xu[i];
        if (a == T(0)) continue;
        const T* wr = wk + std::size_t(i) * co;
        for (int j = 0; j < co; ++j) o[j] += a * wr[j];
      }
    }
  }, 64);

  auto xn = x.node(), wn = weight.node(), bn = bias.node();
  auto table = std::make_shared<const NeighborTable>(nb);
  return make_op<T>({int(nv), co}, std::move(out), {x, weight, bias}, [xn, wn, bn, table, ci, co, nv](Node<T>& self) {
    const auto& g = self.grad;
    const auto& xv = xn->value;
    const auto& wv = wn->value;
    if (bn->requires_grad) {
      auto& gb = bn->ensure_grad();
      for (std::int64_t v = 0; v < nv; ++v)
        for (int j = 0; j < co; ++j) gb[std::size_t(j)] += g[std::size_t(v * co + j)];
    }
    if (wn->requires_grad) {
      auto& gw = wn->ensure_grad();
      parallel_for(kKernelTaps, [&](std::int64_t k) {
        T* gk = &gw[std::size_t(k) * ci * co];
        for (std::int64_t v = 0; v < nv; ++v) {
          const std::int32_t u = table->at(std::size_t(v), int(k));
          if (u < 0) continue;
          const T* xu = &xv[std::size_t(u) * ci];
          const T* gv = &g[std::size_t(v * co)];
          for (int i = 0; i < ci; ++i) {
            const T a = xu[i];
            if (a == T(0)) continue;
            for (int j = 0; j < co; ++j) gk[std::size_t(i) * co + j] += a * gv[j];
          }
        }
      }, 2);
    }
    if (xn->requires_grad) {
      // Row u receives from every v with nb[v][k] = u, i.e. v = nb[u][opposite(k)].
      auto& gx = xn->ensure_grad();
      parallel_for(nv, [&](std::int64_t u) {
        T* d = &gx[std::size_t(u) * ci];
        for (int k = 0; k < kKernelTaps; ++k) {
          const std::int32_t v = table->at(std::size_t(u), opposite_tap(k));
          if (v < 0) continue;
          const T* gv = &g[std::size_t(v) * co];
          const T* wk = &wv[std::size_t(k) * ci * co];
          for (int i = 0; i < ci; ++i) {
            const T* wr = wk + std::size_t(i) * co;
            T acc = T(0);
            for (int j = 0; j < co; ++j) acc += wr[j] * gv[j];
            d[i] += acc;
          }
        }
      }, 64);
    }
  });
}

}  // namespace nn

struct SparseConvLayer {
  template <class T>
  struct Params {
    nn::Tensor<T> weight, bias;
  };
};

enum class HeadKind { occupancy, tsdf };

struct LevelNetworkConfig {
  int channels = 8;         // F_MV width
  int parent_channels = 0;  // >0 concatenates the parent level's hidden features
  int layers = 3;
  HeadKind head = HeadKind::occupancy;
};

template <class T>
struct LevelOutput {
  nn::Tensor<T> hidden;      // [V, C] after the last conv + relu
  nn::Tensor<T> prediction;  // [V, 1]: logits, or TSDF in [-1, 1]
};

template <class T>
class LevelNetwork {
 public:
  LevelNetwork() = default;

  template <class Rng>
  LevelNetwork(nn::ParameterSet<T>& params, const std::string& prefix, LevelNetworkConfig cfg, Rng& rng) : cfg_(cfg) {
    int in = cfg.channels + cfg.parent_channels;
    const int c = cfg.channels;
    for (int l = 0; l < cfg.layers; ++l) {
      const std::string p = prefix + "conv" + std::to_string(l);
      SparseConvLayer::Params<T> layer;
      layer.weight = params.add(p + ".weight", {kKernelTaps, in, c},
                                nn::xavier_uniform<T>(std::int64_t(kKernelTaps) * in * c, kKernelTaps * in, c, rng));
      layer.bias = params.add(p + ".bias", {c}, std::vector<T>(std::size_t(c), T(0)));
      convs_.push_back(layer);
      in = c;
    }
    head_ = nn::Linear<T>(params, prefix + "head", in, 1, rng);
  }

  const LevelNetworkConfig& config() const { return cfg_; }

  /// features [V, C] (plus parent features [V, Cp] when configured).
  LevelOutput<T> operator()(const nn::Tensor<T>& features, const NeighborTable& nb,
                            const nn::Tensor<T>& parent = {}) const {
    nn::Tensor<T> x = features;
    if (cfg_.parent_channels > 0) {
      if (!parent.defined()) throw Error("level network: parent features required");
      x = nn::concat<T>({features, parent}, 1);
    }
    for (const auto& conv : convs_) x = nn::relu(nn::sparse_conv3(x, nb, conv.weight, conv.bias));
    LevelOutput<T> out;
    out.hidden = x;
    auto y = head_(x);
    if (cfg_.head == HeadKind::tsdf) y = nn::clamp(nn::scale(nn::tanh(y), T(1.05)), T(-1), T(1));
    out.prediction = y;
    return out;
  }

 private:
  LevelNetworkConfig cfg_;
  std::vector<SparseConvLayer::Params<T>> convs_;
  nn::Linear<T> head_;
};

}  // namespace vortx
