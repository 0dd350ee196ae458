#pragma once

#include "vortx/nn/optim.hpp"
#include "vortx/nn/tensor.hpp"

#include <string>

namespace vortx::nn {

/// y = x W + b with W stored [in, out].
template <class T>
struct Linear {
  Tensor<T> weight, bias;

  Linear() = default;
  template <class Rng>
  Linear(ParameterSet<T>& params, const std::string& name, int in, int out, Rng& rng)
      : weight(params.add(name + ".weight", {in, out}, xavier_uniform<T>(std::int64_t(in) * out, in, out, rng))),
        bias(params.add(name + ".bias", {out}, std::vector<T>(std::size_t(out), T(0)))) {}

  int in() const { return weight.dim(0); }
  int out() const { return weight.dim(1); }
  Tensor<T> operator()(const Tensor<T>& x) const { return add(matmul(x, weight), bias); }
};

/// Layer normalization over the last axis followed by a per-channel affine map.
template <class T>
struct LayerNorm {
  Tensor<T> gain, shift;

  LayerNorm() = default;
  LayerNorm(ParameterSet<T>& params, const std::string& name, int channels)
      : gain(params.add(name + ".gain", {channels}, std::vector<T>(std::size_t(channels), T(1)))),
        shift(params.add(name + ".shift", {channels}, std::vector<T>(std::size_t(channels), T(0)))) {}

  Tensor<T> operator()(const Tensor<T>& x) const { return add(mul(layer_norm(x, T(1e-5)), gain), shift); }
};

}  // namespace vortx::nn
