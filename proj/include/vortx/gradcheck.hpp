#pragma once

// Central finite-difference checks of every differentiable op, in double.

#include "vortx/nn/layers.hpp"
#include "vortx/nn/tensor.hpp"
#include "vortx/sparse_cnn.hpp"
#include "vortx/view_fusion.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

namespace vortx {

struct GradcheckResult {
  std::string name;
  double max_error = 0;  // |analytic - numeric| / max(|analytic|, |numeric|, floor)
  double tolerance = 0;
  std::size_t checked = 0;
  bool passed = false;
};

struct GradcheckOptions {
  double eps = 1e-6;
  double floor = 1e-3;
  std::size_t max_entries = 256;  // per input; larger inputs are subsampled
};

using TensorD = nn::Tensor<double>;

/// Checks d/d(inputs) of sum(f(inputs) * r) for a fixed random projection r.
inline GradcheckResult check_gradients(const std::string& name, std::vector<TensorD> inputs,
                                       const std::function<TensorD(const std::vector<TensorD>&)>& f, double tol,
                                       std::uint64_t seed = 1, GradcheckOptions opt = {}) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<double> proj;
  auto objective = [&](const std::vector<TensorD>& in) {
    TensorD y = f(in);
    if (proj.empty()) {
      proj.resize(y.value().size());
      for (auto& p : proj) p = u(rng);
    }
    return nn::sum(nn::mul(y, TensorD::constant(y.shape(), proj)));
  };

  for (auto& x : inputs) x.zero_grad();
  TensorD loss = objective(inputs);
  nn::backward(loss);
  std::vector<std::vector<double>> analytic;
  for (const auto& x : inputs) {
    auto g = x.grad();
    if (g.empty()) g.assign(x.value().size(), 0.0);
    analytic.push_back(std::move(g));
  }

  GradcheckResult r;
  r.name = name;
  r.tolerance = tol;
  nn::NoGrad guard;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    if (!inputs[i].requires_grad()) continue;
    auto& vals = inputs[i].value();
    std::vector<std::size_t> idx(vals.size());
    for (std::size_t j = 0; j < idx.size(); ++j) idx[j] = j;
    if (idx.size() > opt.max_entries) {
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(opt.max_entries);
    }
    for (std::size_t j : idx) {
      const double orig = vals[j];
      vals[j] = orig + opt.eps;
      const double fp = objective(inputs).item();
      vals[j] = orig - opt.eps;
      const double fm = objective(inputs).item();
      vals[j] = orig;
      const double num = (fp - fm) / (2 * opt.eps);
      const double a = analytic[i][j];
      const double err = std::abs(a - num) / std::max({std::abs(a), std::abs(num), opt.floor});
      r.max_error = std::max(r.max_error, err);
      ++r.checked;
    }
  }
  r.passed = r.max_error < tol;
  return r;
}

namespace detail {

/// Entries uniform in [lo, hi] with random sign; keeps inputs away from kinks at 0.
inline std::vector<double> signed_away(std::size_t n, double lo, double hi, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> mag(lo, hi);
  std::bernoulli_distribution sign(0.5);
  std::vector<double> v(n);
  for (auto& x : v) x = sign(rng) ? mag(rng) : -mag(rng);
  return v;
}

inline std::vector<double> uniform(std::size_t n, double lo, double hi, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> d(lo, hi);
  std::vector<double> v(n);
  for (auto& x : v) x = d(rng);
  return v;
}

inline TensorD leaf(nn::Shape s, std::vector<double> v) { return TensorD::leaf(std::move(s), std::move(v)); }

}  // namespace detail

struct GradcheckCase {
  std::string name;
  std::function<GradcheckResult()> run;
};

inline constexpr double kPrimitiveTolerance = 1e-4;
inline constexpr double kCompositeTolerance = 1e-3;

/// All suites. Names are what `gradcheck --op` accepts.
inline std::vector<GradcheckCase> gradcheck_cases() {
  using detail::leaf;
  using detail::signed_away;
  using detail::uniform;
  std::vector<GradcheckCase> cases;
  auto prim = [&](std::string name, std::function<std::vector<TensorD>(std::mt19937_64&)> make,
                  std::function<TensorD(const std::vector<TensorD>&)> f) {
    cases.push_back({name, [name, make, f] {
                       std::mt19937_64 rng(std::hash<std::string>{}(name) & 0xffffffffu);
                       return check_gradients(name, make(rng), f, kPrimitiveTolerance);
                     }});
  };
  auto two = [](nn::Shape a, nn::Shape b) {
    return [a, b](std::mt19937_64& rng) {
      return std::vector<TensorD>{leaf(a, uniform(std::size_t(nn::numel(a)), -1, 1, rng)),
                                  leaf(b, uniform(std::size_t(nn::numel(b)), -1, 1, rng))};
    };
  };
  auto one = [](nn::Shape a, double lo, double hi, bool away = false) {
    return [a, lo, hi, away](std::mt19937_64& rng) {
      const auto n = std::size_t(nn::numel(a));
      return std::vector<TensorD>{leaf(a, away ? signed_away(n, lo, hi, rng) : uniform(n, lo, hi, rng))};
    };
  };

  prim("add", two({3, 4}, {3, 4}), [](const auto& x) { return nn::add(x[0], x[1]); });
  prim("add_broadcast", two({3, 4}, {4}), [](const auto& x) { return nn::add(x[0], x[1]); });
  prim("sub", two({3, 4}, {3, 4}), [](const auto& x) { return nn::sub(x[0], x[1]); });
  prim("mul", two({3, 4}, {3, 4}), [](const auto& x) { return nn::mul(x[0], x[1]); });
  prim("mul_broadcast", two({3, 4}, {4}), [](const auto& x) { return nn::mul(x[0], x[1]); });
  prim("scale", one({5}, -1, 1), [](const auto& x) { return nn::scale(x[0], 2.5); });
  prim("relu", one({4, 5}, 0.05, 1, true), [](const auto& x) { return nn::relu(x[0]); });
  prim("sigmoid", one({4, 5}, -3, 3), [](const auto& x) { return nn::sigmoid(x[0]); });
  prim("tanh", one({4, 5}, -2, 2), [](const auto& x) { return nn::tanh(x[0]); });
  prim("exp", one({4, 5}, -2, 2), [](const auto& x) { return nn::exp(x[0]); });
  prim("log", one({4, 5}, 0.2, 3), [](const auto& x) { return nn::log(x[0]); });
  prim("clamp", one({4, 5}, 0.05, 0.45, true), [](const auto& x) { return nn::clamp(nn::scale(x[0], 3.0), -1.0, 1.0); });
  prim("sum", one({3, 4}, -1, 1), [](const auto& x) { return nn::sum(x[0]); });
  prim("mean", one({3, 4}, -1, 1), [](const auto& x) { return nn::mean(x[0]); });
  prim("sum_axis", one({2, 3, 4}, -1, 1), [](const auto& x) { return nn::sum_axis(x[0], 1); });
  prim("softmax", one({3, 5}, -2, 2), [](const auto& x) { return nn::softmax(x[0], -1); });
  prim("softmax_axis0", one({4, 3}, -2, 2), [](const auto& x) { return nn::softmax(x[0], 0); });
  prim("layer_norm", one({3, 6}, -2, 2), [](const auto& x) { return nn::layer_norm(x[0], 1e-5); });
  prim("reshape", one({3, 4}, -1, 1), [](const auto& x) { return nn::reshape(nn::exp(x[0]), {2, 6}); });
  prim("concat", two({2, 3}, {2, 2}), [](const auto& x) { return nn::exp(nn::concat<double>({x[0], x[1]}, 1)); });
  prim("slice", one({3, 6}, -1, 1), [](const auto& x) { return nn::exp(nn::slice(x[0], 1, 1, 4)); });
  prim("permute", one({2, 3, 4}, -1, 1), [](const auto& x) { return nn::exp(nn::permute(x[0], {2, 0, 1})); });
  prim("matmul", two({3, 4}, {4, 5}), [](const auto& x) { return nn::matmul(x[0], x[1]); });
  prim("bmm", two({2, 3, 4}, {2, 4, 5}), [](const auto& x) { return nn::bmm(x[0], x[1]); });
  prim("bmm_transposed", two({2, 3, 4}, {2, 5, 4}), [](const auto& x) { return nn::bmm(x[0], x[1], true); });
  prim("weighted_gather", one({5, 3}, -1, 1), [](const auto& x) {
    return nn::weighted_gather(x[0], {0, 2, 2, 5}, {0, 4, 1, 1, 3}, {0.5, -1.5, 2.0, 0.25, 1.0});
  });

  prim("bce_loss", one({8, 1}, -3, 3), [](const auto& x) {
    return nn::bce_loss(x[0], {1, 0, 1, 1, 0, 0, 1, 0}, {1, 1, 0, 1, 1, 1, 0, 1});
  });
  prim("log_tsdf_l1", one({6, 1}, 0.1, 0.9, true), [](const auto& x) {
    const std::vector<double> gt{2.0, -2.0, 1.5, 0.0, -1.5, 3.0};
    return nn::log_tsdf_l1(x[0], gt, {1, 1, 1, 0, 1, 1});
  });
  prim("total_loss", two({}, {}), [](const auto& x) {
    return nn::total_loss<double>({x[0], nn::mul(x[1], x[1]), x[0]});
  });

  // composites
  auto composite = [&](std::string name, std::function<GradcheckResult()> run) { cases.push_back({name, run}); };
  for (int weighted = 0; weighted < 2; ++weighted) {
    const std::string name = weighted ? "fusion_weighted" : "fusion_mean";
    composite(name, [name, weighted] {
      std::mt19937_64 rng(7 + weighted);
      nn::ParameterSet<double> params;
      FusionConfig cfg;
      cfg.channels = 4;
      cfg.heads = 2;
      cfg.layers = 2;
      cfg.freq_bands = 2;
      FusionModel<double> model(params, "f.", cfg, rng);
      const int g = 2, n = 3;
      std::vector<Vec3> dirs;
      std::vector<double> depths;
      std::uniform_real_distribution<double> u(-1, 1);
      for (int i = 0; i < g * n; ++i) {
        Vec3 d(u(rng), u(rng), 1.0);
        dirs.push_back(d.normalized());
        depths.push_back(0.5 + 0.5 * (u(rng) + 1));
      }
      std::vector<TensorD> inputs{detail::leaf({g * n, 4}, detail::uniform(std::size_t(g * n * 4), -1, 1, rng))};
      for (auto& e : params.entries()) inputs.push_back(e.second);
      return check_gradients(
          name, inputs,
          [&](const std::vector<TensorD>& x) {
            auto tokens = model.build_tokens(x[0], dirs, depths);
            auto enc = model.encode(tokens, g, n);
            auto enc3 = nn::reshape(enc, {g, n, 4});
            if (!weighted) return mean_aggregate(enc3);
            auto logits = nn::reshape(model.occupancy_logits(enc), {g, n});
            return aggregate(enc3, logits);
          },
          kCompositeTolerance, 11 + weighted);
    });
  }
  composite("sparse_conv3", [] {
    std::mt19937_64 rng(3);
    std::vector<Coord> coords;
    std::bernoulli_distribution keep(0.5);
    for (int x = 0; x < 4; ++x)
      for (int y = 0; y < 4; ++y)
        for (int z = 0; z < 3; ++z)
          if (keep(rng)) coords.push_back({x, y, z});
    const NeighborTable nb = build_neighbors(coords);
    const int v = int(coords.size()), cin = 3, cout = 2;
    std::vector<TensorD> inputs{
        detail::leaf({v, cin}, detail::uniform(std::size_t(v * cin), -1, 1, rng)),
        detail::leaf({kKernelTaps, cin, cout}, detail::uniform(std::size_t(kKernelTaps * cin * cout), -1, 1, rng)),
        detail::leaf({cout}, detail::uniform(std::size_t(cout), -1, 1, rng))};
    return check_gradients("sparse_conv3", inputs,
                           [&](const std::vector<TensorD>& x) { return nn::sparse_conv3(x[0], nb, x[1], x[2]); },
                           kCompositeTolerance);
  });
  composite("linear_layernorm", [] {
    std::mt19937_64 rng(5);
    nn::ParameterSet<double> params;
    nn::Linear<double> lin(params, "lin", 4, 3, rng);
    nn::LayerNorm<double> ln(params, "ln", 3);
    for (auto& e : params.entries())
      for (auto& val : e.second.value()) val += 0.1 * std::uniform_real_distribution<double>(-1, 1)(rng);
    std::vector<TensorD> inputs{detail::leaf({5, 4}, detail::uniform(20, -1, 1, rng))};
    for (auto& e : params.entries()) inputs.push_back(e.second);
    return check_gradients("linear_layernorm", inputs,
                           [&](const std::vector<TensorD>& x) { return ln(lin(x[0])); }, kCompositeTolerance);
  });
  return cases;
}

}  // namespace vortx
