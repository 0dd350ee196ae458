#pragma once

// Parameters, Adam with linear warm-up, and the checkpoint archive.

#include "vortx/common.hpp"
#include "vortx/nn/tensor.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <functional>
#include <map>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace vortx::nn {

/// Registration-ordered named leaves.
template <class T>
class ParameterSet {
 public:
  Tensor<T>& add(const std::string& name, Shape shape, std::vector<T> data) {
    if (index_.count(name)) throw Error("duplicate parameter '" + name + "'");
    index_[name] = entries_.size();
    entries_.push_back({name, Tensor<T>::leaf(std::move(shape), std::move(data))});
    return entries_.back().second;
  }

  const Tensor<T>& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw Error("unknown parameter '" + name + "'");
    return entries_[it->second].second;
  }
  Tensor<T>& get(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw Error("unknown parameter '" + name + "'");
    return entries_[it->second].second;
  }
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  std::vector<std::pair<std::string, Tensor<T>>>& entries() { return entries_; }
  const std::vector<std::pair<std::string, Tensor<T>>>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

  std::int64_t scalar_count() const {
    std::int64_t n = 0;
    for (const auto& e : entries_) n += e.second.numel();
    return n;
  }

  void zero_grad() {
    for (auto& e : entries_) e.second.zero_grad();
  }

 private:
  std::vector<std::pair<std::string, Tensor<T>>> entries_;
  std::map<std::string, std::size_t> index_;
};

/// Uniform in +-sqrt(6 / (fan_in + fan_out)).
template <class T, class Rng>
std::vector<T> xavier_uniform(std::int64_t count, int fan_in, int fan_out, Rng& rng) {
  const double bound = std::sqrt(6.0 / double(fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<T> out(static_cast<std::size_t>(count));
  for (auto& v : out) v = T(dist(rng));
  return out;
}

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int warmup_steps = 2000;
};

/// Learning rate ramped linearly from 0 over the warm-up window (step counts from 1).
inline double warmup_lr(double lr, long step, int warmup_steps) {
  if (warmup_steps <= 0) return lr;
  return lr * std::min(1.0, double(step) / double(warmup_steps));
}

/// One bias-corrected Adam update of a flat parameter array.
template <class T>
void adam_step(std::span<T> param, std::span<const T> grad, std::span<double> m, std::span<double> v, double lr_eff,
               long step, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8) {
  const double c1 = 1.0 - std::pow(beta1, double(step));
  const double c2 = 1.0 - std::pow(beta2, double(step));
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = grad.empty() ? 0.0 : double(grad[i]);
    m[i] = beta1 * m[i] + (1 - beta1) * g;
    v[i] = beta2 * v[i] + (1 - beta2) * g * g;
    const double mh = m[i] / c1, vh = v[i] / c2;
    param[i] = T(double(param[i]) - lr_eff * mh / (std::sqrt(vh) + eps));
  }
}

template <class T>
class Adam {
 public:
  explicit Adam(AdamConfig cfg) : cfg_(cfg) {}

  long steps() const { return step_; }
  double current_lr() const { return warmup_lr(cfg_.lr, step_, cfg_.warmup_steps); }
  void set_lr(double lr) { cfg_.lr = lr; }

  /// Updates every parameter accepted by `trainable`; parameters without a
  /// gradient this step are treated as having zero gradient.
  void step(ParameterSet<T>& params, const std::function<bool(const std::string&)>& trainable = {}) {
    ++step_;
    const double lr = current_lr();
    for (auto& [name, p] : params.entries()) {
      if (trainable && !trainable(name)) continue;
      auto& st = state_[name];
      if (st.m.empty()) {
        st.m.assign(p.value().size(), 0.0);
        st.v.assign(p.value().size(), 0.0);
      }
      const std::span<const T> g = p.grad().empty() ? std::span<const T>() : std::span<const T>(p.grad());
      adam_step<T>(std::span<T>(p.value()), g, st.m, st.v, lr, step_, cfg_.beta1, cfg_.beta2, cfg_.eps);
    }
  }

 private:
  struct Moments {
    std::vector<double> m, v;
  };
  AdamConfig cfg_;
  long step_ = 0;
  std::map<std::string, Moments> state_;
};

// -- checkpoint archive -------------------------------------------------------
//
// Layout (all integers little-endian u32, values little-endian float32):
//   "VXCKPT01" | version | meta_len | meta bytes | count |
//   count x { name_len | name | ndim | dims... | data... }

struct NamedArray {
  std::string name;
  Shape shape;
  std::vector<float> data;
};

struct Archive {
  static constexpr char kMagic[9] = "VXCKPT01";
  static constexpr std::uint32_t kVersion = 1;

  std::string meta;
  std::vector<NamedArray> arrays;

  const NamedArray* find(const std::string& name) const {
    for (const auto& a : arrays)
      if (a.name == name) return &a;
    return nullptr;
  }
};

namespace detail {
inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}
inline void put_f32(std::string& out, float f) {
  std::uint32_t bits;
  std::memcpy(&bits, &f, 4);
  put_u32(out, bits);
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : b_(bytes) {}
  std::size_t offset() const { return pos_; }
  void need(std::size_t n, const char* what) const {
    if (b_.size() - pos_ < n) throw ParseError(std::string("truncated archive reading ") + what, pos_);
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(std::uint8_t(b_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  float f32() {
    const std::uint32_t bits = u32("value");
    float f;
    std::memcpy(&f, &bits, 4);
    return f;
  }
  std::string bytes(std::size_t n, const char* what) {
    need(n, what);
    std::string s = b_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == b_.size(); }

 private:
  const std::string& b_;
  std::size_t pos_ = 0;
};
}  // namespace detail

inline std::string encode_archive(const Archive& a) {
  std::string out(Archive::kMagic, 8);
  detail::put_u32(out, Archive::kVersion);
  detail::put_u32(out, std::uint32_t(a.meta.size()));
  out += a.meta;
  detail::put_u32(out, std::uint32_t(a.arrays.size()));
  for (const auto& arr : a.arrays) {
    if (std::int64_t(arr.data.size()) != numel(arr.shape)) throw ShapeError("archive: '" + arr.name + "' size mismatch");
    detail::put_u32(out, std::uint32_t(arr.name.size()));
    out += arr.name;
    detail::put_u32(out, std::uint32_t(arr.shape.size()));
    for (int d : arr.shape) detail::put_u32(out, std::uint32_t(d));
    for (float f : arr.data) detail::put_f32(out, f);
  }
  return out;
}

inline Archive decode_archive(const std::string& bytes) {
  detail::Reader r(bytes);
  if (r.bytes(8, "magic") != std::string(Archive::kMagic, 8)) throw ParseError("not a checkpoint archive", 0);
  const std::uint32_t version = r.u32("version");
  if (version != Archive::kVersion) throw ParseError("unsupported archive version " + std::to_string(version), 8);
  Archive a;
  a.meta = r.bytes(r.u32("meta length"), "meta");
  const std::uint32_t count = r.u32("array count");
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedArray arr;
    arr.name = r.bytes(r.u32("name length"), "name");
    const std::uint32_t ndim = r.u32("rank");
    if (ndim > 8) throw ParseError("implausible rank for '" + arr.name + "'", r.offset());
    for (std::uint32_t d = 0; d < ndim; ++d) arr.shape.push_back(int(r.u32("dim")));
    const std::int64_t n = numel(arr.shape);
    r.need(std::size_t(n) * 4, "values");
    arr.data.resize(std::size_t(n));
    for (auto& f : arr.data) f = r.f32();
    a.arrays.push_back(std::move(arr));
  }
  if (!r.done()) throw ParseError("trailing bytes after archive", r.offset());
  return a;
}

inline void save_archive(const std::string& path, const Archive& a) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path);
  const std::string bytes = encode_archive(a);
  out.write(bytes.data(), std::streamsize(bytes.size()));
}

inline Archive load_archive(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_archive(bytes);
}

template <class T>
void append_parameters(Archive& a, const ParameterSet<T>& params) {
  for (const auto& [name, p] : params.entries()) {
    NamedArray arr{name, p.shape(), {}};
    arr.data.reserve(p.value().size());
    for (T v : p.value()) arr.data.push_back(float(v));
    a.arrays.push_back(std::move(arr));
  }
}

/// Copies every registered parameter out of the archive; all must be present with matching shapes.
template <class T>
void load_parameters(const Archive& a, ParameterSet<T>& params) {
  for (auto& [name, p] : params.entries()) {
    const NamedArray* arr = a.find(name);
    if (!arr) throw Error("checkpoint lacks parameter '" + name + "'");
    if (arr->shape != p.shape()) shape_fail(("checkpoint '" + name + "'").c_str(), p.shape(), arr->shape);
    for (std::size_t i = 0; i < arr->data.size(); ++i) p.value()[i] = T(arr->data[i]);
  }
}

}  // namespace vortx::nn
