#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <cstdint>
#include <cstdlib>
#include <stdexcept>
#include <string>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace vortx {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Mat4 = Eigen::Matrix4d;

/// Base class for every error the library reports.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class GeometryError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t offset)
      : Error(what + " (at byte " + std::to_string(offset) + ")"), offset_(offset) {}
  std::size_t offset() const { return offset_; }

 private:
  std::size_t offset_;
};

/// Worker cap from VORTX_THREADS (unset or invalid means "use the runtime default").
inline int worker_count() {
  static const int count = [] {
    int hw = 1;
#ifdef _OPENMP
    hw = omp_get_max_threads();
#endif
    if (const char* env = std::getenv("VORTX_THREADS")) {
      const int n = std::atoi(env);
      if (n >= 1) return n < hw ? n : hw;
    }
    return hw;
  }();
  return count;
}

/// Static-schedule parallel loop. Each index is processed by exactly one
/// thread, so any body that writes only to slots owned by its index gives
/// results independent of the thread count.
template <class Fn>
inline void parallel_for(std::int64_t n, Fn&& fn, std::int64_t min_parallel = 256) {
#ifdef _OPENMP
  const int workers = worker_count();
  if (workers > 1 && n >= min_parallel) {
#pragma omp parallel for schedule(static) num_threads(workers)
    for (std::int64_t i = 0; i < n; ++i) fn(i);
    return;
  }
#endif
  for (std::int64_t i = 0; i < n; ++i) fn(i);
}

}  // namespace vortx
