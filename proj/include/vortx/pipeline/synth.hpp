#pragma once

// Synthetic rooms: analytic SDF scenes rendered by sphere tracing.

#include "vortx/common.hpp"
#include "vortx/geom.hpp"
#include "vortx/grid.hpp"
#include "vortx/image.hpp"

#include <json.hpp>

#include <cmath>
#include <random>
#include <string>
#include <vector>

namespace vortx {

struct SdfObject {
  enum class Kind { sphere, box } kind = Kind::sphere;
  Vec3 center = Vec3::Zero();
  double radius = 0.3;             // sphere
  Vec3 half = Vec3::Constant(0.2);  // box
};

struct TrajectorySpec {
  int frames = 72;
  double deg_per_frame = 5;
  double radius = 0.5;     // orbit radius around the room center
  double height = 1.0;     // camera height above the floor
  double look_drop = 0.5;  // the look-at point sits this much below the camera
};

struct ImageSpec {
  int width = 160, height = 120;
  double fx = 120, fy = 120;
};

struct SceneSpec {
  Vec3 room = Vec3(3, 3, 2.2);  // room occupies [0, room]
  std::vector<SdfObject> objects;
  TrajectorySpec trajectory;
  ImageSpec image;
};

// -- analytic distances --------------------------------------------------------------

inline double sd_box(const Vec3& p, const Vec3& center, const Vec3& half) {
  const Vec3 q = (p - center).cwiseAbs() - half;
  return q.cwiseMax(0.0).norm() + std::min(q.maxCoeff(), 0.0);
}

inline double sd_object(const SdfObject& o, const Vec3& p) {
  return o.kind == SdfObject::Kind::sphere ? (p - o.center).norm() - o.radius : sd_box(p, o.center, o.half);
}

/// Positive in free space: the room interior minus the objects.
inline double scene_sdf(const SceneSpec& s, const Vec3& p) {
  double d = -sd_box(p, 0.5 * s.room, 0.5 * s.room);
  for (const auto& o : s.objects) d = std::min(d, sd_object(o, p));
  return d;
}

inline Vec3 scene_normal(const SceneSpec& s, const Vec3& p) {
  constexpr double h = 1e-4;
  Vec3 n;
  for (int a = 0; a < 3; ++a) {
    Vec3 e = Vec3::Zero();
    e[a] = h;
    n[a] = scene_sdf(s, p + e) - scene_sdf(s, p - e);
  }
  const double len = n.norm();
  return len > 0 ? Vec3(n / len) : Vec3(Vec3::UnitZ());
}

struct TraceResult {
  bool hit = false;
  double t = 0;  // distance along the unit ray
  int steps = 0;
};

/// Sphere tracing: converged when |SDF| < 1e-4; 256 steps without converging is a miss.
template <class Sdf>
TraceResult sphere_trace(const Sdf& sdf, const Vec3& origin, const Vec3& dir, double t_max = 50.0) {
  TraceResult r;
  double t = 0;
  for (int i = 0; i < 256; ++i) {
    const double d = sdf(origin + t * dir);
    r.steps = i + 1;
    if (std::abs(d) < 1e-4) {
      r.hit = true;
      r.t = t;
      return r;
    }
    t += d;
    if (t > t_max || t < 0) break;
  }
  return r;
}

/// Smooth procedural albedo so that multi-view matching has texture to lock onto.
inline double albedo(const Vec3& p) {
  const double a = std::sin(7.3 * p.x() + 1.1) * std::sin(6.1 * p.y() + 0.4) * std::sin(5.7 * p.z() + 2.3);
  return 0.8 + 0.2 * a;
}

struct RenderedView {
  DepthMap depth;
  Image shading;
};

/// Depth is camera-frame z. Shading is Lambertian under a point light at the
/// camera center with distance falloff, so intensity varies with depth.
inline RenderedView render_view(const SceneSpec& s, const Intrinsics& k, const Pose& pose) {
  RenderedView out{DepthMap(k.width, k.height), Image(k.width, k.height)};
  auto sdf = [&](const Vec3& p) { return scene_sdf(s, p); };
  parallel_for(std::int64_t(k.height), [&](std::int64_t y) {
    for (int x = 0; x < k.width; ++x) {
      const Vec3 dc = Vec3((x - k.cx) / k.fx, (double(y) - k.cy) / k.fy, 1.0).normalized();
      const Vec3 dir = pose.R * dc;
      const auto tr = sphere_trace(sdf, pose.center(), dir);
      if (!tr.hit) continue;
      const Vec3 p = pose.center() + tr.t * dir;
      const double z = tr.t * dc.z();
      out.depth.at(x, int(y)) = float(z);
      const double cosine = std::max(0.0, scene_normal(s, p).dot(-dir));
      const double falloff = 2.0 / (1.0 + (tr.t / 1.5) * (tr.t / 1.5));
      out.shading.at(x, int(y)) = float(std::clamp(albedo(p) * cosine * falloff, 0.0, 1.0));
    }
  }, 1);
  return out;
}

inline Intrinsics scene_intrinsics(const SceneSpec& s) {
  return {s.image.fx, s.image.fy, (s.image.width - 1) / 2.0, (s.image.height - 1) / 2.0, s.image.width,
          s.image.height};
}

/// Orbit around the room center; each camera looks across the room.
inline std::vector<Pose> scene_trajectory(const SceneSpec& s) {
  const auto& t = s.trajectory;
  const Vec3 c(0.5 * s.room.x(), 0.5 * s.room.y(), t.height);
  std::vector<Pose> poses;
  for (int i = 0; i < t.frames; ++i) {
    const double a = i * t.deg_per_frame * M_PI / 180.0;
    const Vec3 radial(std::cos(a), std::sin(a), 0);
    const Vec3 eye = c + t.radius * radial;
    const Vec3 target = c - 1.5 * t.radius * radial - Vec3(0, 0, t.look_drop);
    const Pose p = Pose::look_at(eye, target);
    for (int ax = 0; ax < 3; ++ax)
      if (eye[ax] <= 0 || eye[ax] >= s.room[ax])
        throw Error("synth: trajectory leaves the room at frame " + std::to_string(i));
    if (scene_sdf(s, eye) < 0.1) throw Error("synth: camera inside or touching geometry at frame " + std::to_string(i));
    poses.push_back(p);
  }
  return poses;
}

/// Room box plus a coarse-voxel margin, snapped outward to the coarse lattice.
inline Aabb scene_bounds(const SceneSpec& s) {
  const double v = voxel_size(Level::coarse);
  Aabb b;
  for (int a = 0; a < 3; ++a) {
    b.min[a] = std::floor((0.0 - v) / v + 1e-9) * v;
    b.max[a] = std::ceil((s.room[a] + v) / v - 1e-9) * v;
  }
  return b;
}

// -- JSON ------------------------------------------------------------------------------

inline Vec3 vec3_from_json(const nlohmann::json& j) {
  if (!j.is_array() || j.size() != 3) throw Error("synth spec: expected a 3-vector");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

inline SceneSpec scene_from_json(const nlohmann::json& j) {
  SceneSpec s;
  try {
    if (j.contains("room")) s.room = vec3_from_json(j["room"]);
    if (j.contains("objects"))
      for (const auto& o : j["objects"]) {
        SdfObject obj;
        const std::string type = o.at("type").get<std::string>();
        obj.center = vec3_from_json(o.at("center"));
        if (type == "sphere") {
          obj.kind = SdfObject::Kind::sphere;
          obj.radius = o.at("radius").get<double>();
        } else if (type == "box") {
          obj.kind = SdfObject::Kind::box;
          obj.half = vec3_from_json(o.at("half"));
        } else {
          throw Error("synth spec: unknown object type '" + type + "'");
        }
        s.objects.push_back(obj);
      }
    if (j.contains("trajectory")) {
      const auto& t = j["trajectory"];
      s.trajectory.frames = t.value("frames", s.trajectory.frames);
      s.trajectory.deg_per_frame = t.value("deg_per_frame", s.trajectory.deg_per_frame);
      s.trajectory.radius = t.value("radius", s.trajectory.radius);
      s.trajectory.height = t.value("height", s.trajectory.height);
      s.trajectory.look_drop = t.value("look_drop", s.trajectory.look_drop);
    }
    if (j.contains("image")) {
      const auto& im = j["image"];
      s.image.width = im.value("width", s.image.width);
      s.image.height = im.value("height", s.image.height);
      s.image.fx = im.value("fx", s.image.fx);
      s.image.fy = im.value("fy", s.image.fy);
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("synth spec: ") + e.what());
  }
  for (const auto& o : s.objects) {
    const Vec3 ext = o.kind == SdfObject::Kind::sphere ? Vec3::Constant(o.radius) : o.half;
    for (int a = 0; a < 3; ++a)
      if (o.center[a] - ext[a] < -1e-9 || o.center[a] + ext[a] > s.room[a] + 1e-9)
        throw Error("synth spec: object extends outside the room");
  }
  return s;
}

inline nlohmann::json to_json(const SceneSpec& s) {
  nlohmann::json objs = nlohmann::json::array();
  for (const auto& o : s.objects) {
    nlohmann::json j = {{"type", o.kind == SdfObject::Kind::sphere ? "sphere" : "box"},
                        {"center", {o.center.x(), o.center.y(), o.center.z()}}};
    if (o.kind == SdfObject::Kind::sphere) j["radius"] = o.radius;
    else j["half"] = {o.half.x(), o.half.y(), o.half.z()};
    objs.push_back(j);
  }
  const auto& t = s.trajectory;
  return {{"room", {s.room.x(), s.room.y(), s.room.z()}},
          {"objects", objs},
          {"trajectory",
           {{"frames", t.frames},
            {"deg_per_frame", t.deg_per_frame},
            {"radius", t.radius},
            {"height", t.height},
            {"look_drop", t.look_drop}}},
          {"image", {{"width", s.image.width}, {"height", s.image.height}, {"fx", s.image.fx}, {"fy", s.image.fy}}}};
}

/// Random furnished room. Objects stay clear of the camera orbit.
template <class Rng>
SceneSpec random_room(Rng& rng, const ImageSpec& image = {}) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  SceneSpec s;
  s.image = image;
  s.room = Vec3(2.2 + 0.8 * u(rng), 2.2 + 0.8 * u(rng), 1.8 + 0.4 * u(rng));
  s.trajectory.radius = 0.3 + 0.15 * u(rng);
  s.trajectory.height = 0.9 + 0.3 * u(rng);
  s.trajectory.deg_per_frame = 5;
  s.trajectory.frames = 72;
  const Vec3 c(0.5 * s.room.x(), 0.5 * s.room.y(), s.trajectory.height);
  const int count = 2 + int(u(rng) * 3);
  for (int attempt = 0; attempt < 200 && int(s.objects.size()) < count; ++attempt) {
    SdfObject o;
    o.kind = u(rng) < 0.5 ? SdfObject::Kind::sphere : SdfObject::Kind::box;
    Vec3 ext;
    if (o.kind == SdfObject::Kind::sphere) {
      o.radius = 0.15 + 0.2 * u(rng);
      ext = Vec3::Constant(o.radius);
    } else {
      o.half = Vec3(0.1 + 0.25 * u(rng), 0.1 + 0.25 * u(rng), 0.1 + 0.35 * u(rng));
      ext = o.half;
    }
    // Objects rest on the floor, somewhere in the room.
    o.center = Vec3(ext.x() + u(rng) * (s.room.x() - 2 * ext.x()), ext.y() + u(rng) * (s.room.y() - 2 * ext.y()),
                    ext.z());
    const double ring = std::hypot(o.center.x() - c.x(), o.center.y() - c.y());
    const double reach = ext.head<2>().norm();
    if (std::abs(ring - s.trajectory.radius) < reach + 0.25) continue;
    if (ring < s.trajectory.radius && o.center.z() + ext.z() > s.trajectory.height - 0.3) continue;
    bool overlaps = false;
    for (const auto& q : s.objects) {
      const Vec3 qe = q.kind == SdfObject::Kind::sphere ? Vec3::Constant(q.radius) : q.half;
      if (((o.center - q.center).cwiseAbs() - ext - qe).maxCoeff() < 0.05) overlaps = true;
    }
    if (!overlaps) s.objects.push_back(o);
  }
  return s;
}

}  // namespace vortx
