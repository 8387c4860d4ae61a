/*
 * Copyright 2026 The GPF Authors
 * SPDX-License-Identifier: Apache-2.0
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 * http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include <cmath>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "gpf/core_types.hpp"

// Procedural scenes with analytic surfaces, used in place of captured datasets.

namespace gpf::synth {

enum class SceneKind { sphere, slab, two_slabs, textured_cube, hole_slab };

inline SceneKind parse_kind(const std::string& s) {
  if (s == "sphere") return SceneKind::sphere;
  if (s == "slab") return SceneKind::slab;
  if (s == "two_slabs") return SceneKind::two_slabs;
  if (s == "textured_cube") return SceneKind::textured_cube;
  if (s == "hole_slab") return SceneKind::hole_slab;
  throw InputError("unknown scene kind '" + s + "'");
}

inline std::string to_string(SceneKind k) {
  switch (k) {
    case SceneKind::sphere: return "sphere";
    case SceneKind::slab: return "slab";
    case SceneKind::two_slabs: return "two_slabs";
    case SceneKind::textured_cube: return "textured_cube";
    case SceneKind::hole_slab: return "hole_slab";
  }
  return "?";
}

struct SynthConfig {
  SceneKind kind = SceneKind::sphere;
  int n_points = 20000;
  int n_views = 8;
  int holdout_views = 1;
  int resolution = 64;
  std::uint64_t seed = 0;
  bool textured = true;  ///< false: one flat albedo per surface
  double fov_deg = 50.0;

  void validate() const {
    if (n_points < 100) throw InputError("synth: n_points must be >= 100");
    if (n_views < 2) throw InputError("synth: n_views must be >= 2");
    if (holdout_views < 0) throw InputError("synth: holdout_views must be >= 0");
    if (resolution < 8) throw InputError("synth: resolution must be >= 8");
  }
};

// Fixed geometry constants.
inline constexpr double kSphereRadius = 1.0;
inline constexpr double kSlabHalf = 1.0;       // square plates span [-1, 1]^2 in the z = const plane
inline constexpr double kRearSlabZ = 2.0;      // two_slabs: front plate at z = 0, rear at z = 2
inline constexpr double kHoleRadius = 0.35;    // hole_slab: disk removed around the origin
inline constexpr double kHoleSlabHalf = 1.9;   // hole_slab plate reaches past every view, so only the hole has a rim
inline constexpr double kCubeHalf = 1.0;

struct Hit {
  double t = 0.0;
  Vec3 point = Vec3::Zero();
  Vec3 albedo = Vec3::Zero();
};

inline double checker(double u, double v, double period) {
  const auto a = static_cast<long>(std::floor(u / period)), b = static_cast<long>(std::floor(v / period));
  return ((a + b) & 1) ? 1.0 : 0.0;
}

/// Albedo of a planar patch at in-plane coordinates (u, v); `tint` separates surfaces.
inline Vec3 plane_albedo(double u, double v, const Vec3& tint, bool textured) {
  if (!textured) return tint;
  const double c = checker(u, v, 0.25);
  const Vec3 grad(0.5 + 0.25 * u, 0.5 + 0.25 * v, 0.5 - 0.2 * (u + v) * 0.5);
  return (0.35 + 0.5 * c) * tint.cwiseProduct(grad) * 1.6 + 0.05 * Vec3::Ones();
}

/// Ray casting against the analytic surface of a scene kind.
class Geometry {
 public:
  Geometry(SceneKind kind, bool textured) : kind_(kind), textured_(textured) {}

  std::optional<Hit> intersect(const Vec3& o, const Vec3& d) const {
    switch (kind_) {
      case SceneKind::sphere: return sphere(o, d);
      case SceneKind::slab: return plate(o, d, 0.0);
      case SceneKind::hole_slab: return plate(o, d, 0.0, kHoleSlabHalf);
      case SceneKind::two_slabs: {
        auto a = plate(o, d, 0.0);
        auto b = plate(o, d, kRearSlabZ);
        if (a && (!b || a->t <= b->t)) return a;
        return b;
      }
      case SceneKind::textured_cube: return cube(o, d);
    }
    return std::nullopt;
  }

  /// Points uniformly distributed over the scanned surface (the hole stays empty).
  Eigen::Matrix3Xd sample_surface(int n, std::mt19937_64& rng) const {
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    std::normal_distribution<double> g(0.0, 1.0);
    Eigen::Matrix3Xd pts(3, n);
    for (int i = 0; i < n; ++i) {
      Vec3 p = Vec3::Zero();
      switch (kind_) {
        case SceneKind::sphere:
          p = Vec3(g(rng), g(rng), g(rng));
          p = kSphereRadius * p / p.norm();
          break;
        case SceneKind::slab:
          p = Vec3(kSlabHalf * u(rng), kSlabHalf * u(rng), 0.0);
          break;
        case SceneKind::hole_slab:
          do {
            p = Vec3(kHoleSlabHalf * u(rng), kHoleSlabHalf * u(rng), 0.0);
          } while (p.head<2>().norm() < kHoleRadius);
          break;
        case SceneKind::two_slabs:
          p = Vec3(kSlabHalf * u(rng), kSlabHalf * u(rng), (i % 2) ? kRearSlabZ : 0.0);
          break;
        case SceneKind::textured_cube: {
          std::uniform_int_distribution<int> face(0, 5);
          const int f = face(rng);
          const int axis = f / 2;
          p = Vec3(kCubeHalf * u(rng), kCubeHalf * u(rng), kCubeHalf * u(rng));
          p(axis) = (f % 2) ? kCubeHalf : -kCubeHalf;
          break;
        }
      }
      pts.col(i) = p;
    }
    return pts;
  }

  Vec3 albedo_at(const Vec3& p) const {
    switch (kind_) {
      case SceneKind::sphere: return sphere_albedo(p);
      case SceneKind::slab:
      case SceneKind::hole_slab: return plane_albedo(p.x(), p.y(), Vec3(0.9, 0.55, 0.3), textured_);
      case SceneKind::two_slabs:
        return plane_albedo(p.x(), p.y(), p.z() > 0.5 * kRearSlabZ ? Vec3(0.25, 0.4, 0.9) : Vec3(0.9, 0.3, 0.25), textured_);
      case SceneKind::textured_cube: return cube_albedo(p);
    }
    return Vec3::Zero();
  }

 private:
  SceneKind kind_;
  bool textured_;

  Vec3 sphere_albedo(const Vec3& p) const {
    if (!textured_) return Vec3(0.8, 0.5, 0.3);
    const double a = std::atan2(p.y(), p.x()), b = std::acos(std::clamp(p.z() / kSphereRadius, -1.0, 1.0));
    const double c = checker(a, b, M_PI / 6);
    return Vec3(0.3 + 0.5 * c, 0.4 + 0.3 * std::cos(b), 0.6 - 0.3 * c);
  }

  static int cube_face(const Vec3& p) {
    int axis = 0;
    p.cwiseAbs().maxCoeff(&axis);
    return 2 * axis + (p(axis) > 0.0 ? 1 : 0);
  }

  Vec3 cube_albedo(const Vec3& p) const {
    static const Vec3 tints[6] = {{0.9, 0.35, 0.3}, {0.3, 0.8, 0.35}, {0.35, 0.4, 0.9},
                                  {0.9, 0.8, 0.3},  {0.8, 0.35, 0.85}, {0.3, 0.85, 0.85}};
    // Fixed light: Lambertian shading is constant per face and independent of the viewer.
    static const double shade[6] = {0.55, 0.95, 0.7, 0.85, 0.6, 1.0};
    const int f = cube_face(p);
    const int axis = f / 2;
    const double u = p((axis + 1) % 3), v = p((axis + 2) % 3);
    return (shade[f] * plane_albedo(u, v, tints[f], textured_)).cwiseMin(1.0);
  }

  std::optional<Hit> sphere(const Vec3& o, const Vec3& d) const {
    const double b = o.dot(d);
    const double c = o.squaredNorm() - kSphereRadius * kSphereRadius;
    const double disc = b * b - c;
    if (disc < 0.0) return std::nullopt;
    const double t = -b - std::sqrt(disc);
    if (!(t > 0.0)) return std::nullopt;
    Hit h{t, o + t * d, Vec3::Zero()};
    h.albedo = sphere_albedo(h.point);
    return h;
  }

  std::optional<Hit> plate(const Vec3& o, const Vec3& d, double z, double half = kSlabHalf) const {
    if (std::abs(d.z()) < 1e-12) return std::nullopt;
    const double t = (z - o.z()) / d.z();
    if (!(t > 0.0)) return std::nullopt;
    const Vec3 p = o + t * d;
    if (std::abs(p.x()) > half || std::abs(p.y()) > half) return std::nullopt;
    return Hit{t, p, albedo_at(p)};
  }

  std::optional<Hit> cube(const Vec3& o, const Vec3& d) const {
    double t0 = -std::numeric_limits<double>::infinity(), t1 = std::numeric_limits<double>::infinity();
    for (int a = 0; a < 3; ++a) {
      if (std::abs(d(a)) < 1e-15) {
        if (std::abs(o(a)) > kCubeHalf) return std::nullopt;
        continue;
      }
      double ta = (-kCubeHalf - o(a)) / d(a), tb = (kCubeHalf - o(a)) / d(a);
      if (ta > tb) std::swap(ta, tb);
      t0 = std::max(t0, ta);
      t1 = std::min(t1, tb);
    }
    if (!(t1 >= t0) || !(t0 > 0.0)) return std::nullopt;
    const Vec3 p = o + t0 * d;
    return Hit{t0, p, cube_albedo(p)};
  }
};

struct SynthScene {
  SceneKind kind = SceneKind::sphere;
  NeuralPointField field;               ///< ground-truth scaffold; color holds the surface albedo
  std::vector<CameraView> views;        ///< training views with images
  std::vector<CameraView> holdout;      ///< held-out views with images
  std::vector<Image> true_depth;        ///< exact camera-z at pixel centers for `views` (0 = background)
  std::vector<Image> holdout_depth;
};

/// Camera placement per kind; index n_views.. are the held-out cameras.
inline Vec3 camera_eye(SceneKind kind, int i, int n_views) {
  const bool holdout = i >= n_views;
  const double step = 2.0 * M_PI / n_views;
  const double az = holdout ? (i - n_views + 0.5) * step : i * step;
  switch (kind) {
    case SceneKind::sphere: {
      const double el = holdout ? 0.3 : 0.35 * ((i % 2) ? 1 : -1);
      return 4.0 * Vec3(std::cos(el) * std::cos(az), std::sin(el), std::cos(el) * std::sin(az));
    }
    case SceneKind::textured_cube: {
      const double el = holdout ? 0.45 : ((i % 2) ? 0.25 : 0.7);
      return 4.5 * Vec3(std::cos(el) * std::cos(az), std::sin(el), std::cos(el) * std::sin(az));
    }
    case SceneKind::slab:
    case SceneKind::hole_slab:
    case SceneKind::two_slabs: {
      const double dist = kind == SceneKind::two_slabs ? 2.0 : kind == SceneKind::hole_slab ? 1.5 : 3.0;
      if (i == 0) return Vec3(0, 0, -dist);  // fronto-parallel reference view
      const double polar = holdout ? 0.3 : 0.45;
      return dist * Vec3(std::sin(polar) * std::cos(az), std::sin(polar) * std::sin(az), -std::cos(polar));
    }
  }
  return Vec3(0, 0, -3);
}

/// Ground-truth image (2x2 supersampled colors) and exact pixel-center depth for one view.
inline void render_ground_truth(const Geometry& geo, CameraView& view, Image& depth) {
  view.image = Image(view.width, view.height, 3, 0.0);
  depth = Image(view.width, view.height, 1, 0.0);
  for (int y = 0; y < view.height; ++y) {
    for (int x = 0; x < view.width; ++x) {
      const Vec3 o = view.center();
      if (auto h = geo.intersect(o, pixel_direction(view, pixel_center(x, y)))) depth.at(x, y) = view.to_camera(h->point).z();
      Vec3 acc = Vec3::Zero();
      for (int sy = 0; sy < 2; ++sy)
        for (int sx = 0; sx < 2; ++sx) {
          const Vec2 px(x + 0.25 + 0.5 * sx, y + 0.25 + 0.5 * sy);
          if (auto h = geo.intersect(o, pixel_direction(view, px))) acc += h->albedo;
        }
      acc /= 4.0;
      for (int c = 0; c < 3; ++c) view.image.at(x, y, c) = std::clamp(acc(c), 0.0, 1.0);
    }
  }
}

inline SynthScene synth_scene(const SynthConfig& cfg) {
  cfg.validate();
  SynthScene s;
  s.kind = cfg.kind;
  const Geometry geo(cfg.kind, cfg.textured);
  std::mt19937_64 rng(mix_seed(cfg.seed, 0x5c3e));
  Eigen::Matrix3Xd pts = geo.sample_surface(cfg.n_points, rng);
  s.field = NeuralPointField(pts);
  for (int i = 0; i < cfg.n_points; ++i) s.field.mutable_color().col(i) = geo.albedo_at(pts.col(i)).cwiseMax(0.0).cwiseMin(1.0);
  const double focal = 0.5 * cfg.resolution / std::tan(0.5 * cfg.fov_deg * M_PI / 180.0);
  const Vec3 target = cfg.kind == SceneKind::two_slabs ? Vec3(0, 0, 0.5 * kRearSlabZ) : Vec3::Zero();
  for (int i = 0; i < cfg.n_views + cfg.holdout_views; ++i) {
    CameraView v;
    v.width = v.height = cfg.resolution;
    v.intrinsics = make_intrinsics(focal, cfg.resolution, cfg.resolution);
    const Vec3 eye = camera_eye(cfg.kind, i, cfg.n_views);
    // Plate scenes aim at a point on the z axis, so view 0 is exactly fronto-parallel.
    v.world_to_cam = look_at(eye, target, Vec3::UnitY());
    Image depth;
    render_ground_truth(geo, v, depth);
    if (i < cfg.n_views) {
      s.views.push_back(std::move(v));
      s.true_depth.push_back(std::move(depth));
    } else {
      s.holdout.push_back(std::move(v));
      s.holdout_depth.push_back(std::move(depth));
    }
  }
  return s;
}

/// Analytic camera-z of the visible surface along the ray through `pixel` (0 on a miss).
inline double true_depth(const Geometry& geo, const CameraView& view, const Vec2& pixel) {
  const auto h = geo.intersect(view.center(), pixel_direction(view, pixel));
  return h ? view.to_camera(h->point).z() : 0.0;
}

}  // namespace gpf::synth
