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
#include <numeric>
#include <span>
#include <vector>

#include "gpf/core_types.hpp"
#include "gpf/spatial_index.hpp"

namespace gpf {

/// Settings for visible-depth estimation. Lengths are fractions of the scene scale.
struct DepthEstimationConfig {
  int samples_per_ray = 128;
  double search_radius_frac = 0.005;
  double bandwidth_frac = 0.0;  ///< 0 means "same as the search radius"
  int top_k_views = 3;          ///< <= 0 means all views
  /// Absorption is evaluated in a frame where the scene diagonal spans this many units,
  /// so the per-sample optical thickness 2*d*r does not depend on the unit of the input.
  double optical_reference_scale = 1000.0;

  double search_radius(double scene_scale) const { return search_radius_frac * scene_scale; }
  double bandwidth(double scene_scale) const {
    return (bandwidth_frac > 0.0 ? bandwidth_frac : search_radius_frac) * scene_scale;
  }
  double optical_radius() const { return search_radius_frac * optical_reference_scale; }

  void validate() const {
    if (samples_per_ray < 2) throw InputError("DepthEstimationConfig: samples_per_ray must be >= 2");
    if (!(search_radius_frac > 0.0)) throw InputError("DepthEstimationConfig: search radius must be positive");
    if (bandwidth_frac < 0.0) throw InputError("DepthEstimationConfig: bandwidth must be positive");
    if (!(optical_reference_scale > 0.0)) throw InputError("DepthEstimationConfig: optical_reference_scale must be positive");
  }
};

/// Gaussian-kernel density of a query from its neighbors, in (0, 1].
inline double point_density(std::span<const Neighbor> neighbors, double bandwidth) {
  if (neighbors.empty()) throw ContractViolation("point_density: empty neighbor list must be filtered upstream");
  const double inv = 1.0 / (bandwidth * bandwidth);
  double sum = 0.0;
  for (const auto& n : neighbors) sum += std::exp(-0.5 * n.distance * n.distance * inv);
  return sum / static_cast<double>(neighbors.size());
}

/// Exclusive-prefix transmittance T_n = exp(-sum_{i<n} 2 d_i r).
inline std::vector<double> ray_transmittance(std::span<const double> densities, double r) {
  std::vector<double> t(densities.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < densities.size(); ++i) {
    t[i] = std::exp(-acc);
    acc += 2.0 * densities[i] * r;
  }
  return t;
}

/// Soft-argmax camera-space depth along one ray; 0 when no sample has a neighbor.
inline double estimate_ray_depth(const SpatialIndex& index, const CameraView& view, const Ray& ray,
                                 const DepthEstimationConfig& cfg, double scene_scale) {
  if (ray.empty()) return 0.0;
  const double radius = cfg.search_radius(scene_scale);
  const double bw = cfg.bandwidth(scene_scale);
  const double r_opt = cfg.optical_radius();
  const int n = cfg.samples_per_ray;
  const double step = (ray.t_far - ray.t_near) / n;
  const double cos_axis = view.rotation().row(2).dot(ray.direction);
  std::vector<Neighbor> nb;
  double optical = 0.0;
  double wsum = 0.0;
  double wz = 0.0;
  for (int i = 0; i < n; ++i) {
    const double t = ray.t_near + (i + 0.5) * step;
    index.radius_neighbors(ray.at(t), radius, nb);
    if (nb.empty()) continue;
    const double d = point_density(nb, bw);
    const double w = std::exp(-optical) * d;
    wsum += w;
    wz += w * cos_axis * t;
    optical += 2.0 * d * r_opt;
  }
  return wsum > 0.0 ? wz / wsum : 0.0;
}

/// Dense visible depth (camera z) for every pixel of `view`; 0 marks unknown pixels.
inline Image estimate_depth_map(const NeuralPointField& field, const SpatialIndex& index, const CameraView& view,
                                const DepthEstimationConfig& cfg) {
  cfg.validate();
  index.check(field);
  const double scale = field.scene_scale();
  const SceneBounds bounds = SceneBounds::of(field, cfg.search_radius(scale));
  Image depth(view.width, view.height, 1, 0.0);
  parallel_for(view.height, [&](int y0, int y1) {
    for (int y = y0; y < y1; ++y) {
      for (int x = 0; x < view.width; ++x) {
        const Ray ray = make_ray(view, pixel_center(x, y), bounds);
        depth.at(x, y) = estimate_ray_depth(index, view, ray, cfg, scale);
      }
    }
  }, 4);
  return depth;
}

/// Builds one index at the configured radius and fills every view's depth_map.
inline void compute_depth_maps(const NeuralPointField& field, std::span<CameraView> views, const DepthEstimationConfig& cfg) {
  const SpatialIndex index(field, cfg.search_radius(field.scene_scale()));
  for (auto& v : views) v.depth_map = estimate_depth_map(field, index, v, cfg);
}

/// Agreement between a point's camera depth and the visible depth at its projection, in [0,1].
/// Out-of-frustum projections read zero from the padded depth map and score 0.
inline double visibility_score(const Vec3& p, const CameraView& view) {
  if (!view.depth_map) throw ContractViolation("visibility_score: view has no depth map");
  const Vec3 pc = view.to_camera(p);
  if (!(pc.z() > 0.0)) return 0.0;
  const Vec3 h = view.intrinsics * (pc / pc.z());
  const double d = sample_bilinear(*view.depth_map, h.x(), h.y());
  if (d == 0.0) return 0.0;
  const double s = 1.0 - std::abs(pc.z() - d) / pc.z();
  return std::clamp(s, 0.0, 1.0);
}

/// Per-point, per-view visibility scores.
struct VisibilityTable {
  Eigen::MatrixXd scores;  ///< n_points x n_views

  int points() const { return static_cast<int>(scores.rows()); }
  int views() const { return static_cast<int>(scores.cols()); }

  /// Indices of the k best views for a point: descending score, lower view index on ties.
  std::vector<int> top_k(int point, int k) const {
    std::vector<int> order(static_cast<std::size_t>(views()));
    std::iota(order.begin(), order.end(), 0);
    const int kk = (k <= 0) ? views() : std::min(k, views());
    std::partial_sort(order.begin(), order.begin() + kk, order.end(), [&](int a, int b) {
      const double sa = scores(point, a), sb = scores(point, b);
      return sa > sb || (sa == sb && a < b);
    });
    order.resize(static_cast<std::size_t>(kk));
    return order;
  }
};

inline VisibilityTable build_visibility_table(const NeuralPointField& field, std::span<const CameraView> views) {
  for (const auto& v : views) {
    if (!v.depth_map) throw ContractViolation("build_visibility_table: every view needs a depth map");
  }
  VisibilityTable table;
  table.scores.resize(field.size(), static_cast<Eigen::Index>(views.size()));
  parallel_for(field.size(), [&](int b, int e) {
    for (int i = b; i < e; ++i) {
      for (std::size_t v = 0; v < views.size(); ++v) {
        table.scores(i, static_cast<Eigen::Index>(v)) = visibility_score(field.position(i), views[v]);
      }
    }
  }, 1024);
  return table;
}

}  // namespace gpf
