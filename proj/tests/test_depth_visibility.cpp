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
#include <gtest/gtest.h>

#include "test_util.hpp"

using namespace gpf;
using gpf::test::simple_camera;

namespace {

/// Depth along one ray by direct summation over every point, no index.
double oracle_depth(const Eigen::Matrix3Xd& all, const CameraView& view, const Ray& ray, double radius, double bw,
                    double r_opt, int n) {
  if (ray.empty()) return 0.0;
  // points farther than the radius from the ray's line can never contribute
  std::vector<int> near;
  for (Eigen::Index j = 0; j < all.cols(); ++j) {
    const Vec3 d = all.col(j) - ray.origin;
    if ((d - d.dot(ray.direction) * ray.direction).norm() <= radius) near.push_back(static_cast<int>(j));
  }
  const double step = (ray.t_far - ray.t_near) / n;
  double optical = 0.0, wsum = 0.0, wz = 0.0;
  for (int i = 0; i < n; ++i) {
    const double t = ray.t_near + (i + 0.5) * step;
    const Vec3 x = ray.at(t);
    double sum = 0.0;
    int cnt = 0;
    for (int j : near) {
      const double d = (all.col(j) - x).norm();
      if (d <= radius) {
        sum += std::exp(-0.5 * d * d / (bw * bw));
        ++cnt;
      }
    }
    if (cnt == 0) continue;
    const double dens = sum / cnt;
    const double w = std::exp(-optical) * dens;
    wsum += w;
    wz += w * view.to_camera(x).z();
    optical += 2.0 * dens * r_opt;
  }
  return wsum > 0 ? wz / wsum : 0.0;
}

Eigen::Matrix3Xd two_planes() {
  const Eigen::Matrix3Xd a = test::plane_points(120, 1.0, 2.0), b = test::plane_points(120, 1.0, 4.0);
  Eigen::Matrix3Xd p(3, a.cols() + b.cols());
  p << a, b;
  return p;
}

}  // namespace

TEST(PointDensity, ClosedForms) {
  const std::vector<Neighbor> one{{0, 0.0}};
  EXPECT_DOUBLE_EQ(point_density(one, 0.3), 1.0);
  const std::vector<Neighbor> two{{0, 0.0}, {1, 0.3}};
  EXPECT_NEAR(point_density(two, 0.3), (1 + std::exp(-0.5)) / 2, 1e-15);
  EXPECT_NEAR(point_density(two, 0.3), 0.80327, 1e-5);
  EXPECT_THROW(point_density(std::vector<Neighbor>{}, 1.0), ContractViolation);
}

TEST(PointDensity, MatchesDirectSum) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0, 2), b(0.1, 1);
  for (int t = 0; t < 200; ++t) {
    std::vector<Neighbor> nb;
    const int n = 1 + t % 9;
    for (int i = 0; i < n; ++i) nb.push_back({i, u(rng)});
    const double bw = b(rng);
    double s = 0;
    for (const auto& x : nb) s += std::exp(-(x.distance / bw) * (x.distance / bw) / 2);
    EXPECT_NEAR(point_density(nb, bw), s / n, 1e-12);
  }
}

TEST(Transmittance, ClosedForms) {
  const std::vector<double> zeros(5, 0.0);
  for (double t : ray_transmittance(zeros, 0.7)) EXPECT_EQ(t, 1.0);
  const std::vector<double> d{0.4, 0.4};
  const auto t = ray_transmittance(d, 0.25);
  EXPECT_EQ(t[0], 1.0);
  EXPECT_NEAR(t[1], std::exp(-2 * 0.4 * 0.25), 1e-15);
}

TEST(Transmittance, MatchesProductFormAndDecays) {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(0, 1);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> d(40);
    for (double& x : d) x = u(rng);
    const double r = 0.05 + u(rng);
    const auto t = ray_transmittance(d, r);
    double prod = 1.0;
    for (std::size_t i = 0; i < d.size(); ++i) {
      EXPECT_NEAR(t[i], prod, 1e-12);
      EXPECT_GT(t[i], 0.0);
      EXPECT_LE(t[i], 1.0);
      if (i) {
        EXPECT_LE(t[i], t[i - 1]);
      }
      prod *= std::exp(-2 * d[i] * r);
    }
  }
}

TEST(DepthMap, FrontoParallelPlane) {
  const NeuralPointField f(test::plane_points(200, 1.0, 2.0));
  const CameraView v = simple_camera(32, 32, 20.0);
  const DepthEstimationConfig cfg;
  const SpatialIndex idx(f, cfg.search_radius(f.scene_scale()));
  const Image d = estimate_depth_map(f, idx, v, cfg);
  int checked = 0;
  for (int y = 8; y < 24; ++y)
    for (int x = 8; x < 24; ++x) {
      EXPECT_NEAR(d.at(x, y), 2.0, 0.02) << x << "," << y;
      ++checked;
    }
  EXPECT_EQ(checked, 256);
}

TEST(DepthMap, EmptyRegionIsUnknown) {
  const NeuralPointField f(test::plane_points(30, 0.2, 2.0));
  // camera looks away from the points
  const CameraView v = simple_camera(16, 16, 16.0, look_at(Vec3::Zero(), Vec3(0, 0, -5), Vec3::UnitY()));
  const SpatialIndex idx(f, 0.05);
  DepthEstimationConfig cfg;
  const Image d = estimate_depth_map(f, idx, v, cfg);
  for (double x : d.data) EXPECT_EQ(x, 0.0);
}

TEST(DepthMap, FrontSlabDominatesAndMatchesOracle) {
  const NeuralPointField f(two_planes());
  const CameraView v = simple_camera(16, 16, 9.0);
  const DepthEstimationConfig cfg;
  const double S = f.scene_scale();
  const SpatialIndex idx(f, cfg.search_radius(S));
  const Image d = estimate_depth_map(f, idx, v, cfg);
  const SceneBounds b = SceneBounds::of(f, cfg.search_radius(S));
  int agree = 0, known = 0;
  for (int y = 0; y < 16; ++y)
    for (int x = 0; x < 16; ++x) {
      const double o = oracle_depth(f.positions(), v, make_ray(v, pixel_center(x, y), b), cfg.search_radius(S),
                                    cfg.bandwidth(S), cfg.optical_radius(), 1024);
      if (o == 0.0) continue;
      ++known;
      agree += std::abs(d.at(x, y) - o) <= 0.01 * S;
      if (x >= 5 && x < 11 && y >= 5 && y < 11) {
        EXPECT_NEAR(d.at(x, y), 2.0, 0.01 * S);
      }
    }
  EXPECT_GE(known, 64);
  EXPECT_GE(agree, 0.95 * known);
}

TEST(Visibility, ClosedForms) {
  CameraView v = simple_camera(10, 10, 10.0);
  v.depth_map = Image(10, 10, 1, 1.0);
  EXPECT_DOUBLE_EQ(visibility_score(Vec3(0, 0, 1), v), 1.0);
  EXPECT_DOUBLE_EQ(visibility_score(Vec3(0, 0, 2), v), 0.5);
  EXPECT_DOUBLE_EQ(visibility_score(Vec3(50, 0, 1), v), 0.0);   // outside the frustum
  EXPECT_DOUBLE_EQ(visibility_score(Vec3(0, 0, -1), v), 0.0);   // behind the camera
  CameraView none = simple_camera(10, 10, 10.0);
  EXPECT_THROW(visibility_score(Vec3(0, 0, 1), none), ContractViolation);
}

TEST(Visibility, OcclusionAcrossTwoCameras) {
  // A small opaque square at z=2 hides a point at z=4 from the camera at the origin,
  // while a second camera looks at it from behind.
  Eigen::Matrix3Xd occluder = test::plane_points(40, 0.3, 2.0);
  Eigen::Matrix3Xd target = test::plane_points(20, 0.2, 4.0);
  Eigen::Matrix3Xd p(3, occluder.cols() + target.cols());
  p << occluder, target;
  const NeuralPointField f(p);
  std::vector<CameraView> views{simple_camera(32, 32, 30.0),
                                simple_camera(32, 32, 30.0, look_at(Vec3(0, 0, 8.0), Vec3(0, 0, 4.0), Vec3::UnitY()))};
  DepthEstimationConfig cfg;
  cfg.search_radius_frac = 0.02;
  compute_depth_maps(f, views, cfg);
  const VisibilityTable t = build_visibility_table(f, views);
  const int hidden = static_cast<int>(occluder.cols()) + 210;  // near the middle of the rear patch
  EXPECT_GT(t.scores(hidden, 1), t.scores(hidden, 0));
  EXPECT_LT(t.scores(hidden, 0), 0.6);
  for (Eigen::Index i = 0; i < t.scores.size(); ++i) {
    EXPECT_GE(t.scores.data()[i], 0.0);
    EXPECT_LE(t.scores.data()[i], 1.0);
  }
  // single view, point on the visible surface
  EXPECT_GT(t.scores(820, 0), 0.95);
  const auto top = t.top_k(hidden, 1);
  EXPECT_EQ(top, std::vector<int>{1});
}

TEST(Visibility, NearerPointOnRayScoresHigher) {
  const NeuralPointField f(two_planes());
  std::vector<CameraView> views{simple_camera(24, 24, 14.0)};
  DepthEstimationConfig cfg;
  cfg.search_radius_frac = 0.015;
  compute_depth_maps(f, views, cfg);
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-0.6, 0.6);
  for (int i = 0; i < 50; ++i) {
    const Vec3 dir = Vec3(u(rng), u(rng), 2.0).normalized();
    const Vec3 near = dir * (2.0 / dir.z()), far = dir * (4.0 / dir.z());
    EXPECT_GE(visibility_score(near, views[0]), visibility_score(far, views[0]));
  }
}

TEST(Visibility, TableInvariantUnderJointRigidMotion) {
  // Radii scale with the bounding-box diagonal, which only axis-aligned rotations preserve.
  std::mt19937_64 rng(4);
  const NeuralPointField f(two_planes());
  std::vector<CameraView> views{simple_camera(16, 16, 10.0),
                                simple_camera(16, 16, 10.0, look_at(Vec3(1.0, 0.5, -1.0), Vec3(0, 0, 3), Vec3::UnitY()))};
  DepthEstimationConfig cfg;
  cfg.search_radius_frac = 0.015;
  compute_depth_maps(f, views, cfg);
  const VisibilityTable a = build_visibility_table(f, views);
  std::uniform_real_distribution<double> u(-2, 2);
  for (int trial = 0; trial < 4; ++trial) {
    const Mat4 T = rigid_transform(test::random_axis_rotation(rng), Vec3(u(rng), u(rng), u(rng)));
    NeuralPointField g = f;
    for (int i = 0; i < g.size(); ++i) g.mutable_positions().col(i) = transform_point(T, f.position(i));
    ASSERT_NEAR(g.scene_scale(), f.scene_scale(), 1e-12);
    std::vector<CameraView> moved = views;
    for (auto& v : moved) transform_camera(v, T);
    compute_depth_maps(g, moved, cfg);
    const VisibilityTable b = build_visibility_table(g, moved);
    EXPECT_LE((a.scores - b.scores).cwiseAbs().maxCoeff(), 1e-6);
  }
}
