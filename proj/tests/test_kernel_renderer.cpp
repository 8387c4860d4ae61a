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
#include <gtest/gtest.h>

#include "test_util.hpp"

using namespace gpf;
using gpf::test::simple_camera;

namespace {

/// Small random cloud in front of a camera at the origin.
struct Toy {
  NeuralPointField field;
  CameraView view = simple_camera(12, 12, 12.0);
  KernelConfig cfg;
  double scale = 1.0;

  explicit Toy(std::uint64_t seed, int n = 60, AggregatorKind kind = AggregatorKind::learnable) {
    std::mt19937_64 rng(seed);
    field = test::random_field(n, rng, 0.3);
    field.mutable_positions().row(2).array() += 2.0;
    cfg.search_radius_frac = 0.15;
    cfg.aggregator = kind;
    scale = field.scene_scale();
  }

  std::vector<RayQuery> rays(int n_rays, int n_samples, std::mt19937_64& rng) const {
    const SceneBounds b = SceneBounds::of(field, cfg.search_radius(scale));
    std::uniform_real_distribution<double> u(4.0, 8.0);
    std::vector<RayQuery> out;
    for (int i = 0; i < n_rays; ++i) {
      RayQuery q;
      q.view = &view;
      q.ray = make_ray(view, Vec2(u(rng), u(rng)), b);
      q.t = uniform_sample(q.ray, n_samples, &rng);
      out.push_back(std::move(q));
    }
    return out;
  }
};

double softplus_ref(double x) { return std::log1p(std::exp(x)); }

/// Literal forward pass of a two-layer ReLU MLP with the given output map.
template <class Out>
VecX mlp_ref(const Mlp& m, const VecX& x, Out out) {
  const auto& L = m.layers();
  VecX h = L[0].weight * x + L[0].bias;
  for (Eigen::Index i = 0; i < h.size(); ++i) h(i) = h(i) > 0 ? h(i) : 0.0;
  VecX y = L[1].weight * h + L[1].bias;
  for (Eigen::Index i = 0; i < y.size(); ++i) y(i) = out(y(i));
  return y;
}

double loss_of(const Toy& toy, const KernelParameters& params, const std::vector<RayQuery>& rays, const Eigen::Matrix3Xd& gt) {
  const SpatialIndex idx(toy.field, toy.cfg.search_radius(toy.scale));
  const RenderContext ctx{toy.field, idx, params, toy.cfg, toy.scale};
  const RayResults r = evaluate_rays(ctx, rays, nullptr, nullptr);
  return (r.color - gt).squaredNorm();
}

}  // namespace

TEST(SpatialEncode, InputSlots) {
  const Vec3 q(0.1, -0.2, 2.0), n(0.3, 0.1, 1.5);
  const auto x = spatial_input(q, q);
  EXPECT_EQ(x.segment<3>(3), Vec3::Zero());
  EXPECT_EQ(x(6), 0.0);
  const Vec3 d(5.0, -3.0, 1.25);
  const auto a = spatial_input(q, n), b = spatial_input(q + d, n + d);
  EXPECT_NEAR((b.head<3>() - a.head<3>() - d).norm(), 0.0, 1e-15);
  EXPECT_NEAR((b.tail<4>() - a.tail<4>()).norm(), 0.0, 1e-14);
  EXPECT_NEAR(a(6), 0.2 + 0.3 + 0.5, 1e-15);
}

TEST(SpatialEncode, MatchesLiteralForwardPass) {
  const auto params = KernelParameters::init(1);
  std::mt19937_64 rng(2);
  std::normal_distribution<double> g(0, 1);
  for (int i = 0; i < 50; ++i) {
    const Vec3 q(g(rng), g(rng), g(rng)), n(g(rng), g(rng), g(rng));
    const VecX ref = mlp_ref(params.spatial, spatial_input(q, n), [](double v) { return v > 0 ? v : 0.0; });
    EXPECT_LT((spatial_encode(q, n, params) - ref).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(Decode, ClosedFormsAndLiteralForwardPass) {
  auto params = KernelParameters::init(3);
  std::mt19937_64 rng(4);
  std::normal_distribution<double> g(0, 3);
  for (int i = 0; i < 50; ++i) {
    const VecX f = VecX::NullaryExpr(params.hidden(), [&] { return g(rng); });
    const VecX s = decode(f, params, Target::density), c = decode(f, params, Target::color);
    EXPECT_LT(std::abs(s(0) - mlp_ref(params.sigma_decoder, f, softplus_ref)(0)), 1e-12);
    EXPECT_LT((c - mlp_ref(params.color_decoder, f, [](double v) { return 1 / (1 + std::exp(-v)); })).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_GE(s(0), 0.0);
    for (int k = 0; k < 3; ++k) {
      EXPECT_GT(c(k), 0.0);
      EXPECT_LT(c(k), 1.0);
    }
  }
  params.sigma_decoder = params.sigma_decoder.zeros_like();
  params.color_decoder = params.color_decoder.zeros_like();
  const VecX f = VecX::NullaryExpr(params.hidden(), [&] { return g(rng); });
  EXPECT_DOUBLE_EQ(decode(f, params, Target::density)(0), std::log(2.0));
  EXPECT_EQ(decode(f, params, Target::color), Vec3::Constant(0.5));
}

TEST(KernelAggregate, SingletonWeightIsOne) {
  Toy toy(5);
  const auto params = KernelParameters::init(6);
  const std::vector<Neighbor> one{{3, 0.05}};
  std::vector<double> w;
  for (Target t : {Target::density, Target::color}) {
    const VecX f = kernel_aggregate(toy.field.position(3) + Vec3(0.05, 0, 0), one, toy.field, params, t, toy.view, &w);
    ASSERT_EQ(w.size(), 1u);
    EXPECT_EQ(w[0], 1.0);
    EXPECT_TRUE(f.allFinite());
  }
  EXPECT_THROW(kernel_aggregate(Vec3::Zero(), std::vector<Neighbor>{}, toy.field, params, Target::density, toy.view),
               ContractViolation);
}

TEST(KernelAggregate, WeightsSumToOneAndIgnoreNeighborOrder) {
  std::mt19937_64 rng(7);
  for (auto kind : {AggregatorKind::learnable, AggregatorKind::idw}) {
    Toy toy(8, 80, kind);
    const auto params = KernelParameters::init(9, kind, 16);
    const SpatialIndex idx(toy.field, 0.2);
    std::uniform_real_distribution<double> u(-0.3, 0.3);
    for (int trial = 0; trial < 100; ++trial) {
      const Vec3 q(u(rng), u(rng), 2.0 + u(rng));
      auto nb = idx.k_nearest(q, 8, 0.4);
      if (nb.empty()) continue;
      for (Target t : {Target::density, Target::color}) {
        std::vector<double> w;
        const VecX a = kernel_aggregate(q, nb, toy.field, params, t, toy.view, &w);
        double sum = 0;
        for (double x : w) {
          EXPECT_GE(x, 0.0);
          sum += x;
        }
        EXPECT_NEAR(sum, 1.0, 1e-9);
        auto shuffled = nb;
        std::shuffle(shuffled.begin(), shuffled.end(), rng);
        const VecX b = kernel_aggregate(q, shuffled, toy.field, params, t, toy.view);
        EXPECT_LT((a - b).cwiseAbs().maxCoeff(), 1e-12);
      }
    }
  }
}

TEST(KernelAggregate, CoincidentPointIsFinite) {
  Toy toy(10);
  const auto params = KernelParameters::init(11);
  const std::vector<Neighbor> nb{{0, 0.0}, {0, 0.0}};
  EXPECT_TRUE(kernel_aggregate(toy.field.position(0), nb, toy.field, params, Target::color, toy.view).allFinite());
}

TEST(EvaluateRays, SingleSampleAgreesWithBuildingBlocks) {
  for (auto kind : {AggregatorKind::learnable, AggregatorKind::idw}) {
    Toy toy(12, 60, kind);
    const auto params = KernelParameters::init(13, kind, 16);
    const SpatialIndex idx(toy.field, toy.cfg.search_radius(toy.scale));
    const RenderContext ctx{toy.field, idx, params, toy.cfg, toy.scale};
    std::mt19937_64 rng(14);
    auto rays = toy.rays(20, 2, rng);
    int checked = 0;
    for (auto& q : rays) {
      q.t = {0.5 * (q.ray.t_near + q.ray.t_far)};
      const double delta = q.ray.t_far - q.t[0];
      const Vec3 pos = q.ray.at(q.t[0]);
      const auto nb = idx.k_nearest(pos, toy.cfg.k_neighbors, toy.cfg.search_radius(toy.scale));
      const RayResults r = evaluate_rays(ctx, std::span<const RayQuery>(&q, 1), nullptr, nullptr);
      if (nb.empty()) {
        EXPECT_EQ(r.color.col(0), Vec3::Zero());
        continue;
      }
      ++checked;
      const double sigma =
          decode(kernel_aggregate(pos, nb, toy.field, params, Target::density, toy.view), params, Target::density)(0) *
          toy.cfg.density_scale(toy.scale);
      const Vec3 c = decode(kernel_aggregate(pos, nb, toy.field, params, Target::color, toy.view), params, Target::color);
      const double alpha = 1 - std::exp(-sigma * delta);
      EXPECT_NEAR(r.tau[0], sigma * delta, 1e-10 * (1 + sigma * delta));
      EXPECT_LT((r.color.col(0) - alpha * c).cwiseAbs().maxCoeff(), 1e-12);
    }
    EXPECT_GT(checked, 5);
  }
}

TEST(RenderRay, OpaqueAndTransparentLimits) {
  RaySampleBatch b;
  b.depths = {1.0, 2.0, 3.0};
  b.deltas = {1.0, 1.0, 1.0};
  b.color = Eigen::Matrix3Xd::Random(3, 3).cwiseAbs();
  b.sigma = {0.0, 0.0, 0.0};
  auto o = render_ray(b);
  EXPECT_EQ(o.color, Vec3::Zero());
  EXPECT_EQ(o.acc, 0.0);
  b.sigma = {std::numeric_limits<double>::infinity(), 0.5, 0.5};
  o = render_ray(b);
  EXPECT_EQ(o.color, Vec3(b.color.col(0)));
  EXPECT_EQ(o.acc, 1.0);
  EXPECT_EQ(o.depth, 1.0);
}

TEST(RenderRay, MatchesPrefixProductAndConserves) {
  std::mt19937_64 rng(15);
  std::uniform_real_distribution<double> u(0, 1);
  for (int trial = 0; trial < 2000; ++trial) {
    const int n = 1 + trial % 40;
    RaySampleBatch b;
    b.color = Eigen::Matrix3Xd(3, n);
    double z = 1.0;
    for (int j = 0; j < n; ++j) {
      b.depths.push_back(z);
      b.deltas.push_back(0.01 + 0.2 * u(rng));
      z += b.deltas.back();
      b.sigma.push_back(u(rng) < 0.3 ? 0.0 : 20 * u(rng) * u(rng));
      b.color.col(j) = Vec3(u(rng), u(rng), u(rng));
    }
    const auto o = render_ray(b);
    Vec3 c = Vec3::Zero();
    double acc = 0;
    for (int j = 0; j < n; ++j) {
      double T = 1;
      for (int t = 0; t < j; ++t) T *= std::exp(-b.sigma[static_cast<std::size_t>(t)] * b.deltas[static_cast<std::size_t>(t)]);
      const double w = T * (1 - std::exp(-b.sigma[static_cast<std::size_t>(j)] * b.deltas[static_cast<std::size_t>(j)]));
      EXPECT_GE(w, 0.0);
      c += w * b.color.col(j);
      acc += w;
    }
    EXPECT_LT((o.color - c).cwiseAbs().maxCoeff(), 1e-10);
    EXPECT_NEAR(o.acc, acc, 1e-10);
    EXPECT_GE(o.acc, 0.0);
    EXPECT_LE(o.acc, 1.0);
  }
}

TEST(RenderImage, EmptyFieldIsBlackAndRenderingIsDeterministic) {
  const NeuralPointField empty{Eigen::Matrix3Xd(3, 0)};
  const CameraView v = simple_camera(8, 6, 8.0);
  const auto params = KernelParameters::init(16);
  SamplerConfig sc;
  sc.kind = SamplerKind::uni64;
  const Image black = render_image(empty, nullptr, v, params, sc, KernelConfig{}, 1);
  for (double x : black.data) EXPECT_EQ(x, 0.0);

  Toy toy(17);
  const Image a = render_image(toy.field, nullptr, toy.view, params, sc, toy.cfg, 5);
  const Image b = render_image(toy.field, nullptr, toy.view, params, sc, toy.cfg, 5);
  EXPECT_EQ(a.data, b.data);
  double mx = 0;
  for (double x : a.data) {
    EXPECT_GE(x, 0.0);
    EXPECT_LE(x, 1.0);
    mx = std::max(mx, x);
  }
  EXPECT_GT(mx, 0.0);
}

TEST(MseLoss, ClosedForms) {
  Eigen::Matrix3Xd p(3, 1), g(3, 1), grad;
  p << 1, 0, 0;
  g << 0, 0, 0;
  EXPECT_DOUBLE_EQ(mse_loss(p, g, &grad), 1.0 / 3.0);
  EXPECT_DOUBLE_EQ(grad(0, 0), 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(mse_loss(p, p, &grad), 0.0);
  EXPECT_EQ(grad.squaredNorm(), 0.0);
  EXPECT_THROW(mse_loss(p, Eigen::Matrix3Xd(3, 2), nullptr), InputError);
  // gradient by central differences
  std::mt19937_64 rng(18);
  std::uniform_real_distribution<double> u(0, 1);
  Eigen::Matrix3Xd a = Eigen::Matrix3Xd::NullaryExpr(3, 7, [&] { return u(rng); });
  const Eigen::Matrix3Xd b = Eigen::Matrix3Xd::NullaryExpr(3, 7, [&] { return u(rng); });
  mse_loss(a, b, &grad);
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    const double keep = a.data()[i];
    a.data()[i] = keep + 1e-6;
    const double lp = mse_loss(a, b);
    a.data()[i] = keep - 1e-6;
    const double lm = mse_loss(a, b);
    a.data()[i] = keep;
    EXPECT_NEAR((lp - lm) / 2e-6, grad.data()[i], 1e-8);
  }
}

TEST(EvaluateRays, ParameterGradientsMatchFiniteDifferences) {
  for (auto kind : {AggregatorKind::learnable, AggregatorKind::idw}) {
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
      Toy toy(20 + seed, 50, kind);
      auto params = KernelParameters::init(30 + seed, kind, 8);
      std::mt19937_64 rng(40 + seed);
      const auto rays = toy.rays(4, 12, rng);
      std::uniform_real_distribution<double> u(0, 1);
      const Eigen::Matrix3Xd gt = Eigen::Matrix3Xd::NullaryExpr(3, 4, [&] { return u(rng); });
      const SpatialIndex idx(toy.field, toy.cfg.search_radius(toy.scale));
      const RenderContext ctx{toy.field, idx, params, toy.cfg, toy.scale};
      RayGradients g;
      g.params = params.zeros_like();
      evaluate_rays(ctx, rays, &gt, &g);
      EXPECT_NEAR(g.loss_sum, loss_of(toy, params, rays, gt), 1e-12);
      const auto r = test::check_gradients(params, flatten_params(g.params), [&] { return loss_of(toy, params, rays, gt); });
      EXPECT_LT(r.max_rel_error, 1e-4) << "seed " << seed;
      EXPECT_GT(r.checked, 10);
    }
  }
}

TEST(EvaluateRays, FeatureAndPositionGradientsMatchFiniteDifferences) {
  for (auto kind : {AggregatorKind::learnable, AggregatorKind::idw}) {
    Toy toy(50, 50, kind);
    const auto params = KernelParameters::init(51, kind, 8);
    std::mt19937_64 rng(52);
    const auto rays = toy.rays(4, 12, rng);
    std::uniform_real_distribution<double> u(0, 1);
    const Eigen::Matrix3Xd gt = Eigen::Matrix3Xd::NullaryExpr(3, 4, [&] { return u(rng); });
    RayGradients g;
    g.params = params.zeros_like();
    {
      const SpatialIndex idx(toy.field, toy.cfg.search_radius(toy.scale));
      const RenderContext ctx{toy.field, idx, params, toy.cfg, toy.scale};
      evaluate_rays(ctx, rays, &gt, &g, 1.0, GradRequest{true, kind == AggregatorKind::learnable});
    }
    ASSERT_FALSE(g.points.empty());
    std::vector<double*> ptrs;
    std::vector<double> analytic;
    for (std::size_t i = 0; i < g.points.size(); ++i) {
      const int pt = g.points[i];
      const auto col = static_cast<Eigen::Index>(i);
      for (int c = 0; c < kColorDim; ++c) {
        ptrs.push_back(&toy.field.mutable_color()(c, pt));
        analytic.push_back(g.features(c, col));
      }
      for (int c = 0; c < kLowDim; c += 3) {
        ptrs.push_back(&toy.field.mutable_low()(c, pt));
        analytic.push_back(g.features(kColorDim + c, col));
      }
      for (int c = 0; c < kHighDim; c += 7) {
        ptrs.push_back(&toy.field.mutable_high()(c, pt));
        analytic.push_back(g.features(kColorDim + kLowDim + c, col));
      }
      if (kind == AggregatorKind::learnable) {
        for (int c = 0; c < 3; ++c) {
          ptrs.push_back(&toy.field.mutable_positions()(c, pt));
          analytic.push_back(g.positions(c, col));
        }
      }
    }
    // keep the scene scale fixed while positions move
    const double scale = toy.scale;
    const auto r = test::check_gradients_at(ptrs, analytic, [&] {
      toy.scale = scale;
      return loss_of(toy, params, rays, gt);
    });
    EXPECT_LT(r.max_rel_error, 1e-4);
    EXPECT_GT(r.checked, static_cast<int>(ptrs.size()) / 2);
  }
}

TEST(EvaluateRays, GradientStepReducesSingleRayLoss) {
  Toy toy(60);
  auto params = KernelParameters::init(61);
  std::mt19937_64 rng(62);
  const auto rays = toy.rays(1, 32, rng);
  Eigen::Matrix3Xd gt(3, 1);
  gt << 0.9, 0.1, 0.4;
  const double before = loss_of(toy, params, rays, gt);
  const SpatialIndex idx(toy.field, toy.cfg.search_radius(toy.scale));
  RayGradients g;
  g.params = params.zeros_like();
  evaluate_rays(RenderContext{toy.field, idx, params, toy.cfg, toy.scale}, rays, &gt, &g);
  scale_params(g.params, -1e-3);
  accumulate_params(params, g.params);
  EXPECT_LT(loss_of(toy, params, rays, gt), before);
}

TEST(EvaluateRays, ChunkedMatchesSingleCall) {
  Toy toy(70);
  const auto params = KernelParameters::init(71);
  std::mt19937_64 rng(72);
  const auto rays = toy.rays(150, 16, rng);
  const SpatialIndex idx(toy.field, toy.cfg.search_radius(toy.scale));
  const RenderContext ctx{toy.field, idx, params, toy.cfg, toy.scale};
  const RayResults a = evaluate_rays(ctx, rays, nullptr, nullptr), b = evaluate_rays_chunked(ctx, rays, nullptr, nullptr);
  EXPECT_EQ(a.color, b.color);
  EXPECT_EQ(a.alpha, b.alpha);
  for (std::size_t i = 0; i < a.alpha.size(); ++i) {
    EXPECT_GE(a.alpha[i], 0.0);
    EXPECT_LE(a.alpha[i], 1.0);
  }
}

TEST(EvaluateRays, RaysWithoutNeighborsGiveZeroGradients) {
  Toy toy(70);
  const auto params = KernelParameters::init(71);
  std::mt19937_64 rng(72);
  auto rays = toy.rays(3, 4, rng);
  for (auto& q : rays) q.t = {0.01, 0.02};  // next to the camera, far in front of every point
  Eigen::Matrix3Xd gt = Eigen::Matrix3Xd::Constant(3, 3, 0.5);
  const SpatialIndex idx(toy.field, toy.cfg.search_radius(toy.scale));
  RayGradients g;
  g.params = params.zeros_like();
  const RayResults r = evaluate_rays(RenderContext{toy.field, idx, params, toy.cfg, toy.scale}, rays, &gt, &g, 1.0,
                                     GradRequest{true, true});
  EXPECT_EQ(r.color, Eigen::Matrix3Xd::Zero(3, 3));
  EXPECT_NEAR(g.loss_sum, 9 * 0.25, 1e-15);
  for (double v : flatten_params(g.params)) EXPECT_EQ(v, 0.0);
  EXPECT_TRUE(g.points.empty());
}
