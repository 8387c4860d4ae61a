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
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <utility>
#include <vector>

#include "gpf/depth_visibility.hpp"
#include "gpf/feature_pipeline.hpp"
#include "gpf/kernel_renderer.hpp"

namespace gpf {

struct TrainConfig {
  double lr_params = 5e-4;
  double lr_features = 1e-5;
  double lr_point_colors = 1e-7;
  double final_lr_fraction = 0.1;
  int batch_rays = 512;
  int iters = 0;
  std::uint64_t seed = 0;
  OptimizerKind optimizer = OptimizerKind::sgd;
  bool train_features = false;
  SamplerConfig sampler;
  KernelConfig kernel;

  void validate() const {
    if (!(lr_params > 0.0) || !(lr_features > 0.0) || !(lr_point_colors > 0.0)) {
      throw InputError("TrainConfig: learning rates must be positive");
    }
    if (batch_rays < 1) throw InputError("TrainConfig: batch_rays must be >= 1");
    if (iters < 0) throw InputError("TrainConfig: iters must be >= 0");
    kernel.validate();
  }
};

// ---------------------------------------------------------------------------
// Ray batches

struct PixelRef {
  int view = 0;
  int x = 0;
  int y = 0;
  int id = 0;  ///< running pixel id across all views, reported on divergence
};

/// Uniformly random pixels over all views (views may differ in size).
inline std::vector<PixelRef> draw_pixels(std::span<const CameraView> views, int n, std::uint64_t seed) {
  std::vector<int> offset{0};
  for (const auto& v : views) offset.push_back(offset.back() + v.width * v.height);
  if (offset.back() == 0) throw InputError("draw_pixels: no pixels");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> pick(0, offset.back() - 1);
  std::vector<PixelRef> out(static_cast<std::size_t>(n));
  for (auto& p : out) {
    p.id = pick(rng);
    p.view = static_cast<int>(std::upper_bound(offset.begin(), offset.end(), p.id) - offset.begin()) - 1;
    const int local = p.id - offset[static_cast<std::size_t>(p.view)];
    p.x = local % views[static_cast<std::size_t>(p.view)].width;
    p.y = local / views[static_cast<std::size_t>(p.view)].width;
  }
  return out;
}

struct RayBatch {
  std::vector<RayQuery> queries;
  Eigen::Matrix3Xd targets;
  std::vector<int> pixel_ids;
};

inline RayBatch make_batch(std::span<const CameraView> views, std::span<const PixelRef> pixels, const SceneBounds& bounds,
                           const SamplerConfig& sampler, double scene_scale, std::uint64_t seed) {
  RayBatch b;
  b.queries.reserve(pixels.size());
  b.targets.resize(3, static_cast<Eigen::Index>(pixels.size()));
  for (std::size_t i = 0; i < pixels.size(); ++i) {
    const PixelRef& p = pixels[i];
    const CameraView& v = views[static_cast<std::size_t>(p.view)];
    auto rng = pixel_rng(seed, 1, i);
    b.queries.push_back(make_pixel_query(v, p.x, p.y, bounds, sampler, scene_scale, rng));
    for (int c = 0; c < 3; ++c) b.targets(c, static_cast<Eigen::Index>(i)) = v.image.at(p.x, p.y, c);
    b.pixel_ids.push_back(p.id);
  }
  return b;
}

/// Mean squared error over a fixed, noise-free set of pixels; used for validation.
inline double validation_loss(const NeuralPointField& field, std::span<const CameraView> views, const KernelParameters& params,
                              const KernelConfig& kcfg, SamplerConfig sampler, int n_rays, std::uint64_t seed) {
  if (field.empty()) return std::numeric_limits<double>::infinity();
  sampler.perturb = false;
  const double scale = field.scene_scale();
  const SpatialIndex index(field, kcfg.search_radius(scale));
  const auto px = draw_pixels(views, n_rays, mix_seed(seed, 0xa11d));
  const RayBatch b = make_batch(views, px, render_bounds(field, kcfg), sampler, scale, seed);
  const RenderContext ctx{field, index, params, kcfg, scale};
  const RayResults r = evaluate_rays_chunked(ctx, b.queries, nullptr, nullptr);
  return mse_loss(r.color, b.targets);
}

// ---------------------------------------------------------------------------
// Training

/// Per-point optimizer state for point features (lazy: only touched columns move).
class PointFeatureOptimizer {
 public:
  explicit PointFeatureOptimizer(OptimizerKind kind = OptimizerKind::sgd) : kind_(kind) {}

  void step(NeuralPointField& field, const RayGradients& g, double lr_features, double lr_colors) {
    if (g.points.empty()) return;
    if (kind_ == OptimizerKind::adam && m_.cols() != field.size()) {
      m_ = MatX::Zero(kFeatureDim, field.size());
      v_ = MatX::Zero(kFeatureDim, field.size());
    }
    ++t_;
    const double c1 = 1.0 - std::pow(0.9, static_cast<double>(t_)), c2 = 1.0 - std::pow(0.999, static_cast<double>(t_));
    for (std::size_t i = 0; i < g.points.size(); ++i) {
      const int pt = g.points[i];
      Eigen::Matrix<double, kFeatureDim, 1> f = field.features(pt);
      for (int r = 0; r < kFeatureDim; ++r) {
        const double lr = r < kColorDim ? lr_colors : lr_features;
        const double gr = g.features(r, static_cast<Eigen::Index>(i));
        if (kind_ == OptimizerKind::sgd) {
          f(r) -= lr * gr;
        } else {
          double& m = m_(r, pt);
          double& v = v_(r, pt);
          m = 0.9 * m + 0.1 * gr;
          v = 0.999 * v + 0.001 * gr * gr;
          f(r) -= lr * (m / c1) / (std::sqrt(v / c2) + 1e-8);
        }
      }
      f.head<kColorDim>() = f.head<kColorDim>().cwiseMax(0.0).cwiseMin(1.0);
      field.set_features(pt, f);
    }
  }

 private:
  OptimizerKind kind_;
  MatX m_, v_;
  long t_ = 0;
};

/// Feature-fetching networks trained jointly with the kernel: features of touched points are
/// re-fetched every iteration and gradients flow back into the aggregators.
struct FetchTraining {
  const FetchInputs* inputs = nullptr;
  FetchAggregatorParams* params = nullptr;
};

struct TrainHistory {
  std::vector<double> loss;  ///< mean squared error of each iteration's batch
};

/// Point ids reachable from any sample of `queries` (sorted, unique).
inline std::vector<int> touched_points(const RenderContext& ctx, std::span<const RayQuery> queries) {
  const double r = ctx.cfg.search_radius(ctx.scene_scale);
  std::vector<char> mark(static_cast<std::size_t>(ctx.field.size()), 0);
  std::vector<Neighbor> nb;
  for (const auto& q : queries)
    for (double t : q.t) {
      ctx.index.k_nearest(q.ray.at(t), ctx.cfg.k_neighbors, r, nb);
      for (const auto& n : nb) mark[static_cast<std::size_t>(n.index)] = 1;
    }
  std::vector<int> out;
  for (int i = 0; i < ctx.field.size(); ++i)
    if (mark[static_cast<std::size_t>(i)]) out.push_back(i);
  return out;
}

/// Gradient descent on the photometric loss. Updates `params` (and point features when
/// cfg.train_features, fetch aggregators when `fetch` is given). Deterministic for a seed.
inline TrainHistory train(NeuralPointField& field, std::span<const CameraView> views, KernelParameters& params,
                          const TrainConfig& cfg, FetchTraining fetch = {},
                          const std::function<void(int, double)>& on_iter = nullptr) {
  cfg.validate();
  if (views.empty()) throw InputError("train: no views");
  field.validate();
  TrainHistory hist;
  if (cfg.iters == 0) return hist;
  const double scale = field.scene_scale();
  const SpatialIndex index(field, cfg.kernel.search_radius(scale));
  const SceneBounds bounds = render_bounds(field, cfg.kernel);
  Optimizer opt(cfg.optimizer), fetch_opt(cfg.optimizer);
  PointFeatureOptimizer feat_opt(cfg.optimizer);
  const bool use_fetch = fetch.inputs != nullptr && fetch.params != nullptr;
  if (use_fetch && fetch.inputs->points() != field.size()) throw ContractViolation("train: fetch inputs do not match field");
  const GradRequest req{cfg.train_features || use_fetch, false};

  for (int it = 0; it < cfg.iters; ++it) {
    const double lr = cosine_annealed_lr(cfg.lr_params, it, cfg.iters, cfg.final_lr_fraction);
    const double lr_f = cosine_annealed_lr(cfg.lr_features, it, cfg.iters, cfg.final_lr_fraction);
    const double lr_c = cosine_annealed_lr(cfg.lr_point_colors, it, cfg.iters, cfg.final_lr_fraction);
    const auto px = draw_pixels(views, cfg.batch_rays, mix_seed(cfg.seed, 2, static_cast<std::uint64_t>(it)));
    const RayBatch batch = make_batch(views, px, bounds, cfg.sampler, scale, mix_seed(cfg.seed, 3, static_cast<std::uint64_t>(it)));
    const RenderContext ctx{field, index, params, cfg.kernel, scale};

    std::vector<int> fetched;
    FetchTape ftape;
    if (use_fetch) {
      fetched = touched_points(ctx, batch.queries);
      const FetchedFeatures f = fetch_forward(*fetch.inputs, *fetch.params, fetched, &ftape);
      for (std::size_t i = 0; i < fetched.size(); ++i) {
        const auto c = static_cast<Eigen::Index>(i);
        field.mutable_color().col(fetched[i]) = f.color.col(c);
        field.mutable_low().col(fetched[i]) = f.low.col(c);
        field.mutable_high().col(fetched[i]) = f.high.col(c);
      }
    }

    RayGradients g;
    g.params = params.zeros_like();
    const double inv = 1.0 / (3.0 * cfg.batch_rays);
    evaluate_rays_chunked(ctx, batch.queries, &batch.targets, &g, inv, req);
    const double loss = g.loss_sum * inv;
    if (!std::isfinite(loss) || !params_finite(g.params) || !g.features.allFinite()) {
      throw TrainingDiverged("train: non-finite loss or gradient at iteration " + std::to_string(it), it, batch.pixel_ids);
    }
    hist.loss.push_back(loss);
    if (on_iter) on_iter(it, loss);
    opt.step(params, g.params, lr);

    if (use_fetch) {
      const auto m = static_cast<Eigen::Index>(fetched.size());
      MatX dc = MatX::Zero(kColorDim, m), dl = MatX::Zero(kLowDim, m), dh = MatX::Zero(kHighDim, m);
      std::size_t j = 0;
      for (std::size_t i = 0; i < g.points.size(); ++i) {
        while (fetched[j] != g.points[i]) ++j;
        const auto gi = static_cast<Eigen::Index>(i);
        dc.col(static_cast<Eigen::Index>(j)) = g.features.col(gi).head<kColorDim>();
        dl.col(static_cast<Eigen::Index>(j)) = g.features.col(gi).segment<kLowDim>(kColorDim);
        dh.col(static_cast<Eigen::Index>(j)) = g.features.col(gi).tail<kHighDim>();
      }
      FetchAggregatorParams fg = fetch.params->zeros_like();
      fetch_backward(*fetch.inputs, *fetch.params, ftape, dc, dl, dh, fg);
      if (!params_finite(fg)) throw TrainingDiverged("train: non-finite fetch gradient", it, batch.pixel_ids);
      fetch_opt.step(*fetch.params, fg, lr);
    } else if (cfg.train_features) {
      feat_opt.step(field, g, lr_f, lr_c);
    }
  }
  return hist;
}

// ---------------------------------------------------------------------------
// Finetuning

struct FinetuneConfig {
  double t_opacity = 0.5;
  double t_dist_frac = 0.0;  ///< 0 means the kernel search radius
  int grow_batch = 4096;     ///< rays inspected per grow pass
  int grow_samples = 256;    ///< uniform samples per inspected ray; fine enough to find the center of a surface crossing
  int grow_passes = 1;
  int prune_batch = 3192;
  double refine_offset_weight = 1.0;
  double radius_scale = 1.75;
  double refine_lr = 1.0;
  int stage1_iters = 500;
  int refine_iters = 200;
  int max_cycles = 10;
  double min_rel_improvement = 1e-4;
  int validation_rays = 2048;
  /// Stage 1 trains the kernel at the enlarged radius used for growing.
  bool train_enlarged = true;
  DepthEstimationConfig depth;

  double t_dist(const KernelConfig& k, double scale) const {
    return (t_dist_frac > 0.0 ? t_dist_frac : k.search_radius_frac) * scale;
  }
  void validate() const {
    if (!(t_opacity > 0.0 && t_opacity < 1.0)) throw InputError("FinetuneConfig: t_opacity must be in (0,1)");
    if (t_dist_frac < 0.0) throw InputError("FinetuneConfig: t_dist must be positive");
    if (grow_batch < 0 || grow_samples < 2 || prune_batch < 0) throw InputError("FinetuneConfig: bad batch sizes");
    if (!(refine_offset_weight >= 0.0)) throw InputError("FinetuneConfig: refine_offset_weight must be >= 0");
    if (radius_scale < 1.5 || radius_scale > 2.0) throw InputError("FinetuneConfig: radius_scale must be in [1.5, 2]");
    if (max_cycles < 0) throw InputError("FinetuneConfig: max_cycles must be >= 0");
  }
};

inline KernelConfig enlarged(KernelConfig k, double factor) {
  k.search_radius_frac *= factor;
  if (k.density_unit_frac == 0.0) k.density_unit_frac = k.search_radius_frac / factor;
  return k;
}

struct GrowResult {
  int added = 0;
};

/// Adds at most one point per inspected ray, at the center of its first opaque run of samples,
/// when that sample is at least t_dist from every existing point.
/// The kernel is evaluated at the enlarged radius so empty regions next to points get a density.
inline GrowResult grow_points(NeuralPointField& field, std::span<const CameraView> views, const KernelParameters& params,
                              const KernelConfig& kcfg, const FinetuneConfig& fcfg, std::uint64_t seed) {
  fcfg.validate();
  GrowResult res;
  if (field.empty() || fcfg.grow_batch == 0) return res;
  const double scale = field.scene_scale();
  const KernelConfig big = enlarged(kcfg, fcfg.radius_scale);
  const double t_dist = fcfg.t_dist(kcfg, scale);
  for (int pass = 0; pass < fcfg.grow_passes; ++pass) {
    const SpatialIndex index(field, big.search_radius(scale));
    const SceneBounds bounds = render_bounds(field, kcfg);
    const auto px = draw_pixels(views, fcfg.grow_batch, mix_seed(seed, 21, static_cast<std::uint64_t>(pass)));
    std::vector<RayQuery> qs;
    qs.reserve(px.size());
    for (std::size_t i = 0; i < px.size(); ++i) {
      const CameraView& v = views[static_cast<std::size_t>(px[i].view)];
      RayQuery q;
      q.view = &v;
      q.ray = make_ray(v, pixel_center(px[i].x, px[i].y), bounds);
      auto rng = pixel_rng(seed, 22 + static_cast<std::uint64_t>(pass), i);
      if (!q.ray.empty()) q.t = uniform_sample(q.ray, fcfg.grow_samples, &rng);
      qs.push_back(std::move(q));
    }
    const RenderContext ctx{field, index, params, big, scale};
    const RayResults r = evaluate_rays_chunked(ctx, qs, nullptr, nullptr);

    std::vector<Vec3> fresh;
    std::vector<Eigen::Matrix<double, kFeatureDim, 1>> fresh_f;
    std::vector<Neighbor> nb;
    std::size_t s = 0;
    for (const auto& q : qs) {
      // One candidate per ray: walk to the first run of occupied samples whose accumulated
      // opacity exceeds t_opacity and take the sample nearest its density-weighted center.
      // Densities are nearly flat across the kernel support, so the center of the run sits on
      // the surface, while single samples would land anywhere in the shell around it.
      const std::size_t n = q.t.size();
      std::size_t best = n;
      for (std::size_t j = 0; j < n && best == n;) {
        if (!(r.tau[s + j] > 0.0)) {
          ++j;
          continue;
        }
        std::size_t e = j;
        double tau = 0.0, wt = 0.0, wsum = 0.0;
        for (; e < n && r.tau[s + e] > 0.0; ++e) {
          const double delta = (e + 1 < n ? q.t[e + 1] : q.ray.t_far) - q.t[e];
          const double sigma = delta > 0.0 ? r.tau[s + e] / delta : 0.0;
          tau += r.tau[s + e];
          wt += sigma * q.t[e];
          wsum += sigma;
        }
        if (-std::expm1(-tau) > fcfg.t_opacity && wsum > 0.0) {
          const double center = wt / wsum;
          best = j;
          for (std::size_t k = j + 1; k < e; ++k)
            if (std::abs(q.t[k] - center) < std::abs(q.t[best] - center)) best = k;
        }
        j = e;
      }
      s += n;
      if (best == n) continue;
      const Vec3 p = q.ray.at(q.t[best]);
      index.k_nearest(p, 1, t_dist, nb);
      if (!nb.empty()) continue;
      bool clash = false;
      for (const auto& f : fresh) clash = clash || (f - p).norm() < t_dist;
      if (clash) continue;
      index.k_nearest(p, big.k_neighbors, big.search_radius(scale), nb);
      if (nb.empty()) continue;
      Eigen::Matrix<double, kFeatureDim, 1> f = Eigen::Matrix<double, kFeatureDim, 1>::Zero();
      for (const auto& n : nb) f += field.features(n.index);
      fresh.push_back(p);
      fresh_f.push_back(f / static_cast<double>(nb.size()));
    }
    for (std::size_t i = 0; i < fresh.size(); ++i) field.append(fresh[i], fresh_f[i]);
    res.added += static_cast<int>(fresh.size());
  }
  return res;
}

struct PruneResult {
  int removed = 0;
  bool aborted = false;
};

/// Path length used to turn the density at a point into alpha: one crossing of the kernel support.
inline double opacity_step(const NeuralPointField& field, const KernelConfig& kcfg) {
  return 2.0 * kcfg.search_radius(field.scene_scale());
}

/// Opacity at each listed point's own position, with the point removed from its neighbour set.
/// Each point is looked at from the camera whose center is nearest.
inline std::vector<double> self_excluded_opacity(const NeuralPointField& field, std::span<const CameraView> views,
                                                 const KernelParameters& params, const KernelConfig& kcfg, double step,
                                                 std::span<const int> points) {
  const double scale = field.scene_scale();
  const SpatialIndex index(field, kcfg.search_radius(scale));
  std::vector<RayQuery> qs;
  qs.reserve(points.size());
  for (int i : points) {
    const Vec3 p = field.position(i);
    std::size_t best = 0;
    for (std::size_t v = 1; v < views.size(); ++v)
      if ((views[v].center() - p).squaredNorm() < (views[best].center() - p).squaredNorm()) best = v;
    RayQuery q;
    q.view = &views[best];
    Vec3 dir = p - views[best].center();
    dir = dir.norm() > 0.0 ? Vec3(dir.normalized()) : Vec3::UnitZ();
    q.ray = Ray{p, dir, 0.0, step};
    q.t = {0.0};
    q.exclude = i;
    qs.push_back(std::move(q));
  }
  const RenderContext ctx{field, index, params, kcfg, scale};
  const RayResults r = evaluate_rays_chunked(ctx, qs, nullptr, nullptr);
  return std::vector<double>(r.acc.data(), r.acc.data() + r.acc.size());
}

/// Deletes points from a random batch whose self-excluded opacity is at most t_opacity.
inline PruneResult prune_points(NeuralPointField& field, std::span<const CameraView> views, const KernelParameters& params,
                                const KernelConfig& kcfg, const FinetuneConfig& fcfg, std::uint64_t seed) {
  fcfg.validate();
  PruneResult res;
  if (field.empty() || views.empty()) return res;
  std::vector<int> order(static_cast<std::size_t>(field.size()));
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(mix_seed(seed, 31));
  std::shuffle(order.begin(), order.end(), rng);
  order.resize(static_cast<std::size_t>(std::min(fcfg.prune_batch, field.size())));
  std::sort(order.begin(), order.end());
  const auto alpha = self_excluded_opacity(field, views, params, kcfg, opacity_step(field, kcfg), order);
  std::vector<bool> keep(static_cast<std::size_t>(field.size()), true);
  int removed = 0;
  for (std::size_t i = 0; i < order.size(); ++i) {
    if (alpha[i] <= fcfg.t_opacity) {
      keep[static_cast<std::size_t>(order[i])] = false;
      ++removed;
    }
  }
  if (removed == field.size()) {
    res.aborted = true;
    return res;
  }
  if (removed > 0) field.keep_if(keep);
  res.removed = removed;
  return res;
}

struct RefineResult {
  Eigen::Matrix3Xd offsets;
  std::vector<double> loss;
};

/// Optimizes per-point offsets on the photometric loss plus
/// refine_offset_weight * mean_i ||dp_i||^2 / scale^2, with features and networks frozen.
/// The penalty is applied as an exact proximal shrink after each gradient step, so an
/// infinite weight keeps every offset at zero. Depth maps are recomputed afterwards.
inline RefineResult refine_points(NeuralPointField& field, std::span<CameraView> views, const KernelParameters& params,
                                  const TrainConfig& tcfg, const FinetuneConfig& fcfg, int iters) {
  fcfg.validate();
  tcfg.validate();
  RefineResult res;
  res.offsets = Eigen::Matrix3Xd::Zero(3, field.size());
  if (iters <= 0 || field.empty()) return res;
  const Eigen::Matrix3Xd base = field.positions();
  const double scale = field.scene_scale();
  const SceneBounds bounds = render_bounds(field, tcfg.kernel);
  const double n = field.size();
  Eigen::Matrix3Xd m = Eigen::Matrix3Xd::Zero(3, field.size()), v = m;  // Adam moments
  long t = 0;
  for (int it = 0; it < iters; ++it) {
    field.mutable_positions() = base + res.offsets;
    const SpatialIndex index(field, tcfg.kernel.search_radius(scale));
    const double lr = cosine_annealed_lr(fcfg.refine_lr, it, iters, tcfg.final_lr_fraction);
    const auto px = draw_pixels(views, tcfg.batch_rays, mix_seed(tcfg.seed, 41, static_cast<std::uint64_t>(it)));
    const RayBatch batch =
        make_batch(views, px, bounds, tcfg.sampler, scale, mix_seed(tcfg.seed, 42, static_cast<std::uint64_t>(it)));
    RayGradients g;
    g.params = params.zeros_like();
    const double inv = 1.0 / (3.0 * tcfg.batch_rays);
    const RenderContext ctx{field, index, params, tcfg.kernel, scale};
    evaluate_rays_chunked(ctx, batch.queries, &batch.targets, &g, inv, GradRequest{false, true});
    const double loss = g.loss_sum * inv;
    if (!std::isfinite(loss) || !g.positions.allFinite()) {
      throw TrainingDiverged("refine: non-finite loss or gradient", it, batch.pixel_ids);
    }
    res.loss.push_back(loss + fcfg.refine_offset_weight * res.offsets.squaredNorm() / (n * scale * scale));
    if (tcfg.optimizer == OptimizerKind::adam) {
      ++t;
      const double c1 = 1.0 - std::pow(0.9, static_cast<double>(t)), c2 = 1.0 - std::pow(0.999, static_cast<double>(t));
      for (std::size_t i = 0; i < g.points.size(); ++i) {
        const int pt = g.points[i];
        const Vec3 gr = g.positions.col(static_cast<Eigen::Index>(i));
        m.col(pt) = 0.9 * m.col(pt) + 0.1 * gr;
        v.col(pt) = 0.999 * v.col(pt) + 0.001 * gr.cwiseProduct(gr);
        res.offsets.col(pt).array() -= lr * (m.col(pt).array() / c1) / ((v.col(pt).array() / c2).sqrt() + 1e-12);
      }
    } else {
      for (std::size_t i = 0; i < g.points.size(); ++i)
        res.offsets.col(g.points[i]) -= lr * g.positions.col(static_cast<Eigen::Index>(i));
    }
    const double w = fcfg.refine_offset_weight;
    if (std::isinf(w)) {
      res.offsets.setZero();
    } else {
      res.offsets /= 1.0 + 2.0 * lr * w / (n * scale * scale);
    }
  }
  field.mutable_positions() = base + res.offsets;
  compute_depth_maps(field, views, fcfg.depth);
  return res;
}

struct StageRecord {
  int cycle = 0;
  int stage = 0;  ///< 1 feature tuning, 2 grow + prune, 3 refine
  double loss = 0.0;
  int points = 0;
  int added = 0;
  int removed = 0;
  std::vector<double> iter_loss;  ///< batch losses of the stage's optimizer steps, if any
};

struct FinetuneResult {
  NeuralPointField field;
  KernelParameters params;
  KernelConfig kernel;  ///< kernel settings the returned parameters render with
  std::vector<StageRecord> records;
  double initial_loss = 0.0;
  double best_loss = 0.0;
  int best_cycle = -1;  ///< -1 means the input was the best
};

/// Which stages run each cycle (all by default).
struct StageMask {
  bool features = true;
  bool grow_prune = true;
  bool refine = true;
};

/// Runs feature tuning, grow/prune and refinement in turn until the validation loss
/// stops improving, and returns the best checkpoint. `views` end with depth maps for
/// the returned field.
inline FinetuneResult finetune_schedule(const NeuralPointField& input, std::span<CameraView> views,
                                        const KernelParameters& input_params, const TrainConfig& tcfg,
                                        const FinetuneConfig& fcfg, StageMask stages = {},
                                        std::span<const CameraView> validation = {}) {
  fcfg.validate();
  tcfg.validate();
  const std::span<const CameraView> val = validation.empty() ? std::span<const CameraView>(views) : validation;
  const KernelConfig train_kernel = fcfg.train_enlarged ? enlarged(tcfg.kernel, fcfg.radius_scale) : tcfg.kernel;
  auto vloss = [&](const NeuralPointField& f, const KernelParameters& p, const KernelConfig& k) {
    return validation_loss(f, val, p, k, tcfg.sampler, fcfg.validation_rays, tcfg.seed);
  };
  FinetuneResult res{input, input_params, tcfg.kernel, {}, 0.0, 0.0, -1};
  res.initial_loss = res.best_loss = vloss(input, input_params, tcfg.kernel);
  std::vector<std::optional<Image>> best_depth;
  for (const auto& v : views) best_depth.push_back(v.depth_map);
  NeuralPointField field = input;
  KernelParameters params = input_params;
  double prev = res.initial_loss;
  for (int cycle = 0; cycle < fcfg.max_cycles; ++cycle) {
    const std::uint64_t cs = mix_seed(tcfg.seed, 50, static_cast<std::uint64_t>(cycle));
    std::vector<double> stage_loss;
    // stage 1: features + kernel
    if (stages.features) {
      TrainConfig t1 = tcfg;
      t1.iters = fcfg.stage1_iters;
      t1.train_features = true;
      t1.kernel = train_kernel;
      t1.seed = mix_seed(cs, 1);
      stage_loss = train(field, views, params, t1).loss;
    }
    res.records.push_back({cycle, 1, vloss(field, params, train_kernel), field.size(), 0, 0, std::exchange(stage_loss, {})});
    // stage 2: grow + prune
    int added = 0, removed = 0;
    if (stages.grow_prune) {
      added = grow_points(field, views, params, tcfg.kernel, fcfg, mix_seed(cs, 2)).added;
      removed = prune_points(field, views, params, train_kernel, fcfg, mix_seed(cs, 3)).removed;
      compute_depth_maps(field, views, fcfg.depth);
    }
    res.records.push_back({cycle, 2, vloss(field, params, train_kernel), field.size(), added, removed, {}});
    // stage 3: refine
    if (stages.refine) {
      TrainConfig t3 = tcfg;
      t3.kernel = train_kernel;
      t3.seed = mix_seed(cs, 4);
      stage_loss = refine_points(field, views, params, t3, fcfg, fcfg.refine_iters).loss;
    }
    const double loss = vloss(field, params, train_kernel);
    res.records.push_back({cycle, 3, loss, field.size(), 0, 0, std::exchange(stage_loss, {})});
    if (loss < res.best_loss) {
      res.best_loss = loss;
      res.best_cycle = cycle;
      res.field = field;
      res.params = params;
      res.kernel = train_kernel;
      for (std::size_t v = 0; v < views.size(); ++v) best_depth[v] = views[v].depth_map;
    }
    const double rel = (prev - loss) / std::max(std::abs(prev), 1e-300);
    prev = loss;
    if (rel < fcfg.min_rel_improvement) break;
  }
  for (std::size_t v = 0; v < views.size(); ++v) views[v].depth_map = best_depth[v];
  return res;
}

}  // namespace gpf
