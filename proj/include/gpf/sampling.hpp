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

namespace gpf {

/// Log-sampling settings. Noise and offset lengths are fractions of the scene scale.
struct LogSamplingConfig {
  int n_k = 8;
  double base = 1.8;
  double center_noise_sigma = 1e-4;
  double base_noise_halfwidth = 0.1;
  double offset_scale_frac = 1.0 / 200.0;
  std::uint64_t rng_seed = 0;

  void validate() const {
    if (n_k < 1) throw InputError("LogSamplingConfig: n_k must be >= 1");
    if (!(base > 1.0)) throw InputError("LogSamplingConfig: base must be > 1");
    if (center_noise_sigma < 0.0 || base_noise_halfwidth < 0.0) throw InputError("LogSamplingConfig: noise must be >= 0");
    if (!(offset_scale_frac > 0.0)) throw InputError("LogSamplingConfig: offset scale must be positive");
  }
};

/// Sorts ascending, clamps into [lo, hi] and removes exact duplicates.
inline std::vector<double> clamp_sort_dedup(std::vector<double> t, double lo, double hi) {
  for (double& v : t) v = std::clamp(v, lo, hi);
  std::sort(t.begin(), t.end());
  t.erase(std::unique(t.begin(), t.end()), t.end());
  return t;
}

/// Unclamped symmetric log offsets around `center`: center +- offset_scale * base^(n_k/(n_k-1) * (i-1)).
inline std::vector<double> log_offsets(double center, int n_k, double base, double offset_scale) {
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(2 * n_k));
  const double growth = n_k > 1 ? static_cast<double>(n_k) / (n_k - 1) : 0.0;
  for (int i = 1; i <= n_k; ++i) {
    const double off = offset_scale * std::pow(base, growth * (i - 1));
    out.push_back(center - off);
    out.push_back(center + off);
  }
  return out;
}

/// Nonuniform sample depths (ray parameter t) spreading out from the surface estimate.
/// `rng` may be null for noise-free sampling.
inline std::vector<double> log_sample(const Ray& ray, double center_t, const LogSamplingConfig& cfg, double scene_scale,
                                      std::mt19937_64* rng) {
  cfg.validate();
  if (!(center_t > ray.t_near && center_t < ray.t_far)) {
    throw SamplingFallback("log_sample: center depth outside the ray bounds");
  }
  double center = center_t;
  double base = cfg.base;
  if (rng) {
    if (cfg.center_noise_sigma > 0.0) {
      std::normal_distribution<double> n(0.0, cfg.center_noise_sigma * scene_scale);
      center += n(*rng);
    }
    if (cfg.base_noise_halfwidth > 0.0) {
      std::uniform_real_distribution<double> u(-cfg.base_noise_halfwidth, cfg.base_noise_halfwidth);
      base += u(*rng);
    }
  }
  base = std::max(base, 1.0 + 1e-6);
  return clamp_sort_dedup(log_offsets(center, cfg.n_k, base, cfg.offset_scale_frac * scene_scale), ray.t_near, ray.t_far);
}

/// n stratified depths on [t_near, t_far]: bin midpoints, or jittered within bins when rng is given.
inline std::vector<double> uniform_sample(const Ray& ray, int n, std::mt19937_64* rng = nullptr) {
  if (n < 2) throw InputError("uniform_sample: n must be >= 2");
  std::vector<double> t(static_cast<std::size_t>(n));
  const double step = (ray.t_far - ray.t_near) / n;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int i = 0; i < n; ++i) {
    const double frac = rng ? u(*rng) : 0.5;
    t[static_cast<std::size_t>(i)] = ray.t_near + (i + frac) * step;
  }
  return t;
}

enum class SamplerKind { log16, uni64, uni128, uni64_128, surf2 };

inline SamplerKind parse_sampler(const std::string& s) {
  if (s == "log16" || s == "log") return SamplerKind::log16;
  if (s == "uni64") return SamplerKind::uni64;
  if (s == "uni128") return SamplerKind::uni128;
  if (s == "uni64+128") return SamplerKind::uni64_128;
  if (s == "surf2") return SamplerKind::surf2;
  throw InputError("unknown sampler '" + s + "'");
}

inline std::string to_string(SamplerKind k) {
  switch (k) {
    case SamplerKind::log16: return "log16";
    case SamplerKind::uni64: return "uni64";
    case SamplerKind::uni128: return "uni128";
    case SamplerKind::uni64_128: return "uni64+128";
    case SamplerKind::surf2: return "surf2";
  }
  return "?";
}

struct SamplerConfig {
  SamplerKind kind = SamplerKind::log16;
  LogSamplingConfig log;
  bool perturb = true;  ///< noise for log/surf samplers, stratified jitter for uniform ones
};

struct SamplingDecision {
  enum class Kind { log, uniform } kind = Kind::uniform;
  double center_t = 0.0;
};

/// Unknown depth (0) falls back to uniform sampling; otherwise log sampling around the
/// ray parameter that reaches the given camera-space depth.
inline SamplingDecision fallback_policy(const Ray& ray, double depth_map_value, const CameraView& view) {
  SamplingDecision d;
  if (depth_map_value == 0.0 || ray.empty()) return d;
  const double cos_axis = view.rotation().row(2).dot(ray.direction);
  if (!(cos_axis > 0.0)) return d;
  const double t = depth_map_value / cos_axis;
  if (!(t > ray.t_near && t < ray.t_far)) return d;
  d.kind = SamplingDecision::Kind::log;
  d.center_t = t;
  return d;
}

/// Sample depths for one ray under the configured strategy.
inline std::vector<double> sample_ray(const Ray& ray, double depth_map_value, const CameraView& view, const SamplerConfig& cfg,
                                      double scene_scale, std::mt19937_64& rng) {
  if (ray.empty()) return {};
  std::mt19937_64* noise = cfg.perturb ? &rng : nullptr;
  switch (cfg.kind) {
    case SamplerKind::uni64: return uniform_sample(ray, 64, noise);
    case SamplerKind::uni128: return uniform_sample(ray, 128, noise);
    case SamplerKind::uni64_128: {
      const auto a = uniform_sample(ray, 64, noise);
      const auto b = uniform_sample(ray, 128, noise);
      std::vector<double> both;
      both.reserve(a.size() + b.size());
      for (const auto* part : {&a, &b})
        for (double t : *part) both.push_back(t);
      return clamp_sort_dedup(std::move(both), ray.t_near, ray.t_far);
    }
    case SamplerKind::log16:
    case SamplerKind::surf2: {
      const SamplingDecision dec = fallback_policy(ray, depth_map_value, view);
      const int n_uniform = cfg.kind == SamplerKind::surf2 ? 2 : 2 * cfg.log.n_k;
      if (dec.kind == SamplingDecision::Kind::uniform) return uniform_sample(ray, n_uniform, noise);
      if (cfg.kind == SamplerKind::surf2) {
        LogSamplingConfig one = cfg.log;
        one.n_k = 1;
        return log_sample(ray, dec.center_t, one, scene_scale, noise);
      }
      return log_sample(ray, dec.center_t, cfg.log, scene_scale, noise);
    }
  }
  return {};
}

}  // namespace gpf
