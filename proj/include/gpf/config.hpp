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
#include <limits>
#include <set>
#include <string>

#include <json.hpp>

#include "gpf/depth_visibility.hpp"
#include "gpf/io.hpp"
#include "gpf/kernel_renderer.hpp"
#include "gpf/sampling.hpp"
#include "gpf/synth.hpp"
#include "gpf/training.hpp"

// Every tunable default in one place, overridable from a JSON file.

namespace gpf {

struct Settings {
  synth::SynthConfig synth;
  DepthEstimationConfig depth;
  int fetch_top_k = 3;
  int fetch_hidden = 32;
  int kernel_hidden = 32;
  TrainConfig train;  ///< also holds the sampler and kernel settings
  FinetuneConfig finetune;
  int transfer_k = 8;

  void validate() const {
    synth.validate();
    depth.validate();
    train.sampler.log.validate();
    train.validate();
    finetune.validate();
    if (fetch_top_k < 1) throw InputError("config: fetch.top_k must be >= 1");
    if (fetch_hidden < 1 || kernel_hidden < 1) throw InputError("config: hidden widths must be >= 1");
    if (transfer_k < 1) throw InputError("config: edit.transfer_k must be >= 1");
  }
};

namespace detail {

/// Reads optional keys of one JSON object and rejects keys nobody asked for.
class Section {
 public:
  Section(const nlohmann::json& root, const std::string& name) : name_(name) {
    if (!root.contains(name)) return;
    obj_ = &root.at(name);
    if (!obj_->is_object()) throw InputError("config: '" + name + "' must be an object");
  }

  template <class T>
  void get(const std::string& key, T& out) {
    seen_.insert(key);
    if (!obj_ || !obj_->contains(key)) return;
    try {
      if constexpr (std::is_floating_point_v<T>) {
        // JSON has no infinity literal
        const auto& v = obj_->at(key);
        if (v.is_string() && v.get<std::string>() == "inf") {
          out = std::numeric_limits<T>::infinity();
          return;
        }
      }
      out = obj_->at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
      throw InputError("config: bad value for " + name_ + "." + key);
    }
  }

  template <class E, class Parse>
  void get_enum(const std::string& key, E& out, Parse parse) {
    std::string s;
    seen_.insert(key);
    if (!obj_ || !obj_->contains(key)) return;
    get(key, s);
    out = parse(s);
  }

  void finish() const {
    if (!obj_) return;
    for (const auto& [k, v] : obj_->items())
      if (!seen_.count(k)) throw InputError("config: unknown key " + name_ + "." + k);
  }

 private:
  std::string name_;
  const nlohmann::json* obj_ = nullptr;
  std::set<std::string> seen_;
};

inline AggregatorKind parse_aggregator(const std::string& s) {
  if (s == "learnable") return AggregatorKind::learnable;
  if (s == "idw") return AggregatorKind::idw;
  throw InputError("unknown aggregator '" + s + "'");
}

inline OptimizerKind parse_optimizer(const std::string& s) {
  if (s == "sgd") return OptimizerKind::sgd;
  if (s == "adam") return OptimizerKind::adam;
  throw InputError("unknown optimizer '" + s + "'");
}

}  // namespace detail

/// Applies the overrides in `j` on top of `s`. Unknown sections or keys are errors.
inline void apply_overrides(Settings& s, const nlohmann::json& j) {
  using detail::Section;
  if (!j.is_object()) throw InputError("config: top level must be an object");
  static const std::set<std::string> sections{"synth", "depth", "fetch", "sampling", "kernel", "train", "finetune", "edit"};
  for (const auto& [k, v] : j.items())
    if (!sections.count(k)) throw InputError("config: unknown section '" + k + "'");

  {
    Section c(j, "synth");
    c.get_enum("kind", s.synth.kind, synth::parse_kind);
    c.get("n_points", s.synth.n_points);
    c.get("n_views", s.synth.n_views);
    c.get("holdout_views", s.synth.holdout_views);
    c.get("resolution", s.synth.resolution);
    c.get("seed", s.synth.seed);
    c.get("textured", s.synth.textured);
    c.get("fov_deg", s.synth.fov_deg);
    c.finish();
  }
  {
    Section c(j, "depth");
    c.get("samples_per_ray", s.depth.samples_per_ray);
    c.get("search_radius_frac", s.depth.search_radius_frac);
    c.get("bandwidth_frac", s.depth.bandwidth_frac);
    c.get("top_k_views", s.depth.top_k_views);
    c.get("optical_reference_scale", s.depth.optical_reference_scale);
    c.finish();
  }
  {
    Section c(j, "fetch");
    c.get("top_k", s.fetch_top_k);
    c.get("hidden", s.fetch_hidden);
    c.finish();
  }
  {
    Section c(j, "sampling");
    auto& sm = s.train.sampler;
    c.get_enum("kind", sm.kind, parse_sampler);
    c.get("perturb", sm.perturb);
    c.get("n_k", sm.log.n_k);
    c.get("base", sm.log.base);
    c.get("center_noise_sigma", sm.log.center_noise_sigma);
    c.get("base_noise_halfwidth", sm.log.base_noise_halfwidth);
    c.get("offset_scale_frac", sm.log.offset_scale_frac);
    c.get("rng_seed", sm.log.rng_seed);
    c.finish();
  }
  {
    Section c(j, "kernel");
    auto& k = s.train.kernel;
    c.get("k_neighbors", k.k_neighbors);
    c.get("search_radius_frac", k.search_radius_frac);
    c.get("density_unit_frac", k.density_unit_frac);
    c.get_enum("aggregator", k.aggregator, detail::parse_aggregator);
    c.get("hidden", s.kernel_hidden);
    c.finish();
  }
  {
    Section c(j, "train");
    auto& t = s.train;
    c.get("lr_params", t.lr_params);
    c.get("lr_features", t.lr_features);
    c.get("lr_point_colors", t.lr_point_colors);
    c.get("final_lr_fraction", t.final_lr_fraction);
    c.get("batch_rays", t.batch_rays);
    c.get("iters", t.iters);
    c.get("seed", t.seed);
    c.get_enum("optimizer", t.optimizer, detail::parse_optimizer);
    c.get("train_features", t.train_features);
    c.finish();
  }
  {
    Section c(j, "finetune");
    auto& f = s.finetune;
    c.get("t_opacity", f.t_opacity);
    c.get("t_dist_frac", f.t_dist_frac);
    c.get("grow_batch", f.grow_batch);
    c.get("grow_samples", f.grow_samples);
    c.get("grow_passes", f.grow_passes);
    c.get("prune_batch", f.prune_batch);
    c.get("refine_offset_weight", f.refine_offset_weight);
    c.get("radius_scale", f.radius_scale);
    c.get("refine_lr", f.refine_lr);
    c.get("stage1_iters", f.stage1_iters);
    c.get("refine_iters", f.refine_iters);
    c.get("max_cycles", f.max_cycles);
    c.get("min_rel_improvement", f.min_rel_improvement);
    c.get("validation_rays", f.validation_rays);
    c.get("train_enlarged", f.train_enlarged);
    c.finish();
  }
  {
    Section c(j, "edit");
    c.get("transfer_k", s.transfer_k);
    c.finish();
  }
  s.finetune.depth = s.depth;
  s.validate();
}

inline Settings load_settings(const std::filesystem::path& p) {
  Settings s;
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(io::read_file(p));
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError("config: " + std::string(e.what()), e.byte);
  }
  apply_overrides(s, j);
  return s;
}

/// Full settings as JSON; feeding this back through apply_overrides is an identity.
inline nlohmann::json settings_to_json(const Settings& s) {
  const auto& t = s.train;
  const auto& f = s.finetune;
  const auto& sm = t.sampler;
  return {
      {"synth",
       {{"kind", synth::to_string(s.synth.kind)},
        {"n_points", s.synth.n_points},
        {"n_views", s.synth.n_views},
        {"holdout_views", s.synth.holdout_views},
        {"resolution", s.synth.resolution},
        {"seed", s.synth.seed},
        {"textured", s.synth.textured},
        {"fov_deg", s.synth.fov_deg}}},
      {"depth",
       {{"samples_per_ray", s.depth.samples_per_ray},
        {"search_radius_frac", s.depth.search_radius_frac},
        {"bandwidth_frac", s.depth.bandwidth_frac},
        {"top_k_views", s.depth.top_k_views},
        {"optical_reference_scale", s.depth.optical_reference_scale}}},
      {"fetch", {{"top_k", s.fetch_top_k}, {"hidden", s.fetch_hidden}}},
      {"sampling",
       {{"kind", to_string(sm.kind)},
        {"perturb", sm.perturb},
        {"n_k", sm.log.n_k},
        {"base", sm.log.base},
        {"center_noise_sigma", sm.log.center_noise_sigma},
        {"base_noise_halfwidth", sm.log.base_noise_halfwidth},
        {"offset_scale_frac", sm.log.offset_scale_frac},
        {"rng_seed", sm.log.rng_seed}}},
      {"kernel",
       {{"k_neighbors", t.kernel.k_neighbors},
        {"search_radius_frac", t.kernel.search_radius_frac},
        {"density_unit_frac", t.kernel.density_unit_frac},
        {"aggregator", t.kernel.aggregator == AggregatorKind::idw ? "idw" : "learnable"},
        {"hidden", s.kernel_hidden}}},
      {"train",
       {{"lr_params", t.lr_params},
        {"lr_features", t.lr_features},
        {"lr_point_colors", t.lr_point_colors},
        {"final_lr_fraction", t.final_lr_fraction},
        {"batch_rays", t.batch_rays},
        {"iters", t.iters},
        {"seed", t.seed},
        {"optimizer", t.optimizer == OptimizerKind::adam ? "adam" : "sgd"},
        {"train_features", t.train_features}}},
      {"finetune",
       {{"t_opacity", f.t_opacity},
        {"t_dist_frac", f.t_dist_frac},
        {"grow_batch", f.grow_batch},
        {"grow_samples", f.grow_samples},
        {"grow_passes", f.grow_passes},
        {"prune_batch", f.prune_batch},
        {"refine_offset_weight", std::isinf(f.refine_offset_weight) ? nlohmann::json("inf") : nlohmann::json(f.refine_offset_weight)},
        {"radius_scale", f.radius_scale},
        {"refine_lr", f.refine_lr},
        {"stage1_iters", f.stage1_iters},
        {"refine_iters", f.refine_iters},
        {"max_cycles", f.max_cycles},
        {"min_rel_improvement", f.min_rel_improvement},
        {"validation_rays", f.validation_rays},
        {"train_enlarged", f.train_enlarged}}},
      {"edit", {{"transfer_k", s.transfer_k}}},
  };
}

}  // namespace gpf
