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

// Command-line front end: synth, depth, fetch, render, train, finetune, edit, eval.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "gpf/gpf.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace gpf;

namespace {

struct Globals {
  std::uint64_t seed = 0;
  int threads = 1;
  std::string config;
};

std::string image_name(const char* prefix, std::size_t i) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s_%03zu.png", prefix, i);
  return buf;
}

std::vector<CameraView> load_views(const std::string& cams, const std::string& images, bool with_images) {
  auto views = io::read_cameras(cams, images, with_images);
  if (views.empty()) throw InputError("no cameras in '" + cams + "'");
  return views;
}

const CameraView& pick_view(const std::vector<CameraView>& views, int i) {
  if (i < 0 || i >= static_cast<int>(views.size())) throw InputError("--view " + std::to_string(i) + " out of range");
  return views[static_cast<std::size_t>(i)];
}

/// Kernel weights plus the neighbourhood to render them with.
struct LoadedModel {
  io::ModelFile file;
  KernelConfig kernel;
};

LoadedModel load_model(const std::string& path, const Settings& s, std::uint64_t seed) {
  LoadedModel m;
  m.kernel = s.train.kernel;
  if (path.empty()) {
    m.file.kernel = KernelParameters::init(seed, s.train.kernel.aggregator, s.kernel_hidden);
    m.file.fetch = FetchAggregatorParams::init(seed, s.fetch_hidden);
    return m;
  }
  m.file = io::read_model(path);
  if (m.file.kernel_config) m.kernel = *m.file.kernel_config;
  m.kernel.aggregator = m.file.kernel.kind;
  return m;
}

void write_json(const std::string& path, const json& j) { io::write_file(path, j.dump(2) + "\n"); }

Mat4 read_transform(const std::string& path) {
  json j;
  try {
    j = json::parse(io::read_file(path));
  } catch (const json::parse_error& e) {
    throw ParseError("transform: " + std::string(e.what()), e.byte);
  }
  Mat4 t = Mat4::Identity();
  try {
    if (j.contains("matrix")) {
      const auto v = j.at("matrix").get<std::vector<double>>();
      if (v.size() != 16) throw InputError("transform: matrix needs 16 values");
      for (int r = 0; r < 4; ++r)
        for (int c = 0; c < 4; ++c) t(r, c) = v[static_cast<std::size_t>(4 * r + c)];
      return t;
    }
    if (j.contains("rotation")) {
      const auto v = j.at("rotation").get<std::vector<double>>();
      if (v.size() != 9) throw InputError("transform: rotation needs 9 values");
      for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c) t(r, c) = v[static_cast<std::size_t>(3 * r + c)];
    }
    if (j.contains("translation")) {
      const auto v = j.at("translation").get<std::vector<double>>();
      if (v.size() != 3) throw InputError("transform: translation needs 3 values");
      t.topRightCorner<3, 1>() = Vec3(v[0], v[1], v[2]);
    }
  } catch (const json::exception& e) {
    throw InputError(std::string("transform: ") + e.what());
  }
  return t;
}

json stage_json(const StageRecord& r) {
  return {{"cycle", r.cycle}, {"stage", r.stage},     {"loss", r.loss},
          {"points", r.points}, {"added", r.added}, {"removed", r.removed}, {"iter_loss", r.iter_loss}};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Neural point field toolkit"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--seed", g.seed, "random seed")->capture_default_str();
  app.add_option("--threads", g.threads, "worker threads")->capture_default_str()->check(CLI::PositiveNumber);
  app.add_option("--config", g.config, "JSON file overriding defaults")->check(CLI::ExistingFile);

  Settings s;
  auto settings = [&]() {
    if (!g.config.empty()) s = load_settings(g.config);
    set_thread_count(g.threads);
    s.train.seed = g.seed;
    s.synth.seed = g.seed;
    s.train.sampler.log.rng_seed = g.seed;
  };

  // synth
  auto* c_synth = app.add_subcommand("synth", "generate a synthetic scene with ground truth");
  std::string synth_kind, synth_out;
  int synth_points = 0, synth_views = 0, synth_res = 0;
  c_synth->add_option("--kind", synth_kind, "sphere|slab|two_slabs|textured_cube|hole_slab");
  c_synth->add_option("--points", synth_points, "point count");
  c_synth->add_option("--views", synth_views, "training views");
  c_synth->add_option("--resolution", synth_res, "image side in pixels");
  c_synth->add_option("--out-dir", synth_out, "output directory")->required();

  // depth
  auto* c_depth = app.add_subcommand("depth", "estimate the visible depth map of one view");
  std::string d_points, d_features, d_cams, d_out;
  int d_view = 0;
  c_depth->add_option("--points", d_points, "point cloud (.ply)")->required()->check(CLI::ExistingFile);
  c_depth->add_option("--features", d_features, "features (.gpff), optional; depth uses positions only");
  c_depth->add_option("--cams", d_cams, "cameras JSON")->required()->check(CLI::ExistingFile);
  c_depth->add_option("--view", d_view, "view index")->required();
  c_depth->add_option("--out", d_out, "output .pfm")->required();

  // fetch
  auto* c_fetch = app.add_subcommand("fetch", "fetch image features onto points");
  std::string f_points, f_cams, f_images, f_out, f_model, f_model_out;
  c_fetch->add_option("--points", f_points, "point cloud (.ply)")->required()->check(CLI::ExistingFile);
  c_fetch->add_option("--cams", f_cams, "cameras JSON")->required()->check(CLI::ExistingFile);
  c_fetch->add_option("--images", f_images, "image directory");
  c_fetch->add_option("--out", f_out, "output scene (.gpff, positions go to the sibling .ply)")->required();
  c_fetch->add_option("--model", f_model, "network weights JSON");
  c_fetch->add_option("--model-out", f_model_out, "write the weights used");

  // render
  auto* c_render = app.add_subcommand("render", "render one view");
  std::string r_scene, r_cams, r_out, r_pfm, r_model, r_sampler;
  int r_view = 0;
  c_render->add_option("--scene", r_scene, "scene (.gpff)")->required()->check(CLI::ExistingFile);
  c_render->add_option("--cams", r_cams, "cameras JSON")->required()->check(CLI::ExistingFile);
  c_render->add_option("--view", r_view, "view index")->required();
  c_render->add_option("--sampler", r_sampler, "log16|uni64|uni128|uni64+128|surf2");
  c_render->add_option("--base", s.train.sampler.log.base, "log sampling base");
  c_render->add_option("--model", r_model, "network weights JSON");
  c_render->add_option("--out", r_out, "output .png")->required();
  c_render->add_option("--pfm", r_pfm, "also write float colors as .pfm");

  // train / finetune share most options
  struct TrainArgs {
    std::string scene, cams, images, out, model, model_out, metrics, sampler, stage = "all";
    int iters = -1;
  };
  TrainArgs ta, fa;
  auto add_train_opts = [](CLI::App* c, TrainArgs& a) {
    c->add_option("--scene", a.scene, "scene (.gpff)")->required()->check(CLI::ExistingFile);
    c->add_option("--cams", a.cams, "cameras JSON")->required()->check(CLI::ExistingFile);
    c->add_option("--images", a.images, "image directory");
    c->add_option("--out", a.out, "output scene (.gpff)")->required();
    c->add_option("--model", a.model, "initial network weights JSON");
    c->add_option("--model-out", a.model_out, "output network weights JSON");
    c->add_option("--metrics", a.metrics, "metrics JSON");
    c->add_option("--sampler", a.sampler, "log16|uni64|uni128|uni64+128|surf2");
  };
  auto* c_train = app.add_subcommand("train", "train the kernel on one scene");
  add_train_opts(c_train, ta);
  c_train->add_option("--iters", ta.iters, "iterations");
  auto* c_ft = app.add_subcommand("finetune", "feature tuning, growing/pruning and refinement");
  add_train_opts(c_ft, fa);
  c_ft->add_option("--stage", fa.stage, "all|1|2|3")->check(CLI::IsMember({"all", "1", "2", "3"}));

  // edit
  auto* c_edit = app.add_subcommand("edit", "move, recolor or transfer features of a region");
  std::string e_scene, e_op, e_region, e_transform, e_source, e_group = "all", e_out;
  c_edit->add_option("--scene", e_scene, "scene (.gpff)")->required()->check(CLI::ExistingFile);
  c_edit->add_option("--op", e_op, "move|recolor|transfer")->required()->check(CLI::IsMember({"move", "recolor", "transfer"}));
  c_edit->add_option("--region", e_region, "box:x0,y0,z0,x1,y1,z1 or sphere:cx,cy,cz,r")->required();
  c_edit->add_option("--transform", e_transform, "transform JSON (move)");
  c_edit->add_option("--source", e_source, "source scene (.gpff) for recolor/transfer");
  c_edit->add_option("--group", e_group, "feature group for transfer: color+low|high|all");
  c_edit->add_option("--out", e_out, "output scene (.gpff)")->required();

  // eval
  auto* c_eval = app.add_subcommand("eval", "PSNR and SSIM between two images");
  std::string v_a, v_b;
  c_eval->add_option("--pred", v_a, "rendered image (.png)")->required()->check(CLI::ExistingFile);
  c_eval->add_option("--gt", v_b, "reference image (.png)")->required()->check(CLI::ExistingFile);

  CLI11_PARSE(app, argc, argv);

  try {
    settings();

    if (c_synth->parsed()) {
      if (!synth_kind.empty()) s.synth.kind = synth::parse_kind(synth_kind);
      if (synth_points > 0) s.synth.n_points = synth_points;
      if (synth_views > 0) s.synth.n_views = synth_views;
      if (synth_res > 0) s.synth.resolution = synth_res;
      const synth::SynthScene sc = synth::synth_scene(s.synth);
      const fs::path dir(synth_out);
      fs::create_directories(dir);
      const Eigen::Matrix<double, 3, Eigen::Dynamic> colors = sc.field.color();
      io::ply_write(dir / "points.ply", sc.field.positions(), &colors);
      auto write_set = [&](const std::vector<CameraView>& views, const std::vector<Image>& depth, const char* prefix,
                           const char* cams) {
        std::vector<std::string> names;
        for (std::size_t i = 0; i < views.size(); ++i) {
          names.push_back(image_name(prefix, i));
          io::png_write(dir / names.back(), views[i].image);
          io::pfm_write(dir / fs::path(names.back()).replace_extension(".depth.pfm"), depth[i]);
        }
        io::write_cameras(dir / cams, views, names);
      };
      write_set(sc.views, sc.true_depth, "view", "cams.json");
      write_set(sc.holdout, sc.holdout_depth, "holdout", "holdout.json");
      return 0;
    }

    if (c_depth->parsed()) {
      const NeuralPointField field(io::ply_read(d_points).positions);
      auto views = load_views(d_cams, "", false);
      const CameraView& v = pick_view(views, d_view);
      const SpatialIndex index(field, s.depth.search_radius(field.scene_scale()));
      io::pfm_write(d_out, estimate_depth_map(field, index, v, s.depth));
      return 0;
    }

    if (c_fetch->parsed()) {
      const NeuralPointField base(io::ply_read(f_points).positions);
      auto views = load_views(f_cams, f_images, true);
      const LoadedModel m = load_model(f_model, s, g.seed);
      if (!m.file.fetch) throw InputError("fetch: model file has no fetch weights");
      compute_depth_maps(base, views, s.depth);
      extract_pyramids(views);
      const auto table = build_visibility_table(base, views);
      const FetchResult fr = fetch_point_features(base, views, table, *m.file.fetch, s.fetch_top_k);
      io::save_scene(f_out, fr.field);
      if (!f_model_out.empty()) io::write_model(f_model_out, m.file);
      int unfetched = 0;
      for (bool b : fr.unfetched) unfetched += b;
      if (unfetched) std::cerr << "fetch: " << unfetched << " points are not visible in any view\n";
      return 0;
    }

    if (c_render->parsed()) {
      const NeuralPointField field = io::load_scene(r_scene);
      auto views = load_views(r_cams, "", false);
      if (r_view < 0 || r_view >= static_cast<int>(views.size())) throw InputError("--view out of range");
      CameraView& v = views[static_cast<std::size_t>(r_view)];
      const LoadedModel m = load_model(r_model, s, g.seed);
      SamplerConfig sampler = s.train.sampler;
      if (!r_sampler.empty()) sampler.kind = parse_sampler(r_sampler);
      if (sampler.kind == SamplerKind::log16 || sampler.kind == SamplerKind::surf2) {
        compute_depth_maps(field, std::span<CameraView>(&v, 1), s.depth);
      }
      const Image img = render_image(field, nullptr, v, m.file.kernel, sampler, m.kernel, g.seed);
      io::png_write(r_out, img);
      if (!r_pfm.empty()) io::pfm_write(r_pfm, img);
      return 0;
    }

    if (c_train->parsed() || c_ft->parsed()) {
      const bool is_train = c_train->parsed();
      TrainArgs& a = is_train ? ta : fa;
      NeuralPointField field = io::load_scene(a.scene);
      auto views = load_views(a.cams, a.images, true);
      LoadedModel m = load_model(a.model, s, g.seed);
      TrainConfig tc = s.train;
      tc.kernel = m.kernel;
      if (!a.sampler.empty()) tc.sampler.kind = parse_sampler(a.sampler);
      if (tc.sampler.kind == SamplerKind::log16 || tc.sampler.kind == SamplerKind::surf2) compute_depth_maps(field, views, s.depth);
      json metrics;
      if (is_train) {
        if (a.iters >= 0) tc.iters = a.iters;
        const TrainHistory h = train(field, views, m.file.kernel, tc);
        metrics = {{"loss", h.loss}, {"points", field.size()}};
      } else {
        StageMask mask;
        if (a.stage != "all") mask = StageMask{a.stage == "1", a.stage == "2", a.stage == "3"};
        FinetuneConfig fc = s.finetune;
        if (!(mask.features || mask.grow_prune || mask.refine)) throw InputError("finetune: nothing to run");
        // stage 3 alone needs depth maps for its final recompute only; stage 2 relies on them for sampling
        compute_depth_maps(field, views, s.depth);
        const FinetuneResult r = finetune_schedule(field, views, m.file.kernel, tc, fc, mask);
        field = r.field;
        m.file.kernel = r.params;
        m.file.kernel_config = r.kernel;
        json stages = json::array();
        for (const auto& rec : r.records) stages.push_back(stage_json(rec));
        metrics = {{"initial_loss", r.initial_loss}, {"best_loss", r.best_loss}, {"best_cycle", r.best_cycle},
                   {"points", field.size()},         {"stages", stages}};
      }
      if (!m.file.kernel_config) m.file.kernel_config = tc.kernel;
      io::save_scene(a.out, field);
      if (!a.model_out.empty()) io::write_model(a.model_out, m.file);
      if (!a.metrics.empty()) write_json(a.metrics, metrics);
      return 0;
    }

    if (c_edit->parsed()) {
      NeuralPointField field = io::load_scene(e_scene);
      const auto sel = select_points(field, parse_region(e_region));
      if (e_op == "move") {
        if (e_transform.empty()) throw InputError("edit move: --transform is required");
        transform_points(field, sel, read_transform(e_transform));
      } else {
        if (e_source.empty()) throw InputError("edit " + e_op + ": --source is required");
        if (sel.empty()) throw InputError("edit: region selects no points");
        const NeuralPointField src = io::load_scene(e_source);
        const FeatureGroup which = e_op == "recolor" ? FeatureGroup::color_low : parse_feature_group(e_group);
        Eigen::Matrix3Xd pos(3, static_cast<Eigen::Index>(sel.size()));
        for (std::size_t i = 0; i < sel.size(); ++i) pos.col(static_cast<Eigen::Index>(i)) = field.position(sel[i]);
        NeuralPointField part(pos);
        for (std::size_t i = 0; i < sel.size(); ++i) part.set_features(static_cast<int>(i), field.features(sel[i]));
        transfer_features(src, part, which, s.transfer_k);
        for (std::size_t i = 0; i < sel.size(); ++i) field.set_features(sel[i], part.features(static_cast<int>(i)));
      }
      io::save_scene(e_out, field);
      return 0;
    }

    if (c_eval->parsed()) {
      const Image a = io::png_read(v_a), b = io::png_read(v_b);
      const double p = psnr(a, b);
      json j;
      j["psnr"] = std::isinf(p) ? json("inf") : json(p);
      j["ssim"] = ssim(a, b);
      std::cout << j.dump() << "\n";
      return 0;
    }
  } catch (const ParseError& e) {
    std::cerr << "parse error: " << e.what() << "\n";
    return 2;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
