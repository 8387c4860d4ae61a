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
#include <iterator>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <unordered_map>
#include <vector>

#include "gpf/core_types.hpp"
#include "gpf/mlp.hpp"
#include "gpf/sampling.hpp"
#include "gpf/spatial_index.hpp"

namespace gpf {

enum class AggregatorKind { learnable, idw };

/// Neighbourhood and density-unit settings for the renderer. Lengths are fractions of scene scale.
struct KernelConfig {
  int k_neighbors = 8;
  double search_radius_frac = 0.005;
  /// Decoded densities are per this length (0 = per search radius).
  double density_unit_frac = 0.0;
  AggregatorKind aggregator = AggregatorKind::learnable;

  double search_radius(double scale) const { return search_radius_frac * scale; }
  double density_scale(double scale) const {
    return 1.0 / ((density_unit_frac > 0.0 ? density_unit_frac : search_radius_frac) * scale);
  }
  void validate() const {
    if (k_neighbors < 1 || k_neighbors > 8) throw InputError("KernelConfig: k_neighbors must be in [1, 8]");
    if (!(search_radius_frac > 0.0)) throw InputError("KernelConfig: search radius must be positive");
  }
};

inline constexpr int kSpatialInput = 7;  // neighbor position, offset, L1 distance
inline constexpr int kColorTargetDim = kLowDim + kColorDim;

enum class Target { density, color };

/// Weights of the learnable kernel and both decoders. The IDW baseline only owns decoders.
struct KernelParameters {
  AggregatorKind kind = AggregatorKind::learnable;
  Mlp spatial;        ///< 7 -> h -> h, ReLU
  Mlp weight;         ///< h -> h -> 1
  Mlp fuse_density;   ///< [h_s, F_h] -> h -> 1 + h  (tuning coefficient, H)
  Mlp fuse_color;     ///< [h_s, F_l, F_c] -> h -> 1 + h
  Mlp sigma_decoder;  ///< F -> h -> 1, softplus
  Mlp color_decoder;  ///< F -> h -> 3, sigmoid

  static KernelParameters init(std::uint64_t seed, AggregatorKind kind = AggregatorKind::learnable, int hidden = 32) {
    KernelParameters p;
    p.kind = kind;
    const auto s = [&](int i) { return mix_seed(seed, 100 + i); };
    if (kind == AggregatorKind::learnable) {
      p.spatial = Mlp({kSpatialInput, hidden, hidden}, Activation::relu, Activation::relu, s(0));
      p.weight = Mlp({hidden, hidden, 1}, Activation::relu, Activation::identity, s(1));
      p.fuse_density = Mlp({hidden + kHighDim, hidden, 1 + hidden}, Activation::relu, Activation::identity, s(2));
      p.fuse_color = Mlp({hidden + kColorTargetDim, hidden, 1 + hidden}, Activation::relu, Activation::identity, s(3));
      p.sigma_decoder = Mlp({hidden, hidden, 1}, Activation::relu, Activation::softplus, s(4));
      p.color_decoder = Mlp({hidden, hidden, 3}, Activation::relu, Activation::sigmoid, s(5));
    } else {
      p.sigma_decoder = Mlp({kHighDim, hidden, 1}, Activation::relu, Activation::softplus, s(4));
      p.color_decoder = Mlp({kColorTargetDim, hidden, 3}, Activation::relu, Activation::sigmoid, s(5));
    }
    return p;
  }

  KernelParameters zeros_like() const {
    KernelParameters g = *this;
    g.visit([](std::span<double> t) { std::fill(t.begin(), t.end(), 0.0); });
    return g;
  }

  template <class F>
  void visit(F&& f) {
    if (kind == AggregatorKind::learnable) {
      spatial.visit(f);
      weight.visit(f);
      fuse_density.visit(f);
      fuse_color.visit(f);
    }
    sigma_decoder.visit(f);
    color_decoder.visit(f);
  }

  int hidden() const { return sigma_decoder.layers().front().weight.rows(); }
};

// ---------------------------------------------------------------------------
// Single-sample building blocks

/// Spatial input [p_k, p_k - p, ||p_k - p||_1] in the rendering camera's frame.
inline Eigen::Matrix<double, kSpatialInput, 1> spatial_input(const Vec3& query_cam, const Vec3& neighbor_cam) {
  Eigen::Matrix<double, kSpatialInput, 1> x;
  const Vec3 off = neighbor_cam - query_cam;
  x << neighbor_cam, off, off.cwiseAbs().sum();
  return x;
}

inline VecX spatial_encode(const Vec3& query_cam, const Vec3& neighbor_cam, const KernelParameters& params) {
  return params.spatial.forward(spatial_input(query_cam, neighbor_cam));
}

/// Decoded density (softplus, unscaled) or color (sigmoid) from an aggregated feature.
inline VecX decode(const VecX& feature, const KernelParameters& params, Target target) {
  return target == Target::density ? params.sigma_decoder.forward(feature) : params.color_decoder.forward(feature);
}

struct RenderOutput {
  Vec3 color = Vec3::Zero();
  double depth = 0.0;
  double acc = 0.0;
};

/// Per-ray samples after density/color decoding.
struct RaySampleBatch {
  std::vector<double> depths;  ///< camera-space z of each sample
  std::vector<double> deltas;  ///< step sizes (scene units)
  std::vector<double> sigma;   ///< extinction per scene unit; 0 for filtered samples
  Eigen::Matrix3Xd color;      ///< 3 x samples
  std::vector<bool> survived;
};

/// c = sum T_j alpha_j c_j with T_j = exp(-sum_{t<j} sigma_t delta_t).
inline RenderOutput render_ray(const RaySampleBatch& b) {
  RenderOutput out;
  double optical = 0.0;
  double wz = 0.0;
  for (std::size_t j = 0; j < b.sigma.size(); ++j) {
    const double tau = b.sigma[j] * b.deltas[j];
    const double T = std::exp(-optical);
    const double alpha = std::isinf(tau) ? 1.0 : -std::expm1(-tau);
    const double w = T * alpha;
    out.color += w * b.color.col(static_cast<Eigen::Index>(j));
    wz += w * b.depths[j];
    optical += tau;
  }
  // Same value as the running sum, without its round-off overshooting 1.
  out.acc = -std::expm1(-optical);
  out.depth = wz / std::max(out.acc, 1e-8);
  return out;
}

/// Mean over rays and color components of the squared error, plus d loss / d pred.
inline double mse_loss(const Eigen::Matrix3Xd& pred, const Eigen::Matrix3Xd& gt, Eigen::Matrix3Xd* grad = nullptr) {
  if (pred.cols() != gt.cols()) throw InputError("mse_loss: prediction and target sizes differ");
  if (pred.cols() == 0) return 0.0;
  const double denom = 3.0 * static_cast<double>(pred.cols());
  if (grad) *grad = 2.0 * (pred - gt) / denom;
  return (pred - gt).squaredNorm() / denom;
}

// ---------------------------------------------------------------------------
// Batched evaluation engine

/// One ray to evaluate: geometry, the camera it belongs to, and its sorted sample parameters.
struct RayQuery {
  Ray ray;
  const CameraView* view = nullptr;
  std::vector<double> t;
  int exclude = -1;  ///< point id left out of every neighbour set (opacity at a point's own position)
};

struct RenderContext {
  const NeuralPointField& field;
  const SpatialIndex& index;
  const KernelParameters& params;
  KernelConfig cfg;
  double scene_scale = 1.0;
};

/// What the backward pass should produce besides parameter gradients.
struct GradRequest {
  bool features = false;
  bool positions = false;
};

/// Gradients from a set of rays; feature/position rows are only kept for touched points.
struct RayGradients {
  KernelParameters params;
  std::vector<int> points;                       ///< touched point ids (sorted)
  Eigen::Matrix<double, kFeatureDim, Eigen::Dynamic> features;  ///< [color, low, high] per touched point
  Eigen::Matrix3Xd positions;                    ///< per touched point
  double loss_sum = 0.0;                         ///< sum of squared errors over rays and components
};

struct RayResults {
  Eigen::Matrix3Xd color;
  Eigen::VectorXd depth;
  Eigen::VectorXd acc;
  /// Per-sample opacity 1 - exp(-sigma delta), rays concatenated in order (0 for filtered samples).
  std::vector<double> alpha;
  /// Per-sample optical thickness sigma * delta; unlike alpha it does not saturate.
  std::vector<double> tau;
};

namespace detail {

struct ChunkState {
  // per ray
  std::vector<int> ray_begin;  // into samples, size R+1
  // per sample
  std::vector<double> z, delta;
  std::vector<Vec3> query_cam;
  std::vector<int> pair_begin;   // size S+1
  std::vector<int> active_slot;  // column in decoder matrices, -1 if filtered
  // per pair
  std::vector<int> pair_point;
  std::vector<int> pair_ray;
  std::vector<double> pair_dist;
};

inline void composite_ray(std::span<const double> tau, std::span<const double> z, const Eigen::Matrix3Xd& col,
                          std::span<const int> slot, RenderOutput& out) {
  double optical = 0.0, wz = 0.0;
  for (std::size_t j = 0; j < tau.size(); ++j) {
    if (slot[j] < 0) continue;
    const double T = std::exp(-optical);
    const double w = T * -std::expm1(-tau[j]);
    out.color += w * col.col(slot[j]);
    wz += w * z[j];
    optical += tau[j];
  }
  out.acc = -std::expm1(-optical);
  out.depth = wz / std::max(out.acc, 1e-8);
}

/// Row-wise softmax-weighted aggregation helper for one sample's pair range.
inline void softmax_inplace(std::span<double> l) {
  double mx = -std::numeric_limits<double>::infinity();
  for (double v : l) mx = std::max(mx, v);
  double s = 0;
  for (double& v : l) s += (v = std::exp(v - mx));
  for (double& v : l) v /= s;
}

}  // namespace detail

/// Forward (and optionally backward) over a list of rays. When `targets` is given the
/// squared-error loss is accumulated and, if `grads` is non-null, back-propagated with
/// d loss / d color scaled by `grad_scale`.
inline RayResults evaluate_rays(const RenderContext& ctx, std::span<const RayQuery> rays, const Eigen::Matrix3Xd* targets,
                                RayGradients* grads, double grad_scale = 1.0, GradRequest req = {}) {
  const auto& params = ctx.params;
  const auto& field = ctx.field;
  ctx.cfg.validate();
  ctx.index.check(field);
  const bool learnable = params.kind == AggregatorKind::learnable;
  const double radius = ctx.cfg.search_radius(ctx.scene_scale);
  const double sigma_scale = ctx.cfg.density_scale(ctx.scene_scale);
  const int R = static_cast<int>(rays.size());

  RayResults res;
  res.color = Eigen::Matrix3Xd::Zero(3, R);
  res.depth = Eigen::VectorXd::Zero(R);
  res.acc = Eigen::VectorXd::Zero(R);

  // --- geometry: samples, neighbours
  detail::ChunkState st;
  st.ray_begin.reserve(static_cast<std::size_t>(R) + 1);
  st.ray_begin.push_back(0);
  std::vector<Neighbor> nb;
  int n_active = 0;
  for (int r = 0; r < R; ++r) {
    const RayQuery& q = rays[static_cast<std::size_t>(r)];
    const Mat3 rot = q.view->rotation();
    const Vec3 tr = q.view->translation();
    const double cos_axis = rot.row(2).dot(q.ray.direction);
    for (std::size_t j = 0; j < q.t.size(); ++j) {
      const double t = q.t[j];
      const Vec3 pos = q.ray.at(t);
      st.z.push_back(cos_axis * t);
      st.delta.push_back(j + 1 < q.t.size() ? q.t[j + 1] - t : std::max(0.0, q.ray.t_far - t));
      st.query_cam.push_back(rot * pos + tr);
      st.pair_begin.push_back(static_cast<int>(st.pair_point.size()));
      if (q.exclude < 0) {
        ctx.index.k_nearest(pos, ctx.cfg.k_neighbors, radius, nb);
      } else {
        ctx.index.k_nearest(pos, ctx.cfg.k_neighbors + 1, radius, nb);
        std::erase_if(nb, [&](const Neighbor& n) { return n.index == q.exclude; });
        if (static_cast<int>(nb.size()) > ctx.cfg.k_neighbors) nb.resize(static_cast<std::size_t>(ctx.cfg.k_neighbors));
      }
      for (const auto& n : nb) {
        st.pair_point.push_back(n.index);
        st.pair_ray.push_back(r);
        st.pair_dist.push_back(n.distance);
      }
      st.active_slot.push_back(nb.empty() ? -1 : n_active++);
    }
    st.ray_begin.push_back(static_cast<int>(st.z.size()));
  }
  const int S = static_cast<int>(st.z.size());
  st.pair_begin.push_back(static_cast<int>(st.pair_point.size()));
  const int P = static_cast<int>(st.pair_point.size());
  const int hdim = params.hidden();

  // --- aggregation
  const int fd_dim = learnable ? hdim : kHighDim;
  const int fc_dim = learnable ? hdim : kColorTargetDim;
  MatX Fd = MatX::Zero(fd_dim, n_active), Fc = MatX::Zero(fc_dim, n_active);
  Mlp::Tape t_sp, t_w, t_fd, t_fc;
  MatX hs, what, od, oc;                  // learnable intermediates
  std::vector<double> ad(static_cast<std::size_t>(P)), ac(static_cast<std::size_t>(P));  // softmax / idw weights
  MatX xenc;
  const bool want_grad = grads != nullptr && targets != nullptr;

  if (n_active > 0) {
    if (learnable) {
      xenc.resize(kSpatialInput, P);
      for (int s = 0; s < S; ++s) {
        for (int p = st.pair_begin[static_cast<std::size_t>(s)]; p < st.pair_begin[static_cast<std::size_t>(s) + 1]; ++p) {
          const RayQuery& q = rays[static_cast<std::size_t>(st.pair_ray[static_cast<std::size_t>(p)])];
          const Vec3 pc = q.view->to_camera(field.position(st.pair_point[static_cast<std::size_t>(p)]));
          xenc.col(p) = spatial_input(st.query_cam[static_cast<std::size_t>(s)], pc);
        }
      }
      hs = params.spatial.forward(xenc, want_grad ? &t_sp : nullptr);
      what = params.weight.forward(hs, want_grad ? &t_w : nullptr);
      MatX xd(hdim + kHighDim, P), xc(hdim + kColorTargetDim, P);
      xd.topRows(hdim) = hs;
      xc.topRows(hdim) = hs;
      for (int p = 0; p < P; ++p) {
        const int pt = st.pair_point[static_cast<std::size_t>(p)];
        xd.col(p).tail<kHighDim>() = field.high().col(pt);
        xc.col(p).segment<kLowDim>(hdim) = field.low().col(pt);
        xc.col(p).tail<kColorDim>() = field.color().col(pt);
      }
      od = params.fuse_density.forward(xd, want_grad ? &t_fd : nullptr);
      oc = params.fuse_color.forward(xc, want_grad ? &t_fc : nullptr);
      od.row(0) = od.row(0).unaryExpr([](double v) { return sigmoid(v); });
      oc.row(0) = oc.row(0).unaryExpr([](double v) { return sigmoid(v); });
      {
        auto hd = od.bottomRows(hdim);
        relu_inplace(hd);
        auto hc = oc.bottomRows(hdim);
        relu_inplace(hc);
      }
      for (int s = 0; s < S; ++s) {
        const int slot = st.active_slot[static_cast<std::size_t>(s)];
        if (slot < 0) continue;
        const int b = st.pair_begin[static_cast<std::size_t>(s)], e = st.pair_begin[static_cast<std::size_t>(s) + 1];
        for (int p = b; p < e; ++p) {
          ad[static_cast<std::size_t>(p)] = od(0, p) * what(0, p);
          ac[static_cast<std::size_t>(p)] = oc(0, p) * what(0, p);
        }
        detail::softmax_inplace(std::span<double>(ad.data() + b, static_cast<std::size_t>(e - b)));
        detail::softmax_inplace(std::span<double>(ac.data() + b, static_cast<std::size_t>(e - b)));
        for (int p = b; p < e; ++p) {
          Fd.col(slot) += ad[static_cast<std::size_t>(p)] * od.col(p).tail(hdim);
          Fc.col(slot) += ac[static_cast<std::size_t>(p)] * oc.col(p).tail(hdim);
        }
      }
    } else {
      for (int s = 0; s < S; ++s) {
        const int slot = st.active_slot[static_cast<std::size_t>(s)];
        if (slot < 0) continue;
        const int b = st.pair_begin[static_cast<std::size_t>(s)], e = st.pair_begin[static_cast<std::size_t>(s) + 1];
        const bool exact = st.pair_dist[static_cast<std::size_t>(b)] == 0.0;  // sorted ascending
        double wsum = 0;
        for (int p = b; p < e; ++p) {
          const double d = st.pair_dist[static_cast<std::size_t>(p)];
          const double w = exact ? (d == 0.0 ? 1.0 : 0.0) : 1.0 / d;
          ad[static_cast<std::size_t>(p)] = w;
          wsum += w;
        }
        for (int p = b; p < e; ++p) {
          const double w = (ad[static_cast<std::size_t>(p)] /= wsum);
          ac[static_cast<std::size_t>(p)] = w;
          const int pt = st.pair_point[static_cast<std::size_t>(p)];
          Fd.col(slot) += w * field.high().col(pt);
          Fc.col(slot).head<kLowDim>() += w * field.low().col(pt);
          Fc.col(slot).tail<kColorDim>() += w * field.color().col(pt);
        }
      }
    }
  }

  // --- decode
  Mlp::Tape t_sd, t_cd;
  MatX sig_raw, colors;
  if (n_active > 0) {
    sig_raw = params.sigma_decoder.forward(Fd, want_grad ? &t_sd : nullptr);
    colors = params.color_decoder.forward(Fc, want_grad ? &t_cd : nullptr);
  } else {
    colors = MatX::Zero(3, 0);
  }
  std::vector<double> tau(static_cast<std::size_t>(S), 0.0);
  for (int s = 0; s < S; ++s) {
    const int slot = st.active_slot[static_cast<std::size_t>(s)];
    if (slot >= 0) tau[static_cast<std::size_t>(s)] = sigma_scale * sig_raw(0, slot) * st.delta[static_cast<std::size_t>(s)];
  }
  const Eigen::Matrix3Xd col3 = colors;
  res.alpha.resize(static_cast<std::size_t>(S));
  for (int s = 0; s < S; ++s) res.alpha[static_cast<std::size_t>(s)] = -std::expm1(-tau[static_cast<std::size_t>(s)]);
  res.tau = tau;

  // --- composite
  for (int r = 0; r < R; ++r) {
    const auto b = static_cast<std::size_t>(st.ray_begin[static_cast<std::size_t>(r)]);
    const auto n = static_cast<std::size_t>(st.ray_begin[static_cast<std::size_t>(r) + 1]) - b;
    RenderOutput o;
    detail::composite_ray(std::span<const double>(tau.data() + b, n), std::span<const double>(st.z.data() + b, n), col3,
                          std::span<const int>(st.active_slot.data() + b, n), o);
    res.color.col(r) = o.color;
    res.depth(r) = o.depth;
    res.acc(r) = o.acc;
  }

  if (!targets) return res;
  if (targets->cols() != R) throw InputError("evaluate_rays: target count does not match ray count");
  const Eigen::Matrix3Xd diff = res.color - *targets;
  if (grads) grads->loss_sum += diff.squaredNorm();
  if (!grads) return res;
  // no sample had a neighbor, so nothing upstream of the loss is learnable
  if (n_active == 0) return res;

  // --- backward: compositing
  MatX d_sig = MatX::Zero(1, n_active), d_col = MatX::Zero(3, n_active);
  for (int r = 0; r < R; ++r) {
    const Vec3 dC = grad_scale * 2.0 * diff.col(r);
    const int b = st.ray_begin[static_cast<std::size_t>(r)], e = st.ray_begin[static_cast<std::size_t>(r) + 1];
    // forward quantities
    std::vector<double> T(static_cast<std::size_t>(e - b) + 1), w(static_cast<std::size_t>(e - b));
    double optical = 0.0;
    for (int s = b; s < e; ++s) {
      const auto j = static_cast<std::size_t>(s - b);
      T[j] = std::exp(-optical);
      const bool act = st.active_slot[static_cast<std::size_t>(s)] >= 0;
      w[j] = act ? T[j] * -std::expm1(-tau[static_cast<std::size_t>(s)]) : 0.0;
      if (act) optical += tau[static_cast<std::size_t>(s)];
    }
    Vec3 suffix = Vec3::Zero();  // sum_{i>j} w_i c_i
    for (int s = e - 1; s >= b; --s) {
      const auto j = static_cast<std::size_t>(s - b);
      const int slot = st.active_slot[static_cast<std::size_t>(s)];
      if (slot < 0) continue;
      const Vec3 c = col3.col(slot);
      const double t_next = T[j] * std::exp(-tau[static_cast<std::size_t>(s)]);
      const double dtau = dC.dot(t_next * c - suffix);
      d_sig(0, slot) = dtau * st.delta[static_cast<std::size_t>(s)] * sigma_scale;
      d_col.col(slot) = w[j] * dC;
      suffix += w[j] * c;
    }
  }

  // --- backward: decoders
  MatX dFd = params.sigma_decoder.backward(t_sd, d_sig, grads->params.sigma_decoder);
  MatX dFc = params.color_decoder.backward(t_cd, d_col, grads->params.color_decoder);

  // per-pair feature gradients, in [color, low, high] layout
  Eigen::Matrix<double, kFeatureDim, Eigen::Dynamic> dfeat_pair;
  Eigen::Matrix3Xd dpos_pair;
  if (req.features) dfeat_pair = Eigen::Matrix<double, kFeatureDim, Eigen::Dynamic>::Zero(kFeatureDim, P);
  if (req.positions) dpos_pair = Eigen::Matrix3Xd::Zero(3, P);

  if (learnable) {
    MatX dod = MatX::Zero(od.rows(), P), doc = MatX::Zero(oc.rows(), P);
    MatX dwhat = MatX::Zero(1, P);
    for (int s = 0; s < S; ++s) {
      const int slot = st.active_slot[static_cast<std::size_t>(s)];
      if (slot < 0) continue;
      const int b = st.pair_begin[static_cast<std::size_t>(s)], e = st.pair_begin[static_cast<std::size_t>(s) + 1];
      for (int pass = 0; pass < 2; ++pass) {
        const MatX& o = pass == 0 ? od : oc;
        MatX& dob = pass == 0 ? dod : doc;
        const auto& a = pass == 0 ? ad : ac;
        const auto dF = pass == 0 ? dFd.col(slot) : dFc.col(slot);
        double dot = 0.0;
        for (int p = b; p < e; ++p) dot += a[static_cast<std::size_t>(p)] * dF.dot(o.col(p).tail(hdim));
        for (int p = b; p < e; ++p) {
          const double ap = a[static_cast<std::size_t>(p)];
          const double da = dF.dot(o.col(p).tail(hdim));
          const double dl = ap * (da - dot);
          const double v = o(0, p);
          dob(0, p) = dl * what(0, p) * v * (1.0 - v);
          dwhat(0, p) += dl * v;
          dob.col(p).tail(hdim) = ap * dF.cwiseProduct((o.col(p).tail(hdim).array() > 0.0).cast<double>().matrix());
        }
      }
    }
    MatX dxd = params.fuse_density.backward(t_fd, dod, grads->params.fuse_density);
    MatX dxc = params.fuse_color.backward(t_fc, doc, grads->params.fuse_color);
    MatX dhs = dxd.topRows(hdim) + dxc.topRows(hdim);
    dhs += params.weight.backward(t_w, dwhat, grads->params.weight);
    MatX dx = params.spatial.backward(t_sp, dhs, grads->params.spatial);
    if (req.features) {
      dfeat_pair.topRows<kColorDim>() = dxc.bottomRows(kColorDim);
      dfeat_pair.middleRows<kLowDim>(kColorDim) = dxc.middleRows(hdim, kLowDim);
      dfeat_pair.bottomRows<kHighDim>() = dxd.bottomRows(kHighDim);
    }
    if (req.positions) {
      for (int p = 0; p < P; ++p) {
        const RayQuery& q = rays[static_cast<std::size_t>(st.pair_ray[static_cast<std::size_t>(p)])];
        const Vec3 off = xenc.col(p).segment<3>(3);
        const Vec3 sgn = off.unaryExpr([](double v) { return static_cast<double>((v > 0.0) - (v < 0.0)); });
        const Vec3 dcam = dx.col(p).head<3>() + dx.col(p).segment<3>(3) + dx(6, p) * sgn;
        dpos_pair.col(p) = q.view->rotation().transpose() * dcam;
      }
    }
  } else if (req.features) {
    for (int s = 0; s < S; ++s) {
      const int slot = st.active_slot[static_cast<std::size_t>(s)];
      if (slot < 0) continue;
      for (int p = st.pair_begin[static_cast<std::size_t>(s)]; p < st.pair_begin[static_cast<std::size_t>(s) + 1]; ++p) {
        const double w = ad[static_cast<std::size_t>(p)];
        dfeat_pair.col(p).head<kColorDim>() = w * dFc.col(slot).tail<kColorDim>();
        dfeat_pair.col(p).segment<kLowDim>(kColorDim) = w * dFc.col(slot).head<kLowDim>();
        dfeat_pair.col(p).tail<kHighDim>() = w * dFd.col(slot);
      }
    }
  }

  if (req.features || req.positions) {
    // Scatter per-pair gradients onto touched points in ascending point order.
    std::vector<int> order(static_cast<std::size_t>(P));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
      return st.pair_point[static_cast<std::size_t>(a)] < st.pair_point[static_cast<std::size_t>(b)];
    });
    std::vector<int> pts;
    for (int p : order) {
      const int pt = st.pair_point[static_cast<std::size_t>(p)];
      if (pts.empty() || pts.back() != pt) pts.push_back(pt);
    }
    // merge into existing touched set
    std::vector<int> merged;
    std::set_union(grads->points.begin(), grads->points.end(), pts.begin(), pts.end(), std::back_inserter(merged));
    if (merged.size() != grads->points.size()) {
      Eigen::Matrix<double, kFeatureDim, Eigen::Dynamic> nf =
          Eigen::Matrix<double, kFeatureDim, Eigen::Dynamic>::Zero(kFeatureDim, static_cast<Eigen::Index>(merged.size()));
      Eigen::Matrix3Xd np = Eigen::Matrix3Xd::Zero(3, static_cast<Eigen::Index>(merged.size()));
      std::size_t oi = 0;
      for (std::size_t m = 0; m < merged.size() && oi < grads->points.size(); ++m) {
        if (merged[m] == grads->points[oi]) {
          if (grads->features.cols() > 0) nf.col(static_cast<Eigen::Index>(m)) = grads->features.col(static_cast<Eigen::Index>(oi));
          if (grads->positions.cols() > 0) np.col(static_cast<Eigen::Index>(m)) = grads->positions.col(static_cast<Eigen::Index>(oi));
          ++oi;
        }
      }
      grads->points = std::move(merged);
      grads->features = std::move(nf);
      grads->positions = std::move(np);
    }
    std::size_t cursor = 0;
    for (int p : order) {
      const int pt = st.pair_point[static_cast<std::size_t>(p)];
      while (grads->points[cursor] != pt) ++cursor;
      if (req.features) grads->features.col(static_cast<Eigen::Index>(cursor)) += dfeat_pair.col(p);
      if (req.positions) grads->positions.col(static_cast<Eigen::Index>(cursor)) += dpos_pair.col(p);
    }
  }
  return res;
}

/// Splits rays into fixed-size chunks, evaluates them (possibly in parallel) and reduces
/// gradients in chunk order so results never depend on the thread count.
inline RayResults evaluate_rays_chunked(const RenderContext& ctx, std::span<const RayQuery> rays,
                                        const Eigen::Matrix3Xd* targets, RayGradients* grads, double grad_scale = 1.0,
                                        GradRequest req = {}, int chunk = 64) {
  const int R = static_cast<int>(rays.size());
  const int n_chunks = std::max(1, (R + chunk - 1) / chunk);
  std::vector<RayResults> parts(static_cast<std::size_t>(n_chunks));
  std::vector<RayGradients> gparts;
  if (grads) {
    gparts.resize(static_cast<std::size_t>(n_chunks));
    for (auto& g : gparts) g.params = grads->params.zeros_like();
  }
  parallel_blocks(n_chunks, [&](int c) {
    const int b = c * chunk, e = std::min(R, b + chunk);
    if (e <= b) return;
    std::optional<Eigen::Matrix3Xd> tg;
    if (targets) tg = targets->middleCols(b, e - b);
    parts[static_cast<std::size_t>(c)] =
        evaluate_rays(ctx, rays.subspan(static_cast<std::size_t>(b), static_cast<std::size_t>(e - b)), tg ? &*tg : nullptr,
                      grads ? &gparts[static_cast<std::size_t>(c)] : nullptr, grad_scale, req);
  });
  RayResults res;
  res.color.resize(3, R);
  res.depth.resize(R);
  res.acc.resize(R);
  for (int c = 0; c < n_chunks; ++c) {
    const int b = c * chunk, e = std::min(R, b + chunk);
    if (e <= b) continue;
    res.color.middleCols(b, e - b) = parts[static_cast<std::size_t>(c)].color;
    res.depth.segment(b, e - b) = parts[static_cast<std::size_t>(c)].depth;
    res.acc.segment(b, e - b) = parts[static_cast<std::size_t>(c)].acc;
    const auto& a = parts[static_cast<std::size_t>(c)].alpha;
    res.alpha.insert(res.alpha.end(), a.begin(), a.end());
    const auto& tt = parts[static_cast<std::size_t>(c)].tau;
    res.tau.insert(res.tau.end(), tt.begin(), tt.end());
  }
  if (grads) {
    for (auto& g : gparts) {
      accumulate_params(grads->params, g.params);
      grads->loss_sum += g.loss_sum;
      if (!g.points.empty()) {
        // merge sparse rows
        std::unordered_map<int, Eigen::Index> where;
        for (std::size_t i = 0; i < grads->points.size(); ++i) where[grads->points[i]] = static_cast<Eigen::Index>(i);
        std::vector<int> merged;
        std::set_union(grads->points.begin(), grads->points.end(), g.points.begin(), g.points.end(), std::back_inserter(merged));
        Eigen::Matrix<double, kFeatureDim, Eigen::Dynamic> nf =
            Eigen::Matrix<double, kFeatureDim, Eigen::Dynamic>::Zero(kFeatureDim, static_cast<Eigen::Index>(merged.size()));
        Eigen::Matrix3Xd np = Eigen::Matrix3Xd::Zero(3, static_cast<Eigen::Index>(merged.size()));
        std::unordered_map<int, Eigen::Index> gw;
        for (std::size_t i = 0; i < g.points.size(); ++i) gw[g.points[i]] = static_cast<Eigen::Index>(i);
        for (std::size_t m = 0; m < merged.size(); ++m) {
          const auto mm = static_cast<Eigen::Index>(m);
          if (auto it = where.find(merged[m]); it != where.end()) {
            if (grads->features.cols()) nf.col(mm) += grads->features.col(it->second);
            if (grads->positions.cols()) np.col(mm) += grads->positions.col(it->second);
          }
          if (auto it = gw.find(merged[m]); it != gw.end()) {
            if (g.features.cols()) nf.col(mm) += g.features.col(it->second);
            if (g.positions.cols()) np.col(mm) += g.positions.col(it->second);
          }
        }
        grads->points = std::move(merged);
        grads->features = std::move(nf);
        grads->positions = std::move(np);
      }
    }
  }
  return res;
}

// ---------------------------------------------------------------------------
// Single-sample convenience wrappers

/// Aggregated feature F for one query from its neighbour set (seen from `view`).
/// Density target aggregates F_h; color target aggregates [F_l, F_c].
/// `weights_out`, if given, receives the normalized per-neighbour weights.
inline VecX kernel_aggregate(const Vec3& query, std::span<const Neighbor> neighbors, const NeuralPointField& field,
                             const KernelParameters& params, Target target, const CameraView& view,
                             std::vector<double>* weights_out = nullptr) {
  if (neighbors.empty()) throw ContractViolation("kernel_aggregate: empty neighbour set (sample is filtered)");
  if (neighbors.size() > 8) throw ContractViolation("kernel_aggregate: at most 8 neighbours");
  const auto P = static_cast<Eigen::Index>(neighbors.size());
  const Vec3 qc = view.to_camera(query);
  if (params.kind == AggregatorKind::idw) {
    const bool exact = std::any_of(neighbors.begin(), neighbors.end(), [](const Neighbor& n) { return n.distance == 0.0; });
    VecX f = VecX::Zero(target == Target::density ? kHighDim : kColorTargetDim);
    double ws = 0;
    if (weights_out) weights_out->clear();
    for (const auto& n : neighbors) {
      const double w = exact ? (n.distance == 0.0 ? 1.0 : 0.0) : 1.0 / n.distance;
      ws += w;
      if (weights_out) weights_out->push_back(w);
      if (target == Target::density) {
        f += w * field.high().col(n.index);
      } else {
        f.head<kLowDim>() += w * field.low().col(n.index);
        f.tail<kColorDim>() += w * field.color().col(n.index);
      }
    }
    if (weights_out)
      for (double& w : *weights_out) w /= ws;
    return f / ws;
  }
  MatX x(kSpatialInput, P);
  for (Eigen::Index p = 0; p < P; ++p) x.col(p) = spatial_input(qc, view.to_camera(field.position(neighbors[static_cast<std::size_t>(p)].index)));
  const MatX hs = params.spatial.forward(x);
  const MatX w = params.weight.forward(hs);
  const int h = params.hidden();
  const int fdim = target == Target::density ? kHighDim : kColorTargetDim;
  MatX xin(h + fdim, P);
  xin.topRows(h) = hs;
  for (Eigen::Index p = 0; p < P; ++p) {
    const int pt = neighbors[static_cast<std::size_t>(p)].index;
    if (target == Target::density) {
      xin.col(p).tail<kHighDim>() = field.high().col(pt);
    } else {
      xin.col(p).segment<kLowDim>(h) = field.low().col(pt);
      xin.col(p).tail<kColorDim>() = field.color().col(pt);
    }
  }
  MatX o = (target == Target::density ? params.fuse_density : params.fuse_color).forward(xin);
  std::vector<double> l(static_cast<std::size_t>(P));
  for (Eigen::Index p = 0; p < P; ++p) l[static_cast<std::size_t>(p)] = sigmoid(o(0, p)) * w(0, p);
  detail::softmax_inplace(l);
  if (weights_out) *weights_out = l;
  VecX f = VecX::Zero(h);
  for (Eigen::Index p = 0; p < P; ++p) f += l[static_cast<std::size_t>(p)] * o.col(p).tail(h).cwiseMax(0.0);
  return f;
}

// ---------------------------------------------------------------------------
// Image rendering

/// Per-pixel rng stream shared by rendering and training so results are reproducible.
inline std::mt19937_64 pixel_rng(std::uint64_t seed, std::uint64_t stream, std::uint64_t pixel) {
  return std::mt19937_64(mix_seed(seed, stream, pixel));
}

/// Builds the sample list for pixel (x, y) of `view`.
inline RayQuery make_pixel_query(const CameraView& view, int x, int y, const SceneBounds& bounds, const SamplerConfig& sampler,
                                 double scene_scale, std::mt19937_64& rng) {
  RayQuery q;
  q.view = &view;
  q.ray = make_ray(view, pixel_center(x, y), bounds);
  if (q.ray.empty()) return q;
  const bool needs_depth = sampler.kind == SamplerKind::log16 || sampler.kind == SamplerKind::surf2;
  double d = 0.0;
  if (needs_depth) {
    if (!view.depth_map) throw ContractViolation("render: log/surface sampling needs the view's depth map");
    d = view.depth_map->at(x, y);
  }
  q.t = sample_ray(q.ray, d, view, sampler, scene_scale, rng);
  return q;
}

inline SceneBounds render_bounds(const NeuralPointField& field, const KernelConfig& cfg) {
  return SceneBounds::of(field, cfg.search_radius(field.scene_scale()));
}

/// Renders every pixel of `view`; deterministic for a fixed seed.
inline Image render_image(const NeuralPointField& field, const SpatialIndex* index, const CameraView& view,
                          const KernelParameters& params, const SamplerConfig& sampler, const KernelConfig& kcfg,
                          std::uint64_t seed, Image* depth_out = nullptr) {
  Image img(view.width, view.height, 3, 0.0);
  if (depth_out) *depth_out = Image(view.width, view.height, 1, 0.0);
  if (field.empty()) return img;
  std::optional<SpatialIndex> own;
  if (!index) {
    own.emplace(field, kcfg.search_radius(field.scene_scale()));
    index = &*own;
  }
  const double scale = field.scene_scale();
  const SceneBounds bounds = render_bounds(field, kcfg);
  const RenderContext ctx{field, *index, params, kcfg, scale};
  const int rows_per_block = 4;
  const int n_blocks = (view.height + rows_per_block - 1) / rows_per_block;
  parallel_blocks(n_blocks, [&](int blk) {
    const int y0 = blk * rows_per_block, y1 = std::min(view.height, y0 + rows_per_block);
    std::vector<RayQuery> qs;
    std::mt19937_64 rng(seed);  // only reseeded per pixel when samples are perturbed; seeding is not cheap
    for (int y = y0; y < y1; ++y)
      for (int x = 0; x < view.width; ++x) {
        if (sampler.perturb) rng = pixel_rng(seed, 0, static_cast<std::uint64_t>(y) * view.width + x);
        qs.push_back(make_pixel_query(view, x, y, bounds, sampler, scale, rng));
      }
    const RayResults r = evaluate_rays(ctx, qs, nullptr, nullptr);
    int i = 0;
    for (int y = y0; y < y1; ++y)
      for (int x = 0; x < view.width; ++x, ++i) {
        for (int c = 0; c < 3; ++c) img.at(x, y, c) = r.color(c, i);
        if (depth_out) depth_out->at(x, y) = r.acc(i) > 1e-8 ? r.depth(i) : 0.0;
      }
  });
  return img;
}

}  // namespace gpf
