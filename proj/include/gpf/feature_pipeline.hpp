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
#include <memory>
#include <span>
#include <vector>

#include "gpf/core_types.hpp"
#include "gpf/depth_visibility.hpp"
#include "gpf/mlp.hpp"

namespace gpf {

// ---------------------------------------------------------------------------
// Handcrafted pyramid extractor

namespace imgops {

/// Single-channel plane helper.
struct Plane {
  int w = 0, h = 0;
  std::vector<double> v;
  Plane() = default;
  Plane(int w_, int h_, double fill = 0.0) : w(w_), h(h_), v(static_cast<std::size_t>(w_) * h_, fill) {}
  double& at(int x, int y) { return v[static_cast<std::size_t>(y) * w + x]; }
  double at(int x, int y) const { return v[static_cast<std::size_t>(y) * w + x]; }
  double clamped(int x, int y) const { return at(std::clamp(x, 0, w - 1), std::clamp(y, 0, h - 1)); }
};

inline Plane channel(const Image& img, int c) {
  Plane p(img.width, img.height);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) p.at(x, y) = img.at(x, y, c);
  return p;
}

inline Plane gray(const Image& img) {
  Plane p(img.width, img.height);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) p.at(x, y) = 0.299 * img.at(x, y, 0) + 0.587 * img.at(x, y, 1) + 0.114 * img.at(x, y, 2);
  return p;
}

/// 3x3 Sobel derivative with replicated borders; dx = true for the horizontal derivative.
inline Plane sobel(const Plane& p, bool dx) {
  Plane out(p.w, p.h);
  for (int y = 0; y < p.h; ++y) {
    for (int x = 0; x < p.w; ++x) {
      double s;
      if (dx) {
        s = (p.clamped(x + 1, y - 1) + 2 * p.clamped(x + 1, y) + p.clamped(x + 1, y + 1)) -
            (p.clamped(x - 1, y - 1) + 2 * p.clamped(x - 1, y) + p.clamped(x - 1, y + 1));
      } else {
        s = (p.clamped(x - 1, y + 1) + 2 * p.clamped(x, y + 1) + p.clamped(x + 1, y + 1)) -
            (p.clamped(x - 1, y - 1) + 2 * p.clamped(x, y - 1) + p.clamped(x + 1, y - 1));
      }
      out.at(x, y) = s;
    }
  }
  return out;
}

inline Plane magnitude(const Plane& a, const Plane& b) {
  Plane out(a.w, a.h);
  for (std::size_t i = 0; i < out.v.size(); ++i) out.v[i] = std::hypot(a.v[i], b.v[i]);
  return out;
}

/// Variance over the 3x3 neighbourhood (replicated borders).
inline Plane local_variance(const Plane& p) {
  Plane out(p.w, p.h);
  for (int y = 0; y < p.h; ++y) {
    for (int x = 0; x < p.w; ++x) {
      double s = 0, s2 = 0;
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          const double v = p.clamped(x + dx, y + dy);
          s += v;
          s2 += v * v;
        }
      out.at(x, y) = std::max(0.0, s2 / 9.0 - (s / 9.0) * (s / 9.0));
    }
  }
  return out;
}

inline Plane gaussian_blur(const Plane& p, double sigma) {
  if (sigma <= 0.0) return p;
  const int rad = static_cast<int>(std::ceil(3 * sigma));
  std::vector<double> k(static_cast<std::size_t>(2 * rad + 1));
  double ks = 0;
  for (int i = -rad; i <= rad; ++i) ks += (k[static_cast<std::size_t>(i + rad)] = std::exp(-0.5 * i * i / (sigma * sigma)));
  for (double& v : k) v /= ks;
  Plane tmp(p.w, p.h), out(p.w, p.h);
  for (int y = 0; y < p.h; ++y)
    for (int x = 0; x < p.w; ++x) {
      double s = 0;
      for (int i = -rad; i <= rad; ++i) s += k[static_cast<std::size_t>(i + rad)] * p.clamped(x + i, y);
      tmp.at(x, y) = s;
    }
  for (int y = 0; y < p.h; ++y)
    for (int x = 0; x < p.w; ++x) {
      double s = 0;
      for (int i = -rad; i <= rad; ++i) s += k[static_cast<std::size_t>(i + rad)] * tmp.clamped(x, y + i);
      out.at(x, y) = s;
    }
  return out;
}

inline Plane laplacian(const Plane& p) {
  Plane out(p.w, p.h);
  for (int y = 0; y < p.h; ++y)
    for (int x = 0; x < p.w; ++x)
      out.at(x, y) = p.clamped(x + 1, y) + p.clamped(x - 1, y) + p.clamped(x, y + 1) + p.clamped(x, y - 1) - 4 * p.at(x, y);
  return out;
}

/// Box-average downsampling by an integer factor (partial blocks at the border are averaged too).
inline Plane downsample(const Plane& p, int factor) {
  const int w = std::max(1, p.w / factor), h = std::max(1, p.h / factor);
  Plane out(w, h);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double s = 0;
      int n = 0;
      for (int yy = y * factor; yy < std::min(p.h, (y + 1) * factor); ++yy)
        for (int xx = x * factor; xx < std::min(p.w, (x + 1) * factor); ++xx) {
          s += p.at(xx, yy);
          ++n;
        }
      out.at(x, y) = n ? s / n : 0.0;
    }
  return out;
}

inline void normalize(Plane& p) {
  const double n = static_cast<double>(p.v.size());
  double mean = 0;
  for (double v : p.v) mean += v;
  mean /= n;
  double var = 0;
  for (double v : p.v) var += (v - mean) * (v - mean);
  const double sd = std::sqrt(var / n);
  const double inv = sd > 1e-12 ? 1.0 / sd : 1.0;
  for (double& v : p.v) v = (v - mean) * inv;
}

inline Image stack(const std::vector<Plane>& planes) {
  Image out(planes.front().w, planes.front().h, static_cast<int>(planes.size()));
  for (std::size_t c = 0; c < planes.size(); ++c)
    for (int y = 0; y < out.height; ++y)
      for (int x = 0; x < out.width; ++x) out.at(x, y, static_cast<int>(c)) = planes[c].at(x, y);
  return out;
}

}  // namespace imgops

/// Swappable feature extractor; the default is the handcrafted one below.
class FeatureExtractor {
 public:
  virtual ~FeatureExtractor() = default;
  virtual FeaturePyramid extract(const Image& image) const = 0;
};

/// Low channels before per-image normalization: RGB, gray, Sobel-x, Sobel-y, |grad|, 3x3 variance.
inline std::vector<imgops::Plane> raw_low_channels(const Image& image) {
  using namespace imgops;
  const Plane g = gray(image);
  const Plane gx = sobel(g, true), gy = sobel(g, false);
  return {channel(image, 0), channel(image, 1), channel(image, 2), g, gx, gy, magnitude(gx, gy), local_variance(g)};
}

/// High channels before normalization, at quarter resolution.
inline std::vector<imgops::Plane> raw_high_channels(const Image& image) {
  using namespace imgops;
  std::vector<Plane> base = {downsample(channel(image, 0), 4), downsample(channel(image, 1), 4),
                             downsample(channel(image, 2), 4), downsample(gray(image), 4)};
  std::vector<Plane> out = base;                           // 4
  for (double s : {1.0, 2.0})
    for (const auto& b : base) out.push_back(gaussian_blur(b, s));  // +8
  const double scales[3] = {0.0, 1.0, 2.0};
  std::vector<Plane> gxs, gys, blurred;
  for (double s : scales) {
    blurred.push_back(gaussian_blur(base[3], s));
    gxs.push_back(sobel(blurred.back(), true));
    gys.push_back(sobel(blurred.back(), false));
  }
  for (int si = 0; si < 3; ++si) {  // +12 oriented gradients
    for (int o = 0; o < 4; ++o) {
      const double th = o * M_PI / 4.0;
      Plane g(base[3].w, base[3].h);
      for (std::size_t i = 0; i < g.v.size(); ++i) g.v[i] = std::cos(th) * gxs[si].v[i] + std::sin(th) * gys[si].v[i];
      out.push_back(std::move(g));
    }
  }
  for (int si = 0; si < 3; ++si) out.push_back(magnitude(gxs[si], gys[si]));  // +3
  for (int si = 0; si < 3; ++si) out.push_back(local_variance(blurred[si]));  // +3
  out.push_back(laplacian(blurred[1]));                                       // +2
  out.push_back(laplacian(blurred[2]));
  return out;
}

class HandcraftedExtractor final : public FeatureExtractor {
 public:
  FeaturePyramid extract(const Image& image) const override {
    if (image.channels != 3 || image.empty()) throw InputError("extract_feature_pyramid: expected an H x W x 3 image");
    for (double v : image.data) {
      if (!std::isfinite(v)) throw InputError("extract_feature_pyramid: image contains non-finite pixels");
    }
    auto low = raw_low_channels(image);
    auto high = raw_high_channels(image);
    for (auto& p : low) imgops::normalize(p);
    for (auto& p : high) imgops::normalize(p);
    return {imgops::stack(low), imgops::stack(high)};
  }
};

inline FeaturePyramid extract_feature_pyramid(const Image& image) { return HandcraftedExtractor{}.extract(image); }

inline void extract_pyramids(std::span<CameraView> views, const FeatureExtractor& extractor = HandcraftedExtractor{}) {
  for (auto& v : views) v.pyramid = extractor.extract(v.image);
}

// ---------------------------------------------------------------------------
// Visibility-weighted aggregation

inline constexpr int kLowFetchInput = kLowDim + kColorDim + 1;          // f_l, color, score
inline constexpr int kHighPerView = kHighDim + kColorDim;               // f_h, color
inline constexpr int kHighFetchInput = 3 * kHighPerView;                // + mean + variance across views

/// Aggregator networks for the low path (features + colors) and the high path.
/// Each outputs one raw tuning weight followed by the projected feature.
struct FetchAggregatorParams {
  Mlp low;
  Mlp high;

  static FetchAggregatorParams init(std::uint64_t seed, int hidden = 32) {
    return {Mlp({kLowFetchInput, hidden, hidden, 1 + kLowDim}, Activation::relu, Activation::identity, mix_seed(seed, 11)),
            Mlp({kHighFetchInput, hidden, hidden, 1 + kHighDim}, Activation::relu, Activation::identity, mix_seed(seed, 12))};
  }
  FetchAggregatorParams zeros_like() const { return {low.zeros_like(), high.zeros_like()}; }

  template <class F>
  void visit(F&& f) {
    low.visit(f);
    high.visit(f);
  }
};

/// Per-point samples from its k selected views, fixed once pyramids and visibility exist.
struct FetchInputs {
  int k = 0;                     ///< views per point (clamped top_k)
  Eigen::MatrixXd low;           ///< kLowFetchInput x (n*k)
  Eigen::MatrixXd high;          ///< kHighFetchInput x (n*k)
  Eigen::MatrixXd score;         ///< k x n visibility of each selected view
  Eigen::MatrixXd color;         ///< 3 x (n*k)
  std::vector<std::vector<int>> views;  ///< selected view indices per point

  int points() const { return static_cast<int>(score.cols()); }
};

inline FetchInputs gather_fetch_inputs(const NeuralPointField& field, std::span<const CameraView> views,
                                       const VisibilityTable& table, int top_k) {
  if (views.empty()) throw InputError("fetch: no views");
  for (const auto& v : views) {
    if (!v.pyramid) throw ContractViolation("fetch: every view needs a feature pyramid");
  }
  if (table.points() != field.size() || table.views() != static_cast<int>(views.size())) {
    throw ContractViolation("fetch: visibility table does not match field/views");
  }
  if (top_k < 1) throw InputError("fetch: top_k must be >= 1");
  const int k = std::min<int>(top_k, static_cast<int>(views.size()));
  const int n = field.size();
  FetchInputs in;
  in.k = k;
  in.low.resize(kLowFetchInput, static_cast<Eigen::Index>(n) * k);
  in.high.resize(kHighFetchInput, static_cast<Eigen::Index>(n) * k);
  in.score.resize(k, n);
  in.color.resize(kColorDim, static_cast<Eigen::Index>(n) * k);
  in.views.resize(static_cast<std::size_t>(n));
  parallel_for(n, [&](int b, int e) {
    double lowbuf[kLowDim], highbuf[kHighDim], colbuf[kColorDim];
    for (int i = b; i < e; ++i) {
      auto sel = table.top_k(i, k);
      Eigen::Matrix<double, kHighPerView, Eigen::Dynamic> per(kHighPerView, k);
      for (int j = 0; j < k; ++j) {
        const CameraView& view = views[static_cast<std::size_t>(sel[static_cast<std::size_t>(j)])];
        const Eigen::Index col = static_cast<Eigen::Index>(i) * k + j;
        const Vec3 pc = view.to_camera(field.position(i));
        std::fill(std::begin(lowbuf), std::end(lowbuf), 0.0);
        std::fill(std::begin(highbuf), std::end(highbuf), 0.0);
        std::fill(std::begin(colbuf), std::end(colbuf), 0.0);
        if (pc.z() > 0.0) {
          const Vec3 h = view.intrinsics * (pc / pc.z());
          sample_bilinear(view.pyramid->low, h.x(), h.y(), lowbuf);
          sample_bilinear(view.image, h.x(), h.y(), colbuf);
          const double sx = static_cast<double>(view.pyramid->high.width) / view.width;
          const double sy = static_cast<double>(view.pyramid->high.height) / view.height;
          sample_bilinear(view.pyramid->high, h.x() * sx, h.y() * sy, highbuf);
        }
        const double v = table.scores(i, sel[static_cast<std::size_t>(j)]);
        for (int c = 0; c < kLowDim; ++c) in.low(c, col) = lowbuf[c];
        for (int c = 0; c < kColorDim; ++c) {
          in.low(kLowDim + c, col) = colbuf[c];
          in.color(c, col) = colbuf[c];
        }
        in.low(kLowDim + kColorDim, col) = v;
        for (int c = 0; c < kHighDim; ++c) per(c, j) = highbuf[c];
        for (int c = 0; c < kColorDim; ++c) per(kHighDim + c, j) = colbuf[c];
        in.score(j, i) = v;
      }
      const Eigen::Matrix<double, kHighPerView, 1> mean = per.rowwise().mean();
      const Eigen::Matrix<double, kHighPerView, 1> var = (per.colwise() - mean).array().square().rowwise().mean();
      for (int j = 0; j < k; ++j) {
        const Eigen::Index col = static_cast<Eigen::Index>(i) * k + j;
        in.high.col(col) << per.col(j), mean, var;
      }
      in.views[static_cast<std::size_t>(i)] = std::move(sel);
    }
  }, 512);
  return in;
}

/// Forward state for a subset of points, kept for backprop.
struct FetchTape {
  std::vector<int> points;
  Mlp::Tape low_tape, high_tape;
  Eigen::MatrixXd low_out, high_out;   ///< raw MLP outputs, per (point, view) column
  Eigen::MatrixXd low_weights;         ///< k x m normalized weights (low path)
  Eigen::MatrixXd high_weights;        ///< k x m normalized weights (high path)
  Eigen::VectorXd low_norm, high_norm;  ///< sum of visibility-scaled tuning weights per point
};

struct FetchedFeatures {
  Eigen::Matrix<double, kColorDim, Eigen::Dynamic> color;
  Eigen::Matrix<double, kLowDim, Eigen::Dynamic> low;
  Eigen::Matrix<double, kHighDim, Eigen::Dynamic> high;
  std::vector<bool> unfetched;  ///< all selected views had zero visibility
};

namespace detail {
inline Eigen::MatrixXd gather_columns(const Eigen::MatrixXd& src, std::span<const int> points, int k) {
  Eigen::MatrixXd out(src.rows(), static_cast<Eigen::Index>(points.size()) * k);
  for (std::size_t p = 0; p < points.size(); ++p)
    out.middleCols(static_cast<Eigen::Index>(p) * k, k) = src.middleCols(static_cast<Eigen::Index>(points[p]) * k, k);
  return out;
}
}  // namespace detail

/// Aggregates features for `points` (indices into `in`).
inline FetchedFeatures fetch_forward(const FetchInputs& in, const FetchAggregatorParams& params, std::span<const int> points,
                                     FetchTape* tape = nullptr) {
  const int k = in.k;
  const auto m = static_cast<Eigen::Index>(points.size());
  const Eigen::MatrixXd xl = detail::gather_columns(in.low, points, k);
  const Eigen::MatrixXd xh = detail::gather_columns(in.high, points, k);
  Mlp::Tape lt, ht;
  const Eigen::MatrixXd lo = params.low.forward(xl, tape ? &lt : nullptr);
  const Eigen::MatrixXd ho = params.high.forward(xh, tape ? &ht : nullptr);
  FetchedFeatures out;
  out.color = decltype(out.color)::Zero(kColorDim, m);
  out.low = decltype(out.low)::Zero(kLowDim, m);
  out.high = decltype(out.high)::Zero(kHighDim, m);
  out.unfetched.assign(static_cast<std::size_t>(m), false);
  Eigen::MatrixXd lw = Eigen::MatrixXd::Zero(k, m), hw = Eigen::MatrixXd::Zero(k, m);
  Eigen::VectorXd ln = Eigen::VectorXd::Zero(m), hn = Eigen::VectorXd::Zero(m);
  for (Eigen::Index p = 0; p < m; ++p) {
    const int pt = points[static_cast<std::size_t>(p)];
    double sl = 0, sh = 0;
    for (int j = 0; j < k; ++j) {
      const double v = in.score(j, pt);
      lw(j, p) = sigmoid(lo(0, p * k + j)) * v;
      hw(j, p) = sigmoid(ho(0, p * k + j)) * v;
      sl += lw(j, p);
      sh += hw(j, p);
    }
    ln(p) = sl;
    hn(p) = sh;
    if (!(sl > 0.0) || !(sh > 0.0)) {
      out.unfetched[static_cast<std::size_t>(p)] = true;
      lw.col(p).setZero();
      hw.col(p).setZero();
      continue;
    }
    lw.col(p) /= sl;
    hw.col(p) /= sh;
    for (int j = 0; j < k; ++j) {
      const Eigen::Index col = p * k + j;
      out.low.col(p) += lw(j, p) * lo.col(col).tail<kLowDim>();
      out.color.col(p) += lw(j, p) * in.color.col(static_cast<Eigen::Index>(pt) * k + j);
      out.high.col(p) += hw(j, p) * ho.col(col).tail<kHighDim>();
    }
  }
  if (tape) {
    tape->points.assign(points.begin(), points.end());
    tape->low_tape = std::move(lt);
    tape->high_tape = std::move(ht);
    tape->low_out = lo;
    tape->high_out = ho;
    tape->low_weights = std::move(lw);
    tape->high_weights = std::move(hw);
    tape->low_norm = std::move(ln);
    tape->high_norm = std::move(hn);
  }
  return out;
}

/// Backprop d loss / d {color, low, high} of the taped points into parameter gradients.
inline void fetch_backward(const FetchInputs& in, const FetchAggregatorParams& params, const FetchTape& tape,
                           const Eigen::Ref<const Eigen::MatrixXd>& d_color, const Eigen::Ref<const Eigen::MatrixXd>& d_low,
                           const Eigen::Ref<const Eigen::MatrixXd>& d_high, FetchAggregatorParams& grad) {
  const int k = in.k;
  const auto m = static_cast<Eigen::Index>(tape.points.size());
  Eigen::MatrixXd dlo = Eigen::MatrixXd::Zero(tape.low_out.rows(), tape.low_out.cols());
  Eigen::MatrixXd dho = Eigen::MatrixXd::Zero(tape.high_out.rows(), tape.high_out.cols());
  std::vector<double> da(static_cast<std::size_t>(k));
  for (Eigen::Index p = 0; p < m; ++p) {
    const int pt = tape.points[static_cast<std::size_t>(p)];
    if (!(tape.low_norm(p) > 0.0) || !(tape.high_norm(p) > 0.0)) continue;
    // low path
    double dot = 0;
    for (int j = 0; j < k; ++j) {
      const Eigen::Index col = p * k + j;
      da[static_cast<std::size_t>(j)] = d_low.col(p).dot(tape.low_out.col(col).tail<kLowDim>()) +
                                        d_color.col(p).dot(in.color.col(static_cast<Eigen::Index>(pt) * k + j));
      dot += tape.low_weights(j, p) * da[static_cast<std::size_t>(j)];
      dlo.col(col).tail<kLowDim>() = tape.low_weights(j, p) * d_low.col(p);
    }
    for (int j = 0; j < k; ++j) {
      const Eigen::Index col = p * k + j;
      const double du = (da[static_cast<std::size_t>(j)] - dot) / tape.low_norm(p);
      const double s = sigmoid(tape.low_out(0, col));
      dlo(0, col) = du * in.score(j, pt) * s * (1 - s);
    }
    // high path
    dot = 0;
    for (int j = 0; j < k; ++j) {
      const Eigen::Index col = p * k + j;
      da[static_cast<std::size_t>(j)] = d_high.col(p).dot(tape.high_out.col(col).tail<kHighDim>());
      dot += tape.high_weights(j, p) * da[static_cast<std::size_t>(j)];
      dho.col(col).tail<kHighDim>() = tape.high_weights(j, p) * d_high.col(p);
    }
    for (int j = 0; j < k; ++j) {
      const Eigen::Index col = p * k + j;
      const double du = (da[static_cast<std::size_t>(j)] - dot) / tape.high_norm(p);
      const double s = sigmoid(tape.high_out(0, col));
      dho(0, col) = du * in.score(j, pt) * s * (1 - s);
    }
  }
  params.low.backward(tape.low_tape, dlo, grad.low);
  params.high.backward(tape.high_tape, dho, grad.high);
}

struct FetchResult {
  NeuralPointField field;
  std::vector<bool> unfetched;
};

/// Fetches image features onto every point of `field`, replacing its feature arrays.
inline FetchResult fetch_point_features(const NeuralPointField& field, std::span<const CameraView> views,
                                        const VisibilityTable& table, const FetchAggregatorParams& params, int top_k) {
  const FetchInputs in = gather_fetch_inputs(field, views, table, std::max(1, top_k));
  FetchResult res{field, std::vector<bool>(static_cast<std::size_t>(field.size()), false)};
  constexpr int chunk = 2048;
  for (int b = 0; b < field.size(); b += chunk) {
    const int e = std::min(field.size(), b + chunk);
    std::vector<int> pts(static_cast<std::size_t>(e - b));
    std::iota(pts.begin(), pts.end(), b);
    const FetchedFeatures f = fetch_forward(in, params, pts);
    res.field.mutable_color().middleCols(b, e - b) = f.color.cwiseMax(0.0).cwiseMin(1.0);
    res.field.mutable_low().middleCols(b, e - b) = f.low;
    res.field.mutable_high().middleCols(b, e - b) = f.high;
    for (int i = b; i < e; ++i) res.unfetched[static_cast<std::size_t>(i)] = f.unfetched[static_cast<std::size_t>(i - b)];
  }
  return res;
}

}  // namespace gpf
