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

#include <atomic>
#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "gpf/common.hpp"

namespace gpf {

// ---------------------------------------------------------------------------
// Image

/// Dense H x W x C array of doubles, row-major with interleaved channels.
/// Pixel (x, y) covers the continuous square [x, x+1) x [y, y+1); its center is (x+0.5, y+0.5).
struct Image {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<double> data;

  Image() = default;
  Image(int w, int h, int c, double fill = 0.0)
      : width(w), height(h), channels(c), data(static_cast<std::size_t>(w) * h * c, fill) {}

  bool empty() const noexcept { return data.empty(); }
  std::size_t index(int x, int y, int c = 0) const noexcept {
    return (static_cast<std::size_t>(y) * width + x) * channels + c;
  }
  double& at(int x, int y, int c = 0) noexcept { return data[index(x, y, c)]; }
  double at(int x, int y, int c = 0) const noexcept { return data[index(x, y, c)]; }
  std::span<double> pixel(int x, int y) noexcept { return {data.data() + index(x, y), static_cast<std::size_t>(channels)}; }
  std::span<const double> pixel(int x, int y) const noexcept {
    return {data.data() + index(x, y), static_cast<std::size_t>(channels)};
  }

  friend bool operator==(const Image&, const Image&) = default;
};

/// Bilinear lookup at continuous pixel coordinates with zero padding outside the image.
/// Writes `img.channels` values into out.
inline void sample_bilinear(const Image& img, double u, double v, std::span<double> out) {
  std::fill(out.begin(), out.end(), 0.0);
  const double fx = u - 0.5;
  const double fy = v - 0.5;
  if (!std::isfinite(fx) || !std::isfinite(fy)) return;
  const double x0f = std::floor(fx);
  const double y0f = std::floor(fy);
  if (x0f < -1.0 || y0f < -1.0 || x0f > img.width || y0f > img.height) return;
  const int x0 = static_cast<int>(x0f);
  const int y0 = static_cast<int>(y0f);
  const double ax = fx - x0f;
  const double ay = fy - y0f;
  const double wts[4] = {(1 - ax) * (1 - ay), ax * (1 - ay), (1 - ax) * ay, ax * ay};
  const int xs[4] = {x0, x0 + 1, x0, x0 + 1};
  const int ys[4] = {y0, y0, y0 + 1, y0 + 1};
  for (int k = 0; k < 4; ++k) {
    if (xs[k] < 0 || ys[k] < 0 || xs[k] >= img.width || ys[k] >= img.height || wts[k] == 0.0) continue;
    const double* p = img.data.data() + img.index(xs[k], ys[k]);
    for (int c = 0; c < img.channels; ++c) out[static_cast<std::size_t>(c)] += wts[k] * p[c];
  }
}

inline double sample_bilinear(const Image& img, double u, double v) {
  double out = 0.0;
  sample_bilinear(img, u, v, std::span<double>(&out, 1));
  return out;
}

/// Low (full resolution, 8 channels) and high (quarter resolution, 32 channels) feature maps.
struct FeaturePyramid {
  Image low;
  Image high;
};

// ---------------------------------------------------------------------------
// NeuralPointField

namespace detail {
inline std::uint64_t next_revision() {
  static std::atomic<std::uint64_t> counter{1};
  return counter.fetch_add(1, std::memory_order_relaxed);
}
}  // namespace detail

/// Point scaffold with per-point color, low-level and high-level features.
///
/// Positions may only be changed through mutable_positions() or the structural edit
/// helpers; each of those stamps a fresh revision so indices built earlier become stale.
class NeuralPointField {
 public:
  using ColorMatrix = Eigen::Matrix<double, kColorDim, Eigen::Dynamic>;
  using LowMatrix = Eigen::Matrix<double, kLowDim, Eigen::Dynamic>;
  using HighMatrix = Eigen::Matrix<double, kHighDim, Eigen::Dynamic>;

  NeuralPointField() = default;

  explicit NeuralPointField(Eigen::Matrix3Xd positions)
      : positions_(std::move(positions)),
        color_(ColorMatrix::Zero(kColorDim, positions_.cols())),
        low_(LowMatrix::Zero(kLowDim, positions_.cols())),
        high_(HighMatrix::Zero(kHighDim, positions_.cols())) {}

  NeuralPointField(Eigen::Matrix3Xd positions, ColorMatrix color, LowMatrix low, HighMatrix high)
      : positions_(std::move(positions)), color_(std::move(color)), low_(std::move(low)), high_(std::move(high)) {
    if (color_.cols() != positions_.cols() || low_.cols() != positions_.cols() || high_.cols() != positions_.cols()) {
      throw InputError("NeuralPointField: feature arrays must match the number of positions");
    }
  }

  int size() const noexcept { return static_cast<int>(positions_.cols()); }
  bool empty() const noexcept { return positions_.cols() == 0; }
  std::uint64_t revision() const noexcept { return revision_; }

  const Eigen::Matrix3Xd& positions() const noexcept { return positions_; }
  const ColorMatrix& color() const noexcept { return color_; }
  const LowMatrix& low() const noexcept { return low_; }
  const HighMatrix& high() const noexcept { return high_; }
  Vec3 position(int i) const { return positions_.col(i); }

  /// Any mutable access to positions is treated as a geometric change.
  Eigen::Matrix3Xd& mutable_positions() {
    revision_ = detail::next_revision();
    return positions_;
  }
  ColorMatrix& mutable_color() noexcept { return color_; }
  LowMatrix& mutable_low() noexcept { return low_; }
  HighMatrix& mutable_high() noexcept { return high_; }

  /// Concatenated [color | low | high] feature vector of point i.
  Eigen::Matrix<double, kFeatureDim, 1> features(int i) const {
    Eigen::Matrix<double, kFeatureDim, 1> f;
    f << color_.col(i), low_.col(i), high_.col(i);
    return f;
  }
  void set_features(int i, const Eigen::Matrix<double, kFeatureDim, 1>& f) {
    color_.col(i) = f.head<kColorDim>();
    low_.col(i) = f.segment<kLowDim>(kColorDim);
    high_.col(i) = f.tail<kHighDim>();
  }

  void append(const Vec3& p, const Eigen::Matrix<double, kFeatureDim, 1>& f) {
    const Eigen::Index n = positions_.cols();
    positions_.conservativeResize(Eigen::NoChange, n + 1);
    color_.conservativeResize(Eigen::NoChange, n + 1);
    low_.conservativeResize(Eigen::NoChange, n + 1);
    high_.conservativeResize(Eigen::NoChange, n + 1);
    positions_.col(n) = p;
    set_features(static_cast<int>(n), f);
    revision_ = detail::next_revision();
  }

  /// Keeps the points whose flag is true, preserving order.
  void keep_if(const std::vector<bool>& keep) {
    if (keep.size() != static_cast<std::size_t>(size())) throw InputError("keep_if: mask size mismatch");
    Eigen::Index out = 0;
    for (Eigen::Index i = 0; i < positions_.cols(); ++i) {
      if (!keep[static_cast<std::size_t>(i)]) continue;
      positions_.col(out) = positions_.col(i);
      color_.col(out) = color_.col(i);
      low_.col(out) = low_.col(i);
      high_.col(out) = high_.col(i);
      ++out;
    }
    positions_.conservativeResize(Eigen::NoChange, out);
    color_.conservativeResize(Eigen::NoChange, out);
    low_.conservativeResize(Eigen::NoChange, out);
    high_.conservativeResize(Eigen::NoChange, out);
    revision_ = detail::next_revision();
  }

  Vec3 bbox_min() const { return positions_.rowwise().minCoeff(); }
  Vec3 bbox_max() const { return positions_.rowwise().maxCoeff(); }

  /// Bounding-box diagonal. A single point (or coincident points) has zero extent;
  /// that case reports 1 so that scale-relative defaults stay positive.
  double scene_scale() const {
    if (empty()) return 1.0;
    const double d = (bbox_max() - bbox_min()).norm();
    return d > 0.0 ? d : 1.0;
  }

  /// Throws InputError describing the first violated invariant.
  void validate() const {
    if (empty()) throw InputError("NeuralPointField: needs at least one point");
    if (!positions_.allFinite()) throw InputError("NeuralPointField: non-finite position");
    if (!low_.allFinite() || !high_.allFinite() || !color_.allFinite()) {
      throw InputError("NeuralPointField: non-finite feature");
    }
    if (color_.minCoeff() < 0.0 || color_.maxCoeff() > 1.0) throw InputError("NeuralPointField: color outside [0,1]");
  }

 private:
  Eigen::Matrix3Xd positions_;
  ColorMatrix color_;
  LowMatrix low_;
  HighMatrix high_;
  std::uint64_t revision_ = detail::next_revision();
};

// ---------------------------------------------------------------------------
// Cameras

/// Pinhole camera looking down +z in camera space (x right, y down).
struct CameraView {
  Mat3 intrinsics = Mat3::Identity();
  Mat4 world_to_cam = Mat4::Identity();
  int width = 0;
  int height = 0;
  Image image;                            ///< H x W x 3 in [0,1]; may be empty for render-only views.
  std::optional<FeaturePyramid> pyramid;  ///< filled by the feature extractor
  std::optional<Image> depth_map;         ///< H x W x 1, scene units, 0 = unknown

  Mat3 rotation() const { return world_to_cam.topLeftCorner<3, 3>(); }
  Vec3 translation() const { return world_to_cam.topRightCorner<3, 1>(); }
  Vec3 center() const { return -rotation().transpose() * translation(); }
  Vec3 to_camera(const Vec3& p) const { return rotation() * p + translation(); }

  void validate() const {
    if (width <= 0 || height <= 0) throw InputError("CameraView: non-positive image size");
    if (!(intrinsics(0, 0) > 0.0) || !(intrinsics(1, 1) > 0.0)) throw InputError("CameraView: focal lengths must be positive");
    const double cx = intrinsics(0, 2), cy = intrinsics(1, 2);
    if (!(cx >= 0.0 && cx <= width && cy >= 0.0 && cy <= height)) {
      throw InputError("CameraView: principal point outside the image");
    }
    const Mat3 r = rotation();
    if ((r * r.transpose() - Mat3::Identity()).cwiseAbs().maxCoeff() > 1e-6 || std::abs(r.determinant() - 1.0) > 1e-6) {
      throw InputError("CameraView: world_to_cam rotation is not orthonormal");
    }
    if (std::abs(world_to_cam(3, 3) - 1.0) > 1e-12 || world_to_cam.row(3).head<3>().cwiseAbs().maxCoeff() > 1e-12) {
      throw InputError("CameraView: world_to_cam last row must be (0,0,0,1)");
    }
  }
};

/// Intrinsics with square pixels and the principal point at the image center.
inline Mat3 make_intrinsics(double focal, int width, int height) {
  Mat3 k = Mat3::Identity();
  k(0, 0) = focal;
  k(1, 1) = focal;
  k(0, 2) = 0.5 * width;
  k(1, 2) = 0.5 * height;
  return k;
}

/// world_to_cam for a camera at `eye` looking at `target`; `up` is the approximate world up.
inline Mat4 look_at(const Vec3& eye, const Vec3& target, const Vec3& up) {
  const Vec3 z = (target - eye).normalized();
  Vec3 x = z.cross(up);
  if (x.norm() < 1e-9) x = z.cross(Vec3::UnitX().cross(z).norm() > 1e-6 ? Vec3::UnitX() : Vec3::UnitY());
  x.normalize();
  const Vec3 y = z.cross(x);  // image y points "down" relative to up
  Mat3 r;
  r.row(0) = x.transpose();
  r.row(1) = y.transpose();
  r.row(2) = z.transpose();
  Mat4 m = Mat4::Identity();
  m.topLeftCorner<3, 3>() = r;
  m.topRightCorner<3, 1>() = -r * eye;
  return m;
}

struct Projection {
  Vec2 pixel;
  double depth = 0.0;
};

/// Perspective projection. The pixel may fall outside the image.
inline Projection project_point(const Vec3& p, const CameraView& view) {
  const Vec3 pc = view.to_camera(p);
  if (!(pc.z() > 0.0)) throw BehindCameraError("project_point: point is behind the camera");
  const Vec3 h = view.intrinsics * (pc / pc.z());
  return {Vec2(h.x(), h.y()), pc.z()};
}

/// Inverse of project_point for a given camera-space depth.
inline Vec3 unproject(const Vec2& pixel, double depth, const CameraView& view) {
  const Vec3 pc = depth * view.intrinsics.inverse() * Vec3(pixel.x(), pixel.y(), 1.0);
  return view.rotation().transpose() * (pc - view.translation());
}

inline Vec2 pixel_center(int x, int y) { return {x + 0.5, y + 0.5}; }

// ---------------------------------------------------------------------------
// Rays

struct Ray {
  Vec3 origin = Vec3::Zero();
  Vec3 direction = Vec3::UnitZ();
  double t_near = 0.0;
  double t_far = 0.0;

  /// Rays that miss the scene bounds are returned with t_near == t_far.
  bool empty() const noexcept { return !(t_far > t_near); }
  Vec3 at(double t) const { return origin + t * direction; }
};

/// Rotation-invariant scene bounds: a sphere around the point centroid.
struct SceneBounds {
  Vec3 center = Vec3::Zero();
  double radius = 1.0;

  static SceneBounds of(const NeuralPointField& field, double margin) {
    SceneBounds b;
    if (field.empty()) return b;
    b.center = field.positions().rowwise().mean();
    b.radius = (field.positions().colwise() - b.center).colwise().norm().maxCoeff() + margin;
    if (!(b.radius > 0.0)) b.radius = std::max(margin, 1e-9);
    return b;
  }

  /// Entry/exit parameters along origin + t * dir (unit dir); nullopt on a miss.
  std::optional<std::pair<double, double>> intersect(const Vec3& origin, const Vec3& dir) const {
    const Vec3 oc = origin - center;
    const double b = oc.dot(dir);
    const double c = oc.squaredNorm() - radius * radius;
    const double disc = b * b - c;
    if (disc <= 0.0) return std::nullopt;
    const double s = std::sqrt(disc);
    return std::make_pair(-b - s, -b + s);
  }
};

/// Direction (unit, world frame) of the ray through a continuous pixel coordinate.
inline Vec3 pixel_direction(const CameraView& view, const Vec2& pixel) {
  const Vec3 dc = view.intrinsics.inverse() * Vec3(pixel.x(), pixel.y(), 1.0);
  return (view.rotation().transpose() * dc).normalized();
}

inline Ray make_ray(const CameraView& view, const Vec2& pixel, const SceneBounds& bounds) {
  Ray ray;
  ray.origin = view.center();
  ray.direction = pixel_direction(view, pixel);
  const double near_eps = 1e-6 * bounds.radius;
  if (auto hit = bounds.intersect(ray.origin, ray.direction)) {
    const double t0 = std::max(hit->first, near_eps);
    if (hit->second > t0) {
      ray.t_near = t0;
      ray.t_far = hit->second;
    }
  }
  return ray;
}

inline std::vector<Ray> generate_rays(const CameraView& view, std::span<const Vec2> pixels, const SceneBounds& bounds) {
  std::vector<Ray> rays;
  rays.reserve(pixels.size());
  for (const auto& px : pixels) rays.push_back(make_ray(view, px, bounds));
  return rays;
}

/// Camera-space z of the point at parameter t along a ray from the camera center.
inline double ray_depth_to_z(const CameraView& view, const Ray& ray, double t) {
  return view.rotation().row(2).dot(ray.direction) * t;
}

// ---------------------------------------------------------------------------
// Rigid motion helpers

inline bool is_invertible(const Mat4& t) {
  return t.allFinite() && std::abs(t.topLeftCorner<3, 3>().determinant()) > 1e-12 &&
         t.row(3).isApprox(Eigen::RowVector4d(0, 0, 0, 1));
}

inline Vec3 transform_point(const Mat4& t, const Vec3& p) { return t.topLeftCorner<3, 3>() * p + t.topRightCorner<3, 1>(); }

/// Moves a camera along with a world transform so that projections are preserved.
inline void transform_camera(CameraView& view, const Mat4& world_transform) {
  view.world_to_cam = view.world_to_cam * world_transform.inverse();
  // Re-orthonormalize to keep validate() strict after composing many transforms.
  Eigen::JacobiSVD<Mat3> svd(view.world_to_cam.topLeftCorner<3, 3>(), Eigen::ComputeFullU | Eigen::ComputeFullV);
  view.world_to_cam.topLeftCorner<3, 3>() = svd.matrixU() * svd.matrixV().transpose();
  view.world_to_cam.row(3) << 0, 0, 0, 1;
}

inline Mat4 rigid_transform(const Mat3& rotation, const Vec3& translation) {
  Mat4 t = Mat4::Identity();
  t.topLeftCorner<3, 3>() = rotation;
  t.topRightCorner<3, 1>() = translation;
  return t;
}

}  // namespace gpf
