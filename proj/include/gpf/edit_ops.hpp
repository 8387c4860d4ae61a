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
#include <string>
#include <variant>
#include <vector>

#include "gpf/core_types.hpp"
#include "gpf/spatial_index.hpp"

namespace gpf {

struct BoxRegion {
  Vec3 lo = Vec3::Zero();
  Vec3 hi = Vec3::Zero();
  bool contains(const Vec3& p) const { return (p.array() >= lo.array()).all() && (p.array() <= hi.array()).all(); }
};

struct SphereRegion {
  Vec3 center = Vec3::Zero();
  double radius = 0.0;
  bool contains(const Vec3& p) const { return (p - center).squaredNorm() <= radius * radius; }
};

using Region = std::variant<BoxRegion, SphereRegion>;

/// Parses "box:x0,y0,z0,x1,y1,z1" or "sphere:cx,cy,cz,r".
inline Region parse_region(const std::string& s) {
  const auto colon = s.find(':');
  if (colon == std::string::npos) throw InputError("region: expected 'box:...' or 'sphere:...'");
  const std::string kind = s.substr(0, colon);
  std::vector<double> v;
  std::size_t pos = colon + 1;
  while (pos <= s.size()) {
    const auto comma = s.find(',', pos);
    const std::string tok = s.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
    try {
      std::size_t used = 0;
      v.push_back(std::stod(tok, &used));
      if (used != tok.size()) throw std::invalid_argument(tok);
    } catch (const std::exception&) {
      throw InputError("region: bad number '" + tok + "'");
    }
    if (comma == std::string::npos) break;
    pos = comma + 1;
  }
  if (kind == "box" && v.size() == 6) return BoxRegion{Vec3(v[0], v[1], v[2]), Vec3(v[3], v[4], v[5])};
  if (kind == "sphere" && v.size() == 4) return SphereRegion{Vec3(v[0], v[1], v[2]), v[3]};
  throw InputError("region: '" + s + "' has the wrong number of values");
}

inline std::vector<int> select_points(const NeuralPointField& field, const Region& region) {
  std::vector<int> out;
  for (int i = 0; i < field.size(); ++i) {
    const Vec3 p = field.position(i);
    if (std::visit([&](const auto& r) { return r.contains(p); }, region)) out.push_back(i);
  }
  return out;
}

/// Applies a rigid or affine transform to the selected points; features are left alone.
/// Positions change, so any index, depth map or visibility table built before is stale.
inline void transform_points(NeuralPointField& field, const std::vector<int>& selection, const Mat4& transform) {
  if (selection.empty()) throw InputError("transform_points: empty selection");
  if (!is_invertible(transform)) throw InputError("transform_points: transform is singular");
  for (int i : selection) {
    if (i < 0 || i >= field.size()) throw InputError("transform_points: selection index out of range");
  }
  if (transform == Mat4::Identity()) return;
  auto& pos = field.mutable_positions();
  for (int i : selection) pos.col(i) = transform_point(transform, pos.col(i));
}

enum class FeatureGroup { color_low, high, all };

inline FeatureGroup parse_feature_group(const std::string& s) {
  if (s == "color+low" || s == "color_low") return FeatureGroup::color_low;
  if (s == "high") return FeatureGroup::high;
  if (s == "all") return FeatureGroup::all;
  throw InputError("unknown feature group '" + s + "'");
}

/// Inverse-distance interpolation of src features onto every dst point over its k nearest
/// src points. A src point at distance 0 is copied directly (several coincident ones are averaged).
inline void transfer_features(const NeuralPointField& src, NeuralPointField& dst, FeatureGroup which, int k = 8) {
  if (src.empty()) throw InputError("transfer_features: source field is empty");
  if (k < 1) throw InputError("transfer_features: k must be >= 1");
  const Vec3 ext = src.bbox_max() - src.bbox_min();
  double cell = std::max(ext.maxCoeff(), 1e-9) / std::cbrt(std::max(1, src.size()));
  const SpatialIndex index(src, cell);
  const int kk = std::min(k, src.size());
  std::vector<Neighbor> nb;
  for (int i = 0; i < dst.size(); ++i) {
    // Grow the search radius until k points are inside it; the k nearest within a ball
    // that already holds k points are the global k nearest.
    const Vec3 q = dst.position(i);
    const double far = (q - src.bbox_min()).cwiseAbs().cwiseMax((q - src.bbox_max()).cwiseAbs()).norm() + cell;
    for (double r = cell;; r *= 2.0) {
      index.k_nearest(q, kk, std::min(r, far), nb);
      if (static_cast<int>(nb.size()) == kk || r >= far) break;
    }
    Eigen::Matrix<double, kFeatureDim, 1> f = Eigen::Matrix<double, kFeatureDim, 1>::Zero();
    double ws = 0.0;
    const bool exact = nb.front().distance == 0.0;
    for (const auto& n : nb) {
      const double w = exact ? (n.distance == 0.0 ? 1.0 : 0.0) : 1.0 / n.distance;
      if (w == 0.0) continue;
      f += w * src.features(n.index);
      ws += w;
    }
    f /= ws;
    if (which == FeatureGroup::color_low || which == FeatureGroup::all) {
      dst.mutable_color().col(i) = f.head<kColorDim>();
      dst.mutable_low().col(i) = f.segment<kLowDim>(kColorDim);
    }
    if (which == FeatureGroup::high || which == FeatureGroup::all) dst.mutable_high().col(i) = f.tail<kHighDim>();
  }
}

}  // namespace gpf
