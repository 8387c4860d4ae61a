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

#include <array>
#include <cmath>
#include <numeric>
#include <unordered_map>
#include <utility>
#include <vector>

#include "gpf/core_types.hpp"

namespace gpf {

struct Neighbor {
  int index = -1;
  double distance = 0.0;

  friend bool operator==(const Neighbor&, const Neighbor&) = default;
};

/// Ascending distance, lower index first on ties.
inline bool neighbor_less(const Neighbor& a, const Neighbor& b) {
  return a.distance < b.distance || (a.distance == b.distance && a.index < b.index);
}

/// Uniform hash grid over point positions.
class SpatialIndex {
 public:
  using CellKey = std::uint64_t;

  SpatialIndex() = default;

  SpatialIndex(const NeuralPointField& field, double cell_size) : cell_size_(cell_size) {
    if (!(cell_size > 0.0)) throw ContractViolation("SpatialIndex: cell_size must be positive");
    if (field.empty()) throw ContractViolation("SpatialIndex: field is empty");
    positions_ = field.positions();
    source_revision_ = field.revision();
    const int n = field.size();
    std::vector<CellKey> keys(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) keys[static_cast<std::size_t>(i)] = key_of(cell_of(positions_.col(i)));
    order_.resize(static_cast<std::size_t>(n));
    std::iota(order_.begin(), order_.end(), 0);
    std::stable_sort(order_.begin(), order_.end(),
                     [&](int a, int b) { return keys[static_cast<std::size_t>(a)] < keys[static_cast<std::size_t>(b)]; });
    cells_.reserve(static_cast<std::size_t>(n));
    for (int s = 0; s < n;) {
      const CellKey k = keys[static_cast<std::size_t>(order_[static_cast<std::size_t>(s)])];
      int e = s;
      while (e < n && keys[static_cast<std::size_t>(order_[static_cast<std::size_t>(e)])] == k) ++e;
      cells_.emplace(k, std::make_pair(s, e - s));
      s = e;
    }
  }

  double cell_size() const noexcept { return cell_size_; }
  std::uint64_t source_revision() const noexcept { return source_revision_; }
  std::size_t occupied_cells() const noexcept { return cells_.size(); }
  int size() const noexcept { return static_cast<int>(positions_.cols()); }
  const Eigen::Matrix3Xd& positions() const noexcept { return positions_; }

  /// Throws StaleIndexError if `field` changed geometry since this index was built.
  void check(const NeuralPointField& field) const {
    if (field.revision() != source_revision_) {
      throw StaleIndexError("SpatialIndex: field was modified after the index was built");
    }
  }

  std::array<std::int64_t, 3> cell_of(const Vec3& p) const {
    return {static_cast<std::int64_t>(std::floor(p.x() / cell_size_)),
            static_cast<std::int64_t>(std::floor(p.y() / cell_size_)),
            static_cast<std::int64_t>(std::floor(p.z() / cell_size_))};
  }

  /// Point indices stored in the cell containing p (empty if none).
  std::vector<int> cell_members(const Vec3& p) const {
    std::vector<int> out;
    auto it = cells_.find(key_of(cell_of(p)));
    if (it == cells_.end()) return out;
    for (int s = 0; s < it->second.second; ++s) out.push_back(order_[static_cast<std::size_t>(it->second.first + s)]);
    return out;
  }

  /// All points with ||p - q|| <= r, ascending by distance (ties: lower index).
  std::vector<Neighbor> radius_neighbors(const Vec3& q, double r) const {
    std::vector<Neighbor> out;
    radius_neighbors(q, r, out);
    return out;
  }

  void radius_neighbors(const Vec3& q, double r, std::vector<Neighbor>& out) const {
    out.clear();
    if (!(r > 0.0)) throw ContractViolation("radius_neighbors: r must be positive");
    collect(q, r, out);
    std::sort(out.begin(), out.end(), neighbor_less);
  }

  /// Up to k nearest points within r_max, ascending distance (ties: lower index).
  std::vector<Neighbor> k_nearest(const Vec3& q, int k, double r_max) const {
    std::vector<Neighbor> out;
    k_nearest(q, k, r_max, out);
    return out;
  }

  void k_nearest(const Vec3& q, int k, double r_max, std::vector<Neighbor>& out) const {
    out.clear();
    if (k < 1) throw ContractViolation("k_nearest: k must be at least 1");
    if (!(r_max > 0.0)) return;
    collect(q, r_max, out);
    if (static_cast<int>(out.size()) > k) {
      std::partial_sort(out.begin(), out.begin() + k, out.end(), neighbor_less);
      out.resize(static_cast<std::size_t>(k));
    } else {
      std::sort(out.begin(), out.end(), neighbor_less);
    }
  }

 private:
  static CellKey key_of(const std::array<std::int64_t, 3>& c) {
    // 21 bits per axis. Distinct far-apart cells may share a key; queries still
    // filter by exact distance, so a collision only costs time.
    constexpr std::uint64_t mask = (1ULL << 21) - 1;
    return (static_cast<std::uint64_t>(c[0]) & mask) | ((static_cast<std::uint64_t>(c[1]) & mask) << 21) |
           ((static_cast<std::uint64_t>(c[2]) & mask) << 42);
  }

  void scan_bucket(const std::pair<int, int>& range, const Vec3& q, double r2, std::vector<Neighbor>& out) const {
    for (int s = 0; s < range.second; ++s) {
      const int idx = order_[static_cast<std::size_t>(range.first + s)];
      const double d2 = (positions_.col(idx) - q).squaredNorm();
      if (d2 <= r2) out.push_back({idx, std::sqrt(d2)});
    }
  }

  void collect(const Vec3& q, double r, std::vector<Neighbor>& out) const {
    const double r2 = r * r;
    const auto lo = cell_of(q - Vec3::Constant(r));
    const auto hi = cell_of(q + Vec3::Constant(r));
    const double span = static_cast<double>(hi[0] - lo[0] + 1) * static_cast<double>(hi[1] - lo[1] + 1) *
                        static_cast<double>(hi[2] - lo[2] + 1);
    // Each axis range stays below 2^21 cells on the loop path, so no bucket is visited twice.
    if (span > static_cast<double>(cells_.size()) || span > static_cast<double>(1 << 21)) {
      for (const auto& [key, range] : cells_) scan_bucket(range, q, r2, out);
      return;
    }
    for (std::int64_t x = lo[0]; x <= hi[0]; ++x) {
      for (std::int64_t y = lo[1]; y <= hi[1]; ++y) {
        for (std::int64_t z = lo[2]; z <= hi[2]; ++z) {
          auto it = cells_.find(key_of({x, y, z}));
          if (it != cells_.end()) scan_bucket(it->second, q, r2, out);
        }
      }
    }
  }

  double cell_size_ = 1.0;
  std::uint64_t source_revision_ = 0;
  Eigen::Matrix3Xd positions_;
  std::vector<int> order_;
  std::unordered_map<CellKey, std::pair<int, int>> cells_;
};

inline SpatialIndex build_index(const NeuralPointField& field, double cell_size) { return SpatialIndex(field, cell_size); }

/// O(N) reference used by tests and as a fallback for tiny fields.
inline std::vector<Neighbor> brute_force_radius(const Eigen::Matrix3Xd& positions, const Vec3& q, double r) {
  std::vector<Neighbor> out;
  for (Eigen::Index i = 0; i < positions.cols(); ++i) {
    const double d2 = (positions.col(i) - q).squaredNorm();
    if (d2 <= r * r) out.push_back({static_cast<int>(i), std::sqrt(d2)});
  }
  std::sort(out.begin(), out.end(), neighbor_less);
  return out;
}

}  // namespace gpf
