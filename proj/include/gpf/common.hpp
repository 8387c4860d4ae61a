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

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <Eigen/Core>
#include <Eigen/Geometry>

namespace gpf {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Vec4 = Eigen::Vector4d;
using Mat3 = Eigen::Matrix3d;
using Mat4 = Eigen::Matrix4d;
using VecX = Eigen::VectorXd;
using MatX = Eigen::MatrixXd;

inline constexpr int kColorDim = 3;
inline constexpr int kLowDim = 8;
inline constexpr int kHighDim = 32;
inline constexpr int kFeatureDim = kColorDim + kLowDim + kHighDim;

// ---------------------------------------------------------------------------
// Errors

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed or out-of-domain user input.
class InputError : public Error {
 public:
  using Error::Error;
};

/// A caller broke a documented precondition.
class ContractViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class BehindCameraError : public Error {
 public:
  using Error::Error;
};

/// A spatial index was queried after the field it was built from changed.
class StaleIndexError : public ContractViolation {
 public:
  using ContractViolation::ContractViolation;
};

/// Raised by the log sampler when the surface estimate is unusable for a ray.
class SamplingFallback : public Error {
 public:
  using Error::Error;
};

class TrainingDiverged : public Error {
 public:
  TrainingDiverged(const std::string& what, int iteration, std::vector<int> batch_pixels)
      : Error(what), iteration_(iteration), batch_pixels_(std::move(batch_pixels)) {}
  int iteration() const noexcept { return iteration_; }
  const std::vector<int>& batch_pixels() const noexcept { return batch_pixels_; }

 private:
  int iteration_;
  std::vector<int> batch_pixels_;
};

class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t offset)
      : Error(what + " (at byte " + std::to_string(offset) + ")"), offset_(offset) {}
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

// ---------------------------------------------------------------------------
// Seeding helpers

/// splitmix64 finalizer; used to derive independent per-ray / per-item seeds.
inline std::uint64_t mix_seed(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) { return mix_seed(mix_seed(a) ^ b); }

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b, std::uint64_t c) {
  return mix_seed(mix_seed(a, b) ^ mix_seed(c));
}

// ---------------------------------------------------------------------------
// Threading

namespace detail {
inline int& thread_count_setting() {
  static int n = 1;
  return n;
}
}  // namespace detail

inline void set_thread_count(int n) { detail::thread_count_setting() = std::max(1, n); }
inline int thread_count() { return detail::thread_count_setting(); }

/// Runs body(block) for block in [0, n_blocks). Blocks are handed out statically so the
/// set of work each block does never depends on the thread count.
inline void parallel_blocks(int n_blocks, const std::function<void(int)>& body) {
  const int workers = std::min(thread_count(), n_blocks);
  if (workers <= 1) {
    for (int b = 0; b < n_blocks; ++b) body(b);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(workers));
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      for (int b = w; b < n_blocks; b += workers) body(b);
    });
  }
  for (auto& t : pool) t.join();
}

/// Splits [0, n) into contiguous ranges and calls body(begin, end).
inline void parallel_for(int n, const std::function<void(int, int)>& body, int grain = 256) {
  if (n <= 0) return;
  const int n_blocks = std::max(1, (n + grain - 1) / grain);
  parallel_blocks(n_blocks, [&](int b) {
    const int begin = b * grain;
    body(begin, std::min(n, begin + grain));
  });
}

}  // namespace gpf
