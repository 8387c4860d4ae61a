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
#include <random>
#include <span>
#include <string>
#include <vector>

#include "gpf/common.hpp"

namespace gpf {

enum class Activation { identity, relu, sigmoid, softplus };

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline double softplus(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }

/// Records the sign pattern of every ReLU evaluated on this thread while installed.
/// Finite-difference checks use it to recognise perturbations that cross a kink.
struct KinkProbe {
  std::vector<bool> signs;
};

namespace detail {
inline KinkProbe*& active_kink_probe() {
  thread_local KinkProbe* probe = nullptr;
  return probe;
}
}  // namespace detail

class ScopedKinkProbe {
 public:
  explicit ScopedKinkProbe(KinkProbe& p) : prev_(detail::active_kink_probe()) { detail::active_kink_probe() = &p; }
  ~ScopedKinkProbe() { detail::active_kink_probe() = prev_; }
  ScopedKinkProbe(const ScopedKinkProbe&) = delete;
  ScopedKinkProbe& operator=(const ScopedKinkProbe&) = delete;

 private:
  KinkProbe* prev_;
};

/// In-place ReLU that reports signs to an installed KinkProbe.
template <class Derived>
void relu_inplace(Eigen::MatrixBase<Derived>& m) {
  if (auto* probe = detail::active_kink_probe()) {
    for (Eigen::Index j = 0; j < m.cols(); ++j)
      for (Eigen::Index i = 0; i < m.rows(); ++i) probe->signs.push_back(m(i, j) > 0.0);
  }
  m = m.cwiseMax(0.0);
}

inline void apply_activation(MatX& z, Activation a) {
  switch (a) {
    case Activation::identity:
      break;
    case Activation::relu:
      relu_inplace(z);
      break;
    case Activation::sigmoid:
      z = z.unaryExpr([](double v) { return sigmoid(v); });
      break;
    case Activation::softplus:
      z = z.unaryExpr([](double v) { return softplus(v); });
      break;
  }
}

/// Multiplies dy by the activation derivative given pre-activation z and output y.
inline MatX activation_backward(const MatX& z, const MatX& y, const MatX& dy, Activation a) {
  switch (a) {
    case Activation::identity:
      return dy;
    case Activation::relu:
      return dy.cwiseProduct((z.array() > 0.0).cast<double>().matrix());
    case Activation::sigmoid:
      return dy.cwiseProduct(y.cwiseProduct((1.0 - y.array()).matrix()));
    case Activation::softplus:
      return dy.cwiseProduct(z.unaryExpr([](double v) { return sigmoid(v); }));
  }
  return dy;
}

struct DenseLayer {
  MatX weight;  ///< out x in
  VecX bias;    ///< out
};

/// Fully connected network; inputs are columns so a whole batch goes through one GEMM per layer.
class Mlp {
 public:
  struct Tape {
    std::vector<MatX> inputs;  ///< input of each layer
    std::vector<MatX> pre;     ///< pre-activation of each layer
    MatX output;
  };

  Mlp() = default;

  /// dims = {in, hidden..., out}. Weights ~ U(+-sqrt(6/(fan_in+fan_out))), zero biases.
  Mlp(const std::vector<int>& dims, Activation hidden, Activation output, std::uint64_t seed)
      : hidden_act_(hidden), output_act_(output) {
    if (dims.size() < 2) throw ContractViolation("Mlp: need at least input and output dims");
    std::mt19937_64 rng(seed);
    for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
      const int in = dims[l], out = dims[l + 1];
      const double a = std::sqrt(6.0 / (in + out));
      std::uniform_real_distribution<double> dist(-a, a);
      DenseLayer layer{MatX(out, in), VecX::Zero(out)};
      for (Eigen::Index j = 0; j < layer.weight.cols(); ++j)
        for (Eigen::Index i = 0; i < layer.weight.rows(); ++i) layer.weight(i, j) = dist(rng);
      layers_.push_back(std::move(layer));
    }
  }

  int input_dim() const { return layers_.empty() ? 0 : static_cast<int>(layers_.front().weight.cols()); }
  int output_dim() const { return layers_.empty() ? 0 : static_cast<int>(layers_.back().weight.rows()); }
  Activation hidden_activation() const { return hidden_act_; }
  Activation output_activation() const { return output_act_; }
  const std::vector<DenseLayer>& layers() const { return layers_; }
  std::vector<DenseLayer>& layers() { return layers_; }

  MatX forward(const MatX& x, Tape* tape = nullptr) const {
    if (x.rows() != input_dim()) throw ContractViolation("Mlp::forward: input has wrong dimension");
    if (tape) {
      tape->inputs.clear();
      tape->pre.clear();
    }
    MatX h = x;
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      MatX z = layers_[l].weight * h;
      z.colwise() += layers_[l].bias;
      if (tape) {
        tape->inputs.push_back(std::move(h));
        tape->pre.push_back(z);
      }
      apply_activation(z, l + 1 == layers_.size() ? output_act_ : hidden_act_);
      h = std::move(z);
    }
    if (tape) tape->output = h;
    return h;
  }

  /// Accumulates parameter gradients into `grad` (same shape) and returns d loss / d input.
  MatX backward(const Tape& tape, const MatX& dy, Mlp& grad) const {
    MatX d = dy;
    for (std::size_t li = layers_.size(); li-- > 0;) {
      const MatX& z = tape.pre[li];
      const MatX& y = (li + 1 == layers_.size()) ? tape.output : tape.inputs[li + 1];
      const MatX dz = activation_backward(z, y, d, li + 1 == layers_.size() ? output_act_ : hidden_act_);
      grad.layers_[li].weight.noalias() += dz * tape.inputs[li].transpose();
      grad.layers_[li].bias += dz.rowwise().sum();
      d = layers_[li].weight.transpose() * dz;
    }
    return d;
  }

  Mlp zeros_like() const {
    Mlp g = *this;
    for (auto& l : g.layers_) {
      l.weight.setZero();
      l.bias.setZero();
    }
    return g;
  }

  template <class F>
  void visit(F&& f) {
    for (auto& l : layers_) {
      f(std::span<double>(l.weight.data(), static_cast<std::size_t>(l.weight.size())));
      f(std::span<double>(l.bias.data(), static_cast<std::size_t>(l.bias.size())));
    }
  }

 private:
  std::vector<DenseLayer> layers_;
  Activation hidden_act_ = Activation::relu;
  Activation output_act_ = Activation::identity;
};

// ---------------------------------------------------------------------------
// Generic helpers over parameter sets (anything with visit(f(span<double>))).

template <class P>
std::size_t param_count(P& p) {
  std::size_t n = 0;
  p.visit([&](std::span<double> s) { n += s.size(); });
  return n;
}

template <class P>
std::vector<double> flatten_params(const P& p) {
  std::vector<double> out;
  const_cast<P&>(p).visit([&](std::span<double> s) { out.insert(out.end(), s.begin(), s.end()); });
  return out;
}

template <class P>
void unflatten_params(P& p, std::span<const double> flat) {
  std::size_t off = 0;
  p.visit([&](std::span<double> s) {
    std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(off), s.size(), s.begin());
    off += s.size();
  });
}

/// Pointer to every scalar, in visit order; lets tests perturb parameters one at a time.
template <class P>
std::vector<double*> param_pointers(P& p) {
  std::vector<double*> out;
  p.visit([&](std::span<double> s) {
    for (double& v : s) out.push_back(&v);
  });
  return out;
}

/// a += b, tensor by tensor.
template <class P>
void accumulate_params(P& a, const P& b) {
  std::vector<std::span<double>> bs;
  const_cast<P&>(b).visit([&](std::span<double> s) { bs.push_back(s); });
  std::size_t i = 0;
  a.visit([&](std::span<double> s) {
    const auto& src = bs[i++];
    for (std::size_t k = 0; k < s.size(); ++k) s[k] += src[k];
  });
}

template <class P>
void scale_params(P& a, double s) {
  a.visit([&](std::span<double> t) {
    for (double& v : t) v *= s;
  });
}

template <class P>
bool params_finite(const P& p) {
  bool ok = true;
  const_cast<P&>(p).visit([&](std::span<double> s) {
    for (double v : s) ok = ok && std::isfinite(v);
  });
  return ok;
}

enum class OptimizerKind { sgd, adam };

/// Plain gradient descent or Adam over a flattened parameter set.
class Optimizer {
 public:
  explicit Optimizer(OptimizerKind kind = OptimizerKind::sgd) : kind_(kind) {}

  OptimizerKind kind() const { return kind_; }

  template <class P>
  void step(P& params, const P& grads, double lr) {
    std::vector<std::span<double>> gs;
    const_cast<P&>(grads).visit([&](std::span<double> s) { gs.push_back(s); });
    if (kind_ == OptimizerKind::sgd) {
      std::size_t i = 0;
      params.visit([&](std::span<double> s) {
        const auto& g = gs[i++];
        for (std::size_t k = 0; k < s.size(); ++k) s[k] -= lr * g[k];
      });
      return;
    }
    ++t_;
    std::size_t total = 0;
    for (const auto& g : gs) total += g.size();
    if (m_.size() != total) {
      m_.assign(total, 0.0);
      v_.assign(total, 0.0);
    }
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    std::size_t i = 0, flat = 0;
    params.visit([&](std::span<double> s) {
      const auto& g = gs[i++];
      for (std::size_t k = 0; k < s.size(); ++k, ++flat) {
        m_[flat] = beta1_ * m_[flat] + (1 - beta1_) * g[k];
        v_[flat] = beta2_ * v_[flat] + (1 - beta2_) * g[k] * g[k];
        s[k] -= lr * (m_[flat] / c1) / (std::sqrt(v_[flat] / c2) + eps_);
      }
    });
  }

 private:
  OptimizerKind kind_;
  double beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
  long t_ = 0;
  std::vector<double> m_, v_;
};

/// Cosine annealing from base_lr down to final_fraction * base_lr over total_steps.
inline double cosine_annealed_lr(double base_lr, int step, int total_steps, double final_fraction = 0.1) {
  if (total_steps <= 0) return base_lr;
  const double min_lr = final_fraction * base_lr;
  const double progress = std::clamp(static_cast<double>(step) / total_steps, 0.0, 1.0);
  return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + std::cos(M_PI * progress));
}

}  // namespace gpf
