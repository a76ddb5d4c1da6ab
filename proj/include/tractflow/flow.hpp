// Copyright 2026 The tractflow Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//    http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <string>
#include <utility>
#include <vector>

#include "tractflow/nn.hpp"

namespace tractflow::flow {

/// Forward/inverse result: transformed batch plus per-sample log|det J|.
template <typename T>
struct FlowOut {
  Var<T> value;
  Var<T> logdet;  // [B]
};

namespace detail {

template <typename T>
Var<T> zeros_like_batch(const Var<T>& x) {
  return Var<T>::leaf(Tensor<T>({x.shape()[0]}), false);
}

// total may be [B]; ld is either [1] (parameter-only) or [B]
template <typename T>
Var<T> add_logdet(const Var<T>& total, const Var<T>& ld) {
  if (ld.numel() == 1) return add_scalar_v(total, ld);
  return add(total, ld);
}

}  // namespace detail

// ------------------------------------------------------------ act-norm

/// Per-channel affine y = s .* z + b with data-dependent initialization on
/// the first training batch (post-init activations have zero mean and unit
/// variance per channel). Works at any batch size afterwards.
template <typename T>
struct ActNorm {
  Var<T> s, b;  // [c]
  bool initialized = false;

  ActNorm() = default;
  explicit ActNorm(int c) {
    s = Var<T>::leaf(Tensor<T>::full({c}, T(1)), true);
    b = Var<T>::leaf(Tensor<T>({c}), true);
  }

  /// Start as the exact identity instead of waiting for data.
  void set_identity() {
    s.value().fill(T(1));
    b.value().fill(T(0));
    initialized = true;
  }

  void init_from_batch(const Tensor<T>& x) {
    int B = x.shape[0], c = x.shape[1];
    if (B < 2)
      throw ConfigError("actnorm: data init needs a batch of at least 2");
    for (int j = 0; j < c; ++j) {
      double mean = 0, var = 0;
      for (int i = 0; i < B; ++i) mean += x[static_cast<int64_t>(i) * c + j];
      mean /= B;
      for (int i = 0; i < B; ++i) {
        double d = x[static_cast<int64_t>(i) * c + j] - mean;
        var += d * d;
      }
      var /= B;
      // floor keeps low-variance channels from exploding the scale
      double sd = std::max(std::sqrt(var + 1e-6), 0.05);
      s.value()[j] = static_cast<T>(1.0 / sd);
      b.value()[j] = static_cast<T>(-mean / sd);
    }
    initialized = true;
  }

  FlowOut<T> forward(const Var<T>& z, bool training) {
    if (!initialized) {
      if (!training)
        throw ConfigError("actnorm: forward before initialization");
      init_from_batch(z.value());
    }
    Var<T> y = add_feature(scale_feature(z, s), b);
    Var<T> ld = sum_all(log_abs(s));  // spatial size is 1 for flat latents
    return {y, ld};
  }

  FlowOut<T> inverse(const Var<T>& y) const {
    if (!initialized)
      throw ConfigError("actnorm: inverse before initialization");
    Var<T> nb = neg(b);
    Var<T> z = scale_feature(add_feature(y, nb), reciprocal(s));
    Var<T> ld = neg(sum_all(log_abs(s)));
    return {z, ld};
  }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    out.push_back({prefix + ".s", s});
    out.push_back({prefix + ".b", b});
  }
};

// ------------------------------------------------------------ inv 1x1

/// Generalized channel permutation: y = z W^T with square invertible W.
/// Initialized to a random rotation so channels actually mix; log-determinant
/// is exact via LU and the inverse pass solves with W^{-1}.
template <typename T>
struct Inv1x1 {
  Var<T> w;  // [c, c]

  Inv1x1() = default;
  Inv1x1(int c, Rng& rng, bool identity_init = false) {
    Tensor<T> m({c, c});
    if (identity_init) {
      for (int i = 0; i < c; ++i) m[static_cast<int64_t>(i) * c + i] = T(1);
    } else {
      m = random_rotation(c, rng);
    }
    w = Var<T>::leaf(std::move(m), true);
  }

  static Tensor<T> random_rotation(int c, Rng& rng) {
    // Gram-Schmidt of a random Gaussian matrix, det forced to +1
    std::vector<std::vector<double>> q(static_cast<size_t>(c),
                                       std::vector<double>(static_cast<size_t>(c)));
    for (auto& row : q)
      for (auto& v : row) v = rng.normal();
    for (int i = 0; i < c; ++i) {
      for (int j = 0; j < i; ++j) {
        double dot = 0;
        for (int k = 0; k < c; ++k) dot += q[static_cast<size_t>(i)][static_cast<size_t>(k)] * q[static_cast<size_t>(j)][static_cast<size_t>(k)];
        for (int k = 0; k < c; ++k) q[static_cast<size_t>(i)][static_cast<size_t>(k)] -= dot * q[static_cast<size_t>(j)][static_cast<size_t>(k)];
      }
      double norm = 0;
      for (int k = 0; k < c; ++k) norm += q[static_cast<size_t>(i)][static_cast<size_t>(k)] * q[static_cast<size_t>(i)][static_cast<size_t>(k)];
      norm = std::sqrt(norm);
      if (norm < 1e-12) throw NumericError("rotation init degenerate");
      for (int k = 0; k < c; ++k) q[static_cast<size_t>(i)][static_cast<size_t>(k)] /= norm;
    }
    std::vector<double> flat(static_cast<size_t>(c) * c);
    for (int i = 0; i < c; ++i)
      for (int j = 0; j < c; ++j) flat[static_cast<size_t>(i) * c + j] = q[static_cast<size_t>(i)][static_cast<size_t>(j)];
    std::vector<double> lu = flat;
    std::vector<int> piv;
    double sign;
    if (!lu_decompose(lu, c, piv, sign)) throw NumericError("rotation init singular");
    double diag_sign = sign;
    for (int i = 0; i < c; ++i)
      if (lu[static_cast<size_t>(i) * c + i] < 0) diag_sign = -diag_sign;
    if (diag_sign < 0)
      for (int j = 0; j < c; ++j) flat[static_cast<size_t>(j)] = -flat[static_cast<size_t>(j)];  // flip first row
    Tensor<T> m({c, c});
    for (int64_t i = 0; i < m.numel(); ++i) m[i] = static_cast<T>(flat[static_cast<size_t>(i)]);
    return m;
  }

  FlowOut<T> forward(const Var<T>& z) const {
    return {matmul_nt(z, w), logabsdet(w)};
  }

  FlowOut<T> inverse(const Var<T>& y) const {
    Var<T> winv = mat_inverse(w);
    return {matmul_nt(y, winv), neg(logabsdet(w))};
  }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    out.push_back({prefix + ".w", w});
  }
};

// ------------------------------------------------------------ coupling

/// Affine coupling: the first channel half passes through and conditions a
/// small MLP that scales and shifts the second half. The conditioner's last
/// layer starts at zero, so a fresh coupling is the identity. An optional
/// conditioning vector is concatenated to the pass-through half.
template <typename T>
struct AffineCoupling {
  int dim = 0, cond_dim = 0, width = 128;
  double log_scale_clamp = 5.0;
  Dense<T> fc1, fc2, fc3;

  AffineCoupling() = default;
  AffineCoupling(int dim_, int cond_dim_, int width_, Rng& rng)
      : dim(dim_), cond_dim(cond_dim_), width(width_) {
    if (dim % 2 != 0)
      throw ConfigError("affine coupling needs an even channel count, got " +
                        std::to_string(dim));
    int half = dim / 2;
    fc1 = Dense<T>(half + cond_dim, width, rng);
    fc2 = Dense<T>(width, width, rng);
    fc3 = Dense<T>::zeros(width, dim);  // (log s, t), identity at init
  }

  // (log_s, t) from the pass-through half and optional conditioning
  std::pair<Var<T>, Var<T>> scale_shift(const Var<T>& va,
                                        const Var<T>* cond) const {
    Var<T> in = va;
    if (cond_dim > 0) {
      if (cond == nullptr || cond->shape()[1] != cond_dim)
        throw ShapeError("coupling: conditioning vector of dim " +
                         std::to_string(cond_dim) + " required");
      in = concat<T>({va, *cond}, 1);
    }
    Var<T> hid = leaky_relu(fc1.forward(in), 0.2);
    hid = leaky_relu(fc2.forward(hid), 0.2);
    Var<T> out = fc3.forward(hid);
    int half = dim / 2;
    Var<T> log_s = clamp(slice(out, 1, 0, half), -log_scale_clamp, log_scale_clamp);
    Var<T> t = slice(out, 1, half, half);
    return {log_s, t};
  }

  FlowOut<T> forward(const Var<T>& v, const Var<T>* cond = nullptr) const {
    if (v.shape()[1] != dim)
      throw ShapeError("coupling: input dim " + std::to_string(v.shape()[1]) +
                       " != " + std::to_string(dim));
    int half = dim / 2;
    Var<T> va = slice(v, 1, 0, half);
    Var<T> vb = slice(v, 1, half, half);
    auto [log_s, t] = scale_shift(va, cond);
    Var<T> ub = add(mul(vb, exp(log_s)), t);
    Var<T> u = concat<T>({va, ub}, 1);
    return {u, sum_axis(log_s, 1)};
  }

  FlowOut<T> inverse(const Var<T>& u, const Var<T>* cond = nullptr) const {
    if (u.shape()[1] != dim)
      throw ShapeError("coupling: input dim " + std::to_string(u.shape()[1]) +
                       " != " + std::to_string(dim));
    int half = dim / 2;
    Var<T> ua = slice(u, 1, 0, half);
    Var<T> ub = slice(u, 1, half, half);
    auto [log_s, t] = scale_shift(ua, cond);
    Var<T> vb = mul(sub(ub, t), exp(neg(log_s)));
    Var<T> v = concat<T>({ua, vb}, 1);
    return {v, neg(sum_axis(log_s, 1))};
  }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    fc1.collect(out, prefix + ".fc1");
    fc2.collect(out, prefix + ".fc2");
    fc3.collect(out, prefix + ".fc3");
  }
};

// ------------------------------------------------------------ chain

/// One step = act-norm, invertible 1x1, affine coupling.
template <typename T>
struct FlowStep {
  ActNorm<T> actnorm;
  Inv1x1<T> inv1x1;
  AffineCoupling<T> coupling;

  FlowStep() = default;
  FlowStep(int dim, int cond_dim, int width, Rng& rng, bool identity_init)
      : actnorm(dim),
        inv1x1(dim, rng, identity_init),
        coupling(dim, cond_dim, width, rng) {
    if (identity_init) actnorm.set_identity();
  }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    actnorm.collect(out, prefix + ".actnorm");
    inv1x1.collect(out, prefix + ".inv1x1");
    coupling.collect(out, prefix + ".coupling");
  }
};

/// Composition of K steps on flat latents (treated as 1x1-spatial,
/// c-channel tensors). Forward runs base -> data; log_prob runs the inverse
/// and applies the change of variables against a standard normal base.
template <typename T>
struct FlowChain {
  int dim = 0, cond_dim = 0, width = 128;
  std::vector<FlowStep<T>> steps;

  FlowChain() = default;
  FlowChain(int dim_, int depth, int cond_dim_, Rng& rng, int width_ = 128,
            bool identity_init = false)
      : dim(dim_), cond_dim(cond_dim_), width(width_) {
    if (depth < 1) throw ConfigError("flow chain needs at least one step");
    if (dim_ % 2 != 0)
      throw ConfigError("flow chain dimensionality must be even, got " +
                        std::to_string(dim_));
    steps.reserve(static_cast<size_t>(depth));
    for (int k = 0; k < depth; ++k)
      steps.emplace_back(dim_, cond_dim_, width_, rng, identity_init);
  }

  int depth() const { return static_cast<int>(steps.size()); }

  void check_input(const Var<T>& z) const {
    if (z.shape().size() != 2 || z.shape()[1] != dim)
      throw ShapeError("flow: input " + shape_str(z.shape()) +
                       " does not match dim " + std::to_string(dim));
  }

  FlowOut<T> forward(const Var<T>& z0, const Var<T>* cond = nullptr,
                     bool training = false) {
    check_input(z0);
    Var<T> z = z0;
    Var<T> total = detail::zeros_like_batch(z0);
    for (auto& st : steps) {
      auto a = st.actnorm.forward(z, training);
      total = detail::add_logdet(total, a.logdet);
      auto p = st.inv1x1.forward(a.value);
      total = detail::add_logdet(total, p.logdet);
      auto c = st.coupling.forward(p.value, cond);
      total = detail::add_logdet(total, c.logdet);
      z = c.value;
    }
    return {z, total};
  }

  FlowOut<T> inverse(const Var<T>& zk, const Var<T>* cond = nullptr) const {
    check_input(zk);
    Var<T> z = zk;
    Var<T> total = detail::zeros_like_batch(zk);
    for (auto it = steps.rbegin(); it != steps.rend(); ++it) {
      auto c = it->coupling.inverse(z, cond);
      total = detail::add_logdet(total, c.logdet);
      auto p = it->inv1x1.inverse(c.value);
      total = detail::add_logdet(total, p.logdet);
      auto a = it->actnorm.inverse(p.value);
      total = detail::add_logdet(total, a.logdet);
      z = a.value;
    }
    return {z, total};
  }

  /// log N(z; 0, I) per sample: [B]
  static Var<T> gaussian_log_prob(const Var<T>& z) {
    int d = z.shape()[1];
    Var<T> sq = sum_axis(mul(z, z), 1);
    return add_const(mul_const(sq, -0.5), -0.5 * d * std::log(kTwoPi));
  }

  /// Change-of-variables density of data-side points under the chain.
  Var<T> log_prob(const Var<T>& x, const Var<T>* cond = nullptr) const {
    FlowOut<T> inv = inverse(x, cond);
    return add(gaussian_log_prob(inv.value), inv.logdet);
  }

  /// Push a base-side batch through; base = 0 gives the deterministic
  /// center-of-mass completion used for evaluation.
  Var<T> sample(const Tensor<T>& base, const Var<T>* cond = nullptr) {
    Var<T> z = Var<T>::leaf(base, false);
    return forward(z, cond, false).value;
  }

  bool fully_initialized() const {
    for (const auto& st : steps)
      if (!st.actnorm.initialized) return false;
    return true;
  }

  void set_initialized() {
    for (auto& st : steps) st.actnorm.initialized = true;
  }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    for (size_t k = 0; k < steps.size(); ++k)
      steps[k].collect(out, prefix + ".step" + std::to_string(k));
  }
};

}  // namespace tractflow::flow
