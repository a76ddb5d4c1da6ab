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

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "tractflow/autodiff.hpp"

namespace tractflow {

template <typename T>
struct NamedParam {
  std::string name;
  Var<T> var;
};

template <typename T>
using ParamList = std::vector<NamedParam<T>>;

// Kaiming-uniform, gain for leaky_relu(0.2).
template <typename T>
Tensor<T> kaiming_uniform(std::vector<int> shape, int fan_in, Rng& rng) {
  double gain = std::sqrt(2.0 / (1.0 + 0.2 * 0.2));
  double bound = gain * std::sqrt(3.0 / fan_in);
  return Tensor<T>::uniform(std::move(shape), rng, static_cast<T>(-bound),
                            static_cast<T>(bound));
}

// ------------------------------------------------------------ dense

template <typename T>
struct Dense {
  Var<T> w;  // [in, out]
  Var<T> b;  // [out]

  Dense() = default;
  Dense(int in, int out, Rng& rng) {
    w = Var<T>::leaf(kaiming_uniform<T>({in, out}, in, rng), true);
    b = Var<T>::leaf(Tensor<T>({out}), true);
  }

  /// Final-layer-of-conditioner variant: starts as the zero map.
  static Dense zeros(int in, int out) {
    Dense d;
    d.w = Var<T>::leaf(Tensor<T>({in, out}), true);
    d.b = Var<T>::leaf(Tensor<T>({out}), true);
    return d;
  }

  Var<T> forward(const Var<T>& x) const {
    return add_feature(matmul(x, w), b);
  }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    out.push_back({prefix + ".w", w});
    out.push_back({prefix + ".b", b});
  }
};

// ------------------------------------------------------------ conv

template <typename T>
struct Conv2d {
  Var<T> w;  // [out, in, k, k]
  Var<T> b;  // [out]
  int stride = 1, pad = 0;

  Conv2d() = default;
  Conv2d(int in, int out, int k, int stride_, int pad_, Rng& rng)
      : stride(stride_), pad(pad_) {
    w = Var<T>::leaf(kaiming_uniform<T>({out, in, k, k}, in * k * k, rng), true);
    b = Var<T>::leaf(Tensor<T>({out}), true);
  }

  Var<T> forward(const Var<T>& x) const {
    return add_channel(conv2d(x, w, stride, pad), b);
  }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    out.push_back({prefix + ".w", w});
    out.push_back({prefix + ".b", b});
  }
};

template <typename T>
struct ConvTranspose2d {
  Var<T> w;  // [in, out, k, k]
  Var<T> b;  // [out]
  int stride = 1, pad = 0, out_pad_h = 0, out_pad_w = 0;

  ConvTranspose2d() = default;
  ConvTranspose2d(int in, int out, int k, int stride_, int pad_, int out_pad_h_,
                  int out_pad_w_, Rng& rng)
      : stride(stride_), pad(pad_), out_pad_h(out_pad_h_), out_pad_w(out_pad_w_) {
    w = Var<T>::leaf(kaiming_uniform<T>({in, out, k, k}, in * k * k, rng), true);
    b = Var<T>::leaf(Tensor<T>({out}), true);
  }

  Var<T> forward(const Var<T>& x) const {
    return add_channel(conv_transpose2d(x, w, stride, pad, out_pad_h, out_pad_w), b);
  }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    out.push_back({prefix + ".w", w});
    out.push_back({prefix + ".b", b});
  }
};

// ------------------------------------------------------------ batchnorm

/// Per-channel batch normalization for [B,C,H,W]. Train mode normalizes with
/// batch statistics and updates the running buffers; eval mode uses the
/// running buffers. Train mode requires batch size >= 2.
template <typename T>
struct BatchNorm2d {
  Var<T> gamma;  // [C]
  Var<T> beta;   // [C]
  Tensor<T> running_mean, running_var;
  double momentum = 0.1;
  double eps = 1e-5;

  BatchNorm2d() = default;
  explicit BatchNorm2d(int c) {
    gamma = Var<T>::leaf(Tensor<T>::full({c}, T(1)), true);
    beta = Var<T>::leaf(Tensor<T>({c}), true);
    running_mean = Tensor<T>({c});
    running_var = Tensor<T>::full({c}, T(1));
  }

  Var<T> forward(const Var<T>& x, bool training) {
    if (x.shape().size() != 4 || x.shape()[1] != gamma.shape()[0])
      throw ShapeError("batchnorm: input " + shape_str(x.shape()) +
                       " does not match " + std::to_string(gamma.shape()[0]) +
                       " channels");
    int B = x.shape()[0], C = x.shape()[1];
    int64_t hw = static_cast<int64_t>(x.shape()[2]) * x.shape()[3];
    if (training && B < 2)
      throw ConfigError("batchnorm: train mode needs batch size >= 2");
    int64_t m = static_cast<int64_t>(B) * hw;

    Tensor<T> mean({C}), var({C});
    if (training) {
      for (int c = 0; c < C; ++c) {
        double s = 0;
        for (int b = 0; b < B; ++b) {
          const T* p = x.value().ptr() + (static_cast<int64_t>(b) * C + c) * hw;
          for (int64_t k = 0; k < hw; ++k) s += p[k];
        }
        mean[c] = static_cast<T>(s / static_cast<double>(m));
        double v = 0;
        for (int b = 0; b < B; ++b) {
          const T* p = x.value().ptr() + (static_cast<int64_t>(b) * C + c) * hw;
          for (int64_t k = 0; k < hw; ++k) {
            double d = p[k] - mean[c];
            v += d * d;
          }
        }
        var[c] = static_cast<T>(v / static_cast<double>(m));
        // unbiased variance feeds the running buffer
        double unbiased = m > 1 ? v / static_cast<double>(m - 1) : v;
        running_mean[c] = static_cast<T>((1 - momentum) * running_mean[c] +
                                         momentum * mean[c]);
        running_var[c] = static_cast<T>((1 - momentum) * running_var[c] +
                                        momentum * unbiased);
      }
    } else {
      mean = running_mean;
      var = running_var;
    }

    Tensor<T> invstd({C});
    for (int c = 0; c < C; ++c)
      invstd[c] = static_cast<T>(1.0 / std::sqrt(static_cast<double>(var[c]) + eps));

    Tensor<T> out(x.shape());
    Tensor<T> xhat(x.shape());
    const Tensor<T>& gv = gamma.value();
    const Tensor<T>& bv = beta.value();
    for (int b = 0; b < B; ++b)
      for (int c = 0; c < C; ++c) {
        const T* p = x.value().ptr() + (static_cast<int64_t>(b) * C + c) * hw;
        T* xh = xhat.ptr() + (static_cast<int64_t>(b) * C + c) * hw;
        T* po = out.ptr() + (static_cast<int64_t>(b) * C + c) * hw;
        for (int64_t k = 0; k < hw; ++k) {
          xh[k] = (p[k] - mean[c]) * invstd[c];
          po[k] = gv[c] * xh[k] + bv[c];
        }
      }

    auto node = make_node("batchnorm2d", std::move(out), x.n, gamma.n, beta.n);
    node->backward_fn = [B, C, hw, m, training, xhat = std::move(xhat),
                         invstd = std::move(invstd)](Node<T>& nd) {
      const Tensor<T>& gv2 = nd.parents[1]->value;
      // per-channel sums of dy and dy*xhat
      std::vector<T> sum_dy(static_cast<size_t>(C), T(0));
      std::vector<T> sum_dyxh(static_cast<size_t>(C), T(0));
      for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c) {
          const T* gy = nd.grad.ptr() + (static_cast<int64_t>(b) * C + c) * hw;
          const T* xh = xhat.ptr() + (static_cast<int64_t>(b) * C + c) * hw;
          T s1 = 0, s2 = 0;
          for (int64_t k = 0; k < hw; ++k) {
            s1 += gy[k];
            s2 += gy[k] * xh[k];
          }
          sum_dy[static_cast<size_t>(c)] += s1;
          sum_dyxh[static_cast<size_t>(c)] += s2;
        }
      acc_grad(nd.parents[1], [&](Tensor<T>& g) {
        for (int c = 0; c < C; ++c) g[c] += sum_dyxh[static_cast<size_t>(c)];
      });
      acc_grad(nd.parents[2], [&](Tensor<T>& g) {
        for (int c = 0; c < C; ++c) g[c] += sum_dy[static_cast<size_t>(c)];
      });
      acc_grad(nd.parents[0], [&](Tensor<T>& g) {
        for (int b = 0; b < B; ++b)
          for (int c = 0; c < C; ++c) {
            const T* gy = nd.grad.ptr() + (static_cast<int64_t>(b) * C + c) * hw;
            const T* xh = xhat.ptr() + (static_cast<int64_t>(b) * C + c) * hw;
            T* gx = g.ptr() + (static_cast<int64_t>(b) * C + c) * hw;
            T k1 = gv2[c] * invstd[c];
            if (training) {
              T mm = static_cast<T>(m);
              for (int64_t k = 0; k < hw; ++k)
                gx[k] += k1 * (gy[k] - sum_dy[static_cast<size_t>(c)] / mm -
                               xh[k] * sum_dyxh[static_cast<size_t>(c)] / mm);
            } else {
              for (int64_t k = 0; k < hw; ++k) gx[k] += k1 * gy[k];
            }
          }
      });
    };
    return Var<T>(node);
  }

  void collect(ParamList<T>& out, const std::string& prefix) {
    out.push_back({prefix + ".gamma", gamma});
    out.push_back({prefix + ".beta", beta});
  }
};

// ------------------------------------------------------------ attention

/// Self-attention over the spatial locations of a conv feature map. The four
/// projections are 1x1 convolutions; the block output is a residual
/// y = eta * o + x with eta a learnable scalar starting at 0, so a fresh
/// block is the identity.
template <typename T>
struct SelfAttention {
  Var<T> wf, wg, wh, wv;  // [C',C,1,1] / [C,C,1,1]
  Var<T> eta;             // [1]
  int channels = 0;
  int proj_channels = 0;  // C' for the f/g projections

  SelfAttention() = default;
  SelfAttention(int c, Rng& rng, bool reduce_proj = false) {
    channels = c;
    proj_channels = reduce_proj ? std::max(1, c / 8) : c;
    wf = Var<T>::leaf(kaiming_uniform<T>({proj_channels, c, 1, 1}, c, rng), true);
    wg = Var<T>::leaf(kaiming_uniform<T>({proj_channels, c, 1, 1}, c, rng), true);
    wh = Var<T>::leaf(kaiming_uniform<T>({c, c, 1, 1}, c, rng), true);
    wv = Var<T>::leaf(kaiming_uniform<T>({c, c, 1, 1}, c, rng), true);
    eta = Var<T>::leaf(Tensor<T>({1}), true);
  }

  /// beta[b,j,i]: weight of location i when rendering location j; rows sum
  /// to one.
  Var<T> attention_map(const Var<T>& x) const {
    int B = x.shape()[0], H = x.shape()[2], W = x.shape()[3];
    int N = H * W;
    Var<T> f = reshape(conv2d(x, wf, 1, 0), {B, proj_channels, N});
    Var<T> g = reshape(conv2d(x, wg, 1, 0), {B, proj_channels, N});
    // logits[b,i,j] = f_i . g_j ; beta = softmax over i of logits^T
    Var<T> logits = bmm(transpose_last2(f), g);      // [B,N,N]
    return softmax(transpose_last2(logits), 2);      // [B,N,N]
  }

  Var<T> forward(const Var<T>& x) const {
    if (x.shape().size() != 4 || x.shape()[1] != channels)
      throw ShapeError("self_attention: input " + shape_str(x.shape()) +
                       " does not match " + std::to_string(channels) +
                       " channels");
    int B = x.shape()[0], H = x.shape()[2], W = x.shape()[3];
    int N = H * W;
    Var<T> beta = attention_map(x);
    Var<T> h = reshape(conv2d(x, wh, 1, 0), {B, channels, N});
    Var<T> mixed = bmm(h, transpose_last2(beta));    // [B,C,N]
    Var<T> o = conv2d(reshape(mixed, {B, channels, H, W}), wv, 1, 0);
    return add(scale_by(o, eta), x);
  }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    out.push_back({prefix + ".wf", wf});
    out.push_back({prefix + ".wg", wg});
    out.push_back({prefix + ".wh", wh});
    out.push_back({prefix + ".wv", wv});
    out.push_back({prefix + ".eta", eta});
  }
};

// ------------------------------------------------------------ adam

/// Bias-corrected Adam. Moment buffers are addressable as named tensors so
/// optimizer state rides along in checkpoints.
template <typename T>
struct Adam {
  double lr = 1e-4, beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  int64_t step_count = 0;
  std::vector<Var<T>> params;
  std::vector<Tensor<T>> m, v;
  std::vector<std::string> names;

  Adam() = default;
  Adam(const ParamList<T>& plist, double lr_) : lr(lr_) {
    for (const auto& np : plist) {
      params.push_back(np.var);
      names.push_back(np.name);
      m.emplace_back(np.var.shape());
      v.emplace_back(np.var.shape());
    }
  }

  void zero_grad() {
    for (auto& p : params) p.zero_grad();
  }

  void step() {
    ++step_count;
    double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step_count));
    double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step_count));
    for (size_t pi = 0; pi < params.size(); ++pi) {
      Var<T>& p = params[pi];
      if (p.n->grad.shape != p.n->value.shape) continue;  // never touched
      Tensor<T>& g = p.n->grad;
      for (int64_t i = 0; i < g.numel(); ++i)
        if (std::isnan(static_cast<double>(g[i])))
          throw NumericError("adam: NaN gradient in parameter " + names[pi]);
      Tensor<T>& mi = m[pi];
      Tensor<T>& vi = v[pi];
      Tensor<T>& w = p.n->value;
      for (int64_t i = 0; i < g.numel(); ++i) {
        double gi = g[i];
        double mm = beta1 * mi[i] + (1 - beta1) * gi;
        double vv = beta2 * vi[i] + (1 - beta2) * gi * gi;
        mi[i] = static_cast<T>(mm);
        vi[i] = static_cast<T>(vv);
        w[i] -= static_cast<T>(lr * (mm / bc1) /
                               (std::sqrt(vv / bc2) + eps));
      }
    }
  }
};

}  // namespace tractflow
