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

#include <complex>
#include <vector>

#include "tractflow/common.hpp"

namespace tractflow {

/// In-place iterative radix-2 FFT. Size must be a power of two.
inline void fft_inplace(std::vector<std::complex<double>>& a, bool inverse) {
  size_t n = a.size();
  if (n == 0 || (n & (n - 1)) != 0)
    throw ConfigError("fft: size must be a power of two, got " +
                      std::to_string(n));
  for (size_t i = 1, j = 0; i < n; ++i) {
    size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  for (size_t len = 2; len <= n; len <<= 1) {
    double ang = kTwoPi / static_cast<double>(len) * (inverse ? 1.0 : -1.0);
    std::complex<double> wl(std::cos(ang), std::sin(ang));
    for (size_t i = 0; i < n; i += len) {
      std::complex<double> w(1.0, 0.0);
      for (size_t j = 0; j < len / 2; ++j) {
        std::complex<double> u = a[i + j];
        std::complex<double> v = a[i + j + len / 2] * w;
        a[i + j] = u + v;
        a[i + j + len / 2] = u - v;
        w *= wl;
      }
    }
  }
  if (inverse)
    for (auto& x : a) x /= static_cast<double>(n);
}

inline std::vector<double> hann_window(int n) {
  std::vector<double> w(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i)
    w[static_cast<size_t>(i)] =
        0.5 - 0.5 * std::cos(kTwoPi * i / static_cast<double>(n));
  return w;
}

inline std::vector<double> hamming_window(int n) {
  std::vector<double> w(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i)
    w[static_cast<size_t>(i)] =
        0.54 - 0.46 * std::cos(kTwoPi * i / static_cast<double>(n - 1));
  return w;
}

/// Windowed-sinc resampler (Blackman window, 32 taps per side). Anti-aliases
/// when downsampling.
inline std::vector<float> resample(const std::vector<float>& x, double rate_in,
                                   double rate_out, int half_taps = 32) {
  if (rate_in <= 0 || rate_out <= 0)
    throw ConfigError("resample: rates must be positive");
  if (x.empty()) return {};
  double ratio = rate_out / rate_in;
  int64_t out_len = static_cast<int64_t>(std::floor(
      static_cast<double>(x.size()) * ratio));
  if (out_len <= 0) return {};
  // cutoff slightly under the tighter Nyquist, in input-sample units
  double fc = 0.475 * std::min(1.0, ratio);
  std::vector<float> y(static_cast<size_t>(out_len));
  double width = static_cast<double>(half_taps) /
                 std::min(1.0, ratio);  // widen kernel when downsampling
  for (int64_t n = 0; n < out_len; ++n) {
    double center = static_cast<double>(n) / ratio;
    int64_t k0 = static_cast<int64_t>(std::ceil(center - width));
    int64_t k1 = static_cast<int64_t>(std::floor(center + width));
    double acc = 0.0;
    for (int64_t k = std::max<int64_t>(0, k0);
         k <= std::min<int64_t>(static_cast<int64_t>(x.size()) - 1, k1); ++k) {
      double u = static_cast<double>(k) - center;
      double s;
      if (std::fabs(u) < 1e-12) {
        s = 2.0 * fc;
      } else {
        s = std::sin(kTwoPi * fc * u) / (kPi * u);
      }
      double t = u / width;  // in [-1, 1]
      double bw = 0.42 + 0.5 * std::cos(kPi * t) + 0.08 * std::cos(kTwoPi * t);
      acc += static_cast<double>(x[static_cast<size_t>(k)]) * s * bw;
    }
    y[static_cast<size_t>(n)] = static_cast<float>(acc);
  }
  return y;
}

}  // namespace tractflow
