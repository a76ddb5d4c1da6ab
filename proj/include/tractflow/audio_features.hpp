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
#include <string>
#include <vector>

#include <json.hpp>

#include "tractflow/common.hpp"
#include "tractflow/dsp.hpp"
#include "tractflow/image.hpp"
#include "tractflow/linalg.hpp"
#include "tractflow/wav.hpp"

namespace tractflow::audio {

struct StftParams {
  int n_fft = 1024;
  int hop = 256;

  void validate() const {
    if (n_fft < 8 || (n_fft & (n_fft - 1)) != 0)
      throw ConfigError("n_fft must be a power of two, got " +
                        std::to_string(n_fft));
    if (hop < 1 || hop > n_fft)
      throw ConfigError("hop must be in [1, n_fft], got " + std::to_string(hop));
  }
};

/// One-sided complex spectrogram, frame-major storage.
struct ComplexSpec {
  int n_bins = 0;    // n_fft/2 + 1
  int n_frames = 0;
  std::vector<std::complex<double>> data;  // [frame * n_bins + bin]

  std::complex<double>& at(int frame, int bin) {
    return data[static_cast<size_t>(frame) * n_bins + bin];
  }
  std::complex<double> at(int frame, int bin) const {
    return data[static_cast<size_t>(frame) * n_bins + bin];
  }
};

namespace detail {
// reflect index into [0, n); mirrors without repeating the edge sample
inline int64_t reflect_index(int64_t i, int64_t n) {
  if (n == 1) return 0;
  int64_t period = 2 * (n - 1);
  i = ((i % period) + period) % period;
  return i < n ? i : period - i;
}
}  // namespace detail

/// Hann-windowed frames centered every hop samples (reflect padding at the
/// edges); frame count is 1 + floor((len - n_fft) / hop).
inline ComplexSpec stft(const AudioClip& clip, const StftParams& p) {
  p.validate();
  int64_t len = static_cast<int64_t>(clip.samples.size());
  if (len < p.n_fft)
    throw ConfigError("stft: clip shorter than one frame (" +
                      std::to_string(len) + " < " + std::to_string(p.n_fft) + ")");
  int n_frames = static_cast<int>(1 + (len - p.n_fft) / p.hop);
  int n_bins = p.n_fft / 2 + 1;
  int64_t pad = p.n_fft / 2;

  std::vector<double> win = hann_window(p.n_fft);
  ComplexSpec spec;
  spec.n_bins = n_bins;
  spec.n_frames = n_frames;
  spec.data.resize(static_cast<size_t>(n_frames) * n_bins);

  std::vector<std::complex<double>> buf(static_cast<size_t>(p.n_fft));
  for (int t = 0; t < n_frames; ++t) {
    int64_t start = static_cast<int64_t>(t) * p.hop - pad;
    for (int i = 0; i < p.n_fft; ++i) {
      int64_t src = detail::reflect_index(start + i, len);
      buf[static_cast<size_t>(i)] =
          clip.samples[static_cast<size_t>(src)] * win[static_cast<size_t>(i)];
    }
    fft_inplace(buf, false);
    for (int b = 0; b < n_bins; ++b) spec.at(t, b) = buf[static_cast<size_t>(b)];
  }
  return spec;
}

/// Weighted overlap-add inverse of `stft` (Hann synthesis window).
inline AudioClip istft(const ComplexSpec& spec, const StftParams& p,
                       int sample_rate) {
  p.validate();
  int64_t pad = p.n_fft / 2;
  int64_t full = static_cast<int64_t>(spec.n_frames - 1) * p.hop + p.n_fft;
  std::vector<double> acc(static_cast<size_t>(full), 0.0);
  std::vector<double> norm(static_cast<size_t>(full), 0.0);
  std::vector<double> win = hann_window(p.n_fft);

  std::vector<std::complex<double>> buf(static_cast<size_t>(p.n_fft));
  for (int t = 0; t < spec.n_frames; ++t) {
    for (int b = 0; b < spec.n_bins; ++b) buf[static_cast<size_t>(b)] = spec.at(t, b);
    for (int b = spec.n_bins; b < p.n_fft; ++b)
      buf[static_cast<size_t>(b)] = std::conj(spec.at(t, p.n_fft - b));
    fft_inplace(buf, true);
    int64_t start = static_cast<int64_t>(t) * p.hop;
    for (int i = 0; i < p.n_fft; ++i) {
      acc[static_cast<size_t>(start + i)] += buf[static_cast<size_t>(i)].real() * win[static_cast<size_t>(i)];
      norm[static_cast<size_t>(start + i)] += win[static_cast<size_t>(i)] * win[static_cast<size_t>(i)];
    }
  }
  int64_t out_len = static_cast<int64_t>(spec.n_frames - 1) * p.hop;
  AudioClip clip;
  clip.sample_rate = sample_rate;
  clip.samples.resize(static_cast<size_t>(std::max<int64_t>(out_len, 0)));
  for (int64_t i = 0; i < out_len; ++i) {
    double w = norm[static_cast<size_t>(i + pad)];
    clip.samples[static_cast<size_t>(i)] =
        static_cast<float>(w > 1e-10 ? acc[static_cast<size_t>(i + pad)] / w : 0.0);
  }
  return clip;
}

// ------------------------------------------------------------ mel scale

// Slaney mel: linear below 1 kHz, logarithmic above.
inline double hz_to_mel(double f) {
  if (f < 1000.0) return f * 3.0 / 200.0;
  return 15.0 + 27.0 * std::log(f / 1000.0) / std::log(6.4);
}

inline double mel_to_hz(double m) {
  if (m < 15.0) return m * 200.0 / 3.0;
  return 1000.0 * std::exp(std::log(6.4) * (m - 15.0) / 27.0);
}

/// Triangular filterbank with Slaney area normalization.
struct MelFilterbank {
  int n_mels = 0, n_bins = 0;
  std::vector<double> weights;  // [mel * n_bins + bin]
  std::vector<double> centers_hz;

  MelFilterbank() = default;
  MelFilterbank(int n_mels_, int n_fft, int sample_rate, double fmin,
                double fmax) {
    if (n_mels_ < 8) throw ConfigError("n_mels must be >= 8");
    n_mels = n_mels_;
    n_bins = n_fft / 2 + 1;
    weights.assign(static_cast<size_t>(n_mels) * n_bins, 0.0);
    double mlo = hz_to_mel(fmin), mhi = hz_to_mel(fmax);
    std::vector<double> edges(static_cast<size_t>(n_mels) + 2);
    for (int i = 0; i < n_mels + 2; ++i)
      edges[static_cast<size_t>(i)] =
          mel_to_hz(mlo + (mhi - mlo) * i / (n_mels + 1));
    centers_hz.assign(edges.begin() + 1, edges.end() - 1);
    for (int m = 0; m < n_mels; ++m) {
      double f0 = edges[static_cast<size_t>(m)];
      double f1 = edges[static_cast<size_t>(m) + 1];
      double f2 = edges[static_cast<size_t>(m) + 2];
      double enorm = 2.0 / (f2 - f0);
      for (int b = 0; b < n_bins; ++b) {
        double f = static_cast<double>(b) * sample_rate / n_fft;
        double w = 0.0;
        if (f > f0 && f < f2)
          w = f <= f1 ? (f - f0) / (f1 - f0) : (f2 - f) / (f2 - f1);
        weights[static_cast<size_t>(m) * n_bins + b] = w * enorm;
      }
    }
  }
};

/// Log-compressed, min-max-normalized mel spectrogram image in [0,1].
/// value = 1 + dB/|floor_db| with dB relative to the clip's peak mel power;
/// an all-zero clip maps to all zeros.
struct MelSpectrogram {
  int n_mels = 0, n_frames = 0;
  std::vector<float> values;  // [mel * n_frames + frame], in [0,1]
  int sample_rate = 22020;
  int n_fft = 1024, hop = 256;
  double fmin = 0.0, fmax = 11010.0;
  double floor_db = -80.0;

  float& at(int m, int t) { return values[static_cast<size_t>(m) * n_frames + t]; }
  float at(int m, int t) const { return values[static_cast<size_t>(m) * n_frames + t]; }

  ImageF to_image() const {
    ImageF img(n_mels, n_frames, 1);
    std::copy(values.begin(), values.end(), img.pixels.begin());
    return img;
  }

  static MelSpectrogram from_image(const ImageF& img, int sample_rate,
                                   const StftParams& p, double floor_db) {
    MelSpectrogram m;
    m.n_mels = img.height;
    m.n_frames = img.width;
    m.sample_rate = sample_rate;
    m.n_fft = p.n_fft;
    m.hop = p.hop;
    m.fmax = sample_rate / 2.0;
    m.floor_db = floor_db;
    m.values.assign(img.pixels.begin(),
                    img.pixels.begin() + static_cast<int64_t>(img.height) * img.width);
    return m;
  }
};

inline MelSpectrogram mel_spectrogram(const AudioClip& clip,
                                      const StftParams& p, int n_mels,
                                      double floor_db = -80.0) {
  ComplexSpec spec = stft(clip, p);
  MelFilterbank fb(n_mels, p.n_fft, clip.sample_rate, 0.0,
                   clip.sample_rate / 2.0);
  MelSpectrogram out;
  out.n_mels = n_mels;
  out.n_frames = spec.n_frames;
  out.sample_rate = clip.sample_rate;
  out.n_fft = p.n_fft;
  out.hop = p.hop;
  out.fmax = clip.sample_rate / 2.0;
  out.floor_db = floor_db;
  out.values.assign(static_cast<size_t>(n_mels) * spec.n_frames, 0.f);

  std::vector<double> mel_power(static_cast<size_t>(n_mels) * spec.n_frames, 0.0);
  double peak = 0.0;
  for (int t = 0; t < spec.n_frames; ++t)
    for (int m = 0; m < n_mels; ++m) {
      double acc = 0.0;
      const double* wrow = fb.weights.data() + static_cast<size_t>(m) * fb.n_bins;
      for (int b = 0; b < fb.n_bins; ++b) {
        double mag2 = std::norm(spec.at(t, b));
        acc += wrow[b] * mag2;
      }
      mel_power[static_cast<size_t>(m) * spec.n_frames + t] = acc;
      peak = std::max(peak, acc);
    }
  if (peak <= 0.0) return out;  // silence: all zeros by convention
  for (size_t i = 0; i < mel_power.size(); ++i) {
    double rel = mel_power[i] / peak;
    double db = 10.0 * std::log10(std::max(rel, std::pow(10.0, floor_db / 10.0)));
    out.values[i] = static_cast<float>(1.0 - db / floor_db);
  }
  return out;
}

// ------------------------------------------------------------ griffin-lim

namespace detail {

// clamped least squares via the filterbank's Gram matrix
inline std::vector<double> mel_to_linear_pinv(const MelFilterbank& fb,
                                              const std::vector<double>& mel_col) {
  int nm = fb.n_mels, nb = fb.n_bins;
  double content = 0;  // cheap content key so equally-shaped banks never alias
  for (size_t i = 0; i < fb.weights.size(); i += 97) content += fb.weights[i];
  // G = FB FB^T  (nm x nm), rhs = mel column; solve G y = m, s = FB^T y
  static thread_local std::vector<double> gram;
  static thread_local std::vector<int> piv;
  static thread_local int cached_nm = -1, cached_nb = -1;
  static thread_local double cached_content = -1;
  if (cached_nm != nm || cached_nb != nb || cached_content != content) {
    gram.assign(static_cast<size_t>(nm) * nm, 0.0);
    for (int i = 0; i < nm; ++i)
      for (int j = 0; j < nm; ++j) {
        double acc = 0;
        for (int b = 0; b < nb; ++b)
          acc += fb.weights[static_cast<size_t>(i) * nb + b] *
                 fb.weights[static_cast<size_t>(j) * nb + b];
        gram[static_cast<size_t>(i) * nm + j] = acc;
      }
    for (int i = 0; i < nm; ++i) gram[static_cast<size_t>(i) * nm + i] += 1e-10;
    double sign;
    std::vector<double> lu = gram;
    if (!lu_decompose(lu, nm, piv, sign))
      throw NumericError("mel filterbank Gram matrix is singular");
    gram = lu;
    cached_nm = nm;
    cached_nb = nb;
    cached_content = content;
  }
  std::vector<double> y(static_cast<size_t>(nm));
  lu_solve(gram, piv, nm, mel_col.data(), y.data());
  std::vector<double> s(static_cast<size_t>(nb), 0.0);
  for (int b = 0; b < nb; ++b) {
    double acc = 0;
    for (int m = 0; m < nm; ++m)
      acc += fb.weights[static_cast<size_t>(m) * nb + b] * y[static_cast<size_t>(m)];
    s[static_cast<size_t>(b)] = std::max(acc, 0.0);
  }
  return s;
}

// projected-gradient non-negative least squares
inline std::vector<double> mel_to_linear_nnls(const MelFilterbank& fb,
                                              const std::vector<double>& mel_col,
                                              int iters = 100) {
  int nm = fb.n_mels, nb = fb.n_bins;
  std::vector<double> s = mel_to_linear_pinv(fb, mel_col);
  double lipschitz = 0.0;
  for (int m = 0; m < nm; ++m) {
    double row = 0;
    for (int b = 0; b < nb; ++b) row += std::fabs(fb.weights[static_cast<size_t>(m) * nb + b]);
    lipschitz = std::max(lipschitz, row);
  }
  double step = 1.0 / (lipschitz * lipschitz + 1e-12);
  std::vector<double> resid(static_cast<size_t>(nm));
  for (int it = 0; it < iters; ++it) {
    for (int m = 0; m < nm; ++m) {
      double acc = 0;
      for (int b = 0; b < nb; ++b)
        acc += fb.weights[static_cast<size_t>(m) * nb + b] * s[static_cast<size_t>(b)];
      resid[static_cast<size_t>(m)] = acc - mel_col[static_cast<size_t>(m)];
    }
    for (int b = 0; b < nb; ++b) {
      double g = 0;
      for (int m = 0; m < nm; ++m)
        g += fb.weights[static_cast<size_t>(m) * nb + b] * resid[static_cast<size_t>(m)];
      s[static_cast<size_t>(b)] = std::max(0.0, s[static_cast<size_t>(b)] - step * g);
    }
  }
  return s;
}

}  // namespace detail

/// Recover the linear magnitude spectrogram a mel image encodes (up to the
/// overall gain the normalization discarded).
inline std::vector<double> mel_to_linear_magnitude(const MelSpectrogram& m,
                                                   bool use_nnls = false) {
  MelFilterbank fb(m.n_mels, m.n_fft, m.sample_rate, m.fmin, m.fmax);
  int nb = fb.n_bins;
  std::vector<double> mag(static_cast<size_t>(nb) * m.n_frames, 0.0);
  std::vector<double> col(static_cast<size_t>(m.n_mels));
  for (int t = 0; t < m.n_frames; ++t) {
    bool any = false;
    for (int i = 0; i < m.n_mels; ++i) {
      double v = m.at(i, t);
      if (v > 0.f) any = true;
      double db = (static_cast<double>(v) - 1.0) * (-m.floor_db);
      double power = std::pow(10.0, db / 10.0);
      // the floor is rendered as exact silence
      col[static_cast<size_t>(i)] = v <= 0.f ? 0.0 : power;
    }
    if (!any) continue;
    std::vector<double> s = use_nnls ? detail::mel_to_linear_nnls(fb, col)
                                     : detail::mel_to_linear_pinv(fb, col);
    for (int b = 0; b < nb; ++b)
      mag[static_cast<size_t>(b) * m.n_frames + t] = std::sqrt(s[static_cast<size_t>(b)]);
  }
  return mag;
}

/// Iterative phase reconstruction. iterations = 0 returns the zero-phase
/// signal; otherwise phases start from the seeded uniform initializer and
/// the result is deterministic given the seed.
inline AudioClip griffin_lim(const MelSpectrogram& m, int iterations = 60,
                             uint64_t seed = 0, bool use_nnls = false) {
  if (m.n_mels < 8 || m.n_frames < 2)
    throw ConfigError("griffin_lim: degenerate mel spectrogram");
  StftParams p{m.n_fft, m.hop};
  std::vector<double> mag = mel_to_linear_magnitude(m, use_nnls);
  int nb = p.n_fft / 2 + 1;

  double total = 0.0;
  for (double v : mag) total += v;
  if (total <= 0.0) {
    AudioClip silent;
    silent.sample_rate = m.sample_rate;
    silent.samples.assign(static_cast<size_t>((m.n_frames - 1) * m.hop), 0.f);
    return silent;
  }

  ComplexSpec spec;
  spec.n_bins = nb;
  spec.n_frames = m.n_frames;
  spec.data.resize(static_cast<size_t>(nb) * m.n_frames);
  Rng rng(seed);
  for (int t = 0; t < m.n_frames; ++t)
    for (int b = 0; b < nb; ++b) {
      double a = iterations > 0 ? rng.uniform(-kPi, kPi) : 0.0;
      spec.at(t, b) = std::polar(mag[static_cast<size_t>(b) * m.n_frames + t], a);
    }

  AudioClip x;
  for (int it = 0; it < iterations; ++it) {
    x = istft(spec, p, m.sample_rate);
    if (static_cast<int>(x.samples.size()) < p.n_fft) break;
    ComplexSpec est = stft(x, p);
    int frames = std::min(est.n_frames, m.n_frames);
    for (int t = 0; t < frames; ++t)
      for (int b = 0; b < nb; ++b) {
        std::complex<double> v = est.at(t, b);
        double a = std::abs(v);
        spec.at(t, b) = a > 1e-12
                            ? v / a * mag[static_cast<size_t>(b) * m.n_frames + t]
                            : std::complex<double>(
                                  mag[static_cast<size_t>(b) * m.n_frames + t], 0.0);
      }
  }
  x = istft(spec, p, m.sample_rate);

  float peak = 0.f;
  for (float v : x.samples) peak = std::max(peak, std::fabs(v));
  if (peak > 0.f)
    for (auto& v : x.samples) v = v / peak * 0.9f;
  return x;
}

// ------------------------------------------------------------ formants

namespace detail {

// Levinson-Durbin: error-filter coefficients c so A(z) = 1 + sum c_k z^-k.
inline bool levinson(const std::vector<double>& r, int order,
                     std::vector<double>& c) {
  c.assign(static_cast<size_t>(order) + 1, 0.0);
  c[0] = 1.0;
  double err = r[0];
  if (err <= 0.0) return false;
  for (int i = 1; i <= order; ++i) {
    double acc = r[static_cast<size_t>(i)];
    for (int j = 1; j < i; ++j) acc += c[static_cast<size_t>(j)] * r[static_cast<size_t>(i - j)];
    double k = -acc / err;
    std::vector<double> nc = c;
    nc[static_cast<size_t>(i)] = k;
    for (int j = 1; j < i; ++j)
      nc[static_cast<size_t>(j)] = c[static_cast<size_t>(j)] + k * c[static_cast<size_t>(i - j)];
    c = std::move(nc);
    err *= (1.0 - k * k);
    if (err <= 0.0) return false;
  }
  return true;
}

// Durand-Kerner roots of a monic real polynomial z^n + a1 z^{n-1} + ... + an.
inline std::vector<std::complex<double>> poly_roots(
    const std::vector<double>& coef) {
  int n = static_cast<int>(coef.size()) - 1;
  std::vector<std::complex<double>> roots(static_cast<size_t>(n));
  std::complex<double> base(0.4, 0.9);
  std::complex<double> acc(1.0, 0.0);
  for (int i = 0; i < n; ++i) {
    acc *= base;
    roots[static_cast<size_t>(i)] = acc;
  }
  auto eval = [&](std::complex<double> z) {
    std::complex<double> v(coef[0], 0.0);
    for (size_t i = 1; i < coef.size(); ++i) v = v * z + coef[i];
    return v;
  };
  for (int it = 0; it < 500; ++it) {
    double worst = 0.0;
    for (int i = 0; i < n; ++i) {
      std::complex<double> denom(1.0, 0.0);
      for (int j = 0; j < n; ++j)
        if (j != i) denom *= roots[static_cast<size_t>(i)] - roots[static_cast<size_t>(j)];
      if (std::abs(denom) < 1e-30) continue;
      std::complex<double> delta = eval(roots[static_cast<size_t>(i)]) / denom;
      roots[static_cast<size_t>(i)] -= delta;
      worst = std::max(worst, std::abs(delta));
    }
    if (worst < 1e-12) break;
  }
  return roots;
}

}  // namespace detail

namespace detail {

// two-pass RBJ biquad highpass (4th order overall)
inline std::vector<double> highpass4(const std::vector<float>& in, int sr,
                                     double fc) {
  std::vector<double> x(in.begin(), in.end());
  double w0 = kTwoPi * fc / sr;
  double cw = std::cos(w0), sw = std::sin(w0);
  double alpha = sw / (2.0 * 0.70710678118654752);
  double b0 = (1 + cw) / 2, b1 = -(1 + cw), b2 = (1 + cw) / 2;
  double a0 = 1 + alpha, a1 = -2 * cw, a2 = 1 - alpha;
  b0 /= a0; b1 /= a0; b2 /= a0; a1 /= a0; a2 /= a0;
  for (int pass = 0; pass < 2; ++pass) {
    double x1 = 0, x2 = 0, y1 = 0, y2 = 0;
    for (auto& v : x) {
      double y = b0 * v + b1 * x1 + b2 * x2 - a1 * y1 - a2 * y2;
      x2 = x1; x1 = v; y2 = y1; y1 = y;
      v = y;
    }
  }
  return x;
}

}  // namespace detail

/// LPC formant tracking: low-cut at 160 Hz to drop glottal-pulse energy well
/// under the first formant, pre-emphasis 0.97, 25 ms Hamming frames every
/// 10 ms, autocorrelation LPC of order 2 + sr/1000, roots kept when their
/// bandwidth is under 400 Hz and frequency within [90, nyquist-50], averaged
/// over frames. Scale-invariant by construction.
inline std::vector<double> estimate_formants(const AudioClip& clip,
                                             int n_formants = 3) {
  int sr = clip.sample_rate;
  if (static_cast<int>(clip.samples.size()) < sr / 10)
    throw ConfigError("estimate_formants: need at least 100 ms of audio");
  int order = 2 + static_cast<int>(std::lround(sr / 1000.0));
  int win = static_cast<int>(std::lround(0.025 * sr));
  int hop = static_cast<int>(std::lround(0.010 * sr));

  std::vector<double> hp = detail::highpass4(clip.samples, sr, 160.0);
  std::vector<double> x(hp.size());
  x[0] = hp[0];
  for (size_t i = 1; i < x.size(); ++i) x[i] = hp[i] - 0.97 * hp[i - 1];

  std::vector<double> ham = hamming_window(win);
  std::vector<double> sums(static_cast<size_t>(n_formants), 0.0);
  int frames_used = 0;
  int best_count = 0;

  for (int64_t start = 0; start + win <= static_cast<int64_t>(x.size());
       start += hop) {
    std::vector<double> frame(static_cast<size_t>(win));
    double energy = 0;
    for (int i = 0; i < win; ++i) {
      frame[static_cast<size_t>(i)] = x[static_cast<size_t>(start + i)] * ham[static_cast<size_t>(i)];
      energy += frame[static_cast<size_t>(i)] * frame[static_cast<size_t>(i)];
    }
    if (energy < 1e-12) continue;

    std::vector<double> r(static_cast<size_t>(order) + 1, 0.0);
    for (int k = 0; k <= order; ++k) {
      double acc = 0;
      for (int i = 0; i + k < win; ++i)
        acc += frame[static_cast<size_t>(i)] * frame[static_cast<size_t>(i + k)];
      r[static_cast<size_t>(k)] = acc;
    }
    r[0] *= 1.0 + 1e-9;  // tiny ridge for numerical safety
    std::vector<double> c;
    if (!detail::levinson(r, order, c)) continue;

    std::vector<std::complex<double>> roots = detail::poly_roots(c);
    std::vector<double> freqs;
    for (const auto& z : roots) {
      if (z.imag() <= 0.0) continue;
      double mag = std::abs(z);
      if (mag >= 1.0 || mag < 1e-6) continue;
      double f = std::atan2(z.imag(), z.real()) * sr / kTwoPi;
      double bw = -std::log(mag) * sr / kPi;
      if (bw < 400.0 && f >= 90.0 && f <= sr / 2.0 - 50.0) freqs.push_back(f);
    }
    std::sort(freqs.begin(), freqs.end());
    best_count = std::max(best_count, static_cast<int>(freqs.size()));
    if (static_cast<int>(freqs.size()) < n_formants) continue;
    for (int k = 0; k < n_formants; ++k) sums[static_cast<size_t>(k)] += freqs[static_cast<size_t>(k)];
    ++frames_used;
  }

  if (frames_used == 0)
    throw NumericError("estimate_formants: found only " +
                       std::to_string(best_count) +
                       " qualifying resonances, need " +
                       std::to_string(n_formants));
  std::vector<double> out(static_cast<size_t>(n_formants));
  for (int k = 0; k < n_formants; ++k)
    out[static_cast<size_t>(k)] = sums[static_cast<size_t>(k)] / frames_used;
  return out;
}

// ------------------------------------------------------------ mel caching

/// PNG cache of a mel image with the JSON sidecar needed to invert it.
inline void save_mel_png(const MelSpectrogram& m, const std::string& path) {
  ImageF img = m.to_image();
  write_png(path, img);
  nlohmann::ordered_json side;
  side["n_fft"] = m.n_fft;
  side["hop"] = m.hop;
  side["n_mels"] = m.n_mels;
  side["sample_rate"] = m.sample_rate;
  side["fmin"] = m.fmin;
  side["fmax"] = m.fmax;
  side["norm_floor_db"] = m.floor_db;
  std::ofstream f(path + ".json");
  if (!f) throw IoError("cannot write sidecar: " + path + ".json");
  f << side.dump(2) << "\n";
}

inline MelSpectrogram load_mel_png(const std::string& path) {
  std::ifstream f(path + ".json");
  if (!f) throw IoError("missing mel sidecar: " + path + ".json");
  nlohmann::json side = nlohmann::json::parse(f);
  ImageF img = read_png(path);
  StftParams p{side.at("n_fft").get<int>(), side.at("hop").get<int>()};
  MelSpectrogram m = MelSpectrogram::from_image(
      img, side.at("sample_rate").get<int>(), p,
      side.at("norm_floor_db").get<double>());
  m.fmin = side.at("fmin").get<double>();
  m.fmax = side.at("fmax").get<double>();
  return m;
}

}  // namespace tractflow::audio
