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

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "tractflow/common.hpp"
#include "tractflow/dsp.hpp"
#include "tractflow/image.hpp"
#include "tractflow/wav.hpp"

namespace tractflow::synth {

/// Two-degree-of-freedom tongue control plus glottal pitch.
struct TongueParams {
  double tongue_position = 0.5;  // 0 = glottis end, 1 = lips
  double tongue_diameter = 0.5;  // 0 = full constriction, 1 = open
  double f0 = 140.0;             // Hz

  void validate() const {
    if (!(tongue_position >= 0.0 && tongue_position <= 1.0))
      throw ConfigError("tongue_position must be in [0,1], got " +
                        std::to_string(tongue_position));
    if (!(tongue_diameter >= 0.0 && tongue_diameter <= 1.0))
      throw ConfigError("tongue_diameter must be in [0,1], got " +
                        std::to_string(tongue_diameter));
    if (!(f0 >= 60.0 && f0 <= 400.0))
      throw ConfigError("f0 must be in [60,400] Hz, got " + std::to_string(f0));
  }
};

/// Sectional tract description driving the waveguide.
struct AreaFunction {
  int n_sections = 44;
  double tract_length_cm = 17.5;
  std::vector<double> diameters_cm;

  double section_length_cm() const { return tract_length_cm / n_sections; }

  void validate() const {
    if (n_sections < 2) throw ConfigError("area function needs >= 2 sections");
    if (static_cast<int>(diameters_cm.size()) != n_sections)
      throw ConfigError("area function has " +
                        std::to_string(diameters_cm.size()) +
                        " diameters for " + std::to_string(n_sections) +
                        " sections");
    for (double d : diameters_cm)
      if (!(d > 0.0)) throw ConfigError("non-positive tract diameter");
  }

  std::vector<double> areas_cm2() const {
    std::vector<double> a(diameters_cm.size());
    for (size_t i = 0; i < a.size(); ++i) {
      double r = diameters_cm[i] * 0.5;
      a[i] = kPi * r * r;
    }
    return a;
  }
};

struct SynthConfig {
  int n_sections = 44;
  double tract_length_cm = 17.5;
  double speed_of_sound_mps = 343.0;
  double rest_pharynx_cm = 1.5;
  double rest_oral_cm = 1.0;
  double min_diameter_cm = 0.05;
  double bump_halfwidth_sections = 10.0;
  double glottal_reflection = 0.75;
  double lip_reflection = -0.85;
  double damping = 0.999;
  double open_quotient = 0.6;
  int sample_rate = 22020;
  double transient_s = 0.05;  // run and discard before emitting audio
};

/// Rest profile: wide pharynx, narrower oral cavity, smooth join.
inline double rest_diameter(double u, const SynthConfig& cfg) {
  const double lo = 0.40, hi = 0.60;
  if (u <= lo) return cfg.rest_pharynx_cm;
  if (u >= hi) return cfg.rest_oral_cm;
  double t = (u - lo) / (hi - lo);
  double blend = 0.5 - 0.5 * std::cos(kPi * t);
  return cfg.rest_pharynx_cm + (cfg.rest_oral_cm - cfg.rest_pharynx_cm) * blend;
}

/// Raised-cosine constriction superimposed multiplicatively on the rest
/// profile. tongue_diameter = 1 reproduces the rest profile exactly;
/// tongue_diameter = 0 pinches the center down to the clamp floor.
inline AreaFunction tongue_to_area(const TongueParams& p,
                                   const SynthConfig& cfg = {}) {
  p.validate();
  int n = cfg.n_sections;
  AreaFunction af;
  af.n_sections = n;
  af.tract_length_cm = cfg.tract_length_cm;
  af.diameters_cm.resize(static_cast<size_t>(n));
  double center = p.tongue_position * (n - 1);
  double depth = 1.0 - p.tongue_diameter;
  for (int i = 0; i < n; ++i) {
    double u = n > 1 ? static_cast<double>(i) / (n - 1) : 0.0;
    double rest = rest_diameter(u, cfg);
    double dist = std::fabs(i - center);
    double bump = dist < cfg.bump_halfwidth_sections
                      ? 0.5 + 0.5 * std::cos(kPi * dist /
                                             cfg.bump_halfwidth_sections)
                      : 0.0;
    double d = rest * (1.0 - depth * bump);
    af.diameters_cm[static_cast<size_t>(i)] =
        std::max(d, cfg.min_diameter_cm);
  }
  return af;
}

/// Junction reflection coefficients r_i = (A_i - A_{i+1}) / (A_i + A_{i+1}).
inline std::vector<double> reflection_coefficients(const AreaFunction& a) {
  std::vector<double> areas = a.areas_cm2();
  std::vector<double> r(areas.size() - 1);
  for (size_t i = 0; i + 1 < areas.size(); ++i)
    r[i] = (areas[i] - areas[i + 1]) / (areas[i] + areas[i + 1]);
  return r;
}

/// Rosenberg glottal flow pulse on phase in [0,1).
inline double rosenberg_pulse(double phase, double open_quotient) {
  double t1 = open_quotient * (2.0 / 3.0);
  double t2 = open_quotient / 3.0;
  if (phase < t1) return 0.5 - 0.5 * std::cos(kPi * phase / t1);
  if (phase < t1 + t2) return std::cos(kPi * (phase - t1) / (2.0 * t2));
  return 0.0;
}

/// Kelly-Lochbaum scattering waveguide driven by a Rosenberg pulse train.
/// The waveguide runs at its physical rate n_sections*c/length so the tube
/// resonates at the quarter-wave frequencies of the stated length, then the
/// output is band-limited resampled to the requested audio rate. The lip tap
/// is differentiated (radiation into free space), and a fixed transient is
/// run and discarded, so the clip is steady state throughout.
inline AudioClip synthesize(const AreaFunction& a, double f0, double duration_s,
                            int sample_rate = 22020,
                            const SynthConfig& cfg = {}) {
  a.validate();
  if (!(duration_s > 0.0))
    throw ConfigError("synthesize: duration must be positive, got " +
                      std::to_string(duration_s));
  if (!(f0 >= 60.0 && f0 <= 400.0))
    throw ConfigError("synthesize: f0 must be in [60,400] Hz");
  if (sample_rate < 8000) throw ConfigError("synthesize: sample rate too low");

  int n = a.n_sections;
  double internal_rate =
      n * cfg.speed_of_sound_mps / (a.tract_length_cm * 0.01);
  std::vector<double> refl = reflection_coefficients(a);
  for (double r : refl)
    if (!(r > -1.0 && r < 1.0))
      throw NumericError("reflection coefficient out of (-1,1)");

  int64_t total_steps = static_cast<int64_t>(
      std::ceil((duration_s + cfg.transient_s) * internal_rate));
  int64_t skip_steps =
      static_cast<int64_t>(std::lround(cfg.transient_s * internal_rate));

  std::vector<double> right(static_cast<size_t>(n), 0.0);
  std::vector<double> left(static_cast<size_t>(n), 0.0);
  std::vector<double> out_r(static_cast<size_t>(n) + 1, 0.0);
  std::vector<double> out_l(static_cast<size_t>(n) + 1, 0.0);
  std::vector<float> raw;
  raw.reserve(static_cast<size_t>(total_steps - skip_steps));

  double phase = 0.0;
  double dphase = f0 / internal_rate;
  double prev_lip = 0.0;
  for (int64_t t = 0; t < total_steps; ++t) {
    double excitation = 0.1 * rosenberg_pulse(phase, cfg.open_quotient);
    phase += dphase;
    if (phase >= 1.0) phase -= 1.0;

    out_r[0] = left[0] * cfg.glottal_reflection + excitation;
    out_l[static_cast<size_t>(n)] =
        right[static_cast<size_t>(n) - 1] * cfg.lip_reflection;
    for (int j = 1; j < n; ++j) {
      double w = refl[static_cast<size_t>(j) - 1] *
                 (right[static_cast<size_t>(j) - 1] + left[static_cast<size_t>(j)]);
      out_r[static_cast<size_t>(j)] = right[static_cast<size_t>(j) - 1] - w;
      out_l[static_cast<size_t>(j)] = left[static_cast<size_t>(j)] + w;
    }
    for (int i = 0; i < n; ++i) {
      right[static_cast<size_t>(i)] = out_r[static_cast<size_t>(i)] * cfg.damping;
      left[static_cast<size_t>(i)] = out_l[static_cast<size_t>(i) + 1] * cfg.damping;
    }
    double lip = right[static_cast<size_t>(n) - 1];
    double radiated = lip - prev_lip;
    prev_lip = lip;
    if (t >= skip_steps) raw.push_back(static_cast<float>(radiated));
  }

  std::vector<float> audio = resample(raw, internal_rate, sample_rate);
  int64_t want = static_cast<int64_t>(std::lround(duration_s * sample_rate));
  if (static_cast<int64_t>(audio.size()) > want) audio.resize(static_cast<size_t>(want));

  float peak = 0.f;
  for (float v : audio) peak = std::max(peak, std::fabs(v));
  if (peak > 0.f)
    for (auto& v : audio) v = v / peak * 0.9f;
  for (float v : audio)
    if (!std::isfinite(v)) throw NumericError("synthesize produced non-finite audio");

  AudioClip clip;
  clip.samples = std::move(audio);
  clip.sample_rate = sample_rate;
  return clip;
}

// ------------------------------------------------------------ geometry

/// Mid-sagittal schematic: the air channel between a fixed palate arc and a
/// tongue wall whose width follows the tract diameters. Rasterized with 3x3
/// supersampling; identical inputs give identical pixels.
inline ImageF render_geometry(const TongueParams& p, int h, int w,
                              int channels = 1, const SynthConfig& cfg = {}) {
  p.validate();
  if (h < 16 || w < 16)
    throw ConfigError("render_geometry: image must be at least 16x16");
  if (channels != 1 && channels != 3)
    throw ConfigError("render_geometry: 1 or 3 channels only");

  AreaFunction af = tongue_to_area(p, cfg);
  const int m = 64;  // samples along the tract arc
  double cx = 0.46 * w, cy = 0.62 * h;
  double r_out = 0.40 * std::min(h, w);
  double px_per_cm = 0.10 * std::min(h, w);

  auto diameter_at = [&](double u) {
    double fi = u * (af.n_sections - 1);
    int i0 = static_cast<int>(fi);
    int i1 = std::min(i0 + 1, af.n_sections - 1);
    double t = fi - i0;
    return (1 - t) * af.diameters_cm[static_cast<size_t>(i0)] +
           t * af.diameters_cm[static_cast<size_t>(i1)];
  };

  // closed polygon: outer wall out, inner wall back
  std::vector<double> poly_x, poly_y;
  poly_x.reserve(2 * m);
  poly_y.reserve(2 * m);
  for (int k = 0; k < m; ++k) {
    double u = static_cast<double>(k) / (m - 1);
    double ang = (160.0 + 180.0 * u) * kPi / 180.0;
    poly_x.push_back(cx + r_out * std::cos(ang));
    poly_y.push_back(cy + r_out * std::sin(ang));
  }
  for (int k = m - 1; k >= 0; --k) {
    double u = static_cast<double>(k) / (m - 1);
    double ang = (160.0 + 180.0 * u) * kPi / 180.0;
    double r_in = r_out - diameter_at(u) * px_per_cm;
    poly_x.push_back(cx + r_in * std::cos(ang));
    poly_y.push_back(cy + r_in * std::sin(ang));
  }

  auto inside = [&](double x, double y) {
    bool in = false;
    size_t nv = poly_x.size();
    for (size_t i = 0, j = nv - 1; i < nv; j = i++) {
      if ((poly_y[i] > y) != (poly_y[j] > y)) {
        double t = (y - poly_y[i]) / (poly_y[j] - poly_y[i]);
        if (x < poly_x[i] + t * (poly_x[j] - poly_x[i])) in = !in;
      }
    }
    return in;
  };

  ImageF img(h, w, channels);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      int hits = 0;
      for (int sy = 0; sy < 3; ++sy)
        for (int sx = 0; sx < 3; ++sx)
          if (inside(x + (sx + 0.5) / 3.0, y + (sy + 0.5) / 3.0)) ++hits;
      float v = static_cast<float>(hits) / 9.0f;
      for (int c = 0; c < channels; ++c) img.at(c, y, x) = v;
    }
  return img;
}

}  // namespace tractflow::synth
