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

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "tractflow/audio_features.hpp"
#include "tractflow/train.hpp"

namespace tractflow::eval {

/// Reference operating point of the full-scale system this desk-scale build
/// is sanity-checked against.
struct FullScaleReference {
  std::vector<double> formant_error_pct{18.57, 24.21, 7.69};
  double image_mae = 0.0397;
};

struct SampleRecord {
  std::string id;
  bool formants_ok = false;
  std::vector<double> formants_orig, formants_synth;
  double image_mae = 0.0;
};

struct EvalReport {
  std::vector<double> formant_error_pct;           // over all analyzable pairs
  std::vector<double> formant_error_pct_cardinal;  // over the 4 vowel-like points
  double image_mae = 0.0;
  int n_pairs = 0;
  int n_excluded = 0;
  std::string config_fingerprint;
  FullScaleReference reference;
  std::vector<SampleRecord> per_sample;

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["config_fingerprint"] = config_fingerprint;
    j["n_pairs"] = n_pairs;
    j["n_excluded_formants"] = n_excluded;
    j["formant_error_pct"] = formant_error_pct;
    j["formant_error_pct_cardinal"] = formant_error_pct_cardinal;
    j["image_mae"] = image_mae;
    j["reference_full_scale"] = {
        {"formant_error_pct", reference.formant_error_pct},
        {"image_mae", reference.image_mae}};
    auto recs = nlohmann::ordered_json::array();
    for (const auto& r : per_sample) {
      nlohmann::ordered_json e;
      e["id"] = r.id;
      e["formants_ok"] = r.formants_ok;
      if (r.formants_ok) {
        e["formants_orig"] = r.formants_orig;
        e["formants_synth"] = r.formants_synth;
      }
      e["image_mae"] = r.image_mae;
      recs.push_back(e);
    }
    j["per_sample"] = recs;
    return j;
  }
};

/// Mean absolute pixel difference over image pairs; exactly symmetric in its
/// arguments.
inline double image_mae(const std::vector<const ImageF*>& a,
                        const std::vector<const ImageF*>& b) {
  if (a.size() != b.size() || a.empty())
    throw ConfigError("image_mae: need equally many images on both sides");
  double acc = 0;
  int64_t count = 0;
  for (size_t i = 0; i < a.size(); ++i) {
    if (a[i]->height != b[i]->height || a[i]->width != b[i]->width ||
        a[i]->channels != b[i]->channels)
      throw ShapeError("image_mae: image shapes differ at pair " +
                       std::to_string(i));
    for (size_t k = 0; k < a[i]->pixels.size(); ++k) {
      acc += std::fabs(a[i]->pixels[k] - b[i]->pixels[k]);
      ++count;
    }
  }
  return acc / static_cast<double>(count);
}

struct FormantErrorResult {
  std::vector<double> mean_pct;  // per formant
  int n_used = 0;
  int n_excluded = 0;
};

/// Mean percent error of the first n formants of synthesized clips against
/// the originals; pairs whose estimation fails are excluded and counted.
/// The original clip's formants sit in the denominator, so the measure is
/// not symmetric in its arguments.
inline FormantErrorResult formant_error(
    const std::vector<const AudioClip*>& original,
    const std::vector<const AudioClip*>& synthesized, int n_formants = 3) {
  if (original.size() != synthesized.size() || original.empty())
    throw ConfigError("formant_error: need equally many clips on both sides");
  FormantErrorResult out;
  out.mean_pct.assign(static_cast<size_t>(n_formants), 0.0);
  for (size_t i = 0; i < original.size(); ++i) {
    try {
      std::vector<double> fo = audio::estimate_formants(*original[i], n_formants);
      std::vector<double> fs = audio::estimate_formants(*synthesized[i], n_formants);
      for (int k = 0; k < n_formants; ++k)
        out.mean_pct[static_cast<size_t>(k)] +=
            std::fabs(fs[static_cast<size_t>(k)] - fo[static_cast<size_t>(k)]) /
            fo[static_cast<size_t>(k)] * 100.0;
      ++out.n_used;
    } catch (const std::exception&) {
      ++out.n_excluded;
    }
  }
  if (out.n_used > 0)
    for (double& v : out.mean_pct) v /= out.n_used;
  return out;
}

// ------------------------------------------------------------ cross-domain

/// The four vowel-like controller positions used for the qualitative strips.
struct CardinalVowel {
  const char* label;
  double pos, diam;
};

inline const std::vector<CardinalVowel>& cardinal_vowels() {
  static const std::vector<CardinalVowel> v{
      {"a", 0.27, 0.34}, {"ae", 0.45, 0.42}, {"i", 0.75, 0.30}, {"u", 0.92, 0.32}};
  return v;
}

/// geometry image (model grid) -> predicted mel image (model grid)
template <typename T>
ImageF predict_mel_image(model::JointModel<T>& m, const ImageF& geo) {
  auto x = Var<T>::leaf(model::images_to_batch<T>({&geo}), false);
  Var<T> z_g = m.encode_geometry(x, false);
  Var<T> sh_s = m.map_g2s(m.shared_of(z_g));
  Tensor<T> zero_base({1, m.part.d_s_only});
  Var<T> only = m.prior_s.sample(zero_base, &sh_s);
  Var<T> z_s = concat<T>({sh_s, only}, 1);
  Var<T> img = m.decode_spectrogram(z_s, false);
  return model::batch_to_image(img.value(), 0);
}

/// mel image (model grid) -> predicted geometry image (model grid)
template <typename T>
ImageF predict_geo_image(model::JointModel<T>& m, const ImageF& mel) {
  auto x = Var<T>::leaf(model::images_to_batch<T>({&mel}), false);
  Var<T> z_s = m.encode_spectrogram(x, false);
  Var<T> sh_g = m.map_s2g(m.shared_of(z_s));
  Tensor<T> zero_base({1, m.part.d_g_only});
  Var<T> only = m.prior_g.sample(zero_base, &sh_g);
  Var<T> z_g = concat<T>({sh_g, only}, 1);
  Var<T> img = m.decode_geometry(z_g, false);
  return model::batch_to_image(img.value(), 0);
}

/// Mel geometry (rows x frames) of a clip with the configured duration.
inline std::pair<int, int> native_mel_shape(const train::RunConfig& cfg) {
  int64_t len = static_cast<int64_t>(std::lround(cfg.gen_duration_s * cfg.sample_rate));
  int frames = static_cast<int>(1 + (len - cfg.n_fft) / cfg.hop);
  return {cfg.n_mels, frames};
}

/// Turn a model-grid mel image back into audio through the stated mel
/// geometry and Griffin-Lim. Values under the configured gate are silenced
/// first: the decoder's sigmoid never reaches zero, and that faint haze
/// otherwise reads as spurious high-frequency resonances after inversion.
template <typename T>
AudioClip invert_mel_image(const ImageF& mel_model_grid, int native_h,
                           int native_w, const train::RunConfig& cfg) {
  ImageF native = resize_bilinear(mel_model_grid, native_h, native_w);
  for (auto& v : native.pixels)
    if (v < static_cast<float>(cfg.mel_gate)) v = 0.f;
  audio::MelSpectrogram mel = audio::MelSpectrogram::from_image(
      native, cfg.sample_rate, cfg.stft_params(), cfg.norm_floor_db);
  return audio::griffin_lim(mel, cfg.gl_iterations,
                            derive_seed(cfg.seed, 4242));
}

// ------------------------------------------------------------ figures

/// Side-by-side original/synthesized mel panels for two vowels, a strip of
/// synthesized geometries for the cardinal configurations, and the
/// recovered audio. Requires a trained model.
template <typename T>
void emit_figures(model::JointModel<T>& m, const train::Dataset& ds,
                  const train::RunConfig& cfg, const std::string& out_dir) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  synth::SynthConfig scfg = cfg.synth_config();
  audio::StftParams stft_p = cfg.stft_params();

  // cardinal-vowel geometry strip: original vs speech-to-geometry synthesis
  std::vector<ImageF> orig_geos, synth_geos;
  for (const auto& cv : cardinal_vowels()) {
    synth::TongueParams p{cv.pos, cv.diam, cfg.gen_f0.front()};
    ImageF geo = synth::render_geometry(p, cfg.model_h, cfg.model_w, 1, scfg);
    orig_geos.push_back(geo);

    synth::AreaFunction area = synth::tongue_to_area(p, scfg);
    AudioClip clip =
        synth::synthesize(area, p.f0, cfg.gen_duration_s, cfg.sample_rate, scfg);
    audio::MelSpectrogram mel =
        audio::mel_spectrogram(clip, stft_p, cfg.n_mels, cfg.norm_floor_db);
    ImageF mel_img =
        resize_bilinear(mel.to_image(), cfg.model_h, cfg.model_w);
    ImageF pred = predict_geo_image(m, mel_img);
    write_png(out_dir + "/geometry_synth_" + cv.label + ".png", pred);
    synth_geos.push_back(std::move(pred));
  }
  write_png(out_dir + "/geometry_strip_original.png", montage_row(orig_geos));
  write_png(out_dir + "/geometry_strip_synthesized.png", montage_row(synth_geos));

  // mel panels and recovered audio for /a/ and /u/
  for (const char* label : {"a", "u"}) {
    const CardinalVowel* cv = nullptr;
    for (const auto& c : cardinal_vowels())
      if (std::string(c.label) == label) cv = &c;
    synth::TongueParams p{cv->pos, cv->diam, cfg.gen_f0.front()};
    synth::AreaFunction area = synth::tongue_to_area(p, scfg);
    AudioClip clip =
        synth::synthesize(area, p.f0, cfg.gen_duration_s, cfg.sample_rate, scfg);
    audio::MelSpectrogram mel =
        audio::mel_spectrogram(clip, stft_p, cfg.n_mels, cfg.norm_floor_db);
    write_png(out_dir + "/mel_original_" + label + ".png", mel.to_image());

    ImageF geo = synth::render_geometry(p, cfg.model_h, cfg.model_w, 1, scfg);
    ImageF pred_mel = predict_mel_image(m, geo);
    ImageF pred_native =
        resize_bilinear(pred_mel, ds.mel_native_h, ds.mel_native_w);
    write_png(out_dir + "/mel_synth_" + label + ".png", pred_native);

    AudioClip rec = invert_mel_image<T>(pred_mel, ds.mel_native_h, ds.mel_native_w, cfg);
    write_wav(out_dir + "/recovered_" + label + ".wav", rec);
  }
}

// ------------------------------------------------------------ harness

/// Full test-split evaluation: forward-mapped audio scored by formant error,
/// inverse-mapped geometry scored by MAE, plus figures when an output
/// directory is given. Pure given checkpoint, dataset and config.
template <typename T>
EvalReport run_eval(model::JointModel<T>& m, const train::Dataset& ds,
                    const std::vector<int>& test_ids,
                    const train::RunConfig& cfg,
                    const std::optional<std::string>& out_dir = std::nullopt) {
  EvalReport report;
  report.config_fingerprint = hex64(cfg.fingerprint());
  if (test_ids.empty()) {
    std::cerr << "eval: empty evaluation set, no figures or metrics emitted\n";
    return report;
  }

  struct PerSample {
    ImageF pred_geo;
    AudioClip synth_audio;
  };
  std::vector<PerSample> work(test_ids.size());

  // model passes are cheap; Griffin-Lim dominates, so parallelize samples
  int64_t n = static_cast<int64_t>(test_ids.size());
#pragma omp parallel for schedule(static) num_threads(thread_count()) \
    if (thread_count() > 1)
  for (int64_t i = 0; i < n; ++i) {
    int id = test_ids[static_cast<size_t>(i)];
    ImageF pred_mel = predict_mel_image(m, ds.geo[static_cast<size_t>(id)]);
    work[static_cast<size_t>(i)].synth_audio = invert_mel_image<T>(pred_mel, ds.mel_native_h, ds.mel_native_w, cfg);
    work[static_cast<size_t>(i)].pred_geo =
        predict_geo_image(m, ds.mel[static_cast<size_t>(id)]);
  }

  std::vector<double> err_sum(3, 0.0);
  std::vector<const ImageF*> orig_imgs, pred_imgs;
  int used = 0;
  double cardinal_best[4];
  int cardinal_pick[4];
  for (int c = 0; c < 4; ++c) {
    cardinal_best[c] = 1e9;
    cardinal_pick[c] = -1;
  }

  for (size_t i = 0; i < test_ids.size(); ++i) {
    int id = test_ids[i];
    const train::SampleMeta& meta = ds.meta[static_cast<size_t>(id)];
    SampleRecord rec;
    rec.id = meta.id;
    AudioClip orig = read_wav(ds.root + "/" + meta.wav_path);
    try {
      rec.formants_orig = audio::estimate_formants(orig, 3);
      rec.formants_synth = audio::estimate_formants(work[i].synth_audio, 3);
      rec.formants_ok = true;
      for (int k = 0; k < 3; ++k)
        err_sum[static_cast<size_t>(k)] +=
            std::fabs(rec.formants_synth[static_cast<size_t>(k)] -
                      rec.formants_orig[static_cast<size_t>(k)]) /
            rec.formants_orig[static_cast<size_t>(k)] * 100.0;
      ++used;
    } catch (const std::exception&) {
      ++report.n_excluded;
    }
    rec.image_mae = image_mae({&ds.geo[static_cast<size_t>(id)]}, {&work[i].pred_geo});
    orig_imgs.push_back(&ds.geo[static_cast<size_t>(id)]);
    pred_imgs.push_back(&work[i].pred_geo);

    const auto& cards = cardinal_vowels();
    for (size_t c = 0; c < cards.size(); ++c) {
      double d = std::hypot(meta.tongue_position - cards[c].pos,
                            meta.tongue_diameter - cards[c].diam);
      if (d < cardinal_best[c]) {
        cardinal_best[c] = d;
        cardinal_pick[c] = static_cast<int>(i);
      }
    }
    report.per_sample.push_back(std::move(rec));
  }

  report.n_pairs = static_cast<int>(test_ids.size());
  report.image_mae = image_mae(orig_imgs, pred_imgs);
  report.formant_error_pct.assign(3, 0.0);
  if (used > 0)
    for (int k = 0; k < 3; ++k)
      report.formant_error_pct[static_cast<size_t>(k)] =
          err_sum[static_cast<size_t>(k)] / used;

  // same metric over the test items nearest the four vowel-like points
  std::vector<double> card_sum(3, 0.0);
  int card_used = 0;
  for (int c = 0; c < 4; ++c) {
    if (cardinal_pick[c] < 0) continue;
    const SampleRecord& rec = report.per_sample[static_cast<size_t>(cardinal_pick[c])];
    if (!rec.formants_ok) continue;
    for (int k = 0; k < 3; ++k)
      card_sum[static_cast<size_t>(k)] +=
          std::fabs(rec.formants_synth[static_cast<size_t>(k)] -
                    rec.formants_orig[static_cast<size_t>(k)]) /
          rec.formants_orig[static_cast<size_t>(k)] * 100.0;
    ++card_used;
  }
  report.formant_error_pct_cardinal.assign(3, 0.0);
  if (card_used > 0)
    for (int k = 0; k < 3; ++k)
      report.formant_error_pct_cardinal[static_cast<size_t>(k)] =
          card_sum[static_cast<size_t>(k)] / card_used;

  if (out_dir) {
    emit_figures(m, ds, cfg, *out_dir);
    std::ofstream f(*out_dir + "/eval_report.json");
    if (!f) throw IoError("cannot write eval report in " + *out_dir);
    f << report.to_json().dump(2) << "\n";
  }
  return report;
}

}  // namespace tractflow::eval
