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

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "tractflow/dataset.hpp"
#include "tractflow/eval.hpp"

using namespace tractflow;
using namespace tractflow::eval;

namespace {

AudioClip resonator_clip(double freq, double bw, double pulse_hz, int sr = 22020) {
  double r = std::exp(-kPi * bw / sr);
  double theta = kTwoPi * freq / sr;
  double a1 = 2 * r * std::cos(theta), a2 = -r * r;
  AudioClip c;
  c.sample_rate = sr;
  c.samples.assign(static_cast<size_t>(sr / 2), 0.f);
  double y1 = 0, y2 = 0;
  int period = static_cast<int>(sr / pulse_hz);
  for (size_t i = 0; i < c.samples.size(); ++i) {
    double x = (i % static_cast<size_t>(period) == 0) ? 1.0 : 0.0;
    double y = x + a1 * y1 + a2 * y2;
    y2 = y1;
    y1 = y;
    c.samples[i] = static_cast<float>(0.1 * y);
  }
  return c;
}

}  // namespace

TEST_CASE("identical clips give zero formant error") {
  AudioClip c = resonator_clip(700, 80, 100);
  FormantErrorResult r = formant_error({&c}, {&c}, 1);
  CHECK(r.n_used == 1);
  CHECK(r.n_excluded == 0);
  CHECK(r.mean_pct[0] == doctest::Approx(0.0));
}

TEST_CASE("known frequency shift gives the matching percent error") {
  // 60 Hz pulses put both resonances exactly on source harmonics
  AudioClip a = resonator_clip(600, 60, 60);
  AudioClip b = resonator_clip(660, 60, 60);
  FormantErrorResult r = formant_error({&a}, {&b}, 1);
  REQUIRE(r.n_used == 1);
  // each clip's estimate carries < 0.7% bias, so the 10% shift is recovered
  // to within a fraction of a percentage point
  CHECK(std::fabs(r.mean_pct[0] - 10.0) < 0.8);
}

TEST_CASE("failed estimation is excluded and counted") {
  AudioClip a = resonator_clip(700, 80, 100);
  AudioClip silent;
  silent.sample_rate = 22020;
  silent.samples.assign(11010, 0.f);
  FormantErrorResult r = formant_error({&a, &a}, {&silent, &a}, 1);
  CHECK(r.n_used == 1);
  CHECK(r.n_excluded == 1);
  CHECK(r.mean_pct[0] == doctest::Approx(0.0));
}

TEST_CASE("image mae identities and symmetry") {
  ImageF zeros(8, 8, 1), ones(8, 8, 1);
  for (auto& p : ones.pixels) p = 1.f;
  CHECK(image_mae({&zeros}, {&zeros}) == doctest::Approx(0.0));
  CHECK(image_mae({&zeros}, {&ones}) == doctest::Approx(1.0));

  Rng rng(3);
  ImageF a(6, 5, 1), b(6, 5, 1);
  for (auto& p : a.pixels) p = static_cast<float>(rng.uniform());
  for (auto& p : b.pixels) p = static_cast<float>(rng.uniform());
  CHECK(image_mae({&a}, {&b}) == doctest::Approx(image_mae({&b}, {&a})));

  ImageF other(5, 6, 1);
  CHECK_THROWS_AS(image_mae({&a}, {&other}), ShapeError);
}

TEST_CASE("empty eval set produces an empty report and no figures") {
  train::RunConfig cfg;
  cfg.model_h = 16;
  cfg.model_w = 16;
  cfg.flow_width = 32;
  model::JointModel<float> m(cfg.geometry_config(), cfg.spectrogram_config(),
                             cfg.partition(), 5, 2, 2, 32);
  train::Dataset ds;
  EvalReport r = run_eval(m, ds, {}, cfg);
  CHECK(r.n_pairs == 0);
  CHECK(r.per_sample.empty());
}

TEST_CASE("eval report json carries both desk and reference numbers") {
  EvalReport r;
  r.formant_error_pct = {21.0, 28.0, 9.0};
  r.formant_error_pct_cardinal = {20.0, 26.0, 8.0};
  r.image_mae = 0.06;
  r.n_pairs = 10;
  r.config_fingerprint = "deadbeef";
  auto j = r.to_json();
  CHECK(j.at("image_mae").get<double>() == 0.06);
  CHECK(j.at("reference_full_scale").at("image_mae").get<double>() == 0.0397);
  CHECK(j.at("reference_full_scale").at("formant_error_pct")[0].get<double>() ==
        18.57);
  CHECK(j.at("formant_error_pct")[1].get<double>() == 28.0);
}

TEST_CASE("repeated evaluation of an untrained model is byte-identical") {
  // small end-to-end eval on a fresh model: large errors are fine, the
  // run must simply complete and be reproducible
  train::RunConfig cfg;
  cfg.model_h = 16;
  cfg.model_w = 16;
  cfg.flow_width = 32;
  cfg.gl_iterations = 8;
  cfg.gen_n_pos = 2;
  cfg.gen_n_diam = 2;
  cfg.gen_duration_s = 0.15;

  auto dir = std::filesystem::temp_directory_path() / "tractflow_eval_ds";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  synth::SweepGrid grid;
  grid.n_pos = 2;
  grid.n_diam = 2;
  grid.duration_s = cfg.gen_duration_s;
  grid.img_h = 16;
  grid.img_w = 16;
  synth::sweep_dataset(grid, dir.string(), 1);
  train::Dataset ds = train::load_dataset(dir.string(), cfg);

  model::JointModel<float> m(cfg.geometry_config(), cfg.spectrogram_config(),
                             cfg.partition(), 6, 2, 2, 32);
  // data init so the flows are usable in eval mode
  {
    std::vector<const ImageF*> g, s;
    for (size_t i = 0; i < ds.size(); ++i) {
      g.push_back(&ds.geo[i]);
      s.push_back(&ds.mel[i]);
    }
    auto xg = Var<float>::leaf(model::images_to_batch<float>(g), false);
    auto xs = Var<float>::leaf(model::images_to_batch<float>(s), false);
    train::total_loss(m, xg, xs, cfg, true);
  }

  std::vector<int> test_ids{0, 1, 2, 3};
  EvalReport r1 = run_eval(m, ds, test_ids, cfg);
  EvalReport r2 = run_eval(m, ds, test_ids, cfg);
  CHECK(r1.to_json().dump() == r2.to_json().dump());
  CHECK(r1.n_pairs == 4);
  CHECK(r1.image_mae >= 0.0);
  CHECK(r1.image_mae <= 1.0);
  std::filesystem::remove_all(dir);
}
