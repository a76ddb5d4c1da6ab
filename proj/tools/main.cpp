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

// Command-line entry point: gen-data, train, map and eval subcommands over
// the articulatory-acoustic joint model. Exit codes: 0 success, 2 bad
// configuration or input, 3 I/O failure, 4 numerical abort (NaN loss),
// 5 checkpoint/config mismatch.

#include <CLI11.hpp>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include "tractflow/dataset.hpp"
#include "tractflow/eval.hpp"
#include "tractflow/train.hpp"

namespace fs = std::filesystem;
using namespace tractflow;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitIo = 3;
constexpr int kExitNumeric = 4;
constexpr int kExitMismatch = 5;

struct CommonOpts {
  std::string config_path;
  std::vector<std::string> overrides;
  std::optional<uint64_t> seed;
  bool single_thread = false;
};

train::RunConfig resolve_config(const CommonOpts& opts) {
  train::RunConfig cfg;
  if (!opts.config_path.empty())
    cfg = train::RunConfig::from_file(opts.config_path);
  for (const auto& kv : opts.overrides) {
    size_t eq = kv.find('=');
    if (eq == std::string::npos)
      throw ConfigError("--set expects key=value, got '" + kv + "'");
    cfg.apply_kv(kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (opts.seed) cfg.seed = *opts.seed;
  cfg.validate();
  if (opts.single_thread)
    set_thread_count(1);
  else if (cfg.threads > 0)
    set_thread_count(cfg.threads);
  return cfg;
}

// Self-verifying snapshot: the fingerprint comment does not alter the hash
// of the key=value body.
void write_snapshot(const std::string& dir, const train::RunConfig& cfg) {
  std::ofstream f(dir + "/config_resolved.txt");
  if (!f) throw IoError("cannot write config snapshot in " + dir);
  f << "# fingerprint: " << hex64(cfg.fingerprint()) << "\n" << cfg.to_text();
  if (!f) throw IoError("short write: " + dir + "/config_resolved.txt");
}

synth::SweepGrid grid_from_config(const train::RunConfig& cfg) {
  synth::SweepGrid g;
  g.n_pos = cfg.gen_n_pos;
  g.n_diam = cfg.gen_n_diam;
  g.f0_list = cfg.gen_f0;
  g.pos_min = cfg.gen_pos_min;
  g.pos_max = cfg.gen_pos_max;
  g.diam_min = cfg.gen_diam_min;
  g.diam_max = cfg.gen_diam_max;
  g.duration_s = cfg.gen_duration_s;
  g.img_h = cfg.gen_img_h;
  g.img_w = cfg.gen_img_w;
  g.img_c = cfg.gen_img_c;
  g.sample_rate = cfg.sample_rate;
  return g;
}

ImageF match_channels(const ImageF& img, int channels) {
  if (img.channels == channels) return img;
  ImageF out(img.height, img.width, channels);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) {
      float mean = 0.f;
      for (int c = 0; c < img.channels; ++c) mean += img.at(c, y, x);
      mean /= static_cast<float>(img.channels);
      for (int c = 0; c < channels; ++c)
        out.at(c, y, x) = img.channels == 1 ? img.at(0, y, x) : mean;
    }
  return out;
}

int cmd_gen_data(const CommonOpts& opts, const std::string& out_dir) {
  train::RunConfig cfg = resolve_config(opts);
  fs::path parent = fs::path(out_dir).parent_path();
  if (!parent.empty() && !fs::exists(parent))
    throw IoError("parent of output directory does not exist: " + out_dir);
  auto t0 = std::chrono::steady_clock::now();
  synth::ManifestInfo info = synth::sweep_dataset(
      grid_from_config(cfg), out_dir, cfg.seed, cfg.synth_config());
  write_snapshot(out_dir, cfg);
  double secs = std::chrono::duration<double>(
                    std::chrono::steady_clock::now() - t0).count();
  std::cout << "manifest: " << info.path << "\n"
            << "samples: " << info.count << "\n"
            << "config_fingerprint: " << hex64(cfg.fingerprint()) << "\n";
  std::cerr << "gen-data finished in " << secs << " s\n";
  return 0;
}

int cmd_train(const CommonOpts& opts, const std::string& data_dir,
              const std::string& out_dir, bool resume) {
  train::RunConfig cfg = resolve_config(opts);
  fs::create_directories(out_dir);
  write_snapshot(out_dir, cfg);

  std::cerr << "loading dataset from " << data_dir << "\n";
  train::Dataset ds = train::load_dataset(data_dir, cfg);
  train::Split split = train::split_dataset(
      ds.size(), cfg.split_train, cfg.split_dev, cfg.split_test, cfg.seed);
  std::cerr << "dataset: " << ds.size() << " pairs (train " << split.train.size()
            << ", dev " << split.dev.size() << ", test " << split.test.size()
            << ")\n";

  train::Trainer<float> trainer(cfg);
  std::string metrics_path = out_dir + "/metrics.jsonl";
  if (resume && fs::exists(out_dir + "/last.ckpt/manifest.json")) {
    trainer.restore(out_dir + "/last.ckpt");
    std::cerr << "resumed from epoch " << trainer.epoch() << "\n";
  } else {
    std::ofstream clear(metrics_path, std::ios::trunc);  // fresh run
  }

  auto t0 = std::chrono::steady_clock::now();
  while (trainer.epoch() < cfg.epochs) {
    train::EpochMetrics m = trainer.run_epoch(ds, split);
    {
      std::ofstream mf(metrics_path, std::ios::app);
      if (!mf) throw IoError("cannot append metrics: " + metrics_path);
      mf << m.json.dump() << "\n";
    }
    trainer.save(out_dir + "/last.ckpt");
    if (m.json.at("new_best").get<bool>())
      trainer.save(out_dir + "/best.ckpt");
    if (cfg.checkpoint_every > 0 &&
        trainer.epoch() % cfg.checkpoint_every == 0) {
      char name[32];
      std::snprintf(name, sizeof name, "/epoch_%03d.ckpt", trainer.epoch());
      trainer.save(out_dir + name);
    }
    double secs = std::chrono::duration<double>(
                      std::chrono::steady_clock::now() - t0).count();
    std::cout << "epoch " << trainer.epoch() << "/" << cfg.epochs
              << " train_total " << m.json.at("train_total").get<double>()
              << " dev_total " << m.json.at("dev_total").get<double>()
              << (m.json.at("new_best").get<bool>() ? " *best*" : "")
              << std::endl;
    std::cerr << "elapsed " << secs << " s\n";
  }
  std::cout << "best epoch " << trainer.best_epoch() << " dev_total "
            << trainer.best_dev() << "\n"
            << "checkpoints: " << out_dir << "/best.ckpt, " << out_dir
            << "/last.ckpt\n";
  return 0;
}

int cmd_map(const std::string& ckpt_dir, const std::string& from_geometry,
            const std::string& from_audio, const std::string& out_dir,
            bool allow_resize, bool single_thread) {
  if (single_thread) set_thread_count(1);
  CheckpointReader reader(ckpt_dir);
  if (!reader.config.contains("run_config_text"))
    throw MismatchError("checkpoint lacks an embedded run config");
  train::RunConfig cfg = train::RunConfig::from_text(
      reader.config.at("run_config_text").get<std::string>());
  model::JointModel<float> m = model::JointModel<float>::load(reader);
  fs::create_directories(out_dir);
  write_snapshot(out_dir, cfg);

  auto [mel_h, mel_w] = eval::native_mel_shape(cfg);

  if (!from_geometry.empty()) {
    ImageF img;
    try {
      img = read_png(from_geometry);
    } catch (const IoError& e) {
      throw ConfigError(std::string("bad geometry input: ") + e.what());
    }
    if (img.height != cfg.model_h || img.width != cfg.model_w) {
      if (!allow_resize)
        throw MismatchError(
            "input is " + std::to_string(img.height) + "x" +
            std::to_string(img.width) + " but the checkpoint was trained at " +
            std::to_string(cfg.model_h) + "x" + std::to_string(cfg.model_w) +
            " (pass --resize to adapt)");
      img = resize_bilinear(img, cfg.model_h, cfg.model_w);
    }
    img = match_channels(img, cfg.model_c);

    auto x = Var<float>::leaf(model::images_to_batch<float>({&img}), false);
    Var<float> z = m.encode_geometry(x, false);
    Var<float> sh = m.shared_of(z);
    Var<float> mapped = m.map_g2s(sh);
    double norm_in = 0, norm_out = 0;
    for (int64_t i = 0; i < sh.numel(); ++i)
      norm_in += sh.value()[i] * sh.value()[i];
    for (int64_t i = 0; i < mapped.numel(); ++i)
      norm_out += mapped.value()[i] * mapped.value()[i];

    ImageF pred_mel = eval::predict_mel_image(m, img);
    ImageF native = resize_bilinear(pred_mel, mel_h, mel_w);
    audio::MelSpectrogram mel = audio::MelSpectrogram::from_image(
        native, cfg.sample_rate, cfg.stft_params(), cfg.norm_floor_db);
    audio::save_mel_png(mel, out_dir + "/predicted_mel.png");
    AudioClip rec = eval::invert_mel_image<float>(pred_mel, mel_h, mel_w, cfg);
    write_wav(out_dir + "/predicted_audio.wav", rec);
    std::cout << "geometry -> speech\n"
              << "shared_norm_in: " << std::sqrt(norm_in) << "\n"
              << "shared_norm_mapped: " << std::sqrt(norm_out) << "\n"
              << "outputs: predicted_mel.png, predicted_audio.wav in "
              << out_dir << "\n";
  } else {
    AudioClip clip;
    try {
      clip = read_wav(from_audio);
    } catch (const IoError& e) {
      throw ConfigError(std::string("bad audio input: ") + e.what());
    }
    if (clip.sample_rate != cfg.sample_rate) {
      clip.samples = resample(clip.samples, clip.sample_rate, cfg.sample_rate);
      clip.sample_rate = cfg.sample_rate;
    }
    audio::MelSpectrogram mel = audio::mel_spectrogram(
        clip, cfg.stft_params(), cfg.n_mels, cfg.norm_floor_db);
    ImageF mel_img = resize_bilinear(mel.to_image(), cfg.model_h, cfg.model_w);

    auto x = Var<float>::leaf(model::images_to_batch<float>({&mel_img}), false);
    Var<float> z = m.encode_spectrogram(x, false);
    Var<float> sh = m.shared_of(z);
    Var<float> mapped = m.map_s2g(sh);
    double norm_in = 0, norm_out = 0;
    for (int64_t i = 0; i < sh.numel(); ++i)
      norm_in += sh.value()[i] * sh.value()[i];
    for (int64_t i = 0; i < mapped.numel(); ++i)
      norm_out += mapped.value()[i] * mapped.value()[i];

    ImageF pred_geo = eval::predict_geo_image(m, mel_img);
    write_png(out_dir + "/predicted_geometry.png", pred_geo);
    std::cout << "speech -> geometry\n"
              << "shared_norm_in: " << std::sqrt(norm_in) << "\n"
              << "shared_norm_mapped: " << std::sqrt(norm_out) << "\n"
              << "outputs: predicted_geometry.png in " << out_dir << "\n";
  }
  return 0;
}

int cmd_eval(const CommonOpts& opts, const std::string& ckpt_dir,
             const std::string& data_dir, const std::string& out_dir) {
  CheckpointReader reader(ckpt_dir);
  if (!reader.config.contains("run_config_text"))
    throw MismatchError("checkpoint lacks an embedded run config");
  train::RunConfig cfg = train::RunConfig::from_text(
      reader.config.at("run_config_text").get<std::string>());
  for (const auto& kv : opts.overrides) {
    size_t eq = kv.find('=');
    if (eq == std::string::npos)
      throw ConfigError("--set expects key=value, got '" + kv + "'");
    cfg.apply_kv(kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (opts.single_thread)
    set_thread_count(1);
  else if (cfg.threads > 0)
    set_thread_count(cfg.threads);

  model::JointModel<float> m = model::JointModel<float>::load(reader);
  train::Dataset ds = train::load_dataset(data_dir, cfg);
  train::Split split = train::split_dataset(
      ds.size(), cfg.split_train, cfg.split_dev, cfg.split_test, cfg.seed);
  if (split.test.empty())
    throw ConfigError("dataset has no test split under the configured fractions");

  fs::create_directories(out_dir);
  write_snapshot(out_dir, cfg);
  eval::EvalReport report = eval::run_eval(m, ds, split.test, cfg, out_dir);

  std::cout << "pairs: " << report.n_pairs
            << " (formant-excluded: " << report.n_excluded << ")\n";
  std::cout << "formant_error_pct:";
  for (double v : report.formant_error_pct) std::cout << " " << v;
  std::cout << "  [full-scale reference:";
  for (double v : report.reference.formant_error_pct) std::cout << " " << v;
  std::cout << "]\n";
  std::cout << "image_mae: " << report.image_mae
            << "  [full-scale reference: " << report.reference.image_mae
            << "]\n";
  std::cout << "report: " << out_dir << "/eval_report.json\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"joint articulatory-acoustic representation toolkit"};
  app.require_subcommand(1);

  CommonOpts gen_opts, train_opts, eval_opts;
  std::string gen_out, train_data, train_out, map_ckpt, map_geo, map_wav,
      map_out, eval_ckpt, eval_data, eval_out;
  bool train_resume = false, map_resize = false, map_single = false;

  auto add_common = [](CLI::App* cmd, CommonOpts& o) {
    cmd->add_option("--config", o.config_path, "key=value config file");
    cmd->add_option("--set", o.overrides, "override a config key (key=value)");
    cmd->add_option("--seed", o.seed, "master seed");
    cmd->add_flag("--single-thread", o.single_thread,
                  "force single-threaded deterministic mode");
  };

  CLI::App* gen = app.add_subcommand("gen-data", "generate a paired dataset");
  add_common(gen, gen_opts);
  gen->add_option("--out", gen_out, "output directory")->required();

  CLI::App* tr = app.add_subcommand("train", "train the joint model");
  add_common(tr, train_opts);
  tr->add_option("--data", train_data, "dataset directory")->required();
  tr->add_option("--out", train_out, "run directory")->required();
  tr->add_flag("--resume", train_resume, "resume from last.ckpt if present");

  CLI::App* mp = app.add_subcommand("map", "cross-domain mapping");
  mp->add_option("--checkpoint", map_ckpt, "checkpoint directory")->required();
  mp->add_option("--from-geometry", map_geo, "input geometry PNG");
  mp->add_option("--from-audio", map_wav, "input WAV");
  mp->add_option("--out", map_out, "output directory")->required();
  mp->add_flag("--resize", map_resize, "resize mismatched inputs");
  mp->add_flag("--single-thread", map_single, "single-threaded mode");

  CLI::App* ev = app.add_subcommand("eval", "evaluate a trained checkpoint");
  add_common(ev, eval_opts);
  ev->add_option("--checkpoint", eval_ckpt, "checkpoint directory")->required();
  ev->add_option("--data", eval_data, "dataset directory")->required();
  ev->add_option("--out", eval_out, "report directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) return cmd_gen_data(gen_opts, gen_out);
    if (tr->parsed())
      return cmd_train(train_opts, train_data, train_out, train_resume);
    if (mp->parsed()) {
      if (map_geo.empty() == map_wav.empty())
        throw ConfigError(
            "map needs exactly one of --from-geometry / --from-audio");
      return cmd_map(map_ckpt, map_geo, map_wav, map_out, map_resize,
                     map_single);
    }
    if (ev->parsed()) return cmd_eval(eval_opts, eval_ckpt, eval_data, eval_out);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const MismatchError& e) {
    std::cerr << "checkpoint mismatch: " << e.what() << "\n";
    return kExitMismatch;
  } catch (const NumericError& e) {
    std::cerr << "numerical abort: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const ShapeError& e) {
    std::cerr << "shape error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const IoError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return kExitIo;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
