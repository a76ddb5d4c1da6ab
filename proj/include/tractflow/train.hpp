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
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "tractflow/audio_features.hpp"
#include "tractflow/model.hpp"
#include "tractflow/synth.hpp"

namespace tractflow::train {

// ------------------------------------------------------------ config

/// Every knob of a run, loadable from a flat key=value file.
struct RunConfig {
  // dataset generation
  int gen_n_pos = 50, gen_n_diam = 40;
  double gen_pos_min = 0.25, gen_pos_max = 0.95;
  double gen_diam_min = 0.3, gen_diam_max = 1.0;
  std::vector<double> gen_f0{140.0};
  double gen_duration_s = 0.5;
  int gen_img_h = 32, gen_img_w = 32, gen_img_c = 1;
  int sample_rate = 22020;
  // audio features
  int n_fft = 1024, hop = 256, n_mels = 64;
  double norm_floor_db = -80.0;
  int gl_iterations = 60;
  // predicted-mel values below this are treated as silence before inversion;
  // decoder background haze otherwise turns into spurious resonances
  double mel_gate = 0.25;
  // model
  int model_h = 32, model_w = 32, model_c = 1;
  int latent_g = 64, latent_s = 64;
  int d_shared = 32, d_g_only = 32, d_s_only = 32;
  int shared_depth = 8, prior_depth = 4, flow_width = 128;
  bool attn_reduce_proj = false;
  // training
  int batch_size = 10;
  int epochs = 40;
  double lr = 1e-4;
  double split_train = 0.8, split_dev = 0.1, split_test = 0.1;
  uint64_t seed = 1234;
  int checkpoint_every = 0;  // extra per-epoch checkpoints; 0 = best/last only
  // loss weights
  double w_rec_g = 1.0, w_rec_s = 1.0, w_map = 1.0, w_prior = 0.1,
      w_entropy = 0.0;
  double elbo_sigma = 0.1;
  // runtime
  int threads = 0;  // 0 keeps the library default

  void validate() const {
    if (gen_n_pos < 1 || gen_n_diam < 1 || gen_f0.empty())
      throw ConfigError("generation grid must contain at least one point");
    if (std::fabs(split_train + split_dev + split_test - 1.0) > 1e-9)
      throw ConfigError("split fractions must sum to 1");
    if (w_rec_g < 0 || w_rec_s < 0 || w_map < 0 || w_prior < 0 || w_entropy < 0)
      throw ConfigError("loss weights must be non-negative");
    if (batch_size < 2)
      throw ConfigError("batch size must be >= 2 for batch norm");
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
  }

  model::AutoencoderConfig geometry_config() const {
    model::AutoencoderConfig c;
    c.in_h = model_h;
    c.in_w = model_w;
    c.in_c = model_c;
    c.latent_dim = latent_g;
    c.attn_reduce_proj = attn_reduce_proj;
    return c;
  }

  model::AutoencoderConfig spectrogram_config() const {
    model::AutoencoderConfig c = geometry_config();
    c.in_c = 1;  // mel images are single channel
    c.latent_dim = latent_s;
    return c;
  }

  model::PartitionSpec partition() const {
    return {d_shared, d_g_only, d_s_only};
  }

  synth::SynthConfig synth_config() const {
    synth::SynthConfig c;
    c.sample_rate = sample_rate;
    return c;
  }

  audio::StftParams stft_params() const { return {n_fft, hop}; }

  /// Canonical snapshot: fixed key order, one key=value per line.
  std::string to_text() const;
  uint64_t fingerprint() const { return fnv1a64(to_text()); }

  static RunConfig from_file(const std::string& path);
  static RunConfig from_text(const std::string& text);
  void apply_kv(const std::string& key, const std::string& value);
};

namespace detail {

inline std::string fmt_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace detail

inline std::string RunConfig::to_text() const {
  std::ostringstream os;
  auto put = [&](const char* k, const std::string& v) { os << k << " = " << v << "\n"; };
  put("attn_reduce_proj", attn_reduce_proj ? "true" : "false");
  put("batch_size", std::to_string(batch_size));
  put("checkpoint_every", std::to_string(checkpoint_every));
  put("d_g_only", std::to_string(d_g_only));
  put("d_s_only", std::to_string(d_s_only));
  put("d_shared", std::to_string(d_shared));
  put("elbo_sigma", detail::fmt_double(elbo_sigma));
  put("epochs", std::to_string(epochs));
  {
    std::ostringstream fs;
    for (size_t i = 0; i < gen_f0.size(); ++i)
      fs << (i ? "," : "") << detail::fmt_double(gen_f0[i]);
    put("gen_f0", fs.str());
  }
  put("gen_diam_max", detail::fmt_double(gen_diam_max));
  put("gen_diam_min", detail::fmt_double(gen_diam_min));
  put("gen_duration_s", detail::fmt_double(gen_duration_s));
  put("gen_img_c", std::to_string(gen_img_c));
  put("gen_img_h", std::to_string(gen_img_h));
  put("gen_img_w", std::to_string(gen_img_w));
  put("gen_n_diam", std::to_string(gen_n_diam));
  put("gen_n_pos", std::to_string(gen_n_pos));
  put("gen_pos_max", detail::fmt_double(gen_pos_max));
  put("gen_pos_min", detail::fmt_double(gen_pos_min));
  put("gl_iterations", std::to_string(gl_iterations));
  put("hop", std::to_string(hop));
  put("mel_gate", detail::fmt_double(mel_gate));
  put("latent_g", std::to_string(latent_g));
  put("latent_s", std::to_string(latent_s));
  put("lr", detail::fmt_double(lr));
  put("model_c", std::to_string(model_c));
  put("model_h", std::to_string(model_h));
  put("model_w", std::to_string(model_w));
  put("n_fft", std::to_string(n_fft));
  put("n_mels", std::to_string(n_mels));
  put("norm_floor_db", detail::fmt_double(norm_floor_db));
  put("prior_depth", std::to_string(prior_depth));
  put("sample_rate", std::to_string(sample_rate));
  put("seed", std::to_string(seed));
  put("shared_depth", std::to_string(shared_depth));
  put("split_dev", detail::fmt_double(split_dev));
  put("split_test", detail::fmt_double(split_test));
  put("split_train", detail::fmt_double(split_train));
  put("threads", std::to_string(threads));
  put("w_entropy", detail::fmt_double(w_entropy));
  put("w_map", detail::fmt_double(w_map));
  put("w_prior", detail::fmt_double(w_prior));
  put("w_rec_g", detail::fmt_double(w_rec_g));
  put("w_rec_s", detail::fmt_double(w_rec_s));
  put("flow_width", std::to_string(flow_width));
  return os.str();
}

inline void RunConfig::apply_kv(const std::string& key, const std::string& value) {
  auto as_int = [&] { return std::stoi(value); };
  auto as_u64 = [&] { return static_cast<uint64_t>(std::stoull(value)); };
  auto as_double = [&] { return std::stod(value); };
  auto as_bool = [&] {
    if (value == "true" || value == "1") return true;
    if (value == "false" || value == "0") return false;
    throw ConfigError("boolean key " + key + " has value '" + value + "'");
  };
  if (key == "gen_n_pos") gen_n_pos = as_int();
  else if (key == "gen_n_diam") gen_n_diam = as_int();
  else if (key == "gen_pos_min") gen_pos_min = as_double();
  else if (key == "gen_pos_max") gen_pos_max = as_double();
  else if (key == "gen_diam_min") gen_diam_min = as_double();
  else if (key == "gen_diam_max") gen_diam_max = as_double();
  else if (key == "gen_f0") {
    gen_f0.clear();
    std::stringstream ss(value);
    std::string tok;
    while (std::getline(ss, tok, ',')) gen_f0.push_back(std::stod(tok));
  } else if (key == "gen_duration_s") gen_duration_s = as_double();
  else if (key == "gen_img_h") gen_img_h = as_int();
  else if (key == "gen_img_w") gen_img_w = as_int();
  else if (key == "gen_img_c") gen_img_c = as_int();
  else if (key == "sample_rate") sample_rate = as_int();
  else if (key == "n_fft") n_fft = as_int();
  else if (key == "hop") hop = as_int();
  else if (key == "n_mels") n_mels = as_int();
  else if (key == "norm_floor_db") norm_floor_db = as_double();
  else if (key == "gl_iterations") gl_iterations = as_int();
  else if (key == "mel_gate") mel_gate = as_double();
  else if (key == "model_h") model_h = as_int();
  else if (key == "model_w") model_w = as_int();
  else if (key == "model_c") model_c = as_int();
  else if (key == "latent_g") latent_g = as_int();
  else if (key == "latent_s") latent_s = as_int();
  else if (key == "d_shared") d_shared = as_int();
  else if (key == "d_g_only") d_g_only = as_int();
  else if (key == "d_s_only") d_s_only = as_int();
  else if (key == "shared_depth") shared_depth = as_int();
  else if (key == "prior_depth") prior_depth = as_int();
  else if (key == "flow_width") flow_width = as_int();
  else if (key == "attn_reduce_proj") attn_reduce_proj = as_bool();
  else if (key == "batch_size") batch_size = as_int();
  else if (key == "epochs") epochs = as_int();
  else if (key == "lr") lr = as_double();
  else if (key == "split_train") split_train = as_double();
  else if (key == "split_dev") split_dev = as_double();
  else if (key == "split_test") split_test = as_double();
  else if (key == "seed") seed = as_u64();
  else if (key == "checkpoint_every") checkpoint_every = as_int();
  else if (key == "w_rec_g") w_rec_g = as_double();
  else if (key == "w_rec_s") w_rec_s = as_double();
  else if (key == "w_map") w_map = as_double();
  else if (key == "w_prior") w_prior = as_double();
  else if (key == "w_entropy") w_entropy = as_double();
  else if (key == "elbo_sigma") elbo_sigma = as_double();
  else if (key == "threads") threads = as_int();
  else throw ConfigError("unknown config key: " + key);
}

inline RunConfig RunConfig::from_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open config file: " + path);
  std::string text((std::istreambuf_iterator<char>(f)),
                   std::istreambuf_iterator<char>());
  try {
    return from_text(text);
  } catch (const ConfigError& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

inline RunConfig RunConfig::from_text(const std::string& text) {
  std::istringstream f(text);
  RunConfig cfg;
  std::string line;
  int lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    auto notspace = [](unsigned char c) { return !std::isspace(c); };
    line.erase(line.begin(), std::find_if(line.begin(), line.end(), notspace));
    line.erase(std::find_if(line.rbegin(), line.rend(), notspace).base(), line.end());
    if (line.empty()) continue;
    size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("line " + std::to_string(lineno) +
                        ": expected key = value");
    std::string key = line.substr(0, eq);
    std::string value = line.substr(eq + 1);
    key.erase(std::find_if(key.rbegin(), key.rend(), notspace).base(), key.end());
    value.erase(value.begin(), std::find_if(value.begin(), value.end(), notspace));
    cfg.apply_kv(key, value);
  }
  return cfg;
}

// ------------------------------------------------------------ dataset

struct SampleMeta {
  std::string id;
  double tongue_position = 0, tongue_diameter = 0, f0 = 0;
  std::string wav_path, img_path;
};

/// Paired training views: geometry image and mel image, both on the model
/// grid, plus the manifest rows for traceability.
struct Dataset {
  std::vector<SampleMeta> meta;
  std::vector<ImageF> geo;      // model grid
  std::vector<ImageF> mel;      // model grid
  int mel_native_h = 0, mel_native_w = 0;
  std::string root;

  size_t size() const { return meta.size(); }
};

inline std::vector<SampleMeta> read_manifest(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open manifest: " + path);
  std::vector<SampleMeta> rows;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line);
    SampleMeta s;
    s.id = j.at("id").get<std::string>();
    s.tongue_position = j.at("tongue_position").get<double>();
    s.tongue_diameter = j.at("tongue_diameter").get<double>();
    s.f0 = j.at("f0").get<double>();
    s.wav_path = j.at("wav_path").get<std::string>();
    s.img_path = j.at("img_path").get<std::string>();
    rows.push_back(std::move(s));
  }
  if (rows.empty()) throw ConfigError("manifest is empty: " + path);
  return rows;
}

inline Dataset load_dataset(const std::string& data_dir, const RunConfig& cfg) {
  Dataset ds;
  ds.root = data_dir;
  ds.meta = read_manifest(data_dir + "/manifest.jsonl");
  ds.geo.reserve(ds.meta.size());
  ds.mel.reserve(ds.meta.size());
  audio::StftParams stft_p = cfg.stft_params();
  for (const auto& s : ds.meta) {
    ImageF g = read_png(data_dir + "/" + s.img_path);
    if (g.height != cfg.model_h || g.width != cfg.model_w)
      g = resize_bilinear(g, cfg.model_h, cfg.model_w);
    ds.geo.push_back(std::move(g));

    AudioClip clip = read_wav(data_dir + "/" + s.wav_path);
    audio::MelSpectrogram m =
        audio::mel_spectrogram(clip, stft_p, cfg.n_mels, cfg.norm_floor_db);
    ds.mel_native_h = m.n_mels;
    ds.mel_native_w = m.n_frames;
    ds.mel.push_back(resize_bilinear(m.to_image(), cfg.model_h, cfg.model_w));
  }
  return ds;
}

/// Deterministic shuffled split; sizes use the floor rule with the
/// remainder assigned to train.
struct Split {
  std::vector<int> train, dev, test;
};

inline Split split_dataset(size_t n, double f_train, double f_dev,
                           double f_test, uint64_t seed) {
  if (n == 0) throw ConfigError("cannot split an empty dataset");
  if (std::fabs(f_train + f_dev + f_test - 1.0) > 1e-9)
    throw ConfigError("split fractions must sum to 1");
  std::vector<int> ids(n);
  for (size_t i = 0; i < n; ++i) ids[i] = static_cast<int>(i);
  Rng rng(derive_seed(seed, 77));
  rng.shuffle(ids);
  size_t n_dev = static_cast<size_t>(std::floor(f_dev * static_cast<double>(n)));
  size_t n_test = static_cast<size_t>(std::floor(f_test * static_cast<double>(n)));
  size_t n_train = n - n_dev - n_test;
  Split sp;
  sp.train.assign(ids.begin(), ids.begin() + static_cast<int64_t>(n_train));
  sp.dev.assign(ids.begin() + static_cast<int64_t>(n_train),
                ids.begin() + static_cast<int64_t>(n_train + n_dev));
  sp.test.assign(ids.begin() + static_cast<int64_t>(n_train + n_dev), ids.end());
  return sp;
}

// ------------------------------------------------------------ losses

/// Scalar views of every component plus the differentiable total.
template <typename T>
struct LossBreakdown {
  double rec_g = 0, rec_s = 0, map_g2s = 0, map_s2g = 0;
  double nll_g = 0, nll_s = 0, nll_shared = 0;
  Var<T> total;

  double weighted_total(const RunConfig& c) const {
    return c.w_rec_g * rec_g + c.w_rec_s * rec_s +
           c.w_map * (map_g2s + map_s2g) +
           c.w_prior * (nll_g + nll_s + nll_shared);
  }

  const char* first_nan() const {
    auto bad = [](double v) { return std::isnan(v) || std::isinf(v); };
    if (bad(rec_g)) return "rec_g";
    if (bad(rec_s)) return "rec_s";
    if (bad(map_g2s)) return "map_g2s";
    if (bad(map_s2g)) return "map_s2g";
    if (bad(nll_g)) return "nll_g_cond";
    if (bad(nll_s)) return "nll_s_cond";
    if (bad(nll_shared)) return "nll_shared";
    return nullptr;
  }
};

/// Cross-domain mapping costs on the shared slices; gradients reach the
/// encoders and the bridge flow.
template <typename T>
std::pair<Var<T>, Var<T>> mapping_losses(model::JointModel<T>& m,
                                         const Var<T>& z_g, const Var<T>& z_s,
                                         bool training) {
  Var<T> sh_g = m.shared_of(z_g);
  Var<T> sh_s = m.shared_of(z_s);
  Var<T> fwd = m.shared_flow.forward(sh_g, nullptr, training).value;
  Var<T> l_g2s = mse(sh_s, fwd);
  Var<T> inv = m.shared_flow.inverse(sh_s, nullptr).value;
  Var<T> l_s2g = mse(sh_g, inv);
  return {l_g2s, l_s2g};
}

/// Negative log-priors of the factorized latent: conditional flows over the
/// domain-only slices plus a standard normal over the shared slice
/// (averaged over the two encoders' shared views).
template <typename T>
std::tuple<Var<T>, Var<T>, Var<T>> prior_losses(model::JointModel<T>& m,
                                                const Var<T>& z_g,
                                                const Var<T>& z_s,
                                                bool training) {
  Var<T> sh_g = m.shared_of(z_g);
  Var<T> sh_s = m.shared_of(z_s);
  Var<T> go = m.geo_only_of(z_g);
  Var<T> so = m.spec_only_of(z_s);
  if (training) {
    // ensure data-dependent init happens on the first batch
    if (!m.prior_g.fully_initialized()) m.prior_g.forward(go, &sh_g, true);
    if (!m.prior_s.fully_initialized()) m.prior_s.forward(so, &sh_s, true);
  }
  Var<T> nll_g = neg(mean_all(m.prior_g.log_prob(go, &sh_g)));
  Var<T> nll_s = neg(mean_all(m.prior_s.log_prob(so, &sh_s)));
  Var<T> lp_shared = add(
      mean_all(flow::FlowChain<T>::gaussian_log_prob(sh_g)),
      mean_all(flow::FlowChain<T>::gaussian_log_prob(sh_s)));
  Var<T> nll_shared = mul_const(neg(lp_shared), 0.5);
  return {nll_g, nll_s, nll_shared};
}

/// Assemble every term and the weighted total for one paired batch.
template <typename T>
LossBreakdown<T> total_loss(model::JointModel<T>& m, const Var<T>& xg,
                            const Var<T>& xs, const RunConfig& cfg,
                            bool training) {
  cfg.validate();
  Var<T> z_g = m.encode_geometry(xg, training);
  Var<T> z_s = m.encode_spectrogram(xs, training);
  Var<T> rec_g = mse(xg, m.decode_geometry(z_g, training));
  Var<T> rec_s = mse(xs, m.decode_spectrogram(z_s, training));
  auto [l_g2s, l_s2g] = mapping_losses(m, z_g, z_s, training);
  auto [nll_g, nll_s, nll_sh] = prior_losses(m, z_g, z_s, training);

  LossBreakdown<T> out;
  out.rec_g = rec_g.value()[0];
  out.rec_s = rec_s.value()[0];
  out.map_g2s = l_g2s.value()[0];
  out.map_s2g = l_s2g.value()[0];
  out.nll_g = nll_g.value()[0];
  out.nll_s = nll_s.value()[0];
  out.nll_shared = nll_sh.value()[0];

  Var<T> total = mul_const(rec_g, cfg.w_rec_g);
  total = add(total, mul_const(rec_s, cfg.w_rec_s));
  total = add(total, mul_const(add(l_g2s, l_s2g), cfg.w_map));
  total = add(total, mul_const(add(add(nll_g, nll_s), nll_sh), cfg.w_prior));
  out.total = total;
  return out;
}

/// Diagnostic decomposition of the variational bound under a fixed-variance
/// Gaussian likelihood; the entropy term is identically zero for the
/// deterministic encoders.
struct ElboReport {
  double data_term = 0;    // expected negative log-likelihood
  double prior_term = 0;   // negative log-priors
  double entropy_term = 0; // 0 by construction
  double neg_elbo = 0;
};

/// Per-sample expected negative log-likelihood of a batch under a
/// fixed-variance Gaussian observation model. A perfect reconstruction
/// leaves only the normalization constant (dim/2) log(2 pi sigma^2).
template <typename T>
double gaussian_data_term(const Tensor<T>& x, const Tensor<T>& xhat,
                          double sigma) {
  check_same_shape(x, xhat, "gaussian_data_term");
  int64_t batch = x.shape[0];
  int64_t dim = x.numel() / batch;
  double sigma2 = sigma * sigma;
  double sse = 0;
  for (int64_t i = 0; i < x.numel(); ++i) {
    double d = static_cast<double>(x[i]) - static_cast<double>(xhat[i]);
    sse += d * d;
  }
  return (static_cast<double>(dim) / 2.0) * std::log(kTwoPi * sigma2) +
         sse / (2.0 * sigma2 * static_cast<double>(batch));
}

template <typename T>
ElboReport elbo_report(model::JointModel<T>& m, const Var<T>& xg,
                       const Var<T>& xs, const RunConfig& cfg) {
  Var<T> z_g = m.encode_geometry(xg, false);
  Var<T> z_s = m.encode_spectrogram(xs, false);
  Var<T> xg_hat = m.decode_geometry(z_g, false);
  Var<T> xs_hat = m.decode_spectrogram(z_s, false);

  ElboReport r;
  r.data_term = gaussian_data_term(xg.value(), xg_hat.value(), cfg.elbo_sigma) +
                gaussian_data_term(xs.value(), xs_hat.value(), cfg.elbo_sigma);
  auto [nll_g, nll_s, nll_sh] = prior_losses(m, z_g, z_s, false);
  r.prior_term = nll_g.value()[0] + nll_s.value()[0] + nll_sh.value()[0];
  r.entropy_term = 0.0;
  r.neg_elbo = r.data_term + r.prior_term - r.entropy_term;
  return r;
}

// ------------------------------------------------------------ trainer

struct EpochMetrics {
  nlohmann::ordered_json json;
};

/// Full training loop: seeded shuffles, per-epoch JSONL metrics, best-dev
/// and last checkpoints (optimizer state included), NaN fail-fast.
template <typename T = float>
class Trainer {
 public:
  Trainer(const RunConfig& cfg)
      : cfg_(cfg),
        model_(cfg.geometry_config(), cfg.spectrogram_config(),
               cfg.partition(), cfg.seed, cfg.shared_depth, cfg.prior_depth,
               cfg.flow_width) {
    cfg_.validate();
    model_.collect(params_);
    opt_ = Adam<T>(params_, cfg_.lr);
  }

  model::JointModel<T>& model() { return model_; }
  int epoch() const { return epoch_; }
  double best_dev() const { return best_dev_; }
  int best_epoch() const { return best_epoch_; }

  /// Data-dependent flow initialization on a large batch; noisy per-channel
  /// statistics from a batch of 10 otherwise set extreme act-norm scales.
  void warm_init(const Dataset& ds, const Split& split) {
    if (model_.shared_flow.fully_initialized() &&
        model_.prior_g.fully_initialized() &&
        model_.prior_s.fully_initialized())
      return;
    size_t count = std::min<size_t>(split.train.size(), 64);
    if (count < 2) throw ConfigError("training split smaller than two samples");
    auto [xg, xs] = make_batch(ds, split.train, 0, count);
    total_loss(model_, xg, xs, cfg_, true);
  }

  /// Metrics for one epoch of training followed by a dev pass.
  EpochMetrics run_epoch(const Dataset& ds, const Split& split) {
    if (epoch_ == 0) warm_init(ds, split);
    ++epoch_;
    std::vector<int> order = split.train;
    Rng shuffle_rng(derive_seed(cfg_.seed, 1000 + static_cast<uint64_t>(epoch_)));
    shuffle_rng.shuffle(order);

    double sum_total = 0;
    LossBreakdown<T> acc;
    int n_batches = 0;
    for (size_t start = 0; start + cfg_.batch_size <= order.size();
         start += cfg_.batch_size) {
      auto [xg, xs] = make_batch(ds, order, start, cfg_.batch_size);
      LossBreakdown<T> parts = total_loss(model_, xg, xs, cfg_, true);
      if (const char* bad = parts.first_nan())
        throw NumericError("NaN loss in component " + std::string(bad) +
                           " at epoch " + std::to_string(epoch_) + " batch " +
                           std::to_string(n_batches));
      opt_.zero_grad();
      backward(parts.total);
      opt_.step();
      sum_total += parts.weighted_total(cfg_);
      acc.rec_g += parts.rec_g;
      acc.rec_s += parts.rec_s;
      acc.map_g2s += parts.map_g2s;
      acc.map_s2g += parts.map_s2g;
      acc.nll_g += parts.nll_g;
      acc.nll_s += parts.nll_s;
      acc.nll_shared += parts.nll_shared;
      ++n_batches;
    }
    if (n_batches == 0)
      throw ConfigError("training split smaller than one batch");

    EpochMetrics m;
    m.json["epoch"] = epoch_;
    m.json["train_total"] = sum_total / n_batches;
    m.json["train_rec_g"] = acc.rec_g / n_batches;
    m.json["train_rec_s"] = acc.rec_s / n_batches;
    m.json["train_map_g2s"] = acc.map_g2s / n_batches;
    m.json["train_map_s2g"] = acc.map_s2g / n_batches;
    m.json["train_nll_g"] = acc.nll_g / n_batches;
    m.json["train_nll_s"] = acc.nll_s / n_batches;
    m.json["train_nll_shared"] = acc.nll_shared / n_batches;

    auto [dev_total, dev_parts, elbo] = evaluate(ds, split.dev);
    m.json["dev_total"] = dev_total;
    m.json["dev_rec_g"] = dev_parts.rec_g;
    m.json["dev_rec_s"] = dev_parts.rec_s;
    m.json["dev_map_g2s"] = dev_parts.map_g2s;
    m.json["dev_map_s2g"] = dev_parts.map_s2g;
    m.json["dev_nll_g"] = dev_parts.nll_g;
    m.json["dev_nll_s"] = dev_parts.nll_s;
    m.json["dev_nll_shared"] = dev_parts.nll_shared;
    m.json["elbo_data_term"] = elbo.data_term;
    m.json["elbo_prior_term"] = elbo.prior_term;
    m.json["elbo_entropy_term"] = elbo.entropy_term;
    m.json["neg_elbo"] = elbo.neg_elbo;

    if (dev_total < best_dev_) {  // strict: earliest epoch wins ties
      best_dev_ = dev_total;
      best_epoch_ = epoch_;
      m.json["new_best"] = true;
    } else {
      m.json["new_best"] = false;
    }
    return m;
  }

  /// Mean dev loss, components and the ELBO decomposition.
  std::tuple<double, LossBreakdown<T>, ElboReport> evaluate(
      const Dataset& ds, const std::vector<int>& ids) {
    if (ids.size() < 2)
      throw ConfigError("evaluation split needs at least 2 samples");
    double sum_total = 0;
    LossBreakdown<T> acc;
    ElboReport elbo_acc;
    int n = 0;
    for (size_t start = 0; start + 2 <= ids.size(); start += cfg_.batch_size) {
      size_t count = std::min<size_t>(cfg_.batch_size, ids.size() - start);
      if (count < 2) break;
      auto [xg, xs] = make_batch(ds, ids, start, count);
      LossBreakdown<T> parts = total_loss(model_, xg, xs, cfg_, false);
      sum_total += parts.weighted_total(cfg_);
      acc.rec_g += parts.rec_g;
      acc.rec_s += parts.rec_s;
      acc.map_g2s += parts.map_g2s;
      acc.map_s2g += parts.map_s2g;
      acc.nll_g += parts.nll_g;
      acc.nll_s += parts.nll_s;
      acc.nll_shared += parts.nll_shared;
      ElboReport e = elbo_report(model_, xg, xs, cfg_);
      elbo_acc.data_term += e.data_term;
      elbo_acc.prior_term += e.prior_term;
      elbo_acc.neg_elbo += e.neg_elbo;
      ++n;
    }
    if (n == 0) throw ConfigError("evaluation split smaller than one batch");
    acc.rec_g /= n;
    acc.rec_s /= n;
    acc.map_g2s /= n;
    acc.map_s2g /= n;
    acc.nll_g /= n;
    acc.nll_s /= n;
    acc.nll_shared /= n;
    elbo_acc.data_term /= n;
    elbo_acc.prior_term /= n;
    elbo_acc.neg_elbo /= n;
    return {sum_total / n, acc, elbo_acc};
  }

  void save(const std::string& dir) {
    CheckpointWriter w;
    for (size_t i = 0; i < opt_.params.size(); ++i) {
      w.add("adam.m." + opt_.names[i], opt_.m[i]);
      w.add("adam.v." + opt_.names[i], opt_.v[i]);
    }
    w.state["trainer"] = {{"epoch", epoch_},
                          {"adam_step", opt_.step_count},
                          {"best_dev", best_dev_},
                          {"best_epoch", best_epoch_},
                          {"seed", cfg_.seed}};
    w.config["run_config_fingerprint"] = hex64(cfg_.fingerprint());
    w.config["run_config_text"] = cfg_.to_text();
    model_.save(dir, w);
  }

  void restore(const std::string& dir) {
    CheckpointReader r(dir);
    restore_from(r);
  }

  void restore_from(const CheckpointReader& r) {
    ParamList<T> params;
    model_.collect(params);
    for (auto& np : params) r.load_into(np.name, np.var.value());
    model_.load_bn_buffers(r);
    if (r.state.at("actnorm_initialized").at("shared_flow").get<bool>())
      model_.shared_flow.set_initialized();
    if (r.state.at("actnorm_initialized").at("prior_g").get<bool>())
      model_.prior_g.set_initialized();
    if (r.state.at("actnorm_initialized").at("prior_s").get<bool>())
      model_.prior_s.set_initialized();
    for (size_t i = 0; i < opt_.params.size(); ++i) {
      r.load_into("adam.m." + opt_.names[i], opt_.m[i]);
      r.load_into("adam.v." + opt_.names[i], opt_.v[i]);
    }
    const auto& st = r.state.at("trainer");
    epoch_ = st.at("epoch").get<int>();
    opt_.step_count = st.at("adam_step").get<int64_t>();
    best_dev_ = st.at("best_dev").get<double>();
    best_epoch_ = st.at("best_epoch").get<int>();
  }

  std::pair<Var<T>, Var<T>> make_batch(const Dataset& ds,
                                       const std::vector<int>& ids,
                                       size_t start, size_t count) {
    std::vector<const ImageF*> g, s;
    for (size_t i = start; i < start + count; ++i) {
      g.push_back(&ds.geo[static_cast<size_t>(ids[i])]);
      s.push_back(&ds.mel[static_cast<size_t>(ids[i])]);
    }
    return {Var<T>::leaf(model::images_to_batch<T>(g)),
            Var<T>::leaf(model::images_to_batch<T>(s))};
  }

 private:
  RunConfig cfg_;
  model::JointModel<T> model_;
  ParamList<T> params_;
  Adam<T> opt_;
  int epoch_ = 0;
  double best_dev_ = std::numeric_limits<double>::infinity();
  int best_epoch_ = -1;
};

}  // namespace tractflow::train
