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
#include <vector>

#include <json.hpp>

#include "tractflow/checkpoint.hpp"
#include "tractflow/flow.hpp"
#include "tractflow/image.hpp"
#include "tractflow/nn.hpp"

namespace tractflow::model {

struct AutoencoderConfig {
  int in_h = 32, in_w = 32, in_c = 1;
  std::vector<int> channels{16, 32, 64, 64};
  int attn_after_stage = 3;  // 1-based
  int latent_dim = 64;
  bool attn_reduce_proj = false;

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["in_h"] = in_h;
    j["in_w"] = in_w;
    j["in_c"] = in_c;
    j["channels"] = channels;
    j["attn_after_stage"] = attn_after_stage;
    j["latent_dim"] = latent_dim;
    j["attn_reduce_proj"] = attn_reduce_proj;
    return j;
  }

  static AutoencoderConfig from_json(const nlohmann::json& j) {
    AutoencoderConfig c;
    c.in_h = j.at("in_h").get<int>();
    c.in_w = j.at("in_w").get<int>();
    c.in_c = j.at("in_c").get<int>();
    c.channels = j.at("channels").get<std::vector<int>>();
    c.attn_after_stage = j.at("attn_after_stage").get<int>();
    c.latent_dim = j.at("latent_dim").get<int>();
    c.attn_reduce_proj = j.at("attn_reduce_proj").get<bool>();
    return c;
  }
};

namespace detail {
inline int down2(int n) { return (n + 2 - 3) / 2 + 1; }  // k3 s2 p1
}

/// Stride-2 conv stack with batch norm before every nonlinearity, one
/// self-attention block, and a dense map to the latent vector.
template <typename T>
struct Encoder {
  AutoencoderConfig cfg;
  std::vector<Conv2d<T>> convs;
  std::vector<BatchNorm2d<T>> bns;
  SelfAttention<T> attn;
  Dense<T> to_latent;
  std::vector<int> hs, ws;  // spatial sizes per stage, index 0 = input

  Encoder() = default;
  Encoder(const AutoencoderConfig& cfg_, Rng& rng) : cfg(cfg_) {
    int h = cfg.in_h, w = cfg.in_w, c = cfg.in_c;
    hs.push_back(h);
    ws.push_back(w);
    for (size_t i = 0; i < cfg.channels.size(); ++i) {
      convs.emplace_back(c, cfg.channels[i], 3, 2, 1, rng);
      bns.emplace_back(cfg.channels[i]);
      c = cfg.channels[i];
      h = detail::down2(h);
      w = detail::down2(w);
      hs.push_back(h);
      ws.push_back(w);
      if (h < 1 || w < 1) throw ConfigError("encoder downsamples to nothing");
    }
    int attn_c = cfg.channels[static_cast<size_t>(cfg.attn_after_stage) - 1];
    attn = SelfAttention<T>(attn_c, rng, cfg.attn_reduce_proj);
    to_latent = Dense<T>(c * h * w, cfg.latent_dim, rng);
  }

  Var<T> forward(const Var<T>& x, bool training) {
    if (x.shape().size() != 4 || x.shape()[1] != cfg.in_c ||
        x.shape()[2] != cfg.in_h || x.shape()[3] != cfg.in_w)
      throw ShapeError("encoder: input " + shape_str(x.shape()) +
                       " does not match configured " +
                       std::to_string(cfg.in_c) + "x" +
                       std::to_string(cfg.in_h) + "x" + std::to_string(cfg.in_w));
    Var<T> h = x;
    for (size_t i = 0; i < convs.size(); ++i) {
      h = leaky_relu(bns[i].forward(convs[i].forward(h), training), 0.2);
      if (static_cast<int>(i) + 1 == cfg.attn_after_stage) h = attn.forward(h);
    }
    int B = h.shape()[0];
    return to_latent.forward(
        reshape(h, {B, h.shape()[1] * h.shape()[2] * h.shape()[3]}));
  }

  void collect(ParamList<T>& out, const std::string& prefix) {
    for (size_t i = 0; i < convs.size(); ++i) {
      convs[i].collect(out, prefix + ".conv" + std::to_string(i));
      bns[i].collect(out, prefix + ".bn" + std::to_string(i));
    }
    attn.collect(out, prefix + ".attn");
    to_latent.collect(out, prefix + ".to_latent");
  }
};

/// Mirror of the encoder built from transpose convolutions; output pixels go
/// through a sigmoid so they stay in (0,1).
template <typename T>
struct Decoder {
  AutoencoderConfig cfg;
  Dense<T> from_latent;
  BatchNorm2d<T> bn_in;
  std::vector<ConvTranspose2d<T>> deconvs;
  std::vector<BatchNorm2d<T>> bns;  // for all but the output layer
  SelfAttention<T> attn;
  int seed_h = 0, seed_w = 0, seed_c = 0;
  int attn_deconv_index = -1;

  Decoder() = default;
  Decoder(const AutoencoderConfig& cfg_, Rng& rng) : cfg(cfg_) {
    // replay the encoder's spatial chain to size each upsampling stage
    std::vector<int> hs{cfg.in_h}, ws{cfg.in_w};
    for (size_t i = 0; i < cfg.channels.size(); ++i) {
      hs.push_back(detail::down2(hs.back()));
      ws.push_back(detail::down2(ws.back()));
    }
    int n = static_cast<int>(cfg.channels.size());
    seed_c = cfg.channels[static_cast<size_t>(n) - 1];
    seed_h = hs[static_cast<size_t>(n)];
    seed_w = ws[static_cast<size_t>(n)];
    from_latent = Dense<T>(cfg.latent_dim, seed_c * seed_h * seed_w, rng);
    bn_in = BatchNorm2d<T>(seed_c);
    for (int i = n - 1; i >= 0; --i) {
      int in_c = cfg.channels[static_cast<size_t>(i)];
      int out_c = i > 0 ? cfg.channels[static_cast<size_t>(i) - 1] : cfg.in_c;
      int oph = hs[static_cast<size_t>(i)] - (2 * hs[static_cast<size_t>(i) + 1] - 1);
      int opw = ws[static_cast<size_t>(i)] - (2 * ws[static_cast<size_t>(i) + 1] - 1);
      deconvs.emplace_back(in_c, out_c, 3, 2, 1, oph, opw, rng);
      if (i > 0) bns.emplace_back(out_c);
      // mirror position: the feature map matching the encoder's attention
      if (i == cfg.attn_after_stage)
        attn_deconv_index = static_cast<int>(deconvs.size()) - 1;
    }
    int attn_c = cfg.channels[static_cast<size_t>(cfg.attn_after_stage) - 1];
    attn = SelfAttention<T>(attn_c, rng, cfg.attn_reduce_proj);
  }

  Var<T> forward(const Var<T>& z, bool training) {
    if (z.shape().size() != 2 || z.shape()[1] != cfg.latent_dim)
      throw ShapeError("decoder: latent " + shape_str(z.shape()) +
                       " does not match dim " + std::to_string(cfg.latent_dim));
    int B = z.shape()[0];
    Var<T> h = reshape(from_latent.forward(z), {B, seed_c, seed_h, seed_w});
    h = leaky_relu(bn_in.forward(h, training), 0.2);
    for (size_t i = 0; i < deconvs.size(); ++i) {
      h = deconvs[i].forward(h);
      if (i + 1 < deconvs.size()) {
        h = leaky_relu(bns[i].forward(h, training), 0.2);
        if (static_cast<int>(i) == attn_deconv_index) h = attn.forward(h);
      }
    }
    return sigmoid(h);
  }

  void collect(ParamList<T>& out, const std::string& prefix) {
    from_latent.collect(out, prefix + ".from_latent");
    bn_in.collect(out, prefix + ".bn_in");
    for (size_t i = 0; i < deconvs.size(); ++i)
      deconvs[i].collect(out, prefix + ".deconv" + std::to_string(i));
    for (size_t i = 0; i < bns.size(); ++i)
      bns[i].collect(out, prefix + ".bn" + std::to_string(i));
    attn.collect(out, prefix + ".attn");
  }
};

// ------------------------------------------------------------ partition

/// Latent layout per domain: shared slice first, domain-only slice second.
struct PartitionSpec {
  int d_shared = 32;
  int d_g_only = 32;
  int d_s_only = 32;

  void validate(int d_l_g, int d_l_s) const {
    if (d_shared + d_g_only != d_l_g)
      throw ConfigError("partition: d_shared + d_g_only = " +
                        std::to_string(d_shared + d_g_only) +
                        " != geometry latent dim " + std::to_string(d_l_g));
    if (d_shared + d_s_only != d_l_s)
      throw ConfigError("partition: d_shared + d_s_only = " +
                        std::to_string(d_shared + d_s_only) +
                        " != spectrogram latent dim " + std::to_string(d_l_s));
    if (d_shared % 2 || d_g_only % 2 || d_s_only % 2)
      throw ConfigError("partition dims must be even for the coupling splits");
    if (d_shared <= 0 || d_g_only <= 0 || d_s_only <= 0)
      throw ConfigError("partition dims must be positive");
  }

  nlohmann::ordered_json to_json() const {
    return {{"d_shared", d_shared}, {"d_g_only", d_g_only}, {"d_s_only", d_s_only}};
  }

  static PartitionSpec from_json(const nlohmann::json& j) {
    return {j.at("d_shared").get<int>(), j.at("d_g_only").get<int>(),
            j.at("d_s_only").get<int>()};
  }
};

// ------------------------------------------------------------ joint model

/// Both autoencoders, the invertible shared-latent bridge (forward direction
/// fixed as geometry -> spectrogram), and the two conditional prior flows
/// over the domain-only slices.
template <typename T>
struct JointModel {
  AutoencoderConfig geo_cfg, spec_cfg;
  PartitionSpec part;
  int shared_depth = 8, prior_depth = 4, flow_width = 128;

  Encoder<T> enc_g, enc_s;
  Decoder<T> dec_g, dec_s;
  flow::FlowChain<T> shared_flow;  // dim d_shared
  flow::FlowChain<T> prior_g;      // dim d_g_only, conditioned on z_shared
  flow::FlowChain<T> prior_s;      // dim d_s_only, conditioned on z_shared

  JointModel() = default;
  JointModel(const AutoencoderConfig& geo, const AutoencoderConfig& spec,
             const PartitionSpec& p, uint64_t seed, int shared_depth_ = 8,
             int prior_depth_ = 4, int flow_width_ = 128)
      : geo_cfg(geo), spec_cfg(spec), part(p), shared_depth(shared_depth_),
        prior_depth(prior_depth_), flow_width(flow_width_) {
    part.validate(geo.latent_dim, spec.latent_dim);
    Rng r_eg(derive_seed(seed, 1)), r_es(derive_seed(seed, 2));
    Rng r_dg(derive_seed(seed, 3)), r_ds(derive_seed(seed, 4));
    Rng r_f(derive_seed(seed, 5)), r_pg(derive_seed(seed, 6)),
        r_ps(derive_seed(seed, 7));
    enc_g = Encoder<T>(geo, r_eg);
    enc_s = Encoder<T>(spec, r_es);
    dec_g = Decoder<T>(geo, r_dg);
    dec_s = Decoder<T>(spec, r_ds);
    shared_flow = flow::FlowChain<T>(p.d_shared, shared_depth, 0, r_f, flow_width);
    prior_g = flow::FlowChain<T>(p.d_g_only, prior_depth, p.d_shared, r_pg, flow_width);
    prior_s = flow::FlowChain<T>(p.d_s_only, prior_depth, p.d_shared, r_ps, flow_width);
  }

  Var<T> encode_geometry(const Var<T>& x, bool training = false) {
    return enc_g.forward(x, training);
  }
  Var<T> encode_spectrogram(const Var<T>& x, bool training = false) {
    return enc_s.forward(x, training);
  }
  Var<T> decode_geometry(const Var<T>& z, bool training = false) {
    return dec_g.forward(z, training);
  }
  Var<T> decode_spectrogram(const Var<T>& z, bool training = false) {
    return dec_s.forward(z, training);
  }

  Var<T> shared_of(const Var<T>& z) const {
    return slice(z, 1, 0, part.d_shared);
  }
  Var<T> geo_only_of(const Var<T>& z) const {
    return slice(z, 1, part.d_shared, part.d_g_only);
  }
  Var<T> spec_only_of(const Var<T>& z) const {
    return slice(z, 1, part.d_shared, part.d_s_only);
  }

  /// Geometry-shared -> spectrogram-shared (the chain's forward direction).
  Var<T> map_g2s(const Var<T>& z_g_shared, bool training = false) {
    return shared_flow.forward(z_g_shared, nullptr, training).value;
  }
  /// Spectrogram-shared -> geometry-shared (exact inverse of map_g2s).
  Var<T> map_s2g(const Var<T>& z_s_shared) {
    return shared_flow.inverse(z_s_shared, nullptr).value;
  }

  void collect(ParamList<T>& out) {
    enc_g.collect(out, "enc_g");
    enc_s.collect(out, "enc_s");
    dec_g.collect(out, "dec_g");
    dec_s.collect(out, "dec_s");
    shared_flow.collect(out, "shared_flow");
    prior_g.collect(out, "prior_g");
    prior_s.collect(out, "prior_s");
  }

  /// Flow parameter names, for the gradient-isolation checks.
  ParamList<T> prior_params() {
    ParamList<T> out;
    prior_g.collect(out, "prior_g");
    prior_s.collect(out, "prior_s");
    return out;
  }

  nlohmann::ordered_json config_json() const {
    nlohmann::ordered_json j;
    j["geometry"] = geo_cfg.to_json();
    j["spectrogram"] = spec_cfg.to_json();
    j["partition"] = part.to_json();
    j["shared_depth"] = shared_depth;
    j["prior_depth"] = prior_depth;
    j["flow_width"] = flow_width;
    return j;
  }

  void save(const std::string& dir, CheckpointWriter& w) {
    ParamList<T> params;
    collect(params);
    for (const auto& np : params) w.add(np.name, np.var.value());
    // batch-norm running buffers ride along as named tensors
    save_bn_buffers(w);
    w.config["model"] = config_json();
    w.state["actnorm_initialized"] = nlohmann::ordered_json::object();
    w.state["actnorm_initialized"]["shared_flow"] = shared_flow.fully_initialized();
    w.state["actnorm_initialized"]["prior_g"] = prior_g.fully_initialized();
    w.state["actnorm_initialized"]["prior_s"] = prior_s.fully_initialized();
    w.write(dir);
  }

  static JointModel load(const CheckpointReader& r) {
    const auto& j = r.config.at("model");
    JointModel m(AutoencoderConfig::from_json(j.at("geometry")),
                 AutoencoderConfig::from_json(j.at("spectrogram")),
                 PartitionSpec::from_json(j.at("partition")), 0,
                 j.at("shared_depth").get<int>(), j.at("prior_depth").get<int>(),
                 j.at("flow_width").get<int>());
    ParamList<T> params;
    m.collect(params);
    for (auto& np : params) r.load_into(np.name, np.var.value());
    m.load_bn_buffers(r);
    const auto& an = r.state.at("actnorm_initialized");
    if (an.at("shared_flow").get<bool>()) m.shared_flow.set_initialized();
    if (an.at("prior_g").get<bool>()) m.prior_g.set_initialized();
    if (an.at("prior_s").get<bool>()) m.prior_s.set_initialized();
    return m;
  }

  /// Visit every batch-norm layer with its checkpoint name prefix.
  template <typename F>
  void for_each_bn(F&& f) {
    auto walk_enc = [&](Encoder<T>& e, const std::string& p) {
      for (size_t i = 0; i < e.bns.size(); ++i)
        f(e.bns[i], p + ".bn" + std::to_string(i));
    };
    auto walk_dec = [&](Decoder<T>& d, const std::string& p) {
      f(d.bn_in, p + ".bn_in");
      for (size_t i = 0; i < d.bns.size(); ++i)
        f(d.bns[i], p + ".bn" + std::to_string(i));
    };
    walk_enc(enc_g, "enc_g");
    walk_enc(enc_s, "enc_s");
    walk_dec(dec_g, "dec_g");
    walk_dec(dec_s, "dec_s");
  }

  void load_bn_buffers(const CheckpointReader& r) {
    for_each_bn([&](BatchNorm2d<T>& bn, const std::string& name) {
      r.load_into(name + ".running_mean", bn.running_mean);
      r.load_into(name + ".running_var", bn.running_var);
    });
  }

 private:
  void save_bn_buffers(CheckpointWriter& w) {
    for_each_bn([&](BatchNorm2d<T>& bn, const std::string& name) {
      w.add(name + ".running_mean", bn.running_mean);
      w.add(name + ".running_var", bn.running_var);
    });
  }
};

/// Pack planar images into a [B,C,H,W] batch tensor.
template <typename T>
Tensor<T> images_to_batch(const std::vector<const ImageF*>& imgs) {
  if (imgs.empty()) throw ConfigError("images_to_batch: empty batch");
  int h = imgs[0]->height, w = imgs[0]->width, c = imgs[0]->channels;
  Tensor<T> out({static_cast<int>(imgs.size()), c, h, w});
  int64_t plane = static_cast<int64_t>(c) * h * w;
  for (size_t b = 0; b < imgs.size(); ++b) {
    if (imgs[b]->height != h || imgs[b]->width != w || imgs[b]->channels != c)
      throw ShapeError("images_to_batch: inconsistent image shapes");
    for (int64_t i = 0; i < plane; ++i)
      out[static_cast<int64_t>(b) * plane + i] = static_cast<T>(imgs[b]->pixels[static_cast<size_t>(i)]);
  }
  return out;
}

template <typename T>
ImageF batch_to_image(const Tensor<T>& batch, int index) {
  int c = batch.shape[1], h = batch.shape[2], w = batch.shape[3];
  ImageF img(h, w, c);
  int64_t plane = static_cast<int64_t>(c) * h * w;
  for (int64_t i = 0; i < plane; ++i) {
    float v = static_cast<float>(batch[index * plane + i]);
    img.pixels[static_cast<size_t>(i)] = v < 0.f ? 0.f : (v > 1.f ? 1.f : v);
  }
  return img;
}

}  // namespace tractflow::model
