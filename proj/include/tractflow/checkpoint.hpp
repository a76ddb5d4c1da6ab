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

#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "tractflow/common.hpp"
#include "tractflow/tensor.hpp"

namespace tractflow {

// Checkpoint directory layout:
//   manifest.json  - format_version, ordered tensor table (name, shape,
//                    dtype, byte offset), plus free-form config/state
//   weights.bin    - little-endian raw float32, concatenated in table order
// Round trips are bit-exact for float tensors.

class CheckpointWriter {
 public:
  void add(const std::string& name, const Tensor<float>& t) {
    nlohmann::ordered_json entry;
    entry["name"] = name;
    entry["shape"] = t.shape;
    entry["dtype"] = "f32";
    entry["offset"] = bytes_.size();
    table_.push_back(entry);
    size_t old = bytes_.size();
    bytes_.resize(old + t.data.size() * sizeof(float));
    std::memcpy(bytes_.data() + old, t.data.data(),
                t.data.size() * sizeof(float));
  }

  void add(const std::string& name, const Tensor<double>& t) {
    add(name, t.template cast<float>());
  }

  nlohmann::ordered_json config = nlohmann::ordered_json::object();
  nlohmann::ordered_json state = nlohmann::ordered_json::object();

  void write(const std::string& dir) const {
    std::filesystem::create_directories(dir);
    nlohmann::ordered_json manifest;
    manifest["format_version"] = 1;
    manifest["tensors"] = table_;
    manifest["config"] = config;
    manifest["state"] = state;
    {
      std::ofstream f(dir + "/manifest.json");
      if (!f) throw IoError("cannot write " + dir + "/manifest.json");
      f << manifest.dump(2) << "\n";
    }
    {
      std::ofstream f(dir + "/weights.bin", std::ios::binary);
      if (!f) throw IoError("cannot write " + dir + "/weights.bin");
      f.write(reinterpret_cast<const char*>(bytes_.data()),
              static_cast<std::streamsize>(bytes_.size()));
      if (!f) throw IoError("short write: " + dir + "/weights.bin");
    }
  }

 private:
  nlohmann::ordered_json table_ = nlohmann::ordered_json::array();
  std::vector<unsigned char> bytes_;
};

class CheckpointReader {
 public:
  explicit CheckpointReader(const std::string& dir) {
    std::ifstream mf(dir + "/manifest.json");
    if (!mf) throw IoError("missing checkpoint manifest: " + dir);
    nlohmann::json manifest = nlohmann::json::parse(mf);
    if (manifest.at("format_version").get<int>() != 1)
      throw MismatchError("unsupported checkpoint format version");
    config = manifest.value("config", nlohmann::json::object());
    state = manifest.value("state", nlohmann::json::object());
    for (const auto& e : manifest.at("tensors")) entries_.push_back(e);

    std::ifstream wf(dir + "/weights.bin", std::ios::binary);
    if (!wf) throw IoError("missing checkpoint weights: " + dir);
    bytes_.assign((std::istreambuf_iterator<char>(wf)),
                  std::istreambuf_iterator<char>());
  }

  bool has(const std::string& name) const { return find(name) != nullptr; }

  Tensor<float> get(const std::string& name) const {
    const nlohmann::json* e = find(name);
    if (!e) throw MismatchError("checkpoint is missing tensor " + name);
    std::vector<int> shape = e->at("shape").get<std::vector<int>>();
    size_t offset = e->at("offset").get<size_t>();
    Tensor<float> t(shape);
    size_t nbytes = t.data.size() * sizeof(float);
    if (offset + nbytes > bytes_.size())
      throw IoError("checkpoint weights truncated at tensor " + name);
    std::memcpy(t.data.data(), bytes_.data() + offset, nbytes);
    return t;
  }

  template <typename T>
  void load_into(const std::string& name, Tensor<T>& dst) const {
    Tensor<float> t = get(name);
    if (t.shape != dst.shape)
      throw MismatchError("checkpoint tensor " + name + " has shape " +
                          shape_str(t.shape) + ", expected " +
                          shape_str(dst.shape));
    for (int64_t i = 0; i < t.numel(); ++i) dst[i] = static_cast<T>(t[i]);
  }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (const auto& e : entries_) out.push_back(e.at("name").get<std::string>());
    return out;
  }

  nlohmann::json config, state;

 private:
  const nlohmann::json* find(const std::string& name) const {
    for (const auto& e : entries_)
      if (e.at("name").get<std::string>() == name) return &e;
    return nullptr;
  }

  std::vector<nlohmann::json> entries_;
  std::vector<char> bytes_;
};

}  // namespace tractflow
