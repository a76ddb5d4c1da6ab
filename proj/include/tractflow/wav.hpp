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

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "tractflow/common.hpp"

namespace tractflow {

/// Mono audio in [-1, 1].
struct AudioClip {
  std::vector<float> samples;
  int sample_rate = 22020;

  double duration() const {
    return static_cast<double>(samples.size()) / sample_rate;
  }
};

namespace detail {
inline void put_u32(std::string& s, uint32_t v) {
  for (int i = 0; i < 4; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_u16(std::string& s, uint16_t v) {
  s.push_back(static_cast<char>(v & 0xff));
  s.push_back(static_cast<char>((v >> 8) & 0xff));
}
inline uint32_t get_u32(const unsigned char* p) {
  return static_cast<uint32_t>(p[0]) | (static_cast<uint32_t>(p[1]) << 8) |
         (static_cast<uint32_t>(p[2]) << 16) | (static_cast<uint32_t>(p[3]) << 24);
}
inline uint16_t get_u16(const unsigned char* p) {
  return static_cast<uint16_t>(p[0] | (p[1] << 8));
}
}  // namespace detail

/// 16-bit PCM mono, little-endian.
inline void write_wav(const std::string& path, const AudioClip& clip) {
  std::string out;
  uint32_t n = static_cast<uint32_t>(clip.samples.size());
  uint32_t data_bytes = n * 2;
  out += "RIFF";
  detail::put_u32(out, 36 + data_bytes);
  out += "WAVEfmt ";
  detail::put_u32(out, 16);
  detail::put_u16(out, 1);  // PCM
  detail::put_u16(out, 1);  // mono
  detail::put_u32(out, static_cast<uint32_t>(clip.sample_rate));
  detail::put_u32(out, static_cast<uint32_t>(clip.sample_rate) * 2);
  detail::put_u16(out, 2);   // block align
  detail::put_u16(out, 16);  // bits
  out += "data";
  detail::put_u32(out, data_bytes);
  for (float v : clip.samples) {
    float c = v < -1.f ? -1.f : (v > 1.f ? 1.f : v);
    int q = static_cast<int>(std::lrint(c * 32767.0f));
    detail::put_u16(out, static_cast<uint16_t>(static_cast<int16_t>(q)));
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for writing: " + path);
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw IoError("short write: " + path);
}

inline AudioClip read_wav(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open: " + path);
  std::vector<unsigned char> buf((std::istreambuf_iterator<char>(f)),
                                 std::istreambuf_iterator<char>());
  if (buf.size() < 44 || std::memcmp(buf.data(), "RIFF", 4) != 0 ||
      std::memcmp(buf.data() + 8, "WAVE", 4) != 0)
    throw IoError("not a RIFF/WAVE file: " + path);
  size_t pos = 12;
  int sample_rate = 0, bits = 0, channels = 0;
  std::vector<float> samples;
  bool got_fmt = false, got_data = false;
  while (pos + 8 <= buf.size()) {
    uint32_t size = detail::get_u32(buf.data() + pos + 4);
    const unsigned char* body = buf.data() + pos + 8;
    if (pos + 8 + size > buf.size()) throw IoError("truncated chunk: " + path);
    if (std::memcmp(buf.data() + pos, "fmt ", 4) == 0) {
      uint16_t fmt = detail::get_u16(body);
      channels = detail::get_u16(body + 2);
      sample_rate = static_cast<int>(detail::get_u32(body + 4));
      bits = detail::get_u16(body + 14);
      if (fmt != 1 || bits != 16)
        throw IoError("unsupported WAV encoding (need 16-bit PCM): " + path);
      got_fmt = true;
    } else if (std::memcmp(buf.data() + pos, "data", 4) == 0) {
      if (!got_fmt) throw IoError("data before fmt chunk: " + path);
      size_t nframes = size / (2 * static_cast<size_t>(channels));
      samples.resize(nframes);
      for (size_t i = 0; i < nframes; ++i) {
        // average channels down to mono
        double acc = 0;
        for (int c = 0; c < channels; ++c) {
          int16_t q = static_cast<int16_t>(
              detail::get_u16(body + (i * channels + c) * 2));
          acc += q / 32767.0;
        }
        samples[i] = static_cast<float>(acc / channels);
      }
      got_data = true;
    }
    pos += 8 + size + (size & 1);
  }
  if (!got_fmt || !got_data) throw IoError("missing fmt/data chunk: " + path);
  AudioClip clip;
  clip.samples = std::move(samples);
  clip.sample_rate = sample_rate;
  return clip;
}

}  // namespace tractflow
