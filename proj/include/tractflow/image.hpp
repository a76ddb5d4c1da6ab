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

#include <zlib.h>

#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "tractflow/common.hpp"

namespace tractflow {

/// Planar float image, values in [0,1], channel-major like the tensors.
struct ImageF {
  int height = 0, width = 0, channels = 1;
  std::vector<float> pixels;  // [c][y][x]

  ImageF() = default;
  ImageF(int h, int w, int c = 1)
      : height(h), width(w), channels(c),
        pixels(static_cast<size_t>(h) * w * c, 0.f) {}

  float& at(int c, int y, int x) {
    return pixels[(static_cast<size_t>(c) * height + y) * width + x];
  }
  float at(int c, int y, int x) const {
    return pixels[(static_cast<size_t>(c) * height + y) * width + x];
  }
};

namespace detail {

struct ResampleTap {
  int start;
  std::vector<float> weights;
};

// Separable triangle kernel; the footprint widens when shrinking so the
// result is antialiased. Plain bilinear falls out for upscaling. Narrow
// periodic structure (a harmonic comb in a mel image) would otherwise alias
// into spurious ridges under decimation.
inline std::vector<ResampleTap> triangle_taps(int in, int out) {
  std::vector<ResampleTap> taps(static_cast<size_t>(out));
  double scale = static_cast<double>(out) / in;
  double radius = std::max(1.0, 1.0 / scale);
  for (int o = 0; o < out; ++o) {
    double center = (o + 0.5) / scale - 0.5;
    int k0 = static_cast<int>(std::ceil(center - radius));
    int k1 = static_cast<int>(std::floor(center + radius));
    ResampleTap tap;
    tap.start = std::max(k0, 0);
    double total = 0;
    std::vector<double> w;
    for (int k = std::max(k0, 0); k <= std::min(k1, in - 1); ++k) {
      double v = 1.0 - std::fabs(k - center) / radius;
      if (v < 0) v = 0;
      w.push_back(v);
      total += v;
    }
    if (w.empty() || total <= 0) {
      tap.start = std::min(std::max(static_cast<int>(std::lround(center)), 0), in - 1);
      w.assign(1, 1.0);
      total = 1.0;
    }
    for (double v : w) tap.weights.push_back(static_cast<float>(v / total));
    taps[static_cast<size_t>(o)] = std::move(tap);
  }
  return taps;
}

}  // namespace detail

inline ImageF resize_bilinear(const ImageF& src, int h, int w) {
  if (h < 1 || w < 1) throw ConfigError("resize: degenerate target size");
  auto ytaps = detail::triangle_taps(src.height, h);
  auto xtaps = detail::triangle_taps(src.width, w);
  // rows first, then columns
  ImageF mid(h, src.width, src.channels);
  for (int c = 0; c < src.channels; ++c)
    for (int y = 0; y < h; ++y) {
      const auto& t = ytaps[static_cast<size_t>(y)];
      for (int x = 0; x < src.width; ++x) {
        float acc = 0;
        for (size_t k = 0; k < t.weights.size(); ++k)
          acc += t.weights[k] * src.at(c, t.start + static_cast<int>(k), x);
        mid.at(c, y, x) = acc;
      }
    }
  ImageF out(h, w, src.channels);
  for (int c = 0; c < src.channels; ++c)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const auto& t = xtaps[static_cast<size_t>(x)];
        float acc = 0;
        for (size_t k = 0; k < t.weights.size(); ++k)
          acc += t.weights[k] * mid.at(c, y, t.start + static_cast<int>(k));
        out.at(c, y, x) = acc;
      }
  return out;
}

namespace detail {

inline void png_put_u32(std::string& s, uint32_t v) {
  s.push_back(static_cast<char>((v >> 24) & 0xff));
  s.push_back(static_cast<char>((v >> 16) & 0xff));
  s.push_back(static_cast<char>((v >> 8) & 0xff));
  s.push_back(static_cast<char>(v & 0xff));
}

inline uint32_t png_get_u32(const unsigned char* p) {
  return (static_cast<uint32_t>(p[0]) << 24) | (static_cast<uint32_t>(p[1]) << 16) |
         (static_cast<uint32_t>(p[2]) << 8) | static_cast<uint32_t>(p[3]);
}

inline void png_chunk(std::string& out, const char type[4], const std::string& body) {
  png_put_u32(out, static_cast<uint32_t>(body.size()));
  size_t start = out.size();
  out.append(type, 4);
  out += body;
  uLong crc = crc32(0L, Z_NULL, 0);
  crc = crc32(crc, reinterpret_cast<const Bytef*>(out.data() + start),
              static_cast<uInt>(out.size() - start));
  png_put_u32(out, static_cast<uint32_t>(crc));
}

inline std::string zlib_deflate(const std::string& raw) {
  uLongf bound = compressBound(static_cast<uLong>(raw.size()));
  std::string out(bound, '\0');
  if (compress2(reinterpret_cast<Bytef*>(out.data()), &bound,
                reinterpret_cast<const Bytef*>(raw.data()),
                static_cast<uLong>(raw.size()), 6) != Z_OK)
    throw IoError("png: deflate failed");
  out.resize(bound);
  return out;
}

inline std::string zlib_inflate(const unsigned char* data, size_t size,
                                size_t expected) {
  std::string out(expected, '\0');
  uLongf dlen = static_cast<uLongf>(expected);
  if (uncompress(reinterpret_cast<Bytef*>(out.data()), &dlen, data,
                 static_cast<uLong>(size)) != Z_OK ||
      dlen != expected)
    throw IoError("png: inflate failed");
  return out;
}

}  // namespace detail

/// 8-bit grayscale (1 channel) or RGB (3 channels) PNG.
inline void write_png(const std::string& path, const ImageF& img) {
  if (img.channels != 1 && img.channels != 3)
    throw ConfigError("write_png: 1 or 3 channels only");
  std::string out("\x89PNG\r\n\x1a\n", 8);
  std::string ihdr;
  detail::png_put_u32(ihdr, static_cast<uint32_t>(img.width));
  detail::png_put_u32(ihdr, static_cast<uint32_t>(img.height));
  ihdr.push_back(8);  // bit depth
  ihdr.push_back(img.channels == 1 ? 0 : 2);
  ihdr.push_back(0);
  ihdr.push_back(0);
  ihdr.push_back(0);
  detail::png_chunk(out, "IHDR", ihdr);

  std::string raw;
  raw.reserve(static_cast<size_t>(img.height) * (1 + img.width * img.channels));
  for (int y = 0; y < img.height; ++y) {
    raw.push_back(0);  // filter: none
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < img.channels; ++c) {
        float v = img.at(c, y, x);
        v = v < 0.f ? 0.f : (v > 1.f ? 1.f : v);
        raw.push_back(static_cast<char>(
            static_cast<unsigned char>(std::lrint(v * 255.0f))));
      }
  }
  detail::png_chunk(out, "IDAT", detail::zlib_deflate(raw));
  detail::png_chunk(out, "IEND", "");

  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for writing: " + path);
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw IoError("short write: " + path);
}

inline ImageF read_png(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open: " + path);
  std::vector<unsigned char> buf((std::istreambuf_iterator<char>(f)),
                                 std::istreambuf_iterator<char>());
  if (buf.size() < 8 || std::memcmp(buf.data(), "\x89PNG\r\n\x1a\n", 8) != 0)
    throw IoError("not a PNG file: " + path);
  size_t pos = 8;
  int w = 0, h = 0, channels = 0, bit_depth = 0;
  std::string idat;
  while (pos + 12 <= buf.size()) {
    uint32_t len = detail::png_get_u32(buf.data() + pos);
    const unsigned char* type = buf.data() + pos + 4;
    const unsigned char* body = buf.data() + pos + 8;
    if (pos + 12 + len > buf.size()) throw IoError("truncated PNG: " + path);
    if (std::memcmp(type, "IHDR", 4) == 0) {
      w = static_cast<int>(detail::png_get_u32(body));
      h = static_cast<int>(detail::png_get_u32(body + 4));
      bit_depth = body[8];
      int color = body[9];
      if (bit_depth != 8 || (color != 0 && color != 2) || body[12] != 0)
        throw IoError("unsupported PNG variant (need 8-bit gray or RGB): " + path);
      channels = color == 0 ? 1 : 3;
    } else if (std::memcmp(type, "IDAT", 4) == 0) {
      idat.append(reinterpret_cast<const char*>(body), len);
    } else if (std::memcmp(type, "IEND", 4) == 0) {
      break;
    }
    pos += 12 + len;
  }
  if (w <= 0 || h <= 0 || idat.empty()) throw IoError("malformed PNG: " + path);
  size_t stride = static_cast<size_t>(w) * channels;
  std::string raw = detail::zlib_inflate(
      reinterpret_cast<const unsigned char*>(idat.data()), idat.size(),
      static_cast<size_t>(h) * (stride + 1));

  ImageF img(h, w, channels);
  std::vector<unsigned char> prev(stride, 0), cur(stride);
  for (int y = 0; y < h; ++y) {
    const unsigned char* row =
        reinterpret_cast<const unsigned char*>(raw.data()) +
        static_cast<size_t>(y) * (stride + 1);
    unsigned char filter = row[0];
    for (size_t i = 0; i < stride; ++i) {
      unsigned char x = row[1 + i];
      unsigned a = i >= static_cast<size_t>(channels) ? cur[i - channels] : 0;
      unsigned b = prev[i];
      unsigned c = i >= static_cast<size_t>(channels) ? prev[i - channels] : 0;
      unsigned v;
      switch (filter) {
        case 0: v = x; break;
        case 1: v = x + a; break;
        case 2: v = x + b; break;
        case 3: v = x + (a + b) / 2; break;
        case 4: {
          int p = static_cast<int>(a) + static_cast<int>(b) - static_cast<int>(c);
          int pa = std::abs(p - static_cast<int>(a));
          int pb = std::abs(p - static_cast<int>(b));
          int pc = std::abs(p - static_cast<int>(c));
          unsigned pred = (pa <= pb && pa <= pc) ? a : (pb <= pc ? b : c);
          v = x + pred;
          break;
        }
        default: throw IoError("unknown PNG filter: " + path);
      }
      cur[i] = static_cast<unsigned char>(v & 0xff);
    }
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < channels; ++c)
        img.at(c, y, x) = cur[static_cast<size_t>(x) * channels + c] / 255.0f;
    std::swap(prev, cur);
  }
  return img;
}

/// Horizontal strip of equally sized images separated by light gutters.
inline ImageF montage_row(const std::vector<ImageF>& imgs, int gutter = 2) {
  if (imgs.empty()) throw ConfigError("montage: no images");
  int h = imgs[0].height, w = imgs[0].width, c = imgs[0].channels;
  for (const auto& im : imgs)
    if (im.height != h || im.width != w || im.channels != c)
      throw ConfigError("montage: images must share one shape");
  int total_w = static_cast<int>(imgs.size()) * w +
                (static_cast<int>(imgs.size()) - 1) * gutter;
  ImageF out(h, total_w, c);
  for (auto& p : out.pixels) p = 0.5f;
  int x0 = 0;
  for (const auto& im : imgs) {
    for (int ch = 0; ch < c; ++ch)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) out.at(ch, y, x0 + x) = im.at(ch, y, x);
    x0 += w + gutter;
  }
  return out;
}

}  // namespace tractflow
