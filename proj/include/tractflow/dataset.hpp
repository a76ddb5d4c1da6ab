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
#include <string>
#include <vector>

#include <json.hpp>

#include "tractflow/synth.hpp"

namespace tractflow::synth {

struct SweepGrid {
  int n_pos = 50, n_diam = 40;
  std::vector<double> f0_list{140.0};
  double pos_min = 0.25, pos_max = 0.95;
  double diam_min = 0.3, diam_max = 1.0;
  double duration_s = 0.5;
  int img_h = 32, img_w = 32, img_c = 1;
  int sample_rate = 22020;
};

struct ManifestInfo {
  std::string path;
  size_t count = 0;
};

namespace detail {
inline double lin(double lo, double hi, int i, int n) {
  return n > 1 ? lo + (hi - lo) * i / (n - 1) : lo;
}
}  // namespace detail

/// Grid sweep over the tongue controller: one WAV + PNG pair per grid point
/// plus one JSONL manifest row (id, tongue_position, tongue_diameter, f0,
/// wav_path, img_path; paths relative to out_dir). Sample synthesis is
/// parallel; the manifest is written in grid order, so outputs are
/// byte-stable run to run. The seed is accepted for interface stability;
/// generation is currently fully deterministic and ignores it.
inline ManifestInfo sweep_dataset(const SweepGrid& grid,
                                  const std::string& out_dir,
                                  uint64_t /*seed*/ = 0,
                                  const SynthConfig& scfg = {}) {
  int64_t total = static_cast<int64_t>(grid.n_pos) * grid.n_diam *
                  static_cast<int64_t>(grid.f0_list.size());
  if (total < 1) throw ConfigError("sweep grid is empty");

  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directory(out_dir, ec);
  if (!fs::is_directory(out_dir))
    throw IoError("cannot create output directory: " + out_dir);
  fs::create_directories(out_dir + "/wav");
  fs::create_directories(out_dir + "/img");

  struct Row {
    std::string id;
    double pos, diam, f0;
  };
  std::vector<Row> rows;
  rows.reserve(static_cast<size_t>(total));
  for (int ip = 0; ip < grid.n_pos; ++ip)
    for (int id = 0; id < grid.n_diam; ++id)
      for (size_t k = 0; k < grid.f0_list.size(); ++k) {
        char name[16];
        std::snprintf(name, sizeof name, "%06zu", rows.size());
        rows.push_back({name,
                        detail::lin(grid.pos_min, grid.pos_max, ip, grid.n_pos),
                        detail::lin(grid.diam_min, grid.diam_max, id, grid.n_diam),
                        grid.f0_list[k]});
      }

  std::vector<std::string> errors(rows.size());
  int64_t n = static_cast<int64_t>(rows.size());
#pragma omp parallel for schedule(static) num_threads(thread_count()) \
    if (thread_count() > 1)
  for (int64_t i = 0; i < n; ++i) {
    const Row& r = rows[static_cast<size_t>(i)];
    try {
      TongueParams p{r.pos, r.diam, r.f0};
      AreaFunction a = tongue_to_area(p, scfg);
      AudioClip clip =
          synthesize(a, r.f0, grid.duration_s, grid.sample_rate, scfg);
      write_wav(out_dir + "/wav/" + r.id + ".wav", clip);
      ImageF img = render_geometry(p, grid.img_h, grid.img_w, grid.img_c, scfg);
      write_png(out_dir + "/img/" + r.id + ".png", img);
    } catch (const std::exception& e) {
      errors[static_cast<size_t>(i)] = e.what();
    }
  }
  for (const auto& e : errors)
    if (!e.empty()) throw IoError("sweep failed: " + e);

  std::string manifest_path = out_dir + "/manifest.jsonl";
  std::ofstream mf(manifest_path);
  if (!mf) throw IoError("cannot write manifest: " + manifest_path);
  for (const Row& r : rows) {
    nlohmann::ordered_json j;
    j["id"] = r.id;
    j["tongue_position"] = r.pos;
    j["tongue_diameter"] = r.diam;
    j["f0"] = r.f0;
    j["wav_path"] = "wav/" + r.id + ".wav";
    j["img_path"] = "img/" + r.id + ".png";
    mf << j.dump() << "\n";
  }
  mf.close();
  if (!mf) throw IoError("short write: " + manifest_path);
  return {manifest_path, rows.size()};
}

}  // namespace tractflow::synth
