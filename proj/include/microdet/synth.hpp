/*
 * Copyright 2026 The microdet Authors. All Rights Reserved.
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */
#ifndef MICRODET_SYNTH_HPP
#define MICRODET_SYNTH_HPP

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "microdet/box.hpp"
#include "microdet/ini.hpp"
#include "microdet/tensor.hpp"

namespace microdet {

enum class Condition { clear = 0, backlight = 1, fog = 2, dusk = 3 };

std::string condition_name(Condition c);
Condition parse_condition(const std::string& name);

struct SynthConfig {
  int image_size = 128;
  int min_targets = 1;
  int max_targets = 4;
  double min_target_px = 4;   // longer box side
  double max_target_px = 24;
  double small_px = 20;
  double small_fraction = 0.75;  // share of targets drawn below small_px
  int min_distractors = 0;
  int max_distractors = 4;
  std::vector<double> condition_weights{1, 1, 1, 1};  // clear, backlight, fog, dusk

  void validate() const;
};

struct SceneMeta {
  std::uint64_t seed = 0;
  std::vector<double> target_px;  // longer side of each target, pixels
  int distractor_count = 0;
  Condition condition = Condition::clear;
};

struct Scene {
  Tensorf image;  // [3,H,W] in [0,1]
  std::vector<GroundTruth> gts;
  SceneMeta meta;
};

/// Sky scene with small multi-rotor silhouettes (class 0) and unlabeled
/// clutter: bird-like blobs, clouds and building edges.
Scene generate_scene(std::uint64_t seed, const SynthConfig& cfg);
/// The image of generate_scene(seed, cfg) with the targets left out.
Tensorf render_background(std::uint64_t seed, const SynthConfig& cfg);

/// YOLO text labels: "class cx cy w h" per line, normalized.
void write_labels(const std::vector<GroundTruth>& gts, const std::filesystem::path& path);
std::vector<GroundTruth> read_labels(const std::filesystem::path& path);
std::vector<GroundTruth> parse_labels(const std::string& text, const std::string& source);

/// Binary 8-bit PPM (P6) of a [3,H,W] image.
void write_image_ppm(const Tensorf& image, const std::filesystem::path& path);
Tensorf read_image_ppm(const std::filesystem::path& path);

struct DatasetSpec {
  std::uint64_t seed = 0;
  int train = 1000;
  int val = 200;
  int test = 0;
  SynthConfig synth;
};

/// Seed of scene `index` in `split`: train scenes take seed .. seed+train-1,
/// val scenes the following `val` seeds, test scenes the `test` after those.
std::uint64_t scene_seed(const DatasetSpec& spec, const std::string& split, int index);

struct DatasetStats {
  int images = 0;
  int targets = 0;
  int small_targets = 0;  // longer side below SynthConfig::small_px
  int distractors = 0;
  std::array<int, 4> conditions{};  // indexed by Condition
};

/// images/{split}/NNNNNN.ppm, labels/{split}/NNNNNN.txt and dataset.cfg.
DatasetStats write_dataset(const std::filesystem::path& root, const DatasetSpec& spec);
DatasetSpec read_dataset_manifest(const std::filesystem::path& root);

void synth_to_ini(const SynthConfig& cfg, IniDocument& doc, const std::string& section);
SynthConfig synth_from_ini(const IniDocument& doc, const std::string& section, SynthConfig base = {});
std::vector<std::string> synth_keys();

struct Sample {
  std::string id;
  Tensorf image;
  std::vector<GroundTruth> gts;
};

/// FNV-1a 64 over the relative path and bytes of every regular file under
/// root, in sorted path order.
std::uint64_t dataset_hash(const std::filesystem::path& root);

std::vector<Sample> load_split(const std::filesystem::path& root, const std::string& split);

}  // namespace microdet

#endif  // MICRODET_SYNTH_HPP
