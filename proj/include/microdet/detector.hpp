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

#ifndef MICRODET_DETECTOR_HPP
#define MICRODET_DETECTOR_HPP

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "microdet/checkpoint.hpp"
#include "microdet/nn.hpp"
#include "microdet/tensor.hpp"

namespace microdet {

enum class Level { P2 = 2, P3 = 3, P4 = 4 };

int level_stride(Level level);
std::string level_name(Level level);
Level parse_level(const std::string& name);

/// Side length, in feature cells, of an s-pixel target at `level`.
double feature_response_size(double target_pixels, Level level);

struct ModelConfig {
  int input_size = 128;
  double width_multiple = 0.5;
  double depth_multiple = 1.0;
  int num_classes = 1;
  std::vector<Level> levels{Level::P2, Level::P3, Level::P4};
  bool use_attention = true;
  bool use_dfl = false;
  int dfl_bins = 15;  // n: bins 0..n per box side
  bool o2o_head = true;
  bool o2o_shared = false;  // O2O reuses the O2M head weights

  void validate() const;
  bool has_level(Level l) const;
  /// Backbone stage widths for strides 2,4,8,16.
  std::vector<int> widths() const;
  int depth() const;
  int box_channels() const { return use_dfl ? 4 * (dfl_bins + 1) : 4; }
};

/// Raw head outputs of one pyramid level. `box` is [N,4,H,W] pre-activation
/// distances, or [N,4(n+1),H,W] bin logits when DFL is on; `cls` is
/// [N,num_classes,H,W] logits.
struct LevelOutput {
  Level level = Level::P3;
  int stride = 8;
  Tensorf box;
  Tensorf cls;

  int grid_h() const { return cls.dim(2); }
  int grid_w() const { return cls.dim(3); }
  int cells() const { return grid_h() * grid_w(); }
};

struct RawPredictions {
  int input_size = 0;
  int num_classes = 1;
  bool use_dfl = false;
  int dfl_bins = 15;
  std::vector<LevelOutput> o2m;
  std::vector<LevelOutput> o2o;  // empty when the model has no one-to-one branch

  int batch() const { return o2m.empty() ? 0 : o2m.front().cls.dim(0); }
  int total_cells() const;
  /// Branch used for inference: one-to-one when present.
  const std::vector<LevelOutput>& inference_branch() const { return o2o.empty() ? o2m : o2o; }
};

/// Expectation over the last axis: sum_i softmax(z)_i * i.
template <typename S>
Tensor<S> dfl_expectation(const Tensor<S>& bin_logits);

/// Per-side distances [N,4,H,W] in stride units for one level.
Tensorf decode_distances(const LevelOutput& level, bool use_dfl, int dfl_bins);

class Detector {
 public:
  Detector(ModelConfig cfg, std::uint64_t seed);
  ~Detector();
  Detector(Detector&&) noexcept;
  Detector& operator=(Detector&&) noexcept;

  RawPredictions forward(const Tensorf& images, bool training);

  const ModelConfig& config() const { return cfg_; }
  ParamList<float> parameters() const;  // trainable tensors and buffers
  std::size_t parameter_count() const;

  NamedTensors state() const;
  void load_state(const NamedTensors& tensors);
  void save(const std::filesystem::path& path) const;
  /// Reads a checkpoint including its embedded config.
  static Detector load(const std::filesystem::path& path);

 private:
  struct Impl;
  ModelConfig cfg_;
  std::unique_ptr<Impl> impl_;
};

NamedTensors encode_model_config(const ModelConfig& cfg);
ModelConfig decode_model_config(const NamedTensors& tensors);

}  // namespace microdet

#endif  // MICRODET_DETECTOR_HPP
