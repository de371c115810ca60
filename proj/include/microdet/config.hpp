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
#ifndef MICRODET_CONFIG_HPP
#define MICRODET_CONFIG_HPP

#include <cstdint>
#include <string>

#include "microdet/assign.hpp"
#include "microdet/detector.hpp"
#include "microdet/ini.hpp"
#include "microdet/losses.hpp"
#include "microdet/optimizer.hpp"
#include "microdet/synth.hpp"

namespace microdet {

struct OptimConfig {
  MuSGDConfig musgd;
  int warmup_epochs = 1;
  double final_lr_fraction = 0.01;
};

struct LossConfig {
  double kd_lambda = 0.5;
  double kd_temperature = 3.0;
  bool stal = true;
  AssignConfig assign;  // STAL constants and alignment metric
  WiouParams wiou;
  double wiou_momentum = 0.99;
  ProgSchedule prog;  // total_epochs is taken from [train]
  double o2o_weight = 1.0;
};

struct DataConfig {
  std::string dir = "data";
  DatasetSpec dataset;
};

enum class DecodeMode { o2o, nms };

std::string decode_name(DecodeMode m);
DecodeMode parse_decode(const std::string& s);

struct TrainConfig {
  int epochs = 30;
  int batch_size = 8;
  std::uint64_t seed = 0;
  int checkpoint_every = 0;  // 0 writes only final and best
  bool augment = true;       // random horizontal flips
  int eval_every = 1;
  double conf_thresh = 0.001;
  double nms_iou = 0.6;
  int max_detections = 100;
};

struct RunConfig {
  ModelConfig model;
  OptimConfig optim;
  LossConfig loss;
  DataConfig data;
  TrainConfig train;

  void validate() const;
  /// Decode used for validation: one-to-one when the model has that head.
  DecodeMode default_decode() const { return model.o2o_head ? DecodeMode::o2o : DecodeMode::nms; }
};

/// Reads every section over the defaults. Unknown sections or keys throw
/// ConfigError naming them.
RunConfig run_config_from_ini(const IniDocument& doc);
RunConfig load_run_config(const std::filesystem::path& path);
IniDocument run_config_to_ini(const RunConfig& cfg);

/// MICRODET_SEED, when set, replaces both the data and the training seed.
void apply_seed_override(RunConfig& cfg);

void model_to_ini(const ModelConfig& m, IniDocument& doc, const std::string& section = "model");
ModelConfig model_from_ini(const IniDocument& doc, const std::string& section = "model", ModelConfig base = {});

}  // namespace microdet

#endif  // MICRODET_CONFIG_HPP
