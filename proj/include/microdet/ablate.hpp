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
#ifndef MICRODET_ABLATE_HPP
#define MICRODET_ABLATE_HPP

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "microdet/config.hpp"
#include "microdet/train.hpp"

namespace microdet {

/// baseline-P3, +P2, +P2+attention, final.
const std::vector<std::string>& ablation_variants();

/// The base config with the variant's architecture, decode and optimizer
/// switches applied. Everything else (width, budget, seeds) is kept.
RunConfig ablation_config(const RunConfig& base, const std::string& variant);

struct AblationRow {
  std::string variant;
  double map50 = 0, map5095 = 0, recall_lt16 = 0;
  double decode_median_us = 0;
  std::string dataset_hash;  // 16 hex digits
  double train_seconds = 0;
};

/// Median per-image decode time over `reps` timed runs cycling through
/// `samples`, using the config's default decode.
StageTiming time_decode(Detector& model, const std::vector<Sample>& samples, const RunConfig& cfg, int reps = 60);

/// Trains and evaluates every variant on the train/val splits of data_dir.
/// Each variant writes its run into out_dir/<variant>/ when out_dir is set.
std::vector<AblationRow> run_ablation(const RunConfig& base, const std::filesystem::path& data_dir,
                                      const std::filesystem::path& out_dir, bool progress = false);

std::string ablation_csv(const std::vector<AblationRow>& rows);

std::string hex64(std::uint64_t v);

}  // namespace microdet

#endif  // MICRODET_ABLATE_HPP
