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
#ifndef MICRODET_TRAIN_HPP
#define MICRODET_TRAIN_HPP

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "microdet/assign.hpp"
#include "microdet/config.hpp"
#include "microdet/detector.hpp"
#include "microdet/eval.hpp"
#include "microdet/synth.hpp"

namespace microdet {

struct EpochLog {
  int epoch = 0;  // 1-based
  double box_loss = 0, cls_loss = 0, kd_loss = 0, total = 0;
  double lr = 0;  // SGD-path learning rate at the end of the epoch
  double val_map50 = -1;  // < 0 when not evaluated
};

struct TrainResult {
  std::vector<EpochLog> log;
  double best_map50 = -1;
  int best_epoch = 0;
};

/// Where train_detector writes loss.csv, final.mdt, best.mdt and the
/// periodic epochNNN.mdt. An empty directory disables all file output.
struct TrainOutputs {
  std::filesystem::path dir;
  bool log_progress = false;  // one stderr line per epoch
};

/// [N,3,H,W] from samples[begin..end) of `order`, optionally mirrored per flip flag.
Tensorf stack_images(const std::vector<Sample>& samples, const std::vector<std::size_t>& order, std::size_t begin,
                     std::size_t end, const std::vector<char>& flip = {});

std::vector<GroundTruth> mirror_boxes(const std::vector<GroundTruth>& gts);

/// One-to-one decode keeps every cell above conf_thresh; nms decode runs
/// greedy suppression over the 10 * max_detections best. Both keep at most
/// max_detections.
std::vector<Detection> decode_image(const DecodedImage& img, DecodeMode mode, double conf_thresh, double nms_iou,
                                    int max_detections);
/// The o2o branch for o2o decode (ConfigError when absent), else the o2m branch.
const std::vector<LevelOutput>& decode_branch_for(const RawPredictions& preds, DecodeMode mode);

/// Inference over `samples` in batches; per-image detections, at most
/// max_detections each.
std::vector<std::vector<Detection>> detect(Detector& model, const std::vector<Sample>& samples, DecodeMode mode,
                                           double conf_thresh, double nms_iou, int max_detections,
                                           int batch_size = 16);

EvalReport evaluate_model(Detector& model, const std::vector<Sample>& samples, DecodeMode mode,
                          const TrainConfig& settings);

/// Trains `model` on `train`. With a teacher the objective is
/// (1 - kd_lambda) * task + kd_lambda * kd; without one kd_lambda is 0.
/// The best checkpoint is chosen by validation map50.
TrainResult train_detector(Detector& model, const std::vector<Sample>& train, const std::vector<Sample>& val,
                           const RunConfig& cfg, Detector* teacher = nullptr, const TrainOutputs& out = {});

/// "epoch,box_loss,cls_loss,kd_loss,total,lr" plus one row per epoch.
std::string loss_csv(const std::vector<EpochLog>& log);

/// Same arithmetic as train_detector's schedule: linear warmup times cosine.
double lr_factor(int step, int steps_per_epoch, const RunConfig& cfg);

}  // namespace microdet

#endif  // MICRODET_TRAIN_HPP
