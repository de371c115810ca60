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
#ifndef MICRODET_EVAL_HPP
#define MICRODET_EVAL_HPP

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "microdet/assign.hpp"
#include "microdet/box.hpp"
#include "microdet/detector.hpp"

namespace microdet {

struct EvalConfig {
  int interpolation_points = 101;  // 101 (COCO) or 11 (VOC 2007)
  int image_size = 256;            // pixel scale for the size buckets
};

struct EvalReport {
  int num_images = 0, num_gts = 0, num_detections = 0;
  // All supplied detections, matched at IoU 0.5.
  double precision = 0, recall = 0;
  std::vector<std::pair<double, double>> ap_per_iou;  // (threshold, mAP) for 0.50:0.05:0.95
  double map50 = 0, map5095 = 0;
  // Recall by the longer gt side in pixels.
  double recall_lt16 = 0, recall_16_32 = 0, recall_ge32 = 0;
  int gts_lt16 = 0, gts_16_32 = 0, gts_ge32 = 0;
  std::vector<std::pair<double, double>> pr_curve;  // (recall, precision) at IoU 0.5, all classes pooled

  double ap_at(double iou_threshold) const;
  bool empty() const { return num_images == 0; }
};

/// Greedy matching per image in descending score: each detection takes the
/// unmatched same-class gt of highest IoU at or above the threshold. AP is the
/// mean interpolated precision over recall points, averaged over classes that
/// have ground truth.
EvalReport evaluate(const std::vector<std::vector<Detection>>& detections,
                    const std::vector<std::vector<GroundTruth>>& gts, const EvalConfig& cfg);

enum class ReportFormat { csv, svg };

/// CSV: "metric,value" rows. SVG: precision-recall curve and bucket recall bars.
void emit_report(const EvalReport& report, const std::filesystem::path& path, ReportFormat format);

struct StageTiming {
  std::string name;
  double median_us = 0, p95_us = 0;
  int reps = 0;
};

struct BenchReport {
  std::vector<StageTiming> stages;
  std::size_t candidates = 0;  // boxes above the confidence threshold
  int reps = 0;

  const StageTiming& stage(const std::string& name) const;
};

/// Median and nearest-rank p95 of microsecond samples.
StageTiming summarize_timings(std::string name, std::vector<double> us);

/// Times decode_nms_free and decode_with_nms on image 0 of `preds`, after
/// warm-up runs, with a monotonic clock.
BenchReport bench_decode(const RawPredictions& preds, double conf_thresh, double iou_thresh, int reps,
                         int warmup = 5);
/// Times Detector::forward in inference mode.
StageTiming bench_forward(Detector& model, const Tensorf& images, int reps, int warmup = 3);

/// One-image predictions on a {P2,P3,P4} grid with exactly `candidates`
/// cells scoring above 0.5 and the rest far below any useful threshold.
RawPredictions synthetic_predictions(int input_size, int candidates, std::uint64_t seed);

/// Restricts the calling thread to one logical processor. False when the
/// platform does not allow it.
bool pin_to_single_cpu();

void emit_bench_csv(const BenchReport& report, const std::filesystem::path& path);

}  // namespace microdet

#endif  // MICRODET_EVAL_HPP
