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

#ifndef MICRODET_ASSIGN_HPP
#define MICRODET_ASSIGN_HPP

#include <vector>

#include "microdet/box.hpp"
#include "microdet/detector.hpp"

namespace microdet {

/// Location of one prediction cell. Cells are numbered level by level in the
/// order of the branch, row-major inside a level.
struct CellRef {
  int level_index = 0;
  int stride = 8;
  int gy = 0, gx = 0;
  double cx_px = 0, cy_px = 0;  // cell center in input pixels
};

/// Boxes and class logits of every cell of one image, taken from one branch.
struct DecodedImage {
  int input_size = 0;
  int num_classes = 1;
  std::vector<CellRef> cells;
  std::vector<BBox> boxes;     // normalized, unclamped
  std::vector<float> logits;   // cells x num_classes

  std::size_t size() const { return cells.size(); }
  float logit(std::size_t cell, int cls) const { return logits[cell * static_cast<std::size_t>(num_classes) + static_cast<std::size_t>(cls)]; }
  double score(std::size_t cell, int cls) const;
};

/// Decodes a branch of `preds` for every image of the batch. No graph is recorded.
std::vector<DecodedImage> decode_branch(const RawPredictions& preds, const std::vector<LevelOutput>& branch);

struct AssignConfig {
  double score_power = 0.5;  // exponent on the class score in the alignment metric
  double iou_power = 6.0;    // exponent on IoU
  int topk = 10;
  double stal_alpha = 1.0;
  double stal_small_area = 400.0;  // px^2
};

struct AssignedPair {
  int cell = 0;
  int gt = 0;
  double stal_weight = 1.0;
  double alignment = 0.0;
};

/// Per-image assignment, pairs sorted by cell index.
struct Assignment {
  std::vector<AssignedPair> pairs;
};

/// 1 + alpha * max(0, 1 - area_px / small_area).
double stal_weight(const BBox& gt, int image_size, double alpha = 1.0, double small_area = 400.0);

/// Cells whose center lies inside the gt box grown to at least half a stride
/// around its center.
bool is_candidate(const CellRef& cell, const BBox& gt, int input_size);

/// score^a * IoU^b for one (cell, gt) pair.
double alignment_metric(const DecodedImage& img, std::size_t cell, const GroundTruth& gt, const AssignConfig& cfg);

Assignment assign_o2m(const DecodedImage& img, const std::vector<GroundTruth>& gts, const AssignConfig& cfg = {});
Assignment assign_o2o(const DecodedImage& img, const std::vector<GroundTruth>& gts, const AssignConfig& cfg = {});

/// Every cell whose best class score exceeds conf_thresh, highest score first.
std::vector<Detection> decode_nms_free(const DecodedImage& img, double conf_thresh);
/// Greedy class-wise NMS over the same candidate set.
std::vector<Detection> decode_with_nms(const DecodedImage& img, double conf_thresh, double iou_thresh);

/// Convenience overloads decoding the inference branch of one image.
std::vector<Detection> decode_nms_free(const RawPredictions& preds, double conf_thresh, int image = 0);
std::vector<Detection> decode_with_nms(const RawPredictions& preds, double conf_thresh, double iou_thresh,
                                       int image = 0);

/// Greedy suppression over detections already sorted by descending score.
std::vector<Detection> nms(const std::vector<Detection>& sorted, double iou_thresh);

}  // namespace microdet

#endif  // MICRODET_ASSIGN_HPP
