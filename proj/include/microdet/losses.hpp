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

#ifndef MICRODET_LOSSES_HPP
#define MICRODET_LOSSES_HPP

#include <array>
#include <vector>

#include "microdet/assign.hpp"
#include "microdet/box.hpp"
#include "microdet/detector.hpp"
#include "microdet/tensor.hpp"

namespace microdet {

struct WiouParams {
  double alpha = 1.9;  // focusing curve constants
  double delta = 3.0;
};

/// Wise-IoU v3 loss r * R * (1 - IoU). The enclosing-box size in R, the
/// outlier degree and hence r are treated as constants for differentiation.
double wiou_v3_loss(const BBox& pred, const BBox& gt, double running_mean_liou, const WiouParams& p = {});

/// Same value plus d loss / d (x1, y1, x2, y2) of the predicted box.
double wiou_v3_loss_grad(const BBox& pred, const BBox& gt, double running_mean_liou, const WiouParams& p,
                         std::array<double, 4>& d_corners);

/// The factors of the loss that carry no gradient, evaluated at one point.
struct WiouFrozen {
  double enclosing_sq = 1;  // W_enc^2 + H_enc^2
  double focus = 1;         // r
};

WiouFrozen wiou_frozen_terms(const BBox& pred, const BBox& gt, double running_mean_liou, const WiouParams& p = {});
/// The loss with its constant factors supplied; differentiating this in the
/// predicted box reproduces wiou_v3_loss_grad.
double wiou_v3_loss_frozen(const BBox& pred, const BBox& gt, const WiouFrozen& frozen);

/// Running mean of 1 - IoU over assigned pairs.
struct WiouState {
  double mean_liou = 1.0;
  double momentum = 0.99;
  void update(double batch_mean_liou);
};

/// Distribution focal loss for one box side: cross-entropy split between the
/// two integer bins around `target` (0 <= target <= n).
double dfl_loss(const std::vector<double>& bin_logits, double target);
/// Value plus d loss / d logits.
double dfl_loss_grad(const std::vector<double>& bin_logits, double target, std::vector<double>& d_logits);

struct ProgSchedule {
  double box_initial = 1.0, box_final = 2.0;
  double cls_initial = 1.0, cls_final = 0.5;
  int total_epochs = 1;

  double box_weight(int epoch) const;
  double cls_weight(int epoch) const;
};

struct LossBreakdown {
  double box_loss = 0, cls_loss = 0, kd_loss = 0;
  double task = 0;   // box_weight * box_loss + cls_weight * cls_loss
  double total = 0;  // (1 - lambda) * task + lambda * kd_loss
  double box_weight = 1, cls_weight = 1, lambda = 0;
};

/// Targets of one image for one branch.
struct ImageTargets {
  std::vector<GroundTruth> gts;
  Assignment assignment;
};

/// Geometry shared by the loss ops.
struct BranchLayout {
  int input_size = 0;
  int num_classes = 1;
  bool use_dfl = false;
  int dfl_bins = 15;
  std::vector<int> strides;  // per level, branch order
};

/// Stal-weighted mean over assigned pairs of WIoU v3 (plus the DFL term when
/// the layout uses bins). `batch_mean_liou` receives the unweighted mean of
/// 1 - IoU over the pairs, or is left untouched when there are none.
template <typename S>
Tensor<S> box_loss_op(const std::vector<Tensor<S>>& level_box, const BranchLayout& layout,
                      const std::vector<ImageTargets>& targets, double running_mean_liou, const WiouParams& p,
                      double* batch_mean_liou = nullptr);

/// Binary cross-entropy over all cells and classes, summed and divided by
/// max(1, number of assigned pairs).
template <typename S>
Tensor<S> cls_loss_op(const std::vector<Tensor<S>>& level_cls, const BranchLayout& layout,
                      const std::vector<ImageTargets>& targets);

/// T^2 * KL(softmax(z_s/T) || softmax(z_t/T)) over the class axis, averaged
/// over cells and summed over levels. Single-class logits are compared as the
/// two-way distribution (sigmoid(z/T), 1 - sigmoid(z/T)). Only the student
/// receives gradient.
template <typename S>
Tensor<S> kd_loss(const std::vector<Tensor<S>>& student, const std::vector<Tensor<S>>& teacher, S temperature);

/// Pairs student and teacher levels by pyramid level and runs kd_loss over the
/// intersection. Throws when the intersection is empty.
Tensorf kd_loss(const std::vector<LevelOutput>& student, const std::vector<LevelOutput>& teacher, float temperature);

struct TaskLoss {
  Tensorf total;  // differentiable box_weight * box + cls_weight * cls
  LossBreakdown parts;
  double batch_mean_liou = -1;  // < 0 when no pairs
};

BranchLayout layout_of(const RawPredictions& preds, const std::vector<LevelOutput>& branch);

TaskLoss task_loss(const RawPredictions& preds, const std::vector<LevelOutput>& branch,
                   const std::vector<ImageTargets>& targets, const ProgSchedule& schedule, int epoch,
                   double running_mean_liou, const WiouParams& p = {});

/// (1 - lambda) * task + lambda * kd.
double total_loss(const LossBreakdown& task, double kd, double lambda);
Tensorf total_loss(const Tensorf& task, const Tensorf& kd, float lambda);

}  // namespace microdet

#endif  // MICRODET_LOSSES_HPP
