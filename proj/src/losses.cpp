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

#include "microdet/losses.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <Eigen/Core>
#include <unsupported/Eigen/AutoDiff>

namespace microdet {

namespace {

using AD = Eigen::AutoDiffScalar<Eigen::Vector4d>;

void check_wiou_inputs(const BBox& gt, double mean_liou) {
  if (!(gt.w > 0) || !(gt.h > 0)) throw Error("wiou_v3_loss: degenerate ground-truth box");
  if (!(mean_liou > 0)) throw Error("wiou_v3_loss: running mean of 1-IoU must be positive");
}

WiouFrozen frozen_terms(const BBox& pred, const BBox& gt, double mean_liou, const WiouParams& p) {
  check_wiou_inputs(gt, mean_liou);
  const double ew = std::max(pred.x2(), gt.x2()) - std::min(pred.x1(), gt.x1());
  const double eh = std::max(pred.y2(), gt.y2()) - std::min(pred.y1(), gt.y1());
  const double outlier = (1.0 - iou(pred, gt)) / mean_liou;
  return {ew * ew + eh * eh, outlier / (p.delta * std::pow(p.alpha, outlier - p.delta))};
}

template <typename T>
T wiou_with(const BoxT<T>& pred, const BBox& gt, const WiouFrozen& f) {
  using std::exp;
  const BoxT<T> g{T(gt.cx), T(gt.cy), T(gt.w), T(gt.h)};
  const T liou = T(1) - iou(pred, g);
  const T dx = pred.cx - g.cx, dy = pred.cy - g.cy;
  return T(f.focus) * exp((dx * dx + dy * dy) / T(f.enclosing_sq)) * liou;
}

double log_sum_exp(const std::vector<double>& z) {
  const double m = *std::max_element(z.begin(), z.end());
  double acc = 0;
  for (double v : z) acc += std::exp(v - m);
  return m + std::log(acc);
}

double softplus_d(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

double sigmoid_d(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

}  // namespace

WiouFrozen wiou_frozen_terms(const BBox& pred, const BBox& gt, double running_mean_liou, const WiouParams& p) {
  return frozen_terms(pred, gt, running_mean_liou, p);
}

double wiou_v3_loss_frozen(const BBox& pred, const BBox& gt, const WiouFrozen& frozen) {
  return wiou_with(pred, gt, frozen);
}

double wiou_v3_loss(const BBox& pred, const BBox& gt, double running_mean_liou, const WiouParams& p) {
  if (pred == gt) {
    check_wiou_inputs(gt, running_mean_liou);
    return 0.0;  // exact, independent of IoU round-off
  }
  return wiou_with(pred, gt, frozen_terms(pred, gt, running_mean_liou, p));
}

double wiou_v3_loss_grad(const BBox& pred, const BBox& gt, double running_mean_liou, const WiouParams& p,
                         std::array<double, 4>& d_corners) {
  const WiouFrozen f = frozen_terms(pred, gt, running_mean_liou, p);
  const AD x1(pred.x1(), 4, 0), y1(pred.y1(), 4, 1), x2(pred.x2(), 4, 2), y2(pred.y2(), 4, 3);
  const AD loss = wiou_with(BoxT<AD>::from_corners(x1, y1, x2, y2), gt, f);
  for (int i = 0; i < 4; ++i) {
    d_corners[static_cast<std::size_t>(i)] = loss.derivatives().size() ? loss.derivatives()[i] : 0.0;
  }
  return loss.value();
}

void WiouState::update(double batch_mean_liou) {
  mean_liou = momentum * mean_liou + (1.0 - momentum) * batch_mean_liou;
}

double dfl_loss_grad(const std::vector<double>& bin_logits, double target, std::vector<double>& d_logits) {
  const int bins = static_cast<int>(bin_logits.size());
  const int n = bins - 1;
  if (n < 1) throw Error("dfl_loss needs at least two bins");
  if (!(target >= 0.0 && target <= n)) {
    throw Error("dfl_loss target " + std::to_string(target) + " outside [0," + std::to_string(n) + "]");
  }
  const int left = std::min(static_cast<int>(std::floor(target)), n);
  const int right = std::min(left + 1, n);
  const double w_right = right == left ? 0.0 : target - left;
  const double w_left = 1.0 - w_right;
  const double lse = log_sum_exp(bin_logits);
  const auto L = static_cast<std::size_t>(left), R = static_cast<std::size_t>(right);
  const double loss = w_left * (lse - bin_logits[L]) + w_right * (lse - bin_logits[R]);
  d_logits.assign(bin_logits.size(), 0.0);
  for (std::size_t i = 0; i < bin_logits.size(); ++i) d_logits[i] = std::exp(bin_logits[i] - lse);
  d_logits[L] -= w_left;
  d_logits[R] -= w_right;
  return loss;
}

double dfl_loss(const std::vector<double>& bin_logits, double target) {
  std::vector<double> unused;
  return dfl_loss_grad(bin_logits, target, unused);
}

namespace {

double interpolate(double a, double b, int epoch, int total) {
  if (total <= 1) return a;
  const double f = std::clamp(static_cast<double>(epoch) / (total - 1), 0.0, 1.0);
  if (f >= 1.0) return b;
  return a + (b - a) * f;
}

}  // namespace

double ProgSchedule::box_weight(int epoch) const { return interpolate(box_initial, box_final, epoch, total_epochs); }
double ProgSchedule::cls_weight(int epoch) const { return interpolate(cls_initial, cls_final, epoch, total_epochs); }

// ---------------------------------------------------------------------------

namespace {

struct CellLocation {
  int level;
  int gy, gx;
};

class CellIndex {
 public:
  template <typename S>
  explicit CellIndex(const std::vector<Tensor<S>>& levels) {
    int offset = 0;
    for (const auto& t : levels) {
      if (t.rank() != 4) throw ShapeError("loss expects [N,C,H,W] level tensors, got " + shape_str(t.shape()));
      offsets_.push_back(offset);
      widths_.push_back(t.dim(3));
      offset += t.dim(2) * t.dim(3);
    }
    total_ = offset;
  }

  CellLocation locate(int cell) const {
    if (cell < 0 || cell >= total_) throw Error("assigned cell " + std::to_string(cell) + " out of range");
    const auto it = std::upper_bound(offsets_.begin(), offsets_.end(), cell);
    const int level = static_cast<int>(it - offsets_.begin()) - 1;
    const int local = cell - offsets_[static_cast<std::size_t>(level)];
    const int w = widths_[static_cast<std::size_t>(level)];
    return {level, local / w, local % w};
  }

 private:
  std::vector<int> offsets_, widths_;
  int total_ = 0;
};

}  // namespace

template <typename S>
Tensor<S> box_loss_op(const std::vector<Tensor<S>>& level_box, const BranchLayout& layout,
                      const std::vector<ImageTargets>& targets, double running_mean_liou, const WiouParams& p,
                      double* batch_mean_liou) {
  if (level_box.size() != layout.strides.size()) throw ShapeError("box loss: level count does not match layout");
  const CellIndex index(level_box);
  const int side_channels = layout.use_dfl ? layout.dfl_bins + 1 : 1;
  for (const auto& t : level_box) {
    if (t.dim(1) != 4 * side_channels) throw ShapeError("box loss: box channels " + std::to_string(t.dim(1)) + " do not match layout");
    if (t.dim(0) != static_cast<int>(targets.size())) throw ShapeError("box loss: batch size does not match targets");
  }
  const double size = layout.input_size;

  struct Entry {
    int level;
    std::size_t at;
    double g;
  };
  std::vector<Entry> grads;
  double weighted = 0, weight_sum = 0, liou_sum = 0;
  int pairs = 0;

  for (std::size_t b = 0; b < targets.size(); ++b) {
    for (const AssignedPair& pr : targets[b].assignment.pairs) {
      const CellLocation loc = index.locate(pr.cell);
      const Tensor<S>& t = level_box[static_cast<std::size_t>(loc.level)];
      const int h = t.dim(2), w = t.dim(3);
      const double s = layout.strides[static_cast<std::size_t>(loc.level)];
      const double cx = (loc.gx + 0.5) * s, cy = (loc.gy + 0.5) * s;
      auto at = [&](int ch) {
        return ((b * static_cast<std::size_t>(t.dim(1)) + static_cast<std::size_t>(ch)) * static_cast<std::size_t>(h) +
                static_cast<std::size_t>(loc.gy)) * static_cast<std::size_t>(w) + static_cast<std::size_t>(loc.gx);
      };
      const GroundTruth& gt = targets[b].gts.at(static_cast<std::size_t>(pr.gt));

      std::array<double, 4> dist{};
      std::array<std::vector<double>, 4> probs;  // DFL bin probabilities
      std::array<std::vector<double>, 4> logits;
      for (int k = 0; k < 4; ++k) {
        const auto ku = static_cast<std::size_t>(k);
        if (!layout.use_dfl) {
          dist[ku] = softplus_d(static_cast<double>(t.data()[at(k)]));
        } else {
          logits[ku].resize(static_cast<std::size_t>(side_channels));
          for (int i = 0; i < side_channels; ++i) logits[ku][static_cast<std::size_t>(i)] = t.data()[at(k * side_channels + i)];
          const double lse = log_sum_exp(logits[ku]);
          probs[ku].resize(logits[ku].size());
          double e = 0;
          for (std::size_t i = 0; i < logits[ku].size(); ++i) {
            probs[ku][i] = std::exp(logits[ku][i] - lse);
            e += probs[ku][i] * static_cast<double>(i);
          }
          dist[ku] = e;
        }
      }
      const BBox pred = BBox::from_corners((cx - dist[0] * s) / size, (cy - dist[1] * s) / size,
                                           (cx + dist[2] * s) / size, (cy + dist[3] * s) / size);
      std::array<double, 4> dc{};
      const double lw = wiou_v3_loss_grad(pred, gt.box, running_mean_liou, p, dc);
      liou_sum += 1.0 - iou(pred, gt.box);
      ++pairs;
      std::array<double, 4> d_dist{-dc[0] * s / size, -dc[1] * s / size, dc[2] * s / size, dc[3] * s / size};
      double term = lw;
      const double wgt = pr.stal_weight;

      std::array<std::vector<double>, 4> d_bins;
      if (layout.use_dfl) {
        const double n = layout.dfl_bins;
        const double limit = n - 0.01;
        const std::array<double, 4> target{(cx - gt.box.x1() * size) / s, (cy - gt.box.y1() * size) / s,
                                           (gt.box.x2() * size - cx) / s, (gt.box.y2() * size - cy) / s};
        for (std::size_t k = 0; k < 4; ++k) {
          term += 0.25 * dfl_loss_grad(logits[k], std::clamp(target[k], 0.0, limit), d_bins[k]);
        }
      }
      weighted += wgt * term;
      weight_sum += wgt;

      for (int k = 0; k < 4; ++k) {
        const auto ku = static_cast<std::size_t>(k);
        if (!layout.use_dfl) {
          grads.push_back({loc.level, at(k), wgt * d_dist[ku] * sigmoid_d(static_cast<double>(t.data()[at(k)]))});
        } else {
          for (int i = 0; i < side_channels; ++i) {
            const auto iu = static_cast<std::size_t>(i);
            const double g_exp = d_dist[ku] * probs[ku][iu] * (i - dist[ku]);
            grads.push_back({loc.level, at(k * side_channels + i), wgt * (g_exp + 0.25 * d_bins[ku][iu])});
          }
        }
      }
    }
  }
  if (batch_mean_liou && pairs > 0) *batch_mean_liou = liou_sum / pairs;
  const double norm = weight_sum > 0 ? 1.0 / weight_sum : 0.0;
  const double value = weighted * norm;
  return record<S>("box_loss", Shape{}, std::vector<S>{static_cast<S>(value)}, level_box,
                   [level_box, grads = std::move(grads), norm](const TensorStorage<S>& o) mutable {
                     const double g0 = static_cast<double>(o.grad[0]) * norm;
                     for (const Entry& e : grads) {
                       const Tensor<S>& t = level_box[static_cast<std::size_t>(e.level)];
                       if (!t.requires_grad()) continue;
                       t.grad_buffer()[e.at] += static_cast<S>(g0 * e.g);
                     }
                   });
}

template <typename S>
Tensor<S> cls_loss_op(const std::vector<Tensor<S>>& level_cls, const BranchLayout& layout,
                      const std::vector<ImageTargets>& targets) {
  const CellIndex index(level_cls);
  std::vector<Tensor<S>> target_maps;
  for (const auto& t : level_cls) {
    if (t.dim(1) != layout.num_classes) throw ShapeError("cls loss: class channels do not match layout");
    if (t.dim(0) != static_cast<int>(targets.size())) throw ShapeError("cls loss: batch size does not match targets");
    target_maps.emplace_back(t.shape(), S(0));
  }
  std::size_t positives = 0;
  for (std::size_t b = 0; b < targets.size(); ++b) {
    for (const AssignedPair& pr : targets[b].assignment.pairs) {
      const CellLocation loc = index.locate(pr.cell);
      Tensor<S>& m = target_maps[static_cast<std::size_t>(loc.level)];
      const int cls = targets[b].gts.at(static_cast<std::size_t>(pr.gt)).class_id;
      const std::size_t at = ((b * static_cast<std::size_t>(m.dim(1)) + static_cast<std::size_t>(cls)) *
                                  static_cast<std::size_t>(m.dim(2)) + static_cast<std::size_t>(loc.gy)) *
                                 static_cast<std::size_t>(m.dim(3)) + static_cast<std::size_t>(loc.gx);
      m.data()[at] = S(1);
      ++positives;
    }
  }
  Tensor<S> total;
  for (std::size_t l = 0; l < level_cls.size(); ++l) {
    auto s = sum(bce_with_logits(level_cls[l], target_maps[l]));
    total = total.defined() ? add(total, s) : s;
  }
  if (!total.defined()) return Tensor<S>::scalar(S(0));
  return scale(total, static_cast<S>(1.0 / static_cast<double>(std::max<std::size_t>(1, positives))));
}

template <typename S>
Tensor<S> kd_loss(const std::vector<Tensor<S>>& student, const std::vector<Tensor<S>>& teacher, S temperature) {
  if (student.size() != teacher.size()) throw ShapeError("kd_loss: student and teacher level counts differ");
  if (!(temperature > S(0))) throw Error("kd_loss: temperature must be positive");
  const double T = temperature;
  std::vector<std::vector<double>> grads(student.size());
  double total = 0;
  for (std::size_t l = 0; l < student.size(); ++l) {
    const Tensor<S>& zs = student[l];
    const Tensor<S>& zt = teacher[l];
    if (zs.shape() != zt.shape() || zs.rank() != 4) {
      throw ShapeError("kd_loss: level " + std::to_string(l) + " shapes " + shape_str(zs.shape()) + " and " +
                       shape_str(zt.shape()) + " differ");
    }
    const int n = zs.dim(0), c = zs.dim(1);
    const std::size_t hw = static_cast<std::size_t>(zs.dim(2)) * static_cast<std::size_t>(zs.dim(3));
    const double cells = static_cast<double>(n) * static_cast<double>(hw);
    const double per_cell = T * T / cells;
    auto& g = grads[l];
    g.assign(zs.numel(), 0.0);
    double level_sum = 0;
    std::vector<double> a(static_cast<std::size_t>(c)), bt(static_cast<std::size_t>(c));
    for (int b = 0; b < n; ++b)
      for (std::size_t i = 0; i < hw; ++i) {
        auto at = [&](int k) {
          return (static_cast<std::size_t>(b) * static_cast<std::size_t>(c) + static_cast<std::size_t>(k)) * hw + i;
        };
        if (c == 1) {
          const double x = zs.data()[at(0)] / T, y = zt.data()[at(0)] / T;
          const double ps = sigmoid_d(x);
          // log p = -softplus(-z), log(1-p) = -softplus(z)
          const double kl = ps * (softplus_d(-y) - softplus_d(-x)) + (1 - ps) * (softplus_d(y) - softplus_d(x));
          level_sum += kl;
          g[at(0)] = per_cell * ps * (1 - ps) * (x - y) / T;
          continue;
        }
        for (int k = 0; k < c; ++k) {
          a[static_cast<std::size_t>(k)] = zs.data()[at(k)] / T;
          bt[static_cast<std::size_t>(k)] = zt.data()[at(k)] / T;
        }
        const double la = log_sum_exp(a), lb = log_sum_exp(bt);
        double kl = 0;
        for (int k = 0; k < c; ++k) {
          const auto ku = static_cast<std::size_t>(k);
          kl += std::exp(a[ku] - la) * ((a[ku] - la) - (bt[ku] - lb));
        }
        level_sum += kl;
        for (int k = 0; k < c; ++k) {
          const auto ku = static_cast<std::size_t>(k);
          g[at(k)] = per_cell * std::exp(a[ku] - la) * ((a[ku] - la) - (bt[ku] - lb) - kl) / T;
        }
      }
    total += per_cell * level_sum;
  }
  return record<S>("kd_loss", Shape{}, std::vector<S>{static_cast<S>(total)}, student,
                   [student, grads = std::move(grads)](const TensorStorage<S>& o) mutable {
                     const double g0 = o.grad[0];
                     for (std::size_t l = 0; l < student.size(); ++l) {
                       if (!student[l].requires_grad()) continue;
                       auto& buf = student[l].grad_buffer();
                       for (std::size_t i = 0; i < buf.size(); ++i) buf[i] += static_cast<S>(g0 * grads[l][i]);
                     }
                   });
}

Tensorf kd_loss(const std::vector<LevelOutput>& student, const std::vector<LevelOutput>& teacher, float temperature) {
  std::vector<Tensorf> s, t;
  for (const auto& ls : student) {
    for (const auto& lt : teacher) {
      if (lt.level != ls.level) continue;
      s.push_back(ls.cls);
      t.push_back(lt.cls.detach());
    }
  }
  if (s.empty()) throw Error("kd_loss: student and teacher share no pyramid level");
  return kd_loss(s, t, temperature);
}

BranchLayout layout_of(const RawPredictions& preds, const std::vector<LevelOutput>& branch) {
  BranchLayout l{preds.input_size, preds.num_classes, preds.use_dfl, preds.dfl_bins, {}};
  for (const auto& lv : branch) l.strides.push_back(lv.stride);
  return l;
}

TaskLoss task_loss(const RawPredictions& preds, const std::vector<LevelOutput>& branch,
                   const std::vector<ImageTargets>& targets, const ProgSchedule& schedule, int epoch,
                   double running_mean_liou, const WiouParams& p) {
  const BranchLayout layout = layout_of(preds, branch);
  std::vector<Tensorf> boxes, classes;
  for (const auto& lv : branch) {
    boxes.push_back(lv.box);
    classes.push_back(lv.cls);
  }
  TaskLoss out;
  auto box = box_loss_op(boxes, layout, targets, running_mean_liou, p, &out.batch_mean_liou);
  auto cls = cls_loss_op(classes, layout, targets);
  const double wb = schedule.box_weight(epoch), wc = schedule.cls_weight(epoch);
  out.total = add(scale(box, static_cast<float>(wb)), scale(cls, static_cast<float>(wc)));
  out.parts.box_loss = box.item();
  out.parts.cls_loss = cls.item();
  out.parts.box_weight = wb;
  out.parts.cls_weight = wc;
  out.parts.task = wb * out.parts.box_loss + wc * out.parts.cls_loss;
  out.parts.total = out.parts.task;
  return out;
}

namespace {

void check_lambda(double lambda) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw Error("distillation weight must lie in [0,1], got " + std::to_string(lambda));
}

}  // namespace

double total_loss(const LossBreakdown& task, double kd, double lambda) {
  check_lambda(lambda);
  return (1.0 - lambda) * task.task + lambda * kd;
}

Tensorf total_loss(const Tensorf& task, const Tensorf& kd, float lambda) {
  check_lambda(lambda);
  return add(scale(task, 1.0f - lambda), scale(kd, lambda));
}

#define MICRODET_INSTANTIATE(S)                                                                                   \
  template Tensor<S> box_loss_op<S>(const std::vector<Tensor<S>>&, const BranchLayout&,                         \
                                    const std::vector<ImageTargets>&, double, const WiouParams&, double*);       \
  template Tensor<S> cls_loss_op<S>(const std::vector<Tensor<S>>&, const BranchLayout&,                         \
                                    const std::vector<ImageTargets>&);                                           \
  template Tensor<S> kd_loss<S>(const std::vector<Tensor<S>>&, const std::vector<Tensor<S>>&, S);

MICRODET_INSTANTIATE(float)
MICRODET_INSTANTIATE(double)

#undef MICRODET_INSTANTIATE

}  // namespace microdet
