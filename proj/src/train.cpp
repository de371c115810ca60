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
#include "microdet/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <numeric>
#include <random>
#include <sstream>

#include "microdet/assign.hpp"
#include "microdet/error.hpp"
#include "microdet/losses.hpp"
#include "microdet/optimizer.hpp"

namespace microdet {

namespace fs = std::filesystem;

Tensorf stack_images(const std::vector<Sample>& samples, const std::vector<std::size_t>& order, std::size_t begin,
                     std::size_t end, const std::vector<char>& flip) {
  if (begin >= end || end > order.size()) throw Error("stack_images: empty or out-of-range batch");
  const Tensorf& first = samples.at(order[begin]).image;
  const int c = first.dim(0), h = first.dim(1), w = first.dim(2);
  const std::size_t plane = static_cast<std::size_t>(h) * static_cast<std::size_t>(w);
  const std::size_t per = static_cast<std::size_t>(c) * plane;
  std::vector<float> data((end - begin) * per);
  for (std::size_t b = begin; b < end; ++b) {
    const Sample& s = samples.at(order[b]);
    if (s.image.shape() != first.shape()) {
      throw ShapeError("image " + s.id + " has shape " + shape_str(s.image.shape()) + ", expected " +
                       shape_str(first.shape()));
    }
    const float* src = s.image.data().data();
    float* dst = data.data() + (b - begin) * per;
    const bool mirror = !flip.empty() && flip[b];
    if (!mirror) {
      std::copy(src, src + per, dst);
      continue;
    }
    for (std::size_t r = 0; r < static_cast<std::size_t>(c * h); ++r)
      std::reverse_copy(src + r * static_cast<std::size_t>(w), src + (r + 1) * static_cast<std::size_t>(w),
                        dst + r * static_cast<std::size_t>(w));
  }
  return Tensorf({static_cast<int>(end - begin), c, h, w}, std::move(data));
}

std::vector<GroundTruth> mirror_boxes(const std::vector<GroundTruth>& gts) {
  std::vector<GroundTruth> out = gts;
  for (auto& g : out) g.box.cx = 1.0 - g.box.cx;
  return out;
}

namespace {

const std::vector<LevelOutput>& decode_source(const RawPredictions& preds, DecodeMode mode) {
  if (mode == DecodeMode::o2o) {
    if (preds.o2o.empty()) throw ConfigError("decode o2o needs a model with a one-to-one head");
    return preds.o2o;
  }
  return preds.o2m;
}

}  // namespace

std::vector<Detection> decode_image(const DecodedImage& img, DecodeMode mode, double conf_thresh, double nms_iou,
                                    int max_detections) {
  const auto cap = static_cast<std::size_t>(max_detections);
  std::vector<Detection> dets = decode_nms_free(img, conf_thresh);
  if (mode == DecodeMode::nms) {
    if (dets.size() > 10 * cap) dets.resize(10 * cap);
    dets = nms(dets, nms_iou);
  }
  if (dets.size() > cap) dets.resize(cap);
  return dets;
}

const std::vector<LevelOutput>& decode_branch_for(const RawPredictions& preds, DecodeMode mode) {
  return decode_source(preds, mode);
}

std::vector<std::vector<Detection>> detect(Detector& model, const std::vector<Sample>& samples, DecodeMode mode,
                                           double conf_thresh, double nms_iou, int max_detections, int batch_size) {
  NoGradGuard no_grad;
  std::vector<std::vector<Detection>> out;
  out.reserve(samples.size());
  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t b = 0; b < samples.size(); b += static_cast<std::size_t>(batch_size)) {
    const std::size_t e = std::min(samples.size(), b + static_cast<std::size_t>(batch_size));
    const RawPredictions preds = model.forward(stack_images(samples, order, b, e), false);
    for (const DecodedImage& img : decode_branch(preds, decode_source(preds, mode)))
      out.push_back(decode_image(img, mode, conf_thresh, nms_iou, max_detections));
  }
  return out;
}

EvalReport evaluate_model(Detector& model, const std::vector<Sample>& samples, DecodeMode mode,
                          const TrainConfig& settings) {
  const auto dets = detect(model, samples, mode, settings.conf_thresh, settings.nms_iou, settings.max_detections);
  std::vector<std::vector<GroundTruth>> gts;
  gts.reserve(samples.size());
  for (const auto& s : samples) gts.push_back(s.gts);
  EvalConfig ec;
  ec.image_size = model.config().input_size;
  return evaluate(dets, gts, ec);
}

double lr_factor(int step, int steps_per_epoch, const RunConfig& cfg) {
  const int total = cfg.train.epochs * steps_per_epoch;
  const int warm = cfg.optim.warmup_epochs * steps_per_epoch;
  const double w = warm > 0 ? std::min(1.0, double(step + 1) / warm) : 1.0;
  return w * cosine_factor(step, total, cfg.optim.final_lr_fraction);
}

std::string loss_csv(const std::vector<EpochLog>& log) {
  std::ostringstream os;
  os << "epoch,box_loss,cls_loss,kd_loss,total,lr\n";
  char buf[256];
  for (const auto& e : log) {
    std::snprintf(buf, sizeof buf, "%d,%.9g,%.9g,%.9g,%.9g,%.9g\n", e.epoch, e.box_loss, e.cls_loss, e.kd_loss,
                  e.total, e.lr);
    os << buf;
  }
  return os.str();
}

namespace {

void check_inputs(const std::vector<Sample>& samples, int size, const char* split) {
  for (const auto& s : samples) {
    if (s.image.rank() != 3 || s.image.dim(0) != 3 || s.image.dim(1) != size || s.image.dim(2) != size) {
      throw ConfigError(std::string(split) + " image " + s.id + " has shape " + shape_str(s.image.shape()) +
                        " but model.input_size is " + std::to_string(size));
    }
  }
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  f << text;
  if (!f) throw Error("cannot write " + path.string());
}

}  // namespace

TrainResult train_detector(Detector& model, const std::vector<Sample>& train, const std::vector<Sample>& val,
                           const RunConfig& cfg, Detector* teacher, const TrainOutputs& out) {
  cfg.validate();
  const ModelConfig& mc = model.config();
  if (train.empty()) throw Error("training split is empty");
  check_inputs(train, mc.input_size, "train");
  check_inputs(val, mc.input_size, "val");
  if (teacher) {
    if (teacher->config().input_size != mc.input_size) throw ConfigError("teacher input size differs from the student's");
    if (teacher->config().num_classes != mc.num_classes) throw ConfigError("teacher class count differs from the student's");
    bool shared = false;
    for (Level l : mc.levels) shared = shared || teacher->config().has_level(l);
    if (!shared) throw ConfigError("teacher and student share no pyramid level");
  }
  if (!out.dir.empty()) fs::create_directories(out.dir);

  const double lambda = teacher ? cfg.loss.kd_lambda : 0.0;
  AssignConfig assign = cfg.loss.assign;
  if (!cfg.loss.stal) assign.stal_alpha = 0.0;
  ProgSchedule prog = cfg.loss.prog;
  prog.total_epochs = cfg.train.epochs;
  WiouState wiou;
  wiou.momentum = cfg.loss.wiou_momentum;

  MuSGD<float> opt(model.parameters(), cfg.optim.musgd);
  const std::size_t n = train.size(), bs = static_cast<std::size_t>(cfg.train.batch_size);
  const int steps_per_epoch = static_cast<int>((n + bs - 1) / bs);
  std::mt19937_64 rng(cfg.train.seed * 0x9E3779B97F4A7C15ULL + 0x5851F42D4C957F2DULL);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});

  TrainResult result;
  int step = 0;
  for (int epoch = 0; epoch < cfg.train.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<char> flip(n, 0);
    if (cfg.train.augment) {
      std::bernoulli_distribution coin(0.5);
      for (auto& f : flip) f = coin(rng) ? 1 : 0;
    }
    double sum_box = 0, sum_cls = 0, sum_kd = 0, sum_total = 0, last_lr = 0;
    for (std::size_t b = 0; b < n; b += bs) {
      const std::size_t e = std::min(n, b + bs);
      const Tensorf x = stack_images(train, order, b, e, flip);
      std::vector<std::vector<GroundTruth>> gts;
      for (std::size_t i = b; i < e; ++i) {
        const auto& g = train[order[i]].gts;
        gts.push_back(flip[i] ? mirror_boxes(g) : g);
      }

      const RawPredictions preds = model.forward(x, true);
      auto targets_for = [&](const std::vector<LevelOutput>& branch, bool one_to_one) {
        const auto decoded = decode_branch(preds, branch);
        std::vector<ImageTargets> t(decoded.size());
        for (std::size_t i = 0; i < decoded.size(); ++i) {
          t[i].gts = gts[i];
          t[i].assignment = one_to_one ? assign_o2o(decoded[i], gts[i], assign) : assign_o2m(decoded[i], gts[i], assign);
        }
        return t;
      };
      TaskLoss task = task_loss(preds, preds.o2m, targets_for(preds.o2m, false), prog, epoch, wiou.mean_liou, cfg.loss.wiou);
      double box = task.parts.box_loss, cls = task.parts.cls_loss;
      if (!preds.o2o.empty()) {
        const float w = static_cast<float>(cfg.loss.o2o_weight);
        TaskLoss one = task_loss(preds, preds.o2o, targets_for(preds.o2o, true), prog, epoch, wiou.mean_liou, cfg.loss.wiou);
        task.total = add(task.total, scale(one.total, w));
        box += w * one.parts.box_loss;
        cls += w * one.parts.cls_loss;
      }
      Tensorf objective = task.total;
      double kd = 0;
      if (teacher) {
        RawPredictions soft;
        {
          NoGradGuard no_grad;
          soft = teacher->forward(x, false);
        }
        Tensorf kd_t = kd_loss(preds.inference_branch(), soft.inference_branch(), static_cast<float>(cfg.loss.kd_temperature));
        kd = kd_t.item();
        objective = total_loss(task.total, kd_t, static_cast<float>(lambda));
      }
      const double total = objective.item();
      if (!std::isfinite(total)) {
        char parts[128];
        std::snprintf(parts, sizeof parts, " (box %g, cls %g, kd %g)", box, cls, kd);
        throw Error("non-finite loss at epoch " + std::to_string(epoch + 1) + ", step " + std::to_string(step) + parts);
      }

      opt.zero_grad();
      backward(objective);
      const double f = lr_factor(step, steps_per_epoch, cfg);
      opt.step(f);
      last_lr = cfg.optim.musgd.sgd_lr * f;
      ++step;
      if (task.batch_mean_liou >= 0) wiou.update(task.batch_mean_liou);

      sum_box += box;
      sum_cls += cls;
      sum_kd += kd;
      sum_total += total;
    }
    EpochLog row;
    row.epoch = epoch + 1;
    row.box_loss = sum_box / steps_per_epoch;
    row.cls_loss = sum_cls / steps_per_epoch;
    row.kd_loss = sum_kd / steps_per_epoch;
    row.total = sum_total / steps_per_epoch;
    row.lr = last_lr;

    const bool last = epoch + 1 == cfg.train.epochs;
    if (!val.empty() && ((epoch + 1) % cfg.train.eval_every == 0 || last)) {
      const EvalReport rep = evaluate_model(model, val, cfg.default_decode(), cfg.train);
      row.val_map50 = rep.map50;
      if (rep.map50 > result.best_map50) {
        result.best_map50 = rep.map50;
        result.best_epoch = epoch + 1;
        if (!out.dir.empty()) model.save(out.dir / "best.mdt");
      }
    }
    result.log.push_back(row);
    if (!out.dir.empty()) {
      write_text(out.dir / "loss.csv", loss_csv(result.log));
      if (cfg.train.checkpoint_every > 0 && (epoch + 1) % cfg.train.checkpoint_every == 0) {
        char name[32];
        std::snprintf(name, sizeof name, "epoch%03d.mdt", epoch + 1);
        model.save(out.dir / name);
      }
    }
    if (out.log_progress) {
      std::fprintf(stderr, "epoch %d/%d box %.4f cls %.4f kd %.4f total %.4f lr %.5f", row.epoch, cfg.train.epochs,
                   row.box_loss, row.cls_loss, row.kd_loss, row.total, row.lr);
      if (row.val_map50 >= 0) std::fprintf(stderr, " val_map50 %.4f", row.val_map50);
      std::fprintf(stderr, "\n");
    }
  }
  if (!out.dir.empty()) {
    model.save(out.dir / "final.mdt");
    if (result.best_epoch == 0) model.save(out.dir / "best.mdt");
  }
  return result;
}

}  // namespace microdet
