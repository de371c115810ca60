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

#include "microdet/assign.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>

namespace microdet {

namespace {

double sigmoid_d(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

}  // namespace

double DecodedImage::score(std::size_t cell, int cls) const { return sigmoid_d(logit(cell, cls)); }

std::vector<DecodedImage> decode_branch(const RawPredictions& preds, const std::vector<LevelOutput>& branch) {
  NoGradGuard no_grad;
  const int batch = branch.empty() ? 0 : branch.front().cls.dim(0);
  std::vector<DecodedImage> out(static_cast<std::size_t>(batch));
  for (auto& img : out) {
    img.input_size = preds.input_size;
    img.num_classes = preds.num_classes;
  }
  const double size = preds.input_size;
  for (std::size_t li = 0; li < branch.size(); ++li) {
    const LevelOutput& lv = branch[li];
    const Tensorf dist = decode_distances(lv, preds.use_dfl, preds.dfl_bins);
    const int h = lv.grid_h(), w = lv.grid_w(), hw = h * w, nc = preds.num_classes;
    const double s = lv.stride;
    for (int b = 0; b < batch; ++b) {
      DecodedImage& img = out[static_cast<std::size_t>(b)];
      const float* d = dist.data().data() + static_cast<std::size_t>(b) * 4 * static_cast<std::size_t>(hw);
      const float* z = lv.cls.data().data() + static_cast<std::size_t>(b) * static_cast<std::size_t>(nc * hw);
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          const int i = y * w + x;
          CellRef c{static_cast<int>(li), lv.stride, y, x, (x + 0.5) * s, (y + 0.5) * s};
          const double x1 = c.cx_px - d[i] * s, y1 = c.cy_px - d[hw + i] * s;
          const double x2 = c.cx_px + d[2 * hw + i] * s, y2 = c.cy_px + d[3 * hw + i] * s;
          img.cells.push_back(c);
          img.boxes.push_back(BBox::from_corners(x1 / size, y1 / size, x2 / size, y2 / size));
          for (int k = 0; k < nc; ++k) img.logits.push_back(z[k * hw + i]);
        }
    }
  }
  return out;
}

double stal_weight(const BBox& gt, int image_size, double alpha, double small_area) {
  const double area_px = std::max(0.0, gt.w) * std::max(0.0, gt.h) * double(image_size) * double(image_size);
  return 1.0 + alpha * std::max(0.0, 1.0 - area_px / small_area);
}

bool is_candidate(const CellRef& cell, const BBox& gt, int input_size) {
  const double half_w = std::max(gt.w * input_size / 2.0, cell.stride / 2.0);
  const double half_h = std::max(gt.h * input_size / 2.0, cell.stride / 2.0);
  return std::abs(cell.cx_px - gt.cx * input_size) <= half_w && std::abs(cell.cy_px - gt.cy * input_size) <= half_h;
}

double alignment_metric(const DecodedImage& img, std::size_t cell, const GroundTruth& gt, const AssignConfig& cfg) {
  const double s = img.score(cell, gt.class_id);
  const double overlap = iou(img.boxes[cell], gt.box);
  return std::pow(s, cfg.score_power) * std::pow(overlap, cfg.iou_power);
}

namespace {

struct Candidate {
  double t;
  int cell;
  int gt;
};

// Higher metric first, then lower cell index, then lower gt index.
bool before(const Candidate& a, const Candidate& b) {
  if (a.t != b.t) return a.t > b.t;
  if (a.cell != b.cell) return a.cell < b.cell;
  return a.gt < b.gt;
}

void check_classes(const DecodedImage& img, const std::vector<GroundTruth>& gts) {
  for (const auto& g : gts) {
    if (g.class_id < 0 || g.class_id >= img.num_classes) {
      throw Error("ground truth class " + std::to_string(g.class_id) + " outside [0," +
                  std::to_string(img.num_classes) + ")");
    }
  }
}

AssignedPair make_pair(const Candidate& c, const std::vector<GroundTruth>& gts, int size, const AssignConfig& cfg) {
  return {c.cell, c.gt, stal_weight(gts[static_cast<std::size_t>(c.gt)].box, size, cfg.stal_alpha, cfg.stal_small_area),
          c.t};
}

void sort_pairs(Assignment& a) {
  std::sort(a.pairs.begin(), a.pairs.end(), [](const AssignedPair& x, const AssignedPair& y) { return x.cell < y.cell; });
}

}  // namespace

Assignment assign_o2m(const DecodedImage& img, const std::vector<GroundTruth>& gts, const AssignConfig& cfg) {
  check_classes(img, gts);
  Assignment out;
  std::map<int, Candidate> owner;  // cell -> winning candidate
  for (std::size_t g = 0; g < gts.size(); ++g) {
    std::vector<Candidate> cands;
    for (std::size_t c = 0; c < img.size(); ++c) {
      if (!is_candidate(img.cells[c], gts[g].box, img.input_size)) continue;
      cands.push_back({alignment_metric(img, c, gts[g], cfg), static_cast<int>(c), static_cast<int>(g)});
    }
    std::sort(cands.begin(), cands.end(), before);
    if (static_cast<int>(cands.size()) > cfg.topk) cands.resize(static_cast<std::size_t>(std::max(cfg.topk, 0)));
    for (const auto& c : cands) {
      auto it = owner.find(c.cell);
      if (it == owner.end()) owner.emplace(c.cell, c);
      else if (c.t > it->second.t) it->second = c;
    }
  }
  for (const auto& [cell, c] : owner) out.pairs.push_back(make_pair(c, gts, img.input_size, cfg));
  sort_pairs(out);
  return out;
}

Assignment assign_o2o(const DecodedImage& img, const std::vector<GroundTruth>& gts, const AssignConfig& cfg) {
  check_classes(img, gts);
  Assignment out;
  std::vector<Candidate> cands;
  for (std::size_t g = 0; g < gts.size(); ++g)
    for (std::size_t c = 0; c < img.size(); ++c)
      if (is_candidate(img.cells[c], gts[g].box, img.input_size))
        cands.push_back({alignment_metric(img, c, gts[g], cfg), static_cast<int>(c), static_cast<int>(g)});
  std::sort(cands.begin(), cands.end(), before);
  std::vector<char> cell_used(img.size(), 0), gt_done(gts.size(), 0);
  for (const auto& c : cands) {
    if (cell_used[static_cast<std::size_t>(c.cell)] || gt_done[static_cast<std::size_t>(c.gt)]) continue;
    cell_used[static_cast<std::size_t>(c.cell)] = 1;
    gt_done[static_cast<std::size_t>(c.gt)] = 1;
    out.pairs.push_back(make_pair(c, gts, img.input_size, cfg));
  }
  // A gt whose candidates were all taken falls back to the nearest free cell.
  for (std::size_t g = 0; g < gts.size(); ++g) {
    if (gt_done[g]) continue;
    const double gx = gts[g].box.cx * img.input_size, gy = gts[g].box.cy * img.input_size;
    int best = -1;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < img.size(); ++c) {
      if (cell_used[c]) continue;
      const double dx = img.cells[c].cx_px - gx, dy = img.cells[c].cy_px - gy;
      const double d = (dx * dx + dy * dy) / (img.cells[c].stride * img.cells[c].stride);
      if (d < best_d) {
        best_d = d;
        best = static_cast<int>(c);
      }
    }
    if (best < 0) continue;
    cell_used[static_cast<std::size_t>(best)] = 1;
    gt_done[g] = 1;
    out.pairs.push_back(make_pair({alignment_metric(img, static_cast<std::size_t>(best), gts[g], cfg), best,
                                   static_cast<int>(g)},
                                  gts, img.input_size, cfg));
  }
  sort_pairs(out);
  return out;
}

std::vector<Detection> decode_nms_free(const DecodedImage& img, double conf_thresh) {
  std::vector<Detection> out;
  const int nc = img.num_classes;
  for (std::size_t c = 0; c < img.size(); ++c) {
    int best = 0;
    for (int k = 1; k < nc; ++k)
      if (img.logit(c, k) > img.logit(c, best)) best = k;
    const double s = img.score(c, best);
    if (s > conf_thresh) out.push_back({clamp_unit(img.boxes[c]), best, s});
  }
  std::stable_sort(out.begin(), out.end(), [](const Detection& a, const Detection& b) { return a.score > b.score; });
  return out;
}

std::vector<Detection> nms(const std::vector<Detection>& sorted, double iou_thresh) {
  std::vector<Detection> kept;
  kept.reserve(sorted.size());
  for (const auto& d : sorted) {
    bool keep = true;
    for (const auto& k : kept) {
      if (k.class_id == d.class_id && iou(k.box, d.box) > iou_thresh) {
        keep = false;
        break;
      }
    }
    if (keep) kept.push_back(d);
  }
  return kept;
}

std::vector<Detection> decode_with_nms(const DecodedImage& img, double conf_thresh, double iou_thresh) {
  return nms(decode_nms_free(img, conf_thresh), iou_thresh);
}

std::vector<Detection> decode_nms_free(const RawPredictions& preds, double conf_thresh, int image) {
  auto imgs = decode_branch(preds, preds.inference_branch());
  return decode_nms_free(imgs.at(static_cast<std::size_t>(image)), conf_thresh);
}

std::vector<Detection> decode_with_nms(const RawPredictions& preds, double conf_thresh, double iou_thresh, int image) {
  auto imgs = decode_branch(preds, preds.inference_branch());
  return decode_with_nms(imgs.at(static_cast<std::size_t>(image)), conf_thresh, iou_thresh);
}

}  // namespace microdet
