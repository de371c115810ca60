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
#include "microdet/eval.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#ifdef __linux__
#include <sched.h>
#endif

namespace microdet {

namespace fs = std::filesystem;

namespace {

struct Flat {
  int image;
  const Detection* det;
};

// Score desc, then image, then corners, so ties never depend on input order.
bool flat_before(const Flat& a, const Flat& b) {
  if (a.det->score != b.det->score) return a.det->score > b.det->score;
  if (a.image != b.image) return a.image < b.image;
  const BBox& p = a.det->box;
  const BBox& q = b.det->box;
  if (p.x1() != q.x1()) return p.x1() < q.x1();
  if (p.y1() != q.y1()) return p.y1() < q.y1();
  if (p.x2() != q.x2()) return p.x2() < q.x2();
  return p.y2() < q.y2();
}

struct Matching {
  std::vector<char> tp;                     // per sorted detection
  std::vector<std::vector<char>> gt_found;  // per image, per gt
};

Matching match(const std::vector<Flat>& sorted, const std::vector<std::vector<GroundTruth>>& gts, double thr) {
  Matching m;
  m.tp.assign(sorted.size(), 0);
  m.gt_found.resize(gts.size());
  for (std::size_t i = 0; i < gts.size(); ++i) m.gt_found[i].assign(gts[i].size(), 0);
  for (std::size_t d = 0; d < sorted.size(); ++d) {
    const Flat& f = sorted[d];
    const auto& img_gts = gts[static_cast<std::size_t>(f.image)];
    auto& found = m.gt_found[static_cast<std::size_t>(f.image)];
    int best = -1;
    double best_iou = -1;
    for (std::size_t g = 0; g < img_gts.size(); ++g) {
      if (found[g] || img_gts[g].class_id != f.det->class_id) continue;
      const double o = iou(f.det->box, img_gts[g].box);
      if (o >= thr && o > best_iou) {
        best_iou = o;
        best = static_cast<int>(g);
      }
    }
    if (best >= 0) {
      found[static_cast<std::size_t>(best)] = 1;
      m.tp[d] = 1;
    }
  }
  return m;
}

double interpolated_ap(const std::vector<char>& tp, int n_gt, int points) {
  std::vector<double> prec(tp.size()), rec(tp.size());
  int hits = 0;
  for (std::size_t k = 0; k < tp.size(); ++k) {
    hits += tp[k];
    prec[k] = double(hits) / double(k + 1);
    rec[k] = double(hits) / n_gt;
  }
  for (std::size_t k = prec.size(); k-- > 1;) prec[k - 1] = std::max(prec[k - 1], prec[k]);
  double sum = 0;
  std::size_t k = 0;
  for (int i = 0; i < points; ++i) {
    const double r = double(i) / (points - 1);
    while (k < rec.size() && rec[k] < r) ++k;
    if (k == rec.size()) break;
    sum += prec[k];
  }
  return sum / points;
}

std::vector<double> standard_thresholds() {
  std::vector<double> t;
  for (int i = 0; i < 10; ++i) t.push_back(0.5 + 0.05 * i);
  return t;
}

}  // namespace

double EvalReport::ap_at(double iou_threshold) const {
  for (const auto& [t, ap] : ap_per_iou)
    if (std::abs(t - iou_threshold) < 1e-9) return ap;
  throw Error("no AP recorded at IoU " + std::to_string(iou_threshold));
}

EvalReport evaluate(const std::vector<std::vector<Detection>>& detections,
                    const std::vector<std::vector<GroundTruth>>& gts, const EvalConfig& cfg) {
  if (detections.size() != gts.size()) {
    throw Error("evaluate got detections for " + std::to_string(detections.size()) + " images and ground truth for " +
                std::to_string(gts.size()));
  }
  if (cfg.interpolation_points < 2) throw Error("interpolation_points must be >= 2");
  EvalReport r;
  r.num_images = static_cast<int>(gts.size());
  std::set<int> classes;
  std::vector<Flat> all;
  for (std::size_t i = 0; i < gts.size(); ++i) {
    for (const auto& g : gts[i]) classes.insert(g.class_id);
    r.num_gts += static_cast<int>(gts[i].size());
    for (const auto& d : detections[i]) all.push_back({static_cast<int>(i), &d});
  }
  r.num_detections = static_cast<int>(all.size());
  std::sort(all.begin(), all.end(), flat_before);

  std::vector<std::vector<Flat>> by_class;
  std::vector<int> class_gts;
  for (int c : classes) {
    std::vector<Flat> v;
    for (const auto& f : all)
      if (f.det->class_id == c) v.push_back(f);
    by_class.push_back(std::move(v));
    int n = 0;
    for (const auto& img : gts)
      for (const auto& g : img) n += g.class_id == c;
    class_gts.push_back(n);
  }

  for (double thr : standard_thresholds()) {
    double sum = 0;
    for (std::size_t c = 0; c < by_class.size(); ++c)
      sum += interpolated_ap(match(by_class[c], gts, thr).tp, class_gts[c], cfg.interpolation_points);
    r.ap_per_iou.emplace_back(thr, by_class.empty() ? 0.0 : sum / double(by_class.size()));
  }
  r.map50 = r.ap_per_iou.front().second;
  r.map5095 = 0;
  for (const auto& [t, ap] : r.ap_per_iou) r.map5095 += ap / double(r.ap_per_iou.size());

  // Class-aware matching is independent across classes, so one pass over the
  // pooled order gives the same matches.
  const Matching m = match(all, gts, 0.5);
  const int tp = static_cast<int>(std::count(m.tp.begin(), m.tp.end(), 1));
  r.precision = all.empty() ? 0.0 : double(tp) / double(all.size());
  r.recall = r.num_gts == 0 ? 0.0 : double(tp) / r.num_gts;
  int hit_lt16 = 0, hit_16_32 = 0, hit_ge32 = 0;
  for (std::size_t i = 0; i < gts.size(); ++i)
    for (std::size_t g = 0; g < gts[i].size(); ++g) {
      const double px = std::max(gts[i][g].box.w, gts[i][g].box.h) * cfg.image_size;
      const int hit = m.gt_found[i][g];
      if (px < 16) {
        ++r.gts_lt16;
        hit_lt16 += hit;
      } else if (px < 32) {
        ++r.gts_16_32;
        hit_16_32 += hit;
      } else {
        ++r.gts_ge32;
        hit_ge32 += hit;
      }
    }
  r.recall_lt16 = r.gts_lt16 ? double(hit_lt16) / r.gts_lt16 : 0.0;
  r.recall_16_32 = r.gts_16_32 ? double(hit_16_32) / r.gts_16_32 : 0.0;
  r.recall_ge32 = r.gts_ge32 ? double(hit_ge32) / r.gts_ge32 : 0.0;
  if (r.num_gts > 0) {
    int hits = 0;
    for (std::size_t k = 0; k < m.tp.size(); ++k) {
      hits += m.tp[k];
      r.pr_curve.emplace_back(double(hits) / r.num_gts, double(hits) / double(k + 1));
    }
  }
  return r;
}

// ---------------------------------------------------------------------------
// Reports

namespace {

std::ofstream open_for_write(const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  return out;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

void write_csv(const EvalReport& r, std::ostream& out) {
  out << "metric,value\n";
  if (r.empty()) return;
  auto row = [&](const std::string& k, double v) { out << k << "," << fmt(v) << "\n"; };
  row("precision", r.precision);
  row("recall", r.recall);
  row("map50", r.map50);
  row("map5095", r.map5095);
  for (const auto& [t, ap] : r.ap_per_iou) row("ap" + std::to_string(static_cast<int>(std::lround(t * 100))), ap);
  row("recall_lt16", r.recall_lt16);
  row("recall_16_32", r.recall_16_32);
  row("recall_ge32", r.recall_ge32);
  row("gts_lt16", r.gts_lt16);
  row("gts_16_32", r.gts_16_32);
  row("gts_ge32", r.gts_ge32);
  row("num_images", r.num_images);
  row("num_gts", r.num_gts);
  row("num_detections", r.num_detections);
}

void write_svg(const EvalReport& r, std::ostream& out) {
  const double left = 50, top = 30, size = 240, bar_left = 380;
  out << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
      << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"680\" height=\"320\" font-family=\"sans-serif\" "
         "font-size=\"11\">\n"
      << "<rect x=\"0\" y=\"0\" width=\"680\" height=\"320\" fill=\"white\"/>\n"
      << "<text x=\"" << left << "\" y=\"20\">precision-recall at IoU 0.5 (map50 " << fmt(r.map50) << ")</text>\n"
      << "<rect x=\"" << left << "\" y=\"" << top << "\" width=\"" << size << "\" height=\"" << size
      << "\" fill=\"none\" stroke=\"black\"/>\n"
      << "<text x=\"" << left + size / 2 - 15 << "\" y=\"" << top + size + 18 << "\">recall</text>\n"
      << "<text x=\"10\" y=\"" << top + size / 2 << "\">prec.</text>\n";
  if (!r.pr_curve.empty()) {
    out << "<polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"1.5\" points=\"";
    auto point = [&](double rec, double prec) {
      out << fmt(left + rec * size) << "," << fmt(top + (1 - prec) * size) << " ";
    };
    point(0, r.pr_curve.front().second);
    for (const auto& [rec, prec] : r.pr_curve) point(rec, prec);
    out << "\"/>\n";
  }
  out << "<text x=\"" << bar_left << "\" y=\"20\">recall by target size</text>\n";
  const std::pair<const char*, double> bars[] = {
      {"recall_lt16", r.recall_lt16}, {"recall_16_32", r.recall_16_32}, {"recall_ge32", r.recall_ge32}};
  for (int i = 0; i < 3; ++i) {
    const double x = bar_left + i * 90, h = bars[i].second * size;
    out << "<rect x=\"" << x << "\" y=\"" << fmt(top + size - h) << "\" width=\"60\" height=\"" << fmt(h)
        << "\" fill=\"darkorange\"/>\n"
        << "<text x=\"" << x << "\" y=\"" << top + size + 18 << "\">" << bars[i].first << "</text>\n"
        << "<text x=\"" << x << "\" y=\"" << fmt(top + size - h - 4) << "\">" << fmt(bars[i].second) << "</text>\n";
  }
  out << "</svg>\n";
}

}  // namespace

void emit_report(const EvalReport& report, const fs::path& path, ReportFormat format) {
  auto out = open_for_write(path);
  if (format == ReportFormat::csv) write_csv(report, out);
  else write_svg(report, out);
  if (!out) throw Error("write failed for " + path.string());
}

// ---------------------------------------------------------------------------
// Benchmark

const StageTiming& BenchReport::stage(const std::string& name) const {
  for (const auto& s : stages)
    if (s.name == name) return s;
  throw Error("no bench stage " + name);
}

StageTiming summarize_timings(std::string name, std::vector<double> us) {
  if (us.empty()) throw Error("no timings for stage " + name);
  std::sort(us.begin(), us.end());
  StageTiming s;
  s.name = std::move(name);
  s.reps = static_cast<int>(us.size());
  const std::size_t n = us.size();
  s.median_us = n % 2 ? us[n / 2] : 0.5 * (us[n / 2 - 1] + us[n / 2]);
  s.p95_us = us[static_cast<std::size_t>(std::ceil(0.95 * double(n))) - 1];
  return s;
}

namespace {

template <typename F>
double time_us(F&& f) {
  const auto t0 = std::chrono::steady_clock::now();
  f();
  const auto t1 = std::chrono::steady_clock::now();
  return std::chrono::duration<double, std::micro>(t1 - t0).count();
}

volatile std::size_t g_sink = 0;

}  // namespace

BenchReport bench_decode(const RawPredictions& preds, double conf_thresh, double iou_thresh, int reps, int warmup) {
  if (reps < 30) throw Error("bench_decode needs at least 30 repetitions, got " + std::to_string(reps));
  BenchReport r;
  r.reps = reps;
  r.candidates = decode_nms_free(preds, conf_thresh, 0).size();
  auto free_path = [&] { g_sink = g_sink + decode_nms_free(preds, conf_thresh, 0).size(); };
  auto nms_path = [&] { g_sink = g_sink + decode_with_nms(preds, conf_thresh, iou_thresh, 0).size(); };
  for (int i = 0; i < warmup; ++i) {
    free_path();
    nms_path();
  }
  std::vector<double> t_free, t_nms;
  for (int i = 0; i < reps; ++i) {
    t_free.push_back(time_us(free_path));
    t_nms.push_back(time_us(nms_path));
  }
  r.stages.push_back(summarize_timings("decode_nms_free", std::move(t_free)));
  r.stages.push_back(summarize_timings("decode_with_nms", std::move(t_nms)));
  return r;
}

StageTiming bench_forward(Detector& model, const Tensorf& images, int reps, int warmup) {
  NoGradGuard no_grad;
  auto run = [&] { g_sink = g_sink + model.forward(images, false).o2m.size(); };
  for (int i = 0; i < warmup; ++i) run();
  std::vector<double> t;
  for (int i = 0; i < reps; ++i) t.push_back(time_us(run));
  return summarize_timings("forward", std::move(t));
}

RawPredictions synthetic_predictions(int input_size, int candidates, std::uint64_t seed) {
  if (input_size <= 0 || input_size % 16 != 0) throw Error("synthetic_predictions needs input_size divisible by 16");
  std::mt19937_64 rng(seed);
  RawPredictions p;
  p.input_size = input_size;
  p.num_classes = 1;
  p.use_dfl = false;
  int total = 0;
  for (Level l : {Level::P2, Level::P3, Level::P4}) {
    const int s = level_stride(l), g = input_size / s;
    LevelOutput lv;
    lv.level = l;
    lv.stride = s;
    lv.box = Tensorf({1, 4, g, g}, 0.f);
    lv.cls = Tensorf({1, 1, g, g}, -9.f);
    std::uniform_real_distribution<float> dist(0.5f, 3.0f);
    for (auto& v : lv.box.data()) v = std::log(std::expm1(dist(rng)));  // softplus inverse
    total += g * g;
    p.o2o.push_back(std::move(lv));
  }
  if (candidates < 0 || candidates > total)
    throw Error("synthetic_predictions: " + std::to_string(candidates) + " candidates but only " +
                std::to_string(total) + " cells");
  std::vector<int> cells(static_cast<std::size_t>(total));
  std::iota(cells.begin(), cells.end(), 0);
  std::shuffle(cells.begin(), cells.end(), rng);
  std::uniform_real_distribution<float> logit(0.1f, 4.0f);
  for (int k = 0; k < candidates; ++k) {
    int c = cells[static_cast<std::size_t>(k)];
    for (auto& lv : p.o2o) {
      if (c < lv.cells()) {
        lv.cls.data()[static_cast<std::size_t>(c)] = logit(rng);
        break;
      }
      c -= lv.cells();
    }
  }
  p.o2m = p.o2o;
  return p;
}

bool pin_to_single_cpu() {
#ifdef __linux__
  cpu_set_t current;
  CPU_ZERO(&current);
  if (sched_getaffinity(0, sizeof current, &current) != 0) return false;
  for (int cpu = 0; cpu < CPU_SETSIZE; ++cpu) {
    if (!CPU_ISSET(cpu, &current)) continue;
    cpu_set_t one;
    CPU_ZERO(&one);
    CPU_SET(cpu, &one);
    return sched_setaffinity(0, sizeof one, &one) == 0;
  }
  return false;
#else
  return false;
#endif
}

void emit_bench_csv(const BenchReport& report, const fs::path& path) {
  auto out = open_for_write(path);
  out << "stage,median_us,p95_us,reps\n";
  for (const auto& s : report.stages) out << s.name << "," << fmt(s.median_us) << "," << fmt(s.p95_us) << "," << s.reps << "\n";
  if (!out) throw Error("write failed for " + path.string());
}

}  // namespace microdet
