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
#include "microdet/ablate.hpp"

#include <chrono>
#include <cstdio>
#include <sstream>

#include "microdet/error.hpp"

namespace microdet {

const std::vector<std::string>& ablation_variants() {
  static const std::vector<std::string> names{"baseline-P3", "+P2", "+P2+attention", "final"};
  return names;
}

RunConfig ablation_config(const RunConfig& base, const std::string& variant) {
  RunConfig c = base;
  auto& m = c.model;
  m.levels = {Level::P3, Level::P4};
  m.use_attention = false;
  m.use_dfl = true;
  m.o2o_head = false;
  c.optim.musgd.muon_enabled = false;
  c.loss.stal = false;
  if (variant == "baseline-P3") return c;
  m.levels = {Level::P2, Level::P3, Level::P4};
  if (variant == "+P2") return c;
  m.use_attention = true;
  if (variant == "+P2+attention") return c;
  if (variant == "final") {
    m.use_dfl = false;
    m.o2o_head = true;
    c.optim.musgd.muon_enabled = true;
    c.loss.stal = true;
    return c;
  }
  throw ConfigError("unknown ablation variant '" + variant + "'");
}

namespace {
volatile std::size_t g_decode_sink = 0;
}  // namespace

StageTiming time_decode(Detector& model, const std::vector<Sample>& samples, const RunConfig& cfg, int reps) {
  if (samples.empty()) throw Error("time_decode needs at least one sample");
  const DecodeMode mode = cfg.default_decode();
  std::vector<RawPredictions> preds;
  {
    NoGradGuard no_grad;
    std::vector<std::size_t> order(samples.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    const std::size_t n = std::min<std::size_t>(samples.size(), static_cast<std::size_t>(reps));
    for (std::size_t i = 0; i < n; ++i) preds.push_back(model.forward(stack_images(samples, order, i, i + 1), false));
  }
  std::size_t sink = 0;
  auto run = [&](const RawPredictions& p) {
    for (const auto& img : decode_branch(p, decode_branch_for(p, mode)))
      sink += decode_image(img, mode, cfg.train.conf_thresh, cfg.train.nms_iou, cfg.train.max_detections).size();
  };
  for (std::size_t i = 0; i < std::min<std::size_t>(preds.size(), 5); ++i) run(preds[i]);
  std::vector<double> us;
  for (int r = 0; r < reps; ++r) {
    const auto t0 = std::chrono::steady_clock::now();
    run(preds[static_cast<std::size_t>(r) % preds.size()]);
    const auto t1 = std::chrono::steady_clock::now();
    us.push_back(std::chrono::duration<double, std::micro>(t1 - t0).count());
  }
  g_decode_sink = g_decode_sink + sink;
  return summarize_timings("decode_" + decode_name(mode), std::move(us));
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::vector<AblationRow> run_ablation(const RunConfig& base, const std::filesystem::path& data_dir,
                                      const std::filesystem::path& out_dir, bool progress) {
  const auto train = load_split(data_dir, "train");
  const auto val = load_split(data_dir, "val");
  if (val.empty()) throw Error("ablation needs a non-empty val split in " + data_dir.string());
  std::vector<AblationRow> rows;
  for (const auto& name : ablation_variants()) {
    const RunConfig cfg = ablation_config(base, name);
    AblationRow row;
    row.variant = name;
    row.dataset_hash = hex64(dataset_hash(data_dir));
    if (progress) std::fprintf(stderr, "variant %s\n", name.c_str());
    Detector model(cfg.model, cfg.train.seed);
    TrainOutputs out;
    if (!out_dir.empty()) out.dir = out_dir / name;
    out.log_progress = progress;
    const auto t0 = std::chrono::steady_clock::now();
    train_detector(model, train, val, cfg, nullptr, out);
    row.train_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const EvalReport rep = evaluate_model(model, val, cfg.default_decode(), cfg.train);
    row.map50 = rep.map50;
    row.map5095 = rep.map5095;
    row.recall_lt16 = rep.recall_lt16;
    row.decode_median_us = time_decode(model, val, cfg).median_us;
    rows.push_back(row);
  }
  return rows;
}

std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::ostringstream os;
  os << "variant,map50,map5095,recall_lt16,decode_median_us,dataset_hash\n";
  char buf[256];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%s,%.6f,%.6f,%.6f,%.3f,%s\n", r.variant.c_str(), r.map50, r.map5095, r.recall_lt16,
                  r.decode_median_us, r.dataset_hash.c_str());
    os << buf;
  }
  return os.str();
}

}  // namespace microdet
