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
#include <malloc.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include <CLI11.hpp>

#include "microdet/ablate.hpp"
#include "microdet/config.hpp"
#include "microdet/error.hpp"
#include "microdet/eval.hpp"
#include "microdet/synth.hpp"
#include "microdet/train.hpp"

namespace fs = std::filesystem;
using namespace microdet;

namespace {

RunConfig read_config(const std::string& path) {
  RunConfig cfg = path.empty() ? RunConfig{} : load_run_config(path);
  apply_seed_override(cfg);
  cfg.validate();
  return cfg;
}

void write_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  f << text;
  if (!f) throw Error("cannot write " + path.string());
}

bool non_empty_dir(const fs::path& p) { return fs::is_directory(p) && !fs::is_empty(p); }

// "a/b/c" -> three non-negative fractions.
std::array<double, 3> parse_split(const std::string& text) {
  std::array<double, 3> f{};
  std::istringstream in(text);
  std::string tok;
  int n = 0;
  while (std::getline(in, tok, '/')) {
    if (n == 3) throw ConfigError("--split expects three fractions a/b/c, got '" + text + "'");
    char* end = nullptr;
    f[static_cast<std::size_t>(n)] = std::strtod(tok.c_str(), &end);
    if (tok.empty() || *end != '\0' || !(f[static_cast<std::size_t>(n)] >= 0))
      throw ConfigError("--split: bad fraction '" + tok + "'");
    ++n;
  }
  if (n != 3) throw ConfigError("--split expects three fractions a/b/c, got '" + text + "'");
  if (f[0] + f[1] + f[2] > 1.0 + 1e-9) throw ConfigError("--split fractions sum to more than 1: '" + text + "'");
  return f;
}

int cmd_synth(const std::string& config, const std::string& out, bool force, std::optional<int> images,
              const std::string& split) {
  RunConfig cfg = read_config(config);
  DatasetSpec spec = cfg.data.dataset;
  if (images || !split.empty()) {
    const int total = images ? *images : spec.train + spec.val + spec.test;
    if (total < 0) throw ConfigError("--images must be >= 0");
    const auto f = split.empty() ? std::array<double, 3>{double(spec.train) / std::max(1, spec.train + spec.val + spec.test),
                                                         double(spec.val) / std::max(1, spec.train + spec.val + spec.test),
                                                         double(spec.test) / std::max(1, spec.train + spec.val + spec.test)}
                                 : parse_split(split);
    spec.train = static_cast<int>(std::floor(total * f[0] + 1e-9));
    spec.val = static_cast<int>(std::floor(total * f[1] + 1e-9));
    spec.test = static_cast<int>(std::floor(total * f[2] + 1e-9));
  }
  const fs::path root = out.empty() ? fs::path(cfg.data.dir) : fs::path(out);
  if (non_empty_dir(root)) {
    if (!force) throw Error("output directory " + root.string() + " is not empty (use --force)");
    fs::remove_all(root / "images");
    fs::remove_all(root / "labels");
    fs::remove(root / "dataset.cfg");
  }
  const DatasetStats st = write_dataset(root, spec);
  std::printf("dataset %s\n", root.string().c_str());
  std::printf("images train=%d val=%d test=%d\n", spec.train, spec.val, spec.test);
  std::printf("targets %d small(<%gpx) %d (%.1f%%) distractors %d\n", st.targets, spec.synth.small_px,
              st.small_targets, st.targets ? 100.0 * st.small_targets / st.targets : 0.0, st.distractors);
  std::printf("conditions");
  for (int c = 0; c < 4; ++c)
    std::printf(" %s=%d", condition_name(static_cast<Condition>(c)).c_str(), st.conditions[static_cast<std::size_t>(c)]);
  std::printf("\nhash %s\n", hex64(dataset_hash(root)).c_str());
  return 0;
}

int cmd_train(const std::string& config, const std::string& data, const std::string& out, const std::string& teacher_path,
              std::optional<int> epochs) {
  RunConfig cfg = read_config(config);
  if (epochs) cfg.train.epochs = *epochs;
  cfg.validate();
  const fs::path root = data.empty() ? fs::path(cfg.data.dir) : fs::path(data);
  if (!fs::exists(root / "dataset.cfg")) throw Error("no dataset at " + root.string() + " (missing dataset.cfg)");
  const auto train = load_split(root, "train");
  const auto val = load_split(root, "val");
  std::optional<Detector> teacher;
  if (!teacher_path.empty()) teacher.emplace(Detector::load(teacher_path));
  Detector model(cfg.model, cfg.train.seed);
  const fs::path dir = out.empty() ? fs::path("runs/train") : fs::path(out);
  fs::create_directories(dir);
  write_file(dir / "config.ini", run_config_to_ini(cfg).to_string());
  TrainOutputs outputs{dir, true};
  const TrainResult r = train_detector(model, train, val, cfg, teacher ? &*teacher : nullptr, outputs);
  std::printf("run %s\nepochs %d best_epoch %d best_val_map50 %.6f\n", dir.string().c_str(), cfg.train.epochs,
              r.best_epoch, r.best_map50);
  return 0;
}

int cmd_eval(const std::string& config, const std::string& checkpoint, const std::string& data, const std::string& split,
             const std::string& decode, const std::string& out) {
  const RunConfig cfg = read_config(config);
  Detector model = Detector::load(checkpoint);
  const fs::path root = data.empty() ? fs::path(cfg.data.dir) : fs::path(data);
  const auto samples = load_split(root, split);
  const DecodeMode mode = decode.empty() ? (model.config().o2o_head ? DecodeMode::o2o : DecodeMode::nms)
                                         : parse_decode(decode);
  const EvalReport rep = evaluate_model(model, samples, mode, cfg.train);
  const fs::path dir = out.empty() ? fs::path("runs/eval") : fs::path(out);
  fs::create_directories(dir);
  emit_report(rep, dir / "report.csv", ReportFormat::csv);
  emit_report(rep, dir / "report.svg", ReportFormat::svg);
  std::printf("decode %s images %d map50 %.6f map5095 %.6f precision %.6f recall %.6f recall_lt16 %.6f\n",
              decode_name(mode).c_str(), rep.num_images, rep.map50, rep.map5095, rep.precision, rep.recall,
              rep.recall_lt16);
  return 0;
}

int cmd_ablate(const std::string& config, const std::string& data, const std::string& out) {
  const RunConfig cfg = read_config(config);
  const fs::path root = data.empty() ? fs::path(cfg.data.dir) : fs::path(data);
  const fs::path dir = out.empty() ? fs::path("runs/ablate") : fs::path(out);
  const auto rows = run_ablation(cfg, root, dir, true);
  const std::string csv = ablation_csv(rows);
  write_file(dir / "ablation.csv", csv);
  std::fputs(csv.c_str(), stdout);
  return 0;
}

int cmd_bench(const std::string& checkpoint, int boxes, int reps, const std::string& out, std::uint64_t seed) {
  Detector model = Detector::load(checkpoint);
  const bool pinned = pin_to_single_cpu();
  const int size = model.config().input_size;
  BenchReport rep = bench_decode(synthetic_predictions(size, boxes, seed), 0.25, 0.6, reps);
  Tensorf image({1, 3, size, size}, 0.5f);
  rep.stages.push_back(bench_forward(model, image, reps));
  const fs::path path = out.empty() ? fs::path("runs/bench/bench.csv") : fs::path(out);
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  emit_bench_csv(rep, path);
  std::printf("candidates %zu reps %d pinned %s\n", rep.candidates, rep.reps, pinned ? "yes" : "no");
  for (const auto& s : rep.stages) std::printf("%s median_us %.3f p95_us %.3f\n", s.name.c_str(), s.median_us, s.p95_us);
  return 0;
}

std::string one_line(std::string s) {
  for (auto& c : s)
    if (c == '\n' || c == '\r') c = ' ';
  return s;
}

}  // namespace

int main(int argc, char** argv) {
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);

  CLI::App app{"microdet: small-target aerial detector toolkit"};
  app.require_subcommand(1);
  std::string config, data, out, teacher, checkpoint, decode, split_name = "val", split;
  bool force = false;
  std::optional<int> images, epochs;
  int boxes = 1000, reps = 100;
  std::uint64_t seed = 0;

  auto* synth = app.add_subcommand("synth", "generate a synthetic dataset");
  synth->add_option("--config,-c", config, "run config (INI)");
  synth->add_option("--out,-o", out, "dataset directory (default: data.dir)");
  synth->add_flag("--force", force, "replace an existing dataset");
  synth->add_option("--images", images, "total image count");
  synth->add_option("--split", split, "train/val/test fractions, e.g. 0.7/0.2/0.1");

  auto add_train_opts = [&](CLI::App* c) {
    c->add_option("--config,-c", config, "run config (INI)");
    c->add_option("--data,-d", data, "dataset directory (default: data.dir)");
    c->add_option("--out,-o", out, "run directory")->default_str("runs/train");
    c->add_option("--epochs", epochs, "override train.epochs");
  };
  auto* train = app.add_subcommand("train", "train a detector");
  add_train_opts(train);
  train->add_option("--teacher", teacher, "teacher checkpoint; enables distillation");
  auto* distill = app.add_subcommand("distill", "train with a teacher (train --teacher)");
  add_train_opts(distill);
  distill->add_option("--teacher", teacher, "teacher checkpoint")->required();

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  eval->add_option("--config,-c", config, "run config for thresholds (INI)");
  eval->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
  eval->add_option("--data,-d", data, "dataset directory (default: data.dir)");
  eval->add_option("--split", split_name, "train, val or test")->default_str("val");
  eval->add_option("--decode", decode, "o2o or nms (default: o2o when the model has that head)");
  eval->add_option("--out,-o", out, "report directory")->default_str("runs/eval");

  auto* ablate = app.add_subcommand("ablate", "train and compare the four ablation variants");
  ablate->add_option("--config,-c", config, "base run config (INI)");
  ablate->add_option("--data,-d", data, "dataset directory (default: data.dir)");
  ablate->add_option("--out,-o", out, "output directory")->default_str("runs/ablate");

  auto* bench = app.add_subcommand("bench", "decode and forward latency");
  bench->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
  bench->add_option("--boxes", boxes, "above-threshold candidates")->default_val(1000);
  bench->add_option("--reps", reps, "timed repetitions (>= 30)")->default_val(100);
  bench->add_option("--seed", seed, "candidate layout seed")->default_val(0);
  bench->add_option("--out,-o", out, "CSV path")->default_str("runs/bench/bench.csv");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::fprintf(stderr, "error: %s\n", one_line(e.what()).c_str());
    return 2;
  }

  try {
    if (*synth) return cmd_synth(config, out, force, images, split);
    if (*train) return cmd_train(config, data, out, teacher, epochs);
    if (*distill) return cmd_train(config, data, out, teacher, epochs);
    if (*eval) return cmd_eval(config, checkpoint, data, split_name, decode, out);
    if (*ablate) return cmd_ablate(config, data, out);
    if (*bench) return cmd_bench(checkpoint, boxes, reps, out, seed);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", one_line(e.what()).c_str());
    return 1;
  }
  return 1;
}
