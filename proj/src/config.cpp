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
#include "microdet/config.hpp"

#include <cstdlib>
#include <map>
#include <set>
#include <sstream>

#include "microdet/error.hpp"

namespace microdet {

namespace {

std::string flag(bool b) { return b ? "true" : "false"; }

std::string levels_str(const std::vector<Level>& levels) {
  std::string s;
  for (std::size_t i = 0; i < levels.size(); ++i) s += (i ? "," : "") + level_name(levels[i]);
  return s;
}

std::vector<Level> parse_levels(const std::string& text) {
  std::vector<Level> out;
  std::istringstream in(text);
  for (std::string tok; std::getline(in, tok, ',');) {
    const auto b = tok.find_first_not_of(" \t"), e = tok.find_last_not_of(" \t");
    if (b == std::string::npos) throw ConfigError("model.levels: empty entry in '" + text + "'");
    try {
      out.push_back(parse_level(tok.substr(b, e - b + 1)));
    } catch (const Error& err) {
      throw ConfigError(std::string("model.levels: ") + err.what());
    }
  }
  return out;
}

const std::vector<std::string> kModelKeys{"input_size",  "width_multiple", "depth_multiple", "num_classes",
                                          "levels",      "attention",      "dfl",            "dfl_bins",
                                          "o2o_head",    "o2o_shared"};
const std::vector<std::string> kOptimKeys{"muon_lr", "sgd_lr", "momentum",      "weight_decay",  "ns_steps",
                                          "ns_a",    "ns_b",   "ns_c",          "muon",          "backbone_only",
                                          "warmup_epochs",     "final_lr_fraction"};
const std::vector<std::string> kLossKeys{"kd_lambda",          "kd_temperature",    "stal",
                                         "stal_alpha",         "stal_small_area",   "score_power",
                                         "iou_power",          "topk",              "wiou_alpha",
                                         "wiou_delta",         "wiou_momentum",     "box_weight_initial",
                                         "box_weight_final",   "cls_weight_initial", "cls_weight_final",
                                         "o2o_weight"};
const std::vector<std::string> kDataKeys{"dir", "seed", "train", "val", "test"};
const std::vector<std::string> kTrainKeys{"epochs",     "batch_size",  "seed",    "checkpoint_every", "augment",
                                          "eval_every", "conf_thresh", "nms_iou", "max_detections"};

}  // namespace

std::string decode_name(DecodeMode m) { return m == DecodeMode::o2o ? "o2o" : "nms"; }

DecodeMode parse_decode(const std::string& s) {
  if (s == "o2o") return DecodeMode::o2o;
  if (s == "nms") return DecodeMode::nms;
  throw ConfigError("unknown decode mode '" + s + "' (expected o2o or nms)");
}

void model_to_ini(const ModelConfig& m, IniDocument& doc, const std::string& section) {
  doc.set(section, "input_size", std::to_string(m.input_size));
  doc.set(section, "width_multiple", ini_number(m.width_multiple));
  doc.set(section, "depth_multiple", ini_number(m.depth_multiple));
  doc.set(section, "num_classes", std::to_string(m.num_classes));
  doc.set(section, "levels", levels_str(m.levels));
  doc.set(section, "attention", flag(m.use_attention));
  doc.set(section, "dfl", flag(m.use_dfl));
  doc.set(section, "dfl_bins", std::to_string(m.dfl_bins));
  doc.set(section, "o2o_head", flag(m.o2o_head));
  doc.set(section, "o2o_shared", flag(m.o2o_shared));
}

ModelConfig model_from_ini(const IniDocument& doc, const std::string& section, ModelConfig m) {
  m.input_size = doc.get_int(section, "input_size", m.input_size);
  m.width_multiple = doc.get_double(section, "width_multiple", m.width_multiple);
  m.depth_multiple = doc.get_double(section, "depth_multiple", m.depth_multiple);
  m.num_classes = doc.get_int(section, "num_classes", m.num_classes);
  if (auto v = doc.get(section, "levels")) m.levels = parse_levels(*v);
  m.use_attention = doc.get_bool(section, "attention", m.use_attention);
  m.use_dfl = doc.get_bool(section, "dfl", m.use_dfl);
  m.dfl_bins = doc.get_int(section, "dfl_bins", m.dfl_bins);
  m.o2o_head = doc.get_bool(section, "o2o_head", m.o2o_head);
  m.o2o_shared = doc.get_bool(section, "o2o_shared", m.o2o_shared);
  return m;
}

void RunConfig::validate() const {
  model.validate();
  data.dataset.synth.validate();
  const auto& o = optim.musgd;
  if (!(o.muon_lr >= 0) || !(o.sgd_lr >= 0)) throw ConfigError("optimizer learning rates must be >= 0");
  if (!(o.momentum >= 0 && o.momentum < 1)) throw ConfigError("optimizer.momentum must lie in [0,1)");
  if (!(o.weight_decay >= 0)) throw ConfigError("optimizer.weight_decay must be >= 0");
  if (o.ns_steps < 1) throw ConfigError("optimizer.ns_steps must be >= 1");
  if (optim.warmup_epochs < 0) throw ConfigError("optimizer.warmup_epochs must be >= 0");
  if (!(optim.final_lr_fraction >= 0 && optim.final_lr_fraction <= 1))
    throw ConfigError("optimizer.final_lr_fraction must lie in [0,1]");
  if (!(loss.kd_lambda >= 0 && loss.kd_lambda <= 1)) throw ConfigError("loss.kd_lambda must lie in [0,1]");
  if (!(loss.kd_temperature > 0)) throw ConfigError("loss.kd_temperature must be > 0");
  if (!(loss.assign.stal_small_area > 0)) throw ConfigError("loss.stal_small_area must be > 0");
  if (!(loss.assign.stal_alpha >= 0)) throw ConfigError("loss.stal_alpha must be >= 0");
  if (loss.assign.topk < 1) throw ConfigError("loss.topk must be >= 1");
  if (!(loss.wiou_momentum >= 0 && loss.wiou_momentum < 1)) throw ConfigError("loss.wiou_momentum must lie in [0,1)");
  if (!(loss.o2o_weight >= 0)) throw ConfigError("loss.o2o_weight must be >= 0");
  if (data.dataset.train < 0 || data.dataset.val < 0 || data.dataset.test < 0)
    throw ConfigError("data split sizes must be >= 0");
  if (train.epochs < 1) throw ConfigError("train.epochs must be >= 1");
  if (train.batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
  if (train.checkpoint_every < 0) throw ConfigError("train.checkpoint_every must be >= 0");
  if (train.eval_every < 1) throw ConfigError("train.eval_every must be >= 1");
  if (!(train.conf_thresh >= 0 && train.conf_thresh < 1)) throw ConfigError("train.conf_thresh must lie in [0,1)");
  if (!(train.nms_iou > 0 && train.nms_iou <= 1)) throw ConfigError("train.nms_iou must lie in (0,1]");
  if (train.max_detections < 1) throw ConfigError("train.max_detections must be >= 1");
}

RunConfig run_config_from_ini(const IniDocument& doc) {
  std::map<std::string, std::set<std::string>> known;
  known["model"] = {kModelKeys.begin(), kModelKeys.end()};
  known["optimizer"] = {kOptimKeys.begin(), kOptimKeys.end()};
  known["loss"] = {kLossKeys.begin(), kLossKeys.end()};
  known["data"] = {kDataKeys.begin(), kDataKeys.end()};
  for (const auto& k : synth_keys()) known["data"].insert(k);
  known["train"] = {kTrainKeys.begin(), kTrainKeys.end()};
  doc.require_known(known);

  RunConfig c;
  c.model = model_from_ini(doc, "model", c.model);

  auto& o = c.optim.musgd;
  o.muon_lr = doc.get_double("optimizer", "muon_lr", o.muon_lr);
  o.sgd_lr = doc.get_double("optimizer", "sgd_lr", o.sgd_lr);
  o.momentum = doc.get_double("optimizer", "momentum", o.momentum);
  o.weight_decay = doc.get_double("optimizer", "weight_decay", o.weight_decay);
  o.ns_steps = doc.get_int("optimizer", "ns_steps", o.ns_steps);
  o.ns.a = doc.get_double("optimizer", "ns_a", o.ns.a);
  o.ns.b = doc.get_double("optimizer", "ns_b", o.ns.b);
  o.ns.c = doc.get_double("optimizer", "ns_c", o.ns.c);
  o.muon_enabled = doc.get_bool("optimizer", "muon", o.muon_enabled);
  o.backbone_only = doc.get_bool("optimizer", "backbone_only", o.backbone_only);
  c.optim.warmup_epochs = doc.get_int("optimizer", "warmup_epochs", c.optim.warmup_epochs);
  c.optim.final_lr_fraction = doc.get_double("optimizer", "final_lr_fraction", c.optim.final_lr_fraction);

  auto& l = c.loss;
  l.kd_lambda = doc.get_double("loss", "kd_lambda", l.kd_lambda);
  l.kd_temperature = doc.get_double("loss", "kd_temperature", l.kd_temperature);
  l.stal = doc.get_bool("loss", "stal", l.stal);
  l.assign.stal_alpha = doc.get_double("loss", "stal_alpha", l.assign.stal_alpha);
  l.assign.stal_small_area = doc.get_double("loss", "stal_small_area", l.assign.stal_small_area);
  l.assign.score_power = doc.get_double("loss", "score_power", l.assign.score_power);
  l.assign.iou_power = doc.get_double("loss", "iou_power", l.assign.iou_power);
  l.assign.topk = doc.get_int("loss", "topk", l.assign.topk);
  l.wiou.alpha = doc.get_double("loss", "wiou_alpha", l.wiou.alpha);
  l.wiou.delta = doc.get_double("loss", "wiou_delta", l.wiou.delta);
  l.wiou_momentum = doc.get_double("loss", "wiou_momentum", l.wiou_momentum);
  l.prog.box_initial = doc.get_double("loss", "box_weight_initial", l.prog.box_initial);
  l.prog.box_final = doc.get_double("loss", "box_weight_final", l.prog.box_final);
  l.prog.cls_initial = doc.get_double("loss", "cls_weight_initial", l.prog.cls_initial);
  l.prog.cls_final = doc.get_double("loss", "cls_weight_final", l.prog.cls_final);
  l.o2o_weight = doc.get_double("loss", "o2o_weight", l.o2o_weight);

  c.data.dir = doc.get_string("data", "dir", c.data.dir);
  auto& d = c.data.dataset;
  d.seed = static_cast<std::uint64_t>(doc.get_int64("data", "seed", static_cast<long long>(d.seed)));
  d.train = doc.get_int("data", "train", d.train);
  d.val = doc.get_int("data", "val", d.val);
  d.test = doc.get_int("data", "test", d.test);
  d.synth = synth_from_ini(doc, "data", d.synth);

  auto& t = c.train;
  t.epochs = doc.get_int("train", "epochs", t.epochs);
  t.batch_size = doc.get_int("train", "batch_size", t.batch_size);
  t.seed = static_cast<std::uint64_t>(doc.get_int64("train", "seed", static_cast<long long>(t.seed)));
  t.checkpoint_every = doc.get_int("train", "checkpoint_every", t.checkpoint_every);
  t.augment = doc.get_bool("train", "augment", t.augment);
  t.eval_every = doc.get_int("train", "eval_every", t.eval_every);
  t.conf_thresh = doc.get_double("train", "conf_thresh", t.conf_thresh);
  t.nms_iou = doc.get_double("train", "nms_iou", t.nms_iou);
  t.max_detections = doc.get_int("train", "max_detections", t.max_detections);

  c.validate();
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) { return run_config_from_ini(IniDocument::load(path)); }

IniDocument run_config_to_ini(const RunConfig& c) {
  IniDocument doc;
  model_to_ini(c.model, doc, "model");
  const auto& o = c.optim.musgd;
  doc.set("optimizer", "muon_lr", ini_number(o.muon_lr));
  doc.set("optimizer", "sgd_lr", ini_number(o.sgd_lr));
  doc.set("optimizer", "momentum", ini_number(o.momentum));
  doc.set("optimizer", "weight_decay", ini_number(o.weight_decay));
  doc.set("optimizer", "ns_steps", std::to_string(o.ns_steps));
  doc.set("optimizer", "ns_a", ini_number(o.ns.a));
  doc.set("optimizer", "ns_b", ini_number(o.ns.b));
  doc.set("optimizer", "ns_c", ini_number(o.ns.c));
  doc.set("optimizer", "muon", flag(o.muon_enabled));
  doc.set("optimizer", "backbone_only", flag(o.backbone_only));
  doc.set("optimizer", "warmup_epochs", std::to_string(c.optim.warmup_epochs));
  doc.set("optimizer", "final_lr_fraction", ini_number(c.optim.final_lr_fraction));

  const auto& l = c.loss;
  doc.set("loss", "kd_lambda", ini_number(l.kd_lambda));
  doc.set("loss", "kd_temperature", ini_number(l.kd_temperature));
  doc.set("loss", "stal", flag(l.stal));
  doc.set("loss", "stal_alpha", ini_number(l.assign.stal_alpha));
  doc.set("loss", "stal_small_area", ini_number(l.assign.stal_small_area));
  doc.set("loss", "score_power", ini_number(l.assign.score_power));
  doc.set("loss", "iou_power", ini_number(l.assign.iou_power));
  doc.set("loss", "topk", std::to_string(l.assign.topk));
  doc.set("loss", "wiou_alpha", ini_number(l.wiou.alpha));
  doc.set("loss", "wiou_delta", ini_number(l.wiou.delta));
  doc.set("loss", "wiou_momentum", ini_number(l.wiou_momentum));
  doc.set("loss", "box_weight_initial", ini_number(l.prog.box_initial));
  doc.set("loss", "box_weight_final", ini_number(l.prog.box_final));
  doc.set("loss", "cls_weight_initial", ini_number(l.prog.cls_initial));
  doc.set("loss", "cls_weight_final", ini_number(l.prog.cls_final));
  doc.set("loss", "o2o_weight", ini_number(l.o2o_weight));

  doc.set("data", "dir", c.data.dir);
  doc.set("data", "seed", std::to_string(c.data.dataset.seed));
  doc.set("data", "train", std::to_string(c.data.dataset.train));
  doc.set("data", "val", std::to_string(c.data.dataset.val));
  doc.set("data", "test", std::to_string(c.data.dataset.test));
  synth_to_ini(c.data.dataset.synth, doc, "data");

  const auto& t = c.train;
  doc.set("train", "epochs", std::to_string(t.epochs));
  doc.set("train", "batch_size", std::to_string(t.batch_size));
  doc.set("train", "seed", std::to_string(t.seed));
  doc.set("train", "checkpoint_every", std::to_string(t.checkpoint_every));
  doc.set("train", "augment", flag(t.augment));
  doc.set("train", "eval_every", std::to_string(t.eval_every));
  doc.set("train", "conf_thresh", ini_number(t.conf_thresh));
  doc.set("train", "nms_iou", ini_number(t.nms_iou));
  doc.set("train", "max_detections", std::to_string(t.max_detections));
  return doc;
}

void apply_seed_override(RunConfig& cfg) {
  const char* env = std::getenv("MICRODET_SEED");
  if (!env || !*env) return;
  char* end = nullptr;
  const unsigned long long v = std::strtoull(env, &end, 10);
  if (*end != '\0' || env[0] == '-') throw ConfigError(std::string("MICRODET_SEED: expected an unsigned integer, got '") + env + "'");
  cfg.data.dataset.seed = v;
  cfg.train.seed = v;
}

}  // namespace microdet
