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

#include "microdet/detector.hpp"

#include <algorithm>
#include <cmath>
#include <map>

namespace microdet {

int level_stride(Level level) {
  switch (level) {
    case Level::P2: return 4;
    case Level::P3: return 8;
    case Level::P4: return 16;
  }
  throw Error("unknown level");
}

std::string level_name(Level level) { return "P" + std::to_string(static_cast<int>(level)); }

Level parse_level(const std::string& name) {
  if (name == "P2" || name == "p2") return Level::P2;
  if (name == "P3" || name == "p3") return Level::P3;
  if (name == "P4" || name == "p4") return Level::P4;
  throw ConfigError("unknown pyramid level '" + name + "' (expected P2, P3 or P4)");
}

double feature_response_size(double target_pixels, Level level) {
  if (!(target_pixels > 0)) throw Error("feature_response_size: target size must be positive");
  return target_pixels / level_stride(level);
}

void ModelConfig::validate() const {
  if (input_size <= 0 || input_size % 16 != 0) {
    throw ConfigError("model.input_size must be a positive multiple of 16, got " + std::to_string(input_size));
  }
  if (levels.empty()) throw ConfigError("model.levels must not be empty");
  if (num_classes < 1) throw ConfigError("model.num_classes must be >= 1");
  if (!(width_multiple > 0) || !(depth_multiple > 0)) throw ConfigError("model width/depth multiples must be > 0");
  if (use_dfl && dfl_bins < 1) throw ConfigError("model.dfl_bins must be >= 1");
}

bool ModelConfig::has_level(Level l) const { return std::find(levels.begin(), levels.end(), l) != levels.end(); }

std::vector<int> ModelConfig::widths() const {
  std::vector<int> w;
  for (int base : {16, 32, 64, 128}) {
    int c = static_cast<int>(std::lround(base * width_multiple));
    c = std::max(8, c + (c % 2));
    w.push_back(c);
  }
  return w;
}

int ModelConfig::depth() const { return std::max(1, static_cast<int>(std::lround(depth_multiple))); }

int RawPredictions::total_cells() const {
  int n = 0;
  for (const auto& l : o2m) n += l.cells();
  return n;
}

template <typename S>
Tensor<S> dfl_expectation(const Tensor<S>& bin_logits) {
  if (bin_logits.rank() < 1 || bin_logits.dim(-1) < 2) {
    throw ShapeError("dfl_expectation needs a last axis of n+1 >= 2 bins, got " + shape_str(bin_logits.shape()));
  }
  const int bins = bin_logits.dim(-1);
  const int rows = static_cast<int>(bin_logits.numel() / static_cast<std::size_t>(bins));
  std::vector<S> index(static_cast<std::size_t>(bins));
  for (int i = 0; i < bins; ++i) index[static_cast<std::size_t>(i)] = static_cast<S>(i);
  const Tensor<S> weights({bins, 1}, std::move(index));
  auto p = softmax(bin_logits, -1);
  auto e = matmul(reshape(p, {rows, bins}), weights);
  Shape out_shape(bin_logits.shape().begin(), bin_logits.shape().end() - 1);
  return reshape(e, out_shape);
}

template Tensor<float> dfl_expectation<float>(const Tensor<float>&);
template Tensor<double> dfl_expectation<double>(const Tensor<double>&);

Tensorf decode_distances(const LevelOutput& level, bool use_dfl, int dfl_bins) {
  if (!use_dfl) return softplus(level.box);
  const int n = level.box.dim(0), h = level.box.dim(2), w = level.box.dim(3);
  auto bins = reshape(level.box, {n, 4, dfl_bins + 1, h, w});
  return dfl_expectation(permute(bins, {0, 1, 3, 4, 2}));
}

// ---------------------------------------------------------------------------

namespace {

struct Head {
  ConvBNAct<float> stem;
  Conv<float> box;
  Conv<float> cls;

  Head(int channels, const ModelConfig& cfg, Rng& rng)
      : stem(channels, channels, 3, 1, rng),
        box(channels, cfg.box_channels(), 1, rng, cfg.use_dfl ? 1.0f : 0.5f),
        cls(channels, cfg.num_classes, 1, rng, -std::log((1.0f - 0.01f) / 0.01f)) {}

  LevelOutput operator()(const Tensorf& f, Level level, bool training) {
    auto s = stem(f, training);
    return {level, level_stride(level), box(s), cls(s)};
  }

  void collect(ParamList<float>& out, const std::string& prefix) const {
    stem.collect(out, prefix + ".stem");
    box.collect(out, prefix + ".box");
    cls.collect(out, prefix + ".cls");
  }
};

}  // namespace

struct Detector::Impl {
  // backbone
  ConvBNAct<float> stem, down2, down3, down4;
  C3<float> c3_2, c3_3, c3_4;
  SPPLite<float> spp;
  // neck
  ConvBNAct<float> lat4, lat3;
  C3<float> fuse3, fuse2;
  std::map<Level, DualAttention<float>> attention;
  std::map<Level, Head> o2m_heads, o2o_heads;
  std::map<Level, int> level_channels;

  Impl(const ModelConfig& cfg, Rng& rng) {
    const auto w = cfg.widths();
    const int d = cfg.depth();
    stem = ConvBNAct<float>(3, w[0], 3, 2, rng);
    down2 = ConvBNAct<float>(w[0], w[1], 3, 2, rng);
    c3_2 = C3<float>(w[1], w[1], d, rng);
    down3 = ConvBNAct<float>(w[1], w[2], 3, 2, rng);
    c3_3 = C3<float>(w[2], w[2], d, rng);
    down4 = ConvBNAct<float>(w[2], w[3], 3, 2, rng);
    c3_4 = C3<float>(w[3], w[3], d, rng);
    spp = SPPLite<float>(w[3], rng);

    lat4 = ConvBNAct<float>(w[3], w[2], 1, 1, rng);
    fuse3 = C3<float>(2 * w[2], w[2], d, rng);
    if (cfg.has_level(Level::P2)) {
      lat3 = ConvBNAct<float>(w[2], w[1], 1, 1, rng);
      fuse2 = C3<float>(2 * w[1], w[1], d, rng);
    }
    level_channels = {{Level::P2, w[1]}, {Level::P3, w[2]}, {Level::P4, w[3]}};
    for (Level l : cfg.levels) {
      const int c = level_channels.at(l);
      if (cfg.use_attention) attention.emplace(l, DualAttention<float>(c, rng));
      o2m_heads.emplace(l, Head(c, cfg, rng));
      if (cfg.o2o_head && !cfg.o2o_shared) o2o_heads.emplace(l, Head(c, cfg, rng));
    }
  }
};

Detector::Detector(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
  cfg_.validate();
  std::sort(cfg_.levels.begin(), cfg_.levels.end());
  cfg_.levels.erase(std::unique(cfg_.levels.begin(), cfg_.levels.end()), cfg_.levels.end());
  Rng rng(seed);
  impl_ = std::make_unique<Impl>(cfg_, rng);
}

Detector::~Detector() = default;
Detector::Detector(Detector&&) noexcept = default;
Detector& Detector::operator=(Detector&&) noexcept = default;

RawPredictions Detector::forward(const Tensorf& images, bool training) {
  if (images.rank() != 4 || images.dim(1) != 3 || images.dim(2) != cfg_.input_size ||
      images.dim(3) != cfg_.input_size) {
    throw ShapeError("detector expects [N,3," + std::to_string(cfg_.input_size) + "," +
                     std::to_string(cfg_.input_size) + "], got " + shape_str(images.shape()));
  }
  auto& m = *impl_;
  auto x1 = m.stem(images, training);
  auto x2 = m.c3_2(m.down2(x1, training), training);
  auto x3 = m.c3_3(m.down3(x2, training), training);
  auto x4 = m.spp(m.c3_4(m.down4(x3, training), training), training);

  std::map<Level, Tensorf> features;
  features[Level::P4] = x4;
  auto p3 = m.fuse3(concat<float>({upsample_nearest2x(m.lat4(x4, training)), x3}, 1), training);
  features[Level::P3] = p3;
  if (cfg_.has_level(Level::P2)) {
    features[Level::P2] = m.fuse2(concat<float>({upsample_nearest2x(m.lat3(p3, training)), x2}, 1), training);
  }

  RawPredictions out;
  out.input_size = cfg_.input_size;
  out.num_classes = cfg_.num_classes;
  out.use_dfl = cfg_.use_dfl;
  out.dfl_bins = cfg_.dfl_bins;
  for (Level l : cfg_.levels) {
    Tensorf f = features.at(l);
    if (cfg_.use_attention) f = m.attention.at(l)(f);
    out.o2m.push_back(m.o2m_heads.at(l)(f, l, training));
    if (cfg_.o2o_head) {
      out.o2o.push_back(cfg_.o2o_shared ? out.o2m.back() : m.o2o_heads.at(l)(f, l, training));
    }
  }
  return out;
}

ParamList<float> Detector::parameters() const {
  ParamList<float> out;
  const auto& m = *impl_;
  m.stem.collect(out, "backbone.stem");
  m.down2.collect(out, "backbone.down2");
  m.c3_2.collect(out, "backbone.c3_2");
  m.down3.collect(out, "backbone.down3");
  m.c3_3.collect(out, "backbone.c3_3");
  m.down4.collect(out, "backbone.down4");
  m.c3_4.collect(out, "backbone.c3_4");
  m.spp.collect(out, "backbone.spp");
  m.lat4.collect(out, "neck.lat4");
  m.fuse3.collect(out, "neck.fuse3");
  if (cfg_.has_level(Level::P2)) {
    m.lat3.collect(out, "neck.lat3");
    m.fuse2.collect(out, "neck.fuse2");
  }
  for (Level l : cfg_.levels) {
    const std::string ln = level_name(l);
    if (cfg_.use_attention) m.attention.at(l).collect(out, "attention." + ln);
    m.o2m_heads.at(l).collect(out, "head.o2m." + ln);
    if (cfg_.o2o_head && !cfg_.o2o_shared) m.o2o_heads.at(l).collect(out, "head.o2o." + ln);
  }
  return out;
}

std::size_t Detector::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : parameters())
    if (p.trainable) n += p.tensor.numel();
  return n;
}

NamedTensors Detector::state() const {
  NamedTensors out = encode_model_config(cfg_);
  for (const auto& p : parameters()) out.emplace_back(p.name, p.tensor.clone());
  return out;
}

void Detector::load_state(const NamedTensors& tensors) {
  std::map<std::string, const Tensorf*> by_name;
  for (const auto& [name, t] : tensors) by_name[name] = &t;
  for (auto& p : parameters()) {
    auto it = by_name.find(p.name);
    if (it == by_name.end()) throw FormatError("checkpoint is missing tensor '" + p.name + "'");
    if (it->second->shape() != p.tensor.shape()) {
      throw FormatError("checkpoint tensor '" + p.name + "' has shape " + shape_str(it->second->shape()) +
                        ", model expects " + shape_str(p.tensor.shape()));
    }
    auto dst = p.tensor.data();
    std::copy(it->second->data().begin(), it->second->data().end(), dst.begin());
  }
}

void Detector::save(const std::filesystem::path& path) const { save_tensors(path, state()); }

Detector Detector::load(const std::filesystem::path& path) {
  const auto tensors = load_tensors(path);
  Detector det(decode_model_config(tensors), 0);
  det.load_state(tensors);
  return det;
}

namespace {
constexpr const char* kConfigTensor = "meta.model_config";
constexpr float kConfigVersion = 1.0f;
}  // namespace

NamedTensors encode_model_config(const ModelConfig& cfg) {
  float level_mask = 0;
  for (Level l : cfg.levels) level_mask += static_cast<float>(1 << static_cast<int>(l));
  std::vector<float> v{kConfigVersion,
                       static_cast<float>(cfg.input_size),
                       static_cast<float>(cfg.width_multiple),
                       static_cast<float>(cfg.depth_multiple),
                       static_cast<float>(cfg.num_classes),
                       level_mask,
                       cfg.use_attention ? 1.0f : 0.0f,
                       cfg.use_dfl ? 1.0f : 0.0f,
                       static_cast<float>(cfg.dfl_bins),
                       cfg.o2o_head ? 1.0f : 0.0f,
                       cfg.o2o_shared ? 1.0f : 0.0f};
  const int n = static_cast<int>(v.size());
  NamedTensors out;
  out.emplace_back(kConfigTensor, Tensorf({n}, std::move(v)));
  return out;
}

ModelConfig decode_model_config(const NamedTensors& tensors) {
  for (const auto& [name, t] : tensors) {
    if (name != kConfigTensor) continue;
    if (t.numel() != 11 || t.data()[0] != kConfigVersion) throw FormatError("unsupported model config record");
    const auto v = t.data();
    ModelConfig cfg;
    cfg.input_size = static_cast<int>(v[1]);
    cfg.width_multiple = v[2];
    cfg.depth_multiple = v[3];
    cfg.num_classes = static_cast<int>(v[4]);
    const int mask = static_cast<int>(v[5]);
    cfg.levels.clear();
    for (Level l : {Level::P2, Level::P3, Level::P4})
      if (mask & (1 << static_cast<int>(l))) cfg.levels.push_back(l);
    cfg.use_attention = v[6] != 0;
    cfg.use_dfl = v[7] != 0;
    cfg.dfl_bins = static_cast<int>(v[8]);
    cfg.o2o_head = v[9] != 0;
    cfg.o2o_shared = v[10] != 0;
    cfg.validate();
    return cfg;
  }
  throw FormatError("checkpoint has no model config record");
}

}  // namespace microdet
