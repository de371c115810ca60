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
#include "microdet/optimizer.hpp"

#include <algorithm>
#include <numbers>

namespace microdet {

template <typename S>
MuSGD<S>::MuSGD(const ParamList<S>& params, MuSGDConfig cfg) : cfg_(std::move(cfg)) {
  if (cfg_.ns_steps < 1) throw Error("optimizer ns_steps must be >= 1");
  if (cfg_.momentum < 0 || cfg_.momentum >= 1) throw Error("optimizer momentum must lie in [0,1)");
  for (const auto& p : params) {
    if (!p.trainable) continue;
    bool matrix = cfg_.muon_enabled && p.tensor.rank() >= 2;
    if (cfg_.backbone_only && p.name.rfind("backbone.", 0) != 0) matrix = false;
    params_.push_back(p);
    paths_.push_back(matrix ? UpdatePath::matrix : UpdatePath::sgd);
    momentum_.emplace_back(p.tensor.numel(), S(0));
  }
}

template <typename S>
std::size_t MuSGD<S>::count(UpdatePath p) const {
  return static_cast<std::size_t>(std::count(paths_.begin(), paths_.end(), p));
}

template <typename S>
void MuSGD<S>::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

template <typename S>
void MuSGD<S>::step(double lr_factor) {
  for (const auto& p : params_) {
    if (!p.tensor.has_grad()) continue;
    for (S g : p.tensor.grad()) {
      if (!std::isfinite(g)) throw Error("non-finite gradient in parameter " + p.name);
    }
  }
  const S mu = S(cfg_.momentum);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor<S>& t = params_[i].tensor;
    if (!t.has_grad()) continue;
    auto w = t.data();
    auto g = t.grad();
    auto& buf = momentum_[i];
    const S wd = t.rank() >= 2 ? S(cfg_.weight_decay) : S(0);
    if (paths_[i] == UpdatePath::sgd) {
      const S lr = S(cfg_.sgd_lr * lr_factor);
      for (std::size_t j = 0; j < w.size(); ++j) {
        buf[j] = mu * buf[j] + (g[j] + wd * w[j]);
        w[j] = w[j] - lr * buf[j];
      }
      continue;
    }
    for (std::size_t j = 0; j < w.size(); ++j) buf[j] = mu * buf[j] + g[j];
    using RowMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    const Eigen::Index rows = t.dim(0), cols = static_cast<Eigen::Index>(t.numel()) / rows;
    Eigen::Map<RowMat> wm(w.data(), rows, cols);
    const Eigen::Map<const RowMat> bm(buf.data(), rows, cols);
    const S lr = S(cfg_.muon_lr * lr_factor);
    const S shape_scale = std::sqrt(S(std::max(rows, cols)));
    if (wd != S(0)) wm -= (lr * wd) * wm;
    wm -= (lr * shape_scale) * newton_schulz(bm, cfg_.ns_steps, cfg_.ns);
  }
}

double cosine_factor(int step, int total_steps, double final_fraction) {
  if (total_steps <= 0) return 1.0;
  const double progress = std::clamp(double(step) / total_steps, 0.0, 1.0);
  return final_fraction + (1.0 - final_fraction) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

template class MuSGD<float>;
template class MuSGD<double>;

}  // namespace microdet
