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
#ifndef MICRODET_OPTIMIZER_HPP
#define MICRODET_OPTIMIZER_HPP

#include <Eigen/Core>
#include <cmath>
#include <string>
#include <vector>

#include "microdet/error.hpp"
#include "microdet/nn.hpp"

namespace microdet {

/// X <- a X + b (X X^T) X + c (X X^T)^2 X
struct NsCoefficients {
  double a = 3.4445;
  double b = -4.7750;
  double c = 2.0315;
};

/// Approximate orthogonal factor U V^T of `g` by Newton-Schulz iteration on
/// g / ||g||_F. A zero matrix returns zero.
template <typename Derived>
Eigen::Matrix<typename Derived::Scalar, Eigen::Dynamic, Eigen::Dynamic> newton_schulz(
    const Eigen::MatrixBase<Derived>& g, int steps, const NsCoefficients& k = {}) {
  using S = typename Derived::Scalar;
  using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;
  if (steps < 1) throw Error("newton_schulz needs steps >= 1, got " + std::to_string(steps));
  if (!g.allFinite()) throw Error("newton_schulz input is not finite");
  const S peak = g.cwiseAbs().maxCoeff();
  if (peak == S(0)) return Mat::Zero(g.rows(), g.cols());
  // Iterate on the wide orientation so the Gram matrix is the smaller one.
  const bool tall = g.rows() > g.cols();
  Mat x = tall ? Mat(g.transpose() / peak) : Mat(g / peak);
  x /= x.norm();
  const S a = S(k.a), b = S(k.b), c = S(k.c);
  for (int i = 0; i < steps; ++i) {
    const Mat gram = x * x.transpose();
    const Mat poly = b * gram + c * gram * gram;
    x = a * x + poly * x;
  }
  if (tall) x.transposeInPlace();
  return x;
}

struct MuSGDConfig {
  double muon_lr = 0.005;
  double sgd_lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 5e-4;  // rank >= 2 parameters only
  int ns_steps = 5;
  NsCoefficients ns;
  bool muon_enabled = true;    // false: every parameter takes the SGD path
  bool backbone_only = false;  // matrix path only for "backbone." parameters
};

enum class UpdatePath { matrix, sgd };

/// Hybrid optimizer. SGD path: buf <- mu buf + (g + wd w); w <- w - lr buf,
/// with wd = 0 for rank <= 1. Matrix path (rank >= 2, kernels flattened to
/// [out, rest]): buf <- mu buf + g;
/// w <- w - muon_lr * (wd w + sqrt(max(m,k)) * newton_schulz(buf)).
/// Both rates are multiplied by the factor passed to step().
template <typename S>
class MuSGD {
 public:
  MuSGD(const ParamList<S>& params, MuSGDConfig cfg);

  /// Throws Error naming the first parameter with a non-finite gradient,
  /// before anything is modified. Parameters without a gradient are skipped.
  void step(double lr_factor = 1.0);
  void zero_grad();

  std::size_t size() const { return params_.size(); }
  const NamedParam<S>& param(std::size_t i) const { return params_[i]; }
  UpdatePath path(std::size_t i) const { return paths_[i]; }
  std::size_t count(UpdatePath p) const;
  const MuSGDConfig& config() const { return cfg_; }

 private:
  MuSGDConfig cfg_;
  ParamList<S> params_;
  std::vector<UpdatePath> paths_;
  std::vector<std::vector<S>> momentum_;
};

/// Cosine decay from 1 at step 0 to `final_fraction` at `total_steps`.
double cosine_factor(int step, int total_steps, double final_fraction = 0.01);

}  // namespace microdet

#endif  // MICRODET_OPTIMIZER_HPP
