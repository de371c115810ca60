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

#ifndef MICRODET_NN_HPP
#define MICRODET_NN_HPP

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "microdet/tensor.hpp"

namespace microdet {

/// A named handle on a parameter or buffer. Tensors are shallow handles, so
/// writing through `tensor.data()` updates the owning block.
template <typename S>
struct NamedParam {
  std::string name;
  Tensor<S> tensor;
  bool trainable = true;
};

template <typename S>
using ParamList = std::vector<NamedParam<S>>;

using Rng = std::mt19937_64;

/// Uniform(-b, b) with b = gain / sqrt(fan_in).
template <typename S>
Tensor<S> init_uniform(Shape shape, int fan_in, Rng& rng, double gain = 1.0) {
  Tensor<S> t(std::move(shape), S(0));
  const double bound = gain / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (auto& v : t.data()) v = static_cast<S>(dist(rng));
  t.set_requires_grad(true);
  return t;
}

template <typename S>
Tensor<S> trainable(Shape shape, S fill) {
  Tensor<S> t(std::move(shape), fill);
  t.set_requires_grad(true);
  return t;
}

/// Convolution, batch norm and SiLU.
template <typename S>
class ConvBNAct {
 public:
  ConvBNAct() = default;
  ConvBNAct(int in, int out, int kernel, int stride, Rng& rng)
      : stride_(stride),
        pad_(kernel / 2),
        weight_(init_uniform<S>({out, in, kernel, kernel}, in * kernel * kernel, rng, std::sqrt(3.0))),
        gamma_(trainable<S>({out}, S(1))),
        beta_(trainable<S>({out}, S(0))),
        running_mean_({out}, S(0)),
        running_var_({out}, S(1)) {}

  Tensor<S> operator()(const Tensor<S>& x, bool training) {
    auto y = conv2d(x, weight_, stride_, pad_);
    y = batch_norm(y, gamma_, beta_, running_mean_, running_var_, training);
    return silu(y);
  }

  void collect(ParamList<S>& out, const std::string& prefix) const {
    out.push_back({prefix + ".weight", weight_, true});
    out.push_back({prefix + ".bn.gamma", gamma_, true});
    out.push_back({prefix + ".bn.beta", beta_, true});
    out.push_back({prefix + ".bn.running_mean", running_mean_, false});
    out.push_back({prefix + ".bn.running_var", running_var_, false});
  }

  Tensor<S>& weight() { return weight_; }
  Tensor<S>& beta() { return beta_; }

 private:
  int stride_ = 1;
  int pad_ = 0;
  Tensor<S> weight_, gamma_, beta_, running_mean_, running_var_;
};

/// Plain convolution with bias, used for prediction outputs.
template <typename S>
class Conv {
 public:
  Conv() = default;
  Conv(int in, int out, int kernel, Rng& rng, S bias_init = S(0))
      : pad_(kernel / 2),
        weight_(init_uniform<S>({out, in, kernel, kernel}, in * kernel * kernel, rng)),
        bias_(trainable<S>({out}, bias_init)) {}

  Tensor<S> operator()(const Tensor<S>& x) const { return add_bias(conv2d(x, weight_, 1, pad_), bias_); }

  void collect(ParamList<S>& out, const std::string& prefix) const {
    out.push_back({prefix + ".weight", weight_, true});
    out.push_back({prefix + ".bias", bias_, true});
  }

  Tensor<S>& weight() { return weight_; }
  Tensor<S>& bias() { return bias_; }

 private:
  int pad_ = 0;
  Tensor<S> weight_, bias_;
};

template <typename S>
class Bottleneck {
 public:
  Bottleneck() = default;
  Bottleneck(int channels, Rng& rng) : cv1_(channels, channels, 1, 1, rng), cv2_(channels, channels, 3, 1, rng) {}

  Tensor<S> operator()(const Tensor<S>& x, bool training) { return add(x, cv2_(cv1_(x, training), training)); }

  void collect(ParamList<S>& out, const std::string& prefix) const {
    cv1_.collect(out, prefix + ".cv1");
    cv2_.collect(out, prefix + ".cv2");
  }

  ConvBNAct<S>& cv1() { return cv1_; }
  ConvBNAct<S>& cv2() { return cv2_; }

 private:
  ConvBNAct<S> cv1_, cv2_;
};

/// CSP bottleneck with three convolutions: two half-width 1x1 branches, one
/// through `n` residual bottlenecks, concatenated and fused by a 1x1.
template <typename S>
class C3 {
 public:
  C3() = default;
  C3(int in, int channels, int n_bottlenecks, Rng& rng) {
    if (channels % 2 != 0) throw ShapeError("C3 channel count must be even, got " + std::to_string(channels));
    if (n_bottlenecks < 1) throw ShapeError("C3 needs at least one bottleneck");
    const int hidden = channels / 2;
    cv1_ = ConvBNAct<S>(in, hidden, 1, 1, rng);
    cv2_ = ConvBNAct<S>(in, hidden, 1, 1, rng);
    for (int i = 0; i < n_bottlenecks; ++i) m_.emplace_back(hidden, rng);
    cv3_ = ConvBNAct<S>(2 * hidden, channels, 1, 1, rng);
  }

  Tensor<S> operator()(const Tensor<S>& x, bool training) {
    auto a = cv1_(x, training);
    for (auto& b : m_) a = b(a, training);
    return cv3_(concat<S>({a, cv2_(x, training)}, 1), training);
  }

  void collect(ParamList<S>& out, const std::string& prefix) const {
    cv1_.collect(out, prefix + ".cv1");
    cv2_.collect(out, prefix + ".cv2");
    for (std::size_t i = 0; i < m_.size(); ++i) m_[i].collect(out, prefix + ".m" + std::to_string(i));
    cv3_.collect(out, prefix + ".cv3");
  }

  std::vector<Bottleneck<S>>& bottlenecks() { return m_; }
  ConvBNAct<S>& cv1() { return cv1_; }
  ConvBNAct<S>& cv2() { return cv2_; }
  ConvBNAct<S>& cv3() { return cv3_; }

 private:
  ConvBNAct<S> cv1_, cv2_, cv3_;
  std::vector<Bottleneck<S>> m_;
};

/// Functional form: builds a C3 with fresh weights from `rng` and applies it.
template <typename S>
Tensor<S> c3_block(const Tensor<S>& x, int channels, int n_bottlenecks, Rng& rng, bool training = true) {
  C3<S> block(x.dim(1), channels, n_bottlenecks, rng);
  return block(x, training);
}

/// Fast spatial pyramid pooling: three chained 5x5 max pools.
template <typename S>
class SPPLite {
 public:
  SPPLite() = default;
  SPPLite(int channels, Rng& rng)
      : cv1_(channels, channels / 2, 1, 1, rng), cv2_(2 * channels, channels, 1, 1, rng) {}

  Tensor<S> operator()(const Tensor<S>& x, bool training) {
    auto a = cv1_(x, training);
    auto p1 = max_pool2d(a, 5, 1, 2);
    auto p2 = max_pool2d(p1, 5, 1, 2);
    auto p3 = max_pool2d(p2, 5, 1, 2);
    return cv2_(concat<S>({a, p1, p2, p3}, 1), training);
  }

  void collect(ParamList<S>& out, const std::string& prefix) const {
    cv1_.collect(out, prefix + ".cv1");
    cv2_.collect(out, prefix + ".cv2");
  }

 private:
  ConvBNAct<S> cv1_, cv2_;
};

/// Channel gate sigmoid(W_c * GAP(F)) times spatial gate
/// sigmoid(conv7x7([mean_c F; max_c F])), applied multiplicatively to F.
template <typename S>
class DualAttention {
 public:
  DualAttention() = default;
  DualAttention(int channels, Rng& rng)
      : channel_weights_(init_uniform<S>({channels, channels}, channels, rng)),
        spatial_kernel_(init_uniform<S>({1, 2, 7, 7}, 2 * 49, rng)) {}
  DualAttention(Tensor<S> channel_weights, Tensor<S> spatial_kernel)
      : channel_weights_(std::move(channel_weights)), spatial_kernel_(std::move(spatial_kernel)) {
    if (channel_weights_.rank() != 2 || channel_weights_.dim(0) != channel_weights_.dim(1)) {
      throw ShapeError("dual attention W_c must be square, got " + shape_str(channel_weights_.shape()));
    }
    if (spatial_kernel_.shape() != Shape{1, 2, 7, 7}) {
      throw ShapeError("dual attention spatial kernel must be [1,2,7,7], got " + shape_str(spatial_kernel_.shape()));
    }
  }

  int channels() const { return channel_weights_.dim(0); }

  /// [N,C] channel gate.
  Tensor<S> channel_gate(const Tensor<S>& f) const {
    check(f);
    return sigmoid(matmul(global_avg_pool(f), transpose(channel_weights_)));
  }

  /// [N,1,H,W] spatial gate.
  Tensor<S> spatial_gate(const Tensor<S>& f) const {
    check(f);
    auto pooled = concat<S>({channel_mean(f), channel_max(f)}, 1);
    return sigmoid(conv2d(pooled, spatial_kernel_, 1, 3));
  }

  Tensor<S> operator()(const Tensor<S>& f) const {
    return mul_spatial(mul_channel(f, channel_gate(f)), spatial_gate(f));
  }

  void collect(ParamList<S>& out, const std::string& prefix) const {
    out.push_back({prefix + ".channel_weights", channel_weights_, true});
    out.push_back({prefix + ".spatial_kernel", spatial_kernel_, true});
  }

  Tensor<S>& channel_weights() { return channel_weights_; }
  Tensor<S>& spatial_kernel() { return spatial_kernel_; }

 private:
  void check(const Tensor<S>& f) const {
    if (f.rank() != 4 || f.dim(1) != channels()) {
      throw ShapeError("dual attention expects " + std::to_string(channels()) + " channels, got input " +
                       shape_str(f.shape()));
    }
  }

  Tensor<S> channel_weights_, spatial_kernel_;
};

template <typename S>
Tensor<S> dual_attention(const Tensor<S>& f, const DualAttention<S>& block) {
  return block(f);
}

}  // namespace microdet

#endif  // MICRODET_NN_HPP
