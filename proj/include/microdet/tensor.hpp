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

#ifndef MICRODET_TENSOR_HPP
#define MICRODET_TENSOR_HPP

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "microdet/error.hpp"

namespace microdet {

using Shape = std::vector<int>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

template <typename Scalar>
class Tensor;

template <typename Scalar>
struct TensorStorage;

// One recorded operation. The backward rule reads the output's value and
// gradient and accumulates into the inputs' gradients.
template <typename Scalar>
struct OpNode {
  std::string name;
  std::vector<Tensor<Scalar>> inputs;
  std::function<void(const TensorStorage<Scalar>& out)> backward;
};

template <typename Scalar>
struct TensorStorage {
  Shape shape;
  std::vector<Scalar> data;
  std::vector<Scalar> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::shared_ptr<OpNode<Scalar>> creator;
};

/// Dense row-major N-d array with optional reverse-mode gradient.
///
/// Copies are shallow: two Tensor objects may share one storage, the same
/// way a graph edge refers to its producer. Use clone() for a deep copy.
template <typename Scalar>
class Tensor {
 public:
  using value_type = Scalar;

  Tensor() = default;
  Tensor(Shape shape, std::vector<Scalar> data);
  explicit Tensor(Shape shape, Scalar fill = Scalar(0));

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), Scalar(0)); }
  static Tensor full(Shape shape, Scalar v) { return Tensor(std::move(shape), v); }
  static Tensor scalar(Scalar v) { return Tensor(Shape{}, std::vector<Scalar>{v}); }

  bool defined() const { return static_cast<bool>(impl_); }
  const Shape& shape() const { return impl_->shape; }
  int rank() const { return static_cast<int>(impl_->shape.size()); }
  int dim(int axis) const;
  std::size_t numel() const { return impl_->data.size(); }

  std::span<Scalar> data() { return impl_->data; }
  std::span<const Scalar> data() const { return impl_->data; }
  std::vector<Scalar>& values() { return impl_->data; }
  const std::vector<Scalar>& values() const { return impl_->data; }
  Scalar item() const;

  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<Scalar> grad() { return impl_->grad; }
  std::span<const Scalar> grad() const { return impl_->grad; }
  /// Gradient buffer, allocated as zeros on first use.
  std::vector<Scalar>& grad_buffer() const;
  void zero_grad();

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool on = true);

  const OpNode<Scalar>* creator() const { return impl_->creator.get(); }

  /// Deep copy of the values, detached from any graph.
  Tensor clone() const;
  Tensor detach() const { return clone(); }

  TensorStorage<Scalar>* storage() const { return impl_.get(); }
  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  std::shared_ptr<TensorStorage<Scalar>> impl_;
};

using Tensorf = Tensor<float>;
using Tensord = Tensor<double>;

// ---------------------------------------------------------------------------
// Graph recording

/// Disables graph recording on this thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

/// Builds an op result. If recording is on and any input requires grad, the
/// result gets a creator node holding `backward`.
template <typename Scalar>
Tensor<Scalar> record(std::string name, Shape shape, std::vector<Scalar> data,
                      std::vector<Tensor<Scalar>> inputs,
                      std::function<void(const TensorStorage<Scalar>&)> backward);

/// Ops reachable from `root`, inputs before consumers.
template <typename Scalar>
std::vector<const OpNode<Scalar>*> trace(const Tensor<Scalar>& root);

/// Reverse pass from a scalar. Gradients accumulate; call zero_grad between
/// steps (a second backward on the same graph doubles every gradient).
template <typename Scalar>
void backward(const Tensor<Scalar>& loss);

// ---------------------------------------------------------------------------
// Element ops. Shapes must match exactly unless stated otherwise.

template <typename S> Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b);
template <typename S> Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b);
template <typename S> Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b);
template <typename S> Tensor<S> scale(const Tensor<S>& a, S factor);
template <typename S> Tensor<S> add_scalar(const Tensor<S>& a, S value);
/// x[N,C,...] + bias[C]
template <typename S> Tensor<S> add_bias(const Tensor<S>& x, const Tensor<S>& bias);
/// x[N,C,H,W] * s[N,C] (channel gate)
template <typename S> Tensor<S> mul_channel(const Tensor<S>& x, const Tensor<S>& s);
/// x[N,C,H,W] * m[N,1,H,W] (spatial gate)
template <typename S> Tensor<S> mul_spatial(const Tensor<S>& x, const Tensor<S>& m);

template <typename S> Tensor<S> sigmoid(const Tensor<S>& x);
template <typename S> Tensor<S> silu(const Tensor<S>& x);
template <typename S> Tensor<S> softplus(const Tensor<S>& x);
template <typename S> Tensor<S> relu(const Tensor<S>& x);
template <typename S> Tensor<S> exp(const Tensor<S>& x);
template <typename S> Tensor<S> log(const Tensor<S>& x);
template <typename S> Tensor<S> softmax(const Tensor<S>& x, int axis);
template <typename S> Tensor<S> log_softmax(const Tensor<S>& x, int axis);

template <typename S> Tensor<S> sum(const Tensor<S>& x);
template <typename S> Tensor<S> mean(const Tensor<S>& x);
/// Elementwise binary cross-entropy on logits against targets in [0,1].
template <typename S> Tensor<S> bce_with_logits(const Tensor<S>& logits, const Tensor<S>& targets);

// Shape ops
template <typename S> Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b);
template <typename S> Tensor<S> transpose(const Tensor<S>& a);
template <typename S> Tensor<S> reshape(const Tensor<S>& x, Shape shape);
template <typename S> Tensor<S> permute(const Tensor<S>& x, const std::vector<int>& order);
template <typename S> Tensor<S> concat(const std::vector<Tensor<S>>& xs, int axis);

// Spatial ops on [N,C,H,W]
template <typename S>
Tensor<S> conv2d(const Tensor<S>& input, const Tensor<S>& kernel, int stride, int pad);
template <typename S> Tensor<S> max_pool2d(const Tensor<S>& x, int kernel, int stride, int pad);
template <typename S> Tensor<S> avg_pool2d(const Tensor<S>& x, int kernel, int stride, int pad);
/// [N,C,H,W] -> [N,C]
template <typename S> Tensor<S> global_avg_pool(const Tensor<S>& x);
/// [N,C,H,W] -> [N,1,H,W]
template <typename S> Tensor<S> channel_mean(const Tensor<S>& x);
template <typename S> Tensor<S> channel_max(const Tensor<S>& x);
template <typename S> Tensor<S> upsample_nearest2x(const Tensor<S>& x);

/// Batch normalization over (N,H,W) per channel. In training mode the batch
/// statistics are used and the running buffers are updated in place.
template <typename S>
Tensor<S> batch_norm(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta,
                     Tensor<S>& running_mean, Tensor<S>& running_var, bool training,
                     S momentum = S(0.03), S eps = S(1e-3));

}  // namespace microdet

#endif  // MICRODET_TENSOR_HPP
