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

#include "microdet/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include <Eigen/Core>

#include "tensor_internal.hpp"

namespace microdet {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d < 0) throw ShapeError("negative dimension in " + shape_str(shape));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

// ---------------------------------------------------------------------------
// Tensor

template <typename Scalar>
Tensor<Scalar>::Tensor(Shape shape, std::vector<Scalar> data)
    : impl_(std::make_shared<TensorStorage<Scalar>>()) {
  if (shape_numel(shape) != data.size()) {
    throw ShapeError("shape " + shape_str(shape) + " holds " + std::to_string(shape_numel(shape)) +
                     " values, got " + std::to_string(data.size()));
  }
  impl_->shape = std::move(shape);
  impl_->data = std::move(data);
}

template <typename Scalar>
Tensor<Scalar>::Tensor(Shape shape, Scalar fill) : impl_(std::make_shared<TensorStorage<Scalar>>()) {
  impl_->data.assign(shape_numel(shape), fill);
  impl_->shape = std::move(shape);
}

template <typename Scalar>
int Tensor<Scalar>::dim(int axis) const {
  const int r = rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for rank " + std::to_string(r));
  }
  return impl_->shape[static_cast<std::size_t>(axis)];
}

template <typename Scalar>
Scalar Tensor<Scalar>::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return impl_->data[0];
}

template <typename Scalar>
std::vector<Scalar>& Tensor<Scalar>::grad_buffer() const {
  if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), Scalar(0));
  return impl_->grad;
}

template <typename Scalar>
void Tensor<Scalar>::zero_grad() {
  std::fill(impl_->grad.begin(), impl_->grad.end(), Scalar(0));
}

template <typename Scalar>
Tensor<Scalar>& Tensor<Scalar>::set_requires_grad(bool on) {
  impl_->requires_grad = on;
  return *this;
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::clone() const {
  return Tensor(impl_->shape, impl_->data);
}

// ---------------------------------------------------------------------------
// Recording

namespace {
thread_local bool g_grad_enabled = true;
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

template <typename Scalar>
Tensor<Scalar> record(std::string name, Shape shape, std::vector<Scalar> data,
                      std::vector<Tensor<Scalar>> inputs,
                      std::function<void(const TensorStorage<Scalar>&)> backward_rule) {
  Tensor<Scalar> out(std::move(shape), std::move(data));
  if (!g_grad_enabled) return out;
  const bool needs = std::any_of(inputs.begin(), inputs.end(),
                                 [](const Tensor<Scalar>& t) { return t.requires_grad(); });
  if (!needs) return out;
  auto node = std::make_shared<OpNode<Scalar>>();
  node->name = std::move(name);
  node->inputs = std::move(inputs);
  node->backward = std::move(backward_rule);
  out.set_requires_grad(true);
  out.storage()->creator = std::move(node);
  return out;
}

namespace {

template <typename Scalar>
std::vector<TensorStorage<Scalar>*> topo_storages(const Tensor<Scalar>& root) {
  std::vector<TensorStorage<Scalar>*> order;
  std::unordered_set<const TensorStorage<Scalar>*> seen;
  // Iterative post-order DFS; graphs of a detector are deep enough that
  // recursion would be a liability.
  std::vector<std::pair<TensorStorage<Scalar>*, std::size_t>> stack;
  stack.emplace_back(root.storage(), 0);
  seen.insert(root.storage());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    const auto* op = node->creator.get();
    if (op && next < op->inputs.size()) {
      TensorStorage<Scalar>* child = op->inputs[next++].storage();
      if (child->creator && seen.insert(child).second) stack.emplace_back(child, 0);
      continue;
    }
    order.push_back(node);
    stack.pop_back();
  }
  return order;
}

}  // namespace

template <typename Scalar>
std::vector<const OpNode<Scalar>*> trace(const Tensor<Scalar>& root) {
  std::vector<const OpNode<Scalar>*> ops;
  if (!root.defined() || !root.creator()) return ops;
  for (auto* s : topo_storages(root)) ops.push_back(s->creator.get());
  return ops;
}

template <typename Scalar>
void backward(const Tensor<Scalar>& loss) {
  if (loss.numel() != 1) {
    throw ShapeError("backward requires a scalar loss, got shape " + shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) return;
  auto order = topo_storages(loss);
  // Intermediate buffers are per-pass scratch; only leaves accumulate.
  for (TensorStorage<Scalar>* s : order) {
    if (s->creator) s->grad.clear();
  }
  auto* root = loss.storage();
  root->grad.assign(1, Scalar(1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorStorage<Scalar>* s = *it;
    if (s->grad.empty() || !s->creator) continue;
    s->creator->backward(*s);
  }
}

// ---------------------------------------------------------------------------
// Element ops

namespace {

template <typename S>
void check_same(const Tensor<S>& a, const Tensor<S>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()) + " are not compatible");
  }
}

template <typename S, typename F, typename DF>
Tensor<S> unary(const char* name, const Tensor<S>& x, F f, DF df) {
  std::vector<S> out(x.numel());
  const auto xd = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(xd[i]);
  return record<S>(name, x.shape(), std::move(out), {x}, [x, df](const TensorStorage<S>& o) mutable {
    auto& gx = x.grad_buffer();
    const auto xd = x.data();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += o.grad[i] * df(xd[i], o.data[i]);
  });
}

template <typename S>
S stable_sigmoid(S x) {
  if (x >= 0) return S(1) / (S(1) + std::exp(-x));
  const S e = std::exp(x);
  return e / (S(1) + e);
}

}  // namespace

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  check_same(a, b, "add");
  std::vector<S> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return record<S>("add", a.shape(), std::move(out), {a, b}, [a, b](const TensorStorage<S>& o) mutable {
    detail::accumulate(a, o.grad);
    detail::accumulate(b, o.grad);
  });
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  check_same(a, b, "sub");
  std::vector<S> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  return record<S>("sub", a.shape(), std::move(out), {a, b}, [a, b](const TensorStorage<S>& o) mutable {
    detail::accumulate(a, o.grad);
    if (b.requires_grad()) {
      auto& gb = b.grad_buffer();
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= o.grad[i];
    }
  });
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  check_same(a, b, "mul");
  std::vector<S> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return record<S>("mul", a.shape(), std::move(out), {a, b}, [a, b](const TensorStorage<S>& o) mutable {
    if (a.requires_grad()) {
      auto& ga = a.grad_buffer();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += o.grad[i] * b.data()[i];
    }
    if (b.requires_grad()) {
      auto& gb = b.grad_buffer();
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += o.grad[i] * a.data()[i];
    }
  });
}

template <typename S>
Tensor<S> scale(const Tensor<S>& a, S factor) {
  return unary<S>("scale", a, [factor](S v) { return v * factor; },
                  [factor](S, S) { return factor; });
}

template <typename S>
Tensor<S> add_scalar(const Tensor<S>& a, S value) {
  return unary<S>("add_scalar", a, [value](S v) { return v + value; }, [](S, S) { return S(1); });
}

template <typename S>
Tensor<S> add_bias(const Tensor<S>& x, const Tensor<S>& bias) {
  if (x.rank() < 2 || bias.rank() != 1 || bias.dim(0) != x.dim(1)) {
    throw ShapeError("add_bias: bias " + shape_str(bias.shape()) + " does not match channel dim of " +
                     shape_str(x.shape()));
  }
  const std::size_t n = static_cast<std::size_t>(x.dim(0));
  const std::size_t c = static_cast<std::size_t>(x.dim(1));
  const std::size_t inner = x.numel() / (n * c == 0 ? 1 : n * c);
  std::vector<S> out(x.values());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < c; ++k) {
      S* p = out.data() + (i * c + k) * inner;
      const S b = bias.data()[k];
      for (std::size_t j = 0; j < inner; ++j) p[j] += b;
    }
  return record<S>("add_bias", x.shape(), std::move(out), {x, bias},
                   [x, bias, n, c, inner](const TensorStorage<S>& o) mutable {
                     detail::accumulate(x, o.grad);
                     if (bias.requires_grad()) {
                       auto& gb = bias.grad_buffer();
                       for (std::size_t i = 0; i < n; ++i)
                         for (std::size_t k = 0; k < c; ++k) {
                           const S* g = o.grad.data() + (i * c + k) * inner;
                           S acc = 0;
                           for (std::size_t j = 0; j < inner; ++j) acc += g[j];
                           gb[k] += acc;
                         }
                     }
                   });
}

template <typename S>
Tensor<S> mul_channel(const Tensor<S>& x, const Tensor<S>& s) {
  if (x.rank() != 4 || s.rank() != 2 || s.dim(0) != x.dim(0) || s.dim(1) != x.dim(1)) {
    throw ShapeError("mul_channel: gate " + shape_str(s.shape()) + " does not match " +
                     shape_str(x.shape()));
  }
  const std::size_t nc = static_cast<std::size_t>(x.dim(0) * x.dim(1));
  const std::size_t hw = static_cast<std::size_t>(x.dim(2) * x.dim(3));
  std::vector<S> out(x.numel());
  for (std::size_t i = 0; i < nc; ++i)
    for (std::size_t j = 0; j < hw; ++j) out[i * hw + j] = x.data()[i * hw + j] * s.data()[i];
  return record<S>("mul_channel", x.shape(), std::move(out), {x, s},
                   [x, s, nc, hw](const TensorStorage<S>& o) mutable {
                     if (x.requires_grad()) {
                       auto& gx = x.grad_buffer();
                       for (std::size_t i = 0; i < nc; ++i)
                         for (std::size_t j = 0; j < hw; ++j) gx[i * hw + j] += o.grad[i * hw + j] * s.data()[i];
                     }
                     if (s.requires_grad()) {
                       auto& gs = s.grad_buffer();
                       for (std::size_t i = 0; i < nc; ++i) {
                         S acc = 0;
                         for (std::size_t j = 0; j < hw; ++j) acc += o.grad[i * hw + j] * x.data()[i * hw + j];
                         gs[i] += acc;
                       }
                     }
                   });
}

template <typename S>
Tensor<S> mul_spatial(const Tensor<S>& x, const Tensor<S>& m) {
  if (x.rank() != 4 || m.rank() != 4 || m.dim(0) != x.dim(0) || m.dim(1) != 1 ||
      m.dim(2) != x.dim(2) || m.dim(3) != x.dim(3)) {
    throw ShapeError("mul_spatial: map " + shape_str(m.shape()) + " does not match " +
                     shape_str(x.shape()));
  }
  const std::size_t n = static_cast<std::size_t>(x.dim(0));
  const std::size_t c = static_cast<std::size_t>(x.dim(1));
  const std::size_t hw = static_cast<std::size_t>(x.dim(2) * x.dim(3));
  std::vector<S> out(x.numel());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < c; ++k)
      for (std::size_t j = 0; j < hw; ++j)
        out[(i * c + k) * hw + j] = x.data()[(i * c + k) * hw + j] * m.data()[i * hw + j];
  return record<S>("mul_spatial", x.shape(), std::move(out), {x, m},
                   [x, m, n, c, hw](const TensorStorage<S>& o) mutable {
                     if (x.requires_grad()) {
                       auto& gx = x.grad_buffer();
                       for (std::size_t i = 0; i < n; ++i)
                         for (std::size_t k = 0; k < c; ++k)
                           for (std::size_t j = 0; j < hw; ++j)
                             gx[(i * c + k) * hw + j] += o.grad[(i * c + k) * hw + j] * m.data()[i * hw + j];
                     }
                     if (m.requires_grad()) {
                       auto& gm = m.grad_buffer();
                       for (std::size_t i = 0; i < n; ++i)
                         for (std::size_t k = 0; k < c; ++k)
                           for (std::size_t j = 0; j < hw; ++j)
                             gm[i * hw + j] += o.grad[(i * c + k) * hw + j] * x.data()[(i * c + k) * hw + j];
                     }
                   });
}

template <typename S>
Tensor<S> sigmoid(const Tensor<S>& x) {
  std::vector<S> out(x.numel());
  detail::chunked<S>(x.numel(), [&](std::size_t i, detail::Chunk<S>& v) {
    detail::load(v, x.data().data(), i, x.numel());
    v = S(1) / (S(1) + (-v).exp());
    detail::store(v, out.data(), i, x.numel());
  });
  return record<S>("sigmoid", x.shape(), std::move(out), {x}, [x](const TensorStorage<S>& o) mutable {
    auto& gx = x.grad_buffer();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += o.grad[i] * o.data[i] * (S(1) - o.data[i]);
  });
}

template <typename S>
Tensor<S> silu(const Tensor<S>& x) {
  std::vector<S> out(x.numel());
  detail::chunked<S>(x.numel(), [&](std::size_t i, detail::Chunk<S>& v) {
    detail::load(v, x.data().data(), i, x.numel());
    v = v / (S(1) + (-v).exp());
    detail::store(v, out.data(), i, x.numel());
  });
  return record<S>("silu", x.shape(), std::move(out), {x}, [x](const TensorStorage<S>& o) mutable {
    auto& gx = x.grad_buffer();
    const std::size_t n = gx.size();
    detail::chunked<S>(n, [&](std::size_t i, detail::Chunk<S>& v) {
      detail::load(v, x.data().data(), i, n);
      detail::Chunk<S> g;
      detail::load(g, o.grad.data(), i, n);
      const detail::Chunk<S> sig = S(1) / (S(1) + (-v).exp());
      v = g * sig * (S(1) + v * (S(1) - sig));
      for (int k = 0; k < detail::kChunk && i + k < n; ++k) gx[i + k] += v[k];
    });
  });
}

template <typename S>
Tensor<S> softplus(const Tensor<S>& x) {
  return unary<S>("softplus", x,
                  [](S v) { return std::max(v, S(0)) + std::log1p(std::exp(-std::abs(v))); },
                  [](S v, S) { return stable_sigmoid(v); });
}

template <typename S>
Tensor<S> relu(const Tensor<S>& x) {
  return unary<S>("relu", x, [](S v) { return v > 0 ? v : S(0); },
                  [](S v, S) { return v > 0 ? S(1) : S(0); });
}

template <typename S>
Tensor<S> exp(const Tensor<S>& x) {
  return unary<S>("exp", x, [](S v) { return std::exp(v); }, [](S, S y) { return y; });
}

template <typename S>
Tensor<S> log(const Tensor<S>& x) {
  return unary<S>("log", x, [](S v) { return std::log(v); }, [](S v, S) { return S(1) / v; });
}

namespace {

struct AxisSplit {
  std::size_t outer, n, inner;
};

template <typename S>
AxisSplit split_axis(const Tensor<S>& x, int axis, const char* op) {
  const int r = x.rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for shape " +
                     shape_str(x.shape()));
  }
  AxisSplit s{1, static_cast<std::size_t>(x.shape()[static_cast<std::size_t>(axis)]), 1};
  for (int i = 0; i < axis; ++i) s.outer *= static_cast<std::size_t>(x.shape()[static_cast<std::size_t>(i)]);
  for (int i = axis + 1; i < r; ++i) s.inner *= static_cast<std::size_t>(x.shape()[static_cast<std::size_t>(i)]);
  return s;
}

}  // namespace

template <typename S>
Tensor<S> softmax(const Tensor<S>& x, int axis) {
  const AxisSplit sp = split_axis(x, axis, "softmax");
  std::vector<S> out(x.numel());
  const auto xd = x.data();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t in = 0; in < sp.inner; ++in) {
      const std::size_t base = o * sp.n * sp.inner + in;
      S mx = -std::numeric_limits<S>::infinity();
      for (std::size_t k = 0; k < sp.n; ++k) mx = std::max(mx, xd[base + k * sp.inner]);
      S z = 0;
      for (std::size_t k = 0; k < sp.n; ++k) z += (out[base + k * sp.inner] = std::exp(xd[base + k * sp.inner] - mx));
      for (std::size_t k = 0; k < sp.n; ++k) out[base + k * sp.inner] /= z;
    }
  return record<S>("softmax", x.shape(), std::move(out), {x}, [x, sp](const TensorStorage<S>& o) mutable {
    auto& gx = x.grad_buffer();
    for (std::size_t oo = 0; oo < sp.outer; ++oo)
      for (std::size_t in = 0; in < sp.inner; ++in) {
        const std::size_t base = oo * sp.n * sp.inner + in;
        S dot = 0;
        for (std::size_t k = 0; k < sp.n; ++k) dot += o.grad[base + k * sp.inner] * o.data[base + k * sp.inner];
        for (std::size_t k = 0; k < sp.n; ++k) {
          const std::size_t i = base + k * sp.inner;
          gx[i] += o.data[i] * (o.grad[i] - dot);
        }
      }
  });
}

template <typename S>
Tensor<S> log_softmax(const Tensor<S>& x, int axis) {
  const AxisSplit sp = split_axis(x, axis, "log_softmax");
  std::vector<S> out(x.numel());
  const auto xd = x.data();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t in = 0; in < sp.inner; ++in) {
      const std::size_t base = o * sp.n * sp.inner + in;
      S mx = -std::numeric_limits<S>::infinity();
      for (std::size_t k = 0; k < sp.n; ++k) mx = std::max(mx, xd[base + k * sp.inner]);
      S z = 0;
      for (std::size_t k = 0; k < sp.n; ++k) z += std::exp(xd[base + k * sp.inner] - mx);
      const S lse = mx + std::log(z);
      for (std::size_t k = 0; k < sp.n; ++k) out[base + k * sp.inner] = xd[base + k * sp.inner] - lse;
    }
  return record<S>("log_softmax", x.shape(), std::move(out), {x}, [x, sp](const TensorStorage<S>& o) mutable {
    auto& gx = x.grad_buffer();
    for (std::size_t oo = 0; oo < sp.outer; ++oo)
      for (std::size_t in = 0; in < sp.inner; ++in) {
        const std::size_t base = oo * sp.n * sp.inner + in;
        S gsum = 0;
        for (std::size_t k = 0; k < sp.n; ++k) gsum += o.grad[base + k * sp.inner];
        for (std::size_t k = 0; k < sp.n; ++k) {
          const std::size_t i = base + k * sp.inner;
          gx[i] += o.grad[i] - std::exp(o.data[i]) * gsum;
        }
      }
  });
}

template <typename S>
Tensor<S> sum(const Tensor<S>& x) {
  S acc = 0;
  for (S v : x.data()) acc += v;
  return record<S>("sum", Shape{}, {acc}, {x}, [x](const TensorStorage<S>& o) mutable {
    auto& gx = x.grad_buffer();
    for (auto& g : gx) g += o.grad[0];
  });
}

template <typename S>
Tensor<S> mean(const Tensor<S>& x) {
  if (x.numel() == 0) throw ShapeError("mean of empty tensor");
  S acc = 0;
  for (S v : x.data()) acc += v;
  const S inv = S(1) / static_cast<S>(x.numel());
  return record<S>("mean", Shape{}, {acc * inv}, {x}, [x, inv](const TensorStorage<S>& o) mutable {
    auto& gx = x.grad_buffer();
    for (auto& g : gx) g += o.grad[0] * inv;
  });
}

template <typename S>
Tensor<S> bce_with_logits(const Tensor<S>& logits, const Tensor<S>& targets) {
  check_same(logits, targets, "bce_with_logits");
  std::vector<S> out(logits.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const S x = logits.data()[i];
    const S t = targets.data()[i];
    out[i] = std::max(x, S(0)) - x * t + std::log1p(std::exp(-std::abs(x)));
  }
  return record<S>("bce_with_logits", logits.shape(), std::move(out), {logits, targets},
                   [logits, targets](const TensorStorage<S>& o) mutable {
                     if (logits.requires_grad()) {
                       auto& g = logits.grad_buffer();
                       for (std::size_t i = 0; i < g.size(); ++i)
                         g[i] += o.grad[i] * (stable_sigmoid(logits.data()[i]) - targets.data()[i]);
                     }
                     if (targets.requires_grad()) {
                       auto& g = targets.grad_buffer();
                       for (std::size_t i = 0; i < g.size(); ++i) g[i] -= o.grad[i] * logits.data()[i];
                     }
                   });
}

// ---------------------------------------------------------------------------
// Shape ops

template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.rank() != 2 || b.rank() != 2) {
    throw ShapeError("matmul expects rank-2 operands, got " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  }
  if (a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul inner dimension mismatch: " + std::to_string(a.dim(1)) + " vs " +
                     std::to_string(b.dim(0)));
  }
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<S> out(static_cast<std::size_t>(m) * static_cast<std::size_t>(n));
  detail::MapMat<S>(out.data(), m, n).noalias() = detail::cmap(a, m, k) * detail::cmap(b, k, n);
  return record<S>("matmul", Shape{m, n}, std::move(out), {a, b}, [a, b, m, k, n](const TensorStorage<S>& o) mutable {
    const auto g = detail::ConstMapMat<S>(o.grad.data(), m, n);
    if (a.requires_grad()) {
      detail::MapMat<S>(a.grad_buffer().data(), m, k).noalias() += g * detail::cmap(b, k, n).transpose();
    }
    if (b.requires_grad()) {
      detail::MapMat<S>(b.grad_buffer().data(), k, n).noalias() += detail::cmap(a, m, k).transpose() * g;
    }
  });
}

template <typename S>
Tensor<S> transpose(const Tensor<S>& a) {
  if (a.rank() != 2) throw ShapeError("transpose expects rank 2, got " + shape_str(a.shape()));
  return permute(a, {1, 0});
}

template <typename S>
Tensor<S> reshape(const Tensor<S>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape " + shape_str(x.shape()) + " -> " + shape_str(shape) + " changes element count");
  }
  return record<S>("reshape", std::move(shape), x.values(), {x}, [x](const TensorStorage<S>& o) mutable {
    detail::accumulate(x, o.grad);
  });
}

template <typename S>
Tensor<S> permute(const Tensor<S>& x, const std::vector<int>& order) {
  const int r = x.rank();
  if (static_cast<int>(order.size()) != r) {
    throw ShapeError("permute order has " + std::to_string(order.size()) + " axes for rank " + std::to_string(r));
  }
  std::vector<bool> used(static_cast<std::size_t>(r), false);
  for (int ax : order) {
    if (ax < 0 || ax >= r || used[static_cast<std::size_t>(ax)]) throw ShapeError("permute order is not a permutation");
    used[static_cast<std::size_t>(ax)] = true;
  }
  const Shape& in_shape = x.shape();
  std::vector<std::size_t> in_stride(static_cast<std::size_t>(r), 1);
  for (int i = r - 2; i >= 0; --i)
    in_stride[static_cast<std::size_t>(i)] = in_stride[static_cast<std::size_t>(i + 1)] * static_cast<std::size_t>(in_shape[static_cast<std::size_t>(i + 1)]);
  Shape out_shape(static_cast<std::size_t>(r));
  std::vector<std::size_t> src_stride(static_cast<std::size_t>(r));
  for (int i = 0; i < r; ++i) {
    out_shape[static_cast<std::size_t>(i)] = in_shape[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])];
    src_stride[static_cast<std::size_t>(i)] = in_stride[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])];
  }
  // src_index[j] = offset in x for the j-th output element
  const std::size_t total = x.numel();
  std::vector<std::size_t> src_index(total);
  std::vector<int> idx(static_cast<std::size_t>(r), 0);
  std::size_t off = 0;
  for (std::size_t j = 0; j < total; ++j) {
    src_index[j] = off;
    for (int d = r - 1; d >= 0; --d) {
      const auto du = static_cast<std::size_t>(d);
      if (++idx[du] < out_shape[du]) {
        off += src_stride[du];
        break;
      }
      off -= src_stride[du] * static_cast<std::size_t>(idx[du] - 1);
      idx[du] = 0;
    }
  }
  std::vector<S> out(total);
  for (std::size_t j = 0; j < total; ++j) out[j] = x.data()[src_index[j]];
  return record<S>("permute", out_shape, std::move(out), {x},
                   [x, src_index = std::move(src_index)](const TensorStorage<S>& o) mutable {
                     auto& gx = x.grad_buffer();
                     for (std::size_t j = 0; j < src_index.size(); ++j) gx[src_index[j]] += o.grad[j];
                   });
}

template <typename S>
Tensor<S> concat(const std::vector<Tensor<S>>& xs, int axis) {
  if (xs.empty()) throw ShapeError("concat of zero tensors");
  const AxisSplit first = split_axis(xs[0], axis, "concat");
  const int r = xs[0].rank();
  const int ax = axis < 0 ? axis + r : axis;
  Shape out_shape = xs[0].shape();
  std::vector<std::size_t> widths;
  std::size_t total_n = 0;
  for (const auto& t : xs) {
    if (t.rank() != r) throw ShapeError("concat: rank mismatch " + shape_str(t.shape()));
    for (int d = 0; d < r; ++d) {
      if (d != ax && t.shape()[static_cast<std::size_t>(d)] != out_shape[static_cast<std::size_t>(d)]) {
        throw ShapeError("concat: dimension " + std::to_string(d) + " mismatch between " +
                         shape_str(xs[0].shape()) + " and " + shape_str(t.shape()));
      }
    }
    const std::size_t w = static_cast<std::size_t>(t.shape()[static_cast<std::size_t>(ax)]) * first.inner;
    widths.push_back(w);
    total_n += static_cast<std::size_t>(t.shape()[static_cast<std::size_t>(ax)]);
  }
  out_shape[static_cast<std::size_t>(ax)] = static_cast<int>(total_n);
  const std::size_t row = total_n * first.inner;
  std::vector<S> out(first.outer * row);
  std::size_t col = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    for (std::size_t o = 0; o < first.outer; ++o)
      std::copy_n(xs[i].data().data() + o * widths[i], widths[i], out.data() + o * row + col);
    col += widths[i];
  }
  return record<S>("concat", out_shape, std::move(out), xs,
                   [xs, widths, row, outer = first.outer](const TensorStorage<S>& o) mutable {
                     std::size_t c = 0;
                     for (std::size_t i = 0; i < xs.size(); ++i) {
                       if (xs[i].requires_grad()) {
                         auto& g = xs[i].grad_buffer();
                         for (std::size_t oo = 0; oo < outer; ++oo)
                           for (std::size_t j = 0; j < widths[i]; ++j) g[oo * widths[i] + j] += o.grad[oo * row + c + j];
                       }
                       c += widths[i];
                     }
                   });
}

#define MICRODET_INSTANTIATE(S)                                                                   \
  template class Tensor<S>;                                                                       \
  template Tensor<S> record<S>(std::string, Shape, std::vector<S>, std::vector<Tensor<S>>,        \
                               std::function<void(const TensorStorage<S>&)>);                     \
  template std::vector<const OpNode<S>*> trace<S>(const Tensor<S>&);                              \
  template void backward<S>(const Tensor<S>&);                                                    \
  template Tensor<S> add<S>(const Tensor<S>&, const Tensor<S>&);                                  \
  template Tensor<S> sub<S>(const Tensor<S>&, const Tensor<S>&);                                  \
  template Tensor<S> mul<S>(const Tensor<S>&, const Tensor<S>&);                                  \
  template Tensor<S> scale<S>(const Tensor<S>&, S);                                               \
  template Tensor<S> add_scalar<S>(const Tensor<S>&, S);                                          \
  template Tensor<S> add_bias<S>(const Tensor<S>&, const Tensor<S>&);                             \
  template Tensor<S> mul_channel<S>(const Tensor<S>&, const Tensor<S>&);                          \
  template Tensor<S> mul_spatial<S>(const Tensor<S>&, const Tensor<S>&);                          \
  template Tensor<S> sigmoid<S>(const Tensor<S>&);                                                \
  template Tensor<S> silu<S>(const Tensor<S>&);                                                   \
  template Tensor<S> softplus<S>(const Tensor<S>&);                                               \
  template Tensor<S> relu<S>(const Tensor<S>&);                                                   \
  template Tensor<S> exp<S>(const Tensor<S>&);                                                    \
  template Tensor<S> log<S>(const Tensor<S>&);                                                    \
  template Tensor<S> softmax<S>(const Tensor<S>&, int);                                           \
  template Tensor<S> log_softmax<S>(const Tensor<S>&, int);                                       \
  template Tensor<S> sum<S>(const Tensor<S>&);                                                    \
  template Tensor<S> mean<S>(const Tensor<S>&);                                                   \
  template Tensor<S> bce_with_logits<S>(const Tensor<S>&, const Tensor<S>&);                      \
  template Tensor<S> matmul<S>(const Tensor<S>&, const Tensor<S>&);                               \
  template Tensor<S> transpose<S>(const Tensor<S>&);                                              \
  template Tensor<S> reshape<S>(const Tensor<S>&, Shape);                                         \
  template Tensor<S> permute<S>(const Tensor<S>&, const std::vector<int>&);                       \
  template Tensor<S> concat<S>(const std::vector<Tensor<S>>&, int);

MICRODET_INSTANTIATE(float)
MICRODET_INSTANTIATE(double)

#undef MICRODET_INSTANTIATE

}  // namespace microdet
