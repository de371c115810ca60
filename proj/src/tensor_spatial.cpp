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

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>

#include "microdet/tensor.hpp"
#include "tensor_internal.hpp"

namespace microdet {

namespace {

struct ConvGeom {
  int n, c, h, w;
  int k, kh, kw;
  int stride, pad;
  int oh, ow;
  int patch() const { return c * kh * kw; }
  int out_hw() const { return oh * ow; }
  bool pointwise() const { return kh == 1 && kw == 1 && stride == 1 && pad == 0; }
};

// Output columns [lo, hi) read input columns inside [0, w) for kernel tap j.
inline void valid_range(const ConvGeom& g, int j, int& lo, int& hi) {
  const int off = j - g.pad;
  lo = off >= 0 ? 0 : (-off + g.stride - 1) / g.stride;
  hi = g.w - 1 - off < 0 ? 0 : (g.w - 1 - off) / g.stride + 1;
  hi = std::min(hi, g.ow);
  lo = std::min(lo, hi);
}

template <typename S>
void im2col(const S* x, const ConvGeom& g, S* col) {
  const int ohw = g.out_hw();
  for (int c = 0; c < g.c; ++c)
    for (int i = 0; i < g.kh; ++i)
      for (int j = 0; j < g.kw; ++j) {
        S* dst = col + static_cast<std::size_t>((c * g.kh + i) * g.kw + j) * static_cast<std::size_t>(ohw);
        const S* src = x + static_cast<std::size_t>(c) * static_cast<std::size_t>(g.h * g.w);
        int lo, hi;
        valid_range(g, j, lo, hi);
        const int off = j - g.pad;
        for (int oy = 0; oy < g.oh; ++oy) {
          const int iy = oy * g.stride - g.pad + i;
          S* row = dst + oy * g.ow;
          if (iy < 0 || iy >= g.h) {
            std::fill_n(row, g.ow, S(0));
            continue;
          }
          const S* srow = src + iy * g.w + off;
          std::fill_n(row, lo, S(0));
          if (g.stride == 1) {
            std::copy(srow + lo, srow + hi, row + lo);
          } else {
            for (int ox = lo; ox < hi; ++ox) row[ox] = srow[ox * g.stride];
          }
          std::fill(row + hi, row + g.ow, S(0));
        }
      }
}

template <typename S>
void col2im(const S* col, const ConvGeom& g, S* dx) {
  const int ohw = g.out_hw();
  for (int c = 0; c < g.c; ++c)
    for (int i = 0; i < g.kh; ++i)
      for (int j = 0; j < g.kw; ++j) {
        const S* src = col + static_cast<std::size_t>((c * g.kh + i) * g.kw + j) * static_cast<std::size_t>(ohw);
        S* dst = dx + static_cast<std::size_t>(c) * static_cast<std::size_t>(g.h * g.w);
        int lo, hi;
        valid_range(g, j, lo, hi);
        const int off = j - g.pad;
        for (int oy = 0; oy < g.oh; ++oy) {
          const int iy = oy * g.stride - g.pad + i;
          if (iy < 0 || iy >= g.h) continue;
          const S* row = src + oy * g.ow;
          S* drow = dst + iy * g.w + off;
          if (g.stride == 1) {
            for (int ox = lo; ox < hi; ++ox) drow[ox] += row[ox];
          } else {
            for (int ox = lo; ox < hi; ++ox) drow[ox * g.stride] += row[ox];
          }
        }
      }
}

template <typename S>
void require_nchw(const Tensor<S>& x, const char* op) {
  if (x.rank() != 4) throw ShapeError(std::string(op) + " expects [N,C,H,W], got " + shape_str(x.shape()));
}

}  // namespace

template <typename S>
Tensor<S> conv2d(const Tensor<S>& input, const Tensor<S>& kernel, int stride, int pad) {
  require_nchw(input, "conv2d input");
  if (kernel.rank() != 4) throw ShapeError("conv2d kernel expects [K,C,kh,kw], got " + shape_str(kernel.shape()));
  ConvGeom g{input.dim(0), input.dim(1), input.dim(2), input.dim(3), kernel.dim(0), kernel.dim(2),
             kernel.dim(3), stride, pad, 0, 0};
  if (kernel.dim(1) != g.c) {
    throw ShapeError("conv2d channel dimension (axis 1): input has " + std::to_string(g.c) +
                     ", kernel expects " + std::to_string(kernel.dim(1)));
  }
  if (g.kh % 2 == 0 || g.kw % 2 == 0) {
    throw ShapeError("conv2d kernel height/width (axes 2,3) must be odd, got " + std::to_string(g.kh) + "x" +
                     std::to_string(g.kw));
  }
  if (stride < 1) throw ShapeError("conv2d stride must be >= 1");
  if (pad < 0) throw ShapeError("conv2d pad must be >= 0");
  g.oh = (g.h + 2 * pad - g.kh) / stride + 1;
  g.ow = (g.w + 2 * pad - g.kw) / stride + 1;
  if (g.h + 2 * pad < g.kh || g.w + 2 * pad < g.kw) {
    throw ShapeError("conv2d spatial dimension (axes 2,3): input " + shape_str(input.shape()) +
                     " smaller than kernel");
  }

  const int patch = g.patch();
  const int ohw = g.out_hw();
  const std::size_t col_size = static_cast<std::size_t>(patch) * static_cast<std::size_t>(ohw);
  const std::size_t in_size = static_cast<std::size_t>(g.c * g.h * g.w);
  const std::size_t out_size = static_cast<std::size_t>(g.k) * static_cast<std::size_t>(ohw);
  const bool keep_cols = !g.pointwise() && grad_enabled() && (input.requires_grad() || kernel.requires_grad());

  std::vector<S> out(static_cast<std::size_t>(g.n) * out_size);
  std::shared_ptr<S[]> cols;
  std::unique_ptr<S[]> scratch;
  if (!g.pointwise()) {
    if (keep_cols) cols.reset(new S[static_cast<std::size_t>(g.n) * col_size]);
    else scratch.reset(new S[col_size]);
  }
  const auto wmat = detail::cmap(kernel, g.k, patch);
  for (int b = 0; b < g.n; ++b) {
    const S* xb = input.data().data() + static_cast<std::size_t>(b) * in_size;
    const S* colp = xb;
    if (!g.pointwise()) {
      S* c = keep_cols ? cols.get() + static_cast<std::size_t>(b) * col_size : scratch.get();
      im2col(xb, g, c);
      colp = c;
    }
    detail::MapMat<S>(out.data() + static_cast<std::size_t>(b) * out_size, g.k, ohw).noalias() =
        wmat * detail::ConstMapMat<S>(colp, patch, ohw);
  }

  return record<S>(
      "conv2d", Shape{g.n, g.k, g.oh, g.ow}, std::move(out), {input, kernel},
      [input, kernel, g, cols, col_size, in_size, out_size](const TensorStorage<S>& o) mutable {
        const int patch = g.patch();
        const int ohw = g.out_hw();
        std::unique_ptr<S[]> dcol;
        if (input.requires_grad() && !g.pointwise()) dcol.reset(new S[col_size]);
        for (int b = 0; b < g.n; ++b) {
          const auto gy = detail::ConstMapMat<S>(o.grad.data() + static_cast<std::size_t>(b) * out_size, g.k, ohw);
          const S* colp = g.pointwise() ? input.data().data() + static_cast<std::size_t>(b) * in_size
                                        : cols.get() + static_cast<std::size_t>(b) * col_size;
          if (kernel.requires_grad()) {
            detail::MapMat<S>(kernel.grad_buffer().data(), g.k, patch).noalias() +=
                gy * detail::ConstMapMat<S>(colp, patch, ohw).transpose();
          }
          if (input.requires_grad()) {
            S* dx = input.grad_buffer().data() + static_cast<std::size_t>(b) * in_size;
            const auto wmat = detail::cmap(kernel, g.k, patch);
            if (g.pointwise()) {
              detail::MapMat<S>(dx, patch, ohw).noalias() += wmat.transpose() * gy;
            } else {
              detail::MapMat<S>(dcol.get(), patch, ohw).noalias() = wmat.transpose() * gy;
              col2im(dcol.get(), g, dx);
            }
          }
        }
      });
}

template <typename S>
Tensor<S> max_pool2d(const Tensor<S>& x, int kernel, int stride, int pad) {
  require_nchw(x, "max_pool2d");
  if (kernel < 1 || stride < 1 || pad < 0 || 2 * pad > kernel) throw ShapeError("max_pool2d: invalid window");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int oh = (h + 2 * pad - kernel) / stride + 1;
  const int ow = (w + 2 * pad - kernel) / stride + 1;
  std::vector<S> out(static_cast<std::size_t>(n * c * oh * ow));
  std::vector<std::size_t> arg(out.size());
  std::size_t o = 0;
  for (int p = 0; p < n * c; ++p) {
    const std::size_t base = static_cast<std::size_t>(p) * static_cast<std::size_t>(h * w);
    for (int oy = 0; oy < oh; ++oy)
      for (int ox = 0; ox < ow; ++ox, ++o) {
        S best = -std::numeric_limits<S>::infinity();
        std::size_t bi = base;
        for (int i = 0; i < kernel; ++i) {
          const int iy = oy * stride - pad + i;
          if (iy < 0 || iy >= h) continue;
          for (int j = 0; j < kernel; ++j) {
            const int ix = ox * stride - pad + j;
            if (ix < 0 || ix >= w) continue;
            const std::size_t idx = base + static_cast<std::size_t>(iy * w + ix);
            if (x.data()[idx] > best) {
              best = x.data()[idx];
              bi = idx;
            }
          }
        }
        out[o] = best;
        arg[o] = bi;
      }
  }
  return record<S>("max_pool2d", Shape{n, c, oh, ow}, std::move(out), {x},
                   [x, arg = std::move(arg)](const TensorStorage<S>& o) mutable {
                     auto& gx = x.grad_buffer();
                     for (std::size_t i = 0; i < arg.size(); ++i) gx[arg[i]] += o.grad[i];
                   });
}

template <typename S>
Tensor<S> avg_pool2d(const Tensor<S>& x, int kernel, int stride, int pad) {
  require_nchw(x, "avg_pool2d");
  if (kernel < 1 || stride < 1 || pad < 0 || 2 * pad > kernel) throw ShapeError("avg_pool2d: invalid window");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int oh = (h + 2 * pad - kernel) / stride + 1;
  const int ow = (w + 2 * pad - kernel) / stride + 1;
  const S inv = S(1) / static_cast<S>(kernel * kernel);  // zero padding counts toward the window
  std::vector<S> out(static_cast<std::size_t>(n * c * oh * ow), S(0));
  auto visit = [=](auto&& fn) {
    std::size_t o = 0;
    for (int p = 0; p < n * c; ++p) {
      const std::size_t base = static_cast<std::size_t>(p) * static_cast<std::size_t>(h * w);
      for (int oy = 0; oy < oh; ++oy)
        for (int ox = 0; ox < ow; ++ox, ++o)
          for (int i = 0; i < kernel; ++i) {
            const int iy = oy * stride - pad + i;
            if (iy < 0 || iy >= h) continue;
            for (int j = 0; j < kernel; ++j) {
              const int ix = ox * stride - pad + j;
              if (ix >= 0 && ix < w) fn(o, base + static_cast<std::size_t>(iy * w + ix));
            }
          }
    }
  };
  visit([&](std::size_t o, std::size_t i) { out[o] += x.data()[i] * inv; });
  return record<S>("avg_pool2d", Shape{n, c, oh, ow}, std::move(out), {x},
                   [x, visit, inv](const TensorStorage<S>& o) mutable {
                     auto& gx = x.grad_buffer();
                     visit([&](std::size_t oi, std::size_t i) { gx[i] += o.grad[oi] * inv; });
                   });
}

template <typename S>
Tensor<S> global_avg_pool(const Tensor<S>& x) {
  require_nchw(x, "global_avg_pool");
  const int n = x.dim(0), c = x.dim(1);
  const std::size_t hw = static_cast<std::size_t>(x.dim(2) * x.dim(3));
  const S inv = S(1) / static_cast<S>(hw);
  std::vector<S> out(static_cast<std::size_t>(n * c));
  for (std::size_t p = 0; p < out.size(); ++p) {
    S acc = 0;
    for (std::size_t j = 0; j < hw; ++j) acc += x.data()[p * hw + j];
    out[p] = acc * inv;
  }
  return record<S>("global_avg_pool", Shape{n, c}, std::move(out), {x},
                   [x, hw, inv](const TensorStorage<S>& o) mutable {
                     auto& gx = x.grad_buffer();
                     for (std::size_t p = 0; p < o.grad.size(); ++p)
                       for (std::size_t j = 0; j < hw; ++j) gx[p * hw + j] += o.grad[p] * inv;
                   });
}

template <typename S>
Tensor<S> channel_mean(const Tensor<S>& x) {
  require_nchw(x, "channel_mean");
  const int n = x.dim(0), c = x.dim(1);
  const std::size_t hw = static_cast<std::size_t>(x.dim(2) * x.dim(3));
  const S inv = S(1) / static_cast<S>(c);
  std::vector<S> out(static_cast<std::size_t>(n) * hw, S(0));
  for (int b = 0; b < n; ++b)
    for (int k = 0; k < c; ++k) {
      const S* src = x.data().data() + (static_cast<std::size_t>(b * c + k)) * hw;
      S* dst = out.data() + static_cast<std::size_t>(b) * hw;
      for (std::size_t j = 0; j < hw; ++j) dst[j] += src[j] * inv;
    }
  return record<S>("channel_mean", Shape{n, 1, x.dim(2), x.dim(3)}, std::move(out), {x},
                   [x, n, c, hw, inv](const TensorStorage<S>& o) mutable {
                     auto& gx = x.grad_buffer();
                     for (int b = 0; b < n; ++b)
                       for (int k = 0; k < c; ++k)
                         for (std::size_t j = 0; j < hw; ++j)
                           gx[static_cast<std::size_t>(b * c + k) * hw + j] += o.grad[static_cast<std::size_t>(b) * hw + j] * inv;
                   });
}

template <typename S>
Tensor<S> channel_max(const Tensor<S>& x) {
  require_nchw(x, "channel_max");
  const int n = x.dim(0), c = x.dim(1);
  const std::size_t hw = static_cast<std::size_t>(x.dim(2) * x.dim(3));
  std::vector<S> out(static_cast<std::size_t>(n) * hw, -std::numeric_limits<S>::infinity());
  std::vector<std::size_t> arg(out.size(), 0);
  for (int b = 0; b < n; ++b)
    for (int k = 0; k < c; ++k) {
      const std::size_t base = static_cast<std::size_t>(b * c + k) * hw;
      for (std::size_t j = 0; j < hw; ++j) {
        const std::size_t o = static_cast<std::size_t>(b) * hw + j;
        if (x.data()[base + j] > out[o]) {
          out[o] = x.data()[base + j];
          arg[o] = base + j;
        }
      }
    }
  return record<S>("channel_max", Shape{n, 1, x.dim(2), x.dim(3)}, std::move(out), {x},
                   [x, arg = std::move(arg)](const TensorStorage<S>& o) mutable {
                     auto& gx = x.grad_buffer();
                     for (std::size_t i = 0; i < arg.size(); ++i) gx[arg[i]] += o.grad[i];
                   });
}

template <typename S>
Tensor<S> upsample_nearest2x(const Tensor<S>& x) {
  require_nchw(x, "upsample_nearest2x");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int oh = 2 * h, ow = 2 * w;
  std::vector<S> out(static_cast<std::size_t>(n * c * oh * ow));
  for (int p = 0; p < n * c; ++p) {
    const S* src = x.data().data() + static_cast<std::size_t>(p * h * w);
    S* dst = out.data() + static_cast<std::size_t>(p * oh * ow);
    for (int y = 0; y < oh; ++y)
      for (int xx = 0; xx < ow; ++xx) dst[y * ow + xx] = src[(y / 2) * w + xx / 2];
  }
  return record<S>("upsample_nearest2x", Shape{n, c, oh, ow}, std::move(out), {x},
                   [x, n, c, h, w](const TensorStorage<S>& o) mutable {
                     auto& gx = x.grad_buffer();
                     const int oh = 2 * h, ow = 2 * w;
                     for (int p = 0; p < n * c; ++p) {
                       S* dst = gx.data() + static_cast<std::size_t>(p * h * w);
                       const S* src = o.grad.data() + static_cast<std::size_t>(p * oh * ow);
                       for (int y = 0; y < oh; ++y)
                         for (int xx = 0; xx < ow; ++xx) dst[(y / 2) * w + xx / 2] += src[y * ow + xx];
                     }
                   });
}

template <typename S>
Tensor<S> batch_norm(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta,
                     Tensor<S>& running_mean, Tensor<S>& running_var, bool training, S momentum, S eps) {
  if (x.rank() < 2) throw ShapeError("batch_norm expects rank >= 2, got " + shape_str(x.shape()));
  const int n = x.dim(0), c = x.dim(1);
  for (const Tensor<S>* p : std::initializer_list<const Tensor<S>*>{&gamma, &beta, &running_mean, &running_var}) {
    if (p->rank() != 1 || p->dim(0) != c) {
      throw ShapeError("batch_norm parameter " + shape_str(p->shape()) + " does not match channel dim " +
                       std::to_string(c));
    }
  }
  const std::size_t inner = x.numel() / static_cast<std::size_t>(n * c);
  const std::size_t count = static_cast<std::size_t>(n) * inner;
  std::vector<S> mu(static_cast<std::size_t>(c)), inv_std(static_cast<std::size_t>(c));
  auto at = [inner, c](int b, int k) {
    return (static_cast<std::size_t>(b) * static_cast<std::size_t>(c) + static_cast<std::size_t>(k)) * inner;
  };
  const S* xp = x.data().data();
  S* rm = running_mean.data().data();
  S* rv = running_var.data().data();
  for (int k = 0; k < c; ++k) {
    const auto ku = static_cast<std::size_t>(k);
    if (training) {
      S m = 0;
      for (int b = 0; b < n; ++b) {
        const S* p = xp + at(b, k);
        for (std::size_t j = 0; j < inner; ++j) m += p[j];
      }
      m /= static_cast<S>(count);
      S v = 0;
      for (int b = 0; b < n; ++b) {
        const S* p = xp + at(b, k);
        for (std::size_t j = 0; j < inner; ++j) {
          const S d = p[j] - m;
          v += d * d;
        }
      }
      v /= static_cast<S>(count);
      mu[ku] = m;
      inv_std[ku] = S(1) / std::sqrt(v + eps);
      const S unbiased = count > 1 ? v * static_cast<S>(count) / static_cast<S>(count - 1) : v;
      rm[ku] = (S(1) - momentum) * rm[ku] + momentum * m;
      rv[ku] = (S(1) - momentum) * rv[ku] + momentum * unbiased;
    } else {
      mu[ku] = rm[ku];
      inv_std[ku] = S(1) / std::sqrt(rv[ku] + eps);
    }
  }
  std::vector<S> out(x.numel());
  const S* gp = gamma.data().data();
  const S* bp = beta.data().data();
  for (int b = 0; b < n; ++b)
    for (int k = 0; k < c; ++k) {
      const auto ku = static_cast<std::size_t>(k);
      const S a = gp[ku] * inv_std[ku];
      const S sh = bp[ku] - a * mu[ku];
      const S* p = xp + at(b, k);
      S* q = out.data() + at(b, k);
      for (std::size_t j = 0; j < inner; ++j) q[j] = a * p[j] + sh;
    }
  return record<S>(
      "batch_norm", x.shape(), std::move(out), {x, gamma, beta},
      [x, gamma, beta, mu = std::move(mu), inv_std = std::move(inv_std), training, n, c, at,
       count](const TensorStorage<S>& o) mutable {
        const std::size_t inner = count / static_cast<std::size_t>(n);
        const S* xp = x.data().data();
        const S* gy = o.grad.data();
        S* gx = x.requires_grad() ? x.grad_buffer().data() : nullptr;
        for (int k = 0; k < c; ++k) {
          const auto ku = static_cast<std::size_t>(k);
          const S m_k = mu[ku], is_k = inv_std[ku];
          S sum_g = 0, sum_gx = 0;
          for (int b = 0; b < n; ++b) {
            const S* g = gy + at(b, k);
            const S* p = xp + at(b, k);
            for (std::size_t j = 0; j < inner; ++j) {
              sum_g += g[j];
              sum_gx += g[j] * ((p[j] - m_k) * is_k);
            }
          }
          if (gamma.requires_grad()) gamma.grad_buffer()[ku] += sum_gx;
          if (beta.requires_grad()) beta.grad_buffer()[ku] += sum_g;
          if (!gx) continue;
          const S gam = gamma.data()[ku];
          const S m = static_cast<S>(count);
          for (int b = 0; b < n; ++b) {
            const S* g = gy + at(b, k);
            const S* p = xp + at(b, k);
            S* d = gx + at(b, k);
            if (training) {
              for (std::size_t j = 0; j < inner; ++j) {
                const S xhat = (p[j] - m_k) * is_k;
                d[j] += gam * is_k / m * (m * g[j] - sum_g - xhat * sum_gx);
              }
            } else {
              for (std::size_t j = 0; j < inner; ++j) d[j] += gam * is_k * g[j];
            }
          }
        }
      });
}

#define MICRODET_INSTANTIATE(S)                                                             \
  template Tensor<S> conv2d<S>(const Tensor<S>&, const Tensor<S>&, int, int);               \
  template Tensor<S> max_pool2d<S>(const Tensor<S>&, int, int, int);                        \
  template Tensor<S> avg_pool2d<S>(const Tensor<S>&, int, int, int);                        \
  template Tensor<S> global_avg_pool<S>(const Tensor<S>&);                                  \
  template Tensor<S> channel_mean<S>(const Tensor<S>&);                                     \
  template Tensor<S> channel_max<S>(const Tensor<S>&);                                      \
  template Tensor<S> upsample_nearest2x<S>(const Tensor<S>&);                               \
  template Tensor<S> batch_norm<S>(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&,    \
                                   Tensor<S>&, Tensor<S>&, bool, S, S);

MICRODET_INSTANTIATE(float)
MICRODET_INSTANTIATE(double)

#undef MICRODET_INSTANTIATE

}  // namespace microdet
