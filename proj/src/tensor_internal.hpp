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

#ifndef MICRODET_SRC_TENSOR_INTERNAL_HPP
#define MICRODET_SRC_TENSOR_INTERNAL_HPP

#include <algorithm>
#include <vector>

#include <Eigen/Core>

#include "microdet/tensor.hpp"

namespace microdet::detail {

template <typename S>
using MatR = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using MapMat = Eigen::Map<MatR<S>>;
template <typename S>
using ConstMapMat = Eigen::Map<const MatR<S>>;

template <typename S>
ConstMapMat<S> cmap(const Tensor<S>& t, int rows, int cols) {
  return ConstMapMat<S>(t.data().data(), rows, cols);
}

template <typename S>
void accumulate(const Tensor<S>& t, const std::vector<S>& g) {
  if (!t.requires_grad()) return;
  auto& buf = t.grad_buffer();
  for (std::size_t i = 0; i < buf.size(); ++i) buf[i] += g[i];
}

// Fixed-size aligned blocks: every element takes the same vectorized code
// path regardless of buffer alignment, which keeps results bitwise stable.
constexpr int kChunk = 64;
template <typename S>
using Chunk = Eigen::Array<S, kChunk, 1>;

template <typename S>
void load(Chunk<S>& v, const S* src, std::size_t i, std::size_t n) {
  const std::size_t m = std::min<std::size_t>(kChunk, n - i);
  v.setZero();
  std::copy_n(src + i, m, v.data());
}

template <typename S>
void store(const Chunk<S>& v, S* dst, std::size_t i, std::size_t n) {
  std::copy_n(v.data(), std::min<std::size_t>(kChunk, n - i), dst + i);
}

template <typename S, typename F>
void chunked(std::size_t n, F&& f) {
  Chunk<S> v;
  for (std::size_t i = 0; i < n; i += kChunk) f(i, v);
}

}  // namespace microdet::detail

#endif  // MICRODET_SRC_TENSOR_INTERNAL_HPP
