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

#include <doctest.h>

#include <cmath>
#include <algorithm>
#include <cstring>
#include <numeric>
#include <random>
#include <sstream>

#include "gradcheck.hpp"
#include "microdet/checkpoint.hpp"
#include "microdet/tensor.hpp"

using namespace microdet;
using microdet::testing::gradcheck;
using microdet::testing::random_tensor;

namespace {

// Direct nested-loop convolution; independent of the im2col path.
Tensord reference_conv(const Tensord& x, const Tensord& k, int stride, int pad) {
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int kk = k.dim(0), kh = k.dim(2), kw = k.dim(3);
  const int oh = (h + 2 * pad - kh) / stride + 1, ow = (w + 2 * pad - kw) / stride + 1;
  Tensord out({n, kk, oh, ow}, 0.0);
  for (int b = 0; b < n; ++b)
    for (int o = 0; o < kk; ++o)
      for (int y = 0; y < oh; ++y)
        for (int xx = 0; xx < ow; ++xx) {
          double acc = 0;
          for (int ci = 0; ci < c; ++ci)
            for (int i = 0; i < kh; ++i)
              for (int j = 0; j < kw; ++j) {
                const int iy = y * stride - pad + i, ix = xx * stride - pad + j;
                if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
                acc += x.data()[((b * c + ci) * h + iy) * w + ix] * k.data()[((o * c + ci) * kh + i) * kw + j];
              }
          out.data()[((b * kk + o) * oh + y) * ow + xx] = acc;
        }
  return out;
}

using Fn = std::function<Tensord(const std::vector<Tensord>&)>;

void check_op(const char* name, const Fn& f, const std::vector<Shape>& shapes, double lo = -1.0, double hi = 1.0,
              bool separated = false) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(seed * 7919 + 17);
    std::vector<Tensord> inputs;
    for (const auto& s : shapes) {
      inputs.push_back(random_tensor(s, rng, lo, hi));
      if (separated) {
        // Max-type ops are only differentiable away from ties.
        auto& v = inputs.back().values();
        for (std::size_t i = 0; i < v.size(); ++i) v[i] = 0.05 * static_cast<double>(i);
        std::shuffle(v.begin(), v.end(), rng);
      }
    }
    auto r = gradcheck(f, inputs, seed);
    INFO(std::string(name) << " seed " << seed << ": " << r.detail);
    REQUIRE(r.ok);
  }
}

}  // namespace

TEST_CASE("conv2d of ones over a 3x3 window sums to 9") {
  Tensorf x({1, 1, 3, 3}, 1.0f), k({1, 1, 3, 3}, 1.0f);
  auto y = conv2d(x, k, 1, 0);
  CHECK(y.shape() == Shape{1, 1, 1, 1});
  CHECK(y.item() == doctest::Approx(9.0));
}

TEST_CASE("conv2d with a 1x1 unit kernel is the identity") {
  std::mt19937_64 rng(3);
  auto x = random_tensor({1, 1, 4, 5}, rng, -1, 1, false);
  Tensord k({1, 1, 1, 1}, 1.0);
  auto y = conv2d(x, k, 1, 0);
  CHECK(y.values() == x.values());
}

TEST_CASE("conv2d matches the nested-loop reference") {
  std::mt19937_64 rng(11);
  struct Case {
    Shape in, ker;
    int stride, pad;
  };
  for (const Case& c : {Case{{1, 2, 5, 5}, {3, 2, 3, 3}, 1, 0}, Case{{2, 3, 7, 6}, {4, 3, 3, 3}, 2, 1},
                        Case{{1, 2, 8, 8}, {2, 2, 7, 7}, 1, 3}, Case{{2, 4, 5, 5}, {3, 4, 1, 1}, 1, 0},
                        Case{{1, 2, 9, 9}, {2, 2, 1, 1}, 2, 0}}) {
    auto x = random_tensor(c.in, rng, -1, 1, false);
    auto k = random_tensor(c.ker, rng, -1, 1, false);
    auto got = conv2d(x, k, c.stride, c.pad);
    auto want = reference_conv(x, k, c.stride, c.pad);
    REQUIRE(got.shape() == want.shape());
    for (std::size_t i = 0; i < got.numel(); ++i) CHECK(std::abs(got.data()[i] - want.data()[i]) < 1e-6);
  }
  // single precision path too
  auto xd = random_tensor({1, 2, 5, 5}, rng, -1, 1, false);
  auto kd = random_tensor({3, 2, 3, 3}, rng, -1, 1, false);
  Tensorf xf(xd.shape(), std::vector<float>(xd.data().begin(), xd.data().end()));
  Tensorf kf(kd.shape(), std::vector<float>(kd.data().begin(), kd.data().end()));
  auto want = reference_conv(Tensord(xf.shape(), std::vector<double>(xf.data().begin(), xf.data().end())),
                             Tensord(kf.shape(), std::vector<double>(kf.data().begin(), kf.data().end())), 1, 0);
  auto got = conv2d(xf, kf, 1, 0);
  for (std::size_t i = 0; i < got.numel(); ++i) CHECK(std::abs(got.data()[i] - want.data()[i]) < 1e-6);
}

TEST_CASE("conv2d reports the offending dimension") {
  Tensorf x({1, 2, 5, 5}), k({1, 3, 3, 3});
  try {
    conv2d(x, k, 1, 0);
    FAIL("expected a shape error");
  } catch (const ShapeError& e) {
    CHECK(std::string(e.what()).find("channel dimension (axis 1)") != std::string::npos);
  }
  CHECK_THROWS_AS(conv2d(x, Tensorf({1, 2, 2, 2}), 1, 0), ShapeError);
  CHECK_THROWS_AS(conv2d(x, Tensorf({1, 2, 3, 3}), 0, 0), ShapeError);
  CHECK_THROWS_AS(conv2d(x, Tensorf({1, 2, 3, 3}), 1, -1), ShapeError);
  CHECK_THROWS_AS(conv2d(Tensorf({2, 5, 5}), Tensorf({1, 2, 3, 3}), 1, 0), ShapeError);
}

TEST_CASE("element op values") {
  auto s = softmax(Tensorf({4}, 0.0f), 0);
  for (float v : s.data()) CHECK(v == doctest::Approx(0.25));
  CHECK(sigmoid(Tensorf::scalar(0.0f)).item() == doctest::Approx(0.5));

  Tensorf img({1, 1, 2, 2}, {1, 2, 3, 4});
  auto up = upsample_nearest2x(img);
  CHECK(up.shape() == Shape{1, 1, 4, 4});
  const std::vector<float> want{1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4};
  CHECK(up.values() == want);

  CHECK_THROWS_AS(softmax(Tensorf({2, 3}), 2), ShapeError);
  CHECK_THROWS_AS(add(Tensorf({2, 3}), Tensorf({3, 2})), ShapeError);
  CHECK_THROWS_AS(matmul(Tensorf({2, 3}), Tensorf({2, 3})), ShapeError);
}

TEST_CASE("softmax rows sum to one and sigmoid stays in (0,1)") {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    auto x = random_tensor({3, 5, 4}, rng, -30, 30, false);
    for (int axis = 0; axis < 3; ++axis) {
      auto y = softmax(x, axis);
      const int n = x.dim(axis);
      const int inner = axis == 2 ? 1 : (axis == 1 ? 4 : 20);
      const int outer = static_cast<int>(x.numel()) / (n * inner);
      for (int o = 0; o < outer; ++o)
        for (int i = 0; i < inner; ++i) {
          double acc = 0;
          for (int k = 0; k < n; ++k) acc += y.data()[(o * n + k) * inner + i];
          CHECK(std::abs(acc - 1.0) < 1e-6);
        }
    }
    auto s = sigmoid(random_tensor({50}, rng, -20, 20, false));
    for (double v : s.data()) CHECK((v > 0.0 && v < 1.0));
  }
}

TEST_CASE("backward on simple expressions") {
  Tensorf x({3}, {1, 2, 3});
  x.set_requires_grad();
  backward(sum(mul(x, x)));
  CHECK(x.grad()[0] == doctest::Approx(2));
  CHECK(x.grad()[1] == doctest::Approx(4));
  CHECK(x.grad()[2] == doctest::Approx(6));

  auto w = Tensorf::scalar(0.0f);
  w.set_requires_grad();
  backward(scale(sigmoid(w), 4.0f));
  CHECK(w.grad()[0] == doctest::Approx(1.0));
}

TEST_CASE("gradients accumulate across backward calls") {
  Tensorf x({3}, {1, 2, 3});
  x.set_requires_grad();
  auto loss = sum(mul(x, x));
  backward(loss);
  backward(loss);
  CHECK(x.grad()[2] == doctest::Approx(12));
  x.zero_grad();
  backward(sum(mul(x, x)));
  CHECK(x.grad()[2] == doctest::Approx(6));
}

TEST_CASE("backward requires a scalar") {
  Tensorf x({3}, 1.0f);
  x.set_requires_grad();
  CHECK_THROWS_AS(backward(mul(x, x)), ShapeError);
}

TEST_CASE("trace visits producers before consumers, once each") {
  Tensord a({2}, 1.0), b({2}, 2.0);
  a.set_requires_grad();
  b.set_requires_grad();
  auto c = mul(a, b);
  auto d = add(c, c);
  auto e = sum(add(d, c));
  auto ops = trace(e);
  REQUIRE(ops.size() == 4);
  CHECK(ops.front()->name == "mul");
  CHECK(ops.back()->name == "sum");
  backward(e);
  CHECK(a.grad()[0] == doctest::Approx(6.0));  // e = 3ab
}

TEST_CASE("no graph is recorded under NoGradGuard") {
  Tensorf a({2}, 1.0f);
  a.set_requires_grad();
  NoGradGuard guard;
  auto y = mul(a, a);
  CHECK_FALSE(y.requires_grad());
  CHECK(y.creator() == nullptr);
}

TEST_CASE("every differentiable op passes the finite-difference check") {
  check_op("add", [](const auto& v) { return add(v[0], v[1]); }, {{2, 3}, {2, 3}});
  check_op("sub", [](const auto& v) { return sub(v[0], v[1]); }, {{2, 3}, {2, 3}});
  check_op("mul", [](const auto& v) { return mul(v[0], v[1]); }, {{2, 3}, {2, 3}});
  check_op("scale", [](const auto& v) { return scale(v[0], 2.5); }, {{4}});
  check_op("add_scalar", [](const auto& v) { return add_scalar(v[0], 0.7); }, {{4}});
  check_op("add_bias", [](const auto& v) { return add_bias(v[0], v[1]); }, {{2, 3, 2, 2}, {3}});
  check_op("mul_channel", [](const auto& v) { return mul_channel(v[0], v[1]); }, {{2, 3, 2, 2}, {2, 3}});
  check_op("mul_spatial", [](const auto& v) { return mul_spatial(v[0], v[1]); }, {{2, 3, 2, 2}, {2, 1, 2, 2}});
  check_op("sigmoid", [](const auto& v) { return sigmoid(v[0]); }, {{5}}, -4, 4);
  check_op("silu", [](const auto& v) { return silu(v[0]); }, {{5}}, -4, 4);
  check_op("softplus", [](const auto& v) { return softplus(v[0]); }, {{5}}, -4, 4);
  check_op("exp", [](const auto& v) { return exp(v[0]); }, {{5}});
  check_op("log", [](const auto& v) { return log(v[0]); }, {{5}}, 0.2, 3.0);
  check_op("softmax", [](const auto& v) { return softmax(v[0], 1); }, {{2, 4, 3}}, -2, 2);
  check_op("log_softmax", [](const auto& v) { return log_softmax(v[0], -1); }, {{3, 5}}, -2, 2);
  check_op("sum", [](const auto& v) { return sum(v[0]); }, {{3, 2}});
  check_op("mean", [](const auto& v) { return mean(v[0]); }, {{3, 2}});
  check_op("bce_with_logits", [](const auto& v) { return bce_with_logits(v[0], v[1]); }, {{6}, {6}});
  check_op("matmul", [](const auto& v) { return matmul(v[0], v[1]); }, {{3, 4}, {4, 2}});
  check_op("transpose", [](const auto& v) { return transpose(v[0]); }, {{3, 4}});
  check_op("reshape", [](const auto& v) { return reshape(v[0], {6, 2}); }, {{3, 4}});
  check_op("permute", [](const auto& v) { return permute(v[0], {2, 0, 1}); }, {{2, 3, 4}});
  check_op("concat", [](const auto& v) { return concat<double>({v[0], v[1]}, 1); }, {{2, 3, 2}, {2, 1, 2}});
  check_op("conv2d", [](const auto& v) { return conv2d(v[0], v[1], 1, 1); }, {{1, 2, 5, 5}, {3, 2, 3, 3}});
  check_op("conv2d stride 2", [](const auto& v) { return conv2d(v[0], v[1], 2, 1); }, {{2, 2, 6, 6}, {2, 2, 3, 3}});
  check_op("conv2d 1x1", [](const auto& v) { return conv2d(v[0], v[1], 1, 0); }, {{2, 3, 3, 3}, {2, 3, 1, 1}});
  check_op("max_pool2d", [](const auto& v) { return max_pool2d(v[0], 3, 1, 1); }, {{1, 2, 4, 4}}, -1, 1, true);
  check_op("avg_pool2d", [](const auto& v) { return avg_pool2d(v[0], 3, 2, 1); }, {{1, 2, 5, 5}});
  check_op("global_avg_pool", [](const auto& v) { return global_avg_pool(v[0]); }, {{2, 3, 3, 3}});
  check_op("channel_mean", [](const auto& v) { return channel_mean(v[0]); }, {{2, 3, 3, 3}});
  check_op("channel_max", [](const auto& v) { return channel_max(v[0]); }, {{2, 3, 3, 3}}, -1, 1, true);
  check_op("upsample_nearest2x", [](const auto& v) { return upsample_nearest2x(v[0]); }, {{1, 2, 2, 3}});
  check_op("batch_norm (train)",
           [](const auto& v) {
             Tensord rm({3}, 0.0), rv({3}, 1.0);
             return batch_norm(v[0], v[1], v[2], rm, rv, true, 0.1, 1e-3);
           },
           {{2, 3, 3, 3}, {3}, {3}});
  check_op("batch_norm (eval)",
           [](const auto& v) {
             Tensord rm({3}, 0.1), rv({3}, 0.8);
             return batch_norm(v[0], v[1], v[2], rm, rv, false, 0.1, 1e-3);
           },
           {{2, 3, 3, 3}, {3}, {3}});
}

TEST_CASE("forward pass is deterministic") {
  std::mt19937_64 rng(99);
  auto x = random_tensor({2, 3, 8, 8}, rng, -1, 1, false);
  auto k = random_tensor({4, 3, 3, 3}, rng, -1, 1, false);
  auto a = silu(conv2d(x, k, 2, 1));
  auto b = silu(conv2d(x, k, 2, 1));
  CHECK(a.values() == b.values());
}

TEST_CASE("checkpoint round trip is bitwise") {
  std::mt19937_64 rng(1);
  NamedTensors ts;
  for (int i = 0; i < 3; ++i) {
    Tensorf t({2, i + 1, 3});
    std::normal_distribution<float> d;
    for (auto& v : t.data()) v = d(rng);
    ts.emplace_back("t" + std::to_string(i), t);
  }
  ts.emplace_back("scalar", Tensorf::scalar(-0.0f));
  std::stringstream buf;
  write_tensors(buf, ts);
  const std::string bytes = buf.str();
  CHECK(bytes.substr(0, 4) == "MDT1");
  auto back = read_tensors(buf);
  REQUIRE(back.size() == ts.size());
  for (std::size_t i = 0; i < ts.size(); ++i) {
    CHECK(back[i].first == ts[i].first);
    CHECK(back[i].second.shape() == ts[i].second.shape());
    CHECK(std::memcmp(back[i].second.data().data(), ts[i].second.data().data(), ts[i].second.numel() * 4) == 0);
  }

  std::stringstream bad("MDT2xxxx");
  CHECK_THROWS_AS(read_tensors(bad), FormatError);
  std::stringstream truncated(bytes.substr(0, bytes.size() - 3));
  CHECK_THROWS_AS(read_tensors(truncated), FormatError);
}
