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

// Central finite-difference oracle for the autodiff engine. Runs entirely in
// double and never calls backward() on the perturbed evaluations.

#ifndef MICRODET_TESTS_GRADCHECK_HPP
#define MICRODET_TESTS_GRADCHECK_HPP

#include <cmath>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "microdet/tensor.hpp"

namespace microdet::testing {

struct GradCheckResult {
  bool ok = true;
  double worst_rel = 0.0;
  std::string detail;
};

inline Tensord random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0,
                             bool requires_grad = true) {
  Tensord t(std::move(shape), 0.0);
  std::uniform_real_distribution<double> d(lo, hi);
  for (auto& v : t.data()) v = d(rng);
  t.set_requires_grad(requires_grad);
  return t;
}

/// Checks d<r, f(inputs)>/d inputs against central differences with step h.
/// A component passes when relative error < rel_tol, or absolute error <
/// abs_tol (for values near zero).
inline GradCheckResult gradcheck(const std::function<Tensord(const std::vector<Tensord>&)>& f,
                                 std::vector<Tensord> inputs, std::uint64_t seed, double h = 1e-3,
                                 double rel_tol = 1e-3, double abs_tol = 1e-5) {
  GradCheckResult res;
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ull);
  Tensord probe;
  auto project = [&](const Tensord& y) {
    double acc = 0.0;
    for (std::size_t i = 0; i < y.numel(); ++i) acc += probe.data()[i] * y.data()[i];
    return acc;
  };
  for (auto& t : inputs) t.zero_grad();
  Tensord y = f(inputs);
  probe = random_tensor(y.shape(), rng, -1.0, 1.0, false);
  backward(sum(mul(y, probe)));

  for (std::size_t k = 0; k < inputs.size(); ++k) {
    Tensord& x = inputs[k];
    if (!x.requires_grad()) continue;
    std::vector<double> analytic(x.numel(), 0.0);
    if (x.has_grad()) analytic.assign(x.grad().begin(), x.grad().end());
    for (std::size_t i = 0; i < x.numel(); ++i) {
      const double orig = x.data()[i];
      double up, down;
      {
        NoGradGuard guard;
        x.data()[i] = orig + h;
        up = project(f(inputs));
        x.data()[i] = orig - h;
        down = project(f(inputs));
        x.data()[i] = orig;
      }
      const double numeric = (up - down) / (2 * h);
      const double err = std::abs(numeric - analytic[i]);
      const double scale = std::max(std::abs(numeric), std::abs(analytic[i]));
      const double rel = scale > 0 ? err / scale : 0.0;
      if (err >= abs_tol) res.worst_rel = std::max(res.worst_rel, rel);
      if (rel >= rel_tol && err >= abs_tol && res.ok) {
        res.ok = false;
        std::ostringstream os;
        os << "input " << k << " element " << i << ": analytic " << analytic[i] << " numeric " << numeric;
        res.detail = os.str();
      }
    }
  }
  return res;
}

}  // namespace microdet::testing

#endif  // MICRODET_TESTS_GRADCHECK_HPP
