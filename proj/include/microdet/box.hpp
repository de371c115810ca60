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

#ifndef MICRODET_BOX_HPP
#define MICRODET_BOX_HPP

#include <algorithm>
#include <cmath>

namespace microdet {

/// Axis-aligned box in center format. Normalized coordinates in [0,1] unless
/// a caller says otherwise. Templated so loss code can run on autodiff scalars.
template <typename T>
struct BoxT {
  T cx{}, cy{}, w{}, h{};

  T x1() const { return cx - w / T(2); }
  T y1() const { return cy - h / T(2); }
  T x2() const { return cx + w / T(2); }
  T y2() const { return cy + h / T(2); }
  T area() const { return w * h; }

  static BoxT from_corners(T x1, T y1, T x2, T y2) {
    return {(x1 + x2) / T(2), (y1 + y2) / T(2), x2 - x1, y2 - y1};
  }

  bool operator==(const BoxT&) const = default;
};

using BBox = BoxT<double>;

template <typename T>
T intersection_area(const BoxT<T>& a, const BoxT<T>& b) {
  using std::max;
  using std::min;
  const T iw = min(a.x2(), b.x2()) - max(a.x1(), b.x1());
  const T ih = min(a.y2(), b.y2()) - max(a.y1(), b.y1());
  if (!(iw > T(0)) || !(ih > T(0))) return T(0);
  return iw * ih;
}

/// Intersection over union in [0,1]; zero for boxes with no overlap or a
/// degenerate union.
template <typename T>
T iou(const BoxT<T>& a, const BoxT<T>& b) {
  const T inter = intersection_area(a, b);
  const T uni = a.area() + b.area() - inter;
  if (!(uni > T(0))) return T(0);
  return inter / uni;
}

inline BBox clamp_unit(const BBox& b) {
  const double x1 = std::clamp(b.x1(), 0.0, 1.0);
  const double y1 = std::clamp(b.y1(), 0.0, 1.0);
  const double x2 = std::clamp(b.x2(), 0.0, 1.0);
  const double y2 = std::clamp(b.y2(), 0.0, 1.0);
  return BBox::from_corners(x1, y1, x2, y2);
}

struct GroundTruth {
  BBox box;
  int class_id = 0;
};

struct Detection {
  BBox box;
  int class_id = 0;
  double score = 0.0;
};

}  // namespace microdet

#endif  // MICRODET_BOX_HPP
