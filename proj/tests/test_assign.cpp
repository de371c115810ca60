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

#include <algorithm>
#include <cmath>
#include <random>
#include <map>
#include <set>

#include "microdet/assign.hpp"
#include "oracles.hpp"

using namespace microdet;
using namespace microdet::testing;

TEST_CASE("iou values") {
  const BBox a{0.5, 0.5, 0.2, 0.2};
  CHECK(iou(a, a) == doctest::Approx(1.0));
  CHECK(iou(a, BBox{0.1, 0.1, 0.05, 0.05}) == 0.0);
  CHECK(iou(BBox{0.5, 0.5, 1.0, 1.0}, BBox{1.0, 0.5, 1.0, 1.0}) == doctest::Approx(1.0 / 3.0));
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(0.05, 0.95), s(0.01, 0.5);
  for (int i = 0; i < 200; ++i) {
    BBox p{u(rng), u(rng), s(rng), s(rng)}, q{u(rng), u(rng), s(rng), s(rng)};
    const double v = iou(p, q);
    CHECK((v >= 0.0 && v <= 1.0));
    CHECK(v == doctest::Approx(corner_iou(p, q)).epsilon(1e-12));
  }
}

TEST_CASE("stal weight") {
  CHECK(stal_weight({0.5, 0.5, 0.1, 0.1}, 256) == 1.0);  // 25.6 px square
  CHECK(stal_weight({0.5, 0.5, 0.0, 0.0}, 256) == 2.0);
  CHECK(stal_weight({0.5, 0.5, 10.0 / 256, 10.0 / 256}, 256) == doctest::Approx(1.75));
  CHECK(stal_weight({0.5, 0.5, 20.0 / 256, 20.0 / 256}, 256) == doctest::Approx(1.0));
  double prev = 1e9;
  for (int px = 0; px <= 40; ++px) {
    const double w = stal_weight({0.5, 0.5, px / 256.0, px / 256.0}, 256);
    CHECK(w >= 1.0);
    CHECK(w <= prev);
    prev = w;
  }
}

TEST_CASE("o2m picks the argmax cell for k=1") {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    auto img = random_image(rng);
    auto gts = random_gts(rng, 1);
    AssignConfig cfg;
    cfg.topk = 1;
    auto a = assign_o2m(img, gts, cfg);
    REQUIRE(a.pairs.size() == 1);
    int best = -1;
    double bt = -1;
    for (std::size_t c = 0; c < img.size(); ++c)
      if (oracle_candidate(img, c, gts[0]) && oracle_metric(img, c, gts[0]) > bt) {
        bt = oracle_metric(img, c, gts[0]);
        best = static_cast<int>(c);
      }
    CHECK(a.pairs[0].cell == best);
    auto o = assign_o2o(img, gts);
    REQUIRE(o.pairs.size() == 1);
    CHECK(o.pairs[0].cell == best);
  }
}

TEST_CASE("a gt covering a single P2 cell gets that cell") {
  DecodedImage img;
  img.input_size = 16;
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 4; ++x) {
      img.cells.push_back({0, 4, y, x, x * 4 + 2.0, y * 4 + 2.0});
      img.boxes.push_back({(x * 4 + 2.0) / 16, (y * 4 + 2.0) / 16, 4.0 / 16, 4.0 / 16});
      img.logits.push_back(0.0f);
    }
  std::vector<GroundTruth> gts{{{(2 * 4 + 2.0) / 16, (1 * 4 + 2.0) / 16, 4.0 / 16, 4.0 / 16}, 0}};
  AssignConfig cfg;
  cfg.topk = 1;
  auto a = assign_o2m(img, gts, cfg);
  REQUIRE(a.pairs.size() == 1);
  CHECK(a.pairs[0].cell == 1 * 4 + 2);
}

TEST_CASE("o2m basic contracts") {
  std::mt19937_64 rng(8);
  auto img = random_image(rng);
  CHECK(assign_o2m(img, {}).pairs.empty());
  CHECK(assign_o2o(img, {}).pairs.empty());
  for (int trial = 0; trial < 100; ++trial) {
    auto im = random_image(rng);
    std::vector<GroundTruth> gts{{{0.25, 0.25, 8.0 / 64, 8.0 / 64}, 0}, {{0.75, 0.75, 10.0 / 64, 6.0 / 64}, 0}};
    AssignConfig cfg;
    cfg.topk = 3;
    auto a = assign_o2m(im, gts, cfg);
    CHECK(a.pairs.size() <= 6);
    std::set<int> cells;
    for (const auto& p : a.pairs) {
      CHECK(cells.insert(p.cell).second);
      CHECK(p.stal_weight >= 1.0);
    }
  }
}

TEST_CASE("o2m conflict goes to the higher metric") {
  std::mt19937_64 rng(10);
  for (int trial = 0; trial < 100; ++trial) {
    auto img = random_image(rng);
    auto gts = random_gts(rng, 4);
    AssignConfig cfg;
    cfg.topk = 5;
    auto a = assign_o2m(img, gts, cfg);
    // oracle: per-gt top-k lists, then the owner of a contested cell is the max t
    std::map<int, std::pair<double, int>> owner;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      std::vector<std::pair<double, int>> c;
      for (std::size_t k = 0; k < img.size(); ++k)
        if (oracle_candidate(img, k, gts[g])) c.emplace_back(-oracle_metric(img, k, gts[g]), static_cast<int>(k));
      std::sort(c.begin(), c.end());
      for (std::size_t i = 0; i < c.size() && i < 5; ++i) {
        const double t = -c[i].first;
        auto it = owner.find(c[i].second);
        if (it == owner.end() || t > it->second.first) owner[c[i].second] = {t, static_cast<int>(g)};
      }
    }
    REQUIRE(a.pairs.size() == owner.size());
    for (const auto& p : a.pairs) CHECK(owner.at(p.cell).second == p.gt);
  }
}

TEST_CASE("o2o is injective and matches the brute-force oracle") {
  std::mt19937_64 rng(12);
  for (int trial = 0; trial < 1000; ++trial) {
    auto img = random_image(rng);
    std::uniform_int_distribution<int> n(1, 6);
    auto gts = random_gts(rng, n(rng));
    auto a = assign_o2o(img, gts);
    CHECK(a.pairs.size() == gts.size());
    std::set<int> cells, gs;
    for (const auto& p : a.pairs) {
      CHECK(cells.insert(p.cell).second);
      CHECK(gs.insert(p.gt).second);
    }
    if (trial < 100) {
      auto want = oracle_o2o(img, gts);
      if (want.size() == gts.size()) {
        REQUIRE(want.size() == a.pairs.size());
        for (std::size_t i = 0; i < want.size(); ++i) {
          CHECK(a.pairs[i].cell == want[i].first);
          CHECK(a.pairs[i].gt == want[i].second);
        }
      }
    }
  }
}

TEST_CASE("o2o gives the second gt the second-best cell") {
  DecodedImage img;
  img.input_size = 32;
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 4; ++x) {
      img.cells.push_back({0, 8, y, x, x * 8 + 4.0, y * 8 + 4.0});
      img.boxes.push_back({(x * 8 + 4.0) / 32, (y * 8 + 4.0) / 32, 8.0 / 32, 8.0 / 32});
      img.logits.push_back(0.0f);
    }
  // two identical gts centred between cells (1,1) and (2,1)
  const BBox box{16.0 / 32, 12.0 / 32, 10.0 / 32, 6.0 / 32};
  std::vector<GroundTruth> gts{{box, 0}, {box, 0}};
  auto a = assign_o2o(img, gts);
  REQUIRE(a.pairs.size() == 2);
  CHECK(a.pairs[0].cell != a.pairs[1].cell);
  CHECK(a.pairs[0].gt == 0);  // first gt wins the tie at the lower cell
  CHECK(a.pairs[0].cell == 1 * 4 + 1);
  CHECK(a.pairs[1].cell == 1 * 4 + 2);
}

TEST_CASE("nms-free decode") {
  DecodedImage img;
  img.input_size = 32;
  for (int i = 0; i < 16; ++i) {
    img.cells.push_back({0, 8, i / 4, i % 4, (i % 4) * 8 + 4.0, (i / 4) * 8 + 4.0});
    img.boxes.push_back({((i % 4) * 8 + 4.0) / 32, ((i / 4) * 8 + 4.0) / 32, 0.3, 0.3});
    img.logits.push_back(-10.0f);
  }
  CHECK(decode_nms_free(img, 0.25).empty());
  img.logits[5] = 10.0f;
  auto d = decode_nms_free(img, 0.25);
  REQUIRE(d.size() == 1);
  CHECK(d[0].score == doctest::Approx(1.0).epsilon(1e-4));
  for (int i = 0; i < 16; i += 2) img.logits[static_cast<std::size_t>(i)] = 1.0f + 0.1f * i;
  d = decode_nms_free(img, 0.25);
  CHECK(d.size() == 9);
  for (std::size_t i = 1; i < d.size(); ++i) CHECK(d[i - 1].score >= d[i].score);
  for (const auto& det : d) {
    CHECK((det.score >= 0 && det.score <= 1));
    CHECK((det.box.x1() >= 0 && det.box.x2() <= 1 && det.box.y1() >= 0 && det.box.y2() <= 1));
  }
}

TEST_CASE("nms keeps the stronger of two overlapping boxes") {
  std::vector<Detection> in{{{0.5, 0.5, 0.2, 0.2}, 0, 0.9}, {{0.505, 0.5, 0.2, 0.2}, 0, 0.8}};
  REQUIRE(iou(in[0].box, in[1].box) > 0.9);
  auto out = nms(in, 0.5);
  REQUIRE(out.size() == 1);
  CHECK(out[0].score == 0.9);
  std::vector<Detection> apart{{{0.2, 0.2, 0.1, 0.1}, 0, 0.9}, {{0.7, 0.7, 0.1, 0.1}, 0, 0.8}};
  CHECK(nms(apart, 0.5).size() == 2);
}

TEST_CASE("nms equals the exhaustive suppression oracle") {
  std::mt19937_64 rng(21);
  std::uniform_real_distribution<double> u(0.2, 0.8), s(0.05, 0.3), sc(0, 1);
  std::uniform_int_distribution<int> cls(0, 1);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<Detection> dets;
    for (int i = 0; i < 50; ++i) dets.push_back({{u(rng), u(rng), s(rng), s(rng)}, cls(rng), sc(rng)});
    std::stable_sort(dets.begin(), dets.end(), [](const auto& a, const auto& b) { return a.score > b.score; });
    auto kept = nms(dets, 0.45);
    auto want = oracle_nms(dets, 0.45);
    REQUIRE(kept.size() == want.size());
    for (std::size_t i = 0; i < want.size(); ++i) CHECK(kept[i].score == dets[static_cast<std::size_t>(want[i])].score);
  }
}

TEST_CASE("nms output is a subset of nms-free output") {
  std::mt19937_64 rng(30);
  for (int trial = 0; trial < 20; ++trial) {
    auto img = random_image(rng);
    auto all = decode_nms_free(img, 0.5);
    auto kept = decode_with_nms(img, 0.5, 0.5);
    std::size_t n = 0;
    for (const auto& c : all) CHECK(c.score > 0.5);
    for (const auto& k : kept) {
      const bool found = std::any_of(all.begin(), all.end(), [&](const Detection& a) {
        return a.score == k.score && a.box == k.box;
      });
      CHECK(found);
      ++n;
    }
    CHECK(n <= all.size());
  }
}

TEST_CASE("decoding from raw predictions") {
  ModelConfig cfg;
  cfg.input_size = 64;
  Detector det(cfg, 3);
  Tensorf x({2, 3, 64, 64}, 0.5f);
  auto preds = det.forward(x, false);
  auto imgs = decode_branch(preds, preds.inference_branch());
  REQUIRE(imgs.size() == 2);
  CHECK(imgs[0].size() == static_cast<std::size_t>(16 * 16 + 8 * 8 + 4 * 4));
  // untrained prior sits at sigmoid(-log 99) = 0.01
  CHECK(decode_nms_free(preds, 0.25).empty());
  CHECK(decode_nms_free(preds, 0.001).size() == imgs[0].size());
}
