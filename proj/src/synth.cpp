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
#include "microdet/synth.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

namespace microdet {

namespace fs = std::filesystem;

std::string condition_name(Condition c) {
  switch (c) {
    case Condition::clear: return "clear";
    case Condition::backlight: return "backlight";
    case Condition::fog: return "fog";
    case Condition::dusk: return "dusk";
  }
  return "clear";
}

Condition parse_condition(const std::string& name) {
  for (Condition c : {Condition::clear, Condition::backlight, Condition::fog, Condition::dusk})
    if (condition_name(c) == name) return c;
  throw ConfigError("unknown condition '" + name + "'");
}

void SynthConfig::validate() const {
  if (image_size < 32 || image_size % 16 != 0)
    throw ConfigError("image_size must be a multiple of 16 and >= 32, got " + std::to_string(image_size));
  if (min_targets < 0 || max_targets < min_targets) throw ConfigError("need 0 <= min_targets <= max_targets");
  if (min_target_px < 4 || max_target_px < min_target_px || max_target_px > image_size / 2.0)
    throw ConfigError("need 4 <= min_target_px <= max_target_px <= image_size/2");
  if (small_fraction < 0 || small_fraction > 1) throw ConfigError("small_fraction must lie in [0,1]");
  if (min_distractors < 0 || max_distractors < min_distractors)
    throw ConfigError("need 0 <= min_distractors <= max_distractors");
  if (condition_weights.size() != 4) throw ConfigError("condition_weights needs 4 entries");
  double total = 0;
  for (double w : condition_weights) {
    if (!(w >= 0)) throw ConfigError("condition_weights must be non-negative");
    total += w;
  }
  if (!(total > 0)) throw ConfigError("condition_weights must not all be zero");
}

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

struct Rgb {
  double r = 0, g = 0, b = 0;
};

Rgb mix(const Rgb& a, const Rgb& b, double t) {
  return {a.r + (b.r - a.r) * t, a.g + (b.g - a.g) * t, a.b + (b.b - a.b) * t};
}

struct PxBox {
  double x0, y0, w, h;
  bool overlaps(const PxBox& o, double margin) const {
    return x0 - margin < o.x0 + o.w && o.x0 - margin < x0 + w && y0 - margin < o.y0 + o.h && o.y0 - margin < y0 + h;
  }
};

struct Cloud {
  std::vector<std::array<double, 4>> lobes;  // cx, cy, rx, ry
  double alpha;
};

struct Building {
  int x0, x1, top;
  double shade;
};

struct Bird {
  double cx, cy, span, tilt, shade;
};

struct Target {
  PxBox box;
  Rgb color;
};

struct Layout {
  int size = 0;
  Condition condition = Condition::clear;
  Rgb top, bottom;
  bool glare = false;
  double sun_x = 0, sun_y = 0, sun_sigma = 1, sun_strength = 0;
  std::vector<Cloud> clouds;
  std::vector<Building> buildings;
  std::vector<Bird> birds;
  std::vector<Target> targets;
  double fog = 0;
  Rgb fog_color;
  double brightness = 1;
  double noise_sigma = 0;
  std::uint64_t noise_seed = 0;
  int distractors = 0;
};

double uniform(std::mt19937_64& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }
int uniform_int(std::mt19937_64& rng, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }

Rgb jitter(std::mt19937_64& rng, Rgb c, double amount) {
  c.r = std::clamp(c.r + uniform(rng, -amount, amount), 0.0, 1.0);
  c.g = std::clamp(c.g + uniform(rng, -amount, amount), 0.0, 1.0);
  c.b = std::clamp(c.b + uniform(rng, -amount, amount), 0.0, 1.0);
  return c;
}

enum class Clutter { bird, cloud, building };

constexpr double kSeparation = 4.0;  // px between labeled targets and birds

Layout plan(std::uint64_t seed, const SynthConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(splitmix64(seed));
  Layout L;
  const int n = cfg.image_size;
  L.size = n;
  std::discrete_distribution<int> pick(cfg.condition_weights.begin(), cfg.condition_weights.end());
  L.condition = static_cast<Condition>(pick(rng));
  double dark_lo = 0.08, dark_hi = 0.3;
  switch (L.condition) {
    case Condition::clear:
      L.top = jitter(rng, {0.32, 0.52, 0.84}, 0.05);
      L.bottom = jitter(rng, {0.74, 0.84, 0.95}, 0.04);
      L.noise_sigma = 0.01;
      break;
    case Condition::backlight:
      L.top = jitter(rng, {0.84, 0.87, 0.92}, 0.04);
      L.bottom = jitter(rng, {0.96, 0.95, 0.90}, 0.03);
      L.glare = true;
      L.sun_x = uniform(rng, 0, n);
      L.sun_y = uniform(rng, 0, n * 0.4);
      L.sun_sigma = uniform(rng, 0.15, 0.35) * n;
      L.sun_strength = uniform(rng, 0.1, 0.3);
      dark_lo = 0.02;
      dark_hi = 0.12;
      L.noise_sigma = 0.012;
      break;
    case Condition::fog:
      L.top = jitter(rng, {0.68, 0.70, 0.73}, 0.04);
      L.bottom = jitter(rng, {0.80, 0.81, 0.82}, 0.03);
      dark_lo = 0.1;
      L.noise_sigma = 0.02;
      break;
    case Condition::dusk:
      L.top = jitter(rng, {0.20, 0.22, 0.42}, 0.05);
      L.bottom = jitter(rng, {0.86, 0.56, 0.36}, 0.05);
      dark_lo = 0.04;
      dark_hi = 0.18;
      L.noise_sigma = 0.025;
      break;
  }

  const int n_targets = uniform_int(rng, cfg.min_targets, cfg.max_targets);
  const int n_clutter = uniform_int(rng, cfg.min_distractors, cfg.max_distractors);
  std::vector<Clutter> clutter;
  for (int i = 0; i < n_clutter; ++i) clutter.push_back(static_cast<Clutter>(uniform_int(rng, 0, 2)));

  // Building edges along the bottom; targets and birds stay above them.
  int skyline = n;
  for (Clutter c : clutter) {
    if (c != Clutter::building) continue;
    const int w = uniform_int(rng, n / 10, n / 4);
    const int x0 = uniform_int(rng, -w / 2, n - w / 2);
    const int top = n - uniform_int(rng, n / 12, n / 6);
    L.buildings.push_back({std::max(0, x0), std::min(n, x0 + w), top, uniform(rng, 0.12, 0.35)});
    skyline = std::min(skyline, top);
  }

  std::vector<PxBox> taken;
  const double small_hi = std::min(cfg.small_px, cfg.max_target_px);
  std::vector<std::pair<double, double>> sizes;
  for (int t = 0; t < n_targets; ++t) {
    double side;
    if (cfg.max_target_px < cfg.small_px || uniform(rng, 0, 1) < cfg.small_fraction)
      side = small_hi > cfg.min_target_px ? uniform(rng, cfg.min_target_px, small_hi) : cfg.min_target_px;
    else
      side = uniform(rng, std::max(cfg.small_px, cfg.min_target_px), cfg.max_target_px);
    sizes.emplace_back(side, std::max(cfg.min_target_px, side * uniform(rng, 0.7, 1.0)));
  }
  // Largest first, each at a uniformly drawn free spot of a one-pixel lattice.
  // A layout that paints itself into a corner is redrawn.
  std::stable_sort(sizes.begin(), sizes.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  constexpr int kLayoutRounds = 25;
  for (int round = 0;; ++round) {
    taken.clear();
    L.targets.clear();
    std::size_t t = 0;
    for (; t < sizes.size(); ++t) {
      const auto [w, h] = sizes[t];
      const double fx = uniform(rng, 0, 1), fy = uniform(rng, 0, 1);
      std::vector<PxBox> free;
      for (int iy = 1; iy + fy + h <= skyline - 1.0; ++iy)
        for (int ix = 1; ix + fx + w <= n - 1.0; ++ix) {
          const PxBox b{ix + fx, iy + fy, w, h};
          if (std::none_of(taken.begin(), taken.end(), [&](const PxBox& o) { return b.overlaps(o, kSeparation); }))
            free.push_back(b);
        }
      if (free.empty()) break;
      const PxBox b = free[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(free.size()) - 1))];
      taken.push_back(b);
      const double v = uniform(rng, dark_lo, dark_hi);
      L.targets.push_back(
          {b, {v, std::min(1.0, v * uniform(rng, 0.9, 1.1)), std::min(1.0, v * uniform(rng, 0.9, 1.15))}});
    }
    if (t == sizes.size()) break;
    if (round + 1 == kLayoutRounds) {
      throw Error("cannot place target " + std::to_string(t + 1) + " of " + std::to_string(n_targets) + " in a " +
                  std::to_string(n) + " px image");
    }
  }

  L.distractors = static_cast<int>(L.buildings.size());
  for (Clutter c : clutter) {
    if (c == Clutter::bird) {
      const double span = uniform(rng, 4.0, 11.0);
      for (int attempt = 0; attempt < 50; ++attempt) {
        const double cx = uniform(rng, span, n - span), cy = uniform(rng, span, std::max(span + 1.0, skyline - span));
        const PxBox b{cx - span / 2 - 1, cy - span / 2 - 1, span + 2, span + 2};
        if (std::any_of(taken.begin(), taken.end(), [&](const PxBox& o) { return b.overlaps(o, kSeparation); })) continue;
        taken.push_back(b);
        L.birds.push_back({cx, cy, span, uniform(rng, -0.4, 0.4), uniform(rng, 0.05, 0.3)});
        ++L.distractors;
        break;
      }
    } else if (c == Clutter::cloud) {
      Cloud cl;
      cl.alpha = uniform(rng, 0.25, 0.6);
      const double cx = uniform(rng, 0, n), cy = uniform(rng, 0, n * 0.7);
      const int lobes = uniform_int(rng, 3, 6);
      for (int i = 0; i < lobes; ++i) {
        cl.lobes.push_back({cx + uniform(rng, -0.15, 0.15) * n, cy + uniform(rng, -0.05, 0.05) * n,
                            uniform(rng, 0.05, 0.15) * n, uniform(rng, 0.03, 0.07) * n});
      }
      L.clouds.push_back(cl);
      ++L.distractors;
    }
  }

  if (L.condition == Condition::fog) {
    L.fog = uniform(rng, 0.35, 0.55);
    L.fog_color = jitter(rng, {0.82, 0.83, 0.85}, 0.03);
  }
  if (L.condition == Condition::dusk) L.brightness = uniform(rng, 0.75, 0.9);
  L.noise_seed = rng();
  return L;
}

// Fraction of a 4x4 sample grid inside a shape.
template <typename F>
double coverage(int px, int py, const F& inside) {
  int hits = 0;
  for (int sy = 0; sy < 4; ++sy)
    for (int sx = 0; sx < 4; ++sx)
      if (inside(px + (sx + 0.5) / 4.0, py + (sy + 0.5) / 4.0)) ++hits;
  return hits / 16.0;
}

double segment_distance(double px, double py, double ax, double ay, double bx, double by) {
  const double dx = bx - ax, dy = by - ay;
  const double len2 = dx * dx + dy * dy;
  double t = len2 > 0 ? ((px - ax) * dx + (py - ay) * dy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double qx = ax + t * dx - px, qy = ay + t * dy - py;
  return std::sqrt(qx * qx + qy * qy);
}

// Four rotor discs touching the box corners' sides, two diagonal arms and a body disc.
bool inside_multirotor(const PxBox& b, double x, double y) {
  const double m = std::min(b.w, b.h);
  const double r = 0.22 * m, body = 0.2 * m, arm = std::max(0.06 * m, 0.35);
  const double lx = b.x0 + r, rx = b.x0 + b.w - r, ty = b.y0 + r, by = b.y0 + b.h - r;
  const double cx = b.x0 + b.w / 2, cy = b.y0 + b.h / 2;
  auto in_disc = [&](double ox, double oy, double rad) { return (x - ox) * (x - ox) + (y - oy) * (y - oy) <= rad * rad; };
  if (in_disc(lx, ty, r) || in_disc(rx, ty, r) || in_disc(lx, by, r) || in_disc(rx, by, r)) return true;
  if (in_disc(cx, cy, body)) return true;
  return segment_distance(x, y, lx, ty, rx, by) <= arm || segment_distance(x, y, rx, ty, lx, by) <= arm;
}

// Small body with two swept wings.
bool inside_bird(const Bird& b, double x, double y) {
  const double c = std::cos(b.tilt), s = std::sin(b.tilt);
  const double u = c * (x - b.cx) + s * (y - b.cy), v = -s * (x - b.cx) + c * (y - b.cy);
  const double rx = 0.14 * b.span, ry = 0.09 * b.span;
  if ((u * u) / (rx * rx) + (v * v) / (ry * ry) <= 1.0) return true;
  const double half = b.span / 2, lift = 0.28 * b.span, th = std::max(0.35, 0.05 * b.span);
  return segment_distance(u, v, 0, 0, -half, -lift) <= th || segment_distance(u, v, 0, 0, half, -lift) <= th;
}

struct Canvas {
  int n;
  std::vector<double> px;  // planar RGB
  explicit Canvas(int size) : n(size), px(3 * std::size_t(size) * size, 0.0) {}
  double& at(int c, int y, int x) { return px[(std::size_t(c) * n + y) * n + x]; }
  void blend(int x, int y, double a, const Rgb& col) {
    if (a <= 0) return;
    at(0, y, x) += a * (col.r - at(0, y, x));
    at(1, y, x) += a * (col.g - at(1, y, x));
    at(2, y, x) += a * (col.b - at(2, y, x));
  }
};

template <typename F>
void paint(Canvas& cv, double x0, double y0, double x1, double y1, const Rgb& col, const F& inside) {
  const int sx = std::max(0, int(std::floor(x0))), ex = std::min(cv.n - 1, int(std::ceil(x1)));
  const int sy = std::max(0, int(std::floor(y0))), ey = std::min(cv.n - 1, int(std::ceil(y1)));
  for (int y = sy; y <= ey; ++y)
    for (int x = sx; x <= ex; ++x) cv.blend(x, y, coverage(x, y, inside), col);
}

Tensorf render(const Layout& L, bool with_targets) {
  const int n = L.size;
  Canvas cv(n);
  for (int y = 0; y < n; ++y) {
    const Rgb row = mix(L.top, L.bottom, (y + 0.5) / n);
    for (int x = 0; x < n; ++x) {
      double glow = 0;
      if (L.glare) {
        const double dx = x + 0.5 - L.sun_x, dy = y + 0.5 - L.sun_y;
        glow = L.sun_strength * std::exp(-(dx * dx + dy * dy) / (2 * L.sun_sigma * L.sun_sigma));
      }
      cv.at(0, y, x) = std::min(1.0, row.r + glow);
      cv.at(1, y, x) = std::min(1.0, row.g + glow);
      cv.at(2, y, x) = std::min(1.0, row.b + glow);
    }
  }
  const Rgb cloud_col{0.97, 0.97, 0.98};
  for (const auto& cl : L.clouds) {
    for (int y = 0; y < n; ++y)
      for (int x = 0; x < n; ++x) {
        double d = 0;
        for (const auto& l : cl.lobes) {
          const double dx = (x + 0.5 - l[0]) / l[2], dy = (y + 0.5 - l[1]) / l[3];
          d += std::exp(-(dx * dx + dy * dy));
        }
        cv.blend(x, y, cl.alpha * std::min(1.0, d), cloud_col);
      }
  }
  for (const auto& b : L.buildings) {
    const Rgb col{b.shade, b.shade, b.shade * 1.05};
    for (int y = b.top; y < n; ++y)
      for (int x = b.x0; x < b.x1; ++x) cv.blend(x, y, 1.0, col);
  }
  for (const auto& b : L.birds) {
    const Rgb col{b.shade, b.shade * 0.95, b.shade * 0.9};
    paint(cv, b.cx - b.span, b.cy - b.span, b.cx + b.span, b.cy + b.span, col,
          [&](double x, double y) { return inside_bird(b, x, y); });
  }
  if (with_targets) {
    for (const auto& t : L.targets) {
      paint(cv, t.box.x0, t.box.y0, t.box.x0 + t.box.w, t.box.y0 + t.box.h, t.color,
            [&](double x, double y) { return inside_multirotor(t.box, x, y); });
    }
  }
  std::mt19937_64 noise_rng(L.noise_seed);
  std::normal_distribution<double> noise(0.0, L.noise_sigma);
  const double fog_col[3] = {L.fog_color.r, L.fog_color.g, L.fog_color.b};
  Tensorf out({3, n, n}, 0.f);
  auto dst = out.data();
  for (std::size_t i = 0; i < cv.px.size(); ++i) {
    double v = cv.px[i];
    if (L.fog > 0) v = (1 - L.fog) * v + L.fog * fog_col[i / (std::size_t(n) * n)];
    v = v * L.brightness + noise(noise_rng);
    dst[i] = static_cast<float>(std::clamp(v, 0.0, 1.0));
  }
  return out;
}

}  // namespace

Scene generate_scene(std::uint64_t seed, const SynthConfig& cfg) {
  const Layout L = plan(seed, cfg);
  Scene s;
  s.image = render(L, true);
  s.meta.seed = seed;
  s.meta.condition = L.condition;
  s.meta.distractor_count = L.distractors;
  const double n = L.size;
  for (const auto& t : L.targets) {
    s.gts.push_back({{(t.box.x0 + t.box.w / 2) / n, (t.box.y0 + t.box.h / 2) / n, t.box.w / n, t.box.h / n}, 0});
    s.meta.target_px.push_back(std::max(t.box.w, t.box.h));
  }
  return s;
}

Tensorf render_background(std::uint64_t seed, const SynthConfig& cfg) { return render(plan(seed, cfg), false); }

// ---------------------------------------------------------------------------
// Labels

void write_labels(const std::vector<GroundTruth>& gts, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  char line[128];
  for (const auto& g : gts) {
    std::snprintf(line, sizeof line, "%d %.6f %.6f %.6f %.6f\n", g.class_id, g.box.cx, g.box.cy, g.box.w, g.box.h);
    out << line;
  }
  if (!out) throw Error("write failed for " + path.string());
}

std::vector<GroundTruth> parse_labels(const std::string& text, const std::string& source) {
  std::vector<GroundTruth> out;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    auto fail = [&](const std::string& msg) {
      throw FormatError(source + ":" + std::to_string(line_no) + ": " + msg);
    };
    std::istringstream fields(line);
    std::vector<std::string> tok;
    for (std::string t; fields >> t;) tok.push_back(t);
    if (tok.empty()) continue;
    if (tok.size() != 5) fail("expected 5 fields, got " + std::to_string(tok.size()));
    int cls = 0;
    const auto [pc, ec] = std::from_chars(tok[0].data(), tok[0].data() + tok[0].size(), cls);
    if (ec != std::errc() || pc != tok[0].data() + tok[0].size() || cls < 0)
      fail("class must be a non-negative integer, got '" + tok[0] + "'");
    double v[4];
    for (int i = 0; i < 4; ++i) {
      char* end = nullptr;
      v[i] = std::strtod(tok[1 + i].c_str(), &end);
      if (*end != '\0' || !std::isfinite(v[i])) fail("bad number '" + tok[1 + i] + "'");
      if (v[i] < 0 || v[i] > 1) fail("value " + tok[1 + i] + " outside [0,1]");
    }
    out.push_back({{v[0], v[1], v[2], v[3]}, cls});
  }
  return out;
}

std::vector<GroundTruth> read_labels(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return parse_labels(os.str(), path.string());
}

// ---------------------------------------------------------------------------
// PPM

void write_image_ppm(const Tensorf& image, const fs::path& path) {
  if (image.rank() != 3 || image.dim(0) != 3) throw ShapeError("PPM needs a [3,H,W] image, got " + shape_str(image.shape()));
  const int h = image.dim(1), w = image.dim(2);
  std::string bytes = "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  const std::size_t header = bytes.size(), plane = std::size_t(h) * w;
  bytes.resize(header + 3 * plane);
  const auto src = image.data();
  for (std::size_t i = 0; i < plane; ++i)
    for (int c = 0; c < 3; ++c) {
      const float v = std::clamp(src[c * plane + i], 0.f, 1.f);
      bytes[header + 3 * i + c] = static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.f)));
    }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("write failed for " + path.string());
}

Tensorf read_image_ppm(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  const std::string bytes = os.str();
  const std::string where = path.string();
  std::size_t pos = 0;
  auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto number = [&](const char* what) {
    skip_space();
    const std::size_t start = pos;
    long long v = 0;
    while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos])) && pos - start < 9)
      v = v * 10 + (bytes[pos++] - '0');
    if (pos == start) throw FormatError(where + ": missing " + what);
    return v;
  };
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '6') throw FormatError(where + ": not a binary PPM (P6)");
  pos = 2;
  const long long w = number("width"), h = number("height"), maxval = number("maxval");
  if (w <= 0 || h <= 0) throw FormatError(where + ": bad dimensions " + std::to_string(w) + "x" + std::to_string(h));
  if (maxval != 255) throw FormatError(where + ": only 8-bit PPM (maxval 255) is supported");
  if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos])))
    throw FormatError(where + ": truncated header");
  ++pos;
  const std::size_t plane = std::size_t(w) * std::size_t(h);
  if (bytes.size() - pos < 3 * plane)
    throw FormatError(where + ": truncated pixel data, expected " + std::to_string(3 * plane) + " bytes, found " +
                      std::to_string(bytes.size() - pos));
  Tensorf out({3, int(h), int(w)}, 0.f);
  auto dst = out.data();
  for (std::size_t i = 0; i < plane; ++i)
    for (int c = 0; c < 3; ++c) dst[c * plane + i] = static_cast<unsigned char>(bytes[pos + 3 * i + c]) / 255.f;
  return out;
}

// ---------------------------------------------------------------------------
// Dataset

std::uint64_t scene_seed(const DatasetSpec& spec, const std::string& split, int index) {
  if (split == "train") return spec.seed + std::uint64_t(index);
  if (split == "val") return spec.seed + std::uint64_t(spec.train) + std::uint64_t(index);
  if (split == "test") return spec.seed + std::uint64_t(spec.train) + std::uint64_t(spec.val) + std::uint64_t(index);
  throw Error("unknown split '" + split + "' (expected train, val or test)");
}

std::vector<std::string> synth_keys() {
  return {"image_size",      "min_targets",     "max_targets",    "min_target_px",    "max_target_px",
          "small_px",        "small_fraction",  "min_distractors", "max_distractors", "condition_weights"};
}

void synth_to_ini(const SynthConfig& cfg, IniDocument& doc, const std::string& section) {
  doc.set(section, "image_size", std::to_string(cfg.image_size));
  doc.set(section, "min_targets", std::to_string(cfg.min_targets));
  doc.set(section, "max_targets", std::to_string(cfg.max_targets));
  doc.set(section, "min_target_px", ini_number(cfg.min_target_px));
  doc.set(section, "max_target_px", ini_number(cfg.max_target_px));
  doc.set(section, "small_px", ini_number(cfg.small_px));
  doc.set(section, "small_fraction", ini_number(cfg.small_fraction));
  doc.set(section, "min_distractors", std::to_string(cfg.min_distractors));
  doc.set(section, "max_distractors", std::to_string(cfg.max_distractors));
  std::string w;
  for (std::size_t i = 0; i < cfg.condition_weights.size(); ++i) w += (i ? "," : "") + ini_number(cfg.condition_weights[i]);
  doc.set(section, "condition_weights", w);
}

SynthConfig synth_from_ini(const IniDocument& doc, const std::string& section, SynthConfig cfg) {
  cfg.image_size = doc.get_int(section, "image_size", cfg.image_size);
  cfg.min_targets = doc.get_int(section, "min_targets", cfg.min_targets);
  cfg.max_targets = doc.get_int(section, "max_targets", cfg.max_targets);
  cfg.min_target_px = doc.get_double(section, "min_target_px", cfg.min_target_px);
  cfg.max_target_px = doc.get_double(section, "max_target_px", cfg.max_target_px);
  cfg.small_px = doc.get_double(section, "small_px", cfg.small_px);
  cfg.small_fraction = doc.get_double(section, "small_fraction", cfg.small_fraction);
  cfg.min_distractors = doc.get_int(section, "min_distractors", cfg.min_distractors);
  cfg.max_distractors = doc.get_int(section, "max_distractors", cfg.max_distractors);
  if (auto w = doc.get(section, "condition_weights")) {
    cfg.condition_weights.clear();
    std::istringstream in(*w);
    for (std::string tok; std::getline(in, tok, ',');) {
      char* end = nullptr;
      const double v = std::strtod(tok.c_str(), &end);
      if (tok.empty() || (*end != '\0' && !std::isspace(static_cast<unsigned char>(*end))))
        throw ConfigError(section + ".condition_weights: bad number '" + tok + "'");
      cfg.condition_weights.push_back(v);
    }
  }
  cfg.validate();
  return cfg;
}

namespace {

std::string index_name(int i) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%06d", i);
  return buf;
}

}  // namespace

DatasetStats write_dataset(const fs::path& root, const DatasetSpec& spec) {
  DatasetStats stats;
  spec.synth.validate();
  if (spec.train < 0 || spec.val < 0 || spec.test < 0) throw ConfigError("split sizes must be non-negative");
  for (const std::string split : {"train", "val", "test"}) {
    const int count = split == "train" ? spec.train : split == "val" ? spec.val : spec.test;
    if (split == "test" && count == 0) continue;
    fs::create_directories(root / "images" / split);
    fs::create_directories(root / "labels" / split);
    for (int i = 0; i < count; ++i) {
      const Scene s = generate_scene(scene_seed(spec, split, i), spec.synth);
      ++stats.images;
      stats.targets += static_cast<int>(s.gts.size());
      for (double px : s.meta.target_px) stats.small_targets += px < spec.synth.small_px ? 1 : 0;
      stats.distractors += s.meta.distractor_count;
      ++stats.conditions[static_cast<std::size_t>(s.meta.condition)];
      write_image_ppm(s.image, root / "images" / split / (index_name(i) + ".ppm"));
      write_labels(s.gts, root / "labels" / split / (index_name(i) + ".txt"));
    }
  }
  IniDocument doc;
  doc.set("dataset", "seed", std::to_string(spec.seed));
  doc.set("dataset", "train", std::to_string(spec.train));
  doc.set("dataset", "val", std::to_string(spec.val));
  doc.set("dataset", "test", std::to_string(spec.test));
  doc.set("dataset", "train_seeds", std::to_string(spec.seed) + ".." + std::to_string(spec.seed + spec.train));
  doc.set("dataset", "val_seeds",
          std::to_string(spec.seed + spec.train) + ".." + std::to_string(spec.seed + spec.train + spec.val));
  doc.set("dataset", "test_seeds",
          std::to_string(spec.seed + spec.train + spec.val) + ".." +
              std::to_string(spec.seed + spec.train + spec.val + spec.test));
  synth_to_ini(spec.synth, doc, "synth");
  std::ofstream out(root / "dataset.cfg");
  out << "# seed ranges are half-open\n" << doc.to_string();
  if (!out) throw Error("cannot write " + (root / "dataset.cfg").string());
  return stats;
}

DatasetSpec read_dataset_manifest(const fs::path& root) {
  const IniDocument doc = IniDocument::load(root / "dataset.cfg");
  std::set<std::string> synth;
  for (const auto& k : synth_keys()) synth.insert(k);
  doc.require_known({{"dataset", {"seed", "train", "val", "test", "train_seeds", "val_seeds", "test_seeds"}}, {"synth", synth}});
  DatasetSpec spec;
  spec.seed = static_cast<std::uint64_t>(doc.get_int64("dataset", "seed", 0));
  spec.train = doc.get_int("dataset", "train", 0);
  spec.val = doc.get_int("dataset", "val", 0);
  spec.test = doc.get_int("dataset", "test", 0);
  spec.synth = synth_from_ini(doc, "synth");
  return spec;
}

std::uint64_t dataset_hash(const fs::path& root) {
  if (!fs::is_directory(root)) throw Error("missing directory " + root.string());
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) files.push_back(fs::relative(e.path(), root));
  std::sort(files.begin(), files.end());
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&h](const char* p, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) {
      h ^= static_cast<unsigned char>(p[i]);
      h *= 0x100000001b3ULL;
    }
  };
  std::vector<char> buf(1 << 16);
  for (const auto& rel : files) {
    const std::string name = rel.generic_string();
    mix(name.c_str(), name.size() + 1);
    std::ifstream in(root / rel, std::ios::binary);
    while (in) {
      in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
      mix(buf.data(), static_cast<std::size_t>(in.gcount()));
    }
  }
  return h;
}

std::vector<Sample> load_split(const fs::path& root, const std::string& split) {
  if (split != "train" && split != "val" && split != "test")
    throw Error("unknown split '" + split + "' (expected train, val or test)");
  const fs::path images = root / "images" / split, labels = root / "labels" / split;
  if (!fs::is_directory(images)) throw Error("missing directory " + images.string());
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(images))
    if (e.path().extension() == ".ppm") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::vector<Sample> out;
  out.reserve(files.size());
  for (const auto& f : files) {
    Sample s;
    s.id = f.stem().string();
    s.image = read_image_ppm(f);
    s.gts = read_labels(labels / (s.id + ".txt"));
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace microdet
