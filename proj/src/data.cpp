/*
 * Copyright 2026 The attnpaint Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *    http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#include "attnpaint/data.hpp"

#include "attnpaint/prompt.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace attnpaint {

namespace {

constexpr double kPi = 3.14159265358979323846;

double uniform(std::mt19937_64& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

int uniform_int(std::mt19937_64& rng, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }

Mask empty_mask(Index size) { return Mask::zeros({size, size}); }

}  // namespace

int class_id(ShapeKind kind, Colour colour) { return static_cast<int>(kind) * 3 + static_cast<int>(colour); }

ShapeKind class_kind(int cls) {
  if (cls < 0 || cls >= kShapeClasses) throw std::invalid_argument("class id " + std::to_string(cls));
  return static_cast<ShapeKind>(cls / 3);
}

Colour class_colour(int cls) {
  if (cls < 0 || cls >= kShapeClasses) throw std::invalid_argument("class id " + std::to_string(cls));
  return static_cast<Colour>(cls % 3);
}

std::string class_name(int cls) {
  if (cls == kNoneClass) return "none";
  static const char* colours[] = {"red", "green", "blue"};
  static const char* kinds[] = {"circle", "square", "triangle"};
  return std::string(colours[static_cast<int>(class_colour(cls))]) + " " + kinds[static_cast<int>(class_kind(cls))];
}

std::vector<int> class_words(int cls) { return vocab::tokenize(class_name(cls)); }

bool ShapeInstance::contains(double u, double v) const {
  const double dx = u - cx, dy = v - cy;
  switch (kind) {
    case ShapeKind::Circle:
      return dx * dx + dy * dy <= radius * radius;
    case ShapeKind::Square: {
      const double h = 0.85 * radius;
      return std::abs(dx) <= h && std::abs(dy) <= h;
    }
    case ShapeKind::Triangle: {
      // upward equilateral triangle, circumradius 1.15 r, y grows downwards
      const double R = 1.15 * radius;
      const double ax = 0, ay = -R;
      const double bx = R * std::cos(kPi / 6), by = R / 2;
      const double cxv = -bx, cyv = by;
      auto side = [&](double x0, double y0, double x1, double y1) { return (x1 - x0) * (dy - y0) - (y1 - y0) * (dx - x0); };
      const double s1 = side(ax, ay, bx, by), s2 = side(bx, by, cxv, cyv), s3 = side(cxv, cyv, ax, ay);
      return (s1 >= 0 && s2 >= 0 && s3 >= 0) || (s1 <= 0 && s2 <= 0 && s3 <= 0);
    }
  }
  return false;
}

std::array<double, 3> Background::at(double u, double v) const {
  std::array<double, 3> c = base;
  for (const auto& w : waves) {
    const double s = w.amplitude * std::sin(2 * kPi * (w.fx * u + w.fy * v) + w.phase);
    for (int k = 0; k < 3; ++k) c[k] += s * w.tint[k];
  }
  for (auto& x : c) x = std::clamp(x, 0.0, 1.0);
  return c;
}

ShapeInstance random_shape(std::mt19937_64& rng, int cls, double radius, double cx, double cy) {
  ShapeInstance s;
  s.kind = class_kind(cls);
  s.colour = class_colour(cls);
  s.radius = radius;
  s.cx = cx;
  s.cy = cy;
  const double hi = uniform(rng, 0.75, 0.92), lo1 = uniform(rng, 0.05, 0.22), lo2 = uniform(rng, 0.05, 0.22);
  switch (s.colour) {
    case Colour::Red: s.rgb = {hi, lo1, lo2}; break;
    case Colour::Green: s.rgb = {lo1, hi * 0.9, lo2}; break;
    case Colour::Blue: s.rgb = {lo1, lo2, hi}; break;
  }
  return s;
}

Background random_background(std::mt19937_64& rng) {
  Background b;
  const double g = uniform(rng, 0.35, 0.7);
  for (auto& x : b.base) x = g + uniform(rng, -0.05, 0.05);
  const int n = uniform_int(rng, 1, 3);
  for (int i = 0; i < n; ++i) {
    Background::Wave w;
    const double f = uniform(rng, 1.0, 4.0), a = uniform(rng, 0, 2 * kPi);
    w.fx = f * std::cos(a);
    w.fy = f * std::sin(a);
    w.phase = uniform(rng, 0, 2 * kPi);
    w.amplitude = uniform(rng, 0.02, 0.06);
    const double t = uniform(rng, 0.7, 1.0);
    w.tint = {t + uniform(rng, -0.2, 0.2), t + uniform(rng, -0.2, 0.2), t + uniform(rng, -0.2, 0.2)};
    b.waves.push_back(w);
  }
  return b;
}

bool place_disc(std::mt19937_64& rng, const Scene& scene, double radius, double gap, double& cx, double& cy) {
  const double margin = radius * 1.2 + 1.0 / 32;
  for (int attempt = 0; attempt < 200; ++attempt) {
    cx = uniform(rng, margin, 1 - margin);
    cy = uniform(rng, margin, 1 - margin);
    bool ok = true;
    for (const auto& s : scene.shapes) {
      const double d = std::hypot(cx - s.cx, cy - s.cy);
      if (d < 1.2 * (radius + s.radius) + gap) ok = false;
    }
    if (ok) return true;
  }
  return false;
}

Scene random_scene(std::mt19937_64& rng, const SceneConfig& cfg) {
  Scene scene;
  scene.background = random_background(rng);
  const int n = uniform_int(rng, cfg.min_shapes, cfg.max_shapes);
  for (int i = 0; i < n; ++i) {
    const int cls = uniform_int(rng, 0, kShapeClasses - 1);
    const double r = uniform(rng, cfg.min_radius_px, cfg.max_radius_px) / 32.0;
    double cx, cy;
    if (!place_disc(rng, scene, r, cfg.gap_px / 32.0, cx, cy)) continue;
    scene.shapes.push_back(random_shape(rng, cls, r, cx, cy));
  }
  return scene;
}

Image render(const Scene& scene, Index size, int supersample) {
  Eigen::ArrayXd px = Eigen::ArrayXd::Zero(3 * size * size);
  const double inv = 1.0 / (size * supersample);
  for (Index y = 0; y < size; ++y)
    for (Index x = 0; x < size; ++x) {
      std::array<double, 3> acc{};
      for (int sy = 0; sy < supersample; ++sy)
        for (int sx = 0; sx < supersample; ++sx) {
          const double u = (x * supersample + sx + 0.5) * inv, v = (y * supersample + sy + 0.5) * inv;
          std::array<double, 3> c = scene.background.at(u, v);
          for (const auto& s : scene.shapes)
            if (s.contains(u, v)) c = s.rgb;
          for (int k = 0; k < 3; ++k) acc[k] += c[k];
        }
      for (int k = 0; k < 3; ++k) px[(k * size + y) * size + x] = acc[k] / (supersample * supersample);
    }
  return Image({3, size, size}, px);
}

Mask instance_mask(const ShapeInstance& shape, Index size, int supersample) {
  Eigen::ArrayXd m = Eigen::ArrayXd::Zero(size * size);
  const double inv = 1.0 / (size * supersample);
  for (Index y = 0; y < size; ++y)
    for (Index x = 0; x < size; ++x) {
      int hits = 0;
      for (int sy = 0; sy < supersample; ++sy)
        for (int sx = 0; sx < supersample; ++sx)
          hits += shape.contains((x * supersample + sx + 0.5) * inv, (y * supersample + sy + 0.5) * inv);
      m[y * size + x] = 2 * hits >= supersample * supersample ? 1.0 : 0.0;
    }
  return Mask({size, size}, m);
}

ShapesSample make_sample(const Scene& scene, Index size) {
  ShapesSample s;
  s.scene = scene;
  s.image = render(scene, size);
  for (const auto& sh : scene.shapes) {
    s.masks.push_back(instance_mask(sh, size));
    s.labels.push_back(sh.label());
  }
  return s;
}

std::vector<ShapesSample> generate_dataset(int n, std::uint64_t seed, Index size, const SceneConfig& cfg) {
  if (n < 1) throw std::invalid_argument("generate_dataset: n must be >= 1");
  std::mt19937_64 rng(seed);
  std::vector<ShapesSample> out;
  out.reserve(n);
  // classes come from shuffled decks of all nine so captions stay balanced
  std::vector<int> deck;
  for (int i = 0; i < n; ++i) {
    Scene scene = random_scene(rng, cfg);
    for (auto& shape : scene.shapes) {
      if (deck.empty()) {
        for (int c = 0; c < kShapeClasses; ++c) deck.push_back(c);
        std::shuffle(deck.begin(), deck.end(), rng);
      }
      shape = random_shape(rng, deck.back(), shape.radius, shape.cx, shape.cy);
      deck.pop_back();
    }
    out.push_back(make_sample(scene, size));
  }
  return out;
}

// ---------------------------------------------------------------------------

Mask box_mask(Index size, const Box& box) {
  Mask m = empty_mask(size);
  Eigen::ArrayXd v = m.array();
  for (Index y = std::max<Index>(0, box.y0); y < std::min(size, box.y1); ++y)
    for (Index x = std::max<Index>(0, box.x0); x < std::min(size, box.x1); ++x) v[y * size + x] = 1;
  return Mask({size, size}, v);
}

Box bounding_box(const Mask& mask) {
  const Index H = mask.dim(0), W = mask.dim(1);
  Box b{W, H, 0, 0};
  for (Index y = 0; y < H; ++y)
    for (Index x = 0; x < W; ++x)
      if (mask[y * W + x] != 0) {
        b.x0 = std::min(b.x0, x);
        b.y0 = std::min(b.y0, y);
        b.x1 = std::max(b.x1, x + 1);
        b.y1 = std::max(b.y1, y + 1);
      }
  if (b.x1 == 0) return Box{};
  return b;
}

Box dilate(const Box& box, Index by, Index size) {
  return {std::max<Index>(0, box.x0 - by), std::max<Index>(0, box.y0 - by), std::min(size, box.x1 + by),
          std::min(size, box.y1 + by)};
}

Mask dilate(const Mask& mask, int iterations) {
  const Index H = mask.dim(0), W = mask.dim(1);
  Eigen::ArrayXd cur = mask.array();
  for (int it = 0; it < iterations; ++it) {
    Eigen::ArrayXd next = cur;
    for (Index y = 0; y < H; ++y)
      for (Index x = 0; x < W; ++x) {
        if (cur[y * W + x] == 0) continue;
        for (Index dy = -1; dy <= 1; ++dy)
          for (Index dx = -1; dx <= 1; ++dx) {
            const Index yy = y + dy, xx = x + dx;
            if (yy >= 0 && yy < H && xx >= 0 && xx < W) next[yy * W + xx] = 1;
          }
      }
    cur = std::move(next);
  }
  return Mask(mask.shape(), cur);
}

Mask convex_hull(const Mask& mask) {
  const Index H = mask.dim(0), W = mask.dim(1);
  using P = std::array<long long, 2>;
  std::vector<P> pts;
  for (Index y = 0; y < H; ++y)
    for (Index x = 0; x < W; ++x)
      if (mask[y * W + x] != 0) pts.push_back({x, y});
  if (pts.size() <= 1) return Mask(mask.shape(), mask.array());
  std::sort(pts.begin(), pts.end());
  auto cross = [](const P& o, const P& a, const P& b) {
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0]);
  };
  // Andrew's monotone chain, collinear points dropped
  std::vector<P> hull(2 * pts.size());
  std::size_t k = 0;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    while (k >= 2 && cross(hull[k - 2], hull[k - 1], pts[i]) <= 0) --k;
    hull[k++] = pts[i];
  }
  for (std::size_t i = pts.size() - 1, t = k + 1; i > 0; --i) {
    while (k >= t && cross(hull[k - 2], hull[k - 1], pts[i - 1]) <= 0) --k;
    hull[k++] = pts[i - 1];
  }
  hull.resize(k - 1);
  Eigen::ArrayXd out = Eigen::ArrayXd::Zero(H * W);
  const Box bb = bounding_box(mask);
  for (Index y = bb.y0; y < bb.y1; ++y)
    for (Index x = bb.x0; x < bb.x1; ++x) {
      const P q{x, y};
      bool inside = true;
      if (hull.size() == 2) {
        // all points collinear: keep those on the segment
        const P &a = hull[0], &b = hull[1];
        inside = cross(a, b, q) == 0 && std::min(a[0], b[0]) <= x && x <= std::max(a[0], b[0]) &&
                 std::min(a[1], b[1]) <= y && y <= std::max(a[1], b[1]);
      } else {
        for (std::size_t i = 0; i < hull.size() && inside; ++i)
          if (cross(hull[i], hull[(i + 1) % hull.size()], q) < 0) inside = false;
      }
      if (inside) out[y * W + x] = 1;
    }
  return Mask(mask.shape(), out);
}

Box random_box(std::mt19937_64& rng, Index size, double min_fraction, double max_fraction) {
  const double area = uniform(rng, min_fraction, max_fraction) * size * size;
  const double aspect = std::exp(uniform(rng, std::log(0.5), std::log(2.0)));
  Index w = std::clamp<Index>(static_cast<Index>(std::lround(std::sqrt(area * aspect))), 1, size);
  Index h = std::clamp<Index>(static_cast<Index>(std::lround(area / w)), 1, size);
  // keep the realised area inside the requested band
  while (w * h < min_fraction * size * size && h < size) ++h;
  while (w * h < min_fraction * size * size && w < size) ++w;
  while (w * h > max_fraction * size * size && h > 1) --h;
  const Index x0 = uniform_int(rng, 0, static_cast<int>(size - w)), y0 = uniform_int(rng, 0, static_cast<int>(size - h));
  return {x0, y0, x0 + w, y0 + h};
}

Index mask_count(const Mask& mask) { return static_cast<Index>((mask.array() != 0).count()); }

Mask resize_mask(const Mask& mask, Index size) {
  const Index H = mask.dim(0), W = mask.dim(1);
  Eigen::ArrayXd out(size * size);
  for (Index oy = 0; oy < size; ++oy)
    for (Index ox = 0; ox < size; ++ox) {
      const Index iy = std::min<Index>(H - 1, static_cast<Index>((oy + 0.5) * H / size));
      const Index ix = std::min<Index>(W - 1, static_cast<Index>((ox + 0.5) * W / size));
      out[oy * size + ox] = mask[iy * W + ix];
    }
  return Mask({size, size}, out);
}

// ---------------------------------------------------------------------------

MaskPolicy parse_policy(const std::string& name) {
  if (name == "instance") return MaskPolicy::Instance;
  if (name == "hull") return MaskPolicy::ConvexHull;
  if (name == "box") return MaskPolicy::RandomBox;
  if (name == "neglect") return MaskPolicy::Neglect;
  throw std::invalid_argument("unknown masking policy '" + name + "' (instance, hull, box, neglect)");
}

std::string policy_name(MaskPolicy p) {
  switch (p) {
    case MaskPolicy::Instance: return "instance";
    case MaskPolicy::ConvexHull: return "hull";
    case MaskPolicy::RandomBox: return "box";
    case MaskPolicy::Neglect: return "neglect";
  }
  return "?";
}

namespace {

int absent_class(std::mt19937_64& rng, const Scene& scene) {
  std::vector<int> free;
  for (int c = 0; c < kShapeClasses; ++c) {
    bool seen = false;
    for (const auto& s : scene.shapes) seen |= s.label() == c;
    if (!seen) free.push_back(c);
  }
  return free[std::uniform_int_distribution<std::size_t>(0, free.size() - 1)(rng)];
}

}  // namespace

bool make_neglect_task(std::mt19937_64& rng, const Scene& scene, Index size, bool nearby, InpaintTask& task) {
  const int cls = absent_class(rng, scene);
  const double r = uniform(rng, 5.0, 7.0) / 32.0;
  double cx = 0, cy = 0;
  bool found = false;
  if (!nearby) {
    found = place_disc(rng, scene, r, 2.0 / 32, cx, cy);
  } else if (!scene.shapes.empty()) {
    const double margin = r * 1.2 + 1.0 / 32;
    for (int attempt = 0; attempt < 300 && !found; ++attempt) {
      const auto& nb = scene.shapes[std::uniform_int_distribution<std::size_t>(0, scene.shapes.size() - 1)(rng)];
      const double ang = uniform(rng, 0, 2 * kPi);
      const double dist = 1.2 * (r + nb.radius) + uniform(rng, 0.5, 2.0) / 32;
      cx = nb.cx + dist * std::cos(ang);
      cy = nb.cy + dist * std::sin(ang);
      if (cx < margin || cx > 1 - margin || cy < margin || cy > 1 - margin) continue;
      found = true;
      for (const auto& s : scene.shapes)
        if (std::hypot(cx - s.cx, cy - s.cy) < 1.2 * (r + s.radius) + 0.5 / 32) found = false;
    }
  }
  if (!found) return false;
  ShapeInstance obj = random_shape(rng, cls, r, cx, cy);
  task.scene = scene;
  task.reference_scene = scene;
  task.reference_scene.shapes.push_back(obj);
  task.image = render(scene, size);
  task.reference = render(task.reference_scene, size);
  task.region = dilate(bounding_box(instance_mask(obj, size)), std::max<Index>(1, size / 32), size);
  task.mask = box_mask(size, task.region);
  task.prompt = class_words(cls);
  task.target = cls;
  task.kind = nearby ? "nearby" : "background";
  return true;
}

std::vector<InpaintTask> make_inpaint_tasks(const std::vector<ShapesSample>& samples, MaskPolicy policy,
                                            std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<InpaintTask> tasks;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    const Index size = s.image.dim(1);
    if (policy == MaskPolicy::Instance || policy == MaskPolicy::ConvexHull) {
      for (std::size_t k = 0; k < s.masks.size(); ++k) {
        InpaintTask t;
        t.image = s.image;
        t.mask = policy == MaskPolicy::Instance ? s.masks[k] : convex_hull(s.masks[k]);
        if (mask_count(t.mask) == 0) continue;
        t.prompt = class_words(s.labels[k]);
        t.target = s.labels[k];
        t.kind = policy == MaskPolicy::Instance ? "instance" : "hull";
        t.scene = s.scene;
        t.reference_scene = s.scene;
        t.reference = s.image;
        t.region = bounding_box(t.mask);
        t.seed = rng();
        tasks.push_back(std::move(t));
      }
    } else if (policy == MaskPolicy::RandomBox) {
      InpaintTask t;
      t.image = s.image;
      t.region = random_box(rng, size);
      t.mask = box_mask(size, t.region);
      t.target = absent_class(rng, s.scene);
      t.prompt = class_words(t.target);
      t.kind = "box";
      t.scene = s.scene;
      t.reference_scene = s.scene;
      t.reference = s.image;
      t.seed = rng();
      tasks.push_back(std::move(t));
    } else {
      // alternate the two neglect flavours; fall back to the other one if the
      // scene has no room
      const bool nearby = i % 2 == 1;
      InpaintTask t;
      if (!make_neglect_task(rng, s.scene, size, nearby, t) && !make_neglect_task(rng, s.scene, size, !nearby, t))
        continue;
      t.seed = rng();
      tasks.push_back(std::move(t));
    }
  }
  return tasks;
}

Image downscale(const Image& image, Index factor) {
  const Index C = image.dim(0), H = image.dim(1), W = image.dim(2);
  if (factor < 1 || H % factor || W % factor)
    throw ShapeError("downscale: " + to_string(image.shape()) + " not divisible by " + std::to_string(factor));
  const Index h = H / factor, w = W / factor;
  Eigen::ArrayXd out = Eigen::ArrayXd::Zero(C * h * w);
  for (Index c = 0; c < C; ++c)
    for (Index y = 0; y < H; ++y)
      for (Index x = 0; x < W; ++x) out[(c * h + y / factor) * w + x / factor] += image[(c * H + y) * W + x];
  out /= static_cast<double>(factor * factor);
  return Image({C, h, w}, out);
}

Image apply_mask(const Image& image, const Mask& mask) {
  const Index C = image.dim(0), HW = image.dim(1) * image.dim(2);
  if (mask.size() != HW) throw ShapeError("apply_mask", image.shape(), mask.shape());
  Eigen::ArrayXd out = image.array();
  for (Index c = 0; c < C; ++c) out.segment(c * HW, HW) *= (1.0 - mask.array());
  return Image(image.shape(), out);
}

}  // namespace attnpaint
