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

// Synthetic shapes corpus: scenes of coloured circles, squares and triangles
// on a smooth textured background, rendered at any resolution, plus masks and
// inpainting tasks derived from them.
//
// Images are Tensor<double> [3, H, W] in [0, 1]; masks are [H, W] in {0, 1}
// with 1 marking pixels to inpaint.

#pragma once

#include "attnpaint/tensor.hpp"

#include <array>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace attnpaint {

using Image = Tensor<double>;
using Mask = Tensor<double>;

enum class ShapeKind { Circle = 0, Square = 1, Triangle = 2 };
enum class Colour { Red = 0, Green = 1, Blue = 2 };

inline constexpr int kShapeClasses = 9;
inline constexpr int kNoneClass = 9;  // classifier output for "no object"

int class_id(ShapeKind kind, Colour colour);
ShapeKind class_kind(int cls);
Colour class_colour(int cls);
std::string class_name(int cls);        // "red circle", or "none"
std::vector<int> class_words(int cls);  // token ids of the two words

struct ShapeInstance {
  ShapeKind kind = ShapeKind::Circle;
  Colour colour = Colour::Red;
  double cx = 0.5, cy = 0.5, radius = 0.2;  // unit-square coordinates
  std::array<double, 3> rgb{};
  int label() const { return class_id(kind, colour); }
  bool contains(double u, double v) const;
};

struct Background {
  struct Wave {
    double fx = 0, fy = 0, phase = 0, amplitude = 0;
    std::array<double, 3> tint{};
  };
  std::array<double, 3> base{0.5, 0.5, 0.5};
  std::vector<Wave> waves;
  std::array<double, 3> at(double u, double v) const;
};

struct Scene {
  Background background;
  std::vector<ShapeInstance> shapes;
};

struct SceneConfig {
  int min_shapes = 1, max_shapes = 3;
  double min_radius_px = 5.0, max_radius_px = 7.0;  // at 32 px
  double gap_px = 2.0;                              // minimum spacing between shape discs
};

/// Pixel-space box [x0, x1) x [y0, y1).
struct Box {
  Index x0 = 0, y0 = 0, x1 = 0, y1 = 0;
  Index width() const { return x1 - x0; }
  Index height() const { return y1 - y0; }
  Index area() const { return width() * height(); }
  bool empty() const { return x1 <= x0 || y1 <= y0; }
};

ShapeInstance random_shape(std::mt19937_64& rng, int cls, double radius, double cx, double cy);
Background random_background(std::mt19937_64& rng);
/// Places a disc of the given radius (unit coordinates) that keeps the gap to
/// every shape in `scene`. Returns false after too many attempts.
bool place_disc(std::mt19937_64& rng, const Scene& scene, double radius, double gap, double& cx, double& cy);
Scene random_scene(std::mt19937_64& rng, const SceneConfig& cfg = {});

/// Area-averaged rendering with `supersample`^2 samples per pixel.
Image render(const Scene& scene, Index size, int supersample = 4);
/// Pixels whose sample coverage by the shape is at least one half.
Mask instance_mask(const ShapeInstance& shape, Index size, int supersample = 4);

struct ShapesSample {
  Scene scene;
  Image image;
  std::vector<Mask> masks;
  std::vector<int> labels;
};

ShapesSample make_sample(const Scene& scene, Index size);
std::vector<ShapesSample> generate_dataset(int n, std::uint64_t seed, Index size = 32, const SceneConfig& cfg = {});

// ---------------------------------------------------------------------------
// Masks

Mask box_mask(Index size, const Box& box);
Box bounding_box(const Mask& mask);
Box dilate(const Box& box, Index by, Index size);
Mask dilate(const Mask& mask, int iterations = 1);
/// Pixels whose centres lie in the convex hull of the mask's pixel centres.
Mask convex_hull(const Mask& mask);
/// Box of 10-40% of the image area, uniformly placed.
Box random_box(std::mt19937_64& rng, Index size, double min_fraction = 0.1, double max_fraction = 0.4);
Index mask_count(const Mask& mask);
/// Nearest-neighbour resample of a mask (same rule as resize_nearest).
Mask resize_mask(const Mask& mask, Index size);

// ---------------------------------------------------------------------------
// Tasks

enum class MaskPolicy {
  Instance,    // instance mask, prompt = its label
  ConvexHull,  // hull of the instance mask, prompt = its label
  RandomBox,   // random box, prompt = a label absent from the scene
  Neglect,     // object-sized box on background or beside an object, absent label
};

MaskPolicy parse_policy(const std::string& name);
std::string policy_name(MaskPolicy p);

struct InpaintTask {
  Image image;               // [3, H, W]
  Mask mask;                 // [H, W]
  std::vector<int> prompt;   // word ids
  std::uint64_t seed = 0;
  int target = -1;           // class the masked region should show
  std::string kind;          // "instance", "hull", "box", "background", "nearby"
  Scene scene;               // scene shown by `image`
  Scene reference_scene;     // scene a perfect result would show
  Image reference;           // render(reference_scene)
  Box region;                // bounding box of the mask
};

std::vector<InpaintTask> make_inpaint_tasks(const std::vector<ShapesSample>& samples, MaskPolicy policy,
                                            std::uint64_t seed);

/// One neglect-provoking task on `scene`: an absent-class object is planned in
/// free space (kind "background") or right next to an existing shape (kind
/// "nearby"); the task masks its box. Returns false when no spot fits.
bool make_neglect_task(std::mt19937_64& rng, const Scene& scene, Index size, bool nearby, InpaintTask& task);

/// Area average over factor x factor blocks.
Image downscale(const Image& image, Index factor);
/// image * (1 - mask) broadcast over channels.
Image apply_mask(const Image& image, const Mask& mask);

}  // namespace attnpaint
