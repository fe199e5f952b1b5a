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

#include "attnpaint/inpaint.hpp"

#include <Eigen/IterativeLinearSolvers>
#include <Eigen/SparseCore>

#include <sstream>

namespace attnpaint {

namespace {

void check_blend_inputs(const Image& source, const Image& target, const Mask& mask) {
  if (source.shape() != target.shape()) throw ShapeError("poisson_blend(source)", source.shape(), target.shape());
  if (target.rank() != 3) throw ShapeError("poisson_blend expects [C, H, W] images");
  if (mask.shape() != Shape{target.dim(1), target.dim(2)})
    throw ShapeError("poisson_blend(mask)", mask.shape(), Shape{target.dim(1), target.dim(2)});
}

// Calls f(q) for every in-image 4-neighbour q of pixel p.
template <typename F>
void for_neighbours(Index p, Index H, Index W, F f) {
  const Index y = p / W, x = p % W;
  if (y > 0) f(p - W);
  if (y + 1 < H) f(p + W);
  if (x > 0) f(p - 1);
  if (x + 1 < W) f(p + 1);
}

}  // namespace

double poisson_residual(const Image& result, const Image& source, const Mask& mask) {
  check_blend_inputs(source, result, mask);
  const Index C = result.dim(0), H = result.dim(1), W = result.dim(2), HW = H * W;
  double worst = 0;
  for (Index c = 0; c < C; ++c)
    for (Index p = 0; p < HW; ++p) {
      if (mask[p] == 0) continue;
      const double* f = result.data() + c * HW;
      const double* g = source.data() + c * HW;
      double r = 0;
      for_neighbours(p, H, W, [&](Index q) { r += (f[p] - f[q]) - (g[p] - g[q]); });
      worst = std::max(worst, std::abs(r));
    }
  return worst;
}

Image poisson_blend(const Image& source, const Image& target, const Mask& mask, PoissonReport* report,
                    double tolerance, int max_iterations) {
  check_blend_inputs(source, target, mask);
  const Index C = target.dim(0), H = target.dim(1), W = target.dim(2), HW = H * W;
  std::vector<Index> unknown(HW, -1), pixels;
  for (Index p = 0; p < HW; ++p)
    if (mask[p] != 0) {
      unknown[p] = static_cast<Index>(pixels.size());
      pixels.push_back(p);
    }
  if (pixels.empty()) {
    if (report) *report = {};
    return target;
  }
  if (static_cast<Index>(pixels.size()) == HW) throw PoissonError("poisson_blend: mask covers the whole image");

  // unknown u = result - target inside the mask; u = 0 elsewhere
  const Index n = static_cast<Index>(pixels.size());
  std::vector<Eigen::Triplet<double>> entries;
  for (Index i = 0; i < n; ++i) {
    double degree = 0;
    for_neighbours(pixels[i], H, W, [&](Index q) {
      degree += 1;
      if (unknown[q] >= 0) entries.emplace_back(i, unknown[q], -1.0);
    });
    entries.emplace_back(i, i, degree);
  }
  Eigen::SparseMatrix<double> A(n, n);
  A.setFromTriplets(entries.begin(), entries.end());
  Eigen::ConjugateGradient<Eigen::SparseMatrix<double>, Eigen::Lower | Eigen::Upper> cg;
  cg.setMaxIterations(max_iterations);
  cg.setTolerance(1e-15);
  cg.compute(A);

  PoissonReport rep;
  Eigen::ArrayXd blended = target.array();
  for (Index c = 0; c < C; ++c) {
    const double* g = source.data() + c * HW;
    const double* t = target.data() + c * HW;
    Eigen::VectorXd b(n);
    for (Index i = 0; i < n; ++i) {
      const Index p = pixels[i];
      double guide = 0, base = 0;
      for_neighbours(p, H, W, [&](Index q) {
        guide += g[p] - g[q];
        base += t[p] - t[q];
      });
      b[i] = guide - base;
    }
    Eigen::VectorXd u = Eigen::VectorXd::Zero(n);
    if (b.lpNorm<Eigen::Infinity>() > 0) {
      u = cg.solveWithGuess(b, u);
      rep.iterations = std::max(rep.iterations, static_cast<int>(cg.iterations()));
    }
    for (Index i = 0; i < n; ++i) blended[c * HW + pixels[i]] = t[pixels[i]] + u[i];
  }
  Image out(target.shape(), blended);
  rep.residual = poisson_residual(out, source, mask);
  if (report) *report = rep;
  if (!(rep.residual <= tolerance)) {
    std::ostringstream msg;
    msg << "poisson_blend: residual " << rep.residual << " above " << tolerance << " after " << rep.iterations
        << " iterations";
    throw PoissonError(msg.str());
  }
  return out;
}

GuidanceKind parse_guidance(const std::string& s) {
  if (s == "none") return GuidanceKind::None;
  if (s == "rasg") return GuidanceKind::Rasg;
  if (s == "vanilla") return GuidanceKind::Vanilla;
  throw std::invalid_argument("unknown guidance '" + s + "' (none, rasg, vanilla)");
}

std::string guidance_name(GuidanceKind g) {
  switch (g) {
    case GuidanceKind::None: return "none";
    case GuidanceKind::Rasg: return "rasg";
    case GuidanceKind::Vanilla: return "vanilla";
  }
  return "?";
}

void SamplerConfig::validate() const {
  if (steps < 1) throw std::invalid_argument("sampler: steps must be >= 1");
  if (!(eta >= 0 && eta <= 1)) throw std::invalid_argument("sampler: eta must lie in [0, 1]");
  if (!(painta_fraction >= 0 && painta_fraction <= 1))
    throw std::invalid_argument("sampler: rescaling step fraction must lie in [0, 1]");
  if (!(guidance_fraction >= 0 && guidance_fraction <= 1))
    throw std::invalid_argument("sampler: guided step fraction must lie in [0, 1]");
  if (!(vanilla_scale >= 0)) throw std::invalid_argument("sampler: guidance scale must be >= 0");
}

void validate_task(const InpaintTask& task) {
  if (task.image.rank() != 3) throw ShapeError("inpaint task image", task.image.shape(), Shape{3, -1, -1});
  const Shape hw{task.image.dim(1), task.image.dim(2)};
  if (task.mask.shape() != hw) throw ShapeError("inpaint task mask", task.mask.shape(), hw);
  const Index count = mask_count(task.mask);
  if (count == 0) throw std::invalid_argument("inpaint task: mask is empty");
  if (count == task.mask.size()) throw std::invalid_argument("inpaint task: mask covers the whole image");
  if (((task.mask.array() != 0) && (task.mask.array() != 1)).any())
    throw std::invalid_argument("inpaint task: mask must be binary");
}

Image composite(const Image& generated, const Image& original, const Mask& mask) {
  if (generated.shape() != original.shape()) throw ShapeError("composite", generated.shape(), original.shape());
  const Index C = original.dim(0), HW = original.dim(1) * original.dim(2);
  if (mask.size() != HW) throw ShapeError("composite(mask)", mask.shape(), Shape{original.dim(1), original.dim(2)});
  Eigen::ArrayXd v = original.array();
  for (Index c = 0; c < C; ++c)
    for (Index p = 0; p < HW; ++p)
      if (mask[p] != 0) v[c * HW + p] = generated[c * HW + p];
  return Image(original.shape(), v);
}

}  // namespace attnpaint
