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

// Stage-1 inpainting: the reverse chain with rescaled self-attention and
// attention-score guidance, known-region blending and gradient-domain
// compositing.

#pragma once

#include "attnpaint/data.hpp"
#include "attnpaint/denoiser.hpp"
#include "attnpaint/objective.hpp"
#include "attnpaint/schedule.hpp"

#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

namespace attnpaint {

// ---------------------------------------------------------------------------
// Poisson blending

class PoissonError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct PoissonReport {
  int iterations = 0;
  double residual = 0;  // max-norm of the discrete Poisson residual
};

/// Solves, per channel, the 4-neighbour Poisson equation inside the mask with
/// the source's Laplacian as guidance and the target as Dirichlet boundary.
/// Pixels outside the mask are copied from the target. Neighbours beyond the
/// image edge are dropped (zero normal derivative there).
Image poisson_blend(const Image& source, const Image& target, const Mask& mask, PoissonReport* report = nullptr,
                    double tolerance = 1e-8, int max_iterations = 10000);

/// Max-norm residual of `result` against the blending equations.
double poisson_residual(const Image& result, const Image& source, const Mask& mask);

// ---------------------------------------------------------------------------
// Sampling

enum class GuidanceKind { None, Rasg, Vanilla };

GuidanceKind parse_guidance(const std::string& s);
std::string guidance_name(GuidanceKind g);

struct SamplerConfig {
  int steps = 50;
  double eta = 0.1;
  double beta_start = 0.0, beta_end = 0.0;  // both 0: linear 1e-4..0.02 rescaled to `steps`
  GuidanceKind guidance = GuidanceKind::Rasg;
  double guidance_fraction = 1.0;  // leading share of steps that are guided
  ObjectiveKind objective = ObjectiveKind::Bce;
  // vanilla guidance: the raw scale, or with `vanilla_relative` the ratio of
  // the guidance term's norm to the noise prediction's norm
  double vanilla_scale = 10.0;
  bool vanilla_relative = true;
  bool painta = true;
  double painta_fraction = 0.5;  // leading share of steps that rescale
  std::vector<int> painta_levels{2, 3};
  AlignmentMax painta_max = AlignmentMax::Raw;
  bool blend_known = true;        // replace the known part of each clean estimate
  bool record_attention = false;  // keep every step's attention records
  bool poisson = false;           // gradient-domain composite at the end
  // called with (t, task index, raw guidance gradient) on guided steps
  std::function<void(int, Index, const Eigen::ArrayXd&)> on_gradient;

  void validate() const;
  NoiseSchedule schedule() const {
    const bool custom = beta_start != 0.0 || beta_end != 0.0;
    return NoiseSchedule(steps, custom ? BetaSpec::linear(beta_start, beta_end) : BetaSpec::rescaled_default(steps), eta);
  }
  bool painta_active(int t) const { return painta && (steps - t) < painta_fraction * steps; }
  GuidanceKind guidance_at(int t) const {
    return (steps - t) < guidance_fraction * steps ? guidance : GuidanceKind::None;
  }
};

struct InpaintDiagnostics {
  std::vector<int> t;                 // step of each entry, T first
  std::vector<double> objective;      // S(x_t) before the update (guided runs)
  std::vector<double> latent_std;     // population std of x_{t-1} after the update
  std::vector<double> gradient_std;   // std of the raw guidance gradient
  Diagnostics messages;
  std::vector<std::vector<AttentionRecord<double>>> records;  // per step when recorded
};

struct InpaintResult {
  Image image;      // composited output, equal to the input outside the mask
  Image generated;  // decoded final sample before compositing
  InpaintDiagnostics diagnostics;
};

class NonFiniteLatent : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Checks image/mask agreement, mask nonempty and not full.
void validate_task(const InpaintTask& task);

/// Known pixels from `original`, the rest from `generated`, bit for bit.
Image composite(const Image& generated, const Image& original, const Mask& mask);

/// Runs every task in one batch; all tasks must share a size. Each task's
/// noise comes from its own seed, so configurations sharing a task see the
/// same initial latent and step noise.
template <typename S>
std::vector<InpaintResult> run_inpaint(const std::vector<InpaintTask>& tasks, const Denoiser<S>& model,
                                       const NoiseSchedule& sched, const SamplerConfig& cfg);

template <typename S>
InpaintResult run_inpaint(const InpaintTask& task, const Denoiser<S>& model, const NoiseSchedule& sched,
                          const SamplerConfig& cfg) {
  return std::move(run_inpaint(std::vector<InpaintTask>{task}, model, sched, cfg).front());
}

// ---------------------------------------------------------------------------

namespace detail {

template <typename S>
Tensor<S> stack_images(const std::vector<Image>& images, bool model_space) {
  const Index N = static_cast<Index>(images.size());
  const Shape s = images.front().shape();
  typename Tensor<S>::Array v(N * numel(s));
  for (Index n = 0; n < N; ++n) {
    if (images[n].shape() != s) throw ShapeError("stack_images", images[n].shape(), s);
    const Eigen::ArrayXd a = model_space ? (images[n].array() * 2.0 - 1.0).eval() : images[n].array();
    v.segment(n * numel(s), numel(s)) = a.cast<S>();
  }
  Shape out{N};
  out.insert(out.end(), s.begin(), s.end());
  return Tensor<S>(out, v);
}

template <typename S>
typename Tensor<S>::Array normal_array(std::mt19937_64& rng, Index n) {
  std::normal_distribution<double> nd(0.0, 1.0);
  typename Tensor<S>::Array v(n);
  for (auto& x : v) x = S(nd(rng));
  return v;
}

inline double norm2(const Eigen::ArrayXd& v) { return std::sqrt(v.square().sum()); }

}  // namespace detail

template <typename S>
std::vector<InpaintResult> run_inpaint(const std::vector<InpaintTask>& tasks, const Denoiser<S>& model,
                                       const NoiseSchedule& sched, const SamplerConfig& cfg) {
  using Array = typename Tensor<S>::Array;
  cfg.validate();
  if (tasks.empty()) throw std::invalid_argument("run_inpaint: no tasks");
  if (sched.steps() != cfg.steps)
    throw std::invalid_argument("run_inpaint: schedule has " + std::to_string(sched.steps()) + " steps, config " +
                                std::to_string(cfg.steps));
  if (sched.steps() != model.config().total_steps)
    throw std::invalid_argument("run_inpaint: model was trained on a " + std::to_string(model.config().total_steps) +
                                "-step grid");
  const Index N = static_cast<Index>(tasks.size());
  std::vector<Image> images, masks;
  std::vector<Mask> full_masks;
  std::vector<PromptTokens> prompts;
  for (const auto& task : tasks) {
    validate_task(task);
    images.push_back(task.image);
    masks.push_back(task.mask.with_shape({1, task.mask.dim(0), task.mask.dim(1)}));
    full_masks.push_back(task.mask);
    prompts.push_back(make_prompt(task.prompt, model.config().prompt_length));
  }
  const Tensor<S> known = detail::stack_images<S>(images, true);  // [N, C, H, W] in [-1, 1]
  const Tensor<S> mask = detail::stack_images<S>(masks, false);   // [N, 1, H, W]
  const Index C = known.dim(1), HW = known.dim(2) * known.dim(3), per = C * HW;

  Array hole(N * per);  // mask broadcast over channels
  for (Index n = 0; n < N; ++n)
    for (Index c = 0; c < C; ++c) hole.segment((n * C + c) * HW, HW) = mask.array().segment(n * HW, HW);

  DenoiserInputs<S> in;
  in.masked_image = Tensor<S>(known.shape(), known.array() * (S(1) - hole));
  in.mask = mask;
  in.prompt = model.encode_prompts(prompts);
  for (const auto& p : prompts) in.indices.push_back(p.indices);

  std::vector<std::mt19937_64> rngs;
  Array x(N * per);
  for (Index n = 0; n < N; ++n) {
    rngs.emplace_back(tasks[n].seed);
    x.segment(n * per, per) = detail::normal_array<S>(rngs.back(), per);
  }

  std::vector<InpaintResult> results(N);
  for (int t = sched.steps(); t >= 1; --t) {
    const GuidanceKind kind = cfg.guidance_at(t);
    const bool guided = kind != GuidanceKind::None;
    in.x_t = Tensor<S>(known.shape(), x);
    in.t.assign(N, t);
    PaintaSettings painta;
    painta.enabled = cfg.painta_active(t);
    painta.levels = cfg.painta_levels;
    painta.max_mode = cfg.painta_max;

    Tensor<S> eps;
    std::optional<Tensor<S>> grad;
    std::vector<AttentionRecord<S>> records;
    if (guided) {
      ObjectiveResult<S> obj = objective_gradient(model, in, painta, cfg.objective, full_masks);
      eps = obj.eps;
      grad = obj.grad;
      records = std::move(obj.records);
      for (Index n = 0; n < N; ++n) results[n].diagnostics.objective.push_back(obj.per_sample[n]);
    } else {
      DenoiserOutput<S> out = model.predict_noise(in, painta, cfg.record_attention);
      eps = out.eps;
      records = std::move(out.records);
    }
    if (!eps.array().allFinite()) throw NonFiniteLatent("noise prediction is not finite at t=" + std::to_string(t));

    Tensor<S> x0 = predict_x0(in.x_t, eps, t, sched);
    if (cfg.blend_known) x0 = Tensor<S>(x0.shape(), hole * x0.array() + (S(1) - hole) * known.array());

    const double a = sched.alpha_bar(t);
    Array next(N * per);
    for (Index n = 0; n < N; ++n) {
      auto& diag = results[n].diagnostics;
      const Shape one{1, C, known.dim(2), known.dim(3)};
      const Tensor<S> x0_n(one, x0.array().segment(n * per, per));
      Tensor<S> eps_n(one, eps.array().segment(n * per, per));
      std::optional<Tensor<S>> grad_n;
      if (grad) {
        grad_n = Tensor<S>(one, grad->array().segment(n * per, per));
        diag.gradient_std.push_back(population_std(*grad_n));
        if (cfg.on_gradient) cfg.on_gradient(t, n, grad_n->array().template cast<double>());
      }
      Tensor<S> step;
      switch (kind) {
        case GuidanceKind::None: {
          const Tensor<S> z(one, detail::normal_array<S>(rngs[n], per));
          step = ddim_from_x0(x0_n, eps_n, t, sched.sigma(t), &z, sched);
          break;
        }
        case GuidanceKind::Rasg: {
          auto term = rasg_term(*grad_n);
          if (!term) {
            diag.messages.push_back("t=" + std::to_string(t) + ": flat guidance gradient, step taken unguided");
            term = Tensor<S>::zeros(one);
          }
          step = ddim_from_x0(x0_n, eps_n, t, sched.sigma(t), &*term, sched);
          break;
        }
        case GuidanceKind::Vanilla: {
          double strength = cfg.vanilla_scale;
          if (cfg.vanilla_relative) {
            const double g = detail::norm2(grad_n->array().template cast<double>());
            strength = g > 0 ? cfg.vanilla_scale * detail::norm2(eps_n.array().template cast<double>()) /
                                   (std::sqrt(1.0 - a) * g)
                             : 0.0;
          }
          const Tensor<S> shifted(one, eps_n.array() + S(std::sqrt(1.0 - a) * strength) * grad_n->array());
          const Tensor<S> x_n(one, in.x_t.array().segment(n * per, per));
          Tensor<S> x0_shift = predict_x0(x_n, shifted, t, sched);
          if (cfg.blend_known)
            x0_shift = Tensor<S>(one, hole.segment(n * per, per) * x0_shift.array() +
                                          (S(1) - hole.segment(n * per, per)) * known.array().segment(n * per, per));
          step = ddim_from_x0<S>(x0_shift, shifted, t, 0.0, nullptr, sched);
          break;
        }
      }
      next.segment(n * per, per) = step.array();
      diag.t.push_back(t);
      diag.latent_std.push_back(population_std(step));
    }
    if (!next.allFinite()) throw NonFiniteLatent("latent is not finite after step t=" + std::to_string(t));
    x = next;
    if (cfg.record_attention) {
      for (Index n = 0; n < N; ++n) {
        std::vector<AttentionRecord<double>> mine;
        for (const auto& r : records) {
          AttentionRecord<double> c;
          c.layer = r.layer;
          c.height = r.height;
          c.width = r.width;
          c.step = t;
          c.self_scores = slice(r.self_scores.detach(), 0, n, 1).template cast<double>();
          c.self_scores_used = slice(r.self_scores_used.detach(), 0, n, 1).template cast<double>();
          c.cross_probs = slice(r.cross_probs.detach(), 0, n, 1).template cast<double>();
          if (r.alignment) c.alignment = slice(r.alignment->detach(), 0, n, 1).template cast<double>();
          mine.push_back(std::move(c));
        }
        results[n].diagnostics.records.push_back(std::move(mine));
      }
    }
  }

  for (Index n = 0; n < N; ++n) {
    Eigen::ArrayXd v = ((x.segment(n * per, per).template cast<double>() + 1.0) * 0.5).cwiseMax(0.0).cwiseMin(1.0);
    results[n].generated = Image(tasks[n].image.shape(), v);
    results[n].image = composite(results[n].generated, tasks[n].image, tasks[n].mask);
    if (cfg.poisson) {
      PoissonReport rep;
      results[n].image = poisson_blend(results[n].generated, tasks[n].image, tasks[n].mask, &rep);
      results[n].diagnostics.messages.push_back("poisson: " + std::to_string(rep.iterations) +
                                                " iterations, residual " + std::to_string(rep.residual));
    }
  }
  return results;
}

}  // namespace attnpaint
