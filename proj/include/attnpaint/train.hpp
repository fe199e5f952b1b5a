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

// Training of the stage-1 inpainting denoiser on generated shapes scenes.

#pragma once

#include "attnpaint/data.hpp"
#include "attnpaint/denoiser.hpp"
#include "attnpaint/schedule.hpp"

#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace attnpaint {

/// Proportions of the example kinds drawn during stage-1 training.
struct TrainingMix {
  double full = 0.15;       // whole image masked, caption of up to two shapes
  double object = 0.3;      // one shape hidden by its hull or box, prompt = its label
  double background = 0.35; // object-sized box over free space, no shape to draw
  double partial = 0.2;     // box over part of a shape, which must be completed
  // prompts for the background/partial kinds
  double absent_prompt = 0.7;    // a label of a class that is not drawn
  double caption_prompt = 0.15;  // caption of visible shapes; the rest are empty
  double drop_prompt = 0.1;      // any example: prompt replaced by the empty one
};

struct TrainingExample {
  Image image;              // [3, H, W]
  Mask mask;                // [H, W]
  std::vector<int> words;   // prompt word ids
  std::string kind;
};

TrainingExample make_training_example(std::mt19937_64& rng, const TrainingMix& mix, Index size);

/// Caption naming up to two of the scene's shapes, e.g. "red circle and blue square".
std::vector<int> scene_caption(std::mt19937_64& rng, const Scene& scene);

struct TrainConfig {
  long steps = 16000;
  Index batch = 16;
  Index image_size = 32;
  AdamConfig adam{1e-3, 0.9, 0.999, 1e-8, 0.0, 1.0};
  long warmup = 200;
  double final_lr_fraction = 0.1;  // cosine decay floor
  std::uint64_t seed = 1;
  int log_every = 100;
  int checkpoint_every = 1000;
  TrainingMix mix;
};

/// Learning-rate multiplier: linear warmup then cosine decay.
double lr_multiplier(long step, const TrainConfig& cfg);

struct TrainProgress {
  long step = 0;
  double loss = 0;  // mean over the last log window
  double grad_norm = 0;
  double seconds = 0;
};

using ProgressFn = std::function<void(const TrainProgress&, const ParameterSet<double>* checkpoint)>;

class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// One optimisation step's batch, already scaled to [-1, 1].
struct DenoiserBatch {
  Tensor<float> x0, noise, mask;
  std::vector<int> t;
  std::vector<PromptTokens> prompts;
};

DenoiserBatch make_denoiser_batch(std::mt19937_64& rng, const TrainConfig& cfg, const DenoiserConfig& model,
                                  const NoiseSchedule& sched);

/// Mean squared noise-prediction error of `params` on a batch, with the
/// gradient when `grads` is non-null.
double denoiser_loss(const DenoiserConfig& model, const ParameterSet<float>& params, const DenoiserBatch& batch,
                     const NoiseSchedule& sched, std::vector<Eigen::ArrayXf>* grads);

/// Trains from `init` (or a fresh initialisation) and returns the weights.
/// Deterministic given the seeds. Throws DivergenceError on a non-finite loss.
ParameterSet<double> train_denoiser(const DenoiserConfig& model, const TrainConfig& cfg, const NoiseSchedule& sched,
                                    const ProgressFn& progress = {},
                                    const std::optional<ParameterSet<double>>& init = std::nullopt);

/// Validation noise MSE over `batches` held-out batches drawn from `seed`.
double validation_loss(const DenoiserConfig& model, const ParameterSet<double>& params, const TrainConfig& cfg,
                       const NoiseSchedule& sched, std::uint64_t seed, int batches);

/// [-1, 1] image batch helpers.
Tensor<float> to_model_space(const std::vector<Image>& images);
Image from_model_space(const Tensor<double>& batch, Index index);

}  // namespace attnpaint
