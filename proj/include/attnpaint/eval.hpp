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

// Prompt-alignment evaluation: a small crop classifier over the nine shape
// classes plus "none", and the accuracy harness built on it.

#pragma once

#include "attnpaint/data.hpp"
#include "attnpaint/params.hpp"

#include <functional>
#include <map>
#include <random>
#include <string>
#include <vector>

namespace attnpaint {

inline constexpr int kClassifierClasses = kShapeClasses + 1;

/// Square crop around `region` grown by `margin` pixels (clamped to the
/// image), resampled to out x out with 4x4 bilinear supersampling.
Image region_crop(const Image& image, const Box& region, Index margin, Index out);

struct ClassifierConfig {
  Index crop = 16;
  Index margin = 2;
  std::vector<Index> channels{16, 32, 32};  // first at full crop size, then stride 2 each

  void store(ParameterSet<double>& p) const;
  static ClassifierConfig load(const ParameterSet<double>& p);
};

ParameterSet<double> init_classifier(const ClassifierConfig& cfg, std::uint64_t seed);

/// Logits [N, classes] for crops [N, 3, crop, crop] in [0, 1].
template <typename S>
Tensor<S> classifier_logits(const ParameterSet<S>& p, const ClassifierConfig& cfg, const Tensor<S>& crops);

struct LabelledCrop {
  Image crop;
  int label = kNoneClass;
};

/// Crops drawn like evaluation regions: planned objects present (their class)
/// or absent (none), plus regular instance boxes.
std::vector<LabelledCrop> make_classifier_examples(std::mt19937_64& rng, int n, const ClassifierConfig& cfg,
                                                   Index size = 32);

struct ClassifierTrainConfig {
  long steps = 3000;
  Index batch = 64;
  int train_examples = 20000;
  int held_out = 2000;
  AdamConfig adam{2e-3, 0.9, 0.999, 1e-8, 0.0, 0.0};
  double noise = 0.03;  // std of Gaussian pixel noise added to training crops
  std::uint64_t seed = 3;
  double gate = 0.98;
  int log_every = 100;
};

class ClassifierGateError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Trained classifier with the held-out accuracy it reached.
class Classifier {
 public:
  Classifier(ClassifierConfig cfg, ParameterSet<double> params, double held_out_accuracy);
  /// From a checkpoint holding the weights and "meta.cls.*" entries.
  static Classifier from_params(const ParameterSet<double>& p);
  ParameterSet<double> to_params() const;

  const ClassifierConfig& config() const { return cfg_; }
  double held_out_accuracy() const { return accuracy_; }

  std::vector<int> predict(const std::vector<Image>& crops) const;
  int predict_region(const Image& image, const Box& region) const;

 private:
  ClassifierConfig cfg_;
  ParameterSet<double> params_;
  double accuracy_ = 0;
};

double classifier_accuracy(const Classifier& c, const std::vector<LabelledCrop>& examples);

using ClassifierProgressFn = std::function<void(long step, double loss, double seconds)>;

/// Trains on fresh crops and measures accuracy on a disjoint held-out draw.
Classifier train_classifier(const ClassifierConfig& cfg, const ClassifierTrainConfig& tc,
                            const ClassifierProgressFn& progress = {});

struct AccuracyReport {
  int correct = 0, total = 0;
  double accuracy() const { return total ? 100.0 * correct / total : 0.0; }
  std::vector<int> predicted;
  std::map<std::string, std::pair<int, int>> by_kind;  // kind -> (correct, total)
};

/// Share of results whose masked-region crop is classified as the task's
/// target class. Refuses to report when the classifier is below `gate`.
AccuracyReport evaluate_accuracy(const std::vector<Image>& results, const std::vector<InpaintTask>& tasks,
                                 const Classifier& classifier, double gate = 0.98);

/// Held-out neglect-provoking tasks: alternating background and nearby
/// flavours on fresh scenes, each with its own sampling seed.
std::vector<InpaintTask> make_neglect_tasks(int n, std::uint64_t seed, Index size = 32);

// ---------------------------------------------------------------------------
// Dataset files

struct IndexEntry {
  std::string image, mask;
  std::vector<int> words;
};

/// Writes images, instance masks and a tab-separated index to `dir`.
std::vector<IndexEntry> write_dataset(const std::string& dir, const std::vector<ShapesSample>& samples);
std::vector<IndexEntry> read_index(const std::string& path);

}  // namespace attnpaint
