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

#include "attnpaint/eval.hpp"

#include "attnpaint/denoiser.hpp"
#include "attnpaint/io.hpp"

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <sstream>

namespace attnpaint {

namespace fs = std::filesystem;

Image region_crop(const Image& image, const Box& region, Index margin, Index out) {
  if (image.rank() != 3) throw ShapeError("region_crop", image.shape(), Shape{3, -1, -1});
  if (region.empty()) throw std::invalid_argument("region_crop: empty region");
  const Index C = image.dim(0), H = image.dim(1), W = image.dim(2);
  // square window centred on the region
  const double cx = 0.5 * (region.x0 + region.x1), cy = 0.5 * (region.y0 + region.y1);
  double side = std::max(region.width(), region.height()) + 2.0 * margin;
  side = std::min<double>(side, std::min(H, W));
  double x0 = std::clamp(cx - side / 2, 0.0, W - side), y0 = std::clamp(cy - side / 2, 0.0, H - side);
  auto sample = [&](Index c, double y, double x) {
    // bilinear at continuous pixel coordinates (pixel centres at +0.5)
    const double fy = std::clamp(y - 0.5, 0.0, H - 1.0), fx = std::clamp(x - 0.5, 0.0, W - 1.0);
    const Index iy = std::min<Index>(static_cast<Index>(fy), H - 2 < 0 ? 0 : H - 2);
    const Index ix = std::min<Index>(static_cast<Index>(fx), W - 2 < 0 ? 0 : W - 2);
    const double ty = fy - iy, tx = fx - ix;
    auto at = [&](Index yy, Index xx) { return image[(c * H + std::min(yy, H - 1)) * W + std::min(xx, W - 1)]; };
    return (1 - ty) * ((1 - tx) * at(iy, ix) + tx * at(iy, ix + 1)) + ty * ((1 - tx) * at(iy + 1, ix) + tx * at(iy + 1, ix + 1));
  };
  const int ss = 4;
  const double step = side / out;
  Eigen::ArrayXd v(C * out * out);
  for (Index c = 0; c < C; ++c)
    for (Index y = 0; y < out; ++y)
      for (Index x = 0; x < out; ++x) {
        double acc = 0;
        for (int sy = 0; sy < ss; ++sy)
          for (int sx = 0; sx < ss; ++sx)
            acc += sample(c, y0 + (y + (sy + 0.5) / ss) * step, x0 + (x + (sx + 0.5) / ss) * step);
        v[(c * out + y) * out + x] = acc / (ss * ss);
      }
  return Image({C, out, out}, v);
}

void ClassifierConfig::store(ParameterSet<double>& p) const {
  Eigen::ArrayXd ch(static_cast<Index>(channels.size()));
  for (std::size_t i = 0; i < channels.size(); ++i) ch[static_cast<Index>(i)] = double(channels[i]);
  p.set("meta.cls.channels", Tensor<double>(Shape{ch.size()}, ch));
  p.set("meta.cls.dims", Tensor<double>::of({2}, {double(crop), double(margin)}));
}

ClassifierConfig ClassifierConfig::load(const ParameterSet<double>& p) {
  if (p.empty()) throw std::invalid_argument("classifier checkpoint holds no tensors");
  if (!p.contains("meta.cls.dims")) throw std::invalid_argument("checkpoint is not a classifier (no meta.cls.dims)");
  ClassifierConfig c;
  c.channels.clear();
  const Tensor<double>& ch = p["meta.cls.channels"];
  for (Index i = 0; i < ch.size(); ++i) c.channels.push_back(static_cast<Index>(ch[i]));
  c.crop = static_cast<Index>(p["meta.cls.dims"][0]);
  c.margin = static_cast<Index>(p["meta.cls.dims"][1]);
  return c;
}

ParameterSet<double> init_classifier(const ClassifierConfig& cfg, std::uint64_t seed) {
  using namespace layers;
  if (cfg.channels.empty()) throw std::invalid_argument("classifier needs at least one layer");
  Initializer init(seed);
  ParameterSet<double> p;
  cfg.store(p);
  Index in = 3, side = cfg.crop;
  for (std::size_t i = 0; i < cfg.channels.size(); ++i) {
    add_conv(p, init, "cls.conv" + std::to_string(i), in, cfg.channels[i], 3);
    in = cfg.channels[i];
    if (i > 0) side /= 2;
  }
  add_linear(p, init, "cls.head", in * side * side, kClassifierClasses);
  return p;
}

template <typename S>
Tensor<S> classifier_logits(const ParameterSet<S>& p, const ClassifierConfig& cfg, const Tensor<S>& crops) {
  using namespace layers;
  if (crops.rank() != 4 || crops.dim(1) != 3 || crops.dim(2) != cfg.crop || crops.dim(3) != cfg.crop)
    throw ShapeError("classifier input", crops.shape(), Shape{-1, 3, cfg.crop, cfg.crop});
  Tensor<S> h = crops * S(2) - S(1);
  for (std::size_t i = 0; i < cfg.channels.size(); ++i)
    h = silu(conv(p, "cls.conv" + std::to_string(i), h, i == 0 ? 1 : 2));
  h = reshape(h, {h.dim(0), h.dim(1) * h.dim(2) * h.dim(3)});
  return linear(p, "cls.head", h);
}

template Tensor<double> classifier_logits(const ParameterSet<double>&, const ClassifierConfig&, const Tensor<double>&);
template Tensor<float> classifier_logits(const ParameterSet<float>&, const ClassifierConfig&, const Tensor<float>&);

std::vector<LabelledCrop> make_classifier_examples(std::mt19937_64& rng, int n, const ClassifierConfig& cfg,
                                                   Index size) {
  std::vector<LabelledCrop> out;
  std::uniform_real_distribution<double> u(0, 1);
  std::uniform_int_distribution<Index> jitter(-1, 1);
  auto jittered = [&](Box b) {
    b.x0 = std::clamp<Index>(b.x0 + jitter(rng), 0, size - 1);
    b.y0 = std::clamp<Index>(b.y0 + jitter(rng), 0, size - 1);
    b.x1 = std::clamp<Index>(b.x1 + jitter(rng), b.x0 + 1, size);
    b.y1 = std::clamp<Index>(b.y1 + jitter(rng), b.y0 + 1, size);
    return b;
  };
  while (static_cast<int>(out.size()) < n) {
    const Scene scene = random_scene(rng);
    const double r = u(rng);
    if (r < 0.8) {
      // a planned object present (its class) or absent (none) in the same box
      InpaintTask task;
      const bool nearby = u(rng) < 0.5;
      if (!make_neglect_task(rng, scene, size, nearby, task)) continue;
      const bool present = u(rng) < 0.5;
      const Box b = jittered(task.region);
      out.push_back({region_crop(present ? task.reference : task.image, b, cfg.margin, cfg.crop),
                     present ? task.target : kNoneClass});
    } else {
      const ShapesSample s = make_sample(scene, size);
      const std::size_t k = std::uniform_int_distribution<std::size_t>(0, s.masks.size() - 1)(rng);
      if (mask_count(s.masks[k]) == 0) continue;
      const Box b = jittered(dilate(bounding_box(s.masks[k]), 1, size));
      out.push_back({region_crop(s.image, b, cfg.margin, cfg.crop), s.labels[k]});
    }
  }
  return out;
}

Classifier::Classifier(ClassifierConfig cfg, ParameterSet<double> params, double held_out_accuracy)
    : cfg_(std::move(cfg)), params_(std::move(params)), accuracy_(held_out_accuracy) {
  if (!params_.contains("cls.head.w")) throw std::invalid_argument("classifier: weights missing cls.head");
}

Classifier Classifier::from_params(const ParameterSet<double>& p) {
  const ClassifierConfig cfg = ClassifierConfig::load(p);
  if (!p.contains("meta.cls.accuracy")) throw std::invalid_argument("classifier checkpoint has no held-out accuracy");
  return Classifier(cfg, p, p["meta.cls.accuracy"].item());
}

ParameterSet<double> Classifier::to_params() const {
  ParameterSet<double> p = params_;
  cfg_.store(p);
  p.set("meta.cls.accuracy", Tensor<double>::scalar(accuracy_));
  return p;
}

std::vector<int> Classifier::predict(const std::vector<Image>& crops) const {
  std::vector<int> out;
  const Index per = 3 * cfg_.crop * cfg_.crop, chunk = 256;
  for (std::size_t start = 0; start < crops.size(); start += chunk) {
    const Index N = static_cast<Index>(std::min<std::size_t>(chunk, crops.size() - start));
    Eigen::ArrayXd v(N * per);
    for (Index n = 0; n < N; ++n) {
      const Image& c = crops[start + n];
      if (c.shape() != Shape{3, cfg_.crop, cfg_.crop}) throw ShapeError("classifier crop", c.shape(), Shape{3, cfg_.crop, cfg_.crop});
      v.segment(n * per, per) = c.array();
    }
    const Tensor<double> logits = classifier_logits(params_, cfg_, Tensor<double>({N, 3, cfg_.crop, cfg_.crop}, v));
    for (Index n = 0; n < N; ++n) {
      Index best = 0;
      logits.array().segment(n * kClassifierClasses, kClassifierClasses).maxCoeff(&best);
      out.push_back(static_cast<int>(best));
    }
  }
  return out;
}

int Classifier::predict_region(const Image& image, const Box& region) const {
  return predict({region_crop(image, region, cfg_.margin, cfg_.crop)}).front();
}

double classifier_accuracy(const Classifier& c, const std::vector<LabelledCrop>& examples) {
  if (examples.empty()) return 0;
  std::vector<Image> crops;
  for (const auto& e : examples) crops.push_back(e.crop);
  const std::vector<int> pred = c.predict(crops);
  int ok = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) ok += pred[i] == examples[i].label;
  return double(ok) / examples.size();
}

Classifier train_classifier(const ClassifierConfig& cfg, const ClassifierTrainConfig& tc,
                            const ClassifierProgressFn& progress) {
  std::mt19937_64 rng(tc.seed);
  const std::vector<LabelledCrop> train = make_classifier_examples(rng, tc.train_examples, cfg);
  const std::vector<LabelledCrop> held = make_classifier_examples(rng, tc.held_out, cfg);
  ParameterSet<double> master = init_classifier(cfg, tc.seed);
  ParameterSet<float> trainable, meta;
  for (std::size_t i = 0; i < master.size(); ++i) {
    const auto& name = master.names()[i];
    (name.rfind("meta.", 0) == 0 ? meta : trainable).add(name, master.values()[i].cast<float>());
  }
  Adam<float> opt(tc.adam);
  std::normal_distribution<float> noise(0.f, float(tc.noise));
  std::uniform_int_distribution<std::size_t> pick(0, train.size() - 1);
  std::bernoulli_distribution flip(0.5);
  const Index per = 3 * cfg.crop * cfg.crop, K = kClassifierClasses;
  const auto start = std::chrono::steady_clock::now();
  double window = 0;
  int window_n = 0;
  for (long step = 0; step < tc.steps; ++step) {
    Eigen::ArrayXf x(tc.batch * per), onehot = Eigen::ArrayXf::Zero(tc.batch * K);
    for (Index n = 0; n < tc.batch; ++n) {
      const LabelledCrop& e = train[pick(rng)];
      const bool mirror = flip(rng);
      for (Index c = 0; c < 3; ++c)
        for (Index y = 0; y < cfg.crop; ++y)
          for (Index xx = 0; xx < cfg.crop; ++xx) {
            const Index src = (c * cfg.crop + y) * cfg.crop + (mirror ? cfg.crop - 1 - xx : xx);
            x[n * per + (c * cfg.crop + y) * cfg.crop + xx] = std::clamp(float(e.crop[src]) + noise(rng), 0.f, 1.f);
          }
      onehot[n * K + e.label] = 1;
    }
    Tape<float> tape;
    const ParameterSet<float> leaves = trainable.on_tape(tape);
    const Tensor<float> logits = classifier_logits(leaves, cfg, Tensor<float>({tc.batch, 3, cfg.crop, cfg.crop}, x));
    const Tensor<float> z = logits - max(logits, 1, true).detach();
    const Tensor<float> logp = z - log(sum(exp(z), 1, true));
    const Tensor<float> loss = -sum(logp * Tensor<float>({tc.batch, K}, onehot)) * (1.f / tc.batch);
    const Gradients<float> g = tape.backward(loss);
    std::vector<Eigen::ArrayXf> grads;
    for (const auto& v : leaves.values()) grads.push_back(g.of(v).array());
    opt.step(trainable, grads);
    window += loss.item();
    ++window_n;
    if (progress && tc.log_every > 0 && (step + 1) % tc.log_every == 0) {
      progress(step + 1, window / window_n,
               std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count());
      window = 0;
      window_n = 0;
    }
  }
  ParameterSet<double> out;
  for (std::size_t i = 0; i < meta.size(); ++i) out.add(meta.names()[i], meta.values()[i].cast<double>());
  for (std::size_t i = 0; i < trainable.size(); ++i) out.add(trainable.names()[i], trainable.values()[i].cast<double>());
  Classifier c(cfg, out, 0.0);
  return Classifier(cfg, out, classifier_accuracy(c, held));
}

AccuracyReport evaluate_accuracy(const std::vector<Image>& results, const std::vector<InpaintTask>& tasks,
                                 const Classifier& classifier, double gate) {
  if (results.size() != tasks.size()) throw std::invalid_argument("evaluate_accuracy: one result per task");
  if (classifier.held_out_accuracy() < gate) {
    std::ostringstream msg;
    msg << "classifier held-out accuracy " << classifier.held_out_accuracy() << " is below the " << gate
        << " gate; refusing to report accuracy";
    throw ClassifierGateError(msg.str());
  }
  std::vector<Image> crops;
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    if (tasks[i].target < 0 || tasks[i].target >= kShapeClasses)
      throw std::invalid_argument("evaluate_accuracy: task " + std::to_string(i) + " has no target class");
    crops.push_back(region_crop(results[i], tasks[i].region, classifier.config().margin, classifier.config().crop));
  }
  AccuracyReport rep;
  rep.predicted = classifier.predict(crops);
  rep.total = static_cast<int>(tasks.size());
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    const bool ok = rep.predicted[i] == tasks[i].target;
    rep.correct += ok;
    auto& k = rep.by_kind[tasks[i].kind];
    k.first += ok;
    k.second += 1;
  }
  return rep;
}

std::vector<InpaintTask> make_neglect_tasks(int n, std::uint64_t seed, Index size) {
  std::mt19937_64 rng(seed);
  std::vector<InpaintTask> tasks;
  while (static_cast<int>(tasks.size()) < n) {
    const Scene scene = random_scene(rng);
    InpaintTask t;
    const bool nearby = tasks.size() % 2 == 1;
    if (!make_neglect_task(rng, scene, size, nearby, t)) continue;
    t.seed = rng();
    tasks.push_back(std::move(t));
  }
  return tasks;
}

std::vector<IndexEntry> write_dataset(const std::string& dir, const std::vector<ShapesSample>& samples) {
  fs::create_directories(fs::path(dir) / "images");
  fs::create_directories(fs::path(dir) / "masks");
  std::vector<IndexEntry> entries;
  std::ostringstream index;
  index << "# image\tmask\tcaption\n";
  for (std::size_t i = 0; i < samples.size(); ++i) {
    char stem[32];
    std::snprintf(stem, sizeof stem, "%06zu", i);
    const std::string image = std::string("images/") + stem + ".ppm";
    write_ppm((fs::path(dir) / image).string(), samples[i].image);
    for (std::size_t k = 0; k < samples[i].masks.size(); ++k) {
      const std::string mask = std::string("masks/") + stem + "_" + std::to_string(k) + ".pgm";
      write_pgm((fs::path(dir) / mask).string(), samples[i].masks[k]);
      IndexEntry e{image, mask, class_words(samples[i].labels[k])};
      index << e.image << '\t' << e.mask << '\t' << vocab::detokenize(e.words) << '\n';
      entries.push_back(std::move(e));
    }
  }
  write_file_atomic((fs::path(dir) / "index.tsv").string(), index.str());
  return entries;
}

std::vector<IndexEntry> read_index(const std::string& path) {
  std::istringstream in(read_file(path));
  std::vector<IndexEntry> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream fields(line);
    IndexEntry e;
    std::string caption;
    if (!std::getline(fields, e.image, '\t') || !std::getline(fields, e.mask, '\t') || !std::getline(fields, caption))
      throw std::runtime_error(path + ":" + std::to_string(lineno) + ": expected image, mask and caption fields");
    e.words = vocab::tokenize(caption);
    out.push_back(std::move(e));
  }
  return out;
}

}  // namespace attnpaint
