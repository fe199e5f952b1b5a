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

#include "attnpaint/ablation.hpp"
#include "attnpaint/run_config.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <sstream>

namespace fs = std::filesystem;
using namespace attnpaint;

namespace {

// Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
constexpr int kRuntimeError = 1;
constexpr int kUsageError = 2;

struct Common {
  std::string config_path;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::string command_line;

  KeyValueConfig load() const {
    KeyValueConfig kv = config_path.empty() ? KeyValueConfig{} : load_run_config(config_path);
    for (const auto& o : overrides) {
      const KeyValueConfig one = parse_run_config(o);
      for (const auto& [k, v] : one.values()) kv.set(k, v);
    }
    if (seed) kv.set("seed", std::to_string(*seed));
    return kv;
  }
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config_path, "key = value run config (a manifest also works)")->check(CLI::ExistingFile);
  cmd->add_option("--set", c.overrides, "override one config entry, e.g. --set eta=0.2");
  cmd->add_option("--seed", c.seed, "run seed");
}

std::uint64_t run_seed(const KeyValueConfig& kv) {
  const std::string s = kv.get_string("seed", "0");
  try {
    std::size_t used = 0;
    const auto v = std::stoull(s, &used);
    if (used == s.size()) return v;
  } catch (const std::exception&) {
  }
  throw ConfigError("config key 'seed': '" + s + "' is not an unsigned integer");
}

template <typename S>
Denoiser<S> load_denoiser(const std::string& path) {
  const ParameterSet<double> p = load_checkpoint(path);
  if (p.empty()) throw std::invalid_argument("checkpoint '" + path + "' holds no tensors");
  return Denoiser<S>(DenoiserConfig::load(p), p.template cast<S>());
}

template <typename S>
Upscaler<S> load_upscaler(const std::string& path) {
  const ParameterSet<double> p = load_checkpoint(path);
  if (p.empty()) throw std::invalid_argument("checkpoint '" + path + "' holds no tensors");
  return Upscaler<S>(UpscalerConfig::load(p), p.template cast<S>());
}

std::vector<int> parse_prompt(const std::string& text) {
  try {
    return vocab::tokenize(text);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("prompt: ") + e.what());
  }
}

std::string manifest_path(const std::string& out) { return out + ".manifest"; }

void log_line(const std::string& s) { std::cerr << s << std::endl; }

// ---------------------------------------------------------------------------

struct GenDataArgs {
  Common common;
  std::string out;
  int n = 100;
  Index size = 32;
  std::string policy;
};

int gen_data(const GenDataArgs& a) {
  KeyValueConfig kv = a.common.load();
  const std::uint64_t seed = run_seed(kv);
  const auto samples = generate_dataset(a.n, seed, a.size);
  const auto entries = write_dataset(a.out, samples);
  Manifest m{a.common.command_line, kv, {}, {{"index", (fs::path(a.out) / "index.tsv").string()}}};
  if (!a.policy.empty()) {
    // one line per task: image, mask, prompt, target class and sampling seed
    const auto tasks = make_inpaint_tasks(samples, parse_policy(a.policy), seed);
    const fs::path dir = fs::path(a.out) / ("tasks_" + a.policy);
    fs::create_directories(dir);
    std::ostringstream idx;
    idx << "# image\tmask\tprompt\ttarget\tseed\n";
    for (std::size_t i = 0; i < tasks.size(); ++i) {
      char stem[32];
      std::snprintf(stem, sizeof stem, "%06zu", i);
      write_ppm((dir / (std::string(stem) + ".ppm")).string(), tasks[i].image);
      write_pgm((dir / (std::string(stem) + "_mask.pgm")).string(), tasks[i].mask);
      idx << stem << ".ppm\t" << stem << "_mask.pgm\t" << vocab::detokenize(tasks[i].prompt) << '\t'
          << class_name(tasks[i].target) << '\t' << tasks[i].seed << '\n';
    }
    write_file_atomic((dir / "tasks.tsv").string(), idx.str());
    m.outputs.push_back({"tasks", (dir / "tasks.tsv").string()});
  }
  write_manifest((fs::path(a.out) / "manifest.txt").string(), m);
  std::cout << "wrote " << samples.size() << " images and " << entries.size() << " captioned masks to " << a.out
            << "\n";
  return 0;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  Common common;
  std::string stage;
  std::string out;
  std::string init;
};

int train(const TrainArgs& a) {
  KeyValueConfig kv = a.common.load();
  Manifest m{a.common.command_line, {}, {}, {{"checkpoint", a.out}}};
  if (a.stage == "stage1") {
    const TrainConfig cfg = train_config(kv);
    const SamplerConfig sampler = sampler_config(kv);
    DenoiserConfig model;
    model.total_steps = sampler.steps;
    std::optional<ParameterSet<double>> init;
    if (!a.init.empty()) {
      init = load_checkpoint(a.init);
      m.inputs.push_back({"init", a.init});
    }
    store(m.config, cfg);
    store(m.config, sampler);
    const auto p = train_denoiser(model, cfg, sampler.schedule(),
                                  [&](const TrainProgress& pr, const ParameterSet<double>* ck) {
                                    std::ostringstream s;
                                    s << "step " << pr.step << " loss " << pr.loss << " grad_norm " << pr.grad_norm
                                      << " seconds " << pr.seconds;
                                    log_line(s.str());
                                    if (ck) save_checkpoint(a.out, *ck);
                                  },
                                  init);
    save_checkpoint(a.out, p);
  } else if (a.stage == "stage2") {
    const UpscaleTrainConfig cfg = upscale_train_config(kv);
    UpscalerConfig model;
    const NoiseSchedule sched(model.total_steps, BetaSpec::rescaled_default(model.total_steps), 0.0);
    store(m.config, cfg);
    const auto p = train_upscaler(model, cfg, sched,
                                  [&](long step, double loss, double gn, double secs, const ParameterSet<double>* ck) {
                                    std::ostringstream s;
                                    s << "step " << step << " loss " << loss << " grad_norm " << gn << " seconds "
                                      << secs;
                                    log_line(s.str());
                                    if (ck) save_checkpoint(a.out, *ck);
                                  });
    save_checkpoint(a.out, p);
  } else {
    const ClassifierTrainConfig cfg = classifier_train_config(kv);
    store(m.config, cfg);
    const Classifier c = train_classifier(ClassifierConfig{}, cfg, [](long step, double loss, double secs) {
      std::ostringstream s;
      s << "step " << step << " loss " << loss << " seconds " << secs;
      log_line(s.str());
    });
    save_checkpoint(a.out, c.to_params());
    std::cout << "held-out accuracy " << c.held_out_accuracy() << "\n";
    if (c.held_out_accuracy() < cfg.gate)
      std::cerr << "warning: held-out accuracy is below the " << cfg.gate
                << " gate; accuracy reports will refuse this classifier\n";
  }
  write_manifest(manifest_path(a.out), m);
  std::cout << "wrote " << a.out << "\n";
  return 0;
}

// ---------------------------------------------------------------------------

struct InpaintArgs {
  Common common;
  std::string checkpoint, image, mask, prompt, out, generated, diagnostics;
  bool single = false;
};

InpaintTask load_task(const std::string& image, const std::string& mask, const std::string& prompt,
                      std::uint64_t seed) {
  InpaintTask t;
  t.image = read_ppm(image);
  t.mask = read_mask(mask);
  t.prompt = parse_prompt(prompt);
  t.seed = seed;
  t.region = bounding_box(t.mask);
  validate_task(t);
  return t;
}

template <typename S>
InpaintResult inpaint_with(const std::string& checkpoint, const InpaintTask& task, const SamplerConfig& cfg) {
  const Denoiser<S> model = load_denoiser<S>(checkpoint);
  return run_inpaint(task, model, cfg.schedule(), cfg);
}

std::string diagnostics_table(const InpaintDiagnostics& d) {
  Table t;
  t.header = {"t", "objective", "latent_std", "gradient_std"};
  for (std::size_t i = 0; i < d.t.size(); ++i)
    t.rows.push_back({std::to_string(d.t[i]), i < d.objective.size() ? format_double(d.objective[i]) : "-",
                      format_double(d.latent_std[i]),
                      i < d.gradient_std.size() ? format_double(d.gradient_std[i]) : "-"});
  std::string out = t.str();
  for (const auto& msg : d.messages) out += "# " + msg + "\n";
  return out;
}

int inpaint(const InpaintArgs& a) {
  KeyValueConfig kv = a.common.load();
  const SamplerConfig cfg = sampler_config(kv);
  const std::uint64_t seed = run_seed(kv);
  const InpaintTask task = load_task(a.image, a.mask, a.prompt, seed);
  const InpaintResult r = a.single ? inpaint_with<float>(a.checkpoint, task, cfg)
                                   : inpaint_with<double>(a.checkpoint, task, cfg);
  write_ppm(a.out, r.image);
  Manifest m{a.common.command_line, {}, {{"checkpoint", a.checkpoint}, {"image", a.image}, {"mask", a.mask}},
             {{"image", a.out}}};
  m.config.set("seed", std::to_string(seed));
  store(m.config, cfg);
  if (!a.generated.empty()) {
    write_ppm(a.generated, r.generated);
    m.outputs.push_back({"generated", a.generated});
  }
  if (!a.diagnostics.empty()) {
    write_file_atomic(a.diagnostics, diagnostics_table(r.diagnostics));
    m.outputs.push_back({"diagnostics", a.diagnostics});
  }
  write_manifest(manifest_path(a.out), m);
  for (const auto& msg : r.diagnostics.messages) log_line(msg);
  std::cout << "wrote " << a.out << " (prompt \"" << a.prompt << "\", seed " << seed << ")\n";
  return 0;
}

// ---------------------------------------------------------------------------

struct UpscaleArgs {
  Common common;
  std::string checkpoint, image, low, mask, out;
};

int upscale(const UpscaleArgs& a) {
  KeyValueConfig kv = a.common.load();
  const std::uint64_t seed = run_seed(kv);
  UpscaleOptions opt;
  opt.seed = seed;
  opt.poisson = kv.get_bool("upscale_poisson", opt.poisson);
  opt.blend_known = kv.get_bool("upscale_blend_known", opt.blend_known);
  const Image high = read_ppm(a.image), low = read_ppm(a.low);
  Mask mask = read_mask(a.mask);
  if (mask.dim(0) * kUpscaleFactor == high.dim(1) && mask.dim(1) * kUpscaleFactor == high.dim(2)) {
    // low-resolution mask: grow it to the output grid
    const Image grown = upsample_nearest(mask.with_shape({1, mask.dim(0), mask.dim(1)}), kUpscaleFactor);
    mask = grown.with_shape({high.dim(1), high.dim(2)});
  }
  const Upscaler<double> model = load_upscaler<double>(a.checkpoint);
  const int steps = model.config().total_steps;
  const NoiseSchedule sched(steps, BetaSpec::rescaled_default(steps), 0.0);
  const UpscaleResult r = run_upscale(high, low, mask, model, sched, opt);
  write_ppm(a.out, r.image);
  Manifest m{a.common.command_line,
             {},
             {{"checkpoint", a.checkpoint}, {"image", a.image}, {"low", a.low}, {"mask", a.mask}},
             {{"image", a.out}}};
  m.config.set("seed", std::to_string(seed));
  m.config.set("upscale_poisson", opt.poisson ? "true" : "false");
  m.config.set("upscale_blend_known", opt.blend_known ? "true" : "false");
  write_manifest(manifest_path(a.out), m);
  if (!r.message.empty()) log_line(r.message);
  std::cout << "wrote " << a.out << "\n";
  return 0;
}

// ---------------------------------------------------------------------------

struct AblateArgs {
  Common common;
  std::string checkpoint, classifier, out, images_dir;
  int tasks = 200;
  std::uint64_t task_seed = 2026;
  std::size_t batch = 25;
  bool dbl = false;
};

template <typename S>
std::vector<AblationRow> ablate_with(const AblateArgs& a, const std::vector<InpaintTask>& tasks,
                                     const Classifier& cls, const SamplerConfig& cfg,
                                     std::vector<std::vector<Image>>* images) {
  const Denoiser<S> model = load_denoiser<S>(a.checkpoint);
  return run_ablation(tasks, model, cls, cfg, a.batch, 0.98,
                      [](const std::string& row, std::size_t done, std::size_t total) {
                        log_line(row + ": " + std::to_string(done) + "/" + std::to_string(total));
                      },
                      images);
}

int ablate(const AblateArgs& a) {
  KeyValueConfig kv = a.common.load();
  const SamplerConfig cfg = sampler_config(kv);
  const Classifier cls = Classifier::from_params(load_checkpoint(a.classifier));
  const auto tasks = make_neglect_tasks(a.tasks, a.task_seed);
  std::vector<std::vector<Image>> images;
  auto* keep = a.images_dir.empty() ? nullptr : &images;
  const auto rows = a.dbl ? ablate_with<double>(a, tasks, cls, cfg, keep) : ablate_with<float>(a, tasks, cls, cfg, keep);
  const std::string table = ablation_table(rows).str();
  std::cout << table;
  Manifest m{a.common.command_line, {}, {{"checkpoint", a.checkpoint}, {"classifier", a.classifier}}, {}};
  store(m.config, cfg);
  if (!a.out.empty()) {
    write_file_atomic(a.out, table);
    m.outputs.push_back({"table", a.out});
  }
  if (keep) {
    fs::create_directories(a.images_dir);
    for (std::size_t r = 0; r < rows.size(); ++r)
      for (std::size_t i = 0; i < tasks.size(); ++i) {
        char name[64];
        std::snprintf(name, sizeof name, "%04zu_%s.ppm", i, rows[r].name.c_str() + (rows[r].name[0] == '+'));
        write_ppm((fs::path(a.images_dir) / name).string(), images[r][i]);
      }
    m.outputs.push_back({"images", a.images_dir});
  }
  if (!a.out.empty()) write_manifest(manifest_path(a.out), m);
  else std::cout << m.str();
  return 0;
}

// ---------------------------------------------------------------------------

struct VizArgs {
  Common common;
  std::string checkpoint, image, mask, prompt, out_dir;
  std::vector<int> steps;
};

Mask normalised_map(const Tensor<double>& m, Index out) {
  const double hi = m.array().maxCoeff(), lo = m.array().minCoeff();
  const Eigen::ArrayXd v = hi > lo ? ((m.array() - lo) / (hi - lo)).eval() : Eigen::ArrayXd::Zero(m.size()).eval();
  const Mask small(m.shape(), v);
  const Index factor = out / m.dim(0);
  return upsample_nearest(small.with_shape({1, m.dim(0), m.dim(1)}), factor).with_shape({out, out});
}

int viz_attn(const VizArgs& a) {
  KeyValueConfig kv = a.common.load();
  SamplerConfig cfg = sampler_config(kv);
  cfg.record_attention = true;
  const std::uint64_t seed = run_seed(kv);
  const InpaintTask task = load_task(a.image, a.mask, a.prompt, seed);
  const Denoiser<double> model = load_denoiser<double>(a.checkpoint);
  const InpaintResult r = run_inpaint(task, model, cfg.schedule(), cfg);
  fs::create_directories(a.out_dir);
  const fs::path dir(a.out_dir);
  write_ppm((dir / "result.ppm").string(), r.image);
  const PromptTokens prompt = make_prompt(task.prompt, model.config().prompt_length);
  const Index size = task.image.dim(1);
  Table summary;
  summary.header = {"t", "map", "file", "mean_inside_mask", "mean_outside_mask"};
  Manifest m{a.common.command_line, {}, {{"checkpoint", a.checkpoint}, {"image", a.image}, {"mask", a.mask}},
             {{"result", (dir / "result.ppm").string()}}};
  m.config.set("seed", std::to_string(seed));
  store(m.config, cfg);
  auto dump = [&](int t, const std::string& what, const Tensor<double>& map) {
    const Mask img = normalised_map(map, size);
    const std::string file = "t" + std::to_string(t) + "_" + what + ".pgm";
    write_pgm((dir / file).string(), img);
    const Mask small = resize_mask(task.mask, map.dim(0));
    const double inside = mask_count(small) ? (map.array() * small.array()).sum() / mask_count(small) : 0.0;
    const Index out_n = small.size() - mask_count(small);
    const double outside = out_n ? (map.array() * (1.0 - small.array())).sum() / out_n : 0.0;
    summary.rows.push_back({std::to_string(t), what, file, format_double(inside), format_double(outside)});
    m.outputs.push_back({what + "@" + std::to_string(t), (dir / file).string()});
  };
  for (const int t : a.steps) {
    const int idx = cfg.steps - t;
    if (idx < 0 || idx >= static_cast<int>(r.diagnostics.records.size()))
      throw ConfigError("viz-attn: step " + std::to_string(t) + " outside 1.." + std::to_string(cfg.steps));
    const auto& records = r.diagnostics.records[idx];
    const AggregatedAttention<double> agg = aggregate_cross_attention(records);
    for (Index k : prompt.indices.positions) {
      const std::string word = vocab::word(prompt.ids[k]);
      const std::string tag = word == "<eot>" ? "eot" : word;
      dump(t, "cross_" + std::to_string(k) + "_" + tag, agg.token_map(0, k));
    }
    for (const auto& rec : records)
      if (rec.alignment)
        dump(t, "alignment_layer" + std::to_string(rec.layer),
             rec.alignment->with_shape({rec.height, rec.width}));
  }
  write_file_atomic((dir / "summary.tsv").string(), summary.str());
  write_manifest((dir / "manifest.txt").string(), m);
  std::cout << "wrote " << summary.rows.size() << " maps to " << a.out_dir << "\n";
  return 0;
}

// ---------------------------------------------------------------------------

struct GradArgs {
  Common common;
  std::string checkpoint, out;
  int tasks = 8;
  std::uint64_t task_seed = 2026;
  int bins = 41;
};

int grad_stats(const GradArgs& a) {
  KeyValueConfig kv = a.common.load();
  SamplerConfig cfg = sampler_config(kv);
  if (cfg.guidance == GuidanceKind::None) throw ConfigError("grad-stats needs a guided sampler (guidance = rasg)");
  const auto tasks = make_neglect_tasks(a.tasks, a.task_seed);
  // pooled per-step gradients of all tasks, raw and standardised
  std::map<int, std::vector<double>> raw, standard;
  cfg.on_gradient = [&](int t, Index, const Eigen::ArrayXd& g) {
    const double mu = g.mean(), sd = std::sqrt((g - mu).square().mean());
    for (double v : g) {
      raw[t].push_back(v);
      if (sd > 0) standard[t].push_back(v / sd);
    }
  };
  const Denoiser<float> model = load_denoiser<float>(a.checkpoint);
  run_inpaint(tasks, model, cfg.schedule(), cfg);
  Table t;
  t.header = {"t", "kind", "mean", "std", "bin_lo", "bin_hi", "count"};
  for (const auto& [step, values] : raw) {
    for (const std::vector<double>* series : {&values, static_cast<const std::vector<double>*>(&standard[step])}) {
      if (series->empty()) continue;
      const Eigen::ArrayXd v = Eigen::Map<const Eigen::ArrayXd>(series->data(), static_cast<Index>(series->size()));
      const GradientStatistics st = gradient_statistics(Tensor<double>(Shape{v.size()}, v), a.bins);
      const std::string kind = series == &values ? "raw" : "standardised";
      for (std::size_t b = 0; b < st.counts.size(); ++b) {
        const double w = (st.hi - st.lo) / st.counts.size();
        t.rows.push_back({std::to_string(step), kind, format_double(st.mean), format_double(st.std),
                          format_double(st.lo + b * w), format_double(st.lo + (b + 1) * w),
                          std::to_string(st.counts[b])});
      }
    }
  }
  write_file_atomic(a.out, t.str());
  Manifest m{a.common.command_line, {}, {{"checkpoint", a.checkpoint}}, {{"histograms", a.out}}};
  store(m.config, cfg);
  write_manifest(manifest_path(a.out), m);
  std::cout << "wrote " << t.rows.size() << " histogram rows to " << a.out << "\n";
  return 0;
}

std::string join_args(int argc, char** argv) {
  std::string s;
  for (int i = 0; i < argc; ++i) s += (i ? " " : "") + std::string(argv[i]);
  return s;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"attnpaint: prompt-aware diffusion inpainting on a synthetic shapes world"};
  app.require_subcommand(1);
  const std::string command_line = join_args(argc, argv);

  GenDataArgs gd;
  auto* gd_cmd = app.add_subcommand("gen-data", "write a synthetic shapes dataset");
  add_common(gd_cmd, gd.common);
  gd_cmd->add_option("--out", gd.out, "output directory")->required();
  gd_cmd->add_option("-n,--count", gd.n, "number of images")->check(CLI::PositiveNumber);
  gd_cmd->add_option("--size", gd.size, "image side")->check(CLI::Range(8, 1024));
  gd_cmd->add_option("--tasks", gd.policy, "also write inpainting tasks with this masking policy")
      ->check(CLI::IsMember({"instance", "hull", "box", "neglect"}));

  TrainArgs tr;
  auto* tr_cmd = app.add_subcommand("train", "train the stage-1 denoiser, stage-2 upscaler or classifier");
  add_common(tr_cmd, tr.common);
  tr_cmd->add_option("stage", tr.stage, "stage1 | stage2 | classifier")
      ->required()
      ->check(CLI::IsMember({"stage1", "stage2", "classifier"}));
  tr_cmd->add_option("--out", tr.out, "checkpoint path")->required();
  tr_cmd->add_option("--init", tr.init, "stage-1 weights to continue from");

  InpaintArgs ip;
  auto* ip_cmd = app.add_subcommand("inpaint", "fill a masked region of an image from a prompt");
  add_common(ip_cmd, ip.common);
  ip_cmd->add_option("--checkpoint", ip.checkpoint, "stage-1 checkpoint")->required();
  ip_cmd->add_option("--image", ip.image, "input image (P6)")->required();
  ip_cmd->add_option("--mask", ip.mask, "mask (P5, nonzero = fill)")->required();
  ip_cmd->add_option("--prompt", ip.prompt, "e.g. \"red circle\"")->required();
  ip_cmd->add_option("--out", ip.out, "output image")->required();
  ip_cmd->add_option("--generated", ip.generated, "also write the raw sample before compositing");
  ip_cmd->add_option("--diagnostics", ip.diagnostics, "per-step objective and std table");
  ip_cmd->add_flag("--float", ip.single, "sample in 32-bit floats");

  UpscaleArgs up;
  auto* up_cmd = app.add_subcommand("upscale", "4x upscale of an inpainted region");
  add_common(up_cmd, up.common);
  up_cmd->add_option("--checkpoint", up.checkpoint, "stage-2 checkpoint")->required();
  up_cmd->add_option("--image", up.image, "original high-resolution image (P6)")->required();
  up_cmd->add_option("--low", up.low, "low-resolution inpainted image (P6)")->required();
  up_cmd->add_option("--mask", up.mask, "mask at either resolution (P5)")->required();
  up_cmd->add_option("--out", up.out, "output image")->required();

  AblateArgs ab;
  auto* ab_cmd = app.add_subcommand("ablate", "accuracy of base / +PAIntA / +RASG / +both on neglect tasks");
  add_common(ab_cmd, ab.common);
  ab_cmd->add_option("--checkpoint", ab.checkpoint, "stage-1 checkpoint")->required();
  ab_cmd->add_option("--classifier", ab.classifier, "classifier checkpoint")->required();
  ab_cmd->add_option("--tasks", ab.tasks, "number of tasks")->check(CLI::PositiveNumber);
  ab_cmd->add_option("--task-seed", ab.task_seed, "seed of the task draw");
  ab_cmd->add_option("--batch", ab.batch, "tasks per sampler batch")->check(CLI::PositiveNumber);
  ab_cmd->add_option("--out", ab.out, "write the table here as well");
  ab_cmd->add_option("--images", ab.images_dir, "dump every result image here");
  ab_cmd->add_flag("--double", ab.dbl, "sample in 64-bit floats");

  VizArgs vz;
  vz.steps = {50, 40, 30, 20, 10, 1};
  auto* vz_cmd = app.add_subcommand("viz-attn", "dump cross-attention and alignment maps as images");
  add_common(vz_cmd, vz.common);
  vz_cmd->add_option("--checkpoint", vz.checkpoint, "stage-1 checkpoint")->required();
  vz_cmd->add_option("--image", vz.image, "input image (P6)")->required();
  vz_cmd->add_option("--mask", vz.mask, "mask (P5)")->required();
  vz_cmd->add_option("--prompt", vz.prompt, "prompt text")->required();
  vz_cmd->add_option("--out-dir", vz.out_dir, "output directory")->required();
  vz_cmd->add_option("--steps", vz.steps, "timesteps to dump")->delimiter(',');

  GradArgs gs;
  auto* gs_cmd = app.add_subcommand("grad-stats", "per-step histograms of raw and standardised guidance gradients");
  add_common(gs_cmd, gs.common);
  gs_cmd->add_option("--checkpoint", gs.checkpoint, "stage-1 checkpoint")->required();
  gs_cmd->add_option("--out", gs.out, "histogram table")->required();
  gs_cmd->add_option("--tasks", gs.tasks, "neglect tasks to pool")->check(CLI::PositiveNumber);
  gs_cmd->add_option("--task-seed", gs.task_seed, "seed of the task draw");
  gs_cmd->add_option("--bins", gs.bins, "histogram bins")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    const auto chosen = app.get_subcommands();
    std::cerr << "error: " << e.what() << "\n\n" << (chosen.empty() ? app.help() : chosen.front()->help());
    return kUsageError;
  }

  for (Common* c : {&gd.common, &tr.common, &ip.common, &up.common, &ab.common, &vz.common, &gs.common})
    c->command_line = command_line;
  try {
    if (*gd_cmd) return gen_data(gd);
    if (*tr_cmd) return train(tr);
    if (*ip_cmd) return inpaint(ip);
    if (*up_cmd) return upscale(up);
    if (*ab_cmd) return ablate(ab);
    if (*vz_cmd) return viz_attn(vz);
    if (*gs_cmd) return grad_stats(gs);
  } catch (const ConfigError& e) {
    std::cerr << "error: config: " << e.what() << "\n";
    return kUsageError;
  } catch (const FormatError& e) {
    std::cerr << "error: format: " << e.what() << "\n";
    return kRuntimeError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntimeError;
  }
  return kUsageError;
}
