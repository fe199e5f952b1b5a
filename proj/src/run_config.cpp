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

#include "attnpaint/run_config.hpp"

#include <charconv>
#include <cstdio>

namespace attnpaint {

namespace {

std::string num(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);  // shortest round-trip form
  return std::string(buf, r.ptr);
}

std::string num(long v) { return std::to_string(v); }

std::string flag(bool v) { return v ? "true" : "false"; }

std::string ints(const std::vector<int>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
  return out;
}

std::uint64_t get_seed(const KeyValueConfig& kv, const std::string& key, std::uint64_t fallback) {
  if (!kv.has(key)) return fallback;
  const std::string& s = kv.get(key);
  std::uint64_t v = 0;
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size())
    throw ConfigError("config key '" + key + "': '" + s + "' is not an unsigned integer");
  return v;
}

AlignmentMax parse_alignment_max(const std::string& s) {
  if (s == "raw") return AlignmentMax::Raw;
  if (s == "subtracted") return AlignmentMax::Subtracted;
  throw ConfigError("painta_max must be raw or subtracted, got '" + s + "'");
}

void read_adam(const KeyValueConfig& kv, const std::string& prefix, AdamConfig& a) {
  a.lr = kv.get_double(prefix + "lr", a.lr);
  a.clip_norm = kv.get_double(prefix + "clip", a.clip_norm);
  a.weight_decay = kv.get_double(prefix + "weight_decay", a.weight_decay);
}

void write_adam(KeyValueConfig& kv, const std::string& prefix, const AdamConfig& a) {
  kv.set(prefix + "lr", num(a.lr));
  kv.set(prefix + "clip", num(a.clip_norm));
  kv.set(prefix + "weight_decay", num(a.weight_decay));
}

}  // namespace

const std::set<std::string>& run_config_keys() {
  static const std::set<std::string> keys = {
      // sampling
      "seed", "steps", "eta", "beta_start", "beta_end", "guidance", "guidance_fraction", "objective",
      "vanilla_scale", "vanilla_relative", "painta", "painta_fraction", "painta_levels", "painta_max", "blend_known", "poisson", "upscale_poisson",
      "upscale_blend_known",
      // stage 1
      "train.steps", "train.batch", "train.seed", "train.lr", "train.clip", "train.weight_decay", "train.warmup",
      "train.final_lr", "train.log_every", "train.checkpoint_every", "mix.full", "mix.object", "mix.background",
      "mix.partial", "mix.absent_prompt", "mix.caption_prompt", "mix.drop_prompt",
      // stage 2
      "up.steps", "up.batch", "up.crop", "up.high_size", "up.pool", "up.seed", "up.lr", "up.clip", "up.weight_decay",
      "up.warmup", "up.final_lr", "up.log_every", "up.checkpoint_every",
      // classifier
      "cls.steps", "cls.batch", "cls.train_examples", "cls.held_out", "cls.lr", "cls.clip", "cls.weight_decay",
      "cls.noise", "cls.seed", "cls.gate", "cls.log_every"};
  return keys;
}

KeyValueConfig parse_run_config(const std::string& text) { return KeyValueConfig::parse(text, run_config_keys()); }
KeyValueConfig load_run_config(const std::string& path) { return KeyValueConfig::load(path, run_config_keys()); }

SamplerConfig sampler_config(const KeyValueConfig& kv) {
  SamplerConfig c;
  c.steps = static_cast<int>(kv.get_int("steps", c.steps));
  c.eta = kv.get_double("eta", c.eta);
  c.beta_start = kv.get_double("beta_start", c.beta_start);
  c.beta_end = kv.get_double("beta_end", c.beta_end);
  try {
    if (kv.has("guidance")) c.guidance = parse_guidance(kv.get("guidance"));
    if (kv.has("objective")) c.objective = parse_objective(kv.get("objective"));
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  c.vanilla_scale = kv.get_double("vanilla_scale", c.vanilla_scale);
  c.vanilla_relative = kv.get_bool("vanilla_relative", c.vanilla_relative);
  c.painta = kv.get_bool("painta", c.painta);
  c.painta_fraction = kv.get_double("painta_fraction", c.painta_fraction);
  c.guidance_fraction = kv.get_double("guidance_fraction", c.guidance_fraction);
  c.painta_levels = kv.get_ints("painta_levels", c.painta_levels);
  if (kv.has("painta_max")) c.painta_max = parse_alignment_max(kv.get("painta_max"));
  c.blend_known = kv.get_bool("blend_known", c.blend_known);
  c.poisson = kv.get_bool("poisson", c.poisson);
  try {
    c.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  return c;
}

void store(KeyValueConfig& kv, const SamplerConfig& c) {
  kv.set("steps", num(long(c.steps)));
  kv.set("eta", num(c.eta));
  kv.set("beta_start", num(c.beta_start));
  kv.set("beta_end", num(c.beta_end));
  kv.set("guidance", guidance_name(c.guidance));
  kv.set("objective", objective_name(c.objective));
  kv.set("vanilla_scale", num(c.vanilla_scale));
  kv.set("vanilla_relative", flag(c.vanilla_relative));
  kv.set("painta", flag(c.painta));
  kv.set("painta_fraction", num(c.painta_fraction));
  kv.set("guidance_fraction", num(c.guidance_fraction));
  kv.set("painta_levels", ints(c.painta_levels));
  kv.set("painta_max", c.painta_max == AlignmentMax::Raw ? "raw" : "subtracted");
  kv.set("blend_known", flag(c.blend_known));
  kv.set("poisson", flag(c.poisson));
}

TrainConfig train_config(const KeyValueConfig& kv) {
  TrainConfig c;
  c.steps = kv.get_int("train.steps", c.steps);
  c.batch = kv.get_int("train.batch", c.batch);
  c.seed = get_seed(kv, "train.seed", c.seed);
  read_adam(kv, "train.", c.adam);
  c.warmup = kv.get_int("train.warmup", c.warmup);
  c.final_lr_fraction = kv.get_double("train.final_lr", c.final_lr_fraction);
  c.log_every = static_cast<int>(kv.get_int("train.log_every", c.log_every));
  c.checkpoint_every = static_cast<int>(kv.get_int("train.checkpoint_every", c.checkpoint_every));
  c.mix.full = kv.get_double("mix.full", c.mix.full);
  c.mix.object = kv.get_double("mix.object", c.mix.object);
  c.mix.background = kv.get_double("mix.background", c.mix.background);
  c.mix.partial = kv.get_double("mix.partial", c.mix.partial);
  c.mix.absent_prompt = kv.get_double("mix.absent_prompt", c.mix.absent_prompt);
  c.mix.caption_prompt = kv.get_double("mix.caption_prompt", c.mix.caption_prompt);
  c.mix.drop_prompt = kv.get_double("mix.drop_prompt", c.mix.drop_prompt);
  if (c.steps < 1 || c.batch < 1) throw ConfigError("train.steps and train.batch must be >= 1");
  return c;
}

void store(KeyValueConfig& kv, const TrainConfig& c) {
  kv.set("train.steps", num(c.steps));
  kv.set("train.batch", num(long(c.batch)));
  kv.set("train.seed", std::to_string(c.seed));
  write_adam(kv, "train.", c.adam);
  kv.set("train.warmup", num(c.warmup));
  kv.set("train.final_lr", num(c.final_lr_fraction));
  kv.set("train.log_every", num(long(c.log_every)));
  kv.set("train.checkpoint_every", num(long(c.checkpoint_every)));
  kv.set("mix.full", num(c.mix.full));
  kv.set("mix.object", num(c.mix.object));
  kv.set("mix.background", num(c.mix.background));
  kv.set("mix.partial", num(c.mix.partial));
  kv.set("mix.absent_prompt", num(c.mix.absent_prompt));
  kv.set("mix.caption_prompt", num(c.mix.caption_prompt));
  kv.set("mix.drop_prompt", num(c.mix.drop_prompt));
}

UpscaleTrainConfig upscale_train_config(const KeyValueConfig& kv) {
  UpscaleTrainConfig c;
  c.steps = kv.get_int("up.steps", c.steps);
  c.batch = kv.get_int("up.batch", c.batch);
  c.crop = kv.get_int("up.crop", c.crop);
  c.high_size = kv.get_int("up.high_size", c.high_size);
  c.pool = static_cast<int>(kv.get_int("up.pool", c.pool));
  c.seed = get_seed(kv, "up.seed", c.seed);
  read_adam(kv, "up.", c.adam);
  c.warmup = kv.get_int("up.warmup", c.warmup);
  c.final_lr_fraction = kv.get_double("up.final_lr", c.final_lr_fraction);
  c.log_every = static_cast<int>(kv.get_int("up.log_every", c.log_every));
  c.checkpoint_every = static_cast<int>(kv.get_int("up.checkpoint_every", c.checkpoint_every));
  if (c.steps < 1 || c.batch < 1) throw ConfigError("up.steps and up.batch must be >= 1");
  return c;
}

void store(KeyValueConfig& kv, const UpscaleTrainConfig& c) {
  kv.set("up.steps", num(c.steps));
  kv.set("up.batch", num(long(c.batch)));
  kv.set("up.crop", num(long(c.crop)));
  kv.set("up.high_size", num(long(c.high_size)));
  kv.set("up.pool", num(long(c.pool)));
  kv.set("up.seed", std::to_string(c.seed));
  write_adam(kv, "up.", c.adam);
  kv.set("up.warmup", num(c.warmup));
  kv.set("up.final_lr", num(c.final_lr_fraction));
  kv.set("up.log_every", num(long(c.log_every)));
  kv.set("up.checkpoint_every", num(long(c.checkpoint_every)));
}

ClassifierTrainConfig classifier_train_config(const KeyValueConfig& kv) {
  ClassifierTrainConfig c;
  c.steps = kv.get_int("cls.steps", c.steps);
  c.batch = kv.get_int("cls.batch", c.batch);
  c.train_examples = static_cast<int>(kv.get_int("cls.train_examples", c.train_examples));
  c.held_out = static_cast<int>(kv.get_int("cls.held_out", c.held_out));
  read_adam(kv, "cls.", c.adam);
  c.noise = kv.get_double("cls.noise", c.noise);
  c.seed = get_seed(kv, "cls.seed", c.seed);
  c.gate = kv.get_double("cls.gate", c.gate);
  c.log_every = static_cast<int>(kv.get_int("cls.log_every", c.log_every));
  if (c.steps < 1 || c.batch < 1 || c.train_examples < 1 || c.held_out < 1)
    throw ConfigError("cls.steps, cls.batch, cls.train_examples and cls.held_out must be >= 1");
  return c;
}

void store(KeyValueConfig& kv, const ClassifierTrainConfig& c) {
  kv.set("cls.steps", num(c.steps));
  kv.set("cls.batch", num(long(c.batch)));
  kv.set("cls.train_examples", num(long(c.train_examples)));
  kv.set("cls.held_out", num(long(c.held_out)));
  write_adam(kv, "cls.", c.adam);
  kv.set("cls.noise", num(c.noise));
  kv.set("cls.seed", std::to_string(c.seed));
  kv.set("cls.gate", num(c.gate));
  kv.set("cls.log_every", num(long(c.log_every)));
}

std::string file_digest(const std::string& path) {
  const std::string bytes = read_file(path);
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string Manifest::str() const {
  // non-config lines are comments so the manifest itself loads as a config
  std::string out = "# attnpaint " + std::string(kVersion) + " run manifest\n# command: " + command + "\n";
  for (const auto& [role, path] : inputs) out += "# input " + role + ": " + path + " (fnv1a " + file_digest(path) + ")\n";
  for (const auto& [role, path] : outputs) out += "# output " + role + ": " + path + "\n";
  return out + config.str();
}

void write_manifest(const std::string& path, const Manifest& manifest) { write_file_atomic(path, manifest.str()); }

}  // namespace attnpaint
