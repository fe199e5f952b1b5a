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

// Every tunable as `key = value` text: parsing with unknown-key rejection,
// serialisation of the full effective config, and run manifests.

#pragma once

#include "attnpaint/eval.hpp"
#include "attnpaint/inpaint.hpp"
#include "attnpaint/io.hpp"
#include "attnpaint/train.hpp"
#include "attnpaint/upscaler.hpp"

#include <set>
#include <string>

namespace attnpaint {

inline constexpr const char* kVersion = "0.1.0";

/// All accepted keys. Sampler keys are bare (`steps`, `eta`, ...), training
/// keys carry a `train.`, `mix.`, `up.` or `cls.` prefix.
const std::set<std::string>& run_config_keys();

KeyValueConfig parse_run_config(const std::string& text);
KeyValueConfig load_run_config(const std::string& path);

SamplerConfig sampler_config(const KeyValueConfig& kv);
TrainConfig train_config(const KeyValueConfig& kv);
UpscaleTrainConfig upscale_train_config(const KeyValueConfig& kv);
ClassifierTrainConfig classifier_train_config(const KeyValueConfig& kv);

void store(KeyValueConfig& kv, const SamplerConfig& c);
void store(KeyValueConfig& kv, const TrainConfig& c);
void store(KeyValueConfig& kv, const UpscaleTrainConfig& c);
void store(KeyValueConfig& kv, const ClassifierTrainConfig& c);

/// FNV-1a of a file's bytes, hex; identifies checkpoints and inputs.
std::string file_digest(const std::string& path);

/// Command, version, inputs and outputs as comments, then the full effective
/// config, so a manifest can be passed back as `--config`.
struct Manifest {
  std::string command;
  KeyValueConfig config;
  std::vector<std::pair<std::string, std::string>> inputs;   // role -> path
  std::vector<std::pair<std::string, std::string>> outputs;  // role -> path
  std::string str() const;
};

/// Writes `manifest.str()` to `path` atomically.
void write_manifest(const std::string& path, const Manifest& manifest);

}  // namespace attnpaint
