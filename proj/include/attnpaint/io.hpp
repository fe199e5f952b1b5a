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

// File formats: binary PPM/PGM images, the HDPT tensor checkpoint, key=value
// configs and tab-separated tables. Every file is written atomically.

#pragma once

#include "attnpaint/data.hpp"
#include "attnpaint/params.hpp"

#include <cstdint>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

namespace attnpaint {

class FormatError : public std::runtime_error {
 public:
  FormatError(const std::string& what, std::size_t offset)
      : std::runtime_error(what + " at byte " + std::to_string(offset)), offset_(offset) {}
  std::size_t offset() const { return offset_; }

 private:
  std::size_t offset_;
};

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class CheckpointMagicError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};
class CheckpointVersionError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};
class CheckpointTruncatedError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

// ---------------------------------------------------------------------------
// Files

std::string read_file(const std::string& path);
/// Writes to a temporary sibling and renames it over `path`.
void write_file_atomic(const std::string& path, const std::string& bytes);

// ---------------------------------------------------------------------------
// Images. 8-bit samples map to v / 255; writing rounds to the nearest level.

std::string encode_ppm(const Image& image);  // [3, H, W] -> P6
Image decode_ppm(const std::string& bytes);
std::string encode_pgm(const Mask& mask);    // [H, W] -> P5, 0 / 255 for binary masks
Mask decode_pgm(const std::string& bytes);

void write_ppm(const std::string& path, const Image& image);
Image read_ppm(const std::string& path);
void write_pgm(const std::string& path, const Mask& mask);
Mask read_pgm(const std::string& path);
/// Binary mask from a grey image: nonzero -> 1.
Mask read_mask(const std::string& path);

/// Round to the nearest 8-bit level, so that encode/decode is the identity.
Image quantize(const Image& image);

// ---------------------------------------------------------------------------
// Checkpoints

std::string encode_checkpoint(const ParameterSet<double>& params);
ParameterSet<double> decode_checkpoint(const std::string& bytes);
void save_checkpoint(const std::string& path, const ParameterSet<double>& params);
ParameterSet<double> load_checkpoint(const std::string& path);

// ---------------------------------------------------------------------------
// key = value configs

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Ordered key/value pairs. `#` starts a comment; blank lines are ignored.
class KeyValueConfig {
 public:
  static KeyValueConfig parse(const std::string& text, const std::set<std::string>& allowed);
  static KeyValueConfig load(const std::string& path, const std::set<std::string>& allowed);

  bool has(const std::string& key) const { return values_.count(key) != 0; }
  const std::string& get(const std::string& key) const;
  void set(const std::string& key, const std::string& value) { values_[key] = value; }
  const std::map<std::string, std::string>& values() const { return values_; }
  std::string str() const;

  std::string get_string(const std::string& key, const std::string& fallback) const;
  double get_double(const std::string& key, double fallback) const;
  long get_int(const std::string& key, long fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;
  std::vector<int> get_ints(const std::string& key, const std::vector<int>& fallback) const;

 private:
  std::map<std::string, std::string> values_;
};

// ---------------------------------------------------------------------------
// Tab-separated tables

struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
  std::string str() const;
};

std::string format_double(double v);

}  // namespace attnpaint
