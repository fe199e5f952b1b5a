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

#include "attnpaint/io.hpp"

#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <unistd.h>

namespace attnpaint {

namespace fs = std::filesystem;

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file_atomic(const std::string& path, const std::string& bytes) {
  const fs::path target(path);
  if (target.has_parent_path()) fs::create_directories(target.parent_path());
  const std::string tmp = path + ".tmp." + std::to_string(::getpid());
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write '" + tmp + "'");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) throw std::runtime_error("write failed for '" + tmp + "'");
  }
  std::error_code ec;
  fs::rename(tmp, target, ec);
  if (ec) {
    fs::remove(tmp);
    throw std::runtime_error("cannot rename '" + tmp + "' to '" + path + "': " + ec.message());
  }
}

// ---------------------------------------------------------------------------
// Netpbm

namespace {

struct PnmHeader {
  Index width = 0, height = 0;
  int maxval = 0;
  std::size_t data_offset = 0;
};

PnmHeader parse_pnm_header(const std::string& b, const char* magic) {
  if (b.size() < 2 || b[0] != magic[0] || b[1] != magic[1])
    throw FormatError(std::string("missing ") + magic + " magic", 0);
  std::size_t pos = 2;
  auto skip_space = [&] {
    while (pos < b.size()) {
      if (b[pos] == '#') {
        while (pos < b.size() && b[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(b[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto number = [&](const char* what) {
    skip_space();
    if (pos >= b.size()) throw FormatError(std::string("truncated header, expected ") + what, pos);
    if (!std::isdigit(static_cast<unsigned char>(b[pos]))) throw FormatError(std::string("expected ") + what, pos);
    long v = 0;
    while (pos < b.size() && std::isdigit(static_cast<unsigned char>(b[pos]))) {
      v = v * 10 + (b[pos] - '0');
      if (v > 1'000'000) throw FormatError(std::string(what) + " too large", pos);
      ++pos;
    }
    return v;
  };
  PnmHeader h;
  h.width = number("width");
  h.height = number("height");
  h.maxval = static_cast<int>(number("maxval"));
  if (h.width <= 0 || h.height <= 0) throw FormatError("zero image dimension", pos);
  if (h.maxval != 255) throw FormatError("only 8-bit maxval 255 is supported", pos);
  if (pos >= b.size() || !std::isspace(static_cast<unsigned char>(b[pos])))
    throw FormatError("expected single whitespace after maxval", pos);
  h.data_offset = pos + 1;
  return h;
}

unsigned char to_byte(double v) {
  if (!std::isfinite(v)) throw std::invalid_argument("non-finite pixel value");
  return static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

}  // namespace

std::string encode_ppm(const Image& image) {
  if (image.rank() != 3 || image.dim(0) != 3) throw ShapeError("encode_ppm: expected [3, H, W], got " + to_string(image.shape()));
  const Index H = image.dim(1), W = image.dim(2);
  std::string out = "P6\n" + std::to_string(W) + " " + std::to_string(H) + "\n255\n";
  out.reserve(out.size() + 3 * H * W);
  for (Index y = 0; y < H; ++y)
    for (Index x = 0; x < W; ++x)
      for (Index c = 0; c < 3; ++c) out.push_back(static_cast<char>(to_byte(image[(c * H + y) * W + x])));
  return out;
}

Image decode_ppm(const std::string& bytes) {
  const PnmHeader h = parse_pnm_header(bytes, "P6");
  const std::size_t need = static_cast<std::size_t>(3 * h.width * h.height);
  if (bytes.size() - h.data_offset < need) throw FormatError("truncated pixel data", bytes.size());
  Eigen::ArrayXd v(3 * h.width * h.height);
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data() + h.data_offset);
  for (Index y = 0; y < h.height; ++y)
    for (Index x = 0; x < h.width; ++x)
      for (Index c = 0; c < 3; ++c) v[(c * h.height + y) * h.width + x] = p[(y * h.width + x) * 3 + c] / 255.0;
  return Image({3, h.height, h.width}, v);
}

std::string encode_pgm(const Mask& mask) {
  if (mask.rank() != 2) throw ShapeError("encode_pgm: expected [H, W], got " + to_string(mask.shape()));
  const Index H = mask.dim(0), W = mask.dim(1);
  std::string out = "P5\n" + std::to_string(W) + " " + std::to_string(H) + "\n255\n";
  for (Index i = 0; i < H * W; ++i) out.push_back(static_cast<char>(to_byte(mask[i])));
  return out;
}

Mask decode_pgm(const std::string& bytes) {
  const PnmHeader h = parse_pnm_header(bytes, "P5");
  const std::size_t need = static_cast<std::size_t>(h.width * h.height);
  if (bytes.size() - h.data_offset < need) throw FormatError("truncated pixel data", bytes.size());
  Eigen::ArrayXd v(h.width * h.height);
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data() + h.data_offset);
  for (Index i = 0; i < h.width * h.height; ++i) v[i] = p[i] / 255.0;
  return Mask({h.height, h.width}, v);
}

void write_ppm(const std::string& path, const Image& image) { write_file_atomic(path, encode_ppm(image)); }
Image read_ppm(const std::string& path) { return decode_ppm(read_file(path)); }
void write_pgm(const std::string& path, const Mask& mask) { write_file_atomic(path, encode_pgm(mask)); }
Mask read_pgm(const std::string& path) { return decode_pgm(read_file(path)); }

Mask read_mask(const std::string& path) {
  Mask m = read_pgm(path);
  return Mask(m.shape(), (m.array() != 0).cast<double>());
}

Image quantize(const Image& image) {
  return Image(image.shape(), image.array().unaryExpr([](double v) { return to_byte(v) / 255.0; }));
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint code assumes a little-endian host");

template <typename T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

class Reader {
 public:
  explicit Reader(const std::string& b) : b_(b) {}
  template <typename T>
  T get(const char* what) {
    if (b_.size() - pos_ < sizeof(T))
      throw CheckpointTruncatedError("checkpoint truncated while reading " + std::string(what) + " at byte " +
                                     std::to_string(pos_));
    T v;
    std::memcpy(&v, b_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string bytes(std::size_t n, const char* what) {
    if (b_.size() - pos_ < n)
      throw CheckpointTruncatedError("checkpoint truncated while reading " + std::string(what) + " at byte " +
                                     std::to_string(pos_));
    std::string s = b_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t remaining() const { return b_.size() - pos_; }

 private:
  const std::string& b_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string encode_checkpoint(const ParameterSet<double>& params) {
  std::string out = "HDPT";
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(params.size()));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const std::string& name = params.names()[i];
    const Tensor<double>& t = params.values()[i];
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (Index d : t.shape()) put<std::uint64_t>(out, static_cast<std::uint64_t>(d));
    out.append(reinterpret_cast<const char*>(t.data()), sizeof(double) * static_cast<std::size_t>(t.size()));
  }
  return out;
}

ParameterSet<double> decode_checkpoint(const std::string& bytes) {
  if (bytes.size() < 4) throw CheckpointTruncatedError("checkpoint truncated before magic");
  if (bytes.compare(0, 4, "HDPT") != 0) throw CheckpointMagicError("not an HDPT checkpoint (bad magic)");
  Reader r(bytes);
  (void)r.bytes(4, "magic");
  const auto version = r.get<std::uint32_t>("version");
  if (version != kCheckpointVersion)
    throw CheckpointVersionError("checkpoint format version " + std::to_string(version) + ", expected " +
                                 std::to_string(kCheckpointVersion));
  const auto count = r.get<std::uint32_t>("tensor count");
  ParameterSet<double> out;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = r.get<std::uint32_t>("name length");
    std::string name = r.bytes(len, "name");
    const auto rank = r.get<std::uint32_t>("rank");
    if (rank > 8) throw CheckpointError("tensor '" + name + "' has implausible rank " + std::to_string(rank));
    Shape shape;
    std::uint64_t n = 1;
    for (std::uint32_t k = 0; k < rank; ++k) {
      const auto d = r.get<std::uint64_t>("dimension");
      shape.push_back(static_cast<Index>(d));
      n *= d;
      if (n > (std::uint64_t(1) << 34)) throw CheckpointError("tensor '" + name + "' is implausibly large");
    }
    if (r.remaining() < n * sizeof(double))
      throw CheckpointTruncatedError("checkpoint truncated inside tensor '" + name + "'");
    std::string raw = r.bytes(n * sizeof(double), "values");
    Eigen::ArrayXd v(static_cast<Index>(n));
    std::memcpy(v.data(), raw.data(), raw.size());
    out.add(name, Tensor<double>(shape, v));
  }
  return out;
}

void save_checkpoint(const std::string& path, const ParameterSet<double>& params) {
  write_file_atomic(path, encode_checkpoint(params));
}

ParameterSet<double> load_checkpoint(const std::string& path) {
  if (!fs::exists(path)) throw std::runtime_error("checkpoint not found: '" + path + "'");
  return decode_checkpoint(read_file(path));
}

// ---------------------------------------------------------------------------
// Configs

namespace {

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

}  // namespace

KeyValueConfig KeyValueConfig::parse(const std::string& text, const std::set<std::string>& allowed) {
  KeyValueConfig cfg;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
    if (!allowed.empty() && !allowed.count(key))
      throw ConfigError("config line " + std::to_string(lineno) + ": unknown key '" + key + "'");
    cfg.values_[key] = value;
  }
  return cfg;
}

KeyValueConfig KeyValueConfig::load(const std::string& path, const std::set<std::string>& allowed) {
  return parse(read_file(path), allowed);
}

const std::string& KeyValueConfig::get(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("missing config key '" + key + "'");
  return it->second;
}

std::string KeyValueConfig::str() const {
  std::string out;
  for (const auto& [k, v] : values_) out += k + " = " + v + "\n";
  return out;
}

std::string KeyValueConfig::get_string(const std::string& key, const std::string& fallback) const {
  return has(key) ? get(key) : fallback;
}

double KeyValueConfig::get_double(const std::string& key, double fallback) const {
  if (!has(key)) return fallback;
  try {
    std::size_t used = 0;
    const double v = std::stod(get(key), &used);
    if (used != get(key).size()) throw std::invalid_argument("trailing characters");
    return v;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': '" + get(key) + "' is not a number");
  }
}

long KeyValueConfig::get_int(const std::string& key, long fallback) const {
  if (!has(key)) return fallback;
  try {
    std::size_t used = 0;
    const long v = std::stol(get(key), &used);
    if (used != get(key).size()) throw std::invalid_argument("trailing characters");
    return v;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': '" + get(key) + "' is not an integer");
  }
}

bool KeyValueConfig::get_bool(const std::string& key, bool fallback) const {
  if (!has(key)) return fallback;
  const std::string& v = get(key);
  if (v == "true" || v == "1" || v == "on" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "off" || v == "no") return false;
  throw ConfigError("config key '" + key + "': '" + v + "' is not a boolean");
}

std::vector<int> KeyValueConfig::get_ints(const std::string& key, const std::vector<int>& fallback) const {
  if (!has(key)) return fallback;
  std::vector<int> out;
  std::string s = get(key);
  for (char& c : s)
    if (c == ',') c = ' ';
  std::istringstream in(s);
  for (std::string tok; in >> tok;) {
    try {
      out.push_back(std::stoi(tok));
    } catch (const std::exception&) {
      throw ConfigError("config key '" + key + "': '" + tok + "' is not an integer");
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

std::string Table::str() const {
  std::string out;
  auto line = [&](const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (i) out += '\t';
      out += cells[i];
    }
    out += '\n';
  };
  line(header);
  for (const auto& r : rows) line(r);
  return out;
}

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace attnpaint
