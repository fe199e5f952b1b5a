#include "doctest.h"

#include "attnpaint/run_config.hpp"

#include <sys/wait.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <random>

using namespace attnpaint;
namespace fs = std::filesystem;

namespace {

Image random_image(std::mt19937_64& rng, Index H, Index W) {
  std::uniform_int_distribution<int> byte(0, 255);
  Eigen::ArrayXd v(3 * H * W);
  for (auto& x : v) x = byte(rng) / 255.0;
  return Image({3, H, W}, v);
}

struct Run {
  int code = -1;
  std::string output;
};

// runs the CLI with stderr folded into the captured output
Run cli(const std::string& args) {
  Run r;
  const std::string cmd = std::string(ATTNPAINT_CLI) + " " + args + " 2>&1";
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  std::array<char, 4096> buf;
  while (std::size_t n = std::fread(buf.data(), 1, buf.size(), pipe)) r.output.append(buf.data(), n);
  const int status = pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("attnpaint_cli_io_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST_CASE("1x1 white P6 is the minimal header plus three bytes") {
  const std::string bytes = encode_ppm(Image::constant({3, 1, 1}, 1.0));
  CHECK(bytes == std::string("P6\n1 1\n255\n") + "\xff\xff\xff");
  CHECK(bytes.size() == 11 + 3);
}

TEST_CASE("images round-trip bit-exactly") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const Index H = 1 + trial % 7, W = 1 + (trial * 5) % 11;
    const Image img = random_image(rng, H, W);
    const Image back = decode_ppm(encode_ppm(img));
    CHECK(back.shape() == img.shape());
    CHECK((back.array() == img.array()).all());
    CHECK(encode_ppm(back) == encode_ppm(img));
    const Mask m(Shape{H, W}, img.array().head(H * W));
    CHECK((decode_pgm(encode_pgm(m)).array() == m.array()).all());
  }
}

TEST_CASE("pixel layout is row-major from the top left") {
  Eigen::ArrayXd v = Eigen::ArrayXd::Zero(3 * 2 * 2);
  v[0 * 4 + 1] = 1;  // red at (y=0, x=1)
  v[2 * 4 + 2] = 1;  // blue at (y=1, x=0)
  const std::string bytes = encode_ppm(Image({3, 2, 2}, v));
  const std::string data = bytes.substr(11);
  CHECK(data == std::string("\0\0\0\xff\0\0\0\0\xff\0\0\0", 12));
}

TEST_CASE("malformed headers report a byte offset") {
  auto offset_of = [](const std::string& bytes) -> long {
    try {
      decode_ppm(bytes);
    } catch (const FormatError& e) {
      return static_cast<long>(e.offset());
    }
    return -1;
  };
  CHECK(offset_of("P5\n1 1\n255\n\0") == 0);
  CHECK(offset_of("P6\n1 x\n255\nabc") == 5);
  CHECK(offset_of("P6\n1 1\n65535\n") >= 7);
  CHECK(offset_of("P6\n2 2\n255\nabc") >= 11);
  CHECK(offset_of("P6\n1 1\n255\nabc") == -1);
  CHECK_THROWS_WITH_AS(decode_ppm("P6\n1 x\n255\n"), doctest::Contains("byte 5"), FormatError);
}

TEST_CASE("checkpoints round-trip over random tensors") {
  std::mt19937_64 rng(9);
  std::normal_distribution<double> nd(0, 1e3);
  std::uniform_int_distribution<int> dim(1, 5), rank(0, 4);
  for (int trial = 0; trial < 10; ++trial) {
    ParameterSet<double> p;
    for (int k = 0; k < 6; ++k) {
      Shape s;
      for (int r = rank(rng); r > 0; --r) s.push_back(dim(rng));
      Eigen::ArrayXd v(numel(s));
      for (auto& x : v) x = nd(rng);
      if (k == 0 && v.size() > 0) v[0] = -0.0;
      p.add("t" + std::to_string(trial) + "." + std::to_string(k), Tensor<double>(s, v));
    }
    const ParameterSet<double> back = decode_checkpoint(encode_checkpoint(p));
    REQUIRE(back.size() == p.size());
    for (std::size_t i = 0; i < p.size(); ++i) {
      CHECK(back.names()[i] == p.names()[i]);
      CHECK(back.values()[i].shape() == p.values()[i].shape());
      CHECK(std::memcmp(back.values()[i].array().data(), p.values()[i].array().data(),
                        sizeof(double) * p.values()[i].size()) == 0);
    }
    CHECK(encode_checkpoint(back) == encode_checkpoint(p));
  }
}

TEST_CASE("checkpoint layout is little-endian with a versioned header") {
  ParameterSet<double> p;
  p.add("w", Tensor<double>::of({2}, {1.0, -2.0}));
  const std::string b = encode_checkpoint(p);
  CHECK(b.substr(0, 4) == "HDPT");
  std::uint32_t version = 0;
  std::memcpy(&version, b.data() + 4, 4);
  CHECK(version == kCheckpointVersion);
  // magic, version, count, name length, name, rank, one dim, two doubles
  CHECK(b.size() == 4 + 4 + 4 + 4 + 1 + 4 + 8 + 16);
}

TEST_CASE("checkpoint errors are distinct") {
  ParameterSet<double> p;
  p.add("w", Tensor<double>::of({3}, {1, 2, 3}));
  const std::string good = encode_checkpoint(p);

  std::string bad_magic = good;
  bad_magic[0] = 'X';
  CHECK_THROWS_AS(decode_checkpoint(bad_magic), CheckpointMagicError);

  std::string bad_version = good;
  bad_version[4] = 9;
  CHECK_THROWS_AS(decode_checkpoint(bad_version), CheckpointVersionError);

  for (std::size_t cut : {std::size_t(2), std::size_t(6), good.size() - 1, good.size() - 20})
    CHECK_THROWS_AS(decode_checkpoint(good.substr(0, cut)), CheckpointTruncatedError);
}

TEST_CASE("an empty tensor table is a valid file and fails at use") {
  const ParameterSet<double> empty = decode_checkpoint(encode_checkpoint(ParameterSet<double>{}));
  CHECK(empty.empty());
  CHECK_THROWS_AS(Denoiser<double>(DenoiserConfig{}, empty), std::invalid_argument);
  CHECK_THROWS_AS(Classifier::from_params(empty), std::invalid_argument);
}

TEST_CASE("run config rejects unknown keys and bad values") {
  CHECK_THROWS_WITH_AS(parse_run_config("eta = 0.2\nbogus = 1\n"), doctest::Contains("unknown key 'bogus'"),
                       ConfigError);
  CHECK_THROWS_AS(parse_run_config("no equals sign\n"), ConfigError);
  CHECK_THROWS_AS(sampler_config(parse_run_config("eta = fast")), ConfigError);
  CHECK_THROWS_AS(sampler_config(parse_run_config("guidance = loud")), ConfigError);
  CHECK_THROWS_AS(sampler_config(parse_run_config("eta = 2")), ConfigError);
  const SamplerConfig c = sampler_config(parse_run_config("# comment\n eta = 0.25  # trailing\nguidance = vanilla\n"
                                                          "painta_levels = 1,2\n"));
  CHECK(c.eta == 0.25);
  CHECK(c.guidance == GuidanceKind::Vanilla);
  CHECK(c.painta_levels == std::vector<int>{1, 2});
}

TEST_CASE("serialised configs reproduce every field") {
  SamplerConfig s;
  s.eta = 0.3;
  s.painta = false;
  s.painta_fraction = 0.7;
  s.guidance_fraction = 0.6;
  s.objective = ObjectiveKind::Max;
  s.painta_max = AlignmentMax::Subtracted;
  TrainConfig t;
  t.mix.full = 0.123456789012345;
  t.seed = 18446744073709551615ULL;
  KeyValueConfig kv;
  store(kv, s);
  store(kv, t);
  store(kv, UpscaleTrainConfig{});
  store(kv, ClassifierTrainConfig{});
  const KeyValueConfig back = parse_run_config(kv.str());
  CHECK(back.str() == kv.str());
  const SamplerConfig s2 = sampler_config(back);
  CHECK(s2.eta == s.eta);
  CHECK(s2.painta == s.painta);
  CHECK(s2.painta_fraction == s.painta_fraction);
  CHECK(s2.guidance_fraction == s.guidance_fraction);
  CHECK(s2.objective == s.objective);
  CHECK(s2.painta_max == s.painta_max);
  const TrainConfig t2 = train_config(back);
  CHECK(t2.mix.full == t.mix.full);
  CHECK(t2.seed == t.seed);
  CHECK(t2.steps == t.steps);
  // every accepted key has a serialised default except the run-level ones
  for (const auto& key : run_config_keys())
    if (key != "seed" && key != "upscale_poisson" && key != "upscale_blend_known") CHECK_MESSAGE(kv.has(key), key);
}

TEST_CASE("manifests load back as configs") {
  const fs::path dir = scratch("manifest");
  write_file_atomic((dir / "in.txt").string(), "abc");
  Manifest m;
  m.command = "attnpaint inpaint --seed 7";
  store(m.config, SamplerConfig{});
  m.config.set("seed", "7");
  m.inputs = {{"image", (dir / "in.txt").string()}};
  m.outputs = {{"image", "out.ppm"}};
  write_manifest((dir / "run.manifest").string(), m);
  const KeyValueConfig back = load_run_config((dir / "run.manifest").string());
  CHECK(back.str() == m.config.str());
  CHECK(read_file((dir / "run.manifest").string()).find(file_digest((dir / "in.txt").string())) != std::string::npos);
  fs::remove_all(dir);
}

TEST_CASE("atomic writes leave no temporary files") {
  const fs::path dir = scratch("atomic");
  write_file_atomic((dir / "a.bin").string(), "one");
  write_file_atomic((dir / "a.bin").string(), "two");
  CHECK(read_file((dir / "a.bin").string()) == "two");
  CHECK(std::distance(fs::directory_iterator(dir), fs::directory_iterator()) == 1);
  fs::remove_all(dir);
}

TEST_CASE("cli: bad flags print usage and exit 2") {
  const Run none = cli("");
  CHECK(none.code == 2);
  const Run bad = cli("inpaint --checkpoint c --image i --mask m --prompt p --out o --no-such-flag");
  CHECK(bad.code == 2);
  CHECK(bad.output.find("--no-such-flag") != std::string::npos);
  CHECK(bad.output.find("Usage") != std::string::npos);
  const Run missing = cli("inpaint --image i");
  CHECK(missing.code == 2);
  CHECK(missing.output.find("--checkpoint") != std::string::npos);
  CHECK(cli("train stage9 --out x").code == 2);
  CHECK(cli("--help").code == 0);
}

TEST_CASE("cli: a missing checkpoint names the path") {
  const fs::path dir = scratch("missing");
  write_ppm((dir / "img.ppm").string(), Image::constant({3, 32, 32}, 0.5));
  write_pgm((dir / "mask.pgm").string(), box_mask(32, Box{8, 8, 16, 16}));
  const std::string missing = (dir / "nowhere.hdpt").string();
  const Run r = cli("inpaint --checkpoint " + missing + " --image " + (dir / "img.ppm").string() + " --mask " +
                    (dir / "mask.pgm").string() + " --prompt 'red circle' --out " + (dir / "o.ppm").string());
  CHECK(r.code != 0);
  CHECK(r.output.find(missing) != std::string::npos);
  CHECK(!fs::exists(dir / "o.ppm"));
  fs::remove_all(dir);
}

TEST_CASE("cli: config errors exit 2 with the offending key") {
  const fs::path dir = scratch("badcfg");
  write_file_atomic((dir / "c.cfg").string(), "eta = 0.1\nwarp = 9\n");
  const Run r = cli("grad-stats --checkpoint x --out y --config " + (dir / "c.cfg").string());
  CHECK(r.code == 2);
  CHECK(r.output.find("warp") != std::string::npos);
  fs::remove_all(dir);
}

TEST_CASE("cli: gen-data is deterministic and writes a manifest") {
  const fs::path a = scratch("gen_a"), b = scratch("gen_b");
  REQUIRE(cli("gen-data --out " + a.string() + " -n 3 --seed 5 --tasks hull").code == 0);
  REQUIRE(cli("gen-data --out " + b.string() + " -n 3 --seed 5 --tasks hull").code == 0);
  for (const auto& e : fs::recursive_directory_iterator(a)) {
    if (!e.is_regular_file() || e.path().filename() == "manifest.txt") continue;
    const fs::path rel = fs::relative(e.path(), a);
    CHECK_MESSAGE(read_file(e.path().string()) == read_file((b / rel).string()), rel.string());
  }
  const auto index = read_index((a / "index.tsv").string());
  CHECK(!index.empty());
  CHECK(parse_run_config(read_file((a / "manifest.txt").string())).get("seed") == "5");
  fs::remove_all(a);
  fs::remove_all(b);
}
