#include <sys/wait.h>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "doctest.h"
#include "json.hpp"
#include "maxsr/image.hpp"
#include "maxsr/model.hpp"

using namespace maxsr;
namespace fs = std::filesystem;

namespace {

const fs::path kRoot = fs::temp_directory_path() / "maxsr_cli_tests";

int run(const std::string& args, const std::string& out = "/dev/null", const std::string& err = "/dev/null") {
  const std::string cmd = std::string(MAXSR_CLI_PATH) + " " + args + " >" + out + " 2>" + err;
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void random_png(const fs::path& p, int64_t h, int64_t w, uint64_t seed) {
  std::mt19937_64 rng(seed);
  ImageBuffer im;
  im.height = h;
  im.width = w;
  im.values.resize(static_cast<size_t>(h * w * 3));
  // smooth-ish content so training has something to learn
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x)
      for (int64_t c = 0; c < 3; ++c)
        im.values[static_cast<size_t>((y * w + x) * 3 + c)] =
            static_cast<uint8_t>(128 + 100 * std::sin(0.3 * x + 0.2 * y + c + static_cast<double>(rng() % 7)));
  write_png(p, im);
}

// Shared fixture: a tiny checkpoint produced through the CLI itself.
struct Fixture {
  fs::path dir, data, ckpt, config;
  Fixture() {
    dir = kRoot;
    fs::remove_all(dir);
    data = dir / "data";
    fs::create_directories(data);
    for (int i = 0; i < 2; ++i) random_png(data / ("t" + std::to_string(i) + ".png"), 32, 40, i);
    config = dir / "toy.json";
    std::ofstream(config) << R"({"model": {"width": 8}, "train": {"total_iters": 3, "batch": 1, "patch_lr": 8}})";
    ckpt = dir / "toy.ckpt";
    REQUIRE(run("train-toy --config " + config.string() + " --data-dir " + data.string() + " --out-checkpoint " +
                ckpt.string()) == 0);
  }
};

Fixture& fixture() {
  static Fixture f;
  return f;
}

}  // namespace

TEST_CASE("cli: help and argument errors") {
  CHECK(run("--help") == 0);
  CHECK(run("") == 1);
  CHECK(run("no-such-command") == 1);
  CHECK(run("upscale --input missing.png") == 1);
}

TEST_CASE("cli: upscale") {
  auto& f = fixture();
  const auto in = f.dir / "in.png";
  random_png(in, 24, 36, 9);
  const auto a = f.dir / "a.png", b = f.dir / "b.png";
  REQUIRE(run("upscale --checkpoint " + f.ckpt.string() + " --input " + in.string() + " --output " + a.string()) == 0);
  REQUIRE(run("upscale --checkpoint " + f.ckpt.string() + " --input " + in.string() + " --output " + b.string()) == 0);
  const auto img = read_png(a);
  CHECK(img.height == 48);
  CHECK(img.width == 72);
  CHECK(slurp(a) == slurp(b));

  const auto big = f.dir / "big.png";
  random_png(big, 64, 64, 10);
  const auto e = f.dir / "e.png", x = f.dir / "x.png";
  REQUIRE(run("upscale --checkpoint " + f.ckpt.string() + " --input " + big.string() + " --output " + e.string() +
              " --attention exact") == 0);
  REQUIRE(run("upscale --checkpoint " + f.ckpt.string() + " --input " + big.string() + " --output " + x.string() +
              " --attention fixed:8") == 0);
  CHECK(slurp(e) == slurp(x));

  const auto s = f.dir / "s.png";
  REQUIRE(run("upscale --self-ensemble --checkpoint " + f.ckpt.string() + " --input " + in.string() + " --output " +
              s.string()) == 0);
  CHECK(read_png(s).width == 72);

  // failures leave no output behind
  const auto junk = f.dir / "junk.png";
  std::ofstream(junk) << "nope";
  const auto none = f.dir / "none.png";
  CHECK(run("upscale --checkpoint " + f.ckpt.string() + " --input " + junk.string() + " --output " + none.string()) == 1);
  CHECK_FALSE(fs::exists(none));
  CHECK(run("upscale --checkpoint " + junk.string() + " --input " + in.string() + " --output " + none.string()) == 1);
  CHECK_FALSE(fs::exists(none));
  CHECK(run("upscale --checkpoint " + f.ckpt.string() + " --input " + in.string() + " --output " + none.string() +
            " --attention global") == 1);
}

TEST_CASE("cli: eval") {
  auto& f = fixture();
  const auto p1 = f.dir / "r1", p2 = f.dir / "r2";
  REQUIRE(run("eval --checkpoint " + f.ckpt.string() + " --hr-dir " + f.data.string() + " --scale 2 --report " +
              p1.string()) == 0);
  REQUIRE(run("eval --checkpoint " + f.ckpt.string() + " --hr-dir " + f.data.string() + " --scale 2 --report " +
              p2.string()) == 0);
  const auto j1 = nlohmann::json::parse(slurp(p1.string() + ".json"));
  const auto j2 = nlohmann::json::parse(slurp(p2.string() + ".json"));
  CHECK(j1 == j2);
  REQUIRE(j1["images"].size() == 2);
  const double mean = (j1["images"][0]["psnr"].get<double>() + j1["images"][1]["psnr"].get<double>()) / 2;
  CHECK(j1["mean_psnr"].get<double>() == doctest::Approx(mean).epsilon(1e-12));
  CHECK(slurp(p1.string() + ".txt").find("PSNR") != std::string::npos);
  CHECK(run("eval --checkpoint " + f.ckpt.string() + " --hr-dir " + f.data.string() + " --scale 3 --report " +
            (f.dir / "r3").string()) == 1);
}

TEST_CASE("cli: train-toy") {
  auto& f = fixture();
  const auto zero = f.dir / "zero.json";
  std::ofstream(zero) << R"({"model": {"width": 8}, "train": {"total_iters": 0, "milestones": []}})";
  const auto z = f.dir / "zero.ckpt";
  REQUIRE(run("train-toy --config " + zero.string() + " --data-dir " + f.data.string() + " --out-checkpoint " +
              z.string()) == 0);
  const auto loaded = load_checkpoint(z);
  CHECK(loaded.config.width == 8);
  auto fresh = build_model<float>(loaded.config, 0);
  const auto a = named_tensors(loaded.state), b = named_tensors(fresh);
  REQUIRE(a.size() == b.size());
  bool same = true;
  for (size_t i = 0; i < a.size(); ++i) same = same && std::ranges::equal(a[i].tensor.data(), b[i].tensor.data());
  CHECK(same);

  const auto c2 = f.dir / "again.ckpt";
  REQUIRE(run("train-toy --config " + f.config.string() + " --data-dir " + f.data.string() + " --out-checkpoint " +
              c2.string()) == 0);
  const auto csv = slurp(f.ckpt.string() + ".loss.csv");
  CHECK(csv == slurp(c2.string() + ".loss.csv"));
  CHECK(csv.rfind("iteration,loss,lr\n", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 4);
  CHECK(slurp(f.ckpt) == slurp(c2));

  const auto bad = f.dir / "bad.json";
  std::ofstream(bad) << R"({"model": {"width": 8, "colour": 1}})";
  CHECK(run("train-toy --config " + bad.string() + " --data-dir " + f.data.string() + " --out-checkpoint " +
            (f.dir / "bad.ckpt").string()) == 1);
  std::ofstream(bad) << R"({"optimizer": {}})";
  CHECK(run("train-toy --config " + bad.string() + " --data-dir " + f.data.string() + " --out-checkpoint " +
            (f.dir / "bad.ckpt").string()) == 1);
  CHECK_FALSE(fs::exists(f.dir / "bad.ckpt"));
}

TEST_CASE("cli: gradcheck") {
  fs::create_directories(kRoot);
  const auto out = kRoot / "gc.csv";
  CHECK(run("gradcheck --seed 1", out.string()) == 0);
  const auto report = slurp(out);
  CHECK(report.rfind("case,checked,max_rel_error,status\n", 0) == 0);
  CHECK(report.find("conv2d") != std::string::npos);
  CHECK(report.find("network[train]") != std::string::npos);
  CHECK(report.find("FAIL") == std::string::npos);
  CHECK(run("gradcheck --corrupt-analytic", out.string()) == 1);
  CHECK(slurp(out).find("FAIL") != std::string::npos);
}

TEST_CASE("cli: bench-attention") {
  fs::create_directories(kRoot);
  const auto out = kRoot / "bench.csv", err = kRoot / "bench.err";
  auto slope = [&] {
    const auto e = slurp(err);
    const auto pos = e.find("slope of cost vs H*W: ");
    REQUIRE(pos != std::string::npos);
    return std::stod(e.substr(pos + 22));
  };
  REQUIRE(run("bench-attention --sizes 16,32,64,128,256 --mode adaptive", out.string(), err.string()) == 0);
  const auto csv = slurp(out);
  CHECK(csv.rfind("size,cost,wall_ms\n", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 6);
  CHECK(slope() >= 1.35);
  CHECK(slope() <= 1.65);
  REQUIRE(run("bench-attention --sizes 16,32,64,128,256 --mode global", out.string(), err.string()) == 0);
  CHECK(slope() >= 1.9);
  CHECK(slope() <= 2.1);
  CHECK(slurp(out).find("\n256,4294967296,") != std::string::npos);
  CHECK(run("bench-attention --sizes 8,12 --mode fixed:4", out.string(), err.string()) == 0);
  CHECK(run("bench-attention --sizes 0,4", out.string(), err.string()) == 1);
  CHECK(run("bench-attention --mode sparse", out.string(), err.string()) == 1);
}
