#include <png.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>

#include "doctest.h"
#include "helpers.hpp"
#include "oracles.hpp"
#include "maxsr/dihedral.hpp"
#include "maxsr/eval.hpp"

using namespace maxsr;
using namespace oracle;

namespace {

FloatImage random_image(int64_t c, int64_t h, int64_t w, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> d(0, 1);
  FloatImage im(c, h, w);
  for (auto& v : im.values) v = d(rng);
  return im;
}

std::filesystem::path temp_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "maxsr_tests" / name;
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

void write_png16(const std::filesystem::path& path) {
  std::FILE* f = std::fopen(path.c_str(), "wb");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  png_init_io(png, f);
  png_set_IHDR(png, info, 2, 2, 16, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  std::vector<png_byte> row(2 * 3 * 2, 0x80);
  png_write_row(png, row.data());
  png_write_row(png, row.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(f);
}

}  // namespace

TEST_CASE("bicubic resize") {
  std::mt19937_64 rng(71);
  auto im = random_image(3, 7, 9, rng);
  auto same = bicubic_resize(im, 7, 9);
  for (size_t i = 0; i < im.values.size(); ++i) CHECK(std::abs(same.values[i] - im.values[i]) < 1e-9);

  FloatImage flat(3, 10, 6, 0.37);
  for (auto [h, w] : {std::pair<int64_t, int64_t>{5, 3}, {23, 13}, {4, 17}})
    for (double v : bicubic_resize(flat, h, w).values) CHECK(std::abs(v - 0.37) < 1e-12);

  FloatImage ramp(1, 4, 4);
  for (int64_t y = 0; y < 4; ++y)
    for (int64_t x = 0; x < 4; ++x) ramp.at(0, y, x) = (y * 4 + x) / 15.0;
  auto down = bicubic_resize(ramp, 2, 2, true);
  for (int64_t y = 0; y < 2; ++y)
    for (int64_t x = 0; x < 2; ++x) CHECK(std::abs(down.at(0, y, x) - direct_bicubic(ramp, 0, y, x, 0.5, 0.5)) < 1e-6);

  auto odd = random_image(2, 11, 8, rng);
  auto mixed = bicubic_resize(odd, 4, 19, true);
  double worst = 0;
  for (int64_t c = 0; c < 2; ++c)
    for (int64_t y = 0; y < 4; ++y)
      for (int64_t x = 0; x < 19; ++x) worst = std::max(worst, std::abs(mixed.at(c, y, x) - direct_bicubic(odd, c, y, x, 4.0 / 11, 19.0 / 8)));
  CHECK(worst < 1e-12);
  CHECK_THROWS(bicubic_resize(odd, 0, 3));
}

TEST_CASE("luma conversion") {
  FloatImage px(3, 1, 4);
  const double rgb[4][3] = {{1, 1, 1}, {0, 0, 0}, {0, 1, 0}, {1, 0, 0}};
  for (int i = 0; i < 4; ++i)
    for (int c = 0; c < 3; ++c) px.at(c, 0, i) = rgb[i][c];
  auto y = rgb_to_y(px);
  CHECK(y.at(0, 0, 0) == doctest::Approx(235.0 / 255).epsilon(1e-12));
  CHECK(y.at(0, 0, 1) == doctest::Approx(16.0 / 255).epsilon(1e-12));
  CHECK(y.at(0, 0, 2) > y.at(0, 0, 3));
}

TEST_CASE("psnr") {
  std::mt19937_64 rng(72);
  auto a = random_image(1, 16, 16, rng);
  CHECK(psnr(a, a) == kPsnrCap);
  FloatImage lo(1, 8, 8, 0.2), hi(1, 8, 8, 0.2 + 1.0 / 255);
  CHECK(std::abs(psnr(lo, hi) - 48.1308) < 1e-3);
  CHECK(std::abs(psnr(lo, hi) - 20 * std::log10(255.0)) < 1e-9);
  auto framed = a;
  for (int64_t i = 0; i < 16; ++i)
    for (int64_t k = 0; k < 2; ++k) {
      framed.at(0, k, i) = framed.at(0, 15 - k, i) = framed.at(0, i, k) = framed.at(0, i, 15 - k) = 1.0 - a.at(0, i, k);
    }
  CHECK(psnr(a, framed, 4) == kPsnrCap);
  CHECK(psnr(a, framed, 0) < kPsnrCap);
  CHECK_THROWS(psnr(a, a, 8));
  for (int k = 0; k < 20; ++k) {
    auto x = random_image(1, 32, 32, rng), y = random_image(1, 32, 32, rng);
    CHECK(std::abs(psnr(x, y, 2) - brute_psnr(x, y, 2)) < 1e-6);
  }
}

TEST_CASE("ssim") {
  std::mt19937_64 rng(73);
  auto a = random_image(1, 32, 32, rng);
  CHECK(ssim(a, a) == 1.0);
  FloatImage bin(1, 20, 24), inv(1, 20, 24);
  std::bernoulli_distribution coin(0.5);
  for (size_t i = 0; i < bin.values.size(); ++i) {
    bin.values[i] = coin(rng);
    inv.values[i] = 1 - bin.values[i];
  }
  CHECK(std::abs(ssim(bin, inv) - brute_ssim(bin, inv)) < 1e-8);
  for (int k = 0; k < 20; ++k) {
    auto x = random_image(1, 32, 32, rng), y = random_image(1, 32, 32, rng);
    const double s = ssim(x, y);
    CHECK(std::abs(s - brute_ssim(x, y)) < 1e-8);
    CHECK(std::abs(s - ssim(y, x)) < 1e-12);
    CHECK(s >= -1.0);
    CHECK(s <= 1.0);
  }
  CHECK_THROWS(ssim(FloatImage(1, 10, 12), FloatImage(1, 10, 12)));
  CHECK_THROWS(ssim(FloatImage(3, 12, 12), FloatImage(3, 12, 12)));
}

TEST_CASE("quantization") {
  std::mt19937_64 rng(74);
  auto im = random_image(3, 5, 5, rng);
  im.values[0] = -0.3;
  im.values[1] = 1.7;
  auto q = quantize_float(im);
  CHECK(q.values[0] == 0.0);
  CHECK(q.values[1] == 1.0);
  CHECK(quantize_float(q).values == q.values);
  auto buf = quantize(q);
  auto back = to_float(buf);
  for (size_t i = 0; i < back.values.size(); ++i) CHECK(back.values[i] == q.values[i]);
  FloatImage ties(1, 1, 2);
  ties.values = {2.5 / 255.0, 3.5 / 255.0};
  REQUIRE(ties.values[0] * 255.0 == 2.5);
  REQUIRE(ties.values[1] * 255.0 == 3.5);
  auto t = quantize(ties);
  CHECK(t.values[0] == 2);
  CHECK(t.values[1] == 4);
}

TEST_CASE("png io") {
  auto dir = temp_dir("png");
  std::mt19937_64 rng(75);
  ImageBuffer im;
  im.width = 7;
  im.height = 5;
  im.values.resize(7 * 5 * 3);
  for (auto& v : im.values) v = static_cast<uint8_t>(rng() & 0xff);
  write_png(dir / "a.png", im);
  auto r = read_png(dir / "a.png");
  CHECK(r.width == 7);
  CHECK(r.height == 5);
  CHECK(r.values == im.values);
  write_png16(dir / "deep.png");
  CHECK_THROWS_WITH_AS(read_png(dir / "deep.png"), doctest::Contains("16-bit"), ImageError);
  std::ofstream(dir / "junk.png") << "not a png";
  CHECK_THROWS_AS(read_png(dir / "junk.png"), ImageError);
  CHECK_THROWS_AS(read_png(dir / "missing.png"), ImageError);
}

TEST_CASE("self-ensemble") {
  std::mt19937_64 rng(76);
  auto lr = random_image(3, 6, 9, rng);
  Upscaler bicubic = [](const Tensor& x) {
    return to_tensor(bicubic_resize(from_tensor(x), x.dim(2) * 2, x.dim(3) * 2, false));
  };
  auto x = to_tensor(lr);
  auto single = bicubic(x), ens = self_ensemble(bicubic, x);
  CHECK(ens.shape() == single.shape());
  double worst = 0;
  for (size_t i = 0; i < single.data().size(); ++i) worst = std::max(worst, static_cast<double>(std::abs(single.data()[i] - ens.data()[i])));
  CHECK(worst < 1e-6);

  Upscaler constant = [](const Tensor& t) { return Tensor::full(Shape{1, 3, t.dim(2) * 2, t.dim(3) * 2}, 0.3f); };
  for (float v : testutil::values(self_ensemble(constant, x))) CHECK(v == doctest::Approx(0.3f));

  // a non-equivariant map is changed by the ensemble
  Upscaler skew = [](const Tensor& t) {
    auto up = to_tensor(bicubic_resize(from_tensor(t), t.dim(2) * 2, t.dim(3) * 2, false));
    for (int64_t i = 0; i < up.numel(); ++i) up.mutable_data()[static_cast<size_t>(i)] += 0.01f * static_cast<float>(i % 7);
    return up;
  };
  CHECK(testutil::values(self_ensemble(skew, x)) != testutil::values(skew(x)));
}

TEST_CASE("dataset evaluation") {
  auto dir = temp_dir("hr");
  std::mt19937_64 rng(77);
  std::vector<FloatImage> hrs;
  for (int i = 0; i < 3; ++i) {
    auto im = quantize_float(random_image(3, 25 + i, 30, rng));
    hrs.push_back(im);
    write_png(dir / ("img" + std::to_string(i) + ".png"), quantize(im));
  }
  std::ofstream(dir / "broken.png") << "truncated";
  std::ofstream(dir / "notes.txt") << "ignored";

  EvalSettings s;
  s.scale = 2;
  Upscaler bicubic = [](const Tensor& x) {
    return to_tensor(bicubic_resize(from_tensor(x), x.dim(2) * 2, x.dim(3) * 2, false));
  };
  auto r1 = evaluate_directory(dir, bicubic, s);
  auto r2 = evaluate_directory(dir, bicubic, s);
  REQUIRE(r1.images.size() == 3);
  REQUIRE(r1.skipped.size() == 1);
  CHECK(r1.skipped[0].name == "broken.png");
  double mp = 0, ms = 0;
  for (size_t i = 0; i < 3; ++i) {
    CHECK(std::isfinite(r1.images[i].psnr));
    CHECK(r1.images[i].psnr == r2.images[i].psnr);
    CHECK(r1.images[i].ssim == r2.images[i].ssim);
    mp += r1.images[i].psnr;
    ms += r1.images[i].ssim;
  }
  CHECK(r1.mean_psnr == doctest::Approx(mp / 3).epsilon(1e-15));
  CHECK(r1.mean_ssim == doctest::Approx(ms / 3).epsilon(1e-15));
  CHECK(r1.images[0].name == "img0.png");
  nlohmann::json j = r1;
  CHECK(j["images"].size() == 3);
  CHECK(j["settings"]["border"] == 2);
  CHECK(format_table(r1).find("PSNR") != std::string::npos);

  // an oracle upscaler that returns the (cropped) ground truth scores at the cap
  const auto& hr = hrs[1];  // 26 x 30, already divisible by 2
  Upscaler oracle = [&](const Tensor&) { return to_tensor(hr); };
  auto sc = evaluate_image("oracle", hr, oracle, s);
  CHECK(sc.psnr == kPsnrCap);
  CHECK(sc.ssim == 1.0);

  // the HR remainder beyond the divisible region is never read
  auto odd = hrs[0];  // 25 rows
  auto tampered = odd;
  for (int64_t c = 0; c < 3; ++c)
    for (int64_t x = 0; x < 30; ++x) tampered.at(c, 24, x) = 1.0 - tampered.at(c, 24, x);
  auto a = evaluate_image("a", odd, bicubic, s), b = evaluate_image("b", tampered, bicubic, s);
  CHECK(a.psnr == b.psnr);
  CHECK(a.ssim == b.ssim);
}
