#include "maxsr/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <cstring>
#include <memory>
#include <string>

#include "maxsr/fileio.hpp"

namespace maxsr {

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};

[[noreturn]] void png_fail(png_structp png, png_const_charp msg) {
  auto* buf = static_cast<std::string*>(png_get_error_ptr(png));
  if (buf) *buf = msg;
  png_longjmp(png, 1);
}

void png_warn(png_structp, png_const_charp) {}

}  // namespace

ImageBuffer read_png(const std::filesystem::path& path) {
  std::unique_ptr<std::FILE, FileCloser> file(std::fopen(path.c_str(), "rb"));
  if (!file) throw ImageError("cannot open " + path.string());
  png_byte sig[8];
  if (std::fread(sig, 1, 8, file.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0) {
    throw ImageError(path.string() + " is not a PNG file");
  }
  std::string error;
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &error, png_fail, png_warn);
  if (!png) throw ImageError("libpng initialisation failed");
  png_infop info = png_create_info_struct(png);
  ImageBuffer out;
  std::vector<png_bytep> rows;
  volatile bool bad_depth = false;
  volatile int depth_seen = 0;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw ImageError("cannot decode " + path.string() + ": " + error);
  }
  png_init_io(png, file.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  const int depth = png_get_bit_depth(png, info);
  const int color = png_get_color_type(png, info);
  if (depth == 16) {
    bad_depth = true;
    depth_seen = depth;
  } else {
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
    if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) png_set_gray_to_rgb(png);
    png_set_strip_alpha(png);
    png_read_update_info(png, info);
    out.width = png_get_image_width(png, info);
    out.height = png_get_image_height(png, info);
    out.channels = 3;
    if (png_get_rowbytes(png, info) != static_cast<size_t>(out.width * 3)) {
      png_error(png, "unexpected row layout after conversion");
    }
    out.values.resize(static_cast<size_t>(out.width * out.height * 3));
    rows.resize(static_cast<size_t>(out.height));
    for (int64_t y = 0; y < out.height; ++y) rows[static_cast<size_t>(y)] = out.values.data() + y * out.width * 3;
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
  }
  png_destroy_read_struct(&png, &info, nullptr);
  if (bad_depth) {
    throw ImageError(path.string() + ": " + std::to_string(static_cast<int>(depth_seen)) +
                     "-bit PNG is not supported, convert to 8-bit first");
  }
  return out;
}

namespace {

void append_bytes(png_structp png, png_bytep data, png_size_t n) {
  auto* out = static_cast<std::string*>(png_get_io_ptr(png));
  out->append(reinterpret_cast<const char*>(data), n);
}

void flush_noop(png_structp) {}

}  // namespace

void write_png(const std::filesystem::path& path, const ImageBuffer& image) {
  if (image.channels != 3 || image.width < 1 || image.height < 1 ||
      image.values.size() != static_cast<size_t>(image.width * image.height * 3)) {
    throw ImageError("write_png: malformed image buffer");
  }
  std::string error;
  std::string encoded;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &error, png_fail, png_warn);
  if (!png) throw ImageError("libpng initialisation failed");
  png_infop info = png_create_info_struct(png);
  std::vector<png_bytep> rows(static_cast<size_t>(image.height));
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw ImageError("cannot encode " + path.string() + ": " + error);
  }
  png_set_write_fn(png, &encoded, append_bytes, flush_noop);
  png_set_IHDR(png, info, static_cast<png_uint_32>(image.width), static_cast<png_uint_32>(image.height), 8,
               PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int64_t y = 0; y < image.height; ++y) {
    rows[static_cast<size_t>(y)] = const_cast<png_bytep>(image.values.data() + y * image.width * 3);
  }
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  write_file_atomic(path, encoded);
}

FloatImage to_float(const ImageBuffer& image) {
  FloatImage out(image.channels, image.height, image.width);
  for (int64_t c = 0; c < image.channels; ++c)
    for (int64_t y = 0; y < image.height; ++y)
      for (int64_t x = 0; x < image.width; ++x) out.at(c, y, x) = image.at(y, x, c) / 255.0;
  return out;
}

ImageBuffer quantize(const FloatImage& image) {
  ImageBuffer out;
  out.width = image.width;
  out.height = image.height;
  out.channels = image.channels;
  out.values.resize(image.values.size());
  for (int64_t c = 0; c < image.channels; ++c)
    for (int64_t y = 0; y < image.height; ++y)
      for (int64_t x = 0; x < image.width; ++x) {
        const double v = std::clamp(image.at(c, y, x), 0.0, 1.0) * 255.0;
        // nearbyint honours the default round-half-to-even mode
        out.values[static_cast<size_t>((y * image.width + x) * image.channels + c)] =
            static_cast<uint8_t>(std::nearbyint(v));
      }
  return out;
}

FloatImage quantize_float(const FloatImage& image) { return to_float(quantize(image)); }

FloatImage crop(const FloatImage& image, int64_t h, int64_t w) {
  if (h < 1 || w < 1 || h > image.height || w > image.width) {
    throw std::invalid_argument("crop " + std::to_string(h) + "x" + std::to_string(w) + " out of range");
  }
  FloatImage out(image.channels, h, w);
  for (int64_t c = 0; c < image.channels; ++c)
    for (int64_t y = 0; y < h; ++y)
      for (int64_t x = 0; x < w; ++x) out.at(c, y, x) = image.at(c, y, x);
  return out;
}

double cubic_kernel(double x) {
  const double a = -0.5;
  const double t = std::abs(x);
  if (t <= 1.0) return ((a + 2.0) * t - (a + 3.0)) * t * t + 1.0;
  if (t < 2.0) return ((a * t - 5.0 * a) * t + 8.0 * a) * t - 4.0 * a;
  return 0.0;
}

namespace {

struct Taps {
  int64_t width = 0;  // taps per output sample
  std::vector<int64_t> index;
  std::vector<double> weight;
};

Taps resize_taps(int64_t in, int64_t out, bool antialias) {
  const double s = static_cast<double>(out) / static_cast<double>(in);
  const bool stretch = antialias && s < 1.0;
  const double support = stretch ? 2.0 / s : 2.0;
  Taps t;
  t.width = static_cast<int64_t>(std::ceil(2.0 * support)) + 2;
  t.index.resize(static_cast<size_t>(out * t.width));
  t.weight.resize(t.index.size());
  for (int64_t o = 0; o < out; ++o) {
    const double u = (static_cast<double>(o) + 0.5) / s - 0.5;
    const auto left = static_cast<int64_t>(std::floor(u - support));
    double total = 0.0;
    for (int64_t k = 0; k < t.width; ++k) {
      const int64_t src = left + k;
      const double d = u - static_cast<double>(src);
      const double wgt = stretch ? s * cubic_kernel(s * d) : cubic_kernel(d);
      t.index[static_cast<size_t>(o * t.width + k)] = std::clamp<int64_t>(src, 0, in - 1);
      t.weight[static_cast<size_t>(o * t.width + k)] = wgt;
      total += wgt;
    }
    for (int64_t k = 0; k < t.width; ++k) t.weight[static_cast<size_t>(o * t.width + k)] /= total;
  }
  return t;
}

}  // namespace

FloatImage bicubic_resize(const FloatImage& image, int64_t out_h, int64_t out_w, bool antialias) {
  if (out_h < 1 || out_w < 1 || image.height < 1 || image.width < 1) {
    throw std::invalid_argument("bicubic_resize needs positive extents");
  }
  // Vertical pass, then horizontal.
  const Taps ty = resize_taps(image.height, out_h, antialias);
  FloatImage mid(image.channels, out_h, image.width);
  for (int64_t c = 0; c < image.channels; ++c)
    for (int64_t y = 0; y < out_h; ++y)
      for (int64_t x = 0; x < image.width; ++x) {
        double acc = 0.0;
        for (int64_t k = 0; k < ty.width; ++k) {
          const auto i = static_cast<size_t>(y * ty.width + k);
          acc += ty.weight[i] * image.at(c, ty.index[i], x);
        }
        mid.at(c, y, x) = acc;
      }
  const Taps tx = resize_taps(image.width, out_w, antialias);
  FloatImage out(image.channels, out_h, out_w);
  for (int64_t c = 0; c < image.channels; ++c)
    for (int64_t y = 0; y < out_h; ++y)
      for (int64_t x = 0; x < out_w; ++x) {
        double acc = 0.0;
        for (int64_t k = 0; k < tx.width; ++k) {
          const auto i = static_cast<size_t>(x * tx.width + k);
          acc += tx.weight[i] * mid.at(c, y, tx.index[i]);
        }
        out.at(c, y, x) = acc;
      }
  return out;
}

FloatImage rgb_to_y(const FloatImage& rgb) {
  if (rgb.channels != 3) throw std::invalid_argument("rgb_to_y needs 3 channels");
  FloatImage y(1, rgb.height, rgb.width);
  for (int64_t i = 0; i < rgb.height; ++i)
    for (int64_t j = 0; j < rgb.width; ++j) {
      y.at(0, i, j) = 16.0 / 255.0 + (65.481 * rgb.at(0, i, j) + 128.553 * rgb.at(1, i, j) +
                                      24.966 * rgb.at(2, i, j)) / 255.0;
    }
  return y;
}

Tensor to_tensor(const FloatImage& image) {
  std::vector<float> v(image.values.begin(), image.values.end());
  return Tensor(Shape{1, image.channels, image.height, image.width}, std::move(v));
}

FloatImage from_tensor(const Tensor& x, int64_t batch_index) {
  if (x.rank() != 4 || batch_index < 0 || batch_index >= x.dim(0)) {
    throw ShapeError("from_tensor: expected [N,C,H,W] with a valid batch index, got " + x.shape().str());
  }
  FloatImage out(x.dim(1), x.dim(2), x.dim(3));
  const auto per = static_cast<size_t>(x.dim(1) * x.dim(2) * x.dim(3));
  const auto src = x.data().subspan(static_cast<size_t>(batch_index) * per, per);
  std::copy(src.begin(), src.end(), out.values.begin());
  return out;
}

}  // namespace maxsr
