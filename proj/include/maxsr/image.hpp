#pragma once

// 8-bit RGB images, a planar double view of them, PNG I/O and the
// resampling and colour conversions used by evaluation.

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <vector>

#include "maxsr/tensor.hpp"

namespace maxsr {

class ImageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Interleaved 8-bit samples, row-major.
struct ImageBuffer {
  int64_t width = 0;
  int64_t height = 0;
  int64_t channels = 3;
  std::vector<uint8_t> values;

  uint8_t at(int64_t y, int64_t x, int64_t c) const {
    return values[static_cast<size_t>((y * width + x) * channels + c)];
  }
};

// Planar samples, nominally in [0, 1].
struct FloatImage {
  int64_t channels = 0;
  int64_t height = 0;
  int64_t width = 0;
  std::vector<double> values;

  FloatImage() = default;
  FloatImage(int64_t c, int64_t h, int64_t w, double fill = 0.0)
      : channels(c), height(h), width(w), values(static_cast<size_t>(c * h * w), fill) {}

  double& at(int64_t c, int64_t y, int64_t x) {
    return values[static_cast<size_t>((c * height + y) * width + x)];
  }
  double at(int64_t c, int64_t y, int64_t x) const {
    return values[static_cast<size_t>((c * height + y) * width + x)];
  }
};

// Rejects anything other than 8-bit depth; grey and palette images are
// expanded to RGB and alpha is dropped.
ImageBuffer read_png(const std::filesystem::path& path);
// Atomic: encodes in memory, then renames a temporary file into place.
void write_png(const std::filesystem::path& path, const ImageBuffer& image);

// value / 255
FloatImage to_float(const ImageBuffer& image);
// Clamps to [0, 1] and rounds value * 255 to the nearest integer, ties to even.
ImageBuffer quantize(const FloatImage& image);
// quantize followed by to_float
FloatImage quantize_float(const FloatImage& image);

// Keeps the top-left h x w region.
FloatImage crop(const FloatImage& image, int64_t h, int64_t w);

// Cubic convolution (a = -0.5) in the Matlab imresize convention: output
// sample x maps to input coordinate (x + 0.5) / s - 0.5. When downscaling with
// `antialias` the kernel is stretched by 1/s. Weights are renormalized and
// out-of-range taps are clamped to the border.
FloatImage bicubic_resize(const FloatImage& image, int64_t out_h, int64_t out_w, bool antialias = true);

double cubic_kernel(double x);

// BT.601 studio swing luma: 16/255 + (65.481 R + 128.553 G + 24.966 B) / 255.
FloatImage rgb_to_y(const FloatImage& rgb);

// [1,C,H,W] tensors and back.
Tensor to_tensor(const FloatImage& image);
FloatImage from_tensor(const Tensor& x, int64_t batch_index = 0);

}  // namespace maxsr
