#pragma once

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "json.hpp"
#include "maxsr/image.hpp"
#include "maxsr/model.hpp"

namespace maxsr {

constexpr double kPsnrCap = 100.0;

// Strips `border` pixels from every side, then 10 log10(peak^2 / MSE) over all
// channels. Identical images report kPsnrCap.
double psnr(const FloatImage& a, const FloatImage& b, int64_t border = 0, double peak = 1.0);

// Single-scale SSIM on one channel: 11x11 Gaussian window (sigma 1.5),
// K1 = 0.01, K2 = 0.03, mean over the valid window positions.
double ssim(const FloatImage& a, const FloatImage& b, double dynamic_range = 1.0);

// Image-to-image upscaler on [N,3,h,w] tensors.
using Upscaler = std::function<Tensor(const Tensor&)>;

// Mean of inverse(f(transform(x))) over the eight dihedral transforms.
Tensor self_ensemble(const Upscaler& f, const Tensor& x);

Tensor self_ensemble_forward(ModelState<float>& state, const ModelConfig& config, const Tensor& x);

struct ImageScore {
  std::string name;
  double psnr = 0.0;
  double ssim = 0.0;
};

struct SkippedImage {
  std::string name;
  std::string reason;
};

struct EvalSettings {
  int64_t scale = 2;
  int64_t border = -1;  // < 0 means `scale`
  bool self_ensemble = false;
  std::string attention = "exact";
  std::string dataset;  // label used in the text table

  int64_t effective_border() const { return border < 0 ? scale : border; }
};

struct EvalReport {
  EvalSettings settings;
  std::vector<ImageScore> images;
  std::vector<SkippedImage> skipped;
  double mean_psnr = 0.0;
  double mean_ssim = 0.0;
};

void to_json(nlohmann::json& j, const EvalReport& r);
// Columns in the order dataset, PSNR, SSIM, then one line per image.
std::string format_table(const EvalReport& r);

// One HR image through the protocol: crop to multiples of the scale, bicubic
// downscale, upscale with `f`, clamp and quantize, compare on Y.
ImageScore evaluate_image(const std::string& name, const FloatImage& hr, const Upscaler& f,
                          const EvalSettings& settings);

// Every *.png in `hr_dir`, sorted by file name. Unreadable files are skipped
// with a warning on stderr and listed in the report.
EvalReport evaluate_directory(const std::filesystem::path& hr_dir, const Upscaler& f,
                              const EvalSettings& settings);

EvalReport evaluate_dataset(ModelState<float>& state, const ModelConfig& config,
                            const std::filesystem::path& hr_dir, int64_t scale, int64_t border,
                            bool ensemble);

}  // namespace maxsr
