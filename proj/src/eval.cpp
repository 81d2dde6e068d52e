#include "maxsr/eval.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "maxsr/dihedral.hpp"
#include "maxsr/ops.hpp"

namespace maxsr {

namespace {

void require_same_dims(const FloatImage& a, const FloatImage& b, const char* what) {
  if (a.channels != b.channels || a.height != b.height || a.width != b.width) {
    throw std::invalid_argument(std::string(what) + ": image dimensions differ");
  }
}

}  // namespace

double psnr(const FloatImage& a, const FloatImage& b, int64_t border, double peak) {
  require_same_dims(a, b, "psnr");
  if (border < 0 || a.height <= 2 * border || a.width <= 2 * border) {
    throw std::invalid_argument("psnr: image " + std::to_string(a.height) + "x" + std::to_string(a.width) +
                                " too small for border " + std::to_string(border));
  }
  double se = 0.0;
  int64_t n = 0;
  for (int64_t c = 0; c < a.channels; ++c)
    for (int64_t y = border; y < a.height - border; ++y)
      for (int64_t x = border; x < a.width - border; ++x) {
        const double d = a.at(c, y, x) - b.at(c, y, x);
        se += d * d;
        ++n;
      }
  const double mse = se / static_cast<double>(n);
  if (mse == 0.0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(peak * peak / mse));
}

double ssim(const FloatImage& a, const FloatImage& b, double dynamic_range) {
  require_same_dims(a, b, "ssim");
  constexpr int kWin = 11;
  if (a.channels != 1) throw std::invalid_argument("ssim expects a single channel");
  if (a.height < kWin || a.width < kWin) throw std::invalid_argument("ssim needs at least 11x11 pixels");

  std::array<double, kWin * kWin> g{};
  double total = 0.0;
  for (int i = 0; i < kWin; ++i)
    for (int j = 0; j < kWin; ++j) {
      const double dy = i - kWin / 2, dx = j - kWin / 2;
      g[static_cast<size_t>(i * kWin + j)] = std::exp(-(dy * dy + dx * dx) / (2.0 * 1.5 * 1.5));
      total += g[static_cast<size_t>(i * kWin + j)];
    }
  for (auto& v : g) v /= total;

  const double c1 = (0.01 * dynamic_range) * (0.01 * dynamic_range);
  const double c2 = (0.03 * dynamic_range) * (0.03 * dynamic_range);
  double acc = 0.0;
  int64_t n = 0;
  for (int64_t y = 0; y + kWin <= a.height; ++y)
    for (int64_t x = 0; x + kWin <= a.width; ++x) {
      double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
      for (int i = 0; i < kWin; ++i)
        for (int j = 0; j < kWin; ++j) {
          const double w = g[static_cast<size_t>(i * kWin + j)];
          const double va = a.at(0, y + i, x + j), vb = b.at(0, y + i, x + j);
          ma += w * va;
          mb += w * vb;
          saa += w * (va * va);
          sbb += w * (vb * vb);
          sab += w * (va * vb);
        }
      const double var_a = saa - ma * ma;
      const double var_b = sbb - mb * mb;
      const double cov = sab - ma * mb;
      // written so that swapping a and b, or a == b, is exact
      acc += ((2.0 * (ma * mb) + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (var_a + var_b + c2));
      ++n;
    }
  return acc / static_cast<double>(n);
}

Tensor self_ensemble(const Upscaler& f, const Tensor& x) {
  if (x.rank() != 4) throw ShapeError("self_ensemble expects [N,C,H,W], got " + x.shape().str());
  std::vector<double> acc;
  Shape out_shape;
  for (int code = 0; code < kDihedralCodes; ++code) {
    const Tensor y = apply_dihedral(f(apply_dihedral(x, code)), inverse_dihedral_code(code));
    if (code == 0) {
      out_shape = y.shape();
      acc.assign(static_cast<size_t>(y.numel()), 0.0);
    } else if (y.shape() != out_shape) {
      throw ShapeError("self_ensemble: transformed output " + y.shape().str() + " vs " + out_shape.str());
    }
    for (size_t i = 0; i < acc.size(); ++i) acc[i] += y.data()[i];
  }
  std::vector<float> mean(acc.size());
  for (size_t i = 0; i < acc.size(); ++i) mean[i] = static_cast<float>(acc[i] / kDihedralCodes);
  return Tensor(out_shape, std::move(mean));
}

Tensor self_ensemble_forward(ModelState<float>& state, const ModelConfig& config, const Tensor& x) {
  NoGradGuard no_grad;
  return self_ensemble([&](const Tensor& t) { return forward(state, config, t, false); }, x);
}

void to_json(nlohmann::json& j, const EvalReport& r) {
  j = nlohmann::json::object();
  j["settings"] = {{"scale", r.settings.scale},
                   {"border", r.settings.effective_border()},
                   {"self_ensemble", r.settings.self_ensemble},
                   {"attention", r.settings.attention},
                   {"dataset", r.settings.dataset}};
  auto& images = j["images"] = nlohmann::json::array();
  for (const auto& s : r.images) images.push_back({{"name", s.name}, {"psnr", s.psnr}, {"ssim", s.ssim}});
  auto& skipped = j["skipped"] = nlohmann::json::array();
  for (const auto& s : r.skipped) skipped.push_back({{"name", s.name}, {"reason", s.reason}});
  j["mean_psnr"] = r.mean_psnr;
  j["mean_ssim"] = r.mean_ssim;
}

std::string format_table(const EvalReport& r) {
  std::ostringstream os;
  os << std::fixed;
  const std::string label = r.settings.dataset.empty() ? "dataset" : r.settings.dataset;
  os << "# x" << r.settings.scale << " border=" << r.settings.effective_border()
     << " self_ensemble=" << (r.settings.self_ensemble ? "on" : "off") << " attention=" << r.settings.attention
     << "\n";
  os << std::left << std::setw(24) << "dataset" << std::right << std::setw(10) << "PSNR" << std::setw(10)
     << "SSIM" << "\n";
  os << std::left << std::setw(24) << label << std::right << std::setprecision(2) << std::setw(10)
     << r.mean_psnr << std::setprecision(4) << std::setw(10) << r.mean_ssim << "\n";
  for (const auto& s : r.images) {
    os << std::left << std::setw(24) << ("  " + s.name) << std::right << std::setprecision(2) << std::setw(10)
       << s.psnr << std::setprecision(4) << std::setw(10) << s.ssim << "\n";
  }
  for (const auto& s : r.skipped) os << "  skipped " << s.name << ": " << s.reason << "\n";
  return os.str();
}

ImageScore evaluate_image(const std::string& name, const FloatImage& hr_full, const Upscaler& f,
                          const EvalSettings& settings) {
  const int64_t r = settings.scale;
  if (r < 1) throw std::invalid_argument("scale must be >= 1");
  const int64_t h = hr_full.height / r * r;
  const int64_t w = hr_full.width / r * r;
  if (h < 1 || w < 1) throw std::invalid_argument(name + " is smaller than the scale factor");
  const FloatImage hr = crop(hr_full, h, w);
  const FloatImage lr = bicubic_resize(hr, h / r, w / r, true);
  const FloatImage sr = from_tensor(f(to_tensor(lr)));
  if (sr.height != h || sr.width != w || sr.channels != 3) {
    throw ShapeError("upscaler returned " + std::to_string(sr.height) + "x" + std::to_string(sr.width) +
                     " for a " + std::to_string(h) + "x" + std::to_string(w) + " target");
  }
  const FloatImage sr_y = rgb_to_y(quantize_float(sr));
  const FloatImage hr_y = rgb_to_y(quantize_float(hr));
  const int64_t border = settings.effective_border();
  ImageScore s;
  s.name = name;
  s.psnr = psnr(sr_y, hr_y, border);
  FloatImage sr_c = sr_y, hr_c = hr_y;
  if (border > 0) {
    auto strip = [border](const FloatImage& im) {
      FloatImage out(1, im.height - 2 * border, im.width - 2 * border);
      for (int64_t y = 0; y < out.height; ++y)
        for (int64_t x = 0; x < out.width; ++x) out.at(0, y, x) = im.at(0, y + border, x + border);
      return out;
    };
    sr_c = strip(sr_y);
    hr_c = strip(hr_y);
  }
  s.ssim = ssim(sr_c, hr_c);
  return s;
}

EvalReport evaluate_directory(const std::filesystem::path& hr_dir, const Upscaler& f,
                              const EvalSettings& settings) {
  if (!std::filesystem::is_directory(hr_dir)) {
    throw std::invalid_argument(hr_dir.string() + " is not a directory");
  }
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(hr_dir)) {
    std::string ext = e.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    if (e.is_regular_file() && ext == ".png") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  EvalReport report;
  report.settings = settings;
  if (report.settings.dataset.empty()) report.settings.dataset = hr_dir.filename().string();
  for (const auto& path : files) {
    const std::string name = path.filename().string();
    FloatImage hr;
    try {
      hr = to_float(read_png(path));
    } catch (const std::exception& e) {
      std::cerr << "warning: skipping " << name << ": " << e.what() << "\n";
      report.skipped.push_back({name, e.what()});
      continue;
    }
    report.images.push_back(evaluate_image(name, hr, f, settings));
  }
  for (const auto& s : report.images) {
    report.mean_psnr += s.psnr;
    report.mean_ssim += s.ssim;
  }
  if (!report.images.empty()) {
    report.mean_psnr /= static_cast<double>(report.images.size());
    report.mean_ssim /= static_cast<double>(report.images.size());
  }
  return report;
}

EvalReport evaluate_dataset(ModelState<float>& state, const ModelConfig& config,
                            const std::filesystem::path& hr_dir, int64_t scale, int64_t border,
                            bool ensemble) {
  if (scale != config.scale) {
    throw std::invalid_argument("evaluation scale x" + std::to_string(scale) + " does not match the model's x" +
                                std::to_string(config.scale));
  }
  EvalSettings settings;
  settings.scale = scale;
  settings.border = border;
  settings.self_ensemble = ensemble;
  settings.attention = config.attention.str();
  Upscaler f = [&](const Tensor& x) {
    NoGradGuard no_grad;
    return ensemble ? self_ensemble_forward(state, config, x) : forward(state, config, x, false);
  };
  return evaluate_directory(hr_dir, f, settings);
}

}  // namespace maxsr
