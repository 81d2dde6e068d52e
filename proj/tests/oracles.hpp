#pragma once

// Brute-force reference implementations shared by the unit tests and the
// acceptance binary. Deliberately naive: no separability, no running sums.

#include <algorithm>
#include <cmath>
#include <utility>
#include <vector>

#include "maxsr/image.hpp"

namespace oracle {

using maxsr::FloatImage;

// Direct 2-D kernel sums with clamped taps, independent of the separable code.
inline double direct_bicubic(const FloatImage& im, int64_t c, int64_t oy, int64_t ox, double sy, double sx) {
  auto kern = [](double x) {
    const double a = -0.5, t = std::abs(x);
    if (t <= 1) return (a + 2) * t * t * t - (a + 3) * t * t + 1;
    if (t < 2) return a * t * t * t - 5 * a * t * t + 8 * a * t - 4 * a;
    return 0.0;
  };
  auto weights = [&](int64_t o, double s, int64_t n, std::vector<std::pair<int64_t, double>>& out) {
    const double u = (o + 0.5) / s - 0.5;
    const double k = s < 1 ? s : 1.0;
    double total = 0;
    for (int64_t i = static_cast<int64_t>(std::floor(u - 2 / k)) - 1; i <= static_cast<int64_t>(std::ceil(u + 2 / k)) + 1; ++i) {
      const double w = k * kern(k * (u - i));
      if (w == 0) continue;
      out.emplace_back(std::clamp<int64_t>(i, 0, n - 1), w);
      total += w;
    }
    for (auto& p : out) p.second /= total;
  };
  std::vector<std::pair<int64_t, double>> wy, wx;
  weights(oy, sy, im.height, wy);
  weights(ox, sx, im.width, wx);
  double acc = 0;
  for (auto [iy, a] : wy)
    for (auto [ix, b] : wx) acc += a * b * im.at(c, iy, ix);
  return acc;
}

inline double brute_psnr(const FloatImage& a, const FloatImage& b, int64_t border) {
  long double se = 0;
  int64_t n = 0;
  for (int64_t c = 0; c < a.channels; ++c)
    for (int64_t y = border; y < a.height - border; ++y)
      for (int64_t x = border; x < a.width - border; ++x, ++n) se += std::pow(static_cast<long double>(a.at(c, y, x)) - b.at(c, y, x), 2);
  return static_cast<double>(10 * std::log10(1.0L / (se / n)));
}

// Two-pass moments per window.
inline double brute_ssim(const FloatImage& a, const FloatImage& b) {
  double g[11][11], total = 0;
  for (int i = 0; i < 11; ++i)
    for (int j = 0; j < 11; ++j) total += g[i][j] = std::exp(-((i - 5) * (i - 5) + (j - 5) * (j - 5)) / 4.5);
  const double c1 = 1e-4, c2 = 9e-4;
  double acc = 0;
  int n = 0;
  for (int64_t y = 0; y + 11 <= a.height; ++y)
    for (int64_t x = 0; x + 11 <= a.width; ++x, ++n) {
      double ma = 0, mb = 0;
      for (int i = 0; i < 11; ++i)
        for (int j = 0; j < 11; ++j) {
          ma += g[i][j] / total * a.at(0, y + i, x + j);
          mb += g[i][j] / total * b.at(0, y + i, x + j);
        }
      double va = 0, vb = 0, cab = 0;
      for (int i = 0; i < 11; ++i)
        for (int j = 0; j < 11; ++j) {
          const double da = a.at(0, y + i, x + j) - ma, db = b.at(0, y + i, x + j) - mb;
          va += g[i][j] / total * da * da;
          vb += g[i][j] / total * db * db;
          cab += g[i][j] / total * da * db;
        }
      acc += (2 * ma * mb + c1) * (2 * cab + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
  return acc / n;
}

}  // namespace oracle
