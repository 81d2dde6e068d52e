#include "maxsr/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace maxsr {

Tensor64 finite_diff_grad(const std::function<double(const Tensor64&)>& f, Tensor64 x, double eps) {
  NoGradGuard no_grad;
  std::vector<double> out(static_cast<size_t>(x.numel()));
  auto values = x.mutable_data();
  for (size_t i = 0; i < values.size(); ++i) {
    const double original = values[i];
    values[i] = original + eps;
    const double plus = f(x);
    values[i] = original - eps;
    const double minus = f(x);
    values[i] = original;
    out[i] = (plus - minus) / (2.0 * eps);
  }
  return Tensor64(x.shape(), std::move(out));
}

double max_relative_error(std::span<const double> analytic, std::span<const double> numeric,
                          double floor) {
  if (analytic.size() != numeric.size()) throw ShapeError("max_relative_error: length mismatch");
  double worst = 0.0;
  for (size_t i = 0; i < analytic.size(); ++i) {
    const double denom = std::max({std::abs(analytic[i]), std::abs(numeric[i]), floor});
    worst = std::max(worst, std::abs(analytic[i] - numeric[i]) / denom);
  }
  return worst;
}

}  // namespace maxsr
