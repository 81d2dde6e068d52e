#include "maxsr/partition.hpp"

#include <cmath>
#include <memory>
#include <stdexcept>

#include "maxsr/ops.hpp"

namespace maxsr {

AttentionMode AttentionMode::parse(const std::string& text) {
  if (text == "exact" || text == "adaptive_exact" || text == "adaptive") return exact();
  if (text == "approx" || text == "adaptive_approx") return approx();
  if (text.rfind("fixed:", 0) == 0) {
    const std::string num = text.substr(6);
    size_t used = 0;
    long long p = 0;
    try {
      p = std::stoll(num, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == num.size() && !num.empty() && p >= 1) return fixed(p);
  }
  throw std::invalid_argument("unknown attention mode '" + text + "' (expected exact, approx or fixed:P)");
}

std::string AttentionMode::str() const {
  switch (kind) {
    case FootageKind::kAdaptiveExact: return "exact";
    case FootageKind::kAdaptiveApprox: return "approx";
    case FootageKind::kFixed: return "fixed:" + std::to_string(fixed_size);
  }
  return "exact";
}

bool PartitionPlan::same_geometry(const PartitionPlan& o) const {
  return orig_h == o.orig_h && orig_w == o.orig_w && pad_h == o.pad_h && pad_w == o.pad_w &&
         win_h == o.win_h && win_w == o.win_w && grid_h == o.grid_h && grid_w == o.grid_w &&
         n_win_h == o.n_win_h && n_win_w == o.n_win_w;
}

int64_t ceil_sqrt(int64_t n) {
  if (n < 0) throw std::invalid_argument("ceil_sqrt of negative value");
  auto r = static_cast<int64_t>(std::sqrt(static_cast<double>(n)));
  while (r * r < n) ++r;
  while (r > 0 && (r - 1) * (r - 1) >= n) --r;
  return r;
}

namespace {

int64_t ceil_div(int64_t a, int64_t b) { return (a + b - 1) / b; }

struct AxisPlan {
  int64_t pad, win, grid, n_win;
};

AxisPlan plan_axis(int64_t extent, const AttentionMode& mode) {
  switch (mode.kind) {
    case FootageKind::kAdaptiveExact: {
      const int64_t s = ceil_sqrt(extent);
      return {s * s, s, s, s};
    }
    case FootageKind::kAdaptiveApprox: {
      const int64_t s = ceil_sqrt(extent);
      const int64_t n = ceil_div(extent, s);
      return {s * n, s, n, n};
    }
    case FootageKind::kFixed: {
      const int64_t p = mode.fixed_size;
      const int64_t n = ceil_div(extent, p);
      return {p * n, p, p, n};
    }
  }
  throw std::logic_error("unreachable footage kind");
}

}  // namespace

PartitionPlan adaptive_footage(int64_t h, int64_t w, AttentionMode mode) {
  if (h < 1 || w < 1) {
    throw std::invalid_argument("adaptive_footage: extents must be positive, got " +
                                std::to_string(h) + "x" + std::to_string(w));
  }
  if (mode.kind == FootageKind::kFixed && mode.fixed_size < 1) {
    throw std::invalid_argument("adaptive_footage: fixed footage must be >= 1");
  }
  const AxisPlan ah = plan_axis(h, mode);
  const AxisPlan aw = plan_axis(w, mode);
  PartitionPlan p;
  p.orig_h = h;
  p.orig_w = w;
  p.mode = mode;
  p.pad_h = ah.pad;
  p.pad_w = aw.pad;
  p.win_h = ah.win;
  p.win_w = aw.win;
  p.grid_h = ah.grid;
  p.grid_w = aw.grid;
  p.n_win_h = ah.n_win;
  p.n_win_w = aw.n_win;
  return p;
}

void validate_plan(const PartitionPlan& p) {
  auto fail = [](const std::string& what) { throw ShapeError("invalid partition plan: " + what); };
  if (p.orig_h < 1 || p.orig_w < 1) fail("non-positive original extent");
  if (p.win_h < 1 || p.win_w < 1 || p.grid_h < 1 || p.grid_w < 1) fail("empty footage");
  if (p.pad_h != p.win_h * p.n_win_h || p.pad_w != p.win_w * p.n_win_w) fail("windows do not tile canvas");
  if (p.pad_h < p.orig_h || p.pad_w < p.orig_w) fail("canvas smaller than input");
  if (p.pad_h % p.grid_h != 0 || p.pad_w % p.grid_w != 0) fail("grid extents do not divide canvas");
}

std::pair<int64_t, int64_t> window_pixel(const PartitionPlan& p, int64_t k, int64_t t) {
  const int64_t u = k / p.n_win_w, v = k % p.n_win_w;
  const int64_t a = t / p.win_w, b = t % p.win_w;
  return {u * p.win_h + a, v * p.win_w + b};
}

std::pair<int64_t, int64_t> grid_pixel(const PartitionPlan& p, int64_t k, int64_t t) {
  const int64_t sh = p.cell_stride_h(), sw = p.cell_stride_w();
  const int64_t u = k / sw, v = k % sw;
  const int64_t a = t / p.grid_w, b = t % p.grid_w;
  return {a * sh + u, b * sw + v};
}

namespace {

template <typename PixelFn>
std::vector<int64_t> token_index_map(const PartitionPlan& p, int64_t n, int64_t c, int64_t groups,
                                     int64_t tokens, PixelFn pixel) {
  validate_plan(p);
  std::vector<int64_t> idx(static_cast<size_t>(n * groups * tokens * c));
  size_t o = 0;
  for (int64_t b = 0; b < n; ++b)
    for (int64_t k = 0; k < groups; ++k)
      for (int64_t t = 0; t < tokens; ++t) {
        const auto [y, x] = pixel(p, k, t);
        for (int64_t ch = 0; ch < c; ++ch) idx[o++] = ((b * c + ch) * p.pad_h + y) * p.pad_w + x;
      }
  return idx;
}

template <typename PixelFn>
std::vector<uint8_t> token_valid(const PartitionPlan& p, int64_t n, int64_t groups, int64_t tokens,
                                 PixelFn pixel) {
  std::vector<uint8_t> valid(static_cast<size_t>(n * groups * tokens));
  size_t o = 0;
  for (int64_t b = 0; b < n; ++b)
    for (int64_t k = 0; k < groups; ++k)
      for (int64_t t = 0; t < tokens; ++t) {
        const auto [y, x] = pixel(p, k, t);
        valid[o++] = (y < p.orig_h && x < p.orig_w) ? 1 : 0;
      }
  return valid;
}

IndexMap invert(const std::vector<int64_t>& forward) {
  auto inv = std::make_shared<std::vector<int64_t>>(forward.size());
  for (size_t i = 0; i < forward.size(); ++i) (*inv)[static_cast<size_t>(forward[i])] = static_cast<int64_t>(i);
  return inv;
}

void require_canvas(const Shape& s, const PartitionPlan& p, const char* op) {
  if (s.rank() != 4 || s[2] != p.pad_h || s[3] != p.pad_w) {
    throw ShapeError(std::string(op) + ": tensor " + s.str() + " does not match padded canvas " +
                     std::to_string(p.pad_h) + "x" + std::to_string(p.pad_w));
  }
}

void require_tokens(const Shape& s, int64_t groups, int64_t tokens, const char* op) {
  if (s.rank() != 3 || s[1] != tokens || groups == 0 || s[0] % groups != 0) {
    throw ShapeError(std::string(op) + ": token tensor " + s.str() + " does not match plan");
  }
}

}  // namespace

std::vector<int64_t> window_index_map(const PartitionPlan& p, int64_t n, int64_t c) {
  return token_index_map(p, n, c, p.window_count(), p.window_tokens(), window_pixel);
}

std::vector<int64_t> grid_index_map(const PartitionPlan& p, int64_t n, int64_t c) {
  return token_index_map(p, n, c, p.cell_count(), p.cell_tokens(), grid_pixel);
}

std::vector<uint8_t> window_token_valid(const PartitionPlan& p, int64_t n) {
  return token_valid(p, n, p.window_count(), p.window_tokens(), window_pixel);
}

std::vector<uint8_t> grid_token_valid(const PartitionPlan& p, int64_t n) {
  return token_valid(p, n, p.cell_count(), p.cell_tokens(), grid_pixel);
}

template <typename T>
BasicTensor<T> pad_for_plan(const BasicTensor<T>& x, const PartitionPlan& p) {
  if (x.rank() != 4 || x.dim(2) != p.orig_h || x.dim(3) != p.orig_w) {
    throw ShapeError("pad_for_plan: input " + x.shape().str() + " does not match plan " +
                     std::to_string(p.orig_h) + "x" + std::to_string(p.orig_w));
  }
  validate_plan(p);
  const int64_t planes = x.dim(0) * x.dim(1);
  auto idx = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(planes * p.pad_h * p.pad_w));
  size_t o = 0;
  for (int64_t q = 0; q < planes; ++q)
    for (int64_t y = 0; y < p.pad_h; ++y)
      for (int64_t xx = 0; xx < p.pad_w; ++xx)
        (*idx)[o++] = (y < p.orig_h && xx < p.orig_w) ? (q * p.orig_h + y) * p.orig_w + xx : -1;
  return gather(x, Shape{x.dim(0), x.dim(1), p.pad_h, p.pad_w}, idx);
}

template <typename T>
BasicTensor<T> crop_to_original(const BasicTensor<T>& x, const PartitionPlan& p) {
  require_canvas(x.shape(), p, "crop_to_original");
  const int64_t planes = x.dim(0) * x.dim(1);
  auto idx = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(planes * p.orig_h * p.orig_w));
  size_t o = 0;
  for (int64_t q = 0; q < planes; ++q)
    for (int64_t y = 0; y < p.orig_h; ++y)
      for (int64_t xx = 0; xx < p.orig_w; ++xx) (*idx)[o++] = (q * p.pad_h + y) * p.pad_w + xx;
  return gather(x, Shape{x.dim(0), x.dim(1), p.orig_h, p.orig_w}, idx);
}

template <typename T>
BasicTensor<T> window_partition(const BasicTensor<T>& x, const PartitionPlan& p) {
  require_canvas(x.shape(), p, "window_partition");
  const int64_t n = x.dim(0), c = x.dim(1);
  auto idx = std::make_shared<std::vector<int64_t>>(window_index_map(p, n, c));
  return gather(x, Shape{n * p.window_count(), p.window_tokens(), c}, idx);
}

template <typename T>
BasicTensor<T> window_reverse(const BasicTensor<T>& tokens, const PartitionPlan& p) {
  require_tokens(tokens.shape(), p.window_count(), p.window_tokens(), "window_reverse");
  const int64_t n = tokens.dim(0) / p.window_count(), c = tokens.dim(2);
  return gather(tokens, Shape{n, c, p.pad_h, p.pad_w}, invert(window_index_map(p, n, c)));
}

template <typename T>
BasicTensor<T> grid_partition(const BasicTensor<T>& x, const PartitionPlan& p) {
  require_canvas(x.shape(), p, "grid_partition");
  const int64_t n = x.dim(0), c = x.dim(1);
  auto idx = std::make_shared<std::vector<int64_t>>(grid_index_map(p, n, c));
  return gather(x, Shape{n * p.cell_count(), p.cell_tokens(), c}, idx);
}

template <typename T>
BasicTensor<T> grid_reverse(const BasicTensor<T>& tokens, const PartitionPlan& p) {
  require_tokens(tokens.shape(), p.cell_count(), p.cell_tokens(), "grid_reverse");
  const int64_t n = tokens.dim(0) / p.cell_count(), c = tokens.dim(2);
  return gather(tokens, Shape{n, c, p.pad_h, p.pad_w}, invert(grid_index_map(p, n, c)));
}

int64_t attention_cost(const PartitionPlan& p) {
  validate_plan(p);
  const int64_t t = p.window_tokens(), g = p.cell_tokens();
  return p.window_count() * t * t + p.cell_count() * g * g;
}

int64_t global_attention_cost(int64_t h, int64_t w) {
  const int64_t t = h * w;
  return t * t;
}

double loglog_slope(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 2) throw std::invalid_argument("loglog_slope: need >= 2 paired points");
  double mx = 0, my = 0;
  for (size_t i = 0; i < x.size(); ++i) {
    mx += std::log(x[i]);
    my += std::log(y[i]);
  }
  mx /= static_cast<double>(x.size());
  my /= static_cast<double>(y.size());
  double sxy = 0, sxx = 0;
  for (size_t i = 0; i < x.size(); ++i) {
    const double dx = std::log(x[i]) - mx;
    sxy += dx * (std::log(y[i]) - my);
    sxx += dx * dx;
  }
  return sxy / sxx;
}

#define MAXSR_INSTANTIATE(T)                                                                     \
  template BasicTensor<T> pad_for_plan(const BasicTensor<T>&, const PartitionPlan&);             \
  template BasicTensor<T> crop_to_original(const BasicTensor<T>&, const PartitionPlan&);         \
  template BasicTensor<T> window_partition(const BasicTensor<T>&, const PartitionPlan&);         \
  template BasicTensor<T> window_reverse(const BasicTensor<T>&, const PartitionPlan&);           \
  template BasicTensor<T> grid_partition(const BasicTensor<T>&, const PartitionPlan&);           \
  template BasicTensor<T> grid_reverse(const BasicTensor<T>&, const PartitionPlan&);

MAXSR_INSTANTIATE(float)
MAXSR_INSTANTIATE(double)
#undef MAXSR_INSTANTIATE

}  // namespace maxsr
