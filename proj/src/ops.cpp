#include "maxsr/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "maxsr/kernels.hpp"

namespace maxsr {

namespace {

template <typename T>
using Impl = detail::ImplPtr<T>;

// Gradient accumulator of an input, or an empty span when it needs none.
template <typename T>
std::span<T> grad_of(const Impl<T>& impl) {
  if (!impl || !impl->requires_grad) return {};
  return impl->grad_buffer();
}

template <typename T>
void require_same_shape(const BasicTensor<T>& a, const BasicTensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + a.shape().str() + " vs " +
                     b.shape().str());
  }
}

template <typename T>
void require_rank(const BasicTensor<T>& x, int rank, const char* op) {
  if (x.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     x.shape().str());
  }
}

// Elementwise unary op with derivative f'(x) evaluated from input and output.
template <typename T, typename F, typename D>
BasicTensor<T> unary(const BasicTensor<T>& x, const char* name, F f, D df) {
  const auto xs = x.data();
  std::vector<T> out(xs.size());
  for (size_t i = 0; i < xs.size(); ++i) out[i] = f(xs[i]);
  auto xi = x.impl_ptr();
  return make_result<T>(x.shape(), std::move(out), name, {x}, [xi, df](std::span<const T> g) {
    auto gx = grad_of(xi);
    if (gx.empty()) return;
    const auto& xv = xi->data;
    for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * df(xv[i]);
  });
}

std::vector<int64_t> leading_dims(const Shape& s, int trailing) {
  std::vector<int64_t> d(s.dims().begin(), s.dims().end() - trailing);
  return d;
}

int64_t product(std::span<const int64_t> d) {
  int64_t p = 1;
  for (int64_t v : d) p *= v;
  return p;
}

}  // namespace

template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& input, const BasicTensor<T>& weight,
                      const BasicTensor<T>& bias, int64_t stride, int64_t pad, int64_t groups) {
  require_rank(input, 4, "conv2d");
  require_rank(weight, 4, "conv2d weight");
  if (stride < 1 || pad < 0 || groups < 1) throw ShapeError("conv2d: invalid stride/pad/groups");
  kernels::ConvGeometry g;
  g.batch = input.dim(0);
  g.in_channels = input.dim(1);
  g.in_h = input.dim(2);
  g.in_w = input.dim(3);
  g.out_channels = weight.dim(0);
  g.kernel_h = weight.dim(2);
  g.kernel_w = weight.dim(3);
  g.stride = stride;
  g.pad = pad;
  g.groups = groups;
  if (g.in_channels % groups != 0 || g.out_channels % groups != 0 ||
      weight.dim(1) * groups != g.in_channels) {
    throw ShapeError("conv2d: input " + input.shape().str() + " incompatible with weight " +
                     weight.shape().str() + " at groups=" + std::to_string(groups));
  }
  if (g.kernel_h % 2 == 0 || g.kernel_w % 2 == 0) throw ShapeError("conv2d: kernel extents must be odd");
  const int64_t span_h = g.in_h + 2 * pad - g.kernel_h;
  const int64_t span_w = g.in_w + 2 * pad - g.kernel_w;
  if (span_h < 0 || span_w < 0 || span_h % stride != 0 || span_w % stride != 0) {
    throw ShapeError("conv2d: non-integral output extent for input " + input.shape().str());
  }
  if (bias.defined() && bias.shape() != Shape{g.out_channels}) {
    throw ShapeError("conv2d: bias shape " + bias.shape().str());
  }
  const Shape out_shape{g.batch, g.out_channels, g.out_h(), g.out_w()};
  std::vector<T> out(static_cast<size_t>(out_shape.numel()));
  kernels::parallel::conv2d_forward(g, input.data().data(), weight.data().data(),
                                    bias.defined() ? bias.data().data() : nullptr, out.data());
  auto xi = input.impl_ptr();
  auto wi = weight.impl_ptr();
  auto bi = bias.defined() ? bias.impl_ptr() : Impl<T>{};
  std::vector<BasicTensor<T>> inputs{input, weight};
  if (bias.defined()) inputs.push_back(bias);
  return make_result<T>(out_shape, std::move(out), "conv2d", inputs,
                        [g, xi, wi, bi](std::span<const T> gy) {
                          auto gx = grad_of(xi);
                          if (!gx.empty()) {
                            kernels::parallel::conv2d_backward_input(g, gy.data(), wi->data.data(),
                                                                     gx.data());
                          }
                          auto gw = grad_of(wi);
                          auto gb = grad_of(bi);
                          if (!gw.empty() || !gb.empty()) {
                            std::vector<T> scratch;
                            T* gw_ptr = gw.data();
                            if (gw.empty()) {
                              scratch.assign(wi->data.size(), T(0));
                              gw_ptr = scratch.data();
                            }
                            kernels::parallel::conv2d_backward_weight(
                                g, gy.data(), xi->data.data(), gw_ptr, gb.empty() ? nullptr : gb.data());
                          }
                        });
}

template <typename T>
BasicTensor<T> batched_matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.rank() < 2 || a.rank() != b.rank()) {
    throw ShapeError("batched_matmul: ranks " + a.shape().str() + " and " + b.shape().str());
  }
  const int r = a.rank();
  for (int i = 0; i < r - 2; ++i) {
    if (a.dim(i) != b.dim(i)) throw ShapeError("batched_matmul: leading dims differ");
  }
  if (a.dim(r - 1) != b.dim(r - 2)) {
    throw ShapeError("batched_matmul: inner dims differ " + a.shape().str() + " x " + b.shape().str());
  }
  kernels::GemmShape s;
  auto lead = leading_dims(a.shape(), 2);
  s.batch = product(lead);
  s.m = a.dim(r - 2);
  s.k = a.dim(r - 1);
  s.n = b.dim(r - 1);
  lead.push_back(s.m);
  lead.push_back(s.n);
  const Shape out_shape(lead);
  std::vector<T> out(static_cast<size_t>(out_shape.numel()));
  kernels::parallel::gemm(s, a.data().data(), b.data().data(), out.data());
  auto ai = a.impl_ptr();
  auto bi = b.impl_ptr();
  return make_result<T>(out_shape, std::move(out), "batched_matmul", {a, b},
                        [s, ai, bi](std::span<const T> g) {
                          if (auto ga = grad_of(ai); !ga.empty()) {
                            kernels::GemmShape t{s.batch, s.m, s.k, s.n, false, true, true};
                            kernels::parallel::gemm(t, g.data(), bi->data.data(), ga.data());
                          }
                          if (auto gb = grad_of(bi); !gb.empty()) {
                            kernels::GemmShape t{s.batch, s.k, s.n, s.m, true, false, true};
                            kernels::parallel::gemm(t, ai->data.data(), g.data(), gb.data());
                          }
                        });
}

template <typename T>
BasicTensor<T> transpose_last2(const BasicTensor<T>& x) {
  if (x.rank() < 2) throw ShapeError("transpose_last2: rank < 2");
  const int r = x.rank();
  const int64_t m = x.dim(r - 2), n = x.dim(r - 1);
  const int64_t batch = x.numel() / std::max<int64_t>(1, m * n);
  auto idx = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(x.numel()));
  for (int64_t b = 0; b < batch; ++b)
    for (int64_t j = 0; j < n; ++j)
      for (int64_t i = 0; i < m; ++i) (*idx)[static_cast<size_t>(b * m * n + j * m + i)] = b * m * n + i * n + j;
  auto dims = leading_dims(x.shape(), 2);
  dims.push_back(n);
  dims.push_back(m);
  return gather(x, Shape(dims), idx);
}

template <typename T>
BasicTensor<T> linear(const BasicTensor<T>& x, const BasicTensor<T>& weight,
                      const BasicTensor<T>& bias) {
  require_rank(weight, 2, "linear weight");
  const int r = x.rank();
  if (r < 1 || x.dim(r - 1) != weight.dim(1)) {
    throw ShapeError("linear: input " + x.shape().str() + " vs weight " + weight.shape().str());
  }
  const int64_t in = weight.dim(1), out_f = weight.dim(0);
  if (bias.defined() && bias.shape() != Shape{out_f}) throw ShapeError("linear: bias shape");
  const int64_t rows = x.numel() / std::max<int64_t>(1, in);
  auto dims = leading_dims(x.shape(), 1);
  dims.push_back(out_f);
  const Shape out_shape(dims);
  std::vector<T> out(static_cast<size_t>(out_shape.numel()));
  kernels::GemmShape s{1, rows, out_f, in, false, true, false};
  kernels::parallel::gemm(s, x.data().data(), weight.data().data(), out.data());
  if (bias.defined()) {
    const auto bv = bias.data();
    for (int64_t i = 0; i < rows; ++i)
      for (int64_t j = 0; j < out_f; ++j) out[static_cast<size_t>(i * out_f + j)] += bv[static_cast<size_t>(j)];
  }
  auto xi = x.impl_ptr();
  auto wi = weight.impl_ptr();
  auto bi = bias.defined() ? bias.impl_ptr() : Impl<T>{};
  std::vector<BasicTensor<T>> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  return make_result<T>(out_shape, std::move(out), "linear", inputs,
                        [xi, wi, bi, rows, in, out_f](std::span<const T> g) {
                          if (auto gx = grad_of(xi); !gx.empty()) {
                            kernels::GemmShape t{1, rows, in, out_f, false, false, true};
                            kernels::parallel::gemm(t, g.data(), wi->data.data(), gx.data());
                          }
                          if (auto gw = grad_of(wi); !gw.empty()) {
                            kernels::GemmShape t{1, out_f, in, rows, true, false, true};
                            kernels::parallel::gemm(t, g.data(), xi->data.data(), gw.data());
                          }
                          if (auto gb = grad_of(bi); !gb.empty()) {
                            for (int64_t i = 0; i < rows; ++i)
                              for (int64_t j = 0; j < out_f; ++j)
                                gb[static_cast<size_t>(j)] += g[static_cast<size_t>(i * out_f + j)];
                          }
                        });
}

template <typename T>
BasicTensor<T> softmax_lastdim(const BasicTensor<T>& x) {
  if (x.rank() < 1) throw ShapeError("softmax_lastdim: rank 0");
  const int64_t cols = x.dim(x.rank() - 1);
  const int64_t rows = cols == 0 ? 0 : x.numel() / cols;
  std::vector<T> out(static_cast<size_t>(x.numel()));
  kernels::parallel::softmax_rows(rows, cols, x.data().data(), out.data());
  std::vector<T> y(out);
  auto xi = x.impl_ptr();
  return make_result<T>(x.shape(), std::move(out), "softmax", {x},
                        [xi, y = std::move(y), rows, cols](std::span<const T> g) {
                          auto gx = grad_of(xi);
                          if (gx.empty()) return;
                          for (int64_t r = 0; r < rows; ++r) {
                            const T* yr = y.data() + r * cols;
                            const T* gr = g.data() + r * cols;
                            T dot = 0;
                            for (int64_t j = 0; j < cols; ++j) dot += gr[j] * yr[j];
                            T* gxr = gx.data() + r * cols;
                            for (int64_t j = 0; j < cols; ++j) gxr[j] += yr[j] * (gr[j] - dot);
                          }
                        });
}

template <typename T>
BasicTensor<T> layer_norm(const BasicTensor<T>& x, const BasicTensor<T>& gamma,
                          const BasicTensor<T>& beta, T eps) {
  if (x.rank() < 2) throw ShapeError("layer_norm: rank < 2");
  const int64_t n = x.dim(0), c = x.dim(1);
  const int64_t inner = x.numel() / std::max<int64_t>(1, n * c);
  if (gamma.shape() != Shape{c} || beta.shape() != Shape{c}) {
    throw ShapeError("layer_norm: affine params must be [" + std::to_string(c) + "]");
  }
  const auto xs = x.data();
  const auto gs = gamma.data();
  const auto bs = beta.data();
  std::vector<T> out(xs.size()), xhat(xs.size()), inv_std(static_cast<size_t>(n * inner));
  for (int64_t b = 0; b < n; ++b) {
    for (int64_t p = 0; p < inner; ++p) {
      const int64_t base = b * c * inner + p;
      T mu = 0;
      for (int64_t ch = 0; ch < c; ++ch) mu += xs[static_cast<size_t>(base + ch * inner)];
      mu /= T(c);
      T var = 0;
      for (int64_t ch = 0; ch < c; ++ch) {
        const T d = xs[static_cast<size_t>(base + ch * inner)] - mu;
        var += d * d;
      }
      var /= T(c);
      const T is = T(1) / std::sqrt(var + eps);
      inv_std[static_cast<size_t>(b * inner + p)] = is;
      for (int64_t ch = 0; ch < c; ++ch) {
        const size_t k = static_cast<size_t>(base + ch * inner);
        xhat[k] = (xs[k] - mu) * is;
        out[k] = gs[static_cast<size_t>(ch)] * xhat[k] + bs[static_cast<size_t>(ch)];
      }
    }
  }
  auto xi = x.impl_ptr();
  auto gi = gamma.impl_ptr();
  auto bi = beta.impl_ptr();
  return make_result<T>(
      x.shape(), std::move(out), "layer_norm", {x, gamma, beta},
      [xi, gi, bi, n, c, inner, xhat = std::move(xhat), inv_std = std::move(inv_std)](std::span<const T> g) {
        auto gx = grad_of(xi);
        auto gg = grad_of(gi);
        auto gb = grad_of(bi);
        const auto& gam = gi->data;
        for (int64_t b = 0; b < n; ++b) {
          for (int64_t p = 0; p < inner; ++p) {
            const int64_t base = b * c * inner + p;
            T mean_g = 0, mean_gx = 0;
            for (int64_t ch = 0; ch < c; ++ch) {
              const size_t k = static_cast<size_t>(base + ch * inner);
              const T gh = g[k] * gam[static_cast<size_t>(ch)];
              mean_g += gh;
              mean_gx += gh * xhat[k];
              if (!gg.empty()) gg[static_cast<size_t>(ch)] += g[k] * xhat[k];
              if (!gb.empty()) gb[static_cast<size_t>(ch)] += g[k];
            }
            if (gx.empty()) continue;
            mean_g /= T(c);
            mean_gx /= T(c);
            const T is = inv_std[static_cast<size_t>(b * inner + p)];
            for (int64_t ch = 0; ch < c; ++ch) {
              const size_t k = static_cast<size_t>(base + ch * inner);
              const T gh = g[k] * gam[static_cast<size_t>(ch)];
              gx[k] += is * (gh - mean_g - xhat[k] * mean_gx);
            }
          }
        }
      });
}

template <typename T>
BasicTensor<T> batch_norm(const BasicTensor<T>& x, const BasicTensor<T>& gamma,
                          const BasicTensor<T>& beta, BasicTensor<T>& running_mean,
                          BasicTensor<T>& running_var, bool training, T momentum, T eps) {
  require_rank(x, 4, "batch_norm");
  const int64_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  const Shape cs{c};
  if (gamma.shape() != cs || beta.shape() != cs || running_mean.shape() != cs ||
      running_var.shape() != cs) {
    throw ShapeError("batch_norm: per-channel tensors must be [" + std::to_string(c) + "]");
  }
  const auto xs = x.data();
  const auto gs = gamma.data();
  const auto bs = beta.data();
  std::vector<T> out(xs.size()), xhat(xs.size()), inv_std(static_cast<size_t>(c));
  const int64_t count = n * hw;
  for (int64_t ch = 0; ch < c; ++ch) {
    T mu, var;
    if (training) {
      mu = 0;
      for (int64_t b = 0; b < n; ++b)
        for (int64_t p = 0; p < hw; ++p) mu += xs[static_cast<size_t>((b * c + ch) * hw + p)];
      mu /= T(count);
      var = 0;
      for (int64_t b = 0; b < n; ++b)
        for (int64_t p = 0; p < hw; ++p) {
          const T d = xs[static_cast<size_t>((b * c + ch) * hw + p)] - mu;
          var += d * d;
        }
      var /= T(count);
      auto rm = running_mean.mutable_data();
      auto rv = running_var.mutable_data();
      const T unbiased = count > 1 ? var * T(count) / T(count - 1) : var;
      rm[static_cast<size_t>(ch)] = (T(1) - momentum) * rm[static_cast<size_t>(ch)] + momentum * mu;
      rv[static_cast<size_t>(ch)] = (T(1) - momentum) * rv[static_cast<size_t>(ch)] + momentum * unbiased;
    } else {
      mu = running_mean.data()[static_cast<size_t>(ch)];
      var = running_var.data()[static_cast<size_t>(ch)];
    }
    const T is = T(1) / std::sqrt(var + eps);
    inv_std[static_cast<size_t>(ch)] = is;
    for (int64_t b = 0; b < n; ++b)
      for (int64_t p = 0; p < hw; ++p) {
        const size_t k = static_cast<size_t>((b * c + ch) * hw + p);
        xhat[k] = (xs[k] - mu) * is;
        out[k] = gs[static_cast<size_t>(ch)] * xhat[k] + bs[static_cast<size_t>(ch)];
      }
  }
  auto xi = x.impl_ptr();
  auto gi = gamma.impl_ptr();
  auto bi = beta.impl_ptr();
  return make_result<T>(
      x.shape(), std::move(out), training ? "batch_norm_train" : "batch_norm_eval", {x, gamma, beta},
      [xi, gi, bi, n, c, hw, training, xhat = std::move(xhat),
       inv_std = std::move(inv_std)](std::span<const T> g) {
        auto gx = grad_of(xi);
        auto gg = grad_of(gi);
        auto gb = grad_of(bi);
        const auto& gam = gi->data;
        const T count = T(n * hw);
        for (int64_t ch = 0; ch < c; ++ch) {
          T sum_g = 0, sum_gx = 0;
          for (int64_t b = 0; b < n; ++b)
            for (int64_t p = 0; p < hw; ++p) {
              const size_t k = static_cast<size_t>((b * c + ch) * hw + p);
              sum_g += g[k];
              sum_gx += g[k] * xhat[k];
            }
          if (!gg.empty()) gg[static_cast<size_t>(ch)] += sum_gx;
          if (!gb.empty()) gb[static_cast<size_t>(ch)] += sum_g;
          if (gx.empty()) continue;
          const T scale_c = gam[static_cast<size_t>(ch)] * inv_std[static_cast<size_t>(ch)];
          const T mean_g = sum_g / count, mean_gx = sum_gx / count;
          for (int64_t b = 0; b < n; ++b)
            for (int64_t p = 0; p < hw; ++p) {
              const size_t k = static_cast<size_t>((b * c + ch) * hw + p);
              gx[k] += training ? scale_c * (g[k] - mean_g - xhat[k] * mean_gx) : scale_c * g[k];
            }
        }
      });
}

template <typename T>
BasicTensor<T> pixel_shuffle(const BasicTensor<T>& x, int64_t r) {
  require_rank(x, 4, "pixel_shuffle");
  if (r < 1 || x.dim(1) % (r * r) != 0) {
    throw ShapeError("pixel_shuffle: channels " + std::to_string(x.dim(1)) +
                     " not divisible by r^2 = " + std::to_string(r * r));
  }
  const int64_t n = x.dim(0), c = x.dim(1) / (r * r), h = x.dim(2), w = x.dim(3);
  const Shape out_shape{n, c, h * r, w * r};
  auto idx = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(out_shape.numel()));
  size_t o = 0;
  for (int64_t b = 0; b < n; ++b)
    for (int64_t ch = 0; ch < c; ++ch)
      for (int64_t y = 0; y < h * r; ++y)
        for (int64_t xx = 0; xx < w * r; ++xx) {
          const int64_t i = y % r, j = xx % r;
          const int64_t src_c = ch * r * r + i * r + j;
          (*idx)[o++] = ((b * c * r * r + src_c) * h + y / r) * w + xx / r;
        }
  return gather(x, out_shape, idx);
}

template <typename T>
BasicTensor<T> pixel_unshuffle(const BasicTensor<T>& x, int64_t r) {
  require_rank(x, 4, "pixel_unshuffle");
  if (r < 1 || x.dim(2) % r != 0 || x.dim(3) % r != 0) {
    throw ShapeError("pixel_unshuffle: spatial extents not divisible by r");
  }
  const int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2) / r, w = x.dim(3) / r;
  const Shape out_shape{n, c * r * r, h, w};
  auto idx = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(out_shape.numel()));
  size_t o = 0;
  for (int64_t b = 0; b < n; ++b)
    for (int64_t oc = 0; oc < c * r * r; ++oc)
      for (int64_t y = 0; y < h; ++y)
        for (int64_t xx = 0; xx < w; ++xx) {
          const int64_t ch = oc / (r * r), i = (oc % (r * r)) / r, j = oc % r;
          (*idx)[o++] = ((b * c + ch) * h * r + y * r + i) * w * r + xx * r + j;
        }
  return gather(x, out_shape, idx);
}

template <typename T>
BasicTensor<T> global_avg_pool(const BasicTensor<T>& x) {
  require_rank(x, 4, "global_avg_pool");
  const int64_t planes = x.dim(0) * x.dim(1), hw = x.dim(2) * x.dim(3);
  const auto xs = x.data();
  std::vector<T> out(static_cast<size_t>(planes));
  for (int64_t p = 0; p < planes; ++p) {
    T acc = 0;
    for (int64_t i = 0; i < hw; ++i) acc += xs[static_cast<size_t>(p * hw + i)];
    out[static_cast<size_t>(p)] = acc / T(hw);
  }
  auto xi = x.impl_ptr();
  return make_result<T>(Shape{x.dim(0), x.dim(1), 1, 1}, std::move(out), "global_avg_pool", {x},
                        [xi, planes, hw](std::span<const T> g) {
                          auto gx = grad_of(xi);
                          if (gx.empty()) return;
                          for (int64_t p = 0; p < planes; ++p) {
                            const T v = g[static_cast<size_t>(p)] / T(hw);
                            for (int64_t i = 0; i < hw; ++i) gx[static_cast<size_t>(p * hw + i)] += v;
                          }
                        });
}

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_same_shape(a, b, "add");
  const auto as = a.data(), bs = b.data();
  std::vector<T> out(as.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = as[i] + bs[i];
  auto ai = a.impl_ptr(), bi = b.impl_ptr();
  return make_result<T>(a.shape(), std::move(out), "add", {a, b}, [ai, bi](std::span<const T> g) {
    for (const auto& im : {ai, bi}) {
      auto gx = grad_of(im);
      for (size_t i = 0; i < gx.size(); ++i) gx[i] += g[i];
    }
  });
}

template <typename T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_same_shape(a, b, "sub");
  const auto as = a.data(), bs = b.data();
  std::vector<T> out(as.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = as[i] - bs[i];
  auto ai = a.impl_ptr(), bi = b.impl_ptr();
  return make_result<T>(a.shape(), std::move(out), "sub", {a, b}, [ai, bi](std::span<const T> g) {
    auto ga = grad_of(ai);
    for (size_t i = 0; i < ga.size(); ++i) ga[i] += g[i];
    auto gb = grad_of(bi);
    for (size_t i = 0; i < gb.size(); ++i) gb[i] -= g[i];
  });
}

template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_same_shape(a, b, "mul");
  const auto as = a.data(), bs = b.data();
  std::vector<T> out(as.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = as[i] * bs[i];
  auto ai = a.impl_ptr(), bi = b.impl_ptr();
  return make_result<T>(a.shape(), std::move(out), "mul", {a, b}, [ai, bi](std::span<const T> g) {
    auto ga = grad_of(ai);
    for (size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * bi->data[i];
    auto gb = grad_of(bi);
    for (size_t i = 0; i < gb.size(); ++i) gb[i] += g[i] * ai->data[i];
  });
}

template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& x, T factor) {
  return unary<T>(x, "scale", [factor](T v) { return v * factor; }, [factor](T) { return factor; });
}

template <typename T>
BasicTensor<T> gelu(const BasicTensor<T>& x) {
  constexpr T kInvSqrt2 = T(1) / std::numbers::sqrt2_v<T>;
  constexpr T kInvSqrt2Pi = std::numbers::inv_sqrtpi_v<T> * kInvSqrt2;
  return unary<T>(
      x, "gelu", [](T v) { return T(0.5) * v * (T(1) + std::erf(v * kInvSqrt2)); },
      [](T v) {
        const T cdf = T(0.5) * (T(1) + std::erf(v * kInvSqrt2));
        const T pdf = kInvSqrt2Pi * std::exp(T(-0.5) * v * v);
        return cdf + v * pdf;
      });
}

template <typename T>
BasicTensor<T> sigmoid(const BasicTensor<T>& x) {
  auto f = [](T v) { return v >= 0 ? T(1) / (T(1) + std::exp(-v)) : std::exp(v) / (T(1) + std::exp(v)); };
  return unary<T>(x, "sigmoid", f, [f](T v) {
    const T s = f(v);
    return s * (T(1) - s);
  });
}

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& x) {
  return unary<T>(x, "relu", [](T v) { return v > 0 ? v : T(0); },
                  [](T v) { return v > 0 ? T(1) : T(0); });
}

template <typename T>
BasicTensor<T> abs(const BasicTensor<T>& x) {
  return unary<T>(x, "abs", [](T v) { return std::abs(v); },
                  [](T v) { return v > 0 ? T(1) : (v < 0 ? T(-1) : T(0)); });
}

template <typename T>
BasicTensor<T> concat_channels(const std::vector<BasicTensor<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_channels: no inputs");
  const auto& first = parts.front();
  require_rank(first, 4, "concat_channels");
  int64_t total_c = 0;
  for (const auto& p : parts) {
    require_rank(p, 4, "concat_channels");
    if (p.dim(0) != first.dim(0) || p.dim(2) != first.dim(2) || p.dim(3) != first.dim(3)) {
      throw ShapeError("concat_channels: mismatched extents " + p.shape().str() + " vs " +
                       first.shape().str());
    }
    total_c += p.dim(1);
  }
  const int64_t n = first.dim(0), hw = first.dim(2) * first.dim(3);
  const Shape out_shape{n, total_c, first.dim(2), first.dim(3)};
  std::vector<T> out(static_cast<size_t>(out_shape.numel()));
  std::vector<Impl<T>> impls;
  std::vector<int64_t> offsets;
  int64_t off = 0;
  for (const auto& p : parts) {
    const auto ps = p.data();
    const int64_t c = p.dim(1);
    for (int64_t b = 0; b < n; ++b) {
      std::copy(ps.begin() + b * c * hw, ps.begin() + (b + 1) * c * hw,
                out.begin() + (b * total_c + off) * hw);
    }
    impls.push_back(p.impl_ptr());
    offsets.push_back(off);
    off += c;
  }
  return make_result<T>(out_shape, std::move(out), "concat_channels", parts,
                        [impls, offsets, n, hw, total_c](std::span<const T> g) {
                          for (size_t k = 0; k < impls.size(); ++k) {
                            auto gx = grad_of(impls[k]);
                            if (gx.empty()) continue;
                            const int64_t c = impls[k]->shape[1];
                            for (int64_t b = 0; b < n; ++b)
                              for (int64_t i = 0; i < c * hw; ++i)
                                gx[static_cast<size_t>(b * c * hw + i)] +=
                                    g[static_cast<size_t>((b * total_c + offsets[k]) * hw + i)];
                          }
                        });
}

template <typename T>
BasicTensor<T> scale_channels(const BasicTensor<T>& x, const BasicTensor<T>& s) {
  require_rank(x, 4, "scale_channels");
  if (s.shape() != Shape{x.dim(0), x.dim(1), 1, 1}) {
    throw ShapeError("scale_channels: gate " + s.shape().str() + " for input " + x.shape().str());
  }
  const int64_t planes = x.dim(0) * x.dim(1), hw = x.dim(2) * x.dim(3);
  const auto xs = x.data(), ss = s.data();
  std::vector<T> out(xs.size());
  for (int64_t p = 0; p < planes; ++p)
    for (int64_t i = 0; i < hw; ++i) {
      const size_t k = static_cast<size_t>(p * hw + i);
      out[k] = xs[k] * ss[static_cast<size_t>(p)];
    }
  auto xi = x.impl_ptr(), si = s.impl_ptr();
  return make_result<T>(x.shape(), std::move(out), "scale_channels", {x, s},
                        [xi, si, planes, hw](std::span<const T> g) {
                          auto gx = grad_of(xi);
                          auto gs = grad_of(si);
                          for (int64_t p = 0; p < planes; ++p) {
                            T acc = 0;
                            const T sv = si->data[static_cast<size_t>(p)];
                            for (int64_t i = 0; i < hw; ++i) {
                              const size_t k = static_cast<size_t>(p * hw + i);
                              if (!gx.empty()) gx[k] += g[k] * sv;
                              acc += g[k] * xi->data[k];
                            }
                            if (!gs.empty()) gs[static_cast<size_t>(p)] += acc;
                          }
                        });
}

template <typename T>
BasicTensor<T> add_head_bias(const BasicTensor<T>& scores, const BasicTensor<T>& bias) {
  require_rank(scores, 4, "add_head_bias");
  const Shape want{scores.dim(1), scores.dim(2), scores.dim(3)};
  if (bias.shape() != want) {
    throw ShapeError("add_head_bias: bias " + bias.shape().str() + " expected " + want.str());
  }
  const int64_t per = want.numel(), batch = scores.dim(0);
  const auto ss = scores.data(), bs = bias.data();
  std::vector<T> out(ss.size());
  for (int64_t b = 0; b < batch; ++b)
    for (int64_t i = 0; i < per; ++i) out[static_cast<size_t>(b * per + i)] = ss[static_cast<size_t>(b * per + i)] + bs[static_cast<size_t>(i)];
  auto si = scores.impl_ptr(), bi = bias.impl_ptr();
  return make_result<T>(scores.shape(), std::move(out), "add_head_bias", {scores, bias},
                        [si, bi, per, batch](std::span<const T> g) {
                          auto gs = grad_of(si);
                          for (size_t i = 0; i < gs.size(); ++i) gs[i] += g[i];
                          auto gb = grad_of(bi);
                          if (gb.empty()) return;
                          for (int64_t b = 0; b < batch; ++b)
                            for (int64_t i = 0; i < per; ++i) gb[static_cast<size_t>(i)] += g[static_cast<size_t>(b * per + i)];
                        });
}

template <typename T>
BasicTensor<T> mask_keys(const BasicTensor<T>& scores, std::span<const uint8_t> key_valid) {
  require_rank(scores, 4, "mask_keys");
  const int64_t batch = scores.dim(0), heads = scores.dim(1), tq = scores.dim(2), tk = scores.dim(3);
  if (static_cast<int64_t>(key_valid.size()) != batch * tk) throw ShapeError("mask_keys: mask size");
  constexpr T kMasked = T(-1e30);
  std::vector<uint8_t> keep(key_valid.begin(), key_valid.end());
  const auto ss = scores.data();
  std::vector<T> out(ss.begin(), ss.end());
  for (int64_t b = 0; b < batch; ++b)
    for (int64_t h = 0; h < heads; ++h)
      for (int64_t i = 0; i < tq; ++i)
        for (int64_t j = 0; j < tk; ++j)
          if (!keep[static_cast<size_t>(b * tk + j)]) out[static_cast<size_t>(((b * heads + h) * tq + i) * tk + j)] = kMasked;
  auto si = scores.impl_ptr();
  return make_result<T>(scores.shape(), std::move(out), "mask_keys", {scores},
                        [si, keep = std::move(keep), heads, tq, tk](std::span<const T> g) {
                          auto gs = grad_of(si);
                          if (gs.empty()) return;
                          for (size_t k = 0; k < g.size(); ++k) {
                            const int64_t j = static_cast<int64_t>(k) % tk;
                            const int64_t b = static_cast<int64_t>(k) / (heads * tq * tk);
                            if (keep[static_cast<size_t>(b * tk + j)]) gs[k] += g[k];
                          }
                        });
}

template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& x) {
  T acc = 0;
  for (T v : x.data()) acc += v;
  auto xi = x.impl_ptr();
  return make_result<T>(Shape{1}, std::vector<T>{acc}, "sum", {x}, [xi](std::span<const T> g) {
    auto gx = grad_of(xi);
    for (auto& v : gx) v += g[0];
  });
}

template <typename T>
BasicTensor<T> mean(const BasicTensor<T>& x) {
  if (x.numel() == 0) throw ShapeError("mean of empty tensor");
  T acc = 0;
  for (T v : x.data()) acc += v;
  const T count = T(x.numel());
  auto xi = x.impl_ptr();
  return make_result<T>(Shape{1}, std::vector<T>{acc / count}, "mean", {x},
                        [xi, count](std::span<const T> g) {
                          auto gx = grad_of(xi);
                          for (auto& v : gx) v += g[0] / count;
                        });
}

template <typename T>
BasicTensor<T> l1_loss(const BasicTensor<T>& prediction, const BasicTensor<T>& target) {
  require_same_shape(prediction, target, "l1_loss");
  if (prediction.numel() == 0) throw ShapeError("l1_loss of empty tensors");
  const auto ps = prediction.data(), ts = target.data();
  T acc = 0;
  for (size_t i = 0; i < ps.size(); ++i) acc += std::abs(ps[i] - ts[i]);
  const T count = T(ps.size());
  auto pi = prediction.impl_ptr(), ti = target.impl_ptr();
  return make_result<T>(Shape{1}, std::vector<T>{acc / count}, "l1_loss", {prediction, target},
                        [pi, ti, count](std::span<const T> g) {
                          auto gp = grad_of(pi);
                          auto gt = grad_of(ti);
                          const T s = g[0] / count;
                          for (size_t i = 0; i < pi->data.size(); ++i) {
                            const T d = pi->data[i] - ti->data[i];
                            const T sg = d > 0 ? T(1) : (d < 0 ? T(-1) : T(0));
                            if (!gp.empty()) gp[i] += s * sg;
                            if (!gt.empty()) gt[i] -= s * sg;
                          }
                        });
}

template <typename T>
BasicTensor<T> gather(const BasicTensor<T>& x, const Shape& out_shape, IndexMap index) {
  if (!index || static_cast<int64_t>(index->size()) != out_shape.numel()) {
    throw ShapeError("gather: index map does not cover " + out_shape.str());
  }
  const int64_t limit = x.numel();
  for (int64_t v : *index) {
    if (v >= limit) throw ShapeError("gather: index out of range");
  }
  std::vector<T> out(index->size());
  kernels::parallel::gather<T>(*index, x.data().data(), out.data());
  auto xi = x.impl_ptr();
  return make_result<T>(out_shape, std::move(out), "gather", {x}, [xi, index](std::span<const T> g) {
    auto gx = grad_of(xi);
    if (gx.empty()) return;
    const auto& idx = *index;
    for (size_t i = 0; i < idx.size(); ++i)
      if (idx[i] >= 0) gx[static_cast<size_t>(idx[i])] += g[i];
  });
}

template <typename T>
BasicTensor<T> sparse_apply(const BasicTensor<T>& x, const Shape& out_shape,
                            std::shared_ptr<const SparseMap> map) {
  if (!map || static_cast<int64_t>(map->row_ptr.size()) != out_shape.numel() + 1) {
    throw ShapeError("sparse_apply: map rows do not match " + out_shape.str());
  }
  const auto xs = x.data();
  for (int64_t c : map->cols) {
    if (c < 0 || c >= x.numel()) throw ShapeError("sparse_apply: column out of range");
  }
  std::vector<T> out(static_cast<size_t>(out_shape.numel()));
  for (size_t i = 0; i < out.size(); ++i) {
    T acc = 0;
    for (int64_t k = map->row_ptr[i]; k < map->row_ptr[i + 1]; ++k) {
      acc += T(map->weights[static_cast<size_t>(k)]) * xs[static_cast<size_t>(map->cols[static_cast<size_t>(k)])];
    }
    out[i] = acc;
  }
  auto xi = x.impl_ptr();
  return make_result<T>(out_shape, std::move(out), "sparse_apply", {x}, [xi, map](std::span<const T> g) {
    auto gx = grad_of(xi);
    if (gx.empty()) return;
    for (size_t i = 0; i + 1 < map->row_ptr.size(); ++i)
      for (int64_t k = map->row_ptr[i]; k < map->row_ptr[i + 1]; ++k)
        gx[static_cast<size_t>(map->cols[static_cast<size_t>(k)])] += T(map->weights[static_cast<size_t>(k)]) * g[i];
  });
}

template <typename T>
BasicTensor<T> split_heads(const BasicTensor<T>& x, int64_t heads, int64_t part, int64_t parts) {
  require_rank(x, 3, "split_heads");
  const int64_t b = x.dim(0), t = x.dim(1), width = x.dim(2);
  if (heads < 1 || parts < 1 || part < 0 || part >= parts || width % (heads * parts) != 0) {
    throw ShapeError("split_heads: width " + std::to_string(width) + " not divisible into " +
                     std::to_string(parts) + " x " + std::to_string(heads) + " heads");
  }
  const int64_t d = width / (heads * parts);
  const Shape out_shape{b, heads, t, d};
  auto idx = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(out_shape.numel()));
  size_t o = 0;
  for (int64_t bb = 0; bb < b; ++bb)
    for (int64_t h = 0; h < heads; ++h)
      for (int64_t tt = 0; tt < t; ++tt)
        for (int64_t e = 0; e < d; ++e) (*idx)[o++] = (bb * t + tt) * width + part * heads * d + h * d + e;
  return gather(x, out_shape, idx);
}

template <typename T>
BasicTensor<T> merge_heads(const BasicTensor<T>& x) {
  require_rank(x, 4, "merge_heads");
  const int64_t b = x.dim(0), heads = x.dim(1), t = x.dim(2), d = x.dim(3);
  const Shape out_shape{b, t, heads * d};
  auto idx = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(out_shape.numel()));
  size_t o = 0;
  for (int64_t bb = 0; bb < b; ++bb)
    for (int64_t tt = 0; tt < t; ++tt)
      for (int64_t h = 0; h < heads; ++h)
        for (int64_t e = 0; e < d; ++e) (*idx)[o++] = ((bb * heads + h) * t + tt) * d + e;
  return gather(x, out_shape, idx);
}

#define MAXSR_INSTANTIATE(T)                                                                       \
  template BasicTensor<T> conv2d(const BasicTensor<T>&, const BasicTensor<T>&,                     \
                                 const BasicTensor<T>&, int64_t, int64_t, int64_t);                \
  template BasicTensor<T> batched_matmul(const BasicTensor<T>&, const BasicTensor<T>&);            \
  template BasicTensor<T> transpose_last2(const BasicTensor<T>&);                                  \
  template BasicTensor<T> linear(const BasicTensor<T>&, const BasicTensor<T>&,                     \
                                 const BasicTensor<T>&);                                           \
  template BasicTensor<T> softmax_lastdim(const BasicTensor<T>&);                                  \
  template BasicTensor<T> layer_norm(const BasicTensor<T>&, const BasicTensor<T>&,                 \
                                     const BasicTensor<T>&, T);                                    \
  template BasicTensor<T> batch_norm(const BasicTensor<T>&, const BasicTensor<T>&,                 \
                                     const BasicTensor<T>&, BasicTensor<T>&, BasicTensor<T>&,      \
                                     bool, T, T);                                                  \
  template BasicTensor<T> pixel_shuffle(const BasicTensor<T>&, int64_t);                           \
  template BasicTensor<T> pixel_unshuffle(const BasicTensor<T>&, int64_t);                         \
  template BasicTensor<T> global_avg_pool(const BasicTensor<T>&);                                  \
  template BasicTensor<T> add(const BasicTensor<T>&, const BasicTensor<T>&);                       \
  template BasicTensor<T> sub(const BasicTensor<T>&, const BasicTensor<T>&);                       \
  template BasicTensor<T> mul(const BasicTensor<T>&, const BasicTensor<T>&);                       \
  template BasicTensor<T> scale(const BasicTensor<T>&, T);                                         \
  template BasicTensor<T> gelu(const BasicTensor<T>&);                                             \
  template BasicTensor<T> sigmoid(const BasicTensor<T>&);                                          \
  template BasicTensor<T> relu(const BasicTensor<T>&);                                             \
  template BasicTensor<T> abs(const BasicTensor<T>&);                                              \
  template BasicTensor<T> concat_channels(const std::vector<BasicTensor<T>>&);                     \
  template BasicTensor<T> scale_channels(const BasicTensor<T>&, const BasicTensor<T>&);            \
  template BasicTensor<T> add_head_bias(const BasicTensor<T>&, const BasicTensor<T>&);             \
  template BasicTensor<T> mask_keys(const BasicTensor<T>&, std::span<const uint8_t>);              \
  template BasicTensor<T> sum(const BasicTensor<T>&);                                              \
  template BasicTensor<T> mean(const BasicTensor<T>&);                                             \
  template BasicTensor<T> l1_loss(const BasicTensor<T>&, const BasicTensor<T>&);                   \
  template BasicTensor<T> gather(const BasicTensor<T>&, const Shape&, IndexMap);                   \
  template BasicTensor<T> sparse_apply(const BasicTensor<T>&, const Shape&,                        \
                                       std::shared_ptr<const SparseMap>);                          \
  template BasicTensor<T> split_heads(const BasicTensor<T>&, int64_t, int64_t, int64_t);           \
  template BasicTensor<T> merge_heads(const BasicTensor<T>&);

MAXSR_INSTANTIATE(float)
MAXSR_INSTANTIATE(double)
#undef MAXSR_INSTANTIATE

}  // namespace maxsr
