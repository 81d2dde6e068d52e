#include "maxsr/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <string>

#ifdef MAXSR_OPENMP
#include <omp.h>
#endif

namespace maxsr::kernels {

namespace {

// Output columns ow for which ow*stride - pad + kw lands inside [0, in_w).
inline void valid_range(int64_t in_extent, int64_t out_extent, int64_t stride, int64_t pad,
                        int64_t k, int64_t& lo, int64_t& hi) {
  // smallest o with o*stride >= pad - k
  int64_t num = pad - k;
  lo = num <= 0 ? 0 : (num + stride - 1) / stride;
  // largest o with o*stride <= in_extent - 1 + pad - k
  int64_t top = in_extent - 1 + pad - k;
  hi = top < 0 ? -1 : std::min(out_extent - 1, top / stride);
}

template <typename T>
void conv_forward_plane(const ConvGeometry& g, const T* x, const T* w, const T* bias, T* y,
                        int64_t n, int64_t co) {
  const int64_t oh_n = g.out_h(), ow_n = g.out_w();
  const int64_t ipg = g.in_per_group();
  T* yp = y + (n * g.out_channels + co) * oh_n * ow_n;
  const T b0 = bias ? bias[co] : T(0);
  std::fill(yp, yp + oh_n * ow_n, b0);
  const int64_t ci0 = (co / g.out_per_group()) * ipg;
  for (int64_t cig = 0; cig < ipg; ++cig) {
    const T* xp = x + (n * g.in_channels + ci0 + cig) * g.in_h * g.in_w;
    const T* wp = w + (co * ipg + cig) * g.kernel_h * g.kernel_w;
    for (int64_t kh = 0; kh < g.kernel_h; ++kh) {
      int64_t oh_lo, oh_hi;
      valid_range(g.in_h, oh_n, g.stride, g.pad, kh, oh_lo, oh_hi);
      for (int64_t kw = 0; kw < g.kernel_w; ++kw) {
        const T wv = wp[kh * g.kernel_w + kw];
        int64_t ow_lo, ow_hi;
        valid_range(g.in_w, ow_n, g.stride, g.pad, kw, ow_lo, ow_hi);
        for (int64_t oh = oh_lo; oh <= oh_hi; ++oh) {
          const T* xrow = xp + (oh * g.stride - g.pad + kh) * g.in_w - g.pad + kw;
          T* yrow = yp + oh * ow_n;
          if (g.stride == 1) {
            for (int64_t ow = ow_lo; ow <= ow_hi; ++ow) yrow[ow] += wv * xrow[ow];
          } else {
            for (int64_t ow = ow_lo; ow <= ow_hi; ++ow) yrow[ow] += wv * xrow[ow * g.stride];
          }
        }
      }
    }
  }
}

template <typename T>
void conv_backward_input_plane(const ConvGeometry& g, const T* gy, const T* w, T* gx, int64_t n,
                               int64_t ci) {
  const int64_t oh_n = g.out_h(), ow_n = g.out_w();
  const int64_t ipg = g.in_per_group(), opg = g.out_per_group();
  const int64_t grp = ci / ipg, cig = ci % ipg;
  T* gxp = gx + (n * g.in_channels + ci) * g.in_h * g.in_w;
  for (int64_t j = 0; j < opg; ++j) {
    const int64_t co = grp * opg + j;
    const T* gyp = gy + (n * g.out_channels + co) * oh_n * ow_n;
    const T* wp = w + (co * ipg + cig) * g.kernel_h * g.kernel_w;
    for (int64_t kh = 0; kh < g.kernel_h; ++kh) {
      int64_t oh_lo, oh_hi;
      valid_range(g.in_h, oh_n, g.stride, g.pad, kh, oh_lo, oh_hi);
      for (int64_t kw = 0; kw < g.kernel_w; ++kw) {
        const T wv = wp[kh * g.kernel_w + kw];
        int64_t ow_lo, ow_hi;
        valid_range(g.in_w, ow_n, g.stride, g.pad, kw, ow_lo, ow_hi);
        for (int64_t oh = oh_lo; oh <= oh_hi; ++oh) {
          T* xrow = gxp + (oh * g.stride - g.pad + kh) * g.in_w - g.pad + kw;
          const T* grow = gyp + oh * ow_n;
          for (int64_t ow = ow_lo; ow <= ow_hi; ++ow) xrow[ow * g.stride] += wv * grow[ow];
        }
      }
    }
  }
}

template <typename T>
void conv_backward_weight_channel(const ConvGeometry& g, const T* gy, const T* x, T* gw, T* gb,
                                  int64_t co) {
  const int64_t oh_n = g.out_h(), ow_n = g.out_w();
  const int64_t ipg = g.in_per_group();
  const int64_t ci0 = (co / g.out_per_group()) * ipg;
  if (gb) {
    T acc = 0;
    for (int64_t n = 0; n < g.batch; ++n) {
      const T* gyp = gy + (n * g.out_channels + co) * oh_n * ow_n;
      for (int64_t i = 0; i < oh_n * ow_n; ++i) acc += gyp[i];
    }
    gb[co] += acc;
  }
  for (int64_t cig = 0; cig < ipg; ++cig) {
    T* wp = gw + (co * ipg + cig) * g.kernel_h * g.kernel_w;
    for (int64_t kh = 0; kh < g.kernel_h; ++kh) {
      int64_t oh_lo, oh_hi;
      valid_range(g.in_h, oh_n, g.stride, g.pad, kh, oh_lo, oh_hi);
      for (int64_t kw = 0; kw < g.kernel_w; ++kw) {
        int64_t ow_lo, ow_hi;
        valid_range(g.in_w, ow_n, g.stride, g.pad, kw, ow_lo, ow_hi);
        T acc = 0;
        for (int64_t n = 0; n < g.batch; ++n) {
          const T* xp = x + (n * g.in_channels + ci0 + cig) * g.in_h * g.in_w;
          const T* gyp = gy + (n * g.out_channels + co) * oh_n * ow_n;
          for (int64_t oh = oh_lo; oh <= oh_hi; ++oh) {
            const T* xrow = xp + (oh * g.stride - g.pad + kh) * g.in_w - g.pad + kw;
            const T* grow = gyp + oh * ow_n;
            for (int64_t ow = ow_lo; ow <= ow_hi; ++ow) acc += grow[ow] * xrow[ow * g.stride];
          }
        }
        wp[kh * g.kernel_w + kw] += acc;
      }
    }
  }
}

// One output row of one batch entry.
template <typename T>
void gemm_row(const GemmShape& s, const T* a, const T* b, T* c, int64_t bi, int64_t i) {
  const T* ab = a + bi * s.m * s.k;
  const T* bb = b + bi * s.k * s.n;
  T* crow = c + (bi * s.m + i) * s.n;
  if (!s.accumulate) std::fill(crow, crow + s.n, T(0));
  if (s.trans_b) {
    // B stored n x k: dot products over contiguous rows of B.
    for (int64_t j = 0; j < s.n; ++j) {
      const T* brow = bb + j * s.k;
      T acc = 0;
      if (s.trans_a) {
        for (int64_t p = 0; p < s.k; ++p) acc += ab[p * s.m + i] * brow[p];
      } else {
        const T* arow = ab + i * s.k;
        for (int64_t p = 0; p < s.k; ++p) acc += arow[p] * brow[p];
      }
      crow[j] += acc;
    }
    return;
  }
  for (int64_t p = 0; p < s.k; ++p) {
    const T av = s.trans_a ? ab[p * s.m + i] : ab[i * s.k + p];
    const T* brow = bb + p * s.n;
    for (int64_t j = 0; j < s.n; ++j) crow[j] += av * brow[j];
  }
}

template <typename T>
void softmax_row(int64_t cols, const T* x, T* y) {
  T mx = x[0];
  for (int64_t j = 1; j < cols; ++j) mx = std::max(mx, x[j]);
  T sum = 0;
  for (int64_t j = 0; j < cols; ++j) {
    y[j] = std::exp(x[j] - mx);
    sum += y[j];
  }
  const T inv = T(1) / sum;
  for (int64_t j = 0; j < cols; ++j) y[j] *= inv;
}

}  // namespace

namespace serial {

template <typename T>
void conv2d_forward(const ConvGeometry& g, const T* x, const T* w, const T* bias, T* y) {
  for (int64_t n = 0; n < g.batch; ++n)
    for (int64_t co = 0; co < g.out_channels; ++co) conv_forward_plane(g, x, w, bias, y, n, co);
}

template <typename T>
void conv2d_backward_input(const ConvGeometry& g, const T* gy, const T* w, T* gx) {
  for (int64_t n = 0; n < g.batch; ++n)
    for (int64_t ci = 0; ci < g.in_channels; ++ci) conv_backward_input_plane(g, gy, w, gx, n, ci);
}

template <typename T>
void conv2d_backward_weight(const ConvGeometry& g, const T* gy, const T* x, T* gw, T* gb) {
  for (int64_t co = 0; co < g.out_channels; ++co) conv_backward_weight_channel(g, gy, x, gw, gb, co);
}

template <typename T>
void gemm(const GemmShape& s, const T* a, const T* b, T* c) {
  for (int64_t bi = 0; bi < s.batch; ++bi)
    for (int64_t i = 0; i < s.m; ++i) gemm_row(s, a, b, c, bi, i);
}

template <typename T>
void softmax_rows(int64_t rows, int64_t cols, const T* x, T* y) {
  for (int64_t r = 0; r < rows; ++r) softmax_row(cols, x + r * cols, y + r * cols);
}

template <typename T>
void gather(std::span<const int64_t> index, const T* x, T* y) {
  for (size_t i = 0; i < index.size(); ++i) y[i] = index[i] < 0 ? T(0) : x[index[i]];
}

}  // namespace serial

namespace parallel {

template <typename T>
void conv2d_forward(const ConvGeometry& g, const T* x, const T* w, const T* bias, T* y) {
  const int64_t planes = g.batch * g.out_channels;
#pragma omp parallel for schedule(static)
  for (int64_t p = 0; p < planes; ++p) {
    conv_forward_plane(g, x, w, bias, y, p / g.out_channels, p % g.out_channels);
  }
}

template <typename T>
void conv2d_backward_input(const ConvGeometry& g, const T* gy, const T* w, T* gx) {
  const int64_t planes = g.batch * g.in_channels;
#pragma omp parallel for schedule(static)
  for (int64_t p = 0; p < planes; ++p) {
    conv_backward_input_plane(g, gy, w, gx, p / g.in_channels, p % g.in_channels);
  }
}

template <typename T>
void conv2d_backward_weight(const ConvGeometry& g, const T* gy, const T* x, T* gw, T* gb) {
#pragma omp parallel for schedule(static)
  for (int64_t co = 0; co < g.out_channels; ++co) conv_backward_weight_channel(g, gy, x, gw, gb, co);
}

template <typename T>
void gemm(const GemmShape& s, const T* a, const T* b, T* c) {
  const int64_t rows = s.batch * s.m;
#pragma omp parallel for schedule(static)
  for (int64_t r = 0; r < rows; ++r) gemm_row(s, a, b, c, r / s.m, r % s.m);
}

template <typename T>
void softmax_rows(int64_t rows, int64_t cols, const T* x, T* y) {
#pragma omp parallel for schedule(static)
  for (int64_t r = 0; r < rows; ++r) softmax_row(cols, x + r * cols, y + r * cols);
}

template <typename T>
void gather(std::span<const int64_t> index, const T* x, T* y) {
  const int64_t n = static_cast<int64_t>(index.size());
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < n; ++i) y[i] = index[i] < 0 ? T(0) : x[index[i]];
}

}  // namespace parallel

int max_threads() {
#ifdef MAXSR_OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

void set_max_threads(int n) {
#ifdef MAXSR_OPENMP
  if (n >= 1) omp_set_num_threads(n);
#else
  (void)n;
#endif
}

void apply_thread_env() {
  if (const char* v = std::getenv("MAXSR_THREADS")) {
    try {
      set_max_threads(std::stoi(v));
    } catch (const std::exception&) {
      // malformed values leave the OpenMP default in place
    }
  }
}

#define MAXSR_INSTANTIATE_NS(NS, T)                                                           \
  template void NS::conv2d_forward<T>(const ConvGeometry&, const T*, const T*, const T*, T*); \
  template void NS::conv2d_backward_input<T>(const ConvGeometry&, const T*, const T*, T*);     \
  template void NS::conv2d_backward_weight<T>(const ConvGeometry&, const T*, const T*, T*, T*); \
  template void NS::gemm<T>(const GemmShape&, const T*, const T*, T*);                         \
  template void NS::softmax_rows<T>(int64_t, int64_t, const T*, T*);                           \
  template void NS::gather<T>(std::span<const int64_t>, const T*, T*);

MAXSR_INSTANTIATE_NS(serial, float)
MAXSR_INSTANTIATE_NS(serial, double)
MAXSR_INSTANTIATE_NS(parallel, float)
MAXSR_INSTANTIATE_NS(parallel, double)
#undef MAXSR_INSTANTIATE_NS

}  // namespace maxsr::kernels
