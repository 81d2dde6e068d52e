#pragma once

// Raw compute kernels behind the differentiable ops.
//
// Every kernel exists twice: `serial` is the plain reference loop nest and
// `parallel` distributes the outermost independent axis with OpenMP. Both
// keep the same per-output accumulation order, so their results are
// bit-identical; tests/test_kernels.cpp holds them to that.

#include <cstdint>
#include <span>

namespace maxsr::kernels {

struct ConvGeometry {
  int64_t batch = 1;
  int64_t in_channels = 1;
  int64_t out_channels = 1;
  int64_t in_h = 1, in_w = 1;
  int64_t kernel_h = 1, kernel_w = 1;
  int64_t stride = 1;
  int64_t pad = 0;
  int64_t groups = 1;

  int64_t out_h() const { return (in_h + 2 * pad - kernel_h) / stride + 1; }
  int64_t out_w() const { return (in_w + 2 * pad - kernel_w) / stride + 1; }
  int64_t in_per_group() const { return in_channels / groups; }
  int64_t out_per_group() const { return out_channels / groups; }
};

// C[b] (m x n) = op(A[b]) * op(B[b]) (+ C[b] when accumulate).
// op(A) is m x k: A is stored m x k, or k x m when trans_a.
// op(B) is k x n: B is stored k x n, or n x k when trans_b.
struct GemmShape {
  int64_t batch = 1;
  int64_t m = 1, n = 1, k = 1;
  bool trans_a = false;
  bool trans_b = false;
  bool accumulate = false;
};

#define MAXSR_KERNEL_SET                                                                        \
  template <typename T>                                                                         \
  void conv2d_forward(const ConvGeometry& g, const T* x, const T* w, const T* bias, T* y);     \
  template <typename T>                                                                         \
  void conv2d_backward_input(const ConvGeometry& g, const T* gy, const T* w, T* gx);           \
  template <typename T>                                                                         \
  void conv2d_backward_weight(const ConvGeometry& g, const T* gy, const T* x, T* gw, T* gb);   \
  template <typename T>                                                                         \
  void gemm(const GemmShape& s, const T* a, const T* b, T* c);                                 \
  template <typename T>                                                                         \
  void softmax_rows(int64_t rows, int64_t cols, const T* x, T* y);                              \
  template <typename T>                                                                         \
  void gather(std::span<const int64_t> index, const T* x, T* y);

namespace serial {
MAXSR_KERNEL_SET
}  // namespace serial

namespace parallel {
MAXSR_KERNEL_SET
}  // namespace parallel

#undef MAXSR_KERNEL_SET

// Number of worker threads the parallel kernels will use; 1 without OpenMP.
int max_threads();
// Caps the parallel kernels' thread count (values < 1 are ignored).
void set_max_threads(int n);
// Applies MAXSR_THREADS from the environment, if set.
void apply_thread_env();

}  // namespace maxsr::kernels
