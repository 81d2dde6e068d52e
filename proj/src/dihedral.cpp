#include "maxsr/dihedral.hpp"

#include <stdexcept>
#include <string>
#include <vector>

namespace maxsr {

void check_dihedral_code(int code) {
  if (code < 0 || code >= kDihedralCodes) {
    throw std::invalid_argument("dihedral code must be in [0, 7], got " + std::to_string(code));
  }
}

int inverse_dihedral_code(int code) {
  check_dihedral_code(code);
  // A flip conjugates a rotation into its inverse, so flipped codes are involutions.
  if (code >= 4) return code;
  return (4 - code) % 4;
}

template <typename T>
BasicTensor<T> apply_dihedral(const BasicTensor<T>& x, int code) {
  check_dihedral_code(code);
  if (x.rank() < 2) throw ShapeError("apply_dihedral needs at least two axes, got " + x.shape().str());
  const int r = x.rank();
  const int quarter_turns = code % 4;
  const bool flip = code >= 4;

  std::vector<int64_t> dims(x.shape().dims().begin(), x.shape().dims().end());
  int64_t h = dims[static_cast<size_t>(r - 2)];
  int64_t w = dims[static_cast<size_t>(r - 1)];
  const int64_t planes = x.numel() / (h * w);
  std::vector<T> cur(x.data().begin(), x.data().end());
  std::vector<T> next(cur.size());

  for (int t = 0; t < quarter_turns; ++t) {
    // out is w x h, out(j, h-1-i) = in(i, j)
    for (int64_t p = 0; p < planes; ++p) {
      const T* in = cur.data() + p * h * w;
      T* out = next.data() + p * h * w;
      for (int64_t i = 0; i < h; ++i)
        for (int64_t j = 0; j < w; ++j) out[j * h + (h - 1 - i)] = in[i * w + j];
    }
    std::swap(cur, next);
    std::swap(h, w);
  }
  if (flip) {
    for (int64_t p = 0; p < planes; ++p) {
      const T* in = cur.data() + p * h * w;
      T* out = next.data() + p * h * w;
      for (int64_t i = 0; i < h; ++i)
        for (int64_t j = 0; j < w; ++j) out[(h - 1 - i) * w + j] = in[i * w + j];
    }
    std::swap(cur, next);
  }
  dims[static_cast<size_t>(r - 2)] = h;
  dims[static_cast<size_t>(r - 1)] = w;
  return BasicTensor<T>(Shape(dims), std::move(cur));
}

template BasicTensor<float> apply_dihedral(const BasicTensor<float>&, int);
template BasicTensor<double> apply_dihedral(const BasicTensor<double>&, int);

}  // namespace maxsr
