#pragma once

#include "maxsr/tensor.hpp"

namespace maxsr {

// code = k + 4*f for k quarter turns followed, when f = 1, by a vertical
// flip. One quarter turn maps pixel (i, j) of an h x w plane to (j, h-1-i).
constexpr int kDihedralCodes = 8;

void check_dihedral_code(int code);

// The code undoing `code`.
int inverse_dihedral_code(int code);

// Applies the transform to the two trailing axes. Not differentiable; the
// result is a fresh leaf.
template <typename T>
BasicTensor<T> apply_dihedral(const BasicTensor<T>& x, int code);

}  // namespace maxsr
