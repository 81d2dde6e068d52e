#pragma once

#include <random>
#include <vector>

#include "maxsr/tensor.hpp"

namespace testutil {

template <typename T = double>
maxsr::BasicTensor<T> random_tensor(const maxsr::Shape& s, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> d(lo, hi);
  std::vector<T> v(static_cast<size_t>(s.numel()));
  for (auto& e : v) e = static_cast<T>(d(rng));
  return maxsr::BasicTensor<T>(s, std::move(v));
}

template <typename T>
std::vector<T> values(const maxsr::BasicTensor<T>& t) {
  return {t.data().begin(), t.data().end()};
}

}  // namespace testutil
