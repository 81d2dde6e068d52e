#pragma once

#include <functional>
#include <span>

#include "maxsr/tensor.hpp"

namespace maxsr {

// Central differences (f(x + eps e_i) - f(x - eps e_i)) / (2 eps) for every
// element of x. Runs f with grad mode off and restores x afterwards.
Tensor64 finite_diff_grad(const std::function<double(const Tensor64&)>& f, Tensor64 x,
                          double eps = 1e-5);

// max_i |a_i - b_i| / max(|a_i|, |b_i|, floor)
double max_relative_error(std::span<const double> analytic, std::span<const double> numeric,
                          double floor = 1e-6);

}  // namespace maxsr

#include <cstdint>
#include <string>
#include <vector>

namespace maxsr {

struct GradcheckCase {
  std::string name;
  int64_t checked = 0;  // scalar entries compared
  double max_rel_error = 0.0;
  bool passed = false;
};

struct GradcheckOptions {
  uint64_t seed = 0;
  double tolerance = 1e-4;
  // Central-difference step. At 1e-5 roundoff already dominates on the
  // network-sized cases; 3e-5 balances it against truncation error.
  double eps = 3e-5;
  bool include_network = true;
  // Test hook: scales every analytic gradient by 1.01 so the suite must fail.
  bool corrupt_analytic = false;
};

// Every differentiable op, the attention paths, one AMTB and the toy network
// (W=4, B=2, S=2, heads=2, 8x8 input, x2), all in 64-bit.
std::vector<GradcheckCase> run_gradcheck_suite(const GradcheckOptions& options = {});

}  // namespace maxsr
