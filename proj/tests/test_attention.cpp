#include <cmath>
#include <random>

#include "doctest.h"
#include "helpers.hpp"
#include "maxsr/attention.hpp"
#include "maxsr/ops.hpp"

using namespace maxsr;
using testutil::random_tensor;
using testutil::values;

namespace {

AttentionParams<double> make_params(int64_t width, int64_t heads, std::mt19937_64& rng, int64_t rpe = 0) {
  AttentionParams<double> p;
  p.heads = heads;
  p.qkv_weight = random_tensor(Shape{3 * width, width}, rng);
  p.qkv_bias = random_tensor(Shape{3 * width}, rng);
  p.out_weight = random_tensor(Shape{width, width}, rng);
  p.out_bias = random_tensor(Shape{width}, rng);
  if (rpe > 0) {
    p.rpe_h = p.rpe_w = rpe;
    p.rpe_table = random_tensor(Shape{heads, (2 * rpe - 1) * (2 * rpe - 1)}, rng);
  }
  return p;
}

// [N,C,H,W] -> [N,H*W,C]
Tensor64 to_tokens(const Tensor64& x) {
  const int64_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  std::vector<double> v(static_cast<size_t>(x.numel()));
  for (int64_t b = 0; b < n; ++b)
    for (int64_t ch = 0; ch < c; ++ch)
      for (int64_t t = 0; t < hw; ++t) v[static_cast<size_t>((b * hw + t) * c + ch)] = x.data()[static_cast<size_t>((b * c + ch) * hw + t)];
  return Tensor64(Shape{n, hw, c}, v);
}

}  // namespace

TEST_CASE("single token attends to itself") {
  std::mt19937_64 rng(41);
  auto p = make_params(4, 2, rng);
  auto tok = random_tensor(Shape{1, 1, 4}, rng);
  auto out = multihead_self_attention(tok, p);
  // V(token) then the output projection
  std::vector<double> v(4), expect(4);
  for (int i = 0; i < 4; ++i) {
    double s = p.qkv_bias.data()[static_cast<size_t>(8 + i)];
    for (int j = 0; j < 4; ++j) s += p.qkv_weight.at(std::array<int64_t, 2>{8 + i, j}) * tok.data()[static_cast<size_t>(j)];
    v[static_cast<size_t>(i)] = s;
  }
  for (int i = 0; i < 4; ++i) {
    double s = p.out_bias.data()[static_cast<size_t>(i)];
    for (int j = 0; j < 4; ++j) s += p.out_weight.at(std::array<int64_t, 2>{i, j}) * v[static_cast<size_t>(j)];
    CHECK(out.data()[static_cast<size_t>(i)] == doctest::Approx(s).epsilon(1e-12));
  }
}

TEST_CASE("identical tokens give identical outputs") {
  std::mt19937_64 rng(42);
  auto p = make_params(6, 3, rng);
  auto one = random_tensor(Shape{1, 1, 6}, rng);
  std::vector<double> v(one.data().begin(), one.data().end());
  v.insert(v.end(), one.data().begin(), one.data().end());
  auto out = multihead_self_attention(Tensor64(Shape{1, 2, 6}, v), p);
  for (int i = 0; i < 6; ++i) CHECK(out.data()[static_cast<size_t>(i)] == out.data()[static_cast<size_t>(6 + i)]);
}

TEST_CASE("two-token scalar attention closed form") {
  AttentionParams<double> p;
  p.heads = 1;
  p.qkv_weight = Tensor64(Shape{3, 1}, {0.5, 2.0, -1.0});
  p.qkv_bias = Tensor64(Shape{3}, {0.1, 0.0, 0.3});
  p.out_weight = Tensor64(Shape{1, 1}, {1.5});
  p.out_bias = Tensor64(Shape{1}, {-0.2});
  const double x0 = 0.7, x1 = -1.2;
  auto out = multihead_self_attention(Tensor64(Shape{1, 2, 1}, {x0, x1}), p);
  const double k0 = 2 * x0, k1 = 2 * x1, v0 = -x0 + 0.3, v1 = -x1 + 0.3;
  for (int i = 0; i < 2; ++i) {
    const double q = 0.5 * (i == 0 ? x0 : x1) + 0.1;
    const double e0 = std::exp(q * k0), e1 = std::exp(q * k1);
    const double a = (e0 * v0 + e1 * v1) / (e0 + e1);
    CHECK(out.data()[static_cast<size_t>(i)] == doctest::Approx(1.5 * a - 0.2).epsilon(1e-12));
  }
  p.heads = 2;  // width 1 is not divisible by 2 heads
  CHECK_THROWS_AS(multihead_self_attention(Tensor64(Shape{1, 2, 1}, {x0, x1}), p), ShapeError);
}

TEST_CASE("partitioned attention on a 1x1 map is plain MHSA") {
  std::mt19937_64 rng(43);
  auto p = make_params(4, 2, rng);
  auto x = random_tensor(Shape{1, 4, 1, 1}, rng);
  auto ref = multihead_self_attention(x.reshape(Shape{1, 1, 4}), p);
  for (auto m : {AttentionMode::exact(), AttentionMode::approx()}) {
    CHECK(values(adaptive_block_attention(x, p, m)) == values(ref));
    CHECK(values(adaptive_grid_attention(x, p, m)) == values(ref));
  }
}

TEST_CASE("single window and single cell match MHSA on the full token set") {
  std::mt19937_64 rng(44);
  auto p = make_params(4, 2, rng);
  auto x = random_tensor(Shape{2, 4, 2, 2}, rng);
  // fixed:2 on a 2x2 map: one window and one cell, both covering everything
  auto ref = multihead_self_attention(to_tokens(x), p);
  auto check_same = [&](const Tensor64& y) {
    REQUIRE(y.shape() == x.shape());
    double worst = 0;
    for (int64_t n = 0; n < 2; ++n)
      for (int64_t c = 0; c < 4; ++c)
        for (int64_t t = 0; t < 4; ++t)
          worst = std::max(worst, std::abs(y.at(n, c, t / 2, t % 2) - ref.data()[static_cast<size_t>((n * 4 + t) * 4 + c)]));
    CHECK(worst < 1e-12);
  };
  check_same(adaptive_block_attention(x, p, AttentionMode::fixed(2)));
  check_same(adaptive_grid_attention(x, p, AttentionMode::fixed(2)));
}

TEST_CASE("shape preservation") {
  std::mt19937_64 rng(45);
  auto p = make_params(8, 2, rng);
  auto x = random_tensor<double>(Shape{2, 8, 50, 50}, rng);
  CHECK(adaptive_block_attention(x, p, AttentionMode::exact()).shape() == x.shape());
  CHECK(adaptive_grid_attention(x, p, AttentionMode::exact()).shape() == x.shape());
  auto q = make_params(4, 2, rng);
  for (int64_t h = 1; h <= 33; h += 4)
    for (int64_t w = 1; w <= 33; w += 5)
      for (auto m : {AttentionMode::exact(), AttentionMode::approx(), AttentionMode::fixed(4)}) {
        auto xi = random_tensor(Shape{1, 4, h, w}, rng);
        CHECK(adaptive_block_attention(xi, q, m).shape() == xi.shape());
        CHECK(adaptive_grid_attention(xi, q, m, {true}).shape() == xi.shape());
      }
}

TEST_CASE("masked attention is local to its window or cell") {
  std::mt19937_64 rng(46);
  auto p = make_params(4, 2, rng);
  auto x = random_tensor(Shape{1, 4, 7, 6}, rng);
  const auto mode = AttentionMode::exact();
  const auto plan = adaptive_footage(7, 6, mode);
  auto x2 = x.detach();
  // perturb pixel (1, 4)
  for (int64_t c = 0; c < 4; ++c) x2.mutable_data()[static_cast<size_t>((c * 7 + 1) * 6 + 4)] += 0.5;
  const AttentionOptions masked{true};
  auto a = adaptive_block_attention(x, p, mode, masked), b = adaptive_block_attention(x2, p, mode, masked);
  auto ga = adaptive_grid_attention(x, p, mode, masked), gb = adaptive_grid_attention(x2, p, mode, masked);
  const int64_t sh = plan.cell_stride_h(), sw = plan.cell_stride_w();
  for (int64_t i = 0; i < 7; ++i)
    for (int64_t j = 0; j < 6; ++j) {
      const bool same_window = i / plan.win_h == 1 / plan.win_h && j / plan.win_w == 4 / plan.win_w;
      const bool same_cell = i % sh == 1 % sh && j % sw == 4 % sw;
      for (int64_t c = 0; c < 4; ++c) {
        if (!same_window) CHECK(a.at(0, c, i, j) == b.at(0, c, i, j));
        if (!same_cell) CHECK(ga.at(0, c, i, j) == gb.at(0, c, i, j));
      }
    }
}

TEST_CASE("relative position bias indexing") {
  Tensor64 one(Shape{2, 1}, {0.3, -0.4});
  auto b1 = relative_position_bias(1, 1, one, 2);
  CHECK(b1.shape() == Shape{2, 1, 1});
  CHECK(values(b1) == std::vector<double>{0.3, -0.4});
  Tensor64 t(Shape{1, 3}, {10, 20, 30});  // offsets -1, 0, +1
  auto b = relative_position_bias(2, 1, t, 1);
  CHECK(values(b) == std::vector<double>{20, 10, 30, 20});
  CHECK_THROWS_AS(relative_position_bias(2, 2, t, 1), ShapeError);
}

TEST_CASE("zero rpe table equals rpe off") {
  std::mt19937_64 rng(47);
  auto p = make_params(4, 2, rng);
  auto q = p;
  q.rpe_h = q.rpe_w = 3;
  q.rpe_table = Tensor64::zeros(Shape{2, 25});
  auto x = random_tensor(Shape{1, 4, 9, 9}, rng);
  CHECK(values(adaptive_block_attention(x, p, AttentionMode::exact())) ==
        values(adaptive_block_attention(x, q, AttentionMode::exact())));
  CHECK(values(adaptive_grid_attention(x, p, AttentionMode::exact())) ==
        values(adaptive_grid_attention(x, q, AttentionMode::exact())));
  // a table built for another footage is resized, still zero
  auto y = random_tensor(Shape{1, 4, 5, 7}, rng);
  CHECK(values(adaptive_block_attention(y, p, AttentionMode::exact())) ==
        values(adaptive_block_attention(y, q, AttentionMode::exact())));
}

TEST_CASE("rpe table resize") {
  std::mt19937_64 rng(48);
  auto t = random_tensor(Shape{2, 5 * 7}, rng);
  CHECK(values(resize_rpe_table(t, 3, 4, 3, 4)) == values(t));
  auto r = resize_rpe_table(t, 3, 4, 5, 2);
  CHECK(r.shape() == Shape{2, 9 * 3});
  // the zero-offset entry stays put
  CHECK(r.data()[4 * 3 + 1] == doctest::Approx(t.data()[2 * 7 + 3]));
  auto c = resize_rpe_table(Tensor64::full(Shape{1, 9}, 0.25), 2, 2, 4, 4);
  for (double v : c.data()) CHECK(v == doctest::Approx(0.25));
}
