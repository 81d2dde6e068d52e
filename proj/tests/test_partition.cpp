#include <map>
#include <random>
#include <set>

#include "doctest.h"
#include "helpers.hpp"
#include "maxsr/partition.hpp"

using namespace maxsr;
using testutil::random_tensor;
using testutil::values;

TEST_CASE("adaptive footage plans") {
  auto p = adaptive_footage(64, 64, AttentionMode::exact());
  CHECK(p.win_h == 8);
  CHECK(p.pad_h == 64);
  CHECK(p.n_win_h == 8);
  CHECK(p.grid_h == 8);
  p = adaptive_footage(50, 50, AttentionMode::exact());
  CHECK(p.win_h == 8);
  CHECK(p.pad_h == 64);
  p = adaptive_footage(50, 50, AttentionMode::approx());
  CHECK(p.win_h == 8);
  CHECK(p.pad_h == 56);
  CHECK(p.grid_h == 7);
  for (auto m : {AttentionMode::exact(), AttentionMode::approx(), AttentionMode::fixed(3)}) {
    auto one = adaptive_footage(1, 1, m);
    if (m.kind != FootageKind::kFixed) {
      CHECK(one.win_h == 1);
      CHECK(one.pad_h == 1);
    }
  }
  auto f = adaptive_footage(10, 17, AttentionMode::fixed(4));
  CHECK(f.win_h == 4);
  CHECK(f.grid_w == 4);
  CHECK(f.pad_h == 12);
  CHECK(f.pad_w == 20);
  CHECK_THROWS_AS(adaptive_footage(0, 3, AttentionMode::exact()), std::invalid_argument);
  CHECK_THROWS_AS(adaptive_footage(3, 3, AttentionMode::fixed(0)), std::invalid_argument);
}

TEST_CASE("plan invariants over a size sweep") {
  for (int64_t h = 1; h <= 40; ++h)
    for (int64_t w = 1; w <= 40; w += 3)
      for (auto m : {AttentionMode::exact(), AttentionMode::approx(), AttentionMode::fixed(5)}) {
        auto p = adaptive_footage(h, w, m);
        CHECK_NOTHROW(validate_plan(p));
        CHECK(p.pad_h == p.win_h * p.n_win_h);
        CHECK(p.pad_w == p.win_w * p.n_win_w);
        CHECK(p.pad_h >= h);
        CHECK(p.pad_w >= w);
        CHECK(p.pad_h % p.grid_h == 0);
        if (m.kind == FootageKind::kAdaptiveExact) CHECK(p.window_tokens() == p.cell_tokens());
      }
}

TEST_CASE("mode parsing") {
  CHECK(AttentionMode::parse("exact") == AttentionMode::exact());
  CHECK(AttentionMode::parse("adaptive_approx") == AttentionMode::approx());
  CHECK(AttentionMode::parse("fixed:8") == AttentionMode::fixed(8));
  CHECK(AttentionMode::fixed(8).str() == "fixed:8");
  CHECK_THROWS(AttentionMode::parse("fixed:"));
  CHECK_THROWS(AttentionMode::parse("fixed:-2"));
  CHECK_THROWS(AttentionMode::parse("global"));
}

TEST_CASE("window and grid enumeration on a 4x4 canvas") {
  auto plan = adaptive_footage(4, 4, AttentionMode::fixed(2));
  std::set<std::pair<int64_t, int64_t>> w0, c0;
  for (int64_t t = 0; t < 4; ++t) {
    w0.insert(window_pixel(plan, 0, t));
    c0.insert(grid_pixel(plan, 0, t));
  }
  CHECK(w0 == std::set<std::pair<int64_t, int64_t>>{{0, 0}, {0, 1}, {1, 0}, {1, 1}});
  CHECK(c0 == std::set<std::pair<int64_t, int64_t>>{{0, 0}, {0, 2}, {2, 0}, {2, 2}});

  std::vector<double> v(16);
  for (int i = 0; i < 16; ++i) v[static_cast<size_t>(i)] = i;
  Tensor64 x(Shape{1, 1, 4, 4}, v);
  auto win = window_partition(x, plan);
  CHECK(win.shape() == Shape{4, 4, 1});
  CHECK(values(win) == std::vector<double>{0, 1, 4, 5, 2, 3, 6, 7, 8, 9, 12, 13, 10, 11, 14, 15});
  auto grid = grid_partition(x, plan);
  CHECK(values(grid) == std::vector<double>{0, 2, 8, 10, 1, 3, 9, 11, 4, 6, 12, 14, 5, 7, 13, 15});
}

TEST_CASE("padding") {
  std::mt19937_64 rng(31);
  auto x = random_tensor(Shape{2, 2, 3, 3}, rng);
  auto plan = adaptive_footage(3, 3, AttentionMode::exact());  // win 2, pad 4
  auto p = pad_for_plan(x, plan);
  CHECK(p.shape() == Shape{2, 2, 4, 4});
  for (int64_t n = 0; n < 2; ++n)
    for (int64_t c = 0; c < 2; ++c)
      for (int64_t i = 0; i < 4; ++i) {
        CHECK(p.at(n, c, 3, i) == 0.0);
        CHECK(p.at(n, c, i, 3) == 0.0);
      }
  double s1 = 0, s2 = 0;
  for (double v : x.data()) s1 += v;
  for (double v : p.data()) s2 += v;
  CHECK(s1 == doctest::Approx(s2).epsilon(1e-14));
  CHECK(values(crop_to_original(p, plan)) == values(x));
  auto square = random_tensor(Shape{1, 1, 4, 4}, rng);
  CHECK(values(pad_for_plan(square, adaptive_footage(4, 4, AttentionMode::exact()))) == values(square));
  CHECK_THROWS_AS(pad_for_plan(x, adaptive_footage(5, 5, AttentionMode::exact())), ShapeError);
}

TEST_CASE("partition round trips and bijectivity") {
  std::mt19937_64 rng(32);
  for (int64_t h : {1, 5, 7, 11})
    for (int64_t w : {1, 3, 7, 16})
      for (auto m : {AttentionMode::exact(), AttentionMode::approx(), AttentionMode::fixed(3)}) {
        auto plan = adaptive_footage(h, w, m);
        auto x = random_tensor(Shape{2, 3, h, w}, rng);
        auto padded = pad_for_plan(x, plan);
        CHECK(values(crop_to_original(window_reverse(window_partition(padded, plan), plan), plan)) == values(x));
        CHECK(values(crop_to_original(grid_reverse(grid_partition(padded, plan), plan), plan)) == values(x));
        const auto wi = window_index_map(plan, 2, 3);
        const auto gi = grid_index_map(plan, 2, 3);
        CHECK(std::set<int64_t>(wi.begin(), wi.end()).size() == wi.size());
        CHECK(std::set<int64_t>(gi.begin(), gi.end()).size() == gi.size());
        CHECK(static_cast<int64_t>(wi.size()) == 2 * 3 * plan.pad_h * plan.pad_w);
      }
  // one window spanning the canvas is a reshape
  auto plan = adaptive_footage(4, 4, AttentionMode::fixed(4));
  auto x = random_tensor(Shape{1, 1, 4, 4}, rng);
  CHECK(values(window_partition(x, plan)) == values(x));
  auto zeros = Tensor64::zeros(Shape{1, 2, 4, 4});
  CHECK(values(window_reverse(window_partition(zeros, plan), plan)) == values(zeros));
}

TEST_CASE("token validity flags mark padding") {
  auto plan = adaptive_footage(3, 5, AttentionMode::exact());
  auto wv = window_token_valid(plan, 1);
  auto gv = grid_token_valid(plan, 1);
  int64_t real = 0;
  for (auto v : wv) real += v;
  CHECK(real == 15);
  real = 0;
  for (auto v : gv) real += v;
  CHECK(real == 15);
  for (int64_t k = 0; k < plan.window_count(); ++k)
    for (int64_t t = 0; t < plan.window_tokens(); ++t) {
      auto [r, c] = window_pixel(plan, k, t);
      CHECK(wv[static_cast<size_t>(k * plan.window_tokens() + t)] == (r < 3 && c < 5));
    }
}

TEST_CASE("cross coverage in exact mode") {
  for (int64_t h : {1, 2, 5, 9, 17})
    for (int64_t w : {1, 4, 10}) {
      auto plan = adaptive_footage(h, w, AttentionMode::exact());
      for (int64_t cell = 0; cell < plan.cell_count(); ++cell) {
        std::set<int64_t> windows;
        for (int64_t t = 0; t < plan.cell_tokens(); ++t) {
          auto [r, c] = grid_pixel(plan, cell, t);
          windows.insert((r / plan.win_h) * plan.n_win_w + c / plan.win_w);
        }
        CHECK(static_cast<int64_t>(windows.size()) == plan.window_count());
        CHECK(plan.cell_tokens() == plan.window_count());
      }
    }
}

TEST_CASE("attention cost closed form") {
  CHECK(attention_cost(adaptive_footage(64, 64, AttentionMode::exact())) == 524288);
  CHECK(attention_cost(adaptive_footage(1, 1, AttentionMode::exact())) == 2);
  CHECK(attention_cost(adaptive_footage(64, 64, AttentionMode::fixed(8))) == 524288);
  // 256 = 16^2: windows of 256 tokens vs 64
  const auto exact256 = attention_cost(adaptive_footage(256, 256, AttentionMode::exact()));
  const auto fixed256 = attention_cost(adaptive_footage(256, 256, AttentionMode::fixed(8)));
  CHECK(exact256 == 2 * 256 * 256LL * 256);
  CHECK(fixed256 == 2 * 1024 * 64LL * 64);
  for (int64_t n : {4, 9, 16, 20, 33}) {
    const int64_t s = ceil_sqrt(n);
    CHECK(attention_cost(adaptive_footage(n, n, AttentionMode::exact())) == 2 * s * s * s * s * s * s);
  }
  CHECK(global_attention_cost(16, 16) == 65536);
  std::vector<double> x{1, 10, 100}, y{3, 300, 30000};
  CHECK(loglog_slope(x, y) == doctest::Approx(2.0));
}

TEST_CASE("ceil_sqrt") {
  CHECK(ceil_sqrt(1) == 1);
  CHECK(ceil_sqrt(4) == 2);
  CHECK(ceil_sqrt(5) == 3);
  CHECK(ceil_sqrt(1000000) == 1000);
  CHECK(ceil_sqrt(1000001) == 1001);
}
