#include <cmath>
#include <map>
#include <random>
#include <set>

#include "doctest.h"
#include "helpers.hpp"
#include "maxsr/dihedral.hpp"
#include "maxsr/train.hpp"

using namespace maxsr;
using testutil::random_tensor;
using testutil::values;

namespace {

ModelConfig toy() {
  ModelConfig c;
  c.width = 8;
  c.blocks = 2;
  c.stages = 2;
  c.heads = 2;
  c.scale = 2;
  c.train_patch = 8;
  return c;
}

TrainImage numbered_image(const std::string& id, int64_t h, int64_t w, int64_t r) {
  std::vector<float> lr(static_cast<size_t>(3 * h * w)), hr(static_cast<size_t>(3 * h * w * r * r));
  for (size_t i = 0; i < lr.size(); ++i) lr[i] = static_cast<float>(i);
  for (size_t i = 0; i < hr.size(); ++i) hr[i] = static_cast<float>(i);
  return {id, Tensor(Shape{3, h, w}, lr), Tensor(Shape{3, h * r, w * r}, hr)};
}

}  // namespace

TEST_CASE("mae loss") {
  std::mt19937_64 rng(61);
  auto a = random_tensor<float>(Shape{2, 3, 4, 4}, rng);
  CHECK(mae_loss(a, a).item() == 0.0f);
  std::vector<float> shifted(a.data().begin(), a.data().end());
  for (auto& v : shifted) v -= 0.25f;
  CHECK(mae_loss(a, Tensor(a.shape(), shifted)).item() == doctest::Approx(0.25).epsilon(1e-6));
  auto b = random_tensor<float>(Shape{2, 3, 4, 4}, rng);
  double s = 0;
  for (size_t i = 0; i < 96; ++i) s += std::abs(static_cast<double>(a.data()[i]) - b.data()[i]);
  CHECK(std::abs(mae_loss(a, b).item() - s / 96) < 1e-7);
  CHECK_THROWS_AS(mae_loss(a, Tensor::zeros(Shape{2, 3, 4, 5})), ShapeError);

  // subgradient 0 at exact ties
  auto p = Tensor(Shape{2}, {1.0f, 2.0f}).set_requires_grad(true);
  backward(mae_loss(p, Tensor(Shape{2}, {1.0f, 3.0f})));
  CHECK(p.grad()[0] == 0.0f);
  CHECK(p.grad()[1] == -0.5f);
}

TEST_CASE("patch sampling") {
  std::mt19937_64 rng(62);
  std::vector<TrainImage> one{numbered_image("a", 4, 4, 2)};
  auto pp = sample_patch_pair(one, 2, 4, rng);
  CHECK(values(pp.lr_patch) == values(one[0].lr));
  CHECK(values(pp.hr_patch) == values(one[0].hr));

  std::vector<TrainImage> big{numbered_image("b", 9, 11, 3)};
  for (int k = 0; k < 20; ++k) {
    auto q = sample_patch_pair(big, 3, 3, rng);
    CHECK(q.lr_patch.shape() == Shape{3, 3, 3});
    CHECK(q.hr_patch.shape() == Shape{3, 9, 9});
    for (int64_t c = 0; c < 3; ++c) {
      CHECK(q.lr_patch.at(std::array<int64_t, 3>{c, 0, 0}) == big[0].lr.at(std::array<int64_t, 3>{c, q.top, q.left}));
      CHECK(q.hr_patch.at(std::array<int64_t, 3>{c, 0, 0}) ==
            big[0].hr.at(std::array<int64_t, 3>{c, 3 * q.top, 3 * q.left}));
      CHECK(q.hr_patch.at(std::array<int64_t, 3>{c, 8, 8}) ==
            big[0].hr.at(std::array<int64_t, 3>{c, 3 * q.top + 8, 3 * q.left + 8}));
    }
  }
  CHECK_THROWS_AS(sample_patch_pair(big, 3, 10, rng), std::invalid_argument);
}

TEST_CASE("image selection is uniform") {
  std::mt19937_64 rng(63);
  std::vector<TrainImage> four;
  for (int i = 0; i < 4; ++i) four.push_back(numbered_image(std::to_string(i), 4, 6 + i, 2));
  std::map<size_t, int> counts;
  const int draws = 10000;
  for (int k = 0; k < draws; ++k) counts[sample_patch_pair(four, 2, 3, rng).image]++;
  const double sigma = std::sqrt(draws * 0.25 * 0.75);
  for (size_t i = 0; i < 4; ++i) CHECK(std::abs(counts[i] - draws * 0.25) < 3 * sigma);
}

TEST_CASE("dihedral augmentation") {
  std::vector<float> v(6);
  for (int i = 0; i < 6; ++i) v[static_cast<size_t>(i)] = static_cast<float>(i);
  Tensor x(Shape{1, 2, 3}, v);
  CHECK(values(apply_dihedral(x, 0)) == v);
  auto r = apply_dihedral(x, 1);
  CHECK(r.shape() == Shape{1, 3, 2});
  for (int64_t i = 0; i < 2; ++i)
    for (int64_t j = 0; j < 3; ++j)
      CHECK(r.at(std::array<int64_t, 3>{0, j, 2 - 1 - i}) == x.at(std::array<int64_t, 3>{0, i, j}));
  auto four = x;
  for (int k = 0; k < 4; ++k) four = apply_dihedral(four, 1);
  CHECK(values(four) == v);
  auto flipped = apply_dihedral(x, 4);
  CHECK(values(flipped) == std::vector<float>{3, 4, 5, 0, 1, 2});

  std::mt19937_64 rng(64);
  auto g = random_tensor<float>(Shape{3, 4, 4}, rng);
  std::set<std::vector<float>> distinct;
  for (int c = 0; c < 8; ++c) {
    distinct.insert(values(apply_dihedral(g, c)));
    CHECK(values(apply_dihedral(apply_dihedral(g, c), inverse_dihedral_code(c))) == values(g));
  }
  CHECK(distinct.size() == 8);
  CHECK_THROWS_AS(apply_dihedral(g, 8), std::invalid_argument);

  std::vector<TrainImage> one{numbered_image("a", 3, 5, 2)};
  auto pp = sample_patch_pair(one, 2, 3, rng);
  for (int c = 0; c < 8; ++c) {
    auto a = augment(pp, c);
    CHECK(values(a.lr_patch) == values(apply_dihedral(pp.lr_patch, c)));
    CHECK(values(a.hr_patch) == values(apply_dihedral(pp.hr_patch, c)));
    auto back = augment(a, inverse_dihedral_code(c));
    CHECK(values(back.lr_patch) == values(pp.lr_patch));
    CHECK(values(back.hr_patch) == values(pp.hr_patch));
  }
  CHECK_THROWS_AS(augment(pp, -1), std::invalid_argument);
}

TEST_CASE("learning-rate schedule") {
  TrainConfig c;
  CHECK(lr_schedule(0, c) == 2e-4);
  CHECK(lr_schedule(249999, c) == 2e-4);
  CHECK(lr_schedule(250000, c) == 1e-4);
  CHECK(lr_schedule(480000, c) == 1.25e-5);
  std::set<double> levels;
  double prev = lr_schedule(0, c);
  for (int64_t it = 0; it <= 600000; it += 2500) {
    const double lr = lr_schedule(it, c);
    CHECK(lr <= prev);
    prev = lr;
    levels.insert(lr);
  }
  CHECK(levels.size() == c.milestones.size() + 1);

  auto f = c.finetune();
  CHECK(f.lr0 == 1e-4);
  CHECK(f.total_iters == 250000);
  CHECK(f.milestones == std::vector<int64_t>{125000, 200000, 225000, 237500, 250000});
  TrainConfig odd;
  odd.milestones = {3, 5};
  odd.total_iters = 7;
  CHECK(odd.finetune().milestones == std::vector<int64_t>{1, 2});
  CHECK(odd.finetune().total_iters == 3);
}

TEST_CASE("train config validation and json") {
  TrainConfig c;
  c.milestones = {10, 5};
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = {};
  c.patch_lr = 0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = {};
  c.seed = 99;
  nlohmann::json j = c;
  CHECK(j.get<TrainConfig>() == c);
  j["momentum"] = 0.9;
  CHECK_THROWS_AS(j.get<TrainConfig>(), std::invalid_argument);
}

TEST_CASE("adam against a scalar hand computation") {
  std::vector<Tensor64> p{Tensor64(Shape{2}, {0.5, -1.0}).set_requires_grad(true)};
  OptimizerMoments<double> m;
  p[0].mutable_grad()[0] = 0.3;
  p[0].mutable_grad()[1] = -2.0;
  const AdamHyper h;
  adam_step(p, m, 0.01, h);
  // step 1: m = 0.1 g, v = 0.001 g^2, bias-corrected to g and g^2
  const double u0 = 0.01 * 0.3 / (std::sqrt(0.09) + 1e-8);
  const double u1 = 0.01 * -2.0 / (std::sqrt(4.0) + 1e-8);
  CHECK(p[0].data()[0] == doctest::Approx(0.5 - u0).epsilon(1e-14));
  CHECK(p[0].data()[1] == doctest::Approx(-1.0 - u1).epsilon(1e-14));
  // step 2 with the same gradient
  const double m1 = 0.9 * 0.03 + 0.1 * 0.3, v1 = 0.999 * 0.00009 + 0.001 * 0.09;
  const double u0b = 0.01 * (m1 / (1 - 0.81)) / (std::sqrt(v1 / (1 - 0.999 * 0.999)) + 1e-8);
  const double before = p[0].data()[0];
  adam_step(p, m, 0.01, h);
  CHECK(p[0].data()[0] == doctest::Approx(before - u0b).epsilon(1e-14));
  CHECK(m.step == 2);

  std::vector<Tensor64> z{Tensor64(Shape{3}, {1, 2, 3}).set_requires_grad(true)};
  OptimizerMoments<double> mz;
  z[0].mutable_grad();
  adam_step(z, mz, 0.1, h);
  CHECK(values(z[0]) == std::vector<double>{1, 2, 3});
}

TEST_CASE("training loop") {
  auto cfg = toy();
  auto data = synthetic_dataset(3, 32, 2, 5);
  TrainConfig tc;
  tc.batch = 2;
  tc.patch_lr = 8;
  tc.total_iters = 0;
  tc.lr0 = 1e-3;

  auto st = build_model<float>(cfg, 20);
  const auto before = named_tensors(st);
  std::vector<std::vector<float>> snapshot;
  for (auto& t : before) snapshot.push_back(values(t.tensor));
  CHECK(train(st, cfg, data, tc).trace.empty());
  for (size_t i = 0; i < before.size(); ++i) CHECK(values(before[i].tensor) == snapshot[i]);

  tc.total_iters = 6;
  auto s1 = build_model<float>(cfg, 21), s2 = build_model<float>(cfg, 21);
  auto t1 = train(s1, cfg, data, tc), t2 = train(s2, cfg, data, tc);
  REQUIRE(t1.trace.size() == 6);
  for (size_t i = 0; i < 6; ++i) CHECK(t1.trace[i].loss == t2.trace[i].loss);
  CHECK(loss_csv(t1.trace) == loss_csv(t2.trace));
  CHECK(loss_csv(t1.trace).rfind("iteration,loss,lr\n0,", 0) == 0);
  tc.seed = 1;
  auto s3 = build_model<float>(cfg, 21);
  CHECK(train(s3, cfg, data, tc).trace[0].loss != t1.trace[0].loss);

  tc.log_every = 4;
  auto s4 = build_model<float>(cfg, 21);
  auto t4 = train(s4, cfg, data, tc);
  REQUIRE(t4.trace.size() == 3);
  CHECK(t4.trace[1].iter == 4);
  CHECK(t4.trace[2].iter == 5);
}

TEST_CASE("non-finite loss aborts with the iteration") {
  auto cfg = toy();
  auto data = synthetic_dataset(1, 16, 2, 6);
  auto st = build_model<float>(cfg, 22);
  for (auto& v : st.sfeb.conv1.weight.mutable_data()) v = 3e38f;
  TrainConfig tc;
  tc.batch = 1;
  tc.patch_lr = 8;
  tc.total_iters = 2;
  CHECK_THROWS_WITH_AS(train(st, cfg, data, tc), doctest::Contains("iteration 0"), NumericError);
}

TEST_CASE("synthetic data") {
  auto a = synthetic_dataset(2, 24, 3, 7), b = synthetic_dataset(2, 24, 3, 7);
  CHECK(a[0].lr.shape() == Shape{3, 8, 8});
  CHECK(a[0].hr.shape() == Shape{3, 24, 24});
  CHECK(values(a[1].hr) == values(b[1].hr));
  for (float v : a[0].hr.data()) {
    CHECK(v >= 0.0f);
    CHECK(v <= 1.0f);
  }
}
