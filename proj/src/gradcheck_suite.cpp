#include <cmath>
#include <memory>
#include <random>

#include "maxsr/attention.hpp"
#include "maxsr/blocks.hpp"
#include "maxsr/gradcheck.hpp"
#include "maxsr/model.hpp"
#include "maxsr/ops.hpp"
#include "maxsr/partition.hpp"

namespace maxsr {

namespace {

using Fn = std::function<Tensor64(const std::vector<Tensor64>&)>;

class Suite {
 public:
  explicit Suite(const GradcheckOptions& o) : opts_(o), rng_(o.seed) {}

  Tensor64 random(const Shape& s, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> d(lo, hi);
    std::vector<double> v(static_cast<size_t>(s.numel()));
    for (auto& e : v) e = d(rng_);
    return Tensor64(s, std::move(v));
  }

  // Magnitudes in [0.1, 1] with random sign, away from the kinks at zero.
  Tensor64 away_from_zero(const Shape& s) {
    std::uniform_real_distribution<double> d(0.1, 1.0);
    std::bernoulli_distribution sign(0.5);
    std::vector<double> v(static_cast<size_t>(s.numel()));
    for (auto& e : v) e = sign(rng_) ? d(rng_) : -d(rng_);
    return Tensor64(s, std::move(v));
  }

  // Reduces fn's output with fixed random weights so every output element
  // contributes to the checked gradient.
  void check(const std::string& name, std::vector<Tensor64> inputs, const Fn& fn) {
    auto weights = std::make_shared<Tensor64>();
    auto reduce = [this, weights](const Tensor64& out) {
      if (!weights->defined() || weights->shape() != out.shape()) {
        *weights = random(out.shape());
        const double s = 1.0 / std::sqrt(static_cast<double>(out.numel()));
        for (auto& w : weights->mutable_data()) w *= s;
      }
      return sum(mul(out, *weights));
    };
    std::vector<Tensor64> leaves;
    for (auto& t : inputs) leaves.push_back(t.set_requires_grad(true));
    run(name, leaves, [&] { return reduce(fn(leaves)); });
  }

  // Checks d(loss)/d(leaf) for every leaf, with `loss` re-evaluated on the
  // current leaf values.
  void run(const std::string& name, std::vector<Tensor64> leaves, const std::function<Tensor64()>& loss) {
    for (auto& l : leaves) l.zero_grad();
    backward(loss());
    GradcheckCase c;
    c.name = name;
    for (auto& l : leaves) {
      std::vector<double> analytic(l.grad().begin(), l.grad().end());
      if (analytic.empty()) analytic.assign(static_cast<size_t>(l.numel()), 0.0);
      if (opts_.corrupt_analytic) {
        for (auto& a : analytic) a *= 1.01;
      }
      const auto numeric = finite_diff_grad([&](const Tensor64&) { return loss().item(); }, l, opts_.eps);
      c.max_rel_error = std::max(c.max_rel_error, max_relative_error(analytic, numeric.data()));
      c.checked += l.numel();
    }
    c.passed = std::isfinite(c.max_rel_error) && c.max_rel_error < opts_.tolerance;
    results_.push_back(c);
  }

  std::vector<GradcheckCase> results() && { return std::move(results_); }
  std::mt19937_64& rng() { return rng_; }

 private:
  GradcheckOptions opts_;
  std::mt19937_64 rng_;
  std::vector<GradcheckCase> results_;
};

AttentionParams<double> attention_params(Suite& s, int64_t width, int64_t heads, int64_t rpe_h = 0,
                                         int64_t rpe_w = 0) {
  AttentionParams<double> p;
  p.heads = heads;
  p.qkv_weight = s.random(Shape{3 * width, width});
  p.qkv_bias = s.random(Shape{3 * width});
  p.out_weight = s.random(Shape{width, width});
  p.out_bias = s.random(Shape{width});
  if (rpe_h > 0) {
    p.rpe_h = rpe_h;
    p.rpe_w = rpe_w;
    p.rpe_table = s.random(Shape{heads, (2 * rpe_h - 1) * (2 * rpe_w - 1)});
  }
  return p;
}

AttentionParams<double> with_leaves(AttentionParams<double> p, const std::vector<Tensor64>& in, size_t first) {
  p.qkv_weight = in[first];
  p.qkv_bias = in[first + 1];
  p.out_weight = in[first + 2];
  p.out_bias = in[first + 3];
  if (p.has_rpe()) p.rpe_table = in[first + 4];
  return p;
}

std::vector<Tensor64> attention_leaves(const AttentionParams<double>& p) {
  std::vector<Tensor64> v{p.qkv_weight, p.qkv_bias, p.out_weight, p.out_bias};
  if (p.has_rpe()) v.push_back(p.rpe_table);
  return v;
}

void op_cases(Suite& s) {
  s.check("conv2d", {s.random(Shape{2, 3, 5, 5}), s.random(Shape{4, 3, 3, 3}), s.random(Shape{4})},
          [](const auto& in) { return conv2d(in[0], in[1], in[2], 1, 1); });
  s.check("conv2d_stride2", {s.random(Shape{1, 2, 5, 5}), s.random(Shape{3, 2, 3, 3}), s.random(Shape{3})},
          [](const auto& in) { return conv2d(in[0], in[1], in[2], 2, 1); });
  s.check("conv2d_depthwise", {s.random(Shape{2, 4, 4, 4}), s.random(Shape{4, 1, 3, 3}), s.random(Shape{4})},
          [](const auto& in) { return conv2d(in[0], in[1], in[2], 1, 1, 4); });
  s.check("batched_matmul", {s.random(Shape{2, 3, 4}), s.random(Shape{2, 4, 5})},
          [](const auto& in) { return batched_matmul(in[0], in[1]); });
  s.check("transpose_last2", {s.random(Shape{2, 3, 4})}, [](const auto& in) { return transpose_last2(in[0]); });
  s.check("linear", {s.random(Shape{2, 3, 4}), s.random(Shape{5, 4}), s.random(Shape{5})},
          [](const auto& in) { return linear(in[0], in[1], in[2]); });
  s.check("softmax_lastdim", {s.random(Shape{2, 3, 6}, -2.0, 2.0)},
          [](const auto& in) { return softmax_lastdim(in[0]); });
  s.check("layer_norm", {s.random(Shape{2, 4, 3, 3}), s.random(Shape{4}), s.random(Shape{4})},
          [](const auto& in) { return layer_norm(in[0], in[1], in[2]); });
  s.check("batch_norm_train", {s.random(Shape{3, 4, 3, 3}), s.random(Shape{4}), s.random(Shape{4})},
          [](const auto& in) {
            auto rm = Tensor64::zeros(Shape{4});
            auto rv = Tensor64::full(Shape{4}, 1.0);
            return batch_norm(in[0], in[1], in[2], rm, rv, true);
          });
  {
    auto rm = s.random(Shape{4});
    auto rv = s.random(Shape{4}, 0.5, 2.0);
    s.check("batch_norm_eval", {s.random(Shape{2, 4, 3, 3}), s.random(Shape{4}), s.random(Shape{4})},
            [rm, rv](const auto& in) mutable { return batch_norm(in[0], in[1], in[2], rm, rv, false); });
  }
  s.check("pixel_shuffle", {s.random(Shape{1, 8, 2, 3})}, [](const auto& in) { return pixel_shuffle(in[0], 2); });
  s.check("pixel_unshuffle", {s.random(Shape{1, 2, 4, 6})},
          [](const auto& in) { return pixel_unshuffle(in[0], 2); });
  s.check("global_avg_pool", {s.random(Shape{2, 3, 4, 5})}, [](const auto& in) { return global_avg_pool(in[0]); });
  s.check("add", {s.random(Shape{2, 3}), s.random(Shape{2, 3})}, [](const auto& in) { return add(in[0], in[1]); });
  s.check("sub", {s.random(Shape{2, 3}), s.random(Shape{2, 3})}, [](const auto& in) { return sub(in[0], in[1]); });
  s.check("mul", {s.random(Shape{2, 3}), s.random(Shape{2, 3})}, [](const auto& in) { return mul(in[0], in[1]); });
  s.check("scale", {s.random(Shape{2, 3})}, [](const auto& in) { return scale(in[0], -1.7); });
  s.check("gelu", {s.random(Shape{3, 4}, -3.0, 3.0)}, [](const auto& in) { return gelu(in[0]); });
  s.check("sigmoid", {s.random(Shape{3, 4}, -3.0, 3.0)}, [](const auto& in) { return sigmoid(in[0]); });
  s.check("relu", {s.away_from_zero(Shape{3, 4})}, [](const auto& in) { return relu(in[0]); });
  s.check("abs", {s.away_from_zero(Shape{3, 4})}, [](const auto& in) { return abs(in[0]); });
  s.check("concat_channels", {s.random(Shape{2, 2, 3, 3}), s.random(Shape{2, 3, 3, 3})},
          [](const auto& in) { return concat_channels(std::vector<Tensor64>{in[0], in[1]}); });
  s.check("scale_channels", {s.random(Shape{2, 3, 2, 2}), s.random(Shape{2, 3, 1, 1})},
          [](const auto& in) { return scale_channels(in[0], in[1]); });
  s.check("add_head_bias", {s.random(Shape{2, 2, 3, 3}), s.random(Shape{2, 3, 3})},
          [](const auto& in) { return add_head_bias(in[0], in[1]); });
  {
    auto valid = std::make_shared<std::vector<uint8_t>>(std::vector<uint8_t>{1, 0, 1, 1, 1, 0});
    s.check("mask_keys", {s.random(Shape{2, 2, 3, 3})}, [valid](const auto& in) {
      return softmax_lastdim(mask_keys(in[0], std::span<const uint8_t>(*valid)));
    });
  }
  s.check("sum", {s.random(Shape{2, 3})}, [](const auto& in) { return sum(in[0]); });
  s.check("mean", {s.random(Shape{2, 3})}, [](const auto& in) { return mean(in[0]); });
  {
    // targets offset from the predictions so no difference sits near the kink
    auto target = s.random(Shape{2, 3, 2, 2});
    auto offset = s.away_from_zero(Shape{2, 3, 2, 2});
    auto pred = add(target, offset);
    s.check("l1_loss", {pred.detach()}, [target](const auto& in) { return l1_loss(in[0], target); });
  }
  s.check("reshape", {s.random(Shape{2, 6})}, [](const auto& in) { return in[0].reshape(Shape{3, 4}); });
  {
    auto map = std::make_shared<const std::vector<int64_t>>(std::vector<int64_t>{3, -1, 0, 3, 5, 1});
    s.check("gather", {s.random(Shape{6})}, [map](const auto& in) { return gather(in[0], Shape{2, 3}, map); });
  }
  s.check("split_merge_heads", {s.random(Shape{2, 3, 12})}, [](const auto& in) {
    return merge_heads(add(split_heads(in[0], 2, 0, 3), split_heads(in[0], 2, 2, 3)));
  });
}

void geometry_cases(Suite& s) {
  for (auto mode : {AttentionMode::exact(), AttentionMode::approx(), AttentionMode::fixed(2)}) {
    const auto plan = adaptive_footage(5, 7, mode);
    s.check("window_path[" + mode.str() + "]", {s.random(Shape{2, 3, 5, 7})}, [plan](const auto& in) {
      return window_partition(pad_for_plan(in[0], plan), plan);
    });
    s.check("grid_path[" + mode.str() + "]", {s.random(Shape{2, 3, 5, 7})}, [plan](const auto& in) {
      auto tokens = grid_partition(pad_for_plan(in[0], plan), plan);
      return crop_to_original(grid_reverse(scale(tokens, 2.0), plan), plan);
    });
  }
  s.check("resize_rpe_table", {s.random(Shape{2, 5 * 5})},
          [](const auto& in) { return resize_rpe_table(in[0], 3, 3, 4, 5); });
  s.check("relative_position_bias", {s.random(Shape{2, 3 * 5})},
          [](const auto& in) { return relative_position_bias(2, 3, in[0], 2); });
}

void attention_cases(Suite& s) {
  {
    auto p = attention_params(s, 4, 2);
    std::vector<Tensor64> in{s.random(Shape{3, 5, 4})};
    for (auto& t : attention_leaves(p)) in.push_back(t);
    s.check("multihead_self_attention", in, [p](const auto& v) {
      return multihead_self_attention(v[0], with_leaves(p, v, 1));
    });
  }
  struct Variant {
    const char* name;
    bool grid;
    AttentionMode mode;
    bool rpe;
    bool mask;
  };
  const Variant variants[] = {
      {"block_attention[exact]", false, AttentionMode::exact(), false, false},
      {"grid_attention[exact]", true, AttentionMode::exact(), false, false},
      {"block_attention[approx,masked]", false, AttentionMode::approx(), false, true},
      {"grid_attention[fixed:2,masked]", true, AttentionMode::fixed(2), false, true},
      {"block_attention[exact,rpe]", false, AttentionMode::exact(), true, false},
      {"grid_attention[exact,rpe]", true, AttentionMode::exact(), true, false},
  };
  for (const auto& var : variants) {
    // rpe tables built for a 2x2 footage and resized to the 3x3 one used at 5x5
    auto p = attention_params(s, 4, 2, var.rpe ? 2 : 0, var.rpe ? 2 : 0);
    std::vector<Tensor64> in{s.random(Shape{1, 4, 5, 5})};
    for (auto& t : attention_leaves(p)) in.push_back(t);
    s.check(var.name, in, [p, var](const auto& v) {
      const auto q = with_leaves(p, v, 1);
      const AttentionOptions o{var.mask};
      return var.grid ? adaptive_grid_attention(v[0], q, var.mode, o) : adaptive_block_attention(v[0], q, var.mode, o);
    });
  }
}

std::vector<Tensor64> trainable(const ModelState<double>& st) {
  std::vector<Tensor64> out;
  for (auto& t : trainable_tensors(st)) out.push_back(t.tensor);
  return out;
}

// The network keeps its own initialization; norm affines and running
// statistics are perturbed away from 1 and 0. Much larger weights make the
// net curved enough that central-difference truncation error dominates the
// exactly-zero gradients (key biases).
void perturb_norms(Suite& s, ModelState<double>& st) {
  for (auto& nt : named_tensors(st)) {
    if (nt.name.find("norm") == std::string::npos) continue;
    auto r = s.random(nt.tensor.shape(), -0.2, 0.2);
    auto v = nt.tensor.mutable_data();
    for (size_t i = 0; i < v.size(); ++i) v[i] += r.data()[i];
  }
}

void network_cases(Suite& s) {
  ModelConfig cfg;
  cfg.width = 4;
  cfg.blocks = 2;
  cfg.stages = 2;
  cfg.heads = 2;
  cfg.scale = 2;
  cfg.train_patch = 8;
  {
    auto st = build_model<double>(cfg, s.rng()());
    perturb_norms(s, st);
    auto x = s.random(Shape{1, 4, 5, 5});
    const BlockContext ctx{AttentionMode::exact(), {}, true};
    auto weights = s.random(Shape{1, 4, 5, 5});
    for (auto& w : weights.mutable_data()) w /= 10.0;
    std::vector<Tensor64> all{x.set_requires_grad(true)};
    // only the first block's tensors
    for (auto& nt : trainable_tensors(st)) {
      if (nt.name.rfind("amtb.0.", 0) == 0) all.push_back(nt.tensor);
    }
    s.run("amtb", all, [&] { return sum(mul(amtb_forward(x, st.amtbs[0], ctx), weights)); });
  }
  for (bool training : {false, true}) {
    auto st = build_model<double>(cfg, s.rng()());
    perturb_norms(s, st);
    auto x = s.random(Shape{2, 3, 8, 8}, 0.0, 1.0);
    auto weights = s.random(Shape{2, 3, 16, 16});
    for (auto& w : weights.mutable_data()) w /= 16.0;
    std::vector<Tensor64> leaves{x.set_requires_grad(true)};
    for (auto& t : trainable(st)) leaves.push_back(t);
    s.run(training ? "network[train]" : "network[eval]", leaves,
          [&] { return sum(mul(forward(st, cfg, x, training), weights)); });
  }
}

}  // namespace

std::vector<GradcheckCase> run_gradcheck_suite(const GradcheckOptions& options) {
  Suite s(options);
  op_cases(s);
  geometry_cases(s);
  attention_cases(s);
  if (options.include_network) network_cases(s);
  return std::move(s).results();
}

}  // namespace maxsr
