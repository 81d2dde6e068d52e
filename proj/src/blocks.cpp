#include "maxsr/blocks.hpp"

#include <cmath>
#include <stdexcept>

#include "maxsr/ops.hpp"

namespace maxsr {

StagePlan StagePlan::make(int64_t blocks, int64_t stages) {
  if (blocks < 1 || stages < 1) throw std::invalid_argument("stage plan needs B >= 1 and S >= 1");
  if (blocks % stages != 0) {
    throw std::invalid_argument("B = " + std::to_string(blocks) + " is not divisible by S = " +
                                std::to_string(stages));
  }
  StagePlan p;
  p.blocks = blocks;
  p.stages = stages;
  p.per_stage = blocks / stages;
  for (int64_t s = 1; s <= stages; ++s) p.fusion_indices.push_back(s * p.per_stage);
  return p;
}

std::vector<int64_t> upsample_factors(int64_t scale) {
  switch (scale) {
    case 2: return {2};
    case 3: return {3};
    case 4: return {2, 2};
    case 8: return {2, 2, 2};
    default:
      throw std::invalid_argument("unsupported scale factor " + std::to_string(scale) +
                                  " (expected 2, 3, 4 or 8)");
  }
}

template <typename T>
BasicTensor<T> ParamInit::uniform(const Shape& shape, int64_t fan_in) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<T> v(static_cast<size_t>(shape.numel()));
  for (auto& e : v) e = static_cast<T>(dist(rng_));
  BasicTensor<T> t(shape, std::move(v));
  t.set_requires_grad(true);
  return t;
}

template <typename T>
ConvParams<T> ParamInit::conv(int64_t in, int64_t out, int64_t kernel, int64_t groups) {
  const int64_t fan_in = (in / groups) * kernel * kernel;
  ConvParams<T> p;
  p.weight = uniform<T>(Shape{out, in / groups, kernel, kernel}, fan_in);
  p.bias = uniform<T>(Shape{out}, fan_in);
  return p;
}

template <typename T>
AffineParams<T> ParamInit::affine(int64_t channels) {
  AffineParams<T> p;
  p.gamma = BasicTensor<T>::full(Shape{channels}, T(1));
  p.beta = BasicTensor<T>::zeros(Shape{channels});
  p.gamma.set_requires_grad(true);
  p.beta.set_requires_grad(true);
  return p;
}

template <typename T>
BatchNormParams<T> ParamInit::batch_norm(int64_t channels) {
  const auto a = affine<T>(channels);
  BatchNormParams<T> p;
  p.gamma = a.gamma;
  p.beta = a.beta;
  p.running_mean = BasicTensor<T>::zeros(Shape{channels});
  p.running_var = BasicTensor<T>::full(Shape{channels}, T(1));
  return p;
}

template <typename T>
AttentionParams<T> ParamInit::attention(int64_t width, int64_t heads, bool rpe, int64_t rpe_h,
                                        int64_t rpe_w) {
  if (heads < 1 || width % heads != 0) {
    throw std::invalid_argument("width " + std::to_string(width) + " not divisible by heads " +
                                std::to_string(heads));
  }
  AttentionParams<T> p;
  p.heads = heads;
  p.qkv_weight = uniform<T>(Shape{3 * width, width}, width);
  p.qkv_bias = uniform<T>(Shape{3 * width}, width);
  p.out_weight = uniform<T>(Shape{width, width}, width);
  p.out_bias = uniform<T>(Shape{width}, width);
  if (rpe) {
    p.rpe_h = rpe_h;
    p.rpe_w = rpe_w;
    p.rpe_table = BasicTensor<T>::zeros(Shape{heads, (2 * rpe_h - 1) * (2 * rpe_w - 1)});
    p.rpe_table.set_requires_grad(true);
  }
  return p;
}

template <typename T>
AttentionUnitParams<T> ParamInit::attention_unit(int64_t width, int64_t heads, bool rpe,
                                                 int64_t rpe_h, int64_t rpe_w) {
  AttentionUnitParams<T> p;
  p.attn_norm = affine<T>(width);
  p.attn = attention<T>(width, heads, rpe, rpe_h, rpe_w);
  p.ffn_norm = affine<T>(width);
  p.fc1 = conv<T>(width, 4 * width, 1);
  p.fc2 = conv<T>(4 * width, width, 1);
  return p;
}

template <typename T>
MBConvParams<T> ParamInit::mbconv(int64_t width) {
  const int64_t mid = 4 * width;
  MBConvParams<T> p;
  p.norm = batch_norm<T>(width);
  p.expand = conv<T>(width, mid, 1);
  p.depthwise = conv<T>(mid, mid, 3, mid);
  p.se_reduce = conv<T>(mid, mid / 4, 1);
  p.se_expand = conv<T>(mid / 4, mid, 1);
  p.project = conv<T>(mid, width, 1);
  return p;
}

namespace {

template <typename T>
BasicTensor<T> conv(const BasicTensor<T>& x, const ConvParams<T>& p, int64_t groups = 1) {
  const int64_t k = p.weight.dim(2);
  return conv2d(x, p.weight, p.bias, 1, (k - 1) / 2, groups);
}

}  // namespace

template <typename T>
std::pair<BasicTensor<T>, BasicTensor<T>> sfeb_forward(const BasicTensor<T>& x,
                                                       const SfebParams<T>& params) {
  if (x.rank() != 4 || x.dim(1) != 3) {
    throw ShapeError("sfeb: expected a 3-channel [N,3,H,W] input, got " + x.shape().str());
  }
  auto f_minus1 = conv(x, params.conv1);
  auto f0 = conv(f_minus1, params.conv2);
  return {std::move(f_minus1), std::move(f0)};
}

template <typename T>
BasicTensor<T> mbconv_se_forward(const BasicTensor<T>& x, MBConvParams<T>& p, bool training) {
  auto y = batch_norm(x, p.norm.gamma, p.norm.beta, p.norm.running_mean, p.norm.running_var, training);
  y = gelu(conv(y, p.expand));
  y = gelu(conv(y, p.depthwise, p.depthwise.weight.dim(0)));
  auto gate = global_avg_pool(y);
  gate = sigmoid(conv(gelu(conv(gate, p.se_reduce)), p.se_expand));
  y = scale_channels(y, gate);
  return add(x, conv(y, p.project));
}

template <typename T>
BasicTensor<T> attention_unit_forward(const BasicTensor<T>& x, const AttentionUnitParams<T>& p,
                                      const BlockContext& ctx, bool grid) {
  const auto normed = layer_norm(x, p.attn_norm.gamma, p.attn_norm.beta);
  const auto attended = grid ? adaptive_grid_attention(normed, p.attn, ctx.mode, ctx.options)
                             : adaptive_block_attention(normed, p.attn, ctx.mode, ctx.options);
  const auto y = add(x, attended);
  const auto hidden = gelu(conv(layer_norm(y, p.ffn_norm.gamma, p.ffn_norm.beta), p.fc1));
  return add(y, conv(hidden, p.fc2));
}

template <typename T>
BasicTensor<T> amtb_forward(const BasicTensor<T>& x, AMTBParams<T>& p, const BlockContext& ctx) {
  if (x.rank() != 4 || x.dim(1) != p.mbconv.project.weight.dim(0)) {
    throw ShapeError("amtb: input " + x.shape().str() + " does not match block width");
  }
  auto y = mbconv_se_forward(x, p.mbconv, ctx.training);
  y = attention_unit_forward(y, p.block, ctx, false);
  return attention_unit_forward(y, p.grid, ctx, true);
}

template <typename T>
BasicTensor<T> hffb_forward(const BasicTensor<T>& f_minus1, const std::vector<BasicTensor<T>>& stage_outputs,
                            const HffbParams<T>& p) {
  const int64_t width = p.conv.weight.dim(0);
  if (stage_outputs.empty() ||
      static_cast<int64_t>(stage_outputs.size()) * width != p.fuse.weight.dim(1)) {
    throw ShapeError("hffb: expected " + std::to_string(p.fuse.weight.dim(1) / width) +
                     " stage outputs, got " + std::to_string(stage_outputs.size()));
  }
  for (const auto& s : stage_outputs) {
    if (s.shape() != f_minus1.shape()) {
      throw ShapeError("hffb: stage output " + s.shape().str() + " vs residual " + f_minus1.shape().str());
    }
  }
  const auto fused = conv(conv(concat_channels(stage_outputs), p.fuse), p.conv);
  return add(fused, f_minus1);
}

template <typename T>
BasicTensor<T> rb_forward(const BasicTensor<T>& h, const RbParams<T>& p) {
  auto y = h;
  for (size_t i = 0; i < p.factors.size(); ++i) y = pixel_shuffle(conv(y, p.upsample[i]), p.factors[i]);
  return conv(y, p.output);
}

#define MAXSR_INSTANTIATE(T)                                                                        \
  template BasicTensor<T> ParamInit::uniform<T>(const Shape&, int64_t);                             \
  template ConvParams<T> ParamInit::conv<T>(int64_t, int64_t, int64_t, int64_t);                    \
  template AffineParams<T> ParamInit::affine<T>(int64_t);                                           \
  template BatchNormParams<T> ParamInit::batch_norm<T>(int64_t);                                    \
  template AttentionParams<T> ParamInit::attention<T>(int64_t, int64_t, bool, int64_t, int64_t);    \
  template AttentionUnitParams<T> ParamInit::attention_unit<T>(int64_t, int64_t, bool, int64_t,     \
                                                               int64_t);                            \
  template MBConvParams<T> ParamInit::mbconv<T>(int64_t);                                           \
  template std::pair<BasicTensor<T>, BasicTensor<T>> sfeb_forward(const BasicTensor<T>&,            \
                                                                  const SfebParams<T>&);            \
  template BasicTensor<T> mbconv_se_forward(const BasicTensor<T>&, MBConvParams<T>&, bool);         \
  template BasicTensor<T> attention_unit_forward(const BasicTensor<T>&,                             \
                                                 const AttentionUnitParams<T>&, const BlockContext&, \
                                                 bool);                                             \
  template BasicTensor<T> amtb_forward(const BasicTensor<T>&, AMTBParams<T>&, const BlockContext&); \
  template BasicTensor<T> hffb_forward(const BasicTensor<T>&, const std::vector<BasicTensor<T>>&,  \
                                       const HffbParams<T>&);                                       \
  template BasicTensor<T> rb_forward(const BasicTensor<T>&, const RbParams<T>&);

MAXSR_INSTANTIATE(float)
MAXSR_INSTANTIATE(double)
#undef MAXSR_INSTANTIATE

}  // namespace maxsr
