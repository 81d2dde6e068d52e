#include "maxsr/attention.hpp"

#include <cmath>
#include <memory>

#include "maxsr/ops.hpp"

namespace maxsr {

namespace {

int64_t offset_extent(int64_t footage) { return 2 * footage - 1; }

}  // namespace

template <typename T>
BasicTensor<T> relative_position_bias(int64_t win_h, int64_t win_w, const BasicTensor<T>& table,
                                      int64_t heads) {
  const int64_t span_h = offset_extent(win_h), span_w = offset_extent(win_w);
  if (table.shape() != Shape{heads, span_h * span_w}) {
    throw ShapeError("relative_position_bias: table " + table.shape().str() + " expected [" +
                     std::to_string(heads) + "," + std::to_string(span_h * span_w) + "]");
  }
  const int64_t t = win_h * win_w;
  auto idx = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(heads * t * t));
  size_t o = 0;
  for (int64_t h = 0; h < heads; ++h)
    for (int64_t i = 0; i < t; ++i)
      for (int64_t j = 0; j < t; ++j) {
        const int64_t dy = i / win_w - j / win_w + win_h - 1;
        const int64_t dx = i % win_w - j % win_w + win_w - 1;
        (*idx)[o++] = h * span_h * span_w + dy * span_w + dx;
      }
  return gather(table, Shape{heads, t, t}, idx);
}

namespace {

// Linear interpolation taps mapping `out` samples onto `in` samples with both
// end points aligned (and the centre fixed).
std::vector<std::pair<int64_t, double>> axis_taps(int64_t in, int64_t out, int64_t o) {
  double src = out == 1 ? (in - 1) / 2.0 : static_cast<double>(o) * (in - 1) / static_cast<double>(out - 1);
  const auto lo = static_cast<int64_t>(std::floor(src));
  const double frac = src - static_cast<double>(lo);
  if (lo + 1 >= in || frac == 0.0) return {{std::min(lo, in - 1), 1.0}};
  return {{lo, 1.0 - frac}, {lo + 1, frac}};
}

}  // namespace

template <typename T>
BasicTensor<T> resize_rpe_table(const BasicTensor<T>& table, int64_t from_h, int64_t from_w,
                                 int64_t to_h, int64_t to_w) {
  const int64_t in_h = offset_extent(from_h), in_w = offset_extent(from_w);
  if (table.rank() != 2 || table.dim(1) != in_h * in_w) {
    throw ShapeError("resize_rpe_table: table " + table.shape().str() + " does not match footage");
  }
  if (from_h == to_h && from_w == to_w) return table;
  const int64_t heads = table.dim(0);
  const int64_t out_h = offset_extent(to_h), out_w = offset_extent(to_w);
  auto map = std::make_shared<SparseMap>();
  map->row_ptr.push_back(0);
  for (int64_t h = 0; h < heads; ++h)
    for (int64_t y = 0; y < out_h; ++y) {
      const auto ty = axis_taps(in_h, out_h, y);
      for (int64_t x = 0; x < out_w; ++x) {
        const auto tx = axis_taps(in_w, out_w, x);
        for (const auto& [sy, wy] : ty)
          for (const auto& [sx, wx] : tx) {
            map->cols.push_back(h * in_h * in_w + sy * in_w + sx);
            map->weights.push_back(wy * wx);
          }
        map->row_ptr.push_back(static_cast<int64_t>(map->cols.size()));
      }
    }
  return sparse_apply<T>(table, Shape{heads, out_h * out_w}, map);
}

template <typename T>
BasicTensor<T> multihead_self_attention(const BasicTensor<T>& tokens, const AttentionParams<T>& params,
                                        const BasicTensor<T>& bias, std::span<const uint8_t> key_valid) {
  if (tokens.rank() != 3) throw ShapeError("multihead_self_attention: tokens must be [B,T,C]");
  const int64_t c = tokens.dim(2);
  if (params.heads < 1 || c % params.heads != 0) {
    throw ShapeError("multihead_self_attention: width " + std::to_string(c) +
                     " not divisible by heads " + std::to_string(params.heads));
  }
  if (params.width() != c) throw ShapeError("multihead_self_attention: params width mismatch");
  const int64_t d = c / params.heads;
  const auto qkv = linear(tokens, params.qkv_weight, params.qkv_bias);
  const auto q = split_heads(qkv, params.heads, 0, 3);
  const auto k = split_heads(qkv, params.heads, 1, 3);
  const auto v = split_heads(qkv, params.heads, 2, 3);
  auto scores = scale(batched_matmul(q, transpose_last2(k)), T(1) / std::sqrt(T(d)));
  if (bias.defined()) scores = add_head_bias(scores, bias);
  if (!key_valid.empty()) scores = mask_keys(scores, key_valid);
  const auto attn = softmax_lastdim(scores);
  const auto mixed = merge_heads(batched_matmul(attn, v));
  return linear(mixed, params.out_weight, params.out_bias);
}

namespace {

enum class Axis { kBlock, kGrid };

template <typename T>
BasicTensor<T> partitioned_attention(const BasicTensor<T>& x, const AttentionParams<T>& params,
                                     AttentionMode mode, AttentionOptions options, Axis axis) {
  if (x.rank() != 4) throw ShapeError("attention: input must be [N,C,H,W]");
  const auto plan = adaptive_footage(x.dim(2), x.dim(3), mode);
  const bool block = axis == Axis::kBlock;
  const auto canvas = pad_for_plan(x, plan);
  const auto tokens = block ? window_partition(canvas, plan) : grid_partition(canvas, plan);

  BasicTensor<T> bias;
  if (params.has_rpe()) {
    const int64_t fh = block ? plan.win_h : plan.grid_h;
    const int64_t fw = block ? plan.win_w : plan.grid_w;
    const auto table = resize_rpe_table(params.rpe_table, params.rpe_h, params.rpe_w, fh, fw);
    bias = relative_position_bias(fh, fw, table, params.heads);
  }
  std::vector<uint8_t> valid;
  if (options.mask_padding) {
    valid = block ? window_token_valid(plan, x.dim(0)) : grid_token_valid(plan, x.dim(0));
  }
  const auto mixed = multihead_self_attention(tokens, params, bias, valid);
  const auto restored = block ? window_reverse(mixed, plan) : grid_reverse(mixed, plan);
  return crop_to_original(restored, plan);
}

}  // namespace

template <typename T>
BasicTensor<T> adaptive_block_attention(const BasicTensor<T>& x, const AttentionParams<T>& params,
                                        AttentionMode mode, AttentionOptions options) {
  return partitioned_attention(x, params, mode, options, Axis::kBlock);
}

template <typename T>
BasicTensor<T> adaptive_grid_attention(const BasicTensor<T>& x, const AttentionParams<T>& params,
                                       AttentionMode mode, AttentionOptions options) {
  return partitioned_attention(x, params, mode, options, Axis::kGrid);
}

#define MAXSR_INSTANTIATE(T)                                                                         \
  template BasicTensor<T> relative_position_bias(int64_t, int64_t, const BasicTensor<T>&, int64_t); \
  template BasicTensor<T> resize_rpe_table(const BasicTensor<T>&, int64_t, int64_t, int64_t,        \
                                           int64_t);                                                 \
  template BasicTensor<T> multihead_self_attention(const BasicTensor<T>&, const AttentionParams<T>&, \
                                                   const BasicTensor<T>&, std::span<const uint8_t>); \
  template BasicTensor<T> adaptive_block_attention(const BasicTensor<T>&,                            \
                                                   const AttentionParams<T>&, AttentionMode,         \
                                                   AttentionOptions);                                \
  template BasicTensor<T> adaptive_grid_attention(const BasicTensor<T>&, const AttentionParams<T>&, \
                                                  AttentionMode, AttentionOptions);

MAXSR_INSTANTIATE(float)
MAXSR_INSTANTIATE(double)
#undef MAXSR_INSTANTIATE

}  // namespace maxsr
