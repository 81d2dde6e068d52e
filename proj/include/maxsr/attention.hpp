#pragma once

// Multi-head self-attention over token sets, and its composition with the
// partition geometry into block attention (inside each window) and grid
// attention (across windows, inside each dilated grid cell).

#include <cstdint>
#include <span>

#include "maxsr/partition.hpp"
#include "maxsr/tensor.hpp"

namespace maxsr {

template <typename T>
struct AttentionParams {
  int64_t heads = 1;
  BasicTensor<T> qkv_weight;  // [3C, C], fused query/key/value projection
  BasicTensor<T> qkv_bias;    // [3C]
  BasicTensor<T> out_weight;  // [C, C]
  BasicTensor<T> out_bias;    // [C]
  // Relative position bias, [heads, (2*rpe_h-1)*(2*rpe_w-1)]; undefined when
  // disabled. rpe_h x rpe_w is the footage the table was built for.
  BasicTensor<T> rpe_table;
  int64_t rpe_h = 0, rpe_w = 0;

  int64_t width() const { return out_weight.dim(0); }
  int64_t head_dim() const { return width() / heads; }
  bool has_rpe() const { return rpe_table.defined(); }
};

struct AttentionOptions {
  // Exclude zero-padding tokens from every softmax instead of letting them
  // participate as ordinary keys.
  bool mask_padding = false;
};

// bias(h, i, j) = table[h, offset(pos_i - pos_j)] for tokens laid out
// row-major on a win_h x win_w footage. Returns [heads, T, T].
template <typename T>
BasicTensor<T> relative_position_bias(int64_t win_h, int64_t win_w, const BasicTensor<T>& table,
                                      int64_t heads);

// Bilinearly resamples a [heads, (2*from_h-1)*(2*from_w-1)] offset table to the
// offset grid of a to_h x to_w footage; the zero offset stays at the centre.
template <typename T>
BasicTensor<T> resize_rpe_table(const BasicTensor<T>& table, int64_t from_h, int64_t from_w,
                                 int64_t to_h, int64_t to_w);

// softmax(Q K^T / sqrt(d) + bias) V per head, heads concatenated and
// projected. tokens: [B, T, C]; bias: [heads, T, T] or undefined;
// key_valid: empty, or B*T flags marking keys that may be attended.
template <typename T>
BasicTensor<T> multihead_self_attention(const BasicTensor<T>& tokens, const AttentionParams<T>& params,
                                        const BasicTensor<T>& bias = {},
                                        std::span<const uint8_t> key_valid = {});

// pad -> window_partition -> MHSA -> window_reverse -> crop; shape preserving.
template <typename T>
BasicTensor<T> adaptive_block_attention(const BasicTensor<T>& x, const AttentionParams<T>& params,
                                        AttentionMode mode, AttentionOptions options = {});

// pad -> grid_partition -> MHSA -> grid_reverse -> crop; shape preserving.
template <typename T>
BasicTensor<T> adaptive_grid_attention(const BasicTensor<T>& x, const AttentionParams<T>& params,
                                       AttentionMode mode, AttentionOptions options = {});

}  // namespace maxsr
