#pragma once

// Differentiable forward operations. All are templates over the scalar type
// and explicitly instantiated for float and double.

#include <cstdint>
#include <memory>
#include <span>
#include <vector>

#include "maxsr/tensor.hpp"

namespace maxsr {

// Cross-correlation, [N,Cin,H,W] x [Cout,Cin/groups,kh,kw] -> [N,Cout,H',W'].
// `bias` may be undefined.
template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& input, const BasicTensor<T>& weight,
                      const BasicTensor<T>& bias, int64_t stride = 1, int64_t pad = 0,
                      int64_t groups = 1);

// [...,m,k] x [...,k,n] -> [...,m,n] with equal leading dims.
template <typename T>
BasicTensor<T> batched_matmul(const BasicTensor<T>& a, const BasicTensor<T>& b);

// Swaps the two trailing axes.
template <typename T>
BasicTensor<T> transpose_last2(const BasicTensor<T>& x);

// y = x W^T + b over the last axis; weight is [out,in], bias [out] or undefined.
template <typename T>
BasicTensor<T> linear(const BasicTensor<T>& x, const BasicTensor<T>& weight,
                      const BasicTensor<T>& bias);

template <typename T>
BasicTensor<T> softmax_lastdim(const BasicTensor<T>& x);

// Normalizes over axis 1 independently at every position of the trailing
// axes ([N,C], [N,C,L] or [N,C,H,W]); gamma/beta are [C].
template <typename T>
BasicTensor<T> layer_norm(const BasicTensor<T>& x, const BasicTensor<T>& gamma,
                          const BasicTensor<T>& beta, T eps = T(1e-5));

// Per-channel normalization of [N,C,H,W] over (N,H,W). In training mode batch
// statistics are used and the running buffers are updated in place with
// `momentum`; otherwise the running statistics are used.
template <typename T>
BasicTensor<T> batch_norm(const BasicTensor<T>& x, const BasicTensor<T>& gamma,
                          const BasicTensor<T>& beta, BasicTensor<T>& running_mean,
                          BasicTensor<T>& running_var, bool training, T momentum = T(0.1),
                          T eps = T(1e-5));

// [N,C*r*r,H,W] -> [N,C,H*r,W*r], out(n,c,h*r+i,w*r+j) = in(n,c*r*r+i*r+j,h,w).
template <typename T>
BasicTensor<T> pixel_shuffle(const BasicTensor<T>& x, int64_t r);
template <typename T>
BasicTensor<T> pixel_unshuffle(const BasicTensor<T>& x, int64_t r);

// [N,C,H,W] -> [N,C,1,1]
template <typename T>
BasicTensor<T> global_avg_pool(const BasicTensor<T>& x);

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& x, T factor);
template <typename T>
BasicTensor<T> gelu(const BasicTensor<T>& x);
template <typename T>
BasicTensor<T> sigmoid(const BasicTensor<T>& x);
template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& x);
template <typename T>
BasicTensor<T> abs(const BasicTensor<T>& x);

// Stacks [N,Ci,H,W] tensors along axis 1.
template <typename T>
BasicTensor<T> concat_channels(const std::vector<BasicTensor<T>>& parts);

// x[N,C,H,W] * s[N,C,1,1], the squeeze-and-excitation gate.
template <typename T>
BasicTensor<T> scale_channels(const BasicTensor<T>& x, const BasicTensor<T>& s);

// scores[B,h,T,T] + bias[h,T,T] broadcast over B.
template <typename T>
BasicTensor<T> add_head_bias(const BasicTensor<T>& scores, const BasicTensor<T>& bias);

// Replaces scores[b,:,:,j] by a large negative constant wherever
// key_valid[b*T + j] is zero, so those keys receive no attention weight.
template <typename T>
BasicTensor<T> mask_keys(const BasicTensor<T>& scores, std::span<const uint8_t> key_valid);

template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& x);
template <typename T>
BasicTensor<T> mean(const BasicTensor<T>& x);

// mean(|a - b|); the subgradient at exact ties is 0.
template <typename T>
BasicTensor<T> l1_loss(const BasicTensor<T>& prediction, const BasicTensor<T>& target);

// Index map shared by gather-style ops: out[i] = in[index[i]], or 0 where
// index[i] < 0. Backward scatter-adds into the input.
using IndexMap = std::shared_ptr<const std::vector<int64_t>>;

template <typename T>
BasicTensor<T> gather(const BasicTensor<T>& x, const Shape& out_shape, IndexMap index);

// Sparse linear map: out[i] = sum_k weights[k] * in[cols[k]] for k in
// [row_ptr[i], row_ptr[i+1]).
struct SparseMap {
  std::vector<int64_t> row_ptr;
  std::vector<int64_t> cols;
  std::vector<double> weights;
};

template <typename T>
BasicTensor<T> sparse_apply(const BasicTensor<T>& x, const Shape& out_shape,
                            std::shared_ptr<const SparseMap> map);

// Multi-head helpers on token tensors.
// [B,T,parts*heads*d] -> chunk `part` as [B,heads,T,d]
template <typename T>
BasicTensor<T> split_heads(const BasicTensor<T>& x, int64_t heads, int64_t part, int64_t parts);
// [B,heads,T,d] -> [B,T,heads*d]
template <typename T>
BasicTensor<T> merge_heads(const BasicTensor<T>& x);

}  // namespace maxsr
