#pragma once

// The four architectural parts of the network: shallow feature extraction,
// the adaptive MaxViT block, hierarchical feature fusion and reconstruction.

#include <cstdint>
#include <random>
#include <utility>
#include <vector>

#include "maxsr/attention.hpp"
#include "maxsr/partition.hpp"
#include "maxsr/tensor.hpp"

namespace maxsr {

template <typename T>
struct ConvParams {
  BasicTensor<T> weight;  // [Cout, Cin/groups, k, k]
  BasicTensor<T> bias;    // [Cout]
};

template <typename T>
struct AffineParams {
  BasicTensor<T> gamma;
  BasicTensor<T> beta;
};

template <typename T>
struct BatchNormParams {
  BasicTensor<T> gamma;
  BasicTensor<T> beta;
  BasicTensor<T> running_mean;
  BasicTensor<T> running_var;
};

// Inverted bottleneck: norm -> 1x1 expand (W -> 4W) -> GELU -> 3x3 depthwise
// -> GELU -> squeeze-and-excitation -> 1x1 project (4W -> W), plus residual.
template <typename T>
struct MBConvParams {
  BatchNormParams<T> norm;
  ConvParams<T> expand;
  ConvParams<T> depthwise;
  ConvParams<T> se_reduce;  // 4W -> W
  ConvParams<T> se_expand;  // W -> 4W
  ConvParams<T> project;
};

// Pre-norm attention followed by a pre-norm 4x GELU feed-forward, each with
// its own residual.
template <typename T>
struct AttentionUnitParams {
  AffineParams<T> attn_norm;
  AttentionParams<T> attn;
  AffineParams<T> ffn_norm;
  ConvParams<T> fc1;  // 1x1, W -> 4W
  ConvParams<T> fc2;  // 1x1, 4W -> W
};

template <typename T>
struct AMTBParams {
  MBConvParams<T> mbconv;
  AttentionUnitParams<T> block;
  AttentionUnitParams<T> grid;
};

template <typename T>
struct SfebParams {
  ConvParams<T> conv1;  // 3 -> W
  ConvParams<T> conv2;  // W -> W
};

template <typename T>
struct HffbParams {
  ConvParams<T> fuse;  // 1x1, S*W -> W
  ConvParams<T> conv;  // 3x3, W -> W
};

template <typename T>
struct RbParams {
  std::vector<int64_t> factors;        // pixel-shuffle factor per upsampling stage
  std::vector<ConvParams<T>> upsample; // 3x3, W -> W*f*f
  ConvParams<T> output;                // 3x3, W -> 3
};

// B blocks split into S stages of L = B / S; stage outputs are taken after
// blocks L, 2L, ..., B (1-based).
struct StagePlan {
  int64_t blocks = 0;
  int64_t stages = 0;
  int64_t per_stage = 0;
  std::vector<int64_t> fusion_indices;

  static StagePlan make(int64_t blocks, int64_t stages);
  bool is_fusion_point(int64_t one_based_index) const { return one_based_index % per_stage == 0; }
};

struct BlockContext {
  AttentionMode mode;
  AttentionOptions options;
  bool training = false;
};

// Upsampling stages for a scale factor: x2/x3 one stage, x4 two x2 stages,
// x8 three x2 stages. Throws std::invalid_argument for anything else.
std::vector<int64_t> upsample_factors(int64_t scale);

// Deterministic parameter initialization. Weights and biases of a layer with
// fan-in f are drawn from U(-1/sqrt(f), 1/sqrt(f)).
class ParamInit {
 public:
  explicit ParamInit(uint64_t seed) : rng_(seed) {}

  template <typename T>
  BasicTensor<T> uniform(const Shape& shape, int64_t fan_in);

  template <typename T>
  ConvParams<T> conv(int64_t in, int64_t out, int64_t kernel, int64_t groups = 1);

  template <typename T>
  AffineParams<T> affine(int64_t channels);

  template <typename T>
  BatchNormParams<T> batch_norm(int64_t channels);

  template <typename T>
  AttentionParams<T> attention(int64_t width, int64_t heads, bool rpe, int64_t rpe_h, int64_t rpe_w);

  template <typename T>
  AttentionUnitParams<T> attention_unit(int64_t width, int64_t heads, bool rpe, int64_t rpe_h,
                                        int64_t rpe_w);

  template <typename T>
  MBConvParams<T> mbconv(int64_t width);

 private:
  std::mt19937_64 rng_;
};

template <typename T>
std::pair<BasicTensor<T>, BasicTensor<T>> sfeb_forward(const BasicTensor<T>& x,
                                                       const SfebParams<T>& params);

template <typename T>
BasicTensor<T> mbconv_se_forward(const BasicTensor<T>& x, MBConvParams<T>& params, bool training);

template <typename T>
BasicTensor<T> attention_unit_forward(const BasicTensor<T>& x, const AttentionUnitParams<T>& params,
                                      const BlockContext& ctx, bool grid);

template <typename T>
BasicTensor<T> amtb_forward(const BasicTensor<T>& x, AMTBParams<T>& params, const BlockContext& ctx);

template <typename T>
BasicTensor<T> hffb_forward(const BasicTensor<T>& f_minus1, const std::vector<BasicTensor<T>>& stage_outputs,
                            const HffbParams<T>& params);

template <typename T>
BasicTensor<T> rb_forward(const BasicTensor<T>& h, const RbParams<T>& params);

}  // namespace maxsr
