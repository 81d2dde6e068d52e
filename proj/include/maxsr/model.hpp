#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "maxsr/blocks.hpp"
#include "maxsr/partition.hpp"
#include "maxsr/tensor.hpp"

namespace maxsr {

struct ModelConfig {
  int64_t blocks = 16;  // B
  int64_t stages = 4;   // S
  int64_t width = 128;  // W
  int64_t heads = 4;
  int64_t scale = 2;    // r
  AttentionMode attention = AttentionMode::exact();
  bool rpe = false;
  bool mask_padding = false;
  // LR training patch extent; sizes relative-position tables when rpe is on.
  int64_t train_patch = 64;

  static ModelConfig maxsr(int64_t scale = 2);
  static ModelConfig maxsr_light(int64_t scale = 2);

  // Throws std::invalid_argument when B % S != 0, width % heads != 0, or any
  // field is out of range.
  void validate() const;

  bool operator==(const ModelConfig&) const = default;
};

// Strict JSON mapping; unknown keys are rejected.
void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

template <typename T>
struct OptimizerMoments {
  std::vector<std::vector<T>> first;
  std::vector<std::vector<T>> second;
  int64_t step = 0;
};

template <typename T>
struct ModelState {
  ModelConfig config;  // structure this state was built for
  SfebParams<T> sfeb;
  std::vector<AMTBParams<T>> amtbs;
  HffbParams<T> hffb;
  RbParams<T> rb;
  // Adam moments, indexed like trainable_tensors(); empty until first step.
  OptimizerMoments<T> moments;
};

template <typename T>
struct NamedTensor {
  std::string name;
  BasicTensor<T> tensor;  // aliases the state's storage
  bool trainable = true;  // false for normalization running statistics
};

// Every tensor of the state in a fixed order. The name set is a pure
// function of the config.
template <typename T>
std::vector<NamedTensor<T>> named_tensors(const ModelState<T>& state);

template <typename T>
std::vector<NamedTensor<T>> trainable_tensors(const ModelState<T>& state);

template <typename T>
ModelState<T> build_model(const ModelConfig& config, uint64_t seed);

// SFEB -> B AMTBs (stage outputs after every L-th) -> HFFB -> RB.
// `config` supplies the attention mode and masking; its structural fields
// must match the state. No clamping is applied to the output.
template <typename T>
BasicTensor<T> forward(ModelState<T>& state, const ModelConfig& config, const BasicTensor<T>& x,
                       bool training = false);

// Scalar parameter count, excluding normalization running statistics.
template <typename T>
int64_t param_count(const ModelState<T>& state);

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct LoadedModel {
  ModelConfig config;
  ModelState<float> state;
};

// Binary layout (little-endian): "MAXSR1\0", u8 version, u32 + JSON config,
// u32 tensor count, then per tensor u16 + name, u8 dtype (0 = f32), u8 rank,
// u32 dims, raw values. Written to a temporary file and renamed into place.
void save_checkpoint(const ModelState<float>& state, const ModelConfig& config,
                     const std::filesystem::path& path);

LoadedModel load_checkpoint(const std::filesystem::path& path);

// Loads tensors into an existing state. Names starting with any of
// `skip_prefixes` are ignored on both sides (fine-tuning a new scale from an
// x2 checkpoint skips "rb."). The state is untouched if anything fails.
void load_checkpoint_into(ModelState<float>& state, const std::filesystem::path& path,
                          const std::vector<std::string>& skip_prefixes = {});

}  // namespace maxsr
