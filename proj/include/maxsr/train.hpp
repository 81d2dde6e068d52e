#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"
#include "maxsr/image.hpp"
#include "maxsr/model.hpp"

namespace maxsr {

struct TrainConfig {
  int64_t batch = 32;
  double lr0 = 2e-4;
  std::vector<int64_t> milestones{250000, 400000, 450000, 475000, 500000};
  double decay = 2.0;
  int64_t total_iters = 500000;
  int64_t patch_lr = 64;
  uint64_t seed = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  bool augment = true;
  int64_t log_every = 1;  // trace granularity in iterations

  void validate() const;
  // Schedule for fine-tuning a new scale from an x2 model: learning rate,
  // iteration count and milestones halved, rounding down.
  TrainConfig finetune() const;

  bool operator==(const TrainConfig&) const = default;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

// One LR/HR pair; tensors are [3,h,w] and [3,h*r,w*r].
struct TrainImage {
  std::string id;
  Tensor lr;
  Tensor hr;
};

struct PatchPair {
  Tensor lr_patch;  // [3,p,p]
  Tensor hr_patch;  // [3,p*r,p*r]
  size_t image = 0;
  int64_t top = 0;  // LR coordinates
  int64_t left = 0;
};

Tensor mae_loss(const Tensor& prediction, const Tensor& target);

// Uniform image, then uniform top-left over the valid LR positions.
PatchPair sample_patch_pair(const std::vector<TrainImage>& dataset, int64_t scale, int64_t patch,
                            std::mt19937_64& rng);

PatchPair augment(const PatchPair& pair, int code);

double lr_schedule(int64_t iter, const TrainConfig& cfg);

struct AdamHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// One bias-corrected Adam step over `params` using their accumulated grads
// (a tensor without a grad counts as zero). Moments are created on first use.
template <typename T>
void adam_step(std::vector<BasicTensor<T>>& params, OptimizerMoments<T>& moments, double lr,
               const AdamHyper& hyper);

template <typename T>
void adam_step(ModelState<T>& state, double lr, const AdamHyper& hyper);

struct LossRecord {
  int64_t iter = 0;
  double loss = 0.0;
  double lr = 0.0;
};

struct TrainResult {
  std::vector<LossRecord> trace;
};

// Sample, augment, forward, MAE, backward, Adam. A non-finite loss aborts with
// a NumericError naming the iteration.
TrainResult train(ModelState<float>& state, const ModelConfig& config, const std::vector<TrainImage>& dataset,
                  const TrainConfig& cfg, const std::function<void(const LossRecord&)>& on_record = {});

// "iteration,loss,lr" with one row per record.
std::string loss_csv(const std::vector<LossRecord>& trace);

// HR image cropped to multiples of `scale` and its antialiased bicubic
// downscale.
TrainImage make_train_image(const std::string& id, const FloatImage& hr, int64_t scale);

// Smooth random colour fields (sums of oriented sinusoids plus a ramp).
std::vector<TrainImage> synthetic_dataset(int64_t count, int64_t hr_size, int64_t scale, uint64_t seed);

// Every PNG under `dir`, sorted by name.
std::vector<TrainImage> load_train_directory(const std::filesystem::path& dir, int64_t scale);

}  // namespace maxsr
