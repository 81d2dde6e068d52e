#pragma once

// Geometry of one Max-SA pass: how a feature map is zero-padded and split into
// block-attention windows and grid-attention cells, plus the closed-form count
// of query-key pairs a pass evaluates.
//
// Adaptive footage uses windows of ceil(sqrt(H)) x ceil(sqrt(W)). In exact
// mode the canvas is padded to ceil(sqrt(H))^2 x ceil(sqrt(W))^2 so window and
// grid footage coincide; approx mode pads only to the next multiple of the
// window and shrinks the grid to the window count. Fixed mode reproduces the
// original MaxViT layout with P x P windows and P x P grids.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "maxsr/tensor.hpp"

namespace maxsr {

enum class FootageKind { kAdaptiveExact, kAdaptiveApprox, kFixed };

struct AttentionMode {
  FootageKind kind = FootageKind::kAdaptiveExact;
  int64_t fixed_size = 0;  // P, only for kFixed

  static AttentionMode exact() { return {FootageKind::kAdaptiveExact, 0}; }
  static AttentionMode approx() { return {FootageKind::kAdaptiveApprox, 0}; }
  static AttentionMode fixed(int64_t p) { return {FootageKind::kFixed, p}; }

  // Accepts "exact", "approx" or "fixed:P" (also "adaptive_exact",
  // "adaptive_approx"); throws std::invalid_argument otherwise.
  static AttentionMode parse(const std::string& text);
  std::string str() const;

  bool operator==(const AttentionMode&) const = default;
};

struct PartitionPlan {
  int64_t orig_h = 0, orig_w = 0;
  AttentionMode mode;
  int64_t pad_h = 0, pad_w = 0;
  int64_t win_h = 0, win_w = 0;
  int64_t grid_h = 0, grid_w = 0;
  int64_t n_win_h = 0, n_win_w = 0;

  int64_t window_count() const { return n_win_h * n_win_w; }
  int64_t window_tokens() const { return win_h * win_w; }
  // Spacing between members of a grid cell; also the cell count per axis.
  int64_t cell_stride_h() const { return pad_h / grid_h; }
  int64_t cell_stride_w() const { return pad_w / grid_w; }
  int64_t cell_count() const { return cell_stride_h() * cell_stride_w(); }
  int64_t cell_tokens() const { return grid_h * grid_w; }

  // True when both plans describe the same canvas, windows and grids,
  // regardless of which mode produced them.
  bool same_geometry(const PartitionPlan& other) const;
};

int64_t ceil_sqrt(int64_t n);

PartitionPlan adaptive_footage(int64_t h, int64_t w, AttentionMode mode);

// Throws ShapeError unless the plan satisfies its mode's invariants.
void validate_plan(const PartitionPlan& plan);

// Source indices into an [N,C,pad_h,pad_w] canvas, laid out as the
// [N*n_win, T, C] window tensor / [N*n_cell, G, C] grid tensor.
std::vector<int64_t> window_index_map(const PartitionPlan& plan, int64_t n, int64_t c);
std::vector<int64_t> grid_index_map(const PartitionPlan& plan, int64_t n, int64_t c);

// Per-token flag (1 = original pixel, 0 = padding) in window / grid order,
// sized N*n_win*T / N*n_cell*G.
std::vector<uint8_t> window_token_valid(const PartitionPlan& plan, int64_t n);
std::vector<uint8_t> grid_token_valid(const PartitionPlan& plan, int64_t n);

// Canvas pixel (row, col) of token `t` in window/cell `k` (single image).
std::pair<int64_t, int64_t> window_pixel(const PartitionPlan& plan, int64_t k, int64_t t);
std::pair<int64_t, int64_t> grid_pixel(const PartitionPlan& plan, int64_t k, int64_t t);

template <typename T>
BasicTensor<T> pad_for_plan(const BasicTensor<T>& x, const PartitionPlan& plan);
template <typename T>
BasicTensor<T> crop_to_original(const BasicTensor<T>& x, const PartitionPlan& plan);
template <typename T>
BasicTensor<T> window_partition(const BasicTensor<T>& x, const PartitionPlan& plan);
template <typename T>
BasicTensor<T> window_reverse(const BasicTensor<T>& tokens, const PartitionPlan& plan);
template <typename T>
BasicTensor<T> grid_partition(const BasicTensor<T>& x, const PartitionPlan& plan);
template <typename T>
BasicTensor<T> grid_reverse(const BasicTensor<T>& tokens, const PartitionPlan& plan);

// Query-key pairs for one block pass plus one grid pass:
// n_win * T^2 + n_cell * G^2.
int64_t attention_cost(const PartitionPlan& plan);

// Single global attention over all H*W tokens: (H*W)^2.
int64_t global_attention_cost(int64_t h, int64_t w);

// Least-squares slope of log(y) against log(x).
double loglog_slope(std::span<const double> x, std::span<const double> y);

}  // namespace maxsr
