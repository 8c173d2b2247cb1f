#pragma once

#include <string>
#include <utility>
#include <vector>

#include "vmscan/autodiff.hpp"
#include "vmscan/model_config.hpp"
#include "vmscan/tensor.hpp"

namespace vmscan {

/// Pixel image with values in [0,1]; pixels are [H*W, channels] row-major.
struct Image {
  long height = 0;
  long width = 0;
  long channels = 3;
  Tensor pixels;
};

/// Sliding-window token grid: floor((image - patch) / stride) + 1 per axis.
/// Trailing pixels that do not fill a window are dropped.
inline GridShape grid_dims(long image_h, long image_w, const PatchConfig& cfg) {
  cfg.validate();
  if (image_h < cfg.patch_size || image_w < cfg.patch_size)
    throw std::invalid_argument("grid_dims: image " + std::to_string(image_h) + "x" +
                                std::to_string(image_w) + " smaller than patch " +
                                std::to_string(cfg.patch_size));
  return GridShape{(image_h - cfg.patch_size) / cfg.stride + 1,
                   (image_w - cfg.patch_size) / cfg.stride + 1};
}

/// Linear embedding of each flattened patch; token (i,j) covers the window
/// whose top-left pixel is (i*stride, j*stride). weights: [patch^2*ch, embed],
/// bias: [embed].
inline Tensor extract_patches(const Image& img, const PatchConfig& cfg,
                              const Tensor& weights, const Tensor& bias) {
  const long flat = cfg.patch_size * cfg.patch_size * img.channels;
  if (weights.rank() != 2 || weights.dim(0) != flat || weights.dim(1) != cfg.embed_dim)
    throw std::invalid_argument("extract_patches: weights must be [" + std::to_string(flat) +
                                "," + std::to_string(cfg.embed_dim) + "], got " +
                                shape_string(weights.shape()));
  Tape tape;
  Value v = tape.linear(
      tape.patch_gather(tape.leaf(img.pixels), img.height, img.width, cfg.patch_size, cfg.stride),
      tape.leaf(weights), tape.leaf(bias));
  return tape.value(v);
}

/// FLOPs and parameter totals for one configuration. The convention counts
/// 1 MAC = 2 FLOPs over embedding, linear layers, depthwise convolutions
/// and scan recurrences; normalization, activations and interpolation are
/// excluded, so every counted term is proportional to token count.
struct FlopReport {
  double total_flops = 0.0;
  long param_count = 0;
  std::vector<std::pair<std::string, double>> per_stage;
};

inline FlopReport estimate_flops(const ModelConfig& cfg, long input_h, long input_w) {
  cfg.validate();
  FlopReport rep;
  GridShape grid = grid_dims(input_h, input_w, cfg.patch);
  const long N = cfg.state_dim;
  const long K = cfg.num_classes;

  auto add_stage = [&rep](const std::string& name, double macs) {
    rep.per_stage.emplace_back(name, 2.0 * macs);
    rep.total_flops += 2.0 * macs;
  };

  const double L1 = static_cast<double>(grid.cells());
  add_stage("embed", L1 * static_cast<double>(cfg.patch.patch_size * cfg.patch.patch_size *
                                              cfg.in_channels * cfg.patch.embed_dim));
  rep.param_count += cfg.patch.patch_size * cfg.patch.patch_size * cfg.in_channels *
                         cfg.patch.embed_dim + cfg.patch.embed_dim;

  GridShape g = grid;
  for (int i = 0; i < 4; ++i) {
    const long d = cfg.stage_dims[static_cast<size_t>(i)];
    const long depth = cfg.stage_depths[static_cast<size_t>(i)];
    double macs = 0.0;
    if (i > 0) {
      g = GridShape{(g.rows + 1) / 2, (g.cols + 1) / 2};
      if (depth > 0) {
        const long dprev = cfg.stage_dims[static_cast<size_t>(i - 1)];
        macs += static_cast<double>(g.cells()) * static_cast<double>(4 * dprev * d);
        rep.param_count += 4 * dprev * d + d;
      }
    }
    const double L = static_cast<double>(g.cells());
    // Per block: in/gate/out projections, dwconv, and eight scan slots of
    // delta/B/C projections plus the 4-MAC recurrence per channel-state.
    const double per_block =
        L * (3.0 * d * d + 9.0 * d + 8.0 * (d + 2.0 * N * d + 4.0 * d * N));
    macs += static_cast<double>(depth) * per_block;
    rep.param_count += depth * (2 * d +                 // norm
                                3 * (d * d + d) +       // in/gate/out projections
                                9 * d +                 // dwconv kernel
                                2 * d +                 // delta projection + bias
                                2 * (N * d + N) +       // B/C projections + biases
                                d * N +                 // diagonal A
                                d);                     // skip D
    add_stage("stage" + std::to_string(i + 1), macs);
  }

  // Decoder: per-token classifier over the concatenated pyramid of active
  // stages; a blockless model classifies the raw embedding.
  long pyramid = 0;
  for (int i = 0; i < 4; ++i)
    if (cfg.stage_depths[static_cast<size_t>(i)] > 0) pyramid += cfg.stage_dims[static_cast<size_t>(i)];
  if (pyramid == 0) pyramid = cfg.stage_dims[0];
  add_stage("decoder", L1 * static_cast<double>(pyramid * K));
  rep.param_count += pyramid * K + K;

  return rep;
}

}  // namespace vmscan
